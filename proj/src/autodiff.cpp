#include "mbp/autodiff.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mbp::ad {

Var Tape::constant(Mat value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::variable(Mat value) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = mode_ != GradMode::None;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::leaf(Param& p) {
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.needs_grad = param_wants_grad(p);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::push(Mat value, std::initializer_list<int> inputs, BackwardFn fn) {
  return push(std::move(value), std::span<const int>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Tape::push(Mat value, std::span<const int> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (int i : inputs) n.needs_grad = n.needs_grad || needs_grad(i);
  if (n.needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::push_param_op(Mat value, Param& p, std::span<const int> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = param_wants_grad(p);
  for (int i : inputs) n.needs_grad = n.needs_grad || needs_grad(i);
  if (n.needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

Mat& Tape::grad_ref(int id) {
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) {
    const Mat& v = n.external ? *n.external : n.value;
    n.grad = Mat::Zero(v.rows(), v.cols());
  }
  return n.grad;
}

void Tape::backward(Var root, double seed) {
  if (root.tape() != this) throw std::invalid_argument("backward: root belongs to another tape");
  if (!needs_grad(root.id())) return;
  grad_ref(root.id()).setConstant(seed);
  for (int id = root.id(); id >= 0; --id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, id);
    if (n.param != nullptr && param_wants_grad(*n.param)) n.param->grad += n.grad;
  }
}

namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw std::invalid_argument("operation on an empty Var");
  return *a.tape();
}

void require_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

}  // namespace

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

double softplus_value(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a);
  require_same_shape(a.value(), b.value(), "add");
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
    if (t.needs_grad(ia)) t.grad_ref(ia) += t.grad(self);
    if (t.needs_grad(ib)) t.grad_ref(ib) += t.grad(self);
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a);
  require_same_shape(a.value(), b.value(), "sub");
  const int ia = a.id(), ib = b.id();
  return t.push(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
    if (t.needs_grad(ia)) t.grad_ref(ia) += t.grad(self);
    if (t.needs_grad(ib)) t.grad_ref(ib) -= t.grad(self);
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a);
  require_same_shape(a.value(), b.value(), "mul");
  const int ia = a.id(), ib = b.id();
  return t.push(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape& t, int self) {
    if (t.needs_grad(ia)) t.grad_ref(ia) += t.grad(self).cwiseProduct(t.value(ib));
    if (t.needs_grad(ib)) t.grad_ref(ib) += t.grad(self).cwiseProduct(t.value(ia));
  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  return t.push(a.value() * s, {ia}, [ia, s](Tape& t, int self) { t.grad_ref(ia) += s * t.grad(self); });
}

Var add_row(Var a, Var row) {
  Tape& t = tape_of(a);
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: bias must be 1 x cols");
  const int ia = a.id(), ir = row.id();
  Mat out = a.value();
  out.rowwise() += row.value().row(0);
  return t.push(std::move(out), {ia, ir}, [ia, ir](Tape& t, int self) {
    if (t.needs_grad(ia)) t.grad_ref(ia) += t.grad(self);
    if (t.needs_grad(ir)) t.grad_ref(ir) += t.grad(self).colwise().sum();
  });
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  const int ia = a.id(), ib = b.id();
  Mat out = a.value() * b.value();
  return t.push(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    if (t.needs_grad(ia)) t.grad_ref(ia).noalias() += t.grad(self) * t.value(ib).transpose();
    if (t.needs_grad(ib)) t.grad_ref(ib).noalias() += t.value(ia).transpose() * t.grad(self);
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = tape_of(a);
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  const int ia = a.id(), ib = b.id();
  Mat out = a.value() * b.value().transpose();
  return t.push(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    if (t.needs_grad(ia)) t.grad_ref(ia).noalias() += t.grad(self) * t.value(ib);
    if (t.needs_grad(ib)) t.grad_ref(ib).noalias() += t.grad(self).transpose() * t.value(ia);
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  Mat out = a.value().transpose();
  return t.push(std::move(out), {ia}, [ia](Tape& t, int self) { t.grad_ref(ia) += t.grad(self).transpose(); });
}

Var add_n(std::span<const Var> xs) {
  if (xs.empty()) throw std::invalid_argument("add_n: empty input");
  Tape& t = tape_of(xs[0]);
  Mat out = xs[0].value();
  std::vector<int> ids{xs[0].id()};
  for (std::size_t i = 1; i < xs.size(); ++i) {
    require_same_shape(out, xs[i].value(), "add_n");
    out += xs[i].value();
    ids.push_back(xs[i].id());
  }
  return t.push(std::move(out), ids, [ids](Tape& t, int self) {
    for (int i : ids)
      if (t.needs_grad(i)) t.grad_ref(i) += t.grad(self);
  });
}

Var gelu(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  Mat out = a.value().unaryExpr([](double x) { return gelu_value(x); });
  return t.push(std::move(out), {ia}, [ia](Tape& t, int self) {
    t.grad_ref(ia) += t.grad(self).cwiseProduct(t.value(ia).unaryExpr([](double x) { return gelu_derivative(x); }));
  });
}

Var sigmoid(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  Mat out = a.value().unaryExpr([](double x) { return sigmoid_value(x); });
  return t.push(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Mat& y = t.value(self);
    t.grad_ref(ia) += t.grad(self).cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix()));
  });
}

Var tanh(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  Mat out = a.value().array().tanh().matrix();
  return t.push(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Mat& y = t.value(self);
    t.grad_ref(ia) += t.grad(self).cwiseProduct((1.0 - y.array().square()).matrix());
  });
}

Var softplus(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  Mat out = a.value().unaryExpr([](double x) { return softplus_value(x); });
  return t.push(std::move(out), {ia}, [ia](Tape& t, int self) {
    t.grad_ref(ia) += t.grad(self).cwiseProduct(t.value(ia).unaryExpr([](double x) { return sigmoid_value(x); }));
  });
}

Var softmax_rows(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  const Mat& x = a.value();
  Mat out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return t.push(std::move(out), {ia}, [ia](Tape& t, int self) {
    const Mat& y = t.value(self);
    const Mat& g = t.grad(self);
    Mat& ga = t.grad_ref(ia);
    for (Index r = 0; r < y.rows(); ++r) {
      const double s = g.row(r).dot(y.row(r));
      ga.row(r).array() += y.row(r).array() * (g.row(r).array() - s);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& t = tape_of(x);
  const Mat& xv = x.value();
  const Index n = xv.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n)
    throw std::invalid_argument("layer_norm: gain/bias must be 1 x cols");
  Mat xhat(xv.rows(), n);
  Eigen::VectorXd inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Mat out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  const int ix = x.id(), ig = gain.id(), ib = bias.id();
  return t.push(std::move(out), {ix, ig, ib},
                [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int self) {
                  const Mat& g = t.grad(self);
                  if (t.needs_grad(ig)) t.grad_ref(ig) += g.cwiseProduct(xhat).colwise().sum();
                  if (t.needs_grad(ib)) t.grad_ref(ib) += g.colwise().sum();
                  if (t.needs_grad(ix)) {
                    const auto gain_row = t.value(ig).row(0).array();
                    Mat& gx = t.grad_ref(ix);
                    for (Index r = 0; r < g.rows(); ++r) {
                      const Eigen::ArrayXd dxhat = (g.row(r).array() * gain_row).transpose();
                      const Eigen::ArrayXd xh = xhat.row(r).array().transpose();
                      const double m1 = dxhat.mean();
                      const double m2 = (dxhat * xh).mean();
                      gx.row(r).array() += (inv_std(r) * (dxhat - m1 - xh * m2)).transpose();
                    }
                  }
                });
}

Var concat_cols(std::span<const Var> xs) {
  if (xs.empty()) throw std::invalid_argument("concat_cols: empty input");
  Tape& t = tape_of(xs[0]);
  const Index rows = xs[0].rows();
  Index cols = 0;
  std::vector<int> ids;
  std::vector<Index> offsets;
  for (const Var& v : xs) {
    if (v.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    offsets.push_back(cols);
    cols += v.cols();
    ids.push_back(v.id());
  }
  Mat out(rows, cols);
  for (std::size_t i = 0; i < xs.size(); ++i) out.middleCols(offsets[i], xs[i].cols()) = xs[i].value();
  return t.push(std::move(out), ids, [ids, offsets](Tape& t, int self) {
    const Mat& g = t.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!t.needs_grad(ids[i])) continue;
      Mat& gi = t.grad_ref(ids[i]);
      gi += g.middleCols(offsets[i], gi.cols());
    }
  });
}

Var concat_rows(std::span<const Var> xs) {
  if (xs.empty()) throw std::invalid_argument("concat_rows: empty input");
  Tape& t = tape_of(xs[0]);
  const Index cols = xs[0].cols();
  Index rows = 0;
  std::vector<int> ids;
  std::vector<Index> offsets;
  for (const Var& v : xs) {
    if (v.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    offsets.push_back(rows);
    rows += v.rows();
    ids.push_back(v.id());
  }
  Mat out(rows, cols);
  for (std::size_t i = 0; i < xs.size(); ++i) out.middleRows(offsets[i], xs[i].rows()) = xs[i].value();
  return t.push(std::move(out), ids, [ids, offsets](Tape& t, int self) {
    const Mat& g = t.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!t.needs_grad(ids[i])) continue;
      Mat& gi = t.grad_ref(ids[i]);
      gi += g.middleRows(offsets[i], gi.rows());
    }
  });
}

Var slice_rows(Var a, Index start, Index n) {
  Tape& t = tape_of(a);
  if (start < 0 || n < 0 || start + n > a.rows()) throw std::out_of_range("slice_rows: range outside matrix");
  const int ia = a.id();
  Mat out = a.value().middleRows(start, n);
  return t.push(std::move(out), {ia}, [ia, start, n](Tape& t, int self) {
    t.grad_ref(ia).middleRows(start, n) += t.grad(self);
  });
}

Var slice_cols(Var a, Index start, Index n) {
  Tape& t = tape_of(a);
  if (start < 0 || n < 0 || start + n > a.cols()) throw std::out_of_range("slice_cols: range outside matrix");
  const int ia = a.id();
  Mat out = a.value().middleCols(start, n);
  return t.push(std::move(out), {ia}, [ia, start, n](Tape& t, int self) {
    t.grad_ref(ia).middleCols(start, n) += t.grad(self);
  });
}

Var reshape(Var a, Index rows, Index cols) {
  Tape& t = tape_of(a);
  if (rows * cols != a.value().size()) throw std::invalid_argument("reshape: size mismatch");
  const int ia = a.id();
  const Index r0 = a.rows(), c0 = a.cols();
  Mat out = Eigen::Map<const Mat>(a.value().data(), rows, cols);
  return t.push(std::move(out), {ia}, [ia, r0, c0](Tape& t, int self) {
    t.grad_ref(ia) += Eigen::Map<const Mat>(t.grad(self).data(), r0, c0);
  });
}

Var broadcast_rows(Var row, Index n) {
  Tape& t = tape_of(row);
  if (row.rows() != 1) throw std::invalid_argument("broadcast_rows: expected a single row");
  const int ir = row.id();
  Mat out = row.value().replicate(n, 1);
  return t.push(std::move(out), {ir}, [ir](Tape& t, int self) { t.grad_ref(ir) += t.grad(self).colwise().sum(); });
}

Var mask_rows(Var a, std::span<const std::uint8_t> keep) {
  Tape& t = tape_of(a);
  if (static_cast<Index>(keep.size()) != a.rows()) throw std::invalid_argument("mask_rows: mask length mismatch");
  const int ia = a.id();
  std::vector<std::uint8_t> k(keep.begin(), keep.end());
  Mat out = a.value();
  for (Index r = 0; r < out.rows(); ++r)
    if (!k[static_cast<std::size_t>(r)]) out.row(r).setZero();
  return t.push(std::move(out), {ia}, [ia, k = std::move(k)](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Mat& ga = t.grad_ref(ia);
    for (Index r = 0; r < g.rows(); ++r)
      if (k[static_cast<std::size_t>(r)]) ga.row(r) += g.row(r);
  });
}

Var select_rows(Var a, std::span<const int> idx) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  std::vector<int> ix(idx.begin(), idx.end());
  Mat out(static_cast<Index>(ix.size()), a.cols());
  for (std::size_t i = 0; i < ix.size(); ++i) {
    if (ix[i] < 0 || ix[i] >= a.rows()) throw std::out_of_range("select_rows: index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(ix[i]);
  }
  return t.push(std::move(out), {ia}, [ia, ix = std::move(ix)](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Mat& ga = t.grad_ref(ia);
    for (std::size_t i = 0; i < ix.size(); ++i) ga.row(ix[i]) += g.row(static_cast<Index>(i));
  });
}

Var gather_rows(Tape& t, Param& table, std::span<const int> idx) {
  std::vector<int> ix(idx.begin(), idx.end());
  Mat out = Mat::Zero(static_cast<Index>(ix.size()), table.value.cols());
  for (std::size_t i = 0; i < ix.size(); ++i) {
    if (ix[i] >= table.value.rows())
      throw std::out_of_range("gather_rows: index " + std::to_string(ix[i]) + " out of range for table '" +
                              table.name + "' with " + std::to_string(table.value.rows()) + " rows");
    if (ix[i] >= 0) out.row(static_cast<Index>(i)) = table.value.row(ix[i]);
  }
  Param* p = &table;
  return t.push_param_op(std::move(out), table, {}, [p, ix = std::move(ix)](Tape& t, int self) {
    if (!t.param_wants_grad(*p)) return;
    const Mat& g = t.grad(self);
    for (std::size_t i = 0; i < ix.size(); ++i)
      if (ix[i] >= 0) p->grad.row(ix[i]) += g.row(static_cast<Index>(i));
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push(std::move(out), {ia}, [ia](Tape& t, int self) { t.grad_ref(ia).array() += t.grad(self)(0, 0); });
}

Var dot(Var a, Var b) {
  Tape& t = tape_of(a);
  require_same_shape(a.value(), b.value(), "dot");
  const int ia = a.id(), ib = b.id();
  Mat out(1, 1);
  out(0, 0) = a.value().cwiseProduct(b.value()).sum();
  return t.push(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
    const double g = t.grad(self)(0, 0);
    if (t.needs_grad(ia)) t.grad_ref(ia) += g * t.value(ib);
    if (t.needs_grad(ib)) t.grad_ref(ib) += g * t.value(ia);
  });
}

Var mean_rows(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id();
  const double inv = 1.0 / static_cast<double>(a.rows());
  Mat out = a.value().colwise().mean();
  return t.push(std::move(out), {ia}, [ia, inv](Tape& t, int self) {
    t.grad_ref(ia).rowwise() += inv * t.grad(self).row(0);
  });
}

}  // namespace mbp::ad
