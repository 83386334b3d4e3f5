#include "mbp/autodiff.hpp"
#include "mbp/gradcheck.hpp"
#include "mbp/gradcheck_suite.hpp"
#include "test_util.hpp"

#include <functional>

#include "doctest.h"

using namespace mbp;

namespace {

// Checks d/dx sum(W .* f(x...)) for random W.
GradCheckReport check_op(std::vector<Param>& inputs, const std::function<ad::Var(ad::Tape&, std::vector<ad::Var>&)>& f,
                         std::uint64_t seed) {
  Mat weights;
  {
    ad::Tape t(ad::GradMode::None);
    std::vector<ad::Var> xs;
    for (auto& p : inputs) xs.push_back(t.leaf(p));
    const ad::Var y = f(t, xs);
    Rng rng(seed);
    weights = test::random_mat(y.rows(), y.cols(), rng);
  }
  auto run = [&](ad::GradMode mode, bool backward) {
    ad::Tape t(mode);
    std::vector<ad::Var> xs;
    for (auto& p : inputs) xs.push_back(t.leaf(p));
    const ad::Var out = ad::sum(ad::mul(f(t, xs), t.constant(weights)));
    if (backward) t.backward(out);
    return out.scalar();
  };
  std::vector<Param*> ps;
  for (auto& p : inputs) ps.push_back(&p);
  return grad_check(ps, [&] { return run(ad::GradMode::None, false); }, [&] { run(ad::GradMode::All, true); });
}

std::vector<Param> params_of(std::initializer_list<std::pair<Index, Index>> shapes, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Param> out;
  int i = 0;
  for (auto [r, c] : shapes) out.emplace_back("x" + std::to_string(i++), test::random_mat(r, c, rng));
  return out;
}

}  // namespace

TEST_SUITE("numerics") {
  TEST_CASE("relative error definition") {
    CHECK(relative_error(6.0, 6.0) == 0.0);
    CHECK(relative_error(0.5, 0.25) == doctest::Approx(0.25));
    CHECK(relative_error(10.0, 5.0) == doctest::Approx(0.5));
  }

  TEST_CASE("polynomial") {
    Param theta("theta", Mat::Constant(1, 1, 3.0));
    std::vector<Param*> ps = {&theta};
    const GradCheckReport r = grad_check(
        ps, [&] { return theta.value(0, 0) * theta.value(0, 0); }, [&] { theta.grad(0, 0) = 2.0 * theta.value(0, 0); });
    CHECK(r.passed());
    CHECK(r.max_rel_error() < 1e-8);
  }

  TEST_CASE("planted fault is reported at exactly that coordinate") {
    Param w("w", Mat::Zero(2, 3));
    Rng rng(1);
    w.value = test::random_mat(2, 3, rng);
    const Mat x = test::random_mat(3, 1, rng);
    auto value = [&] { return (w.value * x).squaredNorm(); };
    auto gradient = [&](bool fault) {
      w.grad = 2.0 * (w.value * x) * x.transpose();
      if (fault) w.grad(1, 2) *= 1.1;
    };
    std::vector<Param*> ps = {&w};
    CHECK(grad_check(ps, value, [&] { gradient(false); }).passed());
    const GradCheckReport bad = grad_check(ps, value, [&] { gradient(true); });
    REQUIRE(bad.failures.size() == 1);
    CHECK(bad.failures[0].index == 1 * 3 + 2);
    CHECK(bad.entries[0].worst_index == 5);
  }

  TEST_CASE("elementwise and linear ops") {
    using F = std::function<ad::Var(ad::Tape&, std::vector<ad::Var>&)>;
    const std::vector<std::pair<const char*, F>> unary = {
        {"gelu", [](ad::Tape&, auto& x) { return ad::gelu(x[0]); }},
        {"sigmoid", [](ad::Tape&, auto& x) { return ad::sigmoid(x[0]); }},
        {"tanh", [](ad::Tape&, auto& x) { return ad::tanh(x[0]); }},
        {"softplus", [](ad::Tape&, auto& x) { return ad::softplus(x[0]); }},
        {"softmax_rows", [](ad::Tape&, auto& x) { return ad::softmax_rows(x[0]); }},
        {"transpose", [](ad::Tape&, auto& x) { return ad::transpose(x[0]); }},
        {"scale", [](ad::Tape&, auto& x) { return ad::scale(x[0], -1.5); }},
        {"reshape", [](ad::Tape&, auto& x) { return ad::reshape(x[0], 4, 3); }},
        {"slice_rows", [](ad::Tape&, auto& x) { return ad::slice_rows(x[0], 1, 2); }},
        {"slice_cols", [](ad::Tape&, auto& x) { return ad::slice_cols(x[0], 2, 2); }},
        {"mean_rows", [](ad::Tape&, auto& x) { return ad::mean_rows(x[0]); }},
        {"select_rows", [](ad::Tape&, auto& x) { return ad::select_rows(x[0], std::vector<int>{2, 0, 2}); }},
        {"mask_rows", [](ad::Tape&, auto& x) { return ad::mask_rows(x[0], std::vector<std::uint8_t>{1, 0, 1}); }},
    };
    for (const auto& [name, f] : unary) {
      CAPTURE(name);
      auto ps = params_of({{3, 4}}, 2);
      CHECK(check_op(ps, f, 3).passed());
    }
    auto binary = params_of({{3, 4}, {3, 4}}, 4);
    CHECK(check_op(binary, [](ad::Tape&, auto& x) { return ad::mul(x[0], ad::sub(x[1], x[0])); }, 5).passed());
    CHECK(check_op(binary, [](ad::Tape&, auto& x) { return ad::matmul_nt(x[0], x[1]); }, 5).passed());
    CHECK(check_op(binary, [](ad::Tape&, auto& x) { return ad::concat_cols(std::vector<ad::Var>{x[0], x[1]}); }, 5)
              .passed());
    CHECK(check_op(binary, [](ad::Tape&, auto& x) { return ad::concat_rows(std::vector<ad::Var>{x[1], x[0]}); }, 5)
              .passed());
    auto mm = params_of({{3, 4}, {4, 2}, {1, 2}}, 6);
    CHECK(check_op(mm, [](ad::Tape&, auto& x) { return ad::add_row(ad::matmul(x[0], x[1]), x[2]); }, 7).passed());
    CHECK(check_op(mm, [](ad::Tape&, auto& x) { return ad::broadcast_rows(x[2], 3); }, 7).passed());
    auto ln = params_of({{3, 5}, {1, 5}, {1, 5}}, 8);
    CHECK(check_op(ln, [](ad::Tape&, auto& x) { return ad::layer_norm(x[0], x[1], x[2]); }, 9).passed());
    auto dots = params_of({{1, 4}, {1, 4}}, 10);
    CHECK(check_op(dots, [](ad::Tape&, auto& x) { return ad::dot(x[0], x[1]); }, 11).passed());
  }

  TEST_CASE("gather accumulates repeated rows and ignores negative indices") {
    Param table("t", Mat::Zero(4, 2));
    Rng rng(12);
    table.value = test::random_mat(4, 2, rng);
    ad::Tape t(ad::GradMode::All);
    const std::vector<int> idx = {1, -1, 1, 3};
    const ad::Var g = ad::gather_rows(t, table, idx);
    CHECK(g.value().row(1).isZero(0.0));
    t.backward(ad::sum(g));
    CHECK(table.grad(1, 0) == 2.0);
    CHECK(table.grad(3, 1) == 1.0);
    CHECK(table.grad(0, 0) == 0.0);
  }

  TEST_CASE("frozen parameters pass gradients through without receiving them") {
    Param w("w", Mat::Constant(2, 2, 0.5));
    Param x("x", Mat::Constant(1, 2, 1.0));
    w.trainable = false;
    ad::Tape t(ad::GradMode::Trainable);
    t.backward(ad::sum(ad::matmul(t.leaf(x), t.leaf(w))));
    CHECK(w.grad.isZero(0.0));
    CHECK(x.grad(0, 0) == doctest::Approx(1.0));
  }

  TEST_CASE("inference tape records no backward work") {
    Param x("x", Mat::Constant(1, 2, 1.0));
    ad::Tape t(ad::GradMode::None);
    const ad::Var y = ad::sum(ad::gelu(t.leaf(x)));
    CHECK_FALSE(t.needs_grad(y.id()));
  }

  TEST_CASE("learnable operations pass the finite-difference suite") {
    const auto cases = run_gradcheck_suite();
    CHECK(cases.size() >= 10);
    for (const auto& c : cases) {
      CAPTURE(c.name);
      CHECK(c.report.passed());
      CHECK(c.report.max_rel_error() < 1e-4);
    }
    const std::string table = gradcheck_table(cases);
    CHECK(table.find("pretrain_loss") != std::string::npos);
  }
}
