// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records one forward computation. Every op appends a node holding its
// value and a closure that pushes the node's gradient into its inputs. Model
// parameters live outside the tape as Param objects; gradients that reach a
// Param are accumulated into Param::grad. Frozen parameters (trainable ==
// false) still propagate gradients to their downstream activations but skip
// their own weight-gradient work unless the tape runs in GradMode::All.
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace mbp {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Param {
  std::string name;
  Mat value;
  Mat grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, Mat v) : name(std::move(n)), value(std::move(v)), grad(Mat::Zero(value.rows(), value.cols())) {}
  Param(std::string n, Index rows, Index cols)
      : name(std::move(n)), value(Mat::Zero(rows, cols)), grad(Mat::Zero(rows, cols)) {}

  Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

namespace ad {

class Tape;

// Which parameters receive gradients. Trainable: only Param::trainable ones.
// All: frozen parameters too (diagnostics). None: inference, nothing is
// recorded for the backward pass.
enum class GradMode { Trainable, All, None };

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Mat& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  explicit Tape(GradMode mode = GradMode::Trainable) : mode_(mode) { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value);
  // Free variable with its own gradient slot (used by tests and grad checks).
  Var variable(Mat value);
  // Leaf bound to a parameter; the value is referenced, not copied.
  Var leaf(Param& p);

  // Appends an op node. needs_grad is derived from the inputs.
  Var push(Mat value, std::initializer_list<int> inputs, BackwardFn fn);
  Var push(Mat value, std::span<const int> inputs, BackwardFn fn);
  // Node whose gradient flows into a parameter directly (e.g. embedding gather).
  Var push_param_op(Mat value, Param& p, std::span<const int> inputs, BackwardFn fn);

  void backward(Var root, double seed = 1.0);

  const Mat& value(int id) const {
    const auto& n = nodes_[static_cast<std::size_t>(id)];
    return n.external ? *n.external : n.value;
  }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  // Gradient slot of a node, zero-initialised on first access.
  Mat& grad_ref(int id);
  const Mat& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() > 0; }
  bool param_wants_grad(const Param& p) const {
    return mode_ == GradMode::All || (mode_ == GradMode::Trainable && p.trainable);
  }
  GradMode mode() const { return mode_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    const Mat* external = nullptr;
    Mat grad;
    Param* param = nullptr;
    bool needs_grad = false;
    BackwardFn backward;
  };

  GradMode mode_;
  std::vector<Node> nodes_;
};

inline const Mat& Var::value() const { return tape_->value(id_); }

// Elementwise and linear algebra.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_row(Var a, Var row);
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var add_n(std::span<const Var> xs);

// Activations.
Var gelu(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var softplus(Var a);
Var softmax_rows(Var a);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-12);

// Shape manipulation.
Var concat_cols(std::span<const Var> xs);
Var concat_rows(std::span<const Var> xs);
Var slice_rows(Var a, Index start, Index n);
Var slice_cols(Var a, Index start, Index n);
Var reshape(Var a, Index rows, Index cols);
Var broadcast_rows(Var row, Index n);
Var mask_rows(Var a, std::span<const std::uint8_t> keep);
Var select_rows(Var a, std::span<const int> idx);
// Rows of a parameter table; negative indices produce zero rows.
Var gather_rows(Tape& tape, Param& table, std::span<const int> idx);

// Reductions.
Var sum(Var a);
Var dot(Var a, Var b);
Var mean_rows(Var a);

// Scalar helpers shared with fused kernels.
double gelu_value(double x);
double gelu_derivative(double x);
double softplus_value(double x);
double sigmoid_value(double x);

}  // namespace ad
}  // namespace mbp
