#pragma once

#include "mbp/autodiff.hpp"

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mbp {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GradCheckEntry {
  std::string name;
  Index coords = 0;
  double max_rel_error = 0.0;
  Index worst_index = -1;
  bool passed = true;
};

struct GradCheckFailure {
  std::string param;
  Index index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  std::vector<GradCheckFailure> failures;
  double threshold = 1e-4;
  double step = 1e-5;

  bool passed() const { return failures.empty(); }
  double max_rel_error() const;
  // Tab-separated, one row per parameter tensor.
  std::string to_table() const;
};

// |a - n| / max(1, |a|, |n|)
double relative_error(double analytic, double numeric);

// Central-difference check of `gradient` against `value`.
//
// `gradient` must leave d value / d param in Param::grad for every listed
// parameter; grad_check zeroes the buffers before calling it. Every coordinate
// of every parameter is perturbed by +-h.
GradCheckReport grad_check(std::span<Param* const> params, const std::function<double()>& value,
                           const std::function<void()>& gradient, double h = 1e-5, double threshold = 1e-4);

}  // namespace mbp
