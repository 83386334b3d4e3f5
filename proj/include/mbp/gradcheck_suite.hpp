// Finite-difference checks of every learnable operation on a small model.
#pragma once

#include "mbp/gradcheck.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mbp {

struct GradSuiteConfig {
  Index dim = 8;
  Index seq_len = 8;
  int k = 2;
  int n_factors = 2;
  int n_tokens = 2;
  int layers = 2;
  int n_behaviors = 3;
  int n_items = 12;
  std::uint64_t seed = 7;
  double step = 1e-5;
  double threshold = 1e-4;
};

struct GradCheckCase {
  std::string name;
  GradCheckReport report;
};

std::vector<GradCheckCase> run_gradcheck_suite(const GradSuiteConfig& cfg = {});

// One row per (case, parameter tensor).
std::string gradcheck_table(const std::vector<GradCheckCase>& cases);

}  // namespace mbp
