#pragma once

#include "mbp/autodiff.hpp"

#include <span>
#include <vector>

namespace mbp {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over the trainable subset of a parameter list. Frozen parameters are
// never touched, even if their gradient buffers are non-zero.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Param*> params, AdamConfig config);

  void step();
  void zero_grad();
  long long steps() const { return t_; }
  const AdamConfig& config() const { return config_; }
  std::span<Param* const> params() const { return params_; }

  // First and second moments, aligned with params().
  std::vector<Mat>& first_moments() { return m_; }
  std::vector<Mat>& second_moments() { return v_; }
  void set_steps(long long t) { t_ = t; }

 private:
  std::vector<Param*> params_;
  AdamConfig config_;
  std::vector<Mat> m_, v_;
  long long t_ = 0;
};

}  // namespace mbp
