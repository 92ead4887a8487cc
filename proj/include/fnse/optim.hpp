#pragma once

#include <vector>

#include "fnse/nn.hpp"

namespace fnse::nn {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam. Frozen parameters are skipped entirely, as are
// parameters that have not accumulated a gradient.
class Adam {
 public:
  Adam(ParamRefs params, AdamConfig cfg = {});

  void step();
  void zero_grad();
  long steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  ParamRefs params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace fnse::nn
