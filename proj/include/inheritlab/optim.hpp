#pragma once

#include <span>
#include <vector>

#include "inheritlab/tensor.hpp"

namespace ilab {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

// Adam with per-parameter learning rates. Moment buffers are allocated on
// the first step and keyed by position in the parameter list.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // `lr_scale` multiplies the configured rate for each parameter (empty means 1).
  void step(std::span<Tensor* const> params, std::span<const Tensor> grads,
            std::span<const double> lr_scale = {});
  long steps() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return cfg_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_global_norm(std::span<Tensor> grads, double max_norm);

}  // namespace ilab
