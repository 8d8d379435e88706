#include "inheritlab/optim.hpp"

#include <cmath>

#include "inheritlab/error.hpp"

namespace ilab {

void Adam::step(std::span<Tensor* const> params, std::span<const Tensor> grads,
                std::span<const double> lr_scale) {
  require(params.size() == grads.size(), "adam: parameter and gradient counts differ");
  require(lr_scale.empty() || lr_scale.size() == params.size(), "adam: lr_scale size mismatch");
  if (m_.empty()) {
    for (const Tensor* p : params) {
      m_.push_back(Tensor::zeros_like(*p));
      v_.push_back(Tensor::zeros_like(*p));
    }
  }
  require(m_.size() == params.size(), "adam: parameter list changed between steps");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    require(p.size() == g.size(), "adam: gradient shape mismatch");
    const double lr = cfg_.lr * (lr_scale.empty() ? 1.0 : lr_scale[i]);
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      p[j] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * p[j]);
    }
  }
}

double clip_global_norm(std::span<Tensor> grads, double max_norm) {
  double sq = 0.0;
  for (const Tensor& g : grads)
    for (double x : g.values()) sq += x * x;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (Tensor& g : grads)
      for (double& x : g.values()) x *= s;
  }
  return norm;
}

}  // namespace ilab
