#include "nca/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace nca::ad {

void normalize_gradients(std::span<Parameter* const> params, float eps) {
  for (Parameter* p : params) {
    double sq = 0.0;
    for (float g : p->grad.data()) sq += static_cast<double>(g) * g;
    if (sq == 0.0) continue;
    const float inv = static_cast<float>(1.0 / (std::sqrt(sq) + eps));
    for (float& g : p->grad.data()) g *= inv;
  }
}

void AdamOptimizer::step(std::span<Parameter* const> params, float lr) {
  if (state_.m.empty()) {
    for (Parameter* p : params) {
      state_.m.emplace_back(p->value.dims());
      state_.v.emplace_back(p->value.dims());
    }
  }
  if (state_.m.size() != params.size()) throw std::invalid_argument("AdamOptimizer: parameter set changed");
  ++state_.t;
  const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), static_cast<double>(state_.t));
  const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), static_cast<double>(state_.t));
  for (size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    Tensor& m = state_.m[k];
    Tensor& v = state_.v[k];
    if (!m.same_shape(p.value)) throw std::invalid_argument("AdamOptimizer: moment shape mismatch for " + p.name);
    for (size_t i = 0; i < p.value.size(); ++i) {
      const float g = p.grad[i];
      m[i] = beta1_ * m[i] + (1.0f - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0f - beta2_) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.value[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps_));
    }
    p.zero_grad();
  }
}

}  // namespace nca::ad
