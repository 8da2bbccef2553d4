#pragma once

#include <span>
#include <vector>

#include "nca/autodiff.hpp"

namespace nca::ad {

// Scales each parameter's gradient to unit L2 norm (no-op for an all-zero gradient).
void normalize_gradients(std::span<Parameter* const> params, float eps = 1e-8f);

// Bias-corrected first/second moment update. Gradients are zeroed after each step.
class AdamOptimizer {
 public:
  struct State {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    long long t = 0;
  };

  AdamOptimizer(float beta1 = 0.9f, float beta2 = 0.999f, float eps = 1e-8f)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::span<Parameter* const> params, float lr);

  const State& state() const { return state_; }
  void set_state(State s) { state_ = std::move(s); }

 private:
  float beta1_;
  float beta2_;
  float eps_;
  State state_;
};

}  // namespace nca::ad
