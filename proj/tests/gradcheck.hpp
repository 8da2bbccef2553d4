#pragma once

// Central finite-difference checks against the tape's reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "nca/autodiff.hpp"
#include "nca/nca.hpp"
#include "nca/style_loss.hpp"
#include "oracles.hpp"

namespace gradcheck {

using nca::Tensor;
namespace ad = nca::ad;

struct Result {
  double max_rel = 0.0;
  double max_abs = 0.0;
  int coords = 0;
  int refined = 0;  // coordinates whose +-h segment crossed a branch and needed a smaller step
};

// |a - n| / max(|a|, |n|, floor): the floor keeps coordinates whose true
// derivative is zero from dividing rounding noise by nothing.
inline double rel_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline void fold(Result& r, double analytic, double numeric, double floor) {
  r.max_rel = std::max(r.max_rel, rel_error(analytic, numeric, floor));
  r.max_abs = std::max(r.max_abs, std::abs(analytic - numeric));
  ++r.coords;
}

// Checks d(sum(op(x) * R))/dx for a fixed random R at `coords` random coordinates.
// The weighted sum is formed in double so only the op's own rounding enters the
// difference quotient. Inputs must keep +-h away from the op's branch points.
inline Result op(const std::function<ad::Var(ad::Tape&, ad::Var)>& f, const Tensor& x, int coords, std::mt19937& gen,
                 double h = 1e-3, double floor = 1e-2) {
  Tensor weights;
  auto loss_of = [&](const Tensor& input, Tensor* grad) {
    ad::Tape tape;
    ad::Var in = grad ? tape.leaf(input) : tape.constant(input);
    ad::Var y = f(tape, in);
    if (weights.empty()) {
      std::uniform_real_distribution<float> u(-1.0f, 1.0f);
      weights = Tensor(tape.value(y).dims());
      for (float& v : weights.data()) v = u(gen);
    }
    if (grad) {
      ad::backward(tape, ad::sum(tape, ad::mul(tape, y, tape.constant(weights))));
      *grad = tape.grad(in).empty() ? Tensor(input.dims()) : tape.grad(in);
    }
    double s = 0.0;
    const Tensor& yv = tape.value(y);
    for (size_t i = 0; i < yv.size(); ++i) s += static_cast<double>(yv[i]) * weights[i];
    return s;
  };
  Tensor analytic;
  loss_of(x, &analytic);
  Result r;
  std::uniform_int_distribution<size_t> pick(0, x.size() - 1);
  for (int i = 0; i < coords; ++i) {
    const size_t k = pick(gen);
    Tensor xp = x, xm = x;
    xp[k] += static_cast<float>(h);
    xm[k] -= static_cast<float>(h);
    const double step = static_cast<double>(xp[k]) - xm[k];
    const double numeric = (loss_of(xp, nullptr) - loss_of(xm, nullptr)) / step;
    fold(r, analytic[k], numeric, floor);
  }
  return r;
}

// Full pipeline: rollout of `steps` NCA steps, RGB slice, feature extraction and
// SWL against a fixed target.
struct NcaProblem {
  nca::UpdateRuleParams params;
  Tensor initial;  // [n,H,W]
  nca::style::FeatureExtractorSpec extractor;
  Tensor exemplar;
  nca::style::ProjectionSet proj;
  nca::UpdateMask mask;
  int steps = 3;
  int checkpoint_every = 1;

  // Library loss; fills the flattened parameter gradient when asked.
  double loss(Tensor* grads_out);
  // Independent double-precision loss for a flattened parameter vector.
  double oracle_loss(const std::vector<double>& flat, oracle::Pattern* pat) const;
  std::vector<double> flat_params() const;
};

inline NcaProblem make_nca_problem(uint64_t seed, int height = 6, int width = 6) {
  NcaProblem p;
  const nca::ModelShape shape{8, 16, 1};
  nca::Rng rng(seed, nca::Rng::init);
  p.params = nca::UpdateRuleParams::initial(shape, rng);
  // A non-zero output layer so every parameter influences the loss.
  for (float& v : p.params.w2.value.data()) v = 0.05f * rng.normal();
  for (float& v : p.params.b2.value.data()) v = 0.01f * rng.normal();
  p.initial = Tensor({shape.channels, height, width});
  for (float& v : p.initial.data()) v = rng.uniform();
  p.extractor = nca::style::FeatureExtractorSpec::builtin(2);
  p.exemplar = Tensor({3, height, width});
  for (float& v : p.exemplar.data()) v = rng.uniform();
  const auto channels = p.extractor.tap_channels();
  p.proj = nca::style::ProjectionSet::draw(channels, 8, rng);
  p.mask = {0.5f, seed, 0};
  return p;
}

inline double NcaProblem::loss(Tensor* grads_out) {
  ad::Tape tape;
  for (auto* q : params.list()) q->zero_grad();
  const auto vars = nca::ParamVars::bind(tape, params);
  ad::Var state = tape.constant(initial);
  state = nca::rollout(tape, state, vars, steps, mask, checkpoint_every);
  ad::Var rgb = ad::slice_channels(tape, state, 0, 3);
  const auto feats = nca::style::extract_features(tape, rgb, extractor);
  std::vector<ad::Var> tvars;
  for (const Tensor& t : nca::style::extract_features(exemplar, extractor)) tvars.push_back(tape.constant(t));
  ad::Var l = nca::style::swl(tape, feats, tvars, proj);
  if (grads_out) {
    ad::backward(tape, l);
    std::vector<float> all;
    for (const auto* q : params.list()) all.insert(all.end(), q->grad.data().begin(), q->grad.data().end());
    const int count = static_cast<int>(all.size());
    *grads_out = Tensor({count}, std::move(all));
  }
  return tape.value(l).item();
}

inline std::vector<double> NcaProblem::flat_params() const {
  std::vector<double> flat;
  for (const auto* q : params.list())
    for (float v : q->value.data()) flat.push_back(v);
  return flat;
}

inline double NcaProblem::oracle_loss(const std::vector<double>& flat, oracle::Pattern* pat) const {
  oracle::Rule rule;
  size_t at = 0;
  for (auto* dst : {&rule.w1, &rule.b1, &rule.w2, &rule.b2}) {
    const size_t count = dst == &rule.w1   ? params.w1.value.size()
                         : dst == &rule.b1 ? params.b1.value.size()
                         : dst == &rule.w2 ? params.w2.value.size()
                                           : params.b2.value.size();
    dst->assign(flat.begin() + static_cast<long>(at), flat.begin() + static_cast<long>(at + count));
    at += count;
  }
  oracle::DTensor state = oracle::of(initial);
  for (int s = 0; s < steps; ++s)
    state = oracle::step(state, rule, nca::fire_mask(mask, mask.step_offset + s, state.h, state.w), pat);
  oracle::DTensor rgb(3, state.h, state.w);
  std::copy_n(state.v.begin(), rgb.v.size(), rgb.v.begin());
  const auto fa = oracle::features(rgb, extractor, pat);
  const auto fb = oracle::features(oracle::of(exemplar), extractor);
  return oracle::swl(fa, fb, proj, pat);
}

// Checks every parameter coordinate against central differences of the double
// oracle with step h. When the +-h segment crosses a ReLU, pooling or sorting
// branch, the difference quotient does not estimate the derivative, so the step
// shrinks by 10x until both ends share one smooth piece.
inline Result nca_full(NcaProblem& p, double h = 1e-3, double floor_fraction = 1e-4) {
  Tensor analytic;
  p.loss(&analytic);
  double gmax = 0.0;
  for (float g : analytic.data()) gmax = std::max(gmax, static_cast<double>(std::abs(g)));
  const std::vector<double> base = p.flat_params();
  Result r;
  for (size_t k = 0; k < base.size(); ++k) {
    double step = h, numeric = 0.0;
    for (int attempt = 0; attempt < 6; ++attempt, step /= 10.0) {
      std::vector<double> up = base, down = base;
      up[k] += step;
      down[k] -= step;
      oracle::Pattern pu, pd;
      const double lu = p.oracle_loss(up, &pu), ld = p.oracle_loss(down, &pd);
      numeric = (lu - ld) / (2.0 * step);
      if (pu == pd) break;
    }
    if (step < h) ++r.refined;
    fold(r, analytic[k], numeric, floor_fraction * gmax);
  }
  return r;
}

}  // namespace gradcheck
