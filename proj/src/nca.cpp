#include "nca/nca.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "nca/kernels.hpp"

namespace nca {

// ---- CellGrid -------------------------------------------------------------

CellGrid::CellGrid(int channels, int genome_channels, int height, int width)
    : CellGrid(Tensor({channels, height, width}), genome_channels) {}

CellGrid::CellGrid(Tensor state, int genome_channels) : state_(std::move(state)), genome_channels_(genome_channels) {
  if (state_.rank() != 3) throw std::invalid_argument("CellGrid: state must be [n,H,W], got " + shape_str(state_.dims()));
  if (genome_channels_ < 0 || state_.dim(0) < 3 + genome_channels_)
    throw std::invalid_argument("CellGrid: need n >= 3 + n_g (n=" + std::to_string(state_.dim(0)) +
                                ", n_g=" + std::to_string(genome_channels_) + ")");
  if (state_.dim(1) < 3 || state_.dim(2) < 3) throw std::invalid_argument("CellGrid: H and W must be >= 3");
}

// ---- genome and filters ---------------------------------------------------

GenomeCode genome_of_index(int index, int genome_channels) {
  if (genome_channels < 0 || genome_channels > 16) throw std::invalid_argument("genome_of_index: bad n_g");
  if (index < 0 || index >= (1 << genome_channels))
    throw std::invalid_argument("genome_of_index: index " + std::to_string(index) + " out of range for n_g=" +
                                std::to_string(genome_channels));
  GenomeCode g{index, std::vector<float>(static_cast<size_t>(genome_channels))};
  for (int b = 0; b < genome_channels; ++b) g.bits[static_cast<size_t>(b)] = static_cast<float>((index >> (genome_channels - 1 - b)) & 1);
  return g;
}

const PerceptionFilters& PerceptionFilters::standard() {
  static const PerceptionFilters f{
      {0, 0, 0, 0, 1, 0, 0, 0, 0},
      {-1, 0, 1, -2, 0, 2, -1, 0, 1},
      {-1, -2, -1, 0, 0, 0, 1, 2, 1},
      {1, 2, 1, 2, -12, 2, 1, 2, 1},
  };
  return f;
}

// ---- parameters -------------------------------------------------------------

void ModelShape::validate() const {
  if (genome_channels < 0 || genome_channels > 16) throw std::invalid_argument("ModelShape: n_g out of range");
  if (channels < 3 + genome_channels) throw std::invalid_argument("ModelShape: n must be >= 3 + n_g");
  if (hidden_filters < 1) throw std::invalid_argument("ModelShape: n_f must be >= 1");
}

UpdateRuleParams UpdateRuleParams::zeros(const ModelShape& shape) {
  shape.validate();
  const int n = shape.channels, nf = shape.hidden_filters;
  return UpdateRuleParams{shape,
                          {"w1", Tensor({nf, 4 * n})},
                          {"b1", Tensor({nf})},
                          {"w2", Tensor({n, nf})},
                          {"b2", Tensor({n})}};
}

UpdateRuleParams UpdateRuleParams::initial(const ModelShape& shape, Rng& rng) {
  UpdateRuleParams p = zeros(shape);
  const float bound = 1.0f / std::sqrt(static_cast<float>(shape.perception_channels()));
  for (float& v : p.w1.value.data()) v = rng.uniform(-bound, bound);
  for (float& v : p.b1.value.data()) v = rng.uniform(-bound, bound);
  return p;
}

size_t UpdateRuleParams::parameter_count() const {
  return w1.value.size() + b1.value.size() + w2.value.size() + b2.value.size();
}

void UpdateRuleParams::validate() const {
  shape.validate();
  const int n = shape.channels, nf = shape.hidden_filters;
  require_shape(w1.value, {nf, 4 * n}, "UpdateRuleParams w1");
  require_shape(b1.value, {nf}, "UpdateRuleParams b1");
  require_shape(w2.value, {n, nf}, "UpdateRuleParams w2");
  require_shape(b2.value, {n}, "UpdateRuleParams b2");
}

// ---- masks and seeds ------------------------------------------------------

std::vector<float> fire_mask(const UpdateMask& mask, int step, int height, int width) {
  const size_t cells = static_cast<size_t>(height) * width;
  std::vector<float> m(cells, 1.0f);
  if (mask.dense()) return m;
  const uint64_t key = hash_combine(mask.seed, static_cast<uint64_t>(step));
  for (size_t i = 0; i < cells; ++i) {
    const float u = static_cast<float>(mix64(key ^ mix64(i)) >> 40) * 0x1.0p-24f;
    m[i] = u < mask.fire_rate ? 1.0f : 0.0f;
  }
  return m;
}

CellGrid seed_of_genome(int height, int width, const GenomeCode& genome, int channels) {
  const int ng = static_cast<int>(genome.bits.size());
  CellGrid grid(channels, ng, height, width);
  const size_t plane = static_cast<size_t>(height) * width;
  for (int b = 0; b < ng; ++b) {
    float* p = grid.state().ptr() + (grid.genome_offset() + b) * plane;
    std::fill(p, p + plane, genome.bits[static_cast<size_t>(b)]);
  }
  return grid;
}

// ---- raw step machinery ------------------------------------------------------

namespace {

void perceive_raw(const float* x, float* p, int n, int h, int w) {
  const auto& f = PerceptionFilters::standard();
  const size_t block = static_cast<size_t>(n) * h * w;
  std::copy_n(x, block, p);
  kernels::depthwise3x3(x, p + block, n, h, w, f.sobel_x, kernels::Padding::circular);
  kernels::depthwise3x3(x, p + 2 * block, n, h, w, f.sobel_y, kernels::Padding::circular);
  kernels::depthwise3x3(x, p + 3 * block, n, h, w, f.laplacian, kernels::Padding::circular);
}

void perceive_adjoint_raw(const float* dp, float* dx, int n, int h, int w) {
  const auto& f = PerceptionFilters::standard();
  const size_t block = static_cast<size_t>(n) * h * w;
  for (size_t i = 0; i < block; ++i) dx[i] += dp[i];
  kernels::depthwise3x3_adjoint(dp + block, dx, n, h, w, f.sobel_x, kernels::Padding::circular);
  kernels::depthwise3x3_adjoint(dp + 2 * block, dx, n, h, w, f.sobel_y, kernels::Padding::circular);
  kernels::depthwise3x3_adjoint(dp + 3 * block, dx, n, h, w, f.laplacian, kernels::Padding::circular);
}

struct RuleView {
  const float* w1;
  const float* b1;
  const float* w2;
  const float* b2;
  int n;
  int nf;
};

RuleView view_of(const UpdateRuleParams& p) {
  return {p.w1.value.ptr(), p.b1.value.ptr(), p.w2.value.ptr(), p.b2.value.ptr(), p.shape.channels,
          p.shape.hidden_filters};
}

// x_out = x + mask * (W2 relu(W1 perceive(x) + b1) + b2). `hidden_pre` keeps the pre-activation.
void forward_step_raw(const RuleView& r, const float* x, float* x_out, float* perception, float* hidden_pre,
                      float* hidden, float* delta, const std::vector<float>* mask, int h, int w) {
  const int hw = h * w;
  const size_t nh = static_cast<size_t>(r.nf) * hw;
  perceive_raw(x, perception, r.n, h, w);
  kernels::conv1x1(perception, r.w1, r.b1, hidden_pre, 4 * r.n, r.nf, hw);
  for (size_t i = 0; i < nh; ++i) hidden[i] = hidden_pre[i] > 0.0f ? hidden_pre[i] : 0.0f;
  kernels::conv1x1(hidden, r.w2, r.b2, delta, r.nf, r.n, hw);
  for (int c = 0; c < r.n; ++c) {
    const size_t off = static_cast<size_t>(c) * hw;
    if (mask) {
      const float* m = mask->data();
      for (int i = 0; i < hw; ++i) x_out[off + i] = x[off + i] + m[i] * delta[off + i];
    } else {
      for (int i = 0; i < hw; ++i) x_out[off + i] = x[off + i] + delta[off + i];
    }
  }
}

}  // namespace

// ---- forward-only API ---------------------------------------------------------

Tensor perceive(const CellGrid& grid) {
  const int n = grid.channels(), h = grid.height(), w = grid.width();
  Tensor out({4 * n, h, w});
  perceive_raw(grid.state().ptr(), out.ptr(), n, h, w);
  return out;
}

void Evolver::run(CellGrid& grid, int steps, const UpdateMask& mask) {
  if (steps < 0) throw std::invalid_argument("evolve: steps must be >= 0");
  if (grid.channels() != params_.shape.channels || grid.genome_channels() != params_.shape.genome_channels)
    throw std::invalid_argument("evolve: grid channels do not match the update rule");
  params_.validate();
  const RuleView r = view_of(params_);
  const int h = grid.height(), w = grid.width(), hw = h * w;
  perception_.resize(static_cast<size_t>(4 * r.n) * hw);
  hidden_.resize(static_cast<size_t>(2 * r.nf) * hw);
  delta_.resize(static_cast<size_t>(2 * r.n) * hw);
  float* next = delta_.data() + static_cast<size_t>(r.n) * hw;
  Tensor& state = grid.state();
  for (int s = 0; s < steps; ++s) {
    std::vector<float> m;
    if (!mask.dense()) m = fire_mask(mask, mask.step_offset + s, h, w);
    forward_step_raw(r, state.ptr(), next, perception_.data(), hidden_.data(), hidden_.data() + static_cast<size_t>(r.nf) * hw,
                     delta_.data(), mask.dense() ? nullptr : &m, h, w);
    std::copy_n(next, static_cast<size_t>(r.n) * hw, state.ptr());
  }
  if (!state.all_finite()) throw std::runtime_error("evolve: state became non-finite");
}

CellGrid step(const CellGrid& grid, const UpdateRuleParams& params, const UpdateMask& mask) {
  return evolve(grid, params, 1, mask);
}

CellGrid evolve(CellGrid grid, const UpdateRuleParams& params, int steps, const UpdateMask& mask) {
  Evolver(params).run(grid, steps, mask);
  return grid;
}

Tensor to_rgb(const CellGrid& grid) {
  const size_t plane = static_cast<size_t>(grid.height()) * grid.width();
  Tensor rgb({3, grid.height(), grid.width()});
  const float* src = grid.state().ptr();
  for (size_t i = 0; i < 3 * plane; ++i) rgb[i] = std::clamp(src[i], 0.0f, 1.0f);
  return rgb;
}

// ---- recording API ----------------------------------------------------------

ParamVars ParamVars::bind(ad::Tape& tape, UpdateRuleParams& params) {
  params.validate();
  return {tape.param(params.w1), tape.param(params.b1), tape.param(params.w2), tape.param(params.b2)};
}

ad::Var perceive(ad::Tape& tape, ad::Var state) {
  const auto& f = PerceptionFilters::standard();
  const ad::Var parts[4] = {
      state,
      ad::conv2d_depthwise3x3(tape, state, f.sobel_x, kernels::Padding::circular),
      ad::conv2d_depthwise3x3(tape, state, f.sobel_y, kernels::Padding::circular),
      ad::conv2d_depthwise3x3(tape, state, f.laplacian, kernels::Padding::circular),
  };
  return ad::concat_channels(tape, parts);
}

ad::Var step(ad::Tape& tape, ad::Var state, const ParamVars& p, const UpdateMask& mask) {
  const int h = tape.value(state).dim(1), w = tape.value(state).dim(2);
  ad::Var hidden = ad::relu(tape, ad::conv2d_1x1(tape, perceive(tape, state), p.w1, p.b1));
  ad::Var delta = ad::conv2d_1x1(tape, hidden, p.w2, p.b2);
  if (!mask.dense()) delta = ad::cell_mask(tape, delta, fire_mask(mask, mask.step_offset, h, w));
  return ad::add(tape, state, delta);
}

namespace {

struct StepCache {
  std::vector<float> x;
  std::vector<float> perception;
  std::vector<float> hidden_pre;
};

struct RolloutGeometry {
  int n, nf, h, w;
  size_t hw() const { return static_cast<size_t>(h) * w; }
};

void fill_cache(const RuleView& r, const RolloutGeometry& g, const float* x, StepCache& c, std::vector<float>& hidden,
                std::vector<float>& delta, float* x_out, const std::vector<float>* mask) {
  c.x.assign(x, x + static_cast<size_t>(g.n) * g.hw());
  c.perception.resize(static_cast<size_t>(4 * g.n) * g.hw());
  c.hidden_pre.resize(static_cast<size_t>(g.nf) * g.hw());
  forward_step_raw(r, x, x_out, c.perception.data(), c.hidden_pre.data(), hidden.data(), delta.data(), mask, g.h, g.w);
}

struct GradBuffers {
  std::vector<float> dw1, db1, dw2, db2;
};

// On entry dx holds d(loss)/d(x_out); on exit d(loss)/d(x).
void backward_step_raw(const RuleView& r, const RolloutGeometry& g, const StepCache& c,
                       const std::vector<float>* mask, std::vector<float>& dx, GradBuffers& grads,
                       std::vector<float>& scratch_hidden, std::vector<float>& scratch_dhidden,
                       std::vector<float>& scratch_ddelta, std::vector<float>& scratch_dp) {
  const size_t hw = g.hw();
  const size_t nh = static_cast<size_t>(g.nf) * hw;
  for (int ch = 0; ch < g.n; ++ch) {
    const size_t off = static_cast<size_t>(ch) * hw;
    for (size_t i = 0; i < hw; ++i) scratch_ddelta[off + i] = mask ? dx[off + i] * (*mask)[i] : dx[off + i];
  }
  for (size_t i = 0; i < nh; ++i) scratch_hidden[i] = c.hidden_pre[i] > 0.0f ? c.hidden_pre[i] : 0.0f;
  std::fill(scratch_dhidden.begin(), scratch_dhidden.end(), 0.0f);
  kernels::conv1x1_backward(scratch_hidden.data(), r.w2, scratch_ddelta.data(), scratch_dhidden.data(),
                            grads.dw2.data(), grads.db2.data(), g.nf, g.n, static_cast<int>(hw));
  for (size_t i = 0; i < nh; ++i)
    if (!(c.hidden_pre[i] > 0.0f)) scratch_dhidden[i] = 0.0f;
  std::fill(scratch_dp.begin(), scratch_dp.end(), 0.0f);
  kernels::conv1x1_backward(c.perception.data(), r.w1, scratch_dhidden.data(), scratch_dp.data(), grads.dw1.data(),
                            grads.db1.data(), 4 * g.n, g.nf, static_cast<int>(hw));
  perceive_adjoint_raw(scratch_dp.data(), dx.data(), g.n, g.h, g.w);
}

}  // namespace

ad::Var rollout(ad::Tape& tape, ad::Var state, const ParamVars& p, int steps, const UpdateMask& mask,
                int checkpoint_every) {
  if (steps < 0) throw std::invalid_argument("rollout: steps must be >= 0");
  if (checkpoint_every < 0) throw std::invalid_argument("rollout: checkpoint_every must be >= 0");
  const Tensor& x0 = tape.value(state);
  const Tensor& w1 = tape.value(p.w1);
  const Tensor& w2 = tape.value(p.w2);
  if (x0.rank() != 3) throw std::invalid_argument("rollout: state must be [n,H,W]");
  const RolloutGeometry g{x0.dim(0), w1.dim(0), x0.dim(1), x0.dim(2)};
  require_shape(w1, {g.nf, 4 * g.n}, "rollout w1");
  require_shape(tape.value(p.b1), {g.nf}, "rollout b1");
  require_shape(w2, {g.n, g.nf}, "rollout w2");
  require_shape(tape.value(p.b2), {g.n}, "rollout b2");

  const RuleView r{w1.ptr(), tape.value(p.b1).ptr(), w2.ptr(), tape.value(p.b2).ptr(), g.n, g.nf};
  const size_t state_len = static_cast<size_t>(g.n) * g.hw();
  std::vector<float> hidden(static_cast<size_t>(g.nf) * g.hw()), delta(state_len);
  std::vector<float> cur(x0.data().begin(), x0.data().end()), next(state_len);

  const bool cache_all = checkpoint_every == 0;
  std::vector<StepCache> caches;
  std::vector<std::vector<float>> checkpoints;  // state at the start of each segment
  if (cache_all) caches.resize(static_cast<size_t>(steps));
  std::vector<float> perception(static_cast<size_t>(4 * g.n) * g.hw()), hidden_pre(static_cast<size_t>(g.nf) * g.hw());
  for (int s = 0; s < steps; ++s) {
    std::vector<float> m;
    if (!mask.dense()) m = fire_mask(mask, mask.step_offset + s, g.h, g.w);
    const std::vector<float>* mp = mask.dense() ? nullptr : &m;
    if (cache_all) {
      fill_cache(r, g, cur.data(), caches[static_cast<size_t>(s)], hidden, delta, next.data(), mp);
    } else {
      if (s % checkpoint_every == 0) checkpoints.push_back(cur);
      forward_step_raw(r, cur.data(), next.data(), perception.data(), hidden_pre.data(), hidden.data(), delta.data(), mp,
                       g.h, g.w);
    }
    std::swap(cur, next);
  }
  Tensor out({g.n, g.h, g.w}, std::move(cur));

  auto backward_fn = [state, p, steps, mask, checkpoint_every, g, caches = std::move(caches),
                      checkpoints = std::move(checkpoints)](ad::Tape& tp, const Tensor& gout) mutable {
    const RuleView rv{tp.value(p.w1).ptr(), tp.value(p.b1).ptr(), tp.value(p.w2).ptr(), tp.value(p.b2).ptr(), g.n, g.nf};
    const size_t hw = g.hw();
    GradBuffers grads{std::vector<float>(static_cast<size_t>(g.nf) * 4 * g.n), std::vector<float>(static_cast<size_t>(g.nf)),
                      std::vector<float>(static_cast<size_t>(g.n) * g.nf), std::vector<float>(static_cast<size_t>(g.n))};
    std::vector<float> dx(gout.data().begin(), gout.data().end());
    std::vector<float> s_hidden(static_cast<size_t>(g.nf) * hw), s_dhidden(static_cast<size_t>(g.nf) * hw),
        s_ddelta(static_cast<size_t>(g.n) * hw), s_dp(static_cast<size_t>(4 * g.n) * hw), s_delta(static_cast<size_t>(g.n) * hw),
        s_next(static_cast<size_t>(g.n) * hw);

    auto mask_for = [&](int s) {
      std::vector<float> m;
      if (!mask.dense()) m = fire_mask(mask, mask.step_offset + s, g.h, g.w);
      return m;
    };

    if (checkpoint_every == 0) {
      for (int s = steps - 1; s >= 0; --s) {
        auto m = mask_for(s);
        backward_step_raw(rv, g, caches[static_cast<size_t>(s)], mask.dense() ? nullptr : &m, dx, grads, s_hidden,
                          s_dhidden, s_ddelta, s_dp);
      }
    } else {
      const int segments = static_cast<int>(checkpoints.size());
      std::vector<StepCache> seg(static_cast<size_t>(checkpoint_every));
      for (int sg = segments - 1; sg >= 0; --sg) {
        const int s0 = sg * checkpoint_every;
        const int s1 = std::min(steps, s0 + checkpoint_every);
        std::vector<float> cur = checkpoints[static_cast<size_t>(sg)];
        for (int s = s0; s < s1; ++s) {
          auto m = mask_for(s);
          fill_cache(rv, g, cur.data(), seg[static_cast<size_t>(s - s0)], s_hidden, s_delta, s_next.data(),
                     mask.dense() ? nullptr : &m);
          std::swap(cur, s_next);
        }
        for (int s = s1 - 1; s >= s0; --s) {
          auto m = mask_for(s);
          backward_step_raw(rv, g, seg[static_cast<size_t>(s - s0)], mask.dense() ? nullptr : &m, dx, grads, s_hidden,
                            s_dhidden, s_ddelta, s_dp);
        }
      }
    }
    tp.accumulate(state, dx);
    tp.accumulate(p.w1, grads.dw1);
    tp.accumulate(p.b1, grads.db1);
    tp.accumulate(p.w2, grads.dw2);
    tp.accumulate(p.b2, grads.db2);
  };
  return tape.record("nca_rollout", std::move(out), {state, p.w1, p.b1, p.w2, p.b2}, std::move(backward_fn));
}

}  // namespace nca
