#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "nca/autodiff.hpp"
#include "nca/rng.hpp"
#include "nca/tensor.hpp"

namespace nca {

// Channel layout: [0,3) RGB, [3, n - n_g) hidden, [n - n_g, n) genome.
class CellGrid {
 public:
  CellGrid() = default;
  CellGrid(int channels, int genome_channels, int height, int width);
  CellGrid(Tensor state, int genome_channels);

  int channels() const { return state_.dim(0); }
  int genome_channels() const { return genome_channels_; }
  int hidden_channels() const { return channels() - 3 - genome_channels_; }
  int genome_offset() const { return channels() - genome_channels_; }
  int height() const { return state_.dim(1); }
  int width() const { return state_.dim(2); }

  Tensor& state() { return state_; }
  const Tensor& state() const { return state_; }
  float& at(int c, int y, int x) { return state_.at(c, y, x); }
  float at(int c, int y, int x) const { return state_.at(c, y, x); }

  friend bool operator==(const CellGrid& a, const CellGrid& b) {
    return a.genome_channels_ == b.genome_channels_ && a.state_ == b.state_;
  }

 private:
  Tensor state_;
  int genome_channels_ = 0;
};

struct GenomeCode {
  int index = 0;
  std::vector<float> bits;  // most significant bit first, values in {0,1}
};

GenomeCode genome_of_index(int index, int genome_channels);

struct PerceptionFilters {
  ad::Kernel3 identity;
  ad::Kernel3 sobel_x;
  ad::Kernel3 sobel_y;
  ad::Kernel3 laplacian;

  static const PerceptionFilters& standard();
};

struct ModelShape {
  int channels = 12;        // n
  int hidden_filters = 96;  // n_f
  int genome_channels = 3;  // n_g

  int perception_channels() const { return 4 * channels; }
  int genome_count() const { return 1 << genome_channels; }
  void validate() const;
  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

struct UpdateRuleParams {
  ModelShape shape;
  ad::Parameter w1;  // [n_f, 4n]
  ad::Parameter b1;  // [n_f]
  ad::Parameter w2;  // [n, n_f]
  ad::Parameter b2;  // [n]

  static UpdateRuleParams zeros(const ModelShape& shape);
  // W1, b1 ~ U(-1/sqrt(4n), 1/sqrt(4n)); W2 = b2 = 0 so the initial rule is the identity map.
  static UpdateRuleParams initial(const ModelShape& shape, Rng& rng);

  size_t parameter_count() const;
  std::array<ad::Parameter*, 4> list() { return {&w1, &b1, &w2, &b2}; }
  std::array<const ad::Parameter*, 4> list() const { return {&w1, &b1, &w2, &b2}; }
  void validate() const;
};

// Stochastic per-cell update gate. A cell applies its update at step t iff
// hash(seed, t, cell) < fire_rate; fire_rate >= 1 updates every cell.
struct UpdateMask {
  float fire_rate = 1.0f;
  uint64_t seed = 0;
  int step_offset = 0;

  bool dense() const { return fire_rate >= 1.0f; }
  UpdateMask advanced(int steps) const { return {fire_rate, seed, step_offset + steps}; }
};

// 0/1 mask for absolute step index `step`.
std::vector<float> fire_mask(const UpdateMask& mask, int step, int height, int width);

CellGrid seed_of_genome(int height, int width, const GenomeCode& genome, int channels);

// [4n,H,W]: identity, sobel_x, sobel_y, laplacian blocks with circular padding.
Tensor perceive(const CellGrid& grid);

CellGrid step(const CellGrid& grid, const UpdateRuleParams& params, const UpdateMask& mask = {});
CellGrid evolve(CellGrid grid, const UpdateRuleParams& params, int steps, const UpdateMask& mask = {});

// First three channels clamped to [0,1].
Tensor to_rgb(const CellGrid& grid);

// Reusable-buffer stepper for long forward-only rollouts.
class Evolver {
 public:
  explicit Evolver(const UpdateRuleParams& params) : params_(params) {}
  // Advances `grid` by `steps`, gating step i with mask step index mask.step_offset + i.
  void run(CellGrid& grid, int steps, const UpdateMask& mask = {});

 private:
  const UpdateRuleParams& params_;
  std::vector<float> perception_;
  std::vector<float> hidden_;
  std::vector<float> delta_;
};

// ---- recording versions ----------------------------------------------------

struct ParamVars {
  ad::Var w1, b1, w2, b2;
  static ParamVars bind(ad::Tape& tape, UpdateRuleParams& params);
};

ad::Var perceive(ad::Tape& tape, ad::Var state);
// One step composed from primitive tape ops.
ad::Var step(ad::Tape& tape, ad::Var state, const ParamVars& params, const UpdateMask& mask = {});

// A whole rollout recorded as a single node. Keeps the state every
// `checkpoint_every` steps and recomputes segment activations during
// backward; checkpoint_every == 0 caches every step's activations instead.
ad::Var rollout(ad::Tape& tape, ad::Var state, const ParamVars& params, int steps, const UpdateMask& mask = {},
                int checkpoint_every = 8);

}  // namespace nca
