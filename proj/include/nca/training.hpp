#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nca/nca.hpp"
#include "nca/optim.hpp"
#include "nca/rng.hpp"
#include "nca/style_loss.hpp"

namespace nca {

struct TrainConfig {
  ModelShape shape{12, 96, 1};
  int pool_size = 0;  // 0 selects 16 entries per genome
  int batch_size = 8;
  int epochs = 2000;
  int height = 64;
  int width = 64;
  int min_steps = 64;
  int max_steps = 90;
  float min_radius = 15.0f;
  float max_radius = 25.0f;
  float learning_rate = 1e-3f;
  std::vector<int> lr_decay_epochs{1000, 1500};
  float lr_decay = 0.5f;
  bool regeneration = true;  // false selects the baseline pool strategy
  uint64_t seed = 0;
  int n_proj = 32;
  float fire_rate = 0.5f;
  int rollout_checkpoint = 8;  // steps per recomputation segment during backward; 0 caches all
  int threads = 1;

  int n_genomes() const { return shape.genome_count(); }
  int resolved_pool_size() const { return pool_size > 0 ? pool_size : 16 * n_genomes(); }
  float lr_at(int epoch) const;
  void validate() const;
};

struct PoolEntry {
  CellGrid state;
  int genome_index = 0;
  std::optional<float> last_loss;

  // Unset losses rank above every evaluated loss.
  float loss_rank() const { return last_loss.value_or(std::numeric_limits<float>::infinity()); }
};

struct Pool {
  std::vector<PoolEntry> entries;

  int size() const { return static_cast<int>(entries.size()); }
  std::vector<int> genome_histogram(int n_genomes) const;
};

Pool init_pool(const TrainConfig& cfg);

// Uniform sample without replacement; returns pool indices in draw order.
std::vector<int> sample_batch(const Pool& pool, int batch_size, Rng& rng);

struct Replacement {
  int slot = -1;         // pool index that received a fresh seed
  int genome = 0;        // g_r
  bool relabeled = false;  // no batch entry carried g_r, so the worst entry overall was taken
};

// Replaces the highest-loss batch entry of genome (iteration % n_genomes), or the
// highest-loss entry overall when none carries it. Ties go to the lower pool index.
Replacement cyclic_seed_replacement(Pool& pool, std::span<const int> batch, int iteration, const TrainConfig& cfg);

// Overwrites every cell within Euclidean distance `radius` of (cx, cy), without
// wrapping, with i.i.d. uniform [0,1) values on all channels.
void damage_state(CellGrid& grid, int cx, int cy, float radius, Rng& rng);

// Damages the two lowest-loss batch entries other than `exclude`. Ties go to the
// lower pool index. Returns the damaged pool indices, lowest loss first.
std::vector<int> damage_lowest_two(Pool& pool, std::span<const int> batch, int exclude, const TrainConfig& cfg,
                                   Rng& rng);

// The independent random streams of a training run.
struct TrainRngs {
  Rng pool;
  Rng damage;
  Rng projections;
  Rng rollout;

  explicit TrainRngs(uint64_t seed)
      : pool(seed, Rng::pool), damage(seed, Rng::damage), projections(seed, Rng::projections),
        rollout(seed, Rng::rollout) {}
};

// Everything an epoch decides before the rollout.
struct EpochPlan {
  int epoch = 0;
  std::vector<int> batch;
  Replacement replacement;
  std::vector<int> damaged;
  int steps = 0;
  std::vector<uint64_t> mask_seeds;  // one per batch element
};

// Samples, replaces, damages and draws the step count. Mutates the pool.
EpochPlan prepare_batch(Pool& pool, const TrainConfig& cfg, int epoch, TrainRngs& rngs);

struct EpochReport {
  EpochPlan plan;
  float mean_loss = 0.0f;
  std::vector<float> element_losses;             // per batch element
  std::vector<std::optional<float>> genome_losses;  // mean over batch entries of each genome
  style::ProjectionSet projections;
};

// Precomputed exemplar features, one stack per genome.
struct StyleTargets {
  style::FeatureExtractorSpec extractor;
  std::vector<style::FeatureStack> features;

  StyleTargets(style::FeatureExtractorSpec spec, std::span<const Tensor> exemplars);
  std::vector<int> tap_channels() const { return extractor.tap_channels(); }
};

// One regeneration-aware training epoch: prepare, roll out on a tape, SWL loss, backward,
// normalized-gradient Adam step, write back states and losses.
EpochReport train_epoch(UpdateRuleParams& params, ad::AdamOptimizer& adam, Pool& pool, const TrainConfig& cfg,
                        int epoch, TrainRngs& rngs, const StyleTargets& targets);

// Mask seed used for pool slot `slot` in `epoch`.
uint64_t training_mask_seed(uint64_t seed, int epoch, int slot);

class Trainer {
 public:
  Trainer(TrainConfig cfg, std::span<const Tensor> exemplars, style::FeatureExtractorSpec extractor);

  const EpochReport& run_epoch();
  // Runs until `epochs` epochs have completed in total.
  void run(int epochs, const std::function<void(const EpochReport&)>& on_epoch = {});

  int epoch() const { return epoch_; }
  const TrainConfig& config() const { return cfg_; }
  const UpdateRuleParams& params() const { return params_; }
  const Pool& pool() const { return pool_; }
  const std::vector<float>& loss_curve() const { return loss_curve_; }
  const std::vector<std::vector<std::optional<float>>>& genome_curve() const { return genome_curve_; }
  std::map<std::string, float> model_metadata() const;

  void save_checkpoint(const std::filesystem::path& path) const;
  // Restores params, pool, optimizer and RNG positions. The stored run must
  // match this trainer's shape, pool size, grid size and seed.
  void load_checkpoint(const std::filesystem::path& path);
  void write_loss_csv(const std::filesystem::path& path) const;

 private:
  TrainConfig cfg_;
  StyleTargets targets_;
  UpdateRuleParams params_;
  ad::AdamOptimizer adam_;
  Pool pool_;
  TrainRngs rngs_;
  int epoch_ = 0;
  std::vector<float> loss_curve_;
  std::vector<std::vector<std::optional<float>>> genome_curve_;
  EpochReport last_;
};

}  // namespace nca
