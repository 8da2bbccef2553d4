#include "nca/training.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>

namespace nca {

// ---- configuration -------------------------------------------------------------

float TrainConfig::lr_at(int epoch) const {
  float lr = learning_rate;
  for (int e : lr_decay_epochs)
    if (epoch >= e) lr *= lr_decay;
  return lr;
}

void TrainConfig::validate() const {
  shape.validate();
  const int pool = resolved_pool_size();
  if (pool % n_genomes() != 0)
    throw std::invalid_argument("pool_size " + std::to_string(pool) + " is not divisible by n_genomes " +
                                std::to_string(n_genomes()));
  if (batch_size < 1 || batch_size > pool)
    throw std::invalid_argument("batch_size must be in [1, pool_size], got " + std::to_string(batch_size));
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (height < 3 || width < 3) throw std::invalid_argument("grid must be at least 3x3");
  if (min_steps < 64 || max_steps > 90 || min_steps > max_steps)
    throw std::invalid_argument("step range must satisfy 64 <= min_steps <= max_steps <= 90");
  if (!(min_radius > 0.0f) || min_radius > max_radius)
    throw std::invalid_argument("damage radius range must satisfy 0 < min_radius <= max_radius");
  if (!(learning_rate > 0.0f)) throw std::invalid_argument("learning_rate must be positive");
  if (!(lr_decay > 0.0f)) throw std::invalid_argument("lr_decay must be positive");
  if (n_proj < 1) throw std::invalid_argument("n_proj must be >= 1");
  if (!(fire_rate > 0.0f && fire_rate <= 1.0f)) throw std::invalid_argument("fire_rate must be in (0, 1]");
  if (rollout_checkpoint < 0) throw std::invalid_argument("rollout_checkpoint must be >= 0");
  if (threads < 1) throw std::invalid_argument("threads must be >= 1");
}

// ---- pool ----------------------------------------------------------------------

std::vector<int> Pool::genome_histogram(int n_genomes) const {
  std::vector<int> h(static_cast<size_t>(n_genomes), 0);
  for (const PoolEntry& e : entries) ++h.at(static_cast<size_t>(e.genome_index));
  return h;
}

Pool init_pool(const TrainConfig& cfg) {
  const int pool_size = cfg.resolved_pool_size();
  if (pool_size % cfg.n_genomes() != 0)
    throw std::invalid_argument("pool_size " + std::to_string(pool_size) + " is not divisible by n_genomes " +
                                std::to_string(cfg.n_genomes()));
  const int per_genome = pool_size / cfg.n_genomes();
  Pool pool;
  pool.entries.reserve(static_cast<size_t>(pool_size));
  for (int g = 0; g < cfg.n_genomes(); ++g) {
    const CellGrid seed =
        seed_of_genome(cfg.height, cfg.width, genome_of_index(g, cfg.shape.genome_channels), cfg.shape.channels);
    for (int i = 0; i < per_genome; ++i) pool.entries.push_back({seed, g, std::nullopt});
  }
  return pool;
}

std::vector<int> sample_batch(const Pool& pool, int batch_size, Rng& rng) {
  if (batch_size < 1 || batch_size > pool.size())
    throw std::invalid_argument("batch_size " + std::to_string(batch_size) + " exceeds pool size " +
                                std::to_string(pool.size()));
  // Partial Fisher-Yates.
  std::vector<int> idx(static_cast<size_t>(pool.size()));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < batch_size; ++i) {
    const int j = rng.uniform_int(i, pool.size() - 1);
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  idx.resize(static_cast<size_t>(batch_size));
  return idx;
}

Replacement cyclic_seed_replacement(Pool& pool, std::span<const int> batch, int iteration, const TrainConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("cyclic_seed_replacement: empty batch");
  Replacement r;
  r.genome = iteration % cfg.n_genomes();
  auto worse = [&](int a, int b) {
    const float la = pool.entries[static_cast<size_t>(a)].loss_rank();
    const float lb = pool.entries[static_cast<size_t>(b)].loss_rank();
    return la > lb || (la == lb && a < b);
  };
  for (int idx : batch)
    if (pool.entries[static_cast<size_t>(idx)].genome_index == r.genome && (r.slot < 0 || worse(idx, r.slot)))
      r.slot = idx;
  if (r.slot < 0) {
    r.relabeled = true;
    for (int idx : batch)
      if (r.slot < 0 || worse(idx, r.slot)) r.slot = idx;
  }
  PoolEntry& e = pool.entries[static_cast<size_t>(r.slot)];
  e.state = seed_of_genome(cfg.height, cfg.width, genome_of_index(r.genome, cfg.shape.genome_channels),
                           cfg.shape.channels);
  e.genome_index = r.genome;
  e.last_loss.reset();
  return r;
}

void damage_state(CellGrid& grid, int cx, int cy, float radius, Rng& rng) {
  if (!(radius > 0.0f)) throw std::invalid_argument("damage radius must be positive");
  if (cx < 0 || cy < 0 || cx >= grid.width() || cy >= grid.height())
    throw std::invalid_argument("damage center outside the grid");
  const double r2 = static_cast<double>(radius) * radius;
  const int reach = static_cast<int>(std::floor(radius));
  for (int y = std::max(0, cy - reach); y <= std::min(grid.height() - 1, cy + reach); ++y)
    for (int x = std::max(0, cx - reach); x <= std::min(grid.width() - 1, cx + reach); ++x) {
      const double dx = x - cx, dy = y - cy;
      if (dx * dx + dy * dy > r2) continue;
      for (int c = 0; c < grid.channels(); ++c) grid.at(c, y, x) = rng.uniform();
    }
}

std::vector<int> damage_lowest_two(Pool& pool, std::span<const int> batch, int exclude, const TrainConfig& cfg,
                                   Rng& rng) {
  std::vector<int> candidates;
  for (int idx : batch)
    if (idx != exclude) candidates.push_back(idx);
  std::sort(candidates.begin(), candidates.end(), [&](int a, int b) {
    const float la = pool.entries[static_cast<size_t>(a)].loss_rank();
    const float lb = pool.entries[static_cast<size_t>(b)].loss_rank();
    return la < lb || (la == lb && a < b);
  });
  candidates.resize(std::min<size_t>(candidates.size(), 2));
  for (int idx : candidates) {
    CellGrid& grid = pool.entries[static_cast<size_t>(idx)].state;
    const int cx = rng.uniform_int(0, grid.width() - 1);
    const int cy = rng.uniform_int(0, grid.height() - 1);
    const float radius = rng.uniform(cfg.min_radius, cfg.max_radius);
    damage_state(grid, cx, cy, radius, rng);
  }
  return candidates;
}

uint64_t training_mask_seed(uint64_t seed, int epoch, int slot) {
  return hash_combine(hash_combine(hash_combine(seed, 0x6d61736b), static_cast<uint64_t>(epoch)),
                      static_cast<uint64_t>(slot));
}

EpochPlan prepare_batch(Pool& pool, const TrainConfig& cfg, int epoch, TrainRngs& rngs) {
  EpochPlan plan;
  plan.epoch = epoch;
  plan.batch = sample_batch(pool, cfg.batch_size, rngs.pool);
  plan.replacement = cyclic_seed_replacement(pool, plan.batch, epoch, cfg);
  if (cfg.regeneration) plan.damaged = damage_lowest_two(pool, plan.batch, plan.replacement.slot, cfg, rngs.damage);
  plan.steps = rngs.rollout.uniform_int(cfg.min_steps, cfg.max_steps);
  for (int idx : plan.batch) plan.mask_seeds.push_back(training_mask_seed(cfg.seed, epoch, idx));
  return plan;
}

// ---- loss and epoch ------------------------------------------------------------

StyleTargets::StyleTargets(style::FeatureExtractorSpec spec, std::span<const Tensor> exemplars)
    : extractor(std::move(spec)) {
  extractor.validate();
  for (const Tensor& e : exemplars) features.push_back(style::extract_features(e, extractor));
}

namespace {

struct ElementResult {
  float loss = 0.0f;
  Tensor final_state;
  std::array<Tensor, 4> grads;
};

ElementResult run_element(const UpdateRuleParams& params, const CellGrid& start, int steps, const UpdateMask& mask,
                          const style::FeatureStack& target, const style::FeatureExtractorSpec& extractor,
                          const style::ProjectionSet& proj, int checkpoint_every) {
  UpdateRuleParams local = params;
  for (ad::Parameter* p : local.list()) p->zero_grad();
  ad::Tape tape;
  const ParamVars pv = ParamVars::bind(tape, local);
  const ad::Var final_state = rollout(tape, tape.constant(start.state()), pv, steps, mask, checkpoint_every);
  const ad::Var rgb = ad::slice_channels(tape, final_state, 0, 3);
  const std::vector<ad::Var> features = style::extract_features(tape, rgb, extractor);
  std::vector<ad::Var> target_vars;
  for (const Tensor& t : target) target_vars.push_back(tape.constant(t));
  const ad::Var loss = style::swl(tape, features, target_vars, proj);
  ad::backward(tape, loss);

  ElementResult r;
  r.loss = tape.value(loss).item();
  r.final_state = tape.value(final_state);
  const auto list = local.list();
  for (size_t i = 0; i < list.size(); ++i) r.grads[i] = std::move(list[i]->grad);
  return r;
}

}  // namespace

EpochReport train_epoch(UpdateRuleParams& params, ad::AdamOptimizer& adam, Pool& pool, const TrainConfig& cfg,
                        int epoch, TrainRngs& rngs, const StyleTargets& targets) {
  if (static_cast<int>(targets.features.size()) != cfg.n_genomes())
    throw std::invalid_argument("train_epoch: need one exemplar per genome");
  EpochReport report;
  report.plan = prepare_batch(pool, cfg, epoch, rngs);
  report.projections = style::ProjectionSet::draw(targets.tap_channels(), cfg.n_proj, rngs.projections);

  const EpochPlan& plan = report.plan;
  const size_t batch = plan.batch.size();
  std::vector<ElementResult> results(batch);
  std::vector<std::exception_ptr> errors(batch);
  auto work = [&](size_t i) {
    try {
      const PoolEntry& entry = pool.entries[static_cast<size_t>(plan.batch[i])];
      const UpdateMask mask{cfg.fire_rate, plan.mask_seeds[i], 0};
      results[i] = run_element(params, entry.state, plan.steps, mask,
                               targets.features[static_cast<size_t>(entry.genome_index)], targets.extractor,
                               report.projections, cfg.rollout_checkpoint);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const size_t workers = std::min<size_t>(static_cast<size_t>(cfg.threads), batch);
  if (workers <= 1) {
    for (size_t i = 0; i < batch; ++i) work(i);
  } else {
    std::vector<std::jthread> pool_threads;
    for (size_t t = 0; t < workers; ++t)
      pool_threads.emplace_back([&, t] {
        for (size_t i = t; i < batch; i += workers) work(i);
      });
  }
  for (size_t i = 0; i < batch; ++i) {
    if (!errors[i]) continue;
    try {
      std::rethrow_exception(errors[i]);
    } catch (const std::exception& e) {
      throw std::runtime_error("epoch " + std::to_string(epoch) + " aborted on batch element " + std::to_string(i) +
                               " (pool slot " + std::to_string(plan.batch[i]) + "): " + e.what());
    }
  }

  // Fixed-order reduction keeps the result independent of the thread count.
  const float inv_batch = 1.0f / static_cast<float>(batch);
  const auto list = params.list();
  for (size_t k = 0; k < list.size(); ++k) {
    Tensor& g = list[k]->grad;
    g.fill(0.0f);
    for (size_t i = 0; i < batch; ++i) {
      const Tensor& gi = results[i].grads[k];
      for (size_t j = 0; j < g.size(); ++j) g[j] += gi[j];
    }
    for (float& v : g.data()) v *= inv_batch;
  }
  ad::normalize_gradients(list);
  adam.step(list, cfg.lr_at(epoch));

  std::vector<double> genome_sum(static_cast<size_t>(cfg.n_genomes()), 0.0);
  std::vector<int> genome_count(static_cast<size_t>(cfg.n_genomes()), 0);
  double total = 0.0;
  for (size_t i = 0; i < batch; ++i) {
    PoolEntry& entry = pool.entries[static_cast<size_t>(plan.batch[i])];
    entry.state = CellGrid(std::move(results[i].final_state), cfg.shape.genome_channels);
    entry.last_loss = results[i].loss;
    report.element_losses.push_back(results[i].loss);
    total += results[i].loss;
    genome_sum[static_cast<size_t>(entry.genome_index)] += results[i].loss;
    ++genome_count[static_cast<size_t>(entry.genome_index)];
  }
  report.mean_loss = static_cast<float>(total / static_cast<double>(batch));
  for (size_t g = 0; g < genome_sum.size(); ++g)
    report.genome_losses.push_back(genome_count[g] ? std::optional<float>(static_cast<float>(genome_sum[g] / genome_count[g]))
                                                   : std::nullopt);
  return report;
}

// ---- trainer -------------------------------------------------------------------

namespace {

TrainConfig validated(TrainConfig cfg) {
  cfg.validate();
  return cfg;
}

std::span<const Tensor> checked_exemplars(const TrainConfig& cfg, std::span<const Tensor> exemplars) {
  if (static_cast<int>(exemplars.size()) != cfg.n_genomes())
    throw std::invalid_argument("expected " + std::to_string(cfg.n_genomes()) + " exemplars (2^n_g), got " +
                                std::to_string(exemplars.size()));
  for (const Tensor& e : exemplars) {
    if (e.rank() != 3 || e.dim(0) != 3) throw std::invalid_argument("exemplars must be [3,H,W] images");
    if (e.dims() != exemplars[0].dims()) throw std::invalid_argument("all exemplars must have the same size");
  }
  return exemplars;
}

}  // namespace

Trainer::Trainer(TrainConfig cfg, std::span<const Tensor> exemplars, style::FeatureExtractorSpec extractor)
    : cfg_(validated(std::move(cfg))),
      targets_(std::move(extractor), checked_exemplars(cfg_, exemplars)),
      params_(UpdateRuleParams::zeros(cfg_.shape)),
      pool_(init_pool(cfg_)),
      rngs_(cfg_.seed) {
  targets_.extractor.check_input(cfg_.height, cfg_.width);
  Rng init(cfg_.seed, Rng::init);
  params_ = UpdateRuleParams::initial(cfg_.shape, init);
}

const EpochReport& Trainer::run_epoch() {
  last_ = train_epoch(params_, adam_, pool_, cfg_, epoch_, rngs_, targets_);
  loss_curve_.push_back(last_.mean_loss);
  genome_curve_.push_back(last_.genome_losses);
  ++epoch_;
  return last_;
}

void Trainer::run(int epochs, const std::function<void(const EpochReport&)>& on_epoch) {
  while (epoch_ < epochs) {
    const EpochReport& r = run_epoch();
    if (on_epoch) on_epoch(r);
  }
}

std::map<std::string, float> Trainer::model_metadata() const {
  return {{"fire_rate", cfg_.fire_rate},
          {"epochs", static_cast<float>(epoch_)},
          {"regeneration", cfg_.regeneration ? 1.0f : 0.0f},
          {"height", static_cast<float>(cfg_.height)},
          {"width", static_cast<float>(cfg_.width)}};
}

void Trainer::write_loss_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << "epoch,mean_loss";
  for (int g = 0; g < cfg_.n_genomes(); ++g) out << ",loss_g" << g;
  out << '\n';
  out.precision(9);
  for (size_t e = 0; e < loss_curve_.size(); ++e) {
    out << e << ',' << loss_curve_[e];
    for (const auto& l : genome_curve_[e]) {
      out << ',';
      if (l) out << *l;
    }
    out << '\n';
  }
}

}  // namespace nca
