#include "nca/checkpoint.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "nca/training.hpp"
#include "nca/weights_io.hpp"

namespace nca {

namespace io {

Tensor encode_u64(uint64_t v) {
  Tensor t({4});
  for (int i = 0; i < 4; ++i) t[static_cast<size_t>(i)] = static_cast<float>((v >> (16 * i)) & 0xFFFF);
  return t;
}

uint64_t decode_u64(const Tensor& t) {
  if (t.size() != 4) throw FormatError("u64 field must hold 4 limbs");
  uint64_t v = 0;
  for (int i = 0; i < 4; ++i) {
    const float limb = t[static_cast<size_t>(i)];
    if (!(limb >= 0.0f && limb <= 65535.0f) || limb != std::floor(limb)) throw FormatError("corrupt u64 limb");
    v |= static_cast<uint64_t>(limb) << (16 * i);
  }
  return v;
}

}  // namespace io

namespace {

const char* const kRngNames[] = {"rng.pool", "rng.damage", "rng.projections", "rng.rollout"};

std::array<Rng*, 4> rng_list(TrainRngs& r) { return {&r.pool, &r.damage, &r.projections, &r.rollout}; }
std::array<const Rng*, 4> rng_list(const TrainRngs& r) { return {&r.pool, &r.damage, &r.projections, &r.rollout}; }

void expect(bool ok, const std::string& what) {
  if (!ok) throw io::FormatError("checkpoint does not match this run: " + what);
}

}  // namespace

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  io::WeightsFile f;
  f.add("ckpt.version", Tensor::scalar(static_cast<float>(io::kCheckpointVersion)));
  f.add("ckpt.epoch", io::encode_u64(static_cast<uint64_t>(epoch_)));
  f.add("ckpt.seed", io::encode_u64(cfg_.seed));
  f.add("ckpt.shape", Tensor({3}, {static_cast<float>(cfg_.shape.channels), static_cast<float>(cfg_.shape.hidden_filters),
                                   static_cast<float>(cfg_.shape.genome_channels)}));
  f.add("ckpt.grid", Tensor({2}, {static_cast<float>(cfg_.height), static_cast<float>(cfg_.width)}));
  for (const ad::Parameter* p : params_.list()) f.add("nca." + p->name, p->value);

  const auto& adam = adam_.state();
  f.add("adam.t", io::encode_u64(static_cast<uint64_t>(adam.t)));
  const auto plist = params_.list();
  for (size_t i = 0; i < adam.m.size(); ++i) {
    f.add("adam.m." + plist[i]->name, adam.m[i]);
    f.add("adam.v." + plist[i]->name, adam.v[i]);
  }

  const auto rngs = rng_list(rngs_);
  for (size_t i = 0; i < rngs.size(); ++i) f.add(kRngNames[i], io::encode_u64(rngs[i]->counter()));

  const int p = pool_.size(), n = cfg_.shape.channels;
  Tensor states({p, n, cfg_.height, cfg_.width});
  Tensor genomes({p}), losses({p}), has_loss({p});
  const size_t cell_block = static_cast<size_t>(n) * cfg_.height * cfg_.width;
  for (int i = 0; i < p; ++i) {
    const PoolEntry& e = pool_.entries[static_cast<size_t>(i)];
    std::copy(e.state.state().data().begin(), e.state.state().data().end(), states.ptr() + i * cell_block);
    genomes[static_cast<size_t>(i)] = static_cast<float>(e.genome_index);
    losses[static_cast<size_t>(i)] = e.last_loss.value_or(0.0f);
    has_loss[static_cast<size_t>(i)] = e.last_loss ? 1.0f : 0.0f;
  }
  f.add("pool.state", std::move(states));
  f.add("pool.genome", std::move(genomes));
  f.add("pool.loss", std::move(losses));
  f.add("pool.has_loss", std::move(has_loss));

  if (!loss_curve_.empty()) {
    const int e = static_cast<int>(loss_curve_.size()), g = cfg_.n_genomes();
    f.add("curve.mean", Tensor({e}, loss_curve_));
    Tensor per({e, g});
    for (int i = 0; i < e; ++i)
      for (int k = 0; k < g; ++k)
        per[static_cast<size_t>(i) * g + k] =
            genome_curve_[static_cast<size_t>(i)][static_cast<size_t>(k)].value_or(std::numeric_limits<float>::quiet_NaN());
    f.add("curve.genome", std::move(per));
  }
  io::save_weights_file(path, f);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  const io::WeightsFile f = io::load_weights_file(path);
  const int version = static_cast<int>(f.get("ckpt.version").item());
  if (version != io::kCheckpointVersion)
    throw io::FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(io::kCheckpointVersion) + ")");
  const Tensor& shape = f.get("ckpt.shape");
  expect(shape.size() == 3 && shape[0] == static_cast<float>(cfg_.shape.channels) &&
             shape[1] == static_cast<float>(cfg_.shape.hidden_filters) &&
             shape[2] == static_cast<float>(cfg_.shape.genome_channels),
         "model shape");
  const Tensor& grid = f.get("ckpt.grid");
  expect(grid.size() == 2 && grid[0] == static_cast<float>(cfg_.height) && grid[1] == static_cast<float>(cfg_.width),
         "grid size");
  expect(io::decode_u64(f.get("ckpt.seed")) == cfg_.seed, "seed");

  UpdateRuleParams params = UpdateRuleParams::zeros(cfg_.shape);
  for (ad::Parameter* p : params.list()) {
    const Tensor& t = f.get("nca." + p->name);
    if (t.dims() != p->value.dims()) throw io::FormatError("checkpoint tensor nca." + p->name + " has the wrong shape");
    p->value = t;
  }

  ad::AdamOptimizer::State adam;
  adam.t = static_cast<long long>(io::decode_u64(f.get("adam.t")));
  if (adam.t > 0)
    for (const ad::Parameter* p : params.list()) {
      const Tensor& m = f.get("adam.m." + p->name);
      const Tensor& v = f.get("adam.v." + p->name);
      if (m.dims() != p->value.dims() || v.dims() != p->value.dims())
        throw io::FormatError("checkpoint optimizer state for " + p->name + " has the wrong shape");
      adam.m.push_back(m);
      adam.v.push_back(v);
    }

  const int p = cfg_.resolved_pool_size(), n = cfg_.shape.channels;
  const Tensor& states = f.get("pool.state");
  expect(states.dims() == Shape{p, n, cfg_.height, cfg_.width}, "pool dimensions");
  const Tensor& genomes = f.get("pool.genome");
  const Tensor& losses = f.get("pool.loss");
  const Tensor& has_loss = f.get("pool.has_loss");
  expect(genomes.size() == static_cast<size_t>(p) && losses.size() == static_cast<size_t>(p) &&
             has_loss.size() == static_cast<size_t>(p),
         "pool bookkeeping");
  Pool pool;
  const size_t cell_block = static_cast<size_t>(n) * cfg_.height * cfg_.width;
  for (int i = 0; i < p; ++i) {
    Tensor s({n, cfg_.height, cfg_.width});
    std::copy_n(states.ptr() + i * cell_block, cell_block, s.ptr());
    const int g = static_cast<int>(genomes[static_cast<size_t>(i)]);
    if (g < 0 || g >= cfg_.n_genomes()) throw io::FormatError("checkpoint pool entry has an invalid genome index");
    PoolEntry e{CellGrid(std::move(s), cfg_.shape.genome_channels), g, std::nullopt};
    if (has_loss[static_cast<size_t>(i)] != 0.0f) e.last_loss = losses[static_cast<size_t>(i)];
    pool.entries.push_back(std::move(e));
  }

  TrainRngs rngs(cfg_.seed);
  const auto list = rng_list(rngs);
  for (size_t i = 0; i < list.size(); ++i)
    *list[i] = Rng(cfg_.seed, list[i]->stream(), io::decode_u64(f.get(kRngNames[i])));

  const int epoch = static_cast<int>(io::decode_u64(f.get("ckpt.epoch")));
  std::vector<float> curve;
  std::vector<std::vector<std::optional<float>>> genome_curve;
  if (epoch > 0) {
    const Tensor& mean = f.get("curve.mean");
    const Tensor& per = f.get("curve.genome");
    const int g = cfg_.n_genomes();
    expect(mean.size() == static_cast<size_t>(epoch) && per.dims() == Shape{epoch, g}, "loss curve length");
    curve = mean.vec();
    for (int e = 0; e < epoch; ++e) {
      std::vector<std::optional<float>> row;
      for (int k = 0; k < g; ++k) {
        const float v = per[static_cast<size_t>(e) * g + k];
        row.push_back(std::isnan(v) ? std::nullopt : std::optional<float>(v));
      }
      genome_curve.push_back(std::move(row));
    }
  }

  params_ = std::move(params);
  adam_.set_state(std::move(adam));
  pool_ = std::move(pool);
  rngs_ = rngs;
  epoch_ = epoch;
  loss_curve_ = std::move(curve);
  genome_curve_ = std::move(genome_curve);
}

}  // namespace nca
