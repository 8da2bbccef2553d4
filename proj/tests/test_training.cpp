#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>

#include "nca/inference.hpp"
#include "nca/training.hpp"
#include "oracles.hpp"

using namespace nca;

namespace {

TrainConfig small_config(int n_g = 1) {
  TrainConfig cfg;
  cfg.shape = {8, 16, n_g};
  cfg.pool_size = 4 * (1 << n_g);
  cfg.batch_size = 4;
  cfg.height = 16;
  cfg.width = 16;
  cfg.min_radius = 3;
  cfg.max_radius = 5;
  cfg.n_proj = 4;
  cfg.seed = 7;
  return cfg;
}

std::vector<Tensor> exemplars(int count, int h, int w) {
  std::vector<Tensor> out;
  std::mt19937 gen(100);
  for (int i = 0; i < count; ++i) out.push_back(oracle::random_tensor({3, h, w}, gen, 0.0f, 1.0f));
  return out;
}

style::FeatureExtractorSpec small_extractor() { return style::FeatureExtractorSpec::builtin(2); }

int changed_cells(const CellGrid& a, const CellGrid& b) {
  int n = 0;
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x) {
      bool diff = false;
      for (int c = 0; c < a.channels(); ++c) diff = diff || a.at(c, y, x) != b.at(c, y, x);
      n += diff;
    }
  return n;
}

}  // namespace

TEST_CASE("config validation") {
  TrainConfig cfg = small_config(2);
  cfg.validate();
  CHECK(TrainConfig{}.resolved_pool_size() == 32);
  cfg.pool_size = 6;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK_THROWS_AS(init_pool(cfg), std::invalid_argument);
  cfg = small_config();
  cfg.min_steps = 10;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = small_config();
  cfg.max_steps = 91;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = small_config();
  cfg.batch_size = cfg.resolved_pool_size() + 1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("learning rate schedule") {
  TrainConfig cfg;
  CHECK(cfg.lr_at(0) == 1e-3f);
  CHECK(cfg.lr_at(999) == 1e-3f);
  CHECK(cfg.lr_at(1000) == 5e-4f);
  CHECK(cfg.lr_at(1500) == 2.5e-4f);
}

TEST_CASE("init_pool divides seeds equally") {
  TrainConfig cfg = small_config(2);
  cfg.pool_size = 8;
  const Pool pool = init_pool(cfg);
  CHECK(pool.size() == 8);
  CHECK(pool.genome_histogram(4) == std::vector<int>{2, 2, 2, 2});
  for (const auto& e : pool.entries) {
    CHECK_FALSE(e.last_loss.has_value());
    CHECK(e.state == seed_of_genome(16, 16, genome_of_index(e.genome_index, 2), 8));
    for (int c = 3; c < 6; ++c) CHECK(e.state.at(c, 5, 5) == 0.0f);
  }
}

TEST_CASE("sample_batch draws distinct indices uniformly") {
  TrainConfig cfg = small_config(2);
  const Pool pool = init_pool(cfg);
  Rng rng(1, Rng::pool);
  auto all = sample_batch(pool, pool.size(), rng);
  std::sort(all.begin(), all.end());
  for (int i = 0; i < pool.size(); ++i) CHECK(all[static_cast<size_t>(i)] == i);
  CHECK_THROWS_AS(sample_batch(pool, pool.size() + 1, rng), std::invalid_argument);

  const int draws = 10000, batch = 4;
  std::vector<int> hits(static_cast<size_t>(pool.size()), 0);
  for (int d = 0; d < draws; ++d) {
    auto b = sample_batch(pool, batch, rng);
    std::sort(b.begin(), b.end());
    CHECK(std::adjacent_find(b.begin(), b.end()) == b.end());
    for (int i : b) ++hits[static_cast<size_t>(i)];
  }
  const double p = static_cast<double>(batch) / pool.size();
  const double sigma = std::sqrt(draws * p * (1 - p));
  for (int h : hits) CHECK(std::abs(h - draws * p) < 3 * sigma);
}

TEST_CASE("cyclic seed replacement") {
  TrainConfig cfg = small_config(2);
  CHECK(5 % cfg.n_genomes() == 1);

  Pool pool = init_pool(cfg);  // genomes 0,0,0,0,1,1,1,1,...
  pool.entries[4].last_loss = 0.4f;
  pool.entries[5].last_loss = 0.9f;
  pool.entries[0].last_loss = 5.0f;
  const std::vector<int> batch{0, 4, 5};
  const Replacement r = cyclic_seed_replacement(pool, batch, 5, cfg);
  CHECK(r.genome == 1);
  CHECK(r.slot == 5);
  CHECK_FALSE(r.relabeled);
  CHECK_FALSE(pool.entries[5].last_loss.has_value());

  Pool other = init_pool(cfg);
  other.entries[0].last_loss = 0.2f;
  other.entries[1].last_loss = 0.7f;
  const std::vector<int> no_gr{0, 1};
  const Replacement fallback = cyclic_seed_replacement(other, no_gr, 2, cfg);
  CHECK(fallback.slot == 1);
  CHECK(fallback.relabeled);
  CHECK(other.entries[1].genome_index == 2);
  CHECK(other.entries[1].state == seed_of_genome(16, 16, genome_of_index(2, 2), 8));

  Pool tie = init_pool(cfg);
  tie.entries[1].last_loss = 0.5f;
  tie.entries[2].last_loss = 0.5f;
  const std::vector<int> tb{2, 1};
  CHECK(cyclic_seed_replacement(tie, tb, 0, cfg).slot == 1);
}

TEST_CASE("damage_state changes exactly the lattice disk") {
  CellGrid g = seed_of_genome(128, 128, genome_of_index(1, 1), 8);
  const CellGrid before = g;
  Rng rng(3, Rng::damage);
  damage_state(g, 64, 64, 15.0f, rng);
  CHECK(changed_cells(before, g) == oracle::disk_cells(64, 64, 15.0, 128, 128));
  CHECK(oracle::disk_cells(64, 64, 15.0, 128, 128) == 709);
  for (int y = 0; y < 128; ++y)
    for (int x = 0; x < 128; ++x)
      if ((x - 64) * (x - 64) + (y - 64) * (y - 64) > 225)
        for (int c = 0; c < 8; ++c) REQUIRE(g.at(c, y, x) == before.at(c, y, x));
      else
        for (int c = 0; c < 8; ++c) REQUIRE((g.at(c, y, x) >= 0.0f && g.at(c, y, x) < 1.0f));

  CellGrid tiny = before;
  damage_state(tiny, 10, 20, 0.5f, rng);
  CHECK(changed_cells(before, tiny) == 1);

  CellGrid edge = before;
  damage_state(edge, 0, 0, 3.0f, rng);
  CHECK(changed_cells(before, edge) == oracle::disk_cells(0, 0, 3.0, 128, 128));
  CHECK_THROWS_AS(damage_state(edge, 0, 0, 0.0f, rng), std::invalid_argument);
}

TEST_CASE("damage_lowest_two") {
  TrainConfig cfg = small_config(1);
  Pool pool = init_pool(cfg);
  pool.entries[0].last_loss = 0.1f;
  pool.entries[1].last_loss = 0.9f;
  pool.entries[2].last_loss = 0.2f;
  Rng rng(4, Rng::damage);
  const Pool before = pool;
  const std::vector<int> batch{1, 2, 0};
  CHECK(damage_lowest_two(pool, batch, -1, cfg, rng) == std::vector<int>{0, 2});
  CHECK(pool.entries[1].state == before.entries[1].state);
  CHECK(changed_cells(before.entries[0].state, pool.entries[0].state) > 0);

  Pool two = init_pool(cfg);
  const std::vector<int> pair{0, 1};
  CHECK(damage_lowest_two(two, pair, 1, cfg, rng) == std::vector<int>{0});

  Pool tie = init_pool(cfg);
  for (int i = 0; i < 4; ++i) tie.entries[static_cast<size_t>(i)].last_loss = 0.3f;
  const std::vector<int> tb{3, 1, 2, 0};
  CHECK(damage_lowest_two(tie, tb, 0, cfg, rng) == std::vector<int>{1, 2});
}

TEST_CASE("prepare_batch follows the epoch recipe under stubbed losses") {
  TrainConfig cfg = small_config(2);
  cfg.pool_size = 16;
  cfg.batch_size = 5;
  Pool pool = init_pool(cfg);
  TrainRngs rngs(cfg.seed);
  std::mt19937 gen(5);
  std::uniform_real_distribution<float> loss(0.0f, 1.0f);
  for (int epoch = 0; epoch < 40; ++epoch) {
    const Pool before = pool;
    const EpochPlan plan = prepare_batch(pool, cfg, epoch, rngs);
    CHECK(plan.replacement.genome == epoch % 4);
    CHECK(pool.entries[static_cast<size_t>(plan.replacement.slot)].state ==
          seed_of_genome(16, 16, genome_of_index(epoch % 4, 2), 8));
    CHECK(plan.damaged.size() == 2);
    CHECK(std::find(plan.damaged.begin(), plan.damaged.end(), plan.replacement.slot) == plan.damaged.end());
    CHECK(plan.steps >= 64);
    CHECK(plan.steps <= 90);
    CHECK(pool.size() == 16);
    for (int i = 0; i < pool.size(); ++i) {
      const bool touched = i == plan.replacement.slot ||
                           std::find(plan.damaged.begin(), plan.damaged.end(), i) != plan.damaged.end();
      if (!touched) CHECK(pool.entries[static_cast<size_t>(i)].state == before.entries[static_cast<size_t>(i)].state);
    }
    for (int idx : plan.batch) pool.entries[static_cast<size_t>(idx)].last_loss = loss(gen);
  }

  cfg.regeneration = false;
  Pool base = init_pool(cfg);
  TrainRngs brngs(cfg.seed);
  for (int epoch = 0; epoch < 5; ++epoch) CHECK(prepare_batch(base, cfg, epoch, brngs).damaged.empty());
}

TEST_CASE("first-epoch losses equal an independent forward-only evaluation") {
  TrainConfig cfg = small_config(1);
  cfg.regeneration = false;
  const auto ex = exemplars(2, 16, 16);
  const StyleTargets targets(small_extractor(), ex);
  Rng init(cfg.seed, Rng::init);
  UpdateRuleParams params = UpdateRuleParams::initial(cfg.shape, init);
  // A non-trivial rule so the rollout actually moves.
  for (float& v : params.w2.value.data()) v = 0.01f * init.normal();
  const UpdateRuleParams frozen = params;
  ad::AdamOptimizer adam;
  Pool pool = init_pool(cfg);
  TrainRngs rngs(cfg.seed);
  const EpochReport report = train_epoch(params, adam, pool, cfg, 0, rngs, targets);
  REQUIRE(report.element_losses.size() == 4);
  for (size_t i = 0; i < report.plan.batch.size(); ++i) {
    const int slot = report.plan.batch[i];
    const int genome = pool.entries[static_cast<size_t>(slot)].genome_index;
    const CellGrid out = synthesize(frozen, genome, 16, 16, report.plan.steps, {cfg.fire_rate, report.plan.mask_seeds[i], 0});
    const float expect = grid_swl(out, targets.features[static_cast<size_t>(genome)], targets.extractor, report.projections);
    CHECK(report.element_losses[i] == doctest::Approx(expect).epsilon(1e-5));
    CHECK(pool.entries[static_cast<size_t>(slot)].last_loss == report.element_losses[i]);
    CHECK(pool.entries[static_cast<size_t>(slot)].state == out);
  }
  CHECK(report.plan.damaged.empty());
  CHECK(pool.size() == cfg.resolved_pool_size());
  CHECK(params.w1.value != frozen.w1.value);
}

TEST_CASE("trainer basics") {
  TrainConfig cfg = small_config(1);
  cfg.epochs = 3;
  const auto ex = exemplars(2, 16, 16);
  CHECK_THROWS_AS(Trainer(cfg, exemplars(3, 16, 16), small_extractor()), std::invalid_argument);

  Trainer zero(cfg, ex, small_extractor());
  Rng init(cfg.seed, Rng::init);
  const UpdateRuleParams initial = UpdateRuleParams::initial(cfg.shape, init);
  zero.run(0);
  CHECK(zero.params().w1.value == initial.w1.value);
  CHECK(zero.loss_curve().empty());

  Trainer t(cfg, ex, small_extractor());
  int calls = 0;
  t.run(3, [&](const EpochReport& r) {
    CHECK(r.plan.epoch == calls);
    CHECK(std::isfinite(r.mean_loss));
    CHECK(r.plan.damaged.size() == 2);
    ++calls;
  });
  CHECK(calls == 3);
  CHECK(t.loss_curve().size() == 3);
  CHECK(t.epoch() == 3);
  const auto meta = t.model_metadata();
  CHECK(meta.at("fire_rate") == cfg.fire_rate);
}

TEST_CASE("training is deterministic and thread-count independent") {
  TrainConfig cfg = small_config(1);
  const auto ex = exemplars(2, 16, 16);
  auto run = [&](int threads) {
    TrainConfig c = cfg;
    c.threads = threads;
    Trainer t(c, ex, small_extractor());
    t.run(3);
    return t.params().w1.value;
  };
  const Tensor a = run(1);
  CHECK(run(1) == a);
  CHECK(run(3) == a);
}

TEST_CASE("checkpoint resume reproduces the uninterrupted run") {
  TrainConfig cfg = small_config(1);
  const auto ex = exemplars(2, 16, 16);
  const auto path = std::filesystem::temp_directory_path() / "nca_unit_resume.ckpt";
  Trainer full(cfg, ex, small_extractor());
  full.run(4);
  Trainer first(cfg, ex, small_extractor());
  first.run(2);
  first.save_checkpoint(path);
  Trainer second(cfg, ex, small_extractor());
  second.load_checkpoint(path);
  CHECK(second.epoch() == 2);
  second.run(4);
  for (size_t i = 0; i < 4; ++i) CHECK(second.params().list()[i]->value == full.params().list()[i]->value);
  CHECK(second.loss_curve() == full.loss_curve());

  TrainConfig other = cfg;
  other.seed = 8;
  Trainer mismatch(other, ex, small_extractor());
  CHECK_THROWS(mismatch.load_checkpoint(path));
  CHECK_THROWS_WITH(second.load_checkpoint(path.string() + ".missing"), doctest::Contains("not found"));
  std::filesystem::remove(path);
}

TEST_CASE("loss csv lists epoch, mean and per-genome losses") {
  TrainConfig cfg = small_config(1);
  Trainer t(cfg, exemplars(2, 16, 16), small_extractor());
  t.run(2);
  const auto path = std::filesystem::temp_directory_path() / "nca_unit_loss.csv";
  t.write_loss_csv(path);
  std::ifstream in(path);
  std::string header, line;
  std::getline(in, header);
  CHECK(header == "epoch,mean_loss,loss_g0,loss_g1");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 2);
  std::filesystem::remove(path);
}
