#include "nca/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <csignal>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "nca/config.hpp"
#include "nca/image_io.hpp"
#include "nca/inference.hpp"
#include "nca/metrics.hpp"
#include "nca/service/server.hpp"
#include "nca/training.hpp"
#include "nca/weights_io.hpp"

namespace nca::cli {

namespace {

struct Common {
  uint64_t seed = 0;
  bool seed_set = false;
  int threads = 0;
  std::string workdir = ".";

  std::filesystem::path path(const std::string& p) const {
    const std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : std::filesystem::path(workdir) / fp;
  }

  int resolved_threads() const {
    if (threads > 0) return threads;
    if (const char* env = std::getenv("NCA_THREADS")) {
      const int v = std::atoi(env);
      if (v > 0) return v;
    }
    return 1;
  }
};

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::pair<int, int> parse_size(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw UsageError("--size must look like HxW, got '" + s + "'");
  try {
    const int h = std::stoi(s.substr(0, x)), w = std::stoi(s.substr(x + 1));
    if (h < 3 || w < 3) throw UsageError("--size must be at least 3x3");
    return {h, w};
  } catch (const std::logic_error&) {
    throw UsageError("--size must look like HxW, got '" + s + "'");
  }
}

std::vector<int> parse_int_list(const std::string& s, const char* flag) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw UsageError(std::string(flag) + " expects comma-separated integers, got '" + s + "'");
    }
  }
  if (out.empty()) throw UsageError(std::string(flag) + " must not be empty");
  return out;
}

std::vector<Tensor> load_exemplars(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("exemplar directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<Tensor> out;
  for (const auto& f : files) {
    std::cerr << "exemplar " << out.size() << ": " << f.filename().string() << '\n';
    out.push_back(io::load_image(f));
  }
  return out;
}

UpdateMask inference_mask(const io::Model& model, uint64_t seed) { return {model.fire_rate(), seed, 0}; }

void check_genome(const io::Model& m, int g) {
  if (g < 0 || g >= m.params.shape.genome_count())
    throw UsageError("--genome " + std::to_string(g) + " out of range for a model with " +
                     std::to_string(m.params.shape.genome_count()) + " genomes");
}

Region parse_region(const std::string& s) {
  const auto colon = s.find(':');
  const std::string kind = s.substr(0, colon);
  const std::vector<int> v = parse_int_list(colon == std::string::npos ? "" : s.substr(colon + 1), "--patch");
  if (kind == "rect" && v.size() == 4) return Region::rect(v[0], v[1], v[2], v[3]);
  if (kind == "disk" && v.size() == 3) return Region::disk(v[0], v[1], static_cast<float>(v[2]));
  throw UsageError("--patch must be rect:x0,y0,x1,y1 or disk:cx,cy,r");
}

// ---- subcommands ---------------------------------------------------------------------

struct TrainArgs {
  std::string config, exemplars, out, resume;
  bool baseline = false;
  int epochs = -1;
  int log_every = 50;
};

int run_train(const Common& c, const TrainArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : load_config(c.path(a.config));
  if (a.config.empty()) cfg.defaulted = config_keys();
  for (const auto& key : cfg.defaulted)
    std::cerr << "config: " << key << " not set, using default '" << config_value(cfg, key) << "'\n";
  if (a.baseline) cfg.train.regeneration = false;
  if (c.seed_set) cfg.train.seed = c.seed;
  if (a.epochs >= 0) cfg.train.epochs = a.epochs;
  cfg.train.threads = c.resolved_threads();
  const std::string exemplar_dir = a.exemplars.empty() ? cfg.exemplars.string() : a.exemplars;
  if (exemplar_dir.empty()) throw UsageError("--exemplars is required (or set 'exemplars' in the config)");
  const std::vector<Tensor> exemplars = load_exemplars(c.path(exemplar_dir));

  Trainer trainer(cfg.train, exemplars, cfg.make_extractor());
  if (!a.resume.empty()) {
    trainer.load_checkpoint(c.path(a.resume));
    std::cerr << "resumed at epoch " << trainer.epoch() << '\n';
  }
  const auto ckpt = cfg.checkpoint.empty() ? std::filesystem::path() : c.path(cfg.checkpoint.string());
  trainer.run(cfg.train.epochs, [&](const EpochReport& r) {
    const int done = r.plan.epoch + 1;
    if (a.log_every > 0 && (done % a.log_every == 0 || done == cfg.train.epochs))
      std::cerr << "epoch " << done << " loss " << r.mean_loss << " steps " << r.plan.steps << '\n';
    if (!ckpt.empty() && cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) trainer.save_checkpoint(ckpt);
  });
  if (!ckpt.empty()) trainer.save_checkpoint(ckpt);
  const auto out = c.path(a.out);
  io::save_weights(out, trainer.params(), trainer.model_metadata());
  const auto csv = cfg.loss_csv.empty() ? std::filesystem::path(out.string() + ".loss.csv") : c.path(cfg.loss_csv.string());
  trainer.write_loss_csv(csv);
  std::cout << "wrote " << out.string() << " and " << csv.string() << '\n';
  return 0;
}

struct SynthArgs {
  std::string model, size = "64x64", out;
  int genome = 0;
  int steps = 300;
};

int run_synth(const Common& c, const SynthArgs& a) {
  const io::Model m = io::load_weights(c.path(a.model));
  check_genome(m, a.genome);
  const auto [h, w] = parse_size(a.size);
  const CellGrid g = synthesize(m.params, a.genome, h, w, a.steps, inference_mask(m, c.seed));
  io::save_image(to_rgb(g), c.path(a.out));
  return 0;
}

struct GraftArgs {
  std::string model, layout = "halves", genomes, size = "64x64", out, patch;
  int steps = 300;
  float blend_width = 8.0f;
  int transfer_step = 0;
};

int run_graft(const Common& c, const GraftArgs& a) {
  const io::Model m = io::load_weights(c.path(a.model));
  const auto [h, w] = parse_size(a.size);
  const std::vector<int> genomes = parse_int_list(a.genomes, "--genomes");
  for (int g : genomes) check_genome(m, g);
  Tensor img;
  if (!a.patch.empty()) {
    if (genomes.size() != 2) throw UsageError("--patch needs --genomes DEST,SOURCE");
    PatchTransferSpec spec{genomes[1], genomes[0], parse_region(a.patch), a.transfer_step};
    spec.region.validate(h, w);
    img = graft_by_patch_transfer(m.params, spec, h, w, a.steps, inference_mask(m, c.seed));
  } else {
    std::string layout_text = a.layout;
    if (layout_text.rfind("mask:", 0) == 0) layout_text = "mask:" + c.path(layout_text.substr(5)).string();
    const GraftLayout layout = GraftLayout::parse(layout_text, genomes, a.blend_width);
    img = graft_inference(m.params, layout, h, w, a.steps, inference_mask(m, c.seed));
  }
  io::save_image(img, c.path(a.out));
  return 0;
}

struct RegenArgs {
  std::string model, size = "64x64", out_before, out_after, center, fill = "randomize";
  int genome = 0;
  float radius = 20.0f;
  int damage_step = 300;
  int steps = 500;
};

int run_regen(const Common& c, const RegenArgs& a) {
  const io::Model m = io::load_weights(c.path(a.model));
  check_genome(m, a.genome);
  const auto [h, w] = parse_size(a.size);
  if (a.damage_step < 0 || a.damage_step > a.steps) throw UsageError("--damage-step must lie in [0, --steps]");
  int cx = w / 2, cy = h / 2;
  if (!a.center.empty()) {
    const auto v = parse_int_list(a.center, "--center");
    if (v.size() != 2) throw UsageError("--center must be X,Y");
    cx = v[0];
    cy = v[1];
  }
  if (a.fill != "randomize" && a.fill != "zero") throw UsageError("--fill must be randomize or zero");
  const UpdateMask mask = inference_mask(m, c.seed);
  CellGrid g = synthesize(m.params, a.genome, h, w, a.damage_step, mask);
  if (!a.out_before.empty()) io::save_image(to_rgb(g), c.path(a.out_before));
  Rng rng(c.seed, Rng::damage);
  apply_damage(g, {cx, cy, a.radius, a.fill == "zero" ? DamageFill::zero : DamageFill::randomize}, rng);
  Evolver(m.params).run(g, a.steps - a.damage_step, mask.advanced(a.damage_step));
  if (!a.out_after.empty()) io::save_image(to_rgb(g), c.path(a.out_after));
  return 0;
}

struct EvalArgs {
  std::string model, exemplars, protocol = "default", out, json, extractor = "builtin";
  int instances = 0;
  bool self_check = false;
  bool skip_regeneration = false;
};

int run_eval(const Common& c, const EvalArgs& a) {
  const io::Model m = io::load_weights(c.path(a.model));
  const std::vector<Tensor> exemplars = load_exemplars(c.path(a.exemplars));
  metrics::EvalProtocol protocol;
  style::FeatureExtractorSpec extractor = style::FeatureExtractorSpec::builtin();
  if (a.protocol != "default") {
    const RunConfig cfg = load_config(c.path(a.protocol));
    protocol = cfg.eval;
    extractor = cfg.make_extractor();
  }
  if (a.extractor != "builtin") extractor = style::FeatureExtractorSpec::load(c.path(a.extractor));
  protocol.fire_rate = m.fire_rate();
  protocol.seed = c.seed;
  protocol.self_check = a.self_check;
  if (a.instances > 0) protocol.instances = a.instances;

  const auto gen = metrics::eval_generation(m.params, exemplars, protocol, extractor);
  std::optional<metrics::RegenerationReport> regen;
  if (!a.skip_regeneration) regen = metrics::eval_regeneration(m.params, exemplars, protocol, extractor);
  metrics::write_eval_csv(c.path(a.out), gen, regen, protocol);
  const auto json_path = a.json.empty() ? std::filesystem::path(c.path(a.out).string() + ".json") : c.path(a.json);
  metrics::write_eval_json(json_path, gen, regen, protocol);
  std::cout << "generation: gmd " << gen.gmd << " ssim " << gen.ssim << '\n';
  return 0;
}

struct ServeArgs {
  std::string model, address = "127.0.0.1";
  int port = 8080;
};

int run_serve(const Common& c, const ServeArgs& a) {
  service::Registry registry;
  if (!a.model.empty()) std::cout << "model_id " << registry.load_model(c.path(a.model)) << '\n';
  service::Server server(registry, a.address, static_cast<unsigned short>(a.port), c.workdir);
  server.start(std::max(2, c.resolved_threads()));
  std::cout << "listening on " << a.address << ':' << server.port() << std::endl;
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  int sig = 0;
  sigwait(&set, &sig);
  server.stop();
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Genome-conditioned neural cellular automata for texture synthesis, regeneration and grafting", "nca"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--seed", common.seed, "Seed for every random choice (default 0)")
      ->each([&](const std::string&) { common.seed_set = true; });
  app.add_option("--threads", common.threads, "Worker thread cap (falls back to NCA_THREADS, then 1)")
      ->check(CLI::PositiveNumber);
  app.add_option("--workdir", common.workdir, "Base directory for relative paths")->capture_default_str();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model on exemplar textures");
  t->add_option("--config", train.config, "Run configuration file (key=value)");
  t->add_option("--exemplars", train.exemplars, "Directory of exemplar PNGs; sorted file names give genome order");
  t->add_option("--out", train.out, "Output weights file")->required();
  t->add_flag("--baseline", train.baseline, "Use the baseline pool strategy (no damage during training)");
  t->add_option("--resume", train.resume, "Checkpoint to resume from");
  t->add_option("--epochs", train.epochs, "Override the configured epoch count");
  t->add_option("--log-every", train.log_every, "Progress line interval in epochs (0 disables)")->capture_default_str();

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Grow a texture from a single genome");
  s->add_option("--model", synth.model, "Weights file")->required();
  s->add_option("--genome", synth.genome, "Genome index")->capture_default_str();
  s->add_option("--size", synth.size, "Grid size HxW")->capture_default_str();
  s->add_option("--steps", synth.steps, "Steps to evolve")->capture_default_str()->check(CLI::NonNegativeNumber);
  s->add_option("--out", synth.out, "Output PNG")->required();

  GraftArgs graft;
  auto* g = app.add_subcommand("graft", "Grow several textures on one grid");
  g->add_option("--model", graft.model, "Weights file")->required();
  g->add_option("--layout", graft.layout, "halves | stripes:N | concentric:N | mask:FILE")->capture_default_str();
  g->add_option("--genomes", graft.genomes, "Comma-separated genome per region, e.g. 0,1")->required();
  g->add_option("--steps", graft.steps, "Steps to evolve")->capture_default_str()->check(CLI::NonNegativeNumber);
  g->add_option("--size", graft.size, "Grid size HxW")->capture_default_str();
  g->add_option("--blend-width", graft.blend_width, "Interface blend width in cells")->capture_default_str();
  g->add_option("--patch", graft.patch,
                "Graft by patch transfer instead: rect:x0,y0,x1,y1 or disk:cx,cy,r (genomes DEST,SOURCE)");
  g->add_option("--transfer-step", graft.transfer_step, "Step at which the patch is transferred")->capture_default_str();
  g->add_option("--out", graft.out, "Output PNG")->required();

  RegenArgs regen;
  auto* r = app.add_subcommand("regen", "Damage a grown texture and let it regenerate");
  r->add_option("--model", regen.model, "Weights file")->required();
  r->add_option("--genome", regen.genome, "Genome index")->capture_default_str();
  r->add_option("--damage-radius", regen.radius, "Damage disk radius in cells")->capture_default_str();
  r->add_option("--damage-step", regen.damage_step, "Step at which damage is applied")->capture_default_str();
  r->add_option("--steps", regen.steps, "Total steps")->capture_default_str();
  r->add_option("--center", regen.center, "Damage center X,Y (default grid center)");
  r->add_option("--fill", regen.fill, "randomize | zero")->capture_default_str();
  r->add_option("--size", regen.size, "Grid size HxW")->capture_default_str();
  r->add_option("--out-before", regen.out_before, "PNG of the state just before damage");
  r->add_option("--out-after", regen.out_after, "PNG of the final state");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Generation and regeneration metrics");
  e->add_option("--model", eval.model, "Weights file")->required();
  e->add_option("--exemplars", eval.exemplars, "Directory of exemplar PNGs")->required();
  e->add_option("--protocol", eval.protocol, "'default' or a config file with eval_* keys")->capture_default_str();
  e->add_option("--extractor", eval.extractor, "'builtin' or a feature extractor weights file")->capture_default_str();
  e->add_option("--instances", eval.instances, "Override instances per genome");
  e->add_flag("--self-check", eval.self_check, "Compare every exemplar with itself");
  e->add_flag("--generation-only", eval.skip_regeneration, "Skip the regeneration table");
  e->add_option("--out", eval.out, "Output CSV")->required();
  e->add_option("--json", eval.json, "Output JSON (default: <out>.json)");

  ServeArgs serve;
  auto* v = app.add_subcommand("serve", "Run the HTTP/WebSocket session service");
  v->add_option("--model", serve.model, "Weights file to preload");
  v->add_option("--port", serve.port, "TCP port")->capture_default_str();
  v->add_option("--address", serve.address, "Bind address")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*t) return run_train(common, train);
    if (*s) return run_synth(common, synth);
    if (*g) return run_graft(common, graft);
    if (*r) return run_regen(common, regen);
    if (*e) return run_eval(common, eval);
    if (*v) return run_serve(common, serve);
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace nca::cli
