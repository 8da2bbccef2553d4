#include <doctest.h>

#include <fstream>
#include <iostream>
#include <sstream>

#include "nca/cli.hpp"
#include "nca/image_io.hpp"
#include "nca/inference.hpp"
#include "nca/weights_io.hpp"
#include "oracles.hpp"

using namespace nca;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run nca_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "nca");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  Run r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data());
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

struct Workdir {
  std::filesystem::path dir;
  UpdateRuleParams params;

  Workdir() : dir(std::filesystem::temp_directory_path() / "nca_unit_cli") {
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir / "ex");
    Rng rng(2, Rng::init);
    params = UpdateRuleParams::initial({8, 16, 1}, rng);
    for (float& v : params.w2.value.data()) v = 0.05f * rng.normal();
    io::save_weights(dir / "m.ncaw", params, {{"fire_rate", 0.5f}});
    std::mt19937 gen(50);
    io::save_image(oracle::random_tensor({3, 16, 16}, gen, 0.0f, 1.0f), dir / "ex" / "a.png");
    io::save_image(oracle::random_tensor({3, 16, 16}, gen, 0.0f, 1.0f), dir / "ex" / "b.png");
  }
  ~Workdir() { std::filesystem::remove_all(dir); }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

int line_count(const std::string& path) {
  std::ifstream in(path);
  int n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

}  // namespace

TEST_CASE("help lists every subcommand and flag") {
  const Run top = nca_cli({"--help"});
  CHECK(top.code == 0);
  for (const char* sub : {"train", "synth", "graft", "regen", "eval", "serve"}) CHECK(top.out.find(sub) != std::string::npos);
  for (const char* flag : {"--seed", "--threads", "--workdir"}) CHECK(top.out.find(flag) != std::string::npos);

  const std::map<std::string, std::vector<std::string>> flags{
      {"train", {"--config", "--exemplars", "--out", "--baseline", "--resume", "--epochs"}},
      {"synth", {"--model", "--genome", "--size", "--steps", "--out"}},
      {"graft", {"--model", "--layout", "--genomes", "--steps", "--size", "--blend-width", "--patch", "--out"}},
      {"regen", {"--model", "--genome", "--damage-radius", "--steps", "--center", "--fill", "--out-before", "--out-after"}},
      {"eval", {"--model", "--exemplars", "--protocol", "--extractor", "--instances", "--self-check", "--out", "--json"}},
      {"serve", {"--model", "--port", "--address"}}};
  for (const auto& [sub, list] : flags) {
    const Run r = nca_cli({sub, "--help"});
    CHECK(r.code == 0);
    for (const auto& f : list) CHECK_MESSAGE(r.out.find(f) != std::string::npos, sub << " " << f);
  }
}

TEST_CASE("usage errors exit with 1, runtime failures with 2") {
  Workdir w;
  CHECK(nca_cli({"synth", "--out", w.path("x.png")}).code == 1);
  CHECK(nca_cli({"bogus"}).code == 1);
  CHECK(nca_cli({"synth", "--model", w.path("m.ncaw"), "--size", "ax3", "--out", w.path("x.png")}).code == 1);
  CHECK(nca_cli({"graft", "--model", w.path("m.ncaw"), "--genomes", "0,7", "--out", w.path("x.png")}).code != 0);
  const Run missing = nca_cli({"synth", "--model", w.path("none.ncaw"), "--out", w.path("x.png")});
  CHECK(missing.code == 2);
  CHECK(missing.err.rfind("error: ", 0) == 0);
}

TEST_CASE("synth and graft outputs") {
  Workdir w;
  REQUIRE(nca_cli({"synth", "--model", w.path("m.ncaw"), "--steps", "0", "--size", "8x12", "--out", w.path("zero.png")}).code == 0);
  const Tensor zero = io::load_image(w.path("zero.png"));
  CHECK(zero.dims() == std::vector<int>{3, 8, 12});
  for (float v : zero.data()) CHECK(v == 0.0f);

  REQUIRE(nca_cli({"--seed", "4", "synth", "--model", w.path("m.ncaw"), "--genome", "1", "--steps", "20", "--size", "16x16",
                   "--out", w.path("s.png")})
              .code == 0);
  REQUIRE(nca_cli({"--seed", "4", "--workdir", w.dir.string(), "graft", "--model", "m.ncaw", "--genomes", "1,1", "--steps",
                   "20", "--size", "16x16", "--out", "g.png"})
              .code == 0);
  const Tensor s = io::load_image(w.path("s.png"));
  CHECK(io::load_image(w.path("g.png")) == s);
  std::vector<uint8_t> expect = io::to_rgb8(to_rgb(synthesize(w.params, 1, 16, 16, 20, {0.5f, 4, 0})));
  CHECK(io::to_rgb8(s) == expect);

  REQUIRE(nca_cli({"graft", "--model", w.path("m.ncaw"), "--genomes", "1,0", "--patch", "rect:0,0,16,16", "--steps", "5",
                   "--size", "16x16", "--out", w.path("p.png")})
              .code == 0);
  CHECK(nca_cli({"graft", "--model", w.path("m.ncaw"), "--genomes", "1,0", "--patch", "oval:1", "--out", w.path("p.png")}).code == 1);
}

TEST_CASE("regen writes before and after images") {
  Workdir w;
  const Run r = nca_cli({"regen", "--model", w.path("m.ncaw"), "--genome", "1", "--size", "16x16", "--damage-radius", "4",
                         "--damage-step", "5", "--steps", "10", "--fill", "zero", "--out-before", w.path("b.png"),
                         "--out-after", w.path("a.png")});
  REQUIRE(r.code == 0);
  CHECK(io::to_rgb8(io::load_image(w.path("b.png"))) == io::to_rgb8(to_rgb(synthesize(w.params, 1, 16, 16, 5, {0.5f, 0, 0}))));
  CHECK(std::filesystem::exists(w.path("a.png")));
  CHECK(nca_cli({"regen", "--model", w.path("m.ncaw"), "--fill", "paint", "--out-after", w.path("a.png")}).code == 1);
}

TEST_CASE("eval writes one CSV row per genome and bucket") {
  Workdir w;
  const Run r = nca_cli({"eval", "--model", w.path("m.ncaw"), "--exemplars", w.path("ex"), "--instances", "1",
                         "--self-check", "--generation-only", "--out", w.path("e.csv")});
  REQUIRE(r.code == 0);
  CHECK(line_count(w.path("e.csv")) == 1 + 2);
  CHECK(std::filesystem::exists(w.path("e.csv.json")));

  std::ofstream(w.path("proto.cfg")) << "eval_instances=1\neval_generation_step=2\neval_regeneration_step=4\n"
                                        "eval_buckets=1-2,3-4\n";
  const Run full = nca_cli({"eval", "--model", w.path("m.ncaw"), "--exemplars", w.path("ex"), "--protocol",
                            w.path("proto.cfg"), "--out", w.path("f.csv"), "--json", w.path("f.json")});
  REQUIRE(full.code == 0);
  CHECK(line_count(w.path("f.csv")) == 1 + 2 + 2 * 2);
  CHECK(std::filesystem::exists(w.path("f.json")));
}

TEST_CASE("train produces weights, loss csv and reports defaults") {
  Workdir w;
  std::ofstream(w.path("run.cfg")) << "n=8\nn_f=16\nn_g=1\nheight=16\nwidth=16\nbatch_size=2\npool_size=4\n"
                                      "n_proj=4\nextractor_levels=2\nepochs=2\nmin_radius=2\nmax_radius=3\n";
  const Run r = nca_cli({"train", "--config", w.path("run.cfg"), "--exemplars", w.path("ex"), "--out", w.path("t.ncaw"),
                         "--log-every", "1"});
  REQUIRE(r.code == 0);
  CHECK(r.err.find("config: learning_rate not set") != std::string::npos);
  CHECK(r.err.find("exemplar 0: a.png") != std::string::npos);
  CHECK(io::load_weights(w.path("t.ncaw")).params.shape.channels == 8);
  CHECK(line_count(w.path("t.ncaw.loss.csv")) == 3);
  CHECK(nca_cli({"train", "--config", w.path("run.cfg"), "--out", w.path("t.ncaw")}).code == 1);
}
