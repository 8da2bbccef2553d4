#include "nca/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>

namespace nca {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw std::invalid_argument("not a number: '" + v + "'");
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("not a boolean: '" + v + "'");
}

std::vector<std::string> split(const std::string& v, char sep) {
  std::vector<std::string> out;
  if (v.empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

std::string fmt(float v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field int_field(std::string key, T RunConfig::*group, int T::*member) {
  return {key, [=](RunConfig& c, const std::string& v) { (c.*group).*member = parse_number<int>(v); },
          [=](const RunConfig& c) { return std::to_string((c.*group).*member); }};
}

template <typename T>
Field float_field(std::string key, T RunConfig::*group, float T::*member) {
  return {key, [=](RunConfig& c, const std::string& v) { (c.*group).*member = parse_number<float>(v); },
          [=](const RunConfig& c) { return fmt((c.*group).*member); }};
}

Field shape_field(std::string key, int ModelShape::*member) {
  return {key, [=](RunConfig& c, const std::string& v) { c.train.shape.*member = parse_number<int>(v); },
          [=](const RunConfig& c) { return std::to_string(c.train.shape.*member); }};
}

Field path_field(std::string key, std::filesystem::path RunConfig::*member) {
  return {key, [=](RunConfig& c, const std::string& v) { c.*member = v; },
          [=](const RunConfig& c) { return (c.*member).string(); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      shape_field("n", &ModelShape::channels),
      shape_field("n_f", &ModelShape::hidden_filters),
      shape_field("n_g", &ModelShape::genome_channels),
      int_field("pool_size", &RunConfig::train, &TrainConfig::pool_size),
      int_field("batch_size", &RunConfig::train, &TrainConfig::batch_size),
      int_field("epochs", &RunConfig::train, &TrainConfig::epochs),
      int_field("height", &RunConfig::train, &TrainConfig::height),
      int_field("width", &RunConfig::train, &TrainConfig::width),
      int_field("min_steps", &RunConfig::train, &TrainConfig::min_steps),
      int_field("max_steps", &RunConfig::train, &TrainConfig::max_steps),
      float_field("min_radius", &RunConfig::train, &TrainConfig::min_radius),
      float_field("max_radius", &RunConfig::train, &TrainConfig::max_radius),
      float_field("learning_rate", &RunConfig::train, &TrainConfig::learning_rate),
      {"lr_decay_epochs",
       [](RunConfig& c, const std::string& v) {
         c.train.lr_decay_epochs.clear();
         for (const auto& s : split(v, ',')) c.train.lr_decay_epochs.push_back(parse_number<int>(s));
       },
       [](const RunConfig& c) {
         std::string s;
         for (int e : c.train.lr_decay_epochs) s += (s.empty() ? "" : ",") + std::to_string(e);
         return s;
       }},
      float_field("lr_decay", &RunConfig::train, &TrainConfig::lr_decay),
      {"regeneration", [](RunConfig& c, const std::string& v) { c.train.regeneration = parse_bool(v); },
       [](const RunConfig& c) { return std::string(c.train.regeneration ? "true" : "false"); }},
      {"seed",
       [](RunConfig& c, const std::string& v) {
         c.train.seed = parse_number<uint64_t>(v);
         c.eval.seed = c.train.seed;
       },
       [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      int_field("n_proj", &RunConfig::train, &TrainConfig::n_proj),
      {"fire_rate",
       [](RunConfig& c, const std::string& v) {
         c.train.fire_rate = parse_number<float>(v);
         c.eval.fire_rate = c.train.fire_rate;
       },
       [](const RunConfig& c) { return fmt(c.train.fire_rate); }},
      int_field("rollout_checkpoint", &RunConfig::train, &TrainConfig::rollout_checkpoint),
      int_field("threads", &RunConfig::train, &TrainConfig::threads),
      int_field("eval_instances", &RunConfig::eval, &metrics::EvalProtocol::instances),
      int_field("eval_generation_step", &RunConfig::eval, &metrics::EvalProtocol::generation_step),
      int_field("eval_regeneration_step", &RunConfig::eval, &metrics::EvalProtocol::regeneration_step),
      {"eval_buckets",
       [](RunConfig& c, const std::string& v) {
         c.eval.buckets.clear();
         for (const auto& s : split(v, ',')) {
           const auto dash = s.find('-');
           if (dash == std::string::npos) throw std::invalid_argument("bucket must look like LO-HI: '" + s + "'");
           c.eval.buckets.emplace_back(parse_number<float>(trim(s.substr(0, dash))),
                                       parse_number<float>(trim(s.substr(dash + 1))));
         }
       },
       [](const RunConfig& c) {
         std::string s;
         for (const auto& [lo, hi] : c.eval.buckets) s += (s.empty() ? "" : ",") + fmt(lo) + "-" + fmt(hi);
         return s;
       }},
      {"extractor", [](RunConfig& c, const std::string& v) { c.extractor = v; },
       [](const RunConfig& c) { return c.extractor; }},
      {"extractor_levels", [](RunConfig& c, const std::string& v) { c.extractor_levels = parse_number<int>(v); },
       [](const RunConfig& c) { return std::to_string(c.extractor_levels); }},
      path_field("exemplars", &RunConfig::exemplars),
      path_field("checkpoint", &RunConfig::checkpoint),
      {"checkpoint_every", [](RunConfig& c, const std::string& v) { c.checkpoint_every = parse_number<int>(v); },
       [](const RunConfig& c) { return std::to_string(c.checkpoint_every); }},
      path_field("loss_csv", &RunConfig::loss_csv),
  };
  return f;
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const Field& f : fields()) k.push_back(f.key);
    return k;
  }();
  return keys;
}

style::FeatureExtractorSpec RunConfig::make_extractor() const {
  if (extractor == "builtin") return style::FeatureExtractorSpec::builtin(extractor_levels);
  return style::FeatureExtractorSpec::load(extractor);
}

RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(std::string_view(raw).substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key=value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    const auto& fs = fields();
    const auto it = std::find_if(fs.begin(), fs.end(), [&](const Field& f) { return f.key == key; });
    if (it == fs.end()) throw std::invalid_argument("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    if (!seen.insert(key).second)
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    try {
      it->set(cfg, value);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + " (" + key + "): " + e.what());
    }
  }
  for (const Field& f : fields())
    if (!seen.count(f.key)) cfg.defaulted.push_back(f.key);
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config: " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

std::string config_value(const RunConfig& cfg, const std::string& key) {
  for (const Field& f : fields())
    if (f.key == key) return f.get(cfg);
  throw std::invalid_argument("unknown config key '" + key + "'");
}

}  // namespace nca
