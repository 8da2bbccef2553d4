#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "nca/metrics.hpp"
#include "nca/training.hpp"

namespace nca {

// Flat key=value run configuration. '#' starts a comment; blank lines are ignored.
struct RunConfig {
  TrainConfig train;
  metrics::EvalProtocol eval;
  std::string extractor = "builtin";  // "builtin" or a weights file path
  int extractor_levels = 3;
  std::filesystem::path exemplars;
  std::filesystem::path checkpoint;  // empty disables periodic checkpoints
  int checkpoint_every = 0;          // epochs between checkpoints
  std::filesystem::path loss_csv;

  // Keys absent from the parsed text, in declaration order.
  std::vector<std::string> defaulted;

  style::FeatureExtractorSpec make_extractor() const;
};

// Every accepted key, in declaration order.
const std::vector<std::string>& config_keys();

// Throws std::invalid_argument naming the line on unknown keys, duplicates or bad values.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);
// Current value of `key` rendered as config text.
std::string config_value(const RunConfig& cfg, const std::string& key);

}  // namespace nca
