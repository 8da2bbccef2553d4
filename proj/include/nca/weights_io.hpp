#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nca/nca.hpp"
#include "nca/tensor.hpp"

namespace nca::io {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Portable named-tensor container. Byte layout (all integers little-endian):
//   "NCAW" | u32 version | u32 count |
//   count x { u16 name_len | name | u8 rank | rank x u32 dim | u8 dtype(0=f32) | payload } |
//   u32 crc32 of every preceding byte
struct WeightsFile {
  static constexpr uint32_t kVersion = 1;

  struct Entry {
    std::string name;
    Tensor value;
  };
  std::vector<Entry> entries;

  void add(std::string name, Tensor value);
  const Tensor* find(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return find(name) != nullptr; }
};

std::vector<uint8_t> encode(const WeightsFile& file);
WeightsFile decode(std::span<const uint8_t> bytes);

void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes);
std::vector<uint8_t> read_file(const std::filesystem::path& path);

void save_weights_file(const std::filesystem::path& path, const WeightsFile& file);
WeightsFile load_weights_file(const std::filesystem::path& path);

// Model persistence: the update rule plus scalar metadata stored as "meta.<key>".
// The shape entries meta.n, meta.n_f and meta.n_g are always written.
struct Model {
  UpdateRuleParams params;
  std::map<std::string, float> metadata;

  float fire_rate() const;
};

WeightsFile model_to_weights(const UpdateRuleParams& params, const std::map<std::string, float>& metadata);
Model model_from_weights(const WeightsFile& file);
void save_weights(const std::filesystem::path& path, const UpdateRuleParams& params,
                  const std::map<std::string, float>& metadata = {});
Model load_weights(const std::filesystem::path& path);

uint32_t crc32(std::span<const uint8_t> bytes);

}  // namespace nca::io
