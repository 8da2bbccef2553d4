#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "nca/autodiff.hpp"
#include "nca/rng.hpp"
#include "nca/tensor.hpp"

namespace nca::io {
struct WeightsFile;
}

namespace nca::style {

enum class LayerKind { conv3x3, relu, pool_max, pool_mean };

struct Layer {
  LayerKind kind = LayerKind::relu;
  Tensor weight;  // conv3x3 only: [Cout,Cin,3,3]
  Tensor bias;    // conv3x3 only: [Cout]
};

// A frozen conv/relu/pool network. Inputs are normalized per channel with
// (x - mean) / std before the first layer.
struct FeatureExtractorSpec {
  std::vector<Layer> layers;
  std::vector<int> taps;  // layer indices; each must name a relu
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};
  ad::Padding padding = ad::Padding::reflect;

  void validate() const;
  std::vector<int> tap_channels() const;
  // Throws std::invalid_argument if an HxW image cannot pass through every layer.
  void check_input(int height, int width) const;

  // Fixed-random conv pyramid (16/32/64 channels, mean pooling, one tap per
  // level) seeded with kBuiltinSeed. `levels` may be reduced for tiny inputs.
  static FeatureExtractorSpec builtin(int levels = 3);
  static constexpr uint64_t kBuiltinSeed = 0x4E4341;  // "NCA"

  // Reads "fe.convK.weight"/"fe.convK.bias" (K = 1..), "fe.mean", "fe.std", and
  // the manifest "fe.layers" (codes 0=conv3x3 1=relu 2=pool_max 3=pool_mean).
  // Optional: "fe.taps" (layer indices), "fe.padding" (0 zero, 1 reflect, 2 circular),
  // "fe.num_taps" (default 5; used when fe.taps is absent).
  static FeatureExtractorSpec from_weights(const io::WeightsFile& file);
  static FeatureExtractorSpec load(const std::filesystem::path& path);
  io::WeightsFile to_weights() const;
};

using FeatureStack = std::vector<Tensor>;

std::vector<ad::Var> extract_features(ad::Tape& tape, ad::Var image, const FeatureExtractorSpec& spec);
FeatureStack extract_features(const Tensor& image, const FeatureExtractorSpec& spec);

// Unit-norm slicing directions per tap: directions[l] is [n_proj, C_l].
struct ProjectionSet {
  uint64_t seed = 0;
  std::vector<Tensor> directions;

  static ProjectionSet draw(std::span<const int> tap_channels, int n_proj, Rng& rng);
  void validate() const;
};

// Sliced Wasserstein distance averaged over taps and directions.
float swl(const FeatureStack& a, const FeatureStack& b, const ProjectionSet& proj);
ad::Var swl(ad::Tape& tape, std::span<const ad::Var> a, std::span<const ad::Var> b, const ProjectionSet& proj);

// G = F F^T / (H W) for F the [C, H*W] flattening.
Tensor gram(const Tensor& features);
// Sum over taps of ||gram(a_l) - gram(b_l)||_F.
float gram_distance(const FeatureStack& a, const FeatureStack& b);
float gram_distance(const Tensor& image_a, const Tensor& image_b, const FeatureExtractorSpec& spec);

}  // namespace nca::style
