#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nca/nca.hpp"
#include "nca/style_loss.hpp"

namespace nca::metrics {

// 0.299 R + 0.587 G + 0.114 B of a [3,H,W] image, row-major.
std::vector<double> luma(const Tensor& image);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
};

// Mean SSIM of the luma planes over every fully contained Gaussian window. Images
// smaller than the window use the largest odd window that fits.
double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opt = {});

// Half-open pixel box.
struct Box {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool empty() const { return x1 <= x0 || y1 <= y0; }
  friend bool operator==(const Box&, const Box&) = default;
};

// Bounding box of the lattice disk around (cx, cy), padded and clipped to the image.
Box damage_box(int cx, int cy, float radius, int height, int width, int pad = 4);

Tensor crop(const Tensor& image, const Box& box);

enum class Metric { gmd, ssim };

// The metric restricted to `box`. SSIM compares pixel crops; GMD crops every tap's
// feature map by the box scaled to that tap's resolution.
double local_metric(Metric metric, const Tensor& image, const Tensor& reference, const Box& box,
                    const style::FeatureExtractorSpec& extractor);

struct EvalProtocol {
  int instances = 20;
  int generation_step = 300;
  int regeneration_step = 500;
  std::vector<std::pair<float, float>> buckets{{5, 15}, {15, 25}, {25, 35}, {35, 45}, {45, 55}};
  uint64_t seed = 0;
  float fire_rate = 0.5f;
  // Compares each exemplar with itself instead of rolling out the model.
  bool self_check = false;

  void validate() const;
};

struct GenerationRow {
  int genome = 0;
  double gmd = 0.0;
  double ssim = 0.0;
  std::vector<double> gmd_instances;
  std::vector<double> ssim_instances;
};

struct GenerationReport {
  std::vector<GenerationRow> rows;
  double gmd = 0.0;  // mean over rows
  double ssim = 0.0;
};

struct RegenerationRow {
  int genome = 0;
  int bucket = 0;
  std::pair<float, float> radius_range;
  double gmd = 0.0;
  double ssim = 0.0;
  double gmd_local = 0.0;
  double ssim_local = 0.0;
  double gmd_pre = 0.0;   // against the pre-damage state
  double ssim_pre = 0.0;
};

struct RegenerationReport {
  std::vector<RegenerationRow> rows;  // genome-major, then bucket
  // Per-bucket means over genomes.
  std::vector<double> gmd;
  std::vector<double> ssim;
  std::vector<double> gmd_local;
  std::vector<double> ssim_local;
};

uint64_t instance_mask_seed(uint64_t seed, int genome, int instance);

GenerationReport eval_generation(const UpdateRuleParams& params, std::span<const Tensor> exemplars,
                                 const EvalProtocol& protocol, const style::FeatureExtractorSpec& extractor);
RegenerationReport eval_regeneration(const UpdateRuleParams& params, std::span<const Tensor> exemplars,
                                     const EvalProtocol& protocol, const style::FeatureExtractorSpec& extractor);

// Table-shaped CSV (LPIPS columns hold "n/a") and a JSON report with aggregates.
void write_eval_csv(const std::filesystem::path& path, const GenerationReport& gen,
                    const std::optional<RegenerationReport>& regen, const EvalProtocol& protocol);
void write_eval_json(const std::filesystem::path& path, const GenerationReport& gen,
                     const std::optional<RegenerationReport>& regen, const EvalProtocol& protocol);

}  // namespace nca::metrics
