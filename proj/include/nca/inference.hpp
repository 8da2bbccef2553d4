#pragma once

#include <string>
#include <vector>

#include "nca/image_io.hpp"
#include "nca/nca.hpp"
#include "nca/rng.hpp"
#include "nca/style_loss.hpp"

namespace nca {

enum class LayoutKind { halves, stripes, concentric, custom };

// Assignment of genome codes to grid regions. Region k uses genomes[k % genomes.size()].
// Between adjacent regions with codes p and q the genome channels follow
// p + (q - p) * clamp(0.5 + s / blend_width, 0, 1), s being the signed distance
// of the cell from the interface (the first cell past the interface has s = 0).
// The periodic wrap-around seam is not blended.
struct GraftLayout {
  LayoutKind kind = LayoutKind::halves;
  int count = 2;  // stripes or rings; fixed at 2 for halves
  std::vector<int> genomes;
  float blend_width = 8.0f;
  io::GrayImage mask;  // custom only; gray level round(v * (R - 1) / 255) selects region k of R

  int region_count() const;
  void validate(int height, int width, int genome_channels) const;

  // "halves", "stripes:N", "concentric:N" or "mask:FILE".
  static GraftLayout parse(const std::string& text, std::vector<int> genomes, float blend_width = 8.0f);
};

// Per-cell region index for the layout.
std::vector<int> region_map(const GraftLayout& layout, int height, int width);

CellGrid compose_graft_seed(int height, int width, const GraftLayout& layout, const ModelShape& shape);

// Plain synthesis from a single genome.
CellGrid synthesize(const UpdateRuleParams& params, int genome, int height, int width, int steps,
                    const UpdateMask& mask);

Tensor graft_inference(const UpdateRuleParams& params, const GraftLayout& layout, int height, int width, int t_max,
                       const UpdateMask& mask);

struct Region {
  enum class Kind { rect, disk };
  Kind kind = Kind::rect;
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // rect: half-open [x0,x1) x [y0,y1)
  int cx = 0, cy = 0;                  // disk center
  float radius = 0.0f;                 // disk radius, non-wrapping Euclidean

  static Region rect(int x0, int y0, int x1, int y1) { return {Kind::rect, x0, y0, x1, y1, 0, 0, 0.0f}; }
  static Region disk(int cx, int cy, float radius) { return {Kind::disk, 0, 0, 0, 0, cx, cy, radius}; }

  bool contains(int x, int y) const;
  void validate(int height, int width) const;
};

struct PatchTransferSpec {
  int source_genome = 0;
  int destination_genome = 1;
  Region region;
  int transfer_step = 0;
};

// Returns `dest` with every channel of the cells in `region` copied from `source`.
CellGrid patch_transfer(const CellGrid& source, const CellGrid& dest, const Region& region);

// Grafting by patch transfer: both genomes evolve to spec.transfer_step, the patch
// moves from the source grid into the destination grid, and the destination
// continues to t_max.
Tensor graft_by_patch_transfer(const UpdateRuleParams& params, const PatchTransferSpec& spec, int height, int width,
                               int t_max, const UpdateMask& mask);

enum class DamageFill { randomize, zero };

struct DamageSpec {
  int cx = 0;
  int cy = 0;
  float radius = 1.0f;
  DamageFill fill = DamageFill::randomize;
};

// Returns the number of cells changed.
int apply_damage(CellGrid& grid, const DamageSpec& spec, Rng& rng);

// SWL between the raw RGB channels of `grid` and a target feature stack.
float grid_swl(const CellGrid& grid, const style::FeatureStack& target, const style::FeatureExtractorSpec& extractor,
               const style::ProjectionSet& proj);

struct TracePoint {
  int step = 0;
  float loss = 0.0f;
};

struct RegenerationResult {
  CellGrid grid;
  std::vector<TracePoint> trace;
};

// Evolves `grid` for `steps` steps (mask steps continue from mask.step_offset) and
// records the SWL against `target` after every multiple of `stride` and after the last step.
RegenerationResult regenerate(const UpdateRuleParams& params, CellGrid grid, int steps, const UpdateMask& mask,
                              const style::FeatureStack& target, const style::FeatureExtractorSpec& extractor,
                              const style::ProjectionSet& proj, int stride = 10);

}  // namespace nca
