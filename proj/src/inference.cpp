#include "nca/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "nca/training.hpp"

namespace nca {

// ---- layouts -------------------------------------------------------------------

int GraftLayout::region_count() const {
  switch (kind) {
    case LayoutKind::halves:
      return 2;
    case LayoutKind::stripes:
    case LayoutKind::concentric:
      return count;
    case LayoutKind::custom:
      return static_cast<int>(genomes.size());
  }
  return 0;
}

void GraftLayout::validate(int height, int width, int genome_channels) const {
  if (genomes.empty()) throw std::invalid_argument("graft layout needs at least one genome");
  for (int g : genomes)
    if (g < 0 || g >= (1 << genome_channels))
      throw std::invalid_argument("genome index " + std::to_string(g) + " out of range for n_g=" +
                                  std::to_string(genome_channels));
  if (!(blend_width >= 0.0f)) throw std::invalid_argument("blend_width must be >= 0");
  if (count < 1) throw std::invalid_argument("layout region count must be >= 1");
  if (kind == LayoutKind::stripes && count > width)
    throw std::invalid_argument("more stripes than grid columns");
  if (kind == LayoutKind::custom && (mask.width != width || mask.height != height))
    throw std::invalid_argument("layout mask is " + std::to_string(mask.width) + "x" + std::to_string(mask.height) +
                                ", grid is " + std::to_string(width) + "x" + std::to_string(height));
}

GraftLayout GraftLayout::parse(const std::string& text, std::vector<int> genomes, float blend_width) {
  GraftLayout l;
  l.genomes = std::move(genomes);
  l.blend_width = blend_width;
  const auto colon = text.find(':');
  const std::string head = text.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
  auto count_arg = [&]() {
    size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(arg, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != arg.size() || v < 1) throw std::invalid_argument("bad layout count in '" + text + "'");
    return v;
  };
  if (head == "halves" && colon == std::string::npos) {
    l.kind = LayoutKind::halves;
    l.count = 2;
  } else if (head == "stripes") {
    l.kind = LayoutKind::stripes;
    l.count = count_arg();
  } else if (head == "concentric") {
    l.kind = LayoutKind::concentric;
    l.count = count_arg();
  } else if (head == "mask" && !arg.empty()) {
    l.kind = LayoutKind::custom;
    l.mask = io::load_gray(arg);
    l.count = static_cast<int>(l.genomes.size());
  } else {
    throw std::invalid_argument("unknown layout '" + text + "' (expected halves, stripes:N, concentric:N or mask:FILE)");
  }
  return l;
}

namespace {

// Interfaces along a scalar coordinate u: region k covers [b_k, b_{k+1}).
struct Axis {
  std::vector<double> bounds;  // interior interfaces, ascending

  int region(double u) const {
    return static_cast<int>(std::upper_bound(bounds.begin(), bounds.end(), u) - bounds.begin());
  }
};

Axis axis_of(const GraftLayout& layout, int height, int width) {
  Axis a;
  switch (layout.kind) {
    case LayoutKind::halves:
      a.bounds = {static_cast<double>(width / 2)};
      break;
    case LayoutKind::stripes:
      for (int k = 1; k < layout.count; ++k) a.bounds.push_back(static_cast<double>(k * width / layout.count));
      break;
    case LayoutKind::concentric: {
      const double r = std::min(height, width) / 2.0;
      for (int k = 1; k < layout.count; ++k) a.bounds.push_back(k * r / layout.count);
      break;
    }
    case LayoutKind::custom:
      break;
  }
  return a;
}

double coordinate(const GraftLayout& layout, int y, int x, int height, int width) {
  if (layout.kind == LayoutKind::concentric) {
    const double dx = x - (width - 1) / 2.0, dy = y - (height - 1) / 2.0;
    return std::sqrt(dx * dx + dy * dy);
  }
  return x;
}

int palette_region(uint8_t gray, int regions) {
  if (regions <= 1) return 0;
  return static_cast<int>(std::lround(gray * (regions - 1) / 255.0));
}

const std::vector<float>& code_of(const std::vector<GenomeCode>& codes, const GraftLayout& layout, int region) {
  return codes[static_cast<size_t>(region) % layout.genomes.size()].bits;
}

float blend_weight(double s, float blend_width) {
  if (blend_width <= 0.0f) return s >= 0.0 ? 1.0f : 0.0f;
  return static_cast<float>(std::clamp(0.5 + s / blend_width, 0.0, 1.0));
}

}  // namespace

std::vector<int> region_map(const GraftLayout& layout, int height, int width) {
  std::vector<int> map(static_cast<size_t>(height) * width);
  if (layout.kind == LayoutKind::custom) {
    for (size_t i = 0; i < map.size(); ++i) map[i] = palette_region(layout.mask.pixels[i], layout.region_count());
    return map;
  }
  const Axis axis = axis_of(layout, height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      map[static_cast<size_t>(y) * width + x] = axis.region(coordinate(layout, y, x, height, width));
  return map;
}

CellGrid compose_graft_seed(int height, int width, const GraftLayout& layout, const ModelShape& shape) {
  shape.validate();
  layout.validate(height, width, shape.genome_channels);
  const int ng = shape.genome_channels;
  std::vector<GenomeCode> codes;
  for (int g : layout.genomes) codes.push_back(genome_of_index(g, ng));

  CellGrid grid(shape.channels, ng, height, width);
  auto write = [&](int y, int x, const std::vector<float>& p, const std::vector<float>& q, float t) {
    for (int b = 0; b < ng; ++b) {
      const float pb = p[static_cast<size_t>(b)], qb = q[static_cast<size_t>(b)];
      grid.at(grid.genome_offset() + b, y, x) = pb + (qb - pb) * t;
    }
  };

  const std::vector<int> regions = region_map(layout, height, width);
  if (layout.kind != LayoutKind::custom) {
    const Axis axis = axis_of(layout, height, width);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const double u = coordinate(layout, y, x, height, width);
        const int k = regions[static_cast<size_t>(y) * width + x];
        const auto& own = code_of(codes, layout, k);
        // Nearest interface: the lower bound of region k or the upper one.
        double best = std::numeric_limits<double>::infinity();
        int lower = -1;
        if (k >= 1) {
          best = u - axis.bounds[static_cast<size_t>(k - 1)];
          lower = k - 1;
        }
        if (k < static_cast<int>(axis.bounds.size())) {
          const double s = u - axis.bounds[static_cast<size_t>(k)];
          if (lower < 0 || std::abs(s) < std::abs(best)) {
            best = s;
            lower = k;
          }
        }
        if (lower < 0) {
          write(y, x, own, own, 0.0f);
          continue;
        }
        write(y, x, code_of(codes, layout, lower), code_of(codes, layout, lower + 1), blend_weight(best, layout.blend_width));
      }
    return grid;
  }

  // Custom masks: weight toward the nearest cell of another region at distance d is
  // max(0, 0.5 - (d - 0.5) / blend_width), so both sides of an interface blend symmetrically.
  const int reach = layout.blend_width > 0.0f ? static_cast<int>(std::ceil(layout.blend_width / 2.0f + 0.5f)) + 1 : 0;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const int k = regions[static_cast<size_t>(y) * width + x];
      double best = std::numeric_limits<double>::infinity();
      int other = -1;
      for (int yy = std::max(0, y - reach); yy <= std::min(height - 1, y + reach); ++yy)
        for (int xx = std::max(0, x - reach); xx <= std::min(width - 1, x + reach); ++xx) {
          const int kk = regions[static_cast<size_t>(yy) * width + xx];
          if (kk == k) continue;
          const double d = std::hypot(xx - x, yy - y);
          if (d < best) {
            best = d;
            other = kk;
          }
        }
      const auto& own = code_of(codes, layout, k);
      if (other < 0) {
        write(y, x, own, own, 0.0f);
        continue;
      }
      const float t = static_cast<float>(std::max(0.0, 0.5 - (best - 0.5) / layout.blend_width));
      write(y, x, own, code_of(codes, layout, other), t);
    }
  return grid;
}

CellGrid synthesize(const UpdateRuleParams& params, int genome, int height, int width, int steps,
                    const UpdateMask& mask) {
  CellGrid grid =
      seed_of_genome(height, width, genome_of_index(genome, params.shape.genome_channels), params.shape.channels);
  Evolver(params).run(grid, steps, mask);
  return grid;
}

Tensor graft_inference(const UpdateRuleParams& params, const GraftLayout& layout, int height, int width, int t_max,
                       const UpdateMask& mask) {
  if (t_max < 0) throw std::invalid_argument("t_max must be >= 0");
  CellGrid grid = compose_graft_seed(height, width, layout, params.shape);
  Evolver(params).run(grid, t_max, mask);
  return to_rgb(grid);
}

// ---- patches and damage -----------------------------------------------------------

bool Region::contains(int x, int y) const {
  if (kind == Kind::rect) return x >= x0 && x < x1 && y >= y0 && y < y1;
  const double dx = x - cx, dy = y - cy;
  return dx * dx + dy * dy <= static_cast<double>(radius) * radius;
}

void Region::validate(int height, int width) const {
  if (kind == Kind::rect) {
    if (x0 < 0 || y0 < 0 || x1 > width || y1 > height || x0 > x1 || y0 > y1)
      throw std::invalid_argument("patch rectangle outside the grid");
  } else {
    if (cx < 0 || cy < 0 || cx >= width || cy >= height) throw std::invalid_argument("patch disk center outside the grid");
    if (!(radius >= 0.0f)) throw std::invalid_argument("patch disk radius must be >= 0");
  }
}

CellGrid patch_transfer(const CellGrid& source, const CellGrid& dest, const Region& region) {
  if (source.state().dims() != dest.state().dims() || source.genome_channels() != dest.genome_channels())
    throw std::invalid_argument("patch_transfer: grid dimensions differ (" + shape_str(source.state().dims()) + " vs " +
                                shape_str(dest.state().dims()) + ")");
  region.validate(dest.height(), dest.width());
  CellGrid out = dest;
  for (int y = 0; y < dest.height(); ++y)
    for (int x = 0; x < dest.width(); ++x)
      if (region.contains(x, y))
        for (int c = 0; c < dest.channels(); ++c) out.at(c, y, x) = source.at(c, y, x);
  return out;
}

Tensor graft_by_patch_transfer(const UpdateRuleParams& params, const PatchTransferSpec& spec, int height, int width,
                               int t_max, const UpdateMask& mask) {
  if (spec.transfer_step < 0 || spec.transfer_step > t_max)
    throw std::invalid_argument("transfer step must lie in [0, t_max]");
  const UpdateMask source_mask{mask.fire_rate, hash_combine(mask.seed, 0x7061746368), mask.step_offset};
  const CellGrid source = synthesize(params, spec.source_genome, height, width, spec.transfer_step, source_mask);
  CellGrid dest = synthesize(params, spec.destination_genome, height, width, spec.transfer_step, mask);
  dest = patch_transfer(source, dest, spec.region);
  Evolver(params).run(dest, t_max - spec.transfer_step, mask.advanced(spec.transfer_step));
  return to_rgb(dest);
}

int apply_damage(CellGrid& grid, const DamageSpec& spec, Rng& rng) {
  if (!(spec.radius > 0.0f)) throw std::invalid_argument("damage radius must be positive");
  if (spec.cx < 0 || spec.cy < 0 || spec.cx >= grid.width() || spec.cy >= grid.height())
    throw std::invalid_argument("damage center outside the grid");
  const Region disk = Region::disk(spec.cx, spec.cy, spec.radius);
  int changed = 0;
  for (int y = 0; y < grid.height(); ++y)
    for (int x = 0; x < grid.width(); ++x)
      if (disk.contains(x, y)) ++changed;
  if (spec.fill == DamageFill::randomize) {
    damage_state(grid, spec.cx, spec.cy, spec.radius, rng);
  } else {
    for (int y = 0; y < grid.height(); ++y)
      for (int x = 0; x < grid.width(); ++x)
        if (disk.contains(x, y))
          for (int c = 0; c < grid.channels(); ++c) grid.at(c, y, x) = 0.0f;
  }
  return changed;
}

// ---- regeneration ------------------------------------------------------------------

float grid_swl(const CellGrid& grid, const style::FeatureStack& target, const style::FeatureExtractorSpec& extractor,
               const style::ProjectionSet& proj) {
  const size_t plane = static_cast<size_t>(grid.height()) * grid.width();
  Tensor rgb({3, grid.height(), grid.width()});
  std::copy_n(grid.state().ptr(), 3 * plane, rgb.ptr());
  return style::swl(style::extract_features(rgb, extractor), target, proj);
}

RegenerationResult regenerate(const UpdateRuleParams& params, CellGrid grid, int steps, const UpdateMask& mask,
                              const style::FeatureStack& target, const style::FeatureExtractorSpec& extractor,
                              const style::ProjectionSet& proj, int stride) {
  if (steps < 1) throw std::invalid_argument("regenerate: steps must be >= 1");
  if (stride < 1) throw std::invalid_argument("regenerate: stride must be >= 1");
  RegenerationResult out;
  Evolver evolver(params);
  int done = 0;
  while (done < steps) {
    const int chunk = std::min(stride - done % stride, steps - done);
    evolver.run(grid, chunk, mask.advanced(done));
    done += chunk;
    out.trace.push_back({done, grid_swl(grid, target, extractor, proj)});
  }
  out.grid = std::move(grid);
  return out;
}

}  // namespace nca
