#include "nca/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "nca/inference.hpp"
#include "nca/rng.hpp"

namespace nca::metrics {

std::vector<double> luma(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw std::invalid_argument("luma: image must be [3,H,W]");
  const size_t plane = static_cast<size_t>(image.dim(1)) * image.dim(2);
  std::vector<double> y(plane);
  for (size_t i = 0; i < plane; ++i)
    y[i] = 0.299 * image[i] + 0.587 * image[plane + i] + 0.114 * image[2 * plane + i];
  return y;
}

double ssim(const Tensor& a, const Tensor& b, const SsimOptions& opt) {
  if (a.dims() != b.dims())
    throw std::invalid_argument("ssim: image dimensions differ (" + shape_str(a.dims()) + " vs " + shape_str(b.dims()) +
                                ")");
  const std::vector<double> la = luma(a), lb = luma(b);
  const int h = a.dim(1), w = a.dim(2);
  int win = std::min({opt.window, h, w});
  if (win % 2 == 0) --win;

  std::vector<double> kernel(static_cast<size_t>(win) * win);
  double total = 0.0;
  const int half = win / 2;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) {
      const double d2 = static_cast<double>((i - half) * (i - half) + (j - half) * (j - half));
      kernel[static_cast<size_t>(i) * win + j] = std::exp(-d2 / (2.0 * opt.sigma * opt.sigma));
      total += kernel[static_cast<size_t>(i) * win + j];
    }
  for (double& k : kernel) k /= total;

  double sum = 0.0;
  long count = 0;
  for (int y0 = 0; y0 + win <= h; ++y0)
    for (int x0 = 0; x0 + win <= w; ++x0) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          const double k = kernel[static_cast<size_t>(i) * win + j];
          const size_t p = static_cast<size_t>(y0 + i) * w + (x0 + j);
          ma += k * la[p];
          mb += k * lb[p];
          saa += k * la[p] * la[p];
          sbb += k * lb[p] * lb[p];
          sab += k * la[p] * lb[p];
        }
      const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
      sum += ((2 * ma * mb + opt.c1) * (2 * cov + opt.c2)) / ((ma * ma + mb * mb + opt.c1) * (va + vb + opt.c2));
      ++count;
    }
  return sum / static_cast<double>(count);
}

Box damage_box(int cx, int cy, float radius, int height, int width, int pad) {
  const int r = radius > 0.0f ? static_cast<int>(std::floor(radius)) : 0;
  Box b{std::max(0, cx - r - pad), std::max(0, cy - r - pad), std::min(width, cx + r + pad + 1),
        std::min(height, cy + r + pad + 1)};
  if (b.empty()) throw std::invalid_argument("damage box is empty");
  return b;
}

Tensor crop(const Tensor& image, const Box& box) {
  if (image.rank() != 3) throw std::invalid_argument("crop: image must be [C,H,W]");
  if (box.empty() || box.x0 < 0 || box.y0 < 0 || box.x1 > image.dim(2) || box.y1 > image.dim(1))
    throw std::invalid_argument("crop: region is empty or outside the image");
  Tensor out({image.dim(0), box.height(), box.width()});
  for (int c = 0; c < image.dim(0); ++c)
    for (int y = 0; y < box.height(); ++y)
      for (int x = 0; x < box.width(); ++x) out.at(c, y, x) = image.at(c, box.y0 + y, box.x0 + x);
  return out;
}

namespace {

// Spatial stride of every tap relative to the input.
std::vector<int> tap_strides(const style::FeatureExtractorSpec& spec) {
  std::vector<int> out;
  int stride = 1;
  size_t next = 0;
  for (size_t i = 0; i < spec.layers.size() && next < spec.taps.size(); ++i) {
    const auto kind = spec.layers[i].kind;
    if (kind == style::LayerKind::pool_max || kind == style::LayerKind::pool_mean) stride *= 2;
    if (static_cast<int>(i) == spec.taps[next]) {
      out.push_back(stride);
      ++next;
    }
  }
  return out;
}

}  // namespace

double local_metric(Metric metric, const Tensor& image, const Tensor& reference, const Box& box,
                    const style::FeatureExtractorSpec& extractor) {
  if (box.empty()) throw std::invalid_argument("local_metric: empty region");
  if (metric == Metric::ssim) return ssim(crop(image, box), crop(reference, box));
  const style::FeatureStack fa = style::extract_features(image, extractor);
  const style::FeatureStack fb = style::extract_features(reference, extractor);
  const std::vector<int> strides = tap_strides(extractor);
  style::FeatureStack ca, cb;
  for (size_t l = 0; l < fa.size(); ++l) {
    const int s = strides[l];
    const int fh = fa[l].dim(1), fw = fa[l].dim(2);
    Box scaled{box.x0 / s, box.y0 / s, std::min(fw, (box.x1 + s - 1) / s), std::min(fh, (box.y1 + s - 1) / s)};
    ca.push_back(crop(fa[l], scaled));
    cb.push_back(crop(fb[l], scaled));
  }
  return style::gram_distance(ca, cb);
}

void EvalProtocol::validate() const {
  if (instances < 1) throw std::invalid_argument("instances must be >= 1");
  if (generation_step < 0 || regeneration_step < generation_step)
    throw std::invalid_argument("need 0 <= generation_step <= regeneration_step");
  float prev_hi = -1.0f;
  for (const auto& [lo, hi] : buckets) {
    if (lo < 0.0f || hi < lo) throw std::invalid_argument("radius bucket bounds must satisfy 0 <= lo <= hi");
    if (lo < prev_hi) throw std::invalid_argument("radius buckets must be ordered and non-overlapping");
    prev_hi = hi;
  }
  if (!(fire_rate > 0.0f && fire_rate <= 1.0f)) throw std::invalid_argument("fire_rate must be in (0, 1]");
}

uint64_t instance_mask_seed(uint64_t seed, int genome, int instance) {
  return Rng(seed, Rng::eval).substream(hash_combine(static_cast<uint64_t>(genome), static_cast<uint64_t>(instance)))
      .next_u64();
}

namespace {

void check_exemplars(const UpdateRuleParams& params, std::span<const Tensor> exemplars) {
  if (static_cast<int>(exemplars.size()) != params.shape.genome_count())
    throw std::invalid_argument("expected " + std::to_string(params.shape.genome_count()) + " exemplars, got " +
                                std::to_string(exemplars.size()));
  for (const Tensor& e : exemplars)
    if (e.rank() != 3 || e.dim(0) != 3) throw std::invalid_argument("exemplars must be [3,H,W] images");
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

GenerationReport eval_generation(const UpdateRuleParams& params, std::span<const Tensor> exemplars,
                                 const EvalProtocol& protocol, const style::FeatureExtractorSpec& extractor) {
  protocol.validate();
  check_exemplars(params, exemplars);
  GenerationReport report;
  for (int g = 0; g < static_cast<int>(exemplars.size()); ++g) {
    const Tensor& ex = exemplars[static_cast<size_t>(g)];
    const style::FeatureStack target = style::extract_features(ex, extractor);
    GenerationRow row;
    row.genome = g;
    for (int i = 0; i < protocol.instances; ++i) {
      Tensor img = ex;
      if (!protocol.self_check) {
        const UpdateMask mask{protocol.fire_rate, instance_mask_seed(protocol.seed, g, i), 0};
        img = to_rgb(synthesize(params, g, ex.dim(1), ex.dim(2), protocol.generation_step, mask));
      }
      row.gmd_instances.push_back(style::gram_distance(style::extract_features(img, extractor), target));
      row.ssim_instances.push_back(ssim(img, ex));
    }
    row.gmd = mean_of(row.gmd_instances);
    row.ssim = mean_of(row.ssim_instances);
    report.rows.push_back(std::move(row));
  }
  std::vector<double> gmd, s;
  for (const auto& r : report.rows) {
    gmd.push_back(r.gmd);
    s.push_back(r.ssim);
  }
  report.gmd = mean_of(gmd);
  report.ssim = mean_of(s);
  return report;
}

RegenerationReport eval_regeneration(const UpdateRuleParams& params, std::span<const Tensor> exemplars,
                                     const EvalProtocol& protocol, const style::FeatureExtractorSpec& extractor) {
  protocol.validate();
  check_exemplars(params, exemplars);
  const size_t nb = protocol.buckets.size();
  const int ng = static_cast<int>(exemplars.size());
  struct Acc {
    std::vector<double> gmd, ssim, gmd_local, ssim_local, gmd_pre, ssim_pre;
  };
  std::vector<Acc> acc(static_cast<size_t>(ng) * nb);
  Evolver evolver(params);
  const Rng damage_root(protocol.seed, Rng::damage);

  for (int g = 0; g < ng; ++g) {
    const Tensor& ex = exemplars[static_cast<size_t>(g)];
    const int h = ex.dim(1), w = ex.dim(2);
    const style::FeatureStack target = style::extract_features(ex, extractor);
    for (int i = 0; i < protocol.instances; ++i) {
      const UpdateMask mask{protocol.fire_rate, instance_mask_seed(protocol.seed, g, i), 0};
      const CellGrid base = synthesize(params, g, h, w, protocol.generation_step, mask);
      const Tensor pre = to_rgb(base);
      for (size_t b = 0; b < nb; ++b) {
        Rng rng = damage_root.substream(hash_combine(hash_combine(static_cast<uint64_t>(g), static_cast<uint64_t>(i)), b));
        const int cx = rng.uniform_int(0, w - 1), cy = rng.uniform_int(0, h - 1);
        const auto [lo, hi] = protocol.buckets[b];
        const float radius = rng.uniform(lo, hi);
        CellGrid grid = base;
        if (radius > 0.0f) apply_damage(grid, {cx, cy, radius, DamageFill::randomize}, rng);
        evolver.run(grid, protocol.regeneration_step - protocol.generation_step, mask.advanced(protocol.generation_step));
        const Tensor img = to_rgb(grid);
        const Box box = damage_box(cx, cy, radius, h, w);
        Acc& a = acc[static_cast<size_t>(g) * nb + b];
        a.gmd.push_back(style::gram_distance(style::extract_features(img, extractor), target));
        a.ssim.push_back(ssim(img, ex));
        a.gmd_local.push_back(local_metric(Metric::gmd, img, ex, box, extractor));
        a.ssim_local.push_back(local_metric(Metric::ssim, img, ex, box, extractor));
        a.gmd_pre.push_back(style::gram_distance(img, pre, extractor));
        a.ssim_pre.push_back(ssim(img, pre));
      }
    }
  }

  RegenerationReport report;
  report.gmd.assign(nb, 0.0);
  report.ssim.assign(nb, 0.0);
  report.gmd_local.assign(nb, 0.0);
  report.ssim_local.assign(nb, 0.0);
  for (int g = 0; g < ng; ++g)
    for (size_t b = 0; b < nb; ++b) {
      const Acc& a = acc[static_cast<size_t>(g) * nb + b];
      RegenerationRow row{g, static_cast<int>(b), protocol.buckets[b], mean_of(a.gmd), mean_of(a.ssim),
                          mean_of(a.gmd_local), mean_of(a.ssim_local), mean_of(a.gmd_pre), mean_of(a.ssim_pre)};
      report.gmd[b] += row.gmd / ng;
      report.ssim[b] += row.ssim / ng;
      report.gmd_local[b] += row.gmd_local / ng;
      report.ssim_local[b] += row.ssim_local / ng;
      report.rows.push_back(row);
    }
  return report;
}

// ---- reports -----------------------------------------------------------------------

namespace {

std::string bucket_label(const std::pair<float, float>& b) {
  auto fmt = [](float v) {
    std::string s = std::to_string(v);
    s.erase(s.find_last_not_of('0') + 1);
    if (!s.empty() && s.back() == '.') s.pop_back();
    return s;
  };
  return fmt(b.first) + "-" + fmt(b.second);
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out.precision(9);
  return out;
}

}  // namespace

void write_eval_csv(const std::filesystem::path& path, const GenerationReport& gen,
                    const std::optional<RegenerationReport>& regen, const EvalProtocol& protocol) {
  std::ofstream out = open_out(path);
  out << "table,genome,step,radius_bucket,gmd,ssim,lpips,gmd_local,ssim_local,lpips_local,gmd_pre,ssim_pre\n";
  for (const auto& r : gen.rows)
    out << "generation," << r.genome << ',' << protocol.generation_step << ",," << r.gmd << ',' << r.ssim
        << ",n/a,,,,,\n";
  if (regen)
    for (const auto& r : regen->rows)
      out << "regeneration," << r.genome << ',' << protocol.regeneration_step << ',' << bucket_label(r.radius_range)
          << ',' << r.gmd << ',' << r.ssim << ",n/a," << r.gmd_local << ',' << r.ssim_local << ",n/a," << r.gmd_pre
          << ',' << r.ssim_pre << '\n';
}

void write_eval_json(const std::filesystem::path& path, const GenerationReport& gen,
                     const std::optional<RegenerationReport>& regen, const EvalProtocol& protocol) {
  using nlohmann::json;
  json j;
  j["protocol"] = {{"instances", protocol.instances},
                   {"generation_step", protocol.generation_step},
                   {"regeneration_step", protocol.regeneration_step},
                   {"seed", protocol.seed},
                   {"fire_rate", protocol.fire_rate},
                   {"self_check", protocol.self_check}};
  json rows = json::array();
  for (const auto& r : gen.rows)
    rows.push_back({{"genome", r.genome}, {"gmd", r.gmd}, {"ssim", r.ssim}, {"gmd_instances", r.gmd_instances},
                    {"ssim_instances", r.ssim_instances}});
  j["generation"] = {{"rows", rows}, {"gmd", gen.gmd}, {"ssim", gen.ssim}, {"lpips", nullptr}};
  if (regen) {
    json rrows = json::array();
    for (const auto& r : regen->rows)
      rrows.push_back({{"genome", r.genome},
                       {"radius_bucket", bucket_label(r.radius_range)},
                       {"gmd", r.gmd},
                       {"ssim", r.ssim},
                       {"gmd_local", r.gmd_local},
                       {"ssim_local", r.ssim_local},
                       {"gmd_pre", r.gmd_pre},
                       {"ssim_pre", r.ssim_pre}});
    json buckets = json::array();
    for (size_t b = 0; b < regen->gmd.size(); ++b)
      buckets.push_back({{"radius_bucket", bucket_label(protocol.buckets[b])},
                         {"gmd", regen->gmd[b]},
                         {"ssim", regen->ssim[b]},
                         {"gmd_local", regen->gmd_local[b]},
                         {"ssim_local", regen->ssim_local[b]}});
    j["regeneration"] = {{"rows", rrows}, {"buckets", buckets}};
  }
  std::ofstream out = open_out(path);
  out << j.dump(2) << '\n';
}

}  // namespace nca::metrics
