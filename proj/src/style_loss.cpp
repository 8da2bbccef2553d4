#include "nca/style_loss.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

#include "nca/weights_io.hpp"

namespace nca::style {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

bool is_pool(LayerKind k) { return k == LayerKind::pool_max || k == LayerKind::pool_mean; }

}  // namespace

void FeatureExtractorSpec::validate() const {
  if (taps.empty()) throw std::invalid_argument("feature extractor needs at least one tap");
  int channels = 3;
  for (size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    if (l.kind == LayerKind::conv3x3) {
      if (l.weight.rank() != 4 || l.weight.dim(1) != channels || l.weight.dim(2) != 3 || l.weight.dim(3) != 3)
        throw std::invalid_argument("extractor layer " + std::to_string(i) + ": conv weight " +
                                    shape_str(l.weight.dims()) + " does not take " + std::to_string(channels) +
                                    " input channels");
      require_shape(l.bias, {l.weight.dim(0)}, "extractor conv bias");
      channels = l.weight.dim(0);
    }
  }
  for (size_t i = 0; i < taps.size(); ++i) {
    const int t = taps[i];
    if (t < 0 || t >= static_cast<int>(layers.size()) || layers[static_cast<size_t>(t)].kind != LayerKind::relu)
      throw std::invalid_argument("extractor tap " + std::to_string(t) + " does not reference a relu layer");
    if (i > 0 && t <= taps[i - 1]) throw std::invalid_argument("extractor taps must be strictly increasing");
  }
  for (float s : std) if (!(s > 0.0f)) throw std::invalid_argument("extractor std must be positive");
}

std::vector<int> FeatureExtractorSpec::tap_channels() const {
  std::vector<int> out;
  int channels = 3;
  size_t next = 0;
  for (size_t i = 0; i < layers.size() && next < taps.size(); ++i) {
    if (layers[i].kind == LayerKind::conv3x3) channels = layers[i].weight.dim(0);
    if (static_cast<int>(i) == taps[next]) {
      out.push_back(channels);
      ++next;
    }
  }
  return out;
}

void FeatureExtractorSpec::check_input(int height, int width) const {
  const int last = taps.empty() ? -1 : taps.back();
  int h = height, w = width;
  for (int i = 0; i <= last; ++i) {
    const Layer& l = layers[static_cast<size_t>(i)];
    const int min_side = padding == ad::Padding::reflect ? 2 : 1;
    if (l.kind == LayerKind::conv3x3 && (h < min_side || w < min_side))
      throw std::invalid_argument("image too small for pooling depth: " + std::to_string(height) + "x" +
                                  std::to_string(width) + " shrinks to " + std::to_string(h) + "x" + std::to_string(w) +
                                  " before a 3x3 conv");
    if (is_pool(l.kind)) {
      if (h % 2 || w % 2)
        throw std::invalid_argument("image too small for pooling depth: " + std::to_string(height) + "x" +
                                    std::to_string(width) + " reaches odd size " + std::to_string(h) + "x" +
                                    std::to_string(w) + " before a 2x2 pool");
      h /= 2;
      w /= 2;
    }
  }
}

FeatureExtractorSpec FeatureExtractorSpec::builtin(int levels) {
  if (levels < 1 || levels > 3) throw std::invalid_argument("builtin extractor supports 1..3 levels");
  static constexpr int kChannels[3] = {16, 32, 64};
  FeatureExtractorSpec spec;
  spec.padding = ad::Padding::reflect;
  Rng rng(kBuiltinSeed, Rng::init);
  int cin = 3;
  for (int level = 0; level < levels; ++level) {
    const int cout = kChannels[level];
    Layer conv{LayerKind::conv3x3, Tensor({cout, cin, 3, 3}), Tensor({cout})};
    const float s = std::sqrt(2.0f / static_cast<float>(cin * 9));
    for (float& v : conv.weight.data()) v = s * rng.normal();
    spec.layers.push_back(std::move(conv));
    spec.layers.push_back({LayerKind::relu, {}, {}});
    spec.taps.push_back(static_cast<int>(spec.layers.size()) - 1);
    if (level + 1 < levels) spec.layers.push_back({LayerKind::pool_mean, {}, {}});
    cin = cout;
  }
  return spec;
}

FeatureExtractorSpec FeatureExtractorSpec::from_weights(const io::WeightsFile& file) {
  FeatureExtractorSpec spec;
  const Tensor& manifest = file.get("fe.layers");
  int conv_index = 0;
  for (float code : manifest.data()) {
    switch (static_cast<int>(code)) {
      case 0: {
        ++conv_index;
        const std::string base = "fe.conv" + std::to_string(conv_index);
        spec.layers.push_back({LayerKind::conv3x3, file.get(base + ".weight"), file.get(base + ".bias")});
        break;
      }
      case 1:
        spec.layers.push_back({LayerKind::relu, {}, {}});
        break;
      case 2:
        spec.layers.push_back({LayerKind::pool_max, {}, {}});
        break;
      case 3:
        spec.layers.push_back({LayerKind::pool_mean, {}, {}});
        break;
      default:
        throw io::FormatError("fe.layers: unknown layer code " + std::to_string(code));
    }
  }
  const Tensor& mean = file.get("fe.mean");
  const Tensor& stdv = file.get("fe.std");
  if (mean.size() != 3 || stdv.size() != 3) throw io::FormatError("fe.mean and fe.std must hold 3 values");
  for (int c = 0; c < 3; ++c) {
    spec.mean[static_cast<size_t>(c)] = mean[static_cast<size_t>(c)];
    spec.std[static_cast<size_t>(c)] = stdv[static_cast<size_t>(c)];
  }
  if (const Tensor* pad = file.find("fe.padding")) {
    const int p = static_cast<int>(pad->item());
    if (p < 0 || p > 2) throw io::FormatError("fe.padding must be 0, 1 or 2");
    spec.padding = static_cast<ad::Padding>(p);
  }
  if (const Tensor* taps = file.find("fe.taps")) {
    for (float t : taps->data()) spec.taps.push_back(static_cast<int>(t));
  } else {
    // First relu of each block, blocks being separated by pooling layers.
    const int wanted = file.contains("fe.num_taps") ? static_cast<int>(file.get("fe.num_taps").item()) : 5;
    bool block_open = true;
    for (size_t i = 0; i < spec.layers.size() && static_cast<int>(spec.taps.size()) < wanted; ++i) {
      if (is_pool(spec.layers[i].kind)) block_open = true;
      if (spec.layers[i].kind == LayerKind::relu && block_open) {
        spec.taps.push_back(static_cast<int>(i));
        block_open = false;
      }
    }
  }
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw io::FormatError(std::string("invalid feature extractor: ") + e.what());
  }
  return spec;
}

FeatureExtractorSpec FeatureExtractorSpec::load(const std::filesystem::path& path) {
  return from_weights(io::load_weights_file(path));
}

io::WeightsFile FeatureExtractorSpec::to_weights() const {
  io::WeightsFile f;
  std::vector<float> codes;
  int conv_index = 0;
  for (const Layer& l : layers) {
    switch (l.kind) {
      case LayerKind::conv3x3:
        codes.push_back(0);
        ++conv_index;
        f.add("fe.conv" + std::to_string(conv_index) + ".weight", l.weight);
        f.add("fe.conv" + std::to_string(conv_index) + ".bias", l.bias);
        break;
      case LayerKind::relu:
        codes.push_back(1);
        break;
      case LayerKind::pool_max:
        codes.push_back(2);
        break;
      case LayerKind::pool_mean:
        codes.push_back(3);
        break;
    }
  }
  f.add("fe.layers", Tensor({static_cast<int>(codes.size())}, codes));
  f.add("fe.mean", Tensor({3}, std::vector<float>(mean.begin(), mean.end())));
  f.add("fe.std", Tensor({3}, std::vector<float>(std.begin(), std.end())));
  f.add("fe.padding", Tensor::scalar(static_cast<float>(padding)));
  std::vector<float> t(taps.begin(), taps.end());
  f.add("fe.taps", Tensor({static_cast<int>(t.size())}, t));
  return f;
}

// ---- features ------------------------------------------------------------------

std::vector<ad::Var> extract_features(ad::Tape& tape, ad::Var image, const FeatureExtractorSpec& spec) {
  const Tensor& img = tape.value(image);
  if (img.rank() != 3 || img.dim(0) != 3)
    throw std::invalid_argument("extract_features: image must be [3,H,W], got " + shape_str(img.dims()));
  spec.check_input(img.dim(1), img.dim(2));
  std::vector<float> scale(3), shift(3);
  for (size_t c = 0; c < 3; ++c) {
    scale[c] = 1.0f / spec.std[c];
    shift[c] = -spec.mean[c] / spec.std[c];
  }
  ad::Var x = ad::channel_affine(tape, image, scale, shift);
  std::vector<ad::Var> out;
  size_t next = 0;
  for (size_t i = 0; i < spec.layers.size() && next < spec.taps.size(); ++i) {
    const Layer& l = spec.layers[i];
    switch (l.kind) {
      case LayerKind::conv3x3:
        x = ad::conv2d_dense3x3(tape, x, tape.constant(l.weight), tape.constant(l.bias), spec.padding);
        break;
      case LayerKind::relu:
        x = ad::relu(tape, x);
        break;
      case LayerKind::pool_max:
        x = ad::pool2(tape, x, ad::PoolMode::max);
        break;
      case LayerKind::pool_mean:
        x = ad::pool2(tape, x, ad::PoolMode::mean);
        break;
    }
    if (static_cast<int>(i) == spec.taps[next]) {
      out.push_back(x);
      ++next;
    }
  }
  return out;
}

FeatureStack extract_features(const Tensor& image, const FeatureExtractorSpec& spec) {
  ad::Tape tape;
  auto vars = extract_features(tape, tape.constant(image), spec);
  FeatureStack out;
  out.reserve(vars.size());
  for (ad::Var v : vars) out.push_back(tape.value(v));
  return out;
}

// ---- projections and SWL ----------------------------------------------------------

ProjectionSet ProjectionSet::draw(std::span<const int> tap_channels, int n_proj, Rng& rng) {
  if (n_proj < 1) throw std::invalid_argument("ProjectionSet: n_proj must be >= 1");
  ProjectionSet p;
  p.seed = rng.seed() ^ rng.counter();
  for (int c : tap_channels) {
    Tensor d({n_proj, c});
    for (int k = 0; k < n_proj; ++k) {
      double norm = 0.0;
      do {
        norm = 0.0;
        for (int j = 0; j < c; ++j) {
          const float v = rng.normal();
          d[static_cast<size_t>(k) * c + j] = v;
          norm += static_cast<double>(v) * v;
        }
      } while (norm < 1e-12);
      const float inv = static_cast<float>(1.0 / std::sqrt(norm));
      for (int j = 0; j < c; ++j) d[static_cast<size_t>(k) * c + j] *= inv;
    }
    p.directions.push_back(std::move(d));
  }
  return p;
}

void ProjectionSet::validate() const {
  for (const Tensor& d : directions) {
    if (d.rank() != 2) throw std::invalid_argument("projection directions must be [n_proj, C]");
    for (int k = 0; k < d.dim(0); ++k) {
      double norm = 0.0;
      for (int j = 0; j < d.dim(1); ++j) norm += static_cast<double>(d[static_cast<size_t>(k) * d.dim(1) + j]) * d[static_cast<size_t>(k) * d.dim(1) + j];
      if (std::abs(std::sqrt(norm) - 1.0) > 1e-5) throw std::invalid_argument("projection direction is not unit norm");
    }
  }
}

ad::Var swl(ad::Tape& tape, std::span<const ad::Var> a, std::span<const ad::Var> b, const ProjectionSet& proj) {
  if (a.size() != b.size() || a.size() != proj.directions.size() || a.empty())
    throw std::invalid_argument("swl: tap count mismatch (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + " vs " + std::to_string(proj.directions.size()) + ")");
  std::vector<ad::Var> per_tap;
  for (size_t l = 0; l < a.size(); ++l) {
    const Tensor& fa = tape.value(a[l]);
    const Tensor& fb = tape.value(b[l]);
    const Tensor& dirs = proj.directions[l];
    if (fa.rank() != 3 || fb.rank() != 3 || fa.dim(0) != fb.dim(0) || dirs.dim(1) != fa.dim(0))
      throw std::invalid_argument("swl: channel mismatch at tap " + std::to_string(l) + ": " + shape_str(fa.dims()) +
                                  " vs " + shape_str(fb.dims()));
    const int c = fa.dim(0);
    const int na = fa.dim(1) * fa.dim(2), nb = fb.dim(1) * fb.dim(2);
    ad::Var p = tape.constant(dirs);
    ad::Var sa = ad::sort_rows(tape, ad::matmul(tape, p, ad::reshape(tape, a[l], {c, na})));
    ad::Var sb = ad::sort_rows(tape, ad::matmul(tape, p, ad::reshape(tape, b[l], {c, nb})));
    if (na > nb) sa = ad::resample_rows(tape, sa, nb);
    if (nb > na) sb = ad::resample_rows(tape, sb, na);
    per_tap.push_back(ad::mean(tape, ad::square(tape, ad::sub(tape, sa, sb))));
  }
  ad::Var total = per_tap[0];
  for (size_t l = 1; l < per_tap.size(); ++l) total = ad::add(tape, total, per_tap[l]);
  return ad::scale(tape, total, 1.0f / static_cast<float>(per_tap.size()));
}

float swl(const FeatureStack& a, const FeatureStack& b, const ProjectionSet& proj) {
  ad::Tape tape;
  std::vector<ad::Var> va, vb;
  for (const Tensor& t : a) va.push_back(tape.constant(t));
  for (const Tensor& t : b) vb.push_back(tape.constant(t));
  return tape.value(swl(tape, va, vb, proj)).item();
}

// ---- Gram ----------------------------------------------------------------------------

Tensor gram(const Tensor& features) {
  if (features.rank() != 3) throw std::invalid_argument("gram: features must be [C,H,W]");
  const int c = features.dim(0), n = features.dim(1) * features.dim(2);
  Eigen::Map<const RowMat> f(features.ptr(), c, n);
  Tensor g({c, c});
  Eigen::Map<RowMat> gm(g.ptr(), c, c);
  gm.noalias() = f * f.transpose();
  gm /= static_cast<float>(n);
  return g;
}

float gram_distance(const FeatureStack& a, const FeatureStack& b) {
  if (a.size() != b.size()) throw std::invalid_argument("gram_distance: tap count mismatch");
  double total = 0.0;
  for (size_t l = 0; l < a.size(); ++l) {
    if (a[l].dim(0) != b[l].dim(0)) throw std::invalid_argument("gram_distance: channel mismatch");
    const Tensor ga = gram(a[l]);
    const Tensor gb = gram(b[l]);
    double sq = 0.0;
    for (size_t i = 0; i < ga.size(); ++i) {
      const double d = static_cast<double>(ga[i]) - gb[i];
      sq += d * d;
    }
    total += std::sqrt(sq);
  }
  return static_cast<float>(total);
}

float gram_distance(const Tensor& image_a, const Tensor& image_b, const FeatureExtractorSpec& spec) {
  return gram_distance(extract_features(image_a, spec), extract_features(image_b, spec));
}

}  // namespace nca::style
