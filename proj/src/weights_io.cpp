#include "nca/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include <zlib.h>

namespace nca::io {

static_assert(sizeof(float) == 4);

void WeightsFile::add(std::string name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate tensor name: " + name);
  entries.push_back({std::move(name), std::move(value)});
}

const Tensor* WeightsFile::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e.value;
  return nullptr;
}

const Tensor& WeightsFile::get(const std::string& name) const {
  const Tensor* t = find(name);
  if (!t) throw FormatError("missing tensor: " + name);
  return *t;
}

uint32_t crc32(std::span<const uint8_t> bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  size_t off = 0;
  while (off < bytes.size()) {
    const size_t n = std::min<size_t>(bytes.size() - off, 1u << 30);
    c = ::crc32(c, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<uint32_t>(c);
}

namespace {

class Writer {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u16(uint16_t v) {
    for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  std::vector<uint8_t> take() { return std::move(buf_); }
  std::span<const uint8_t> view() const { return buf_; }

 private:
  std::vector<uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const uint8_t> b) : b_(b) {}
  uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(b_[pos_] | (b_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  size_t pos() const { return pos_; }

 private:
  void need(size_t n) const {
    if (pos_ + n > b_.size()) throw FormatError("weights file truncated");
  }
  std::span<const uint8_t> b_;
  size_t pos_ = 0;
};

}  // namespace

std::vector<uint8_t> encode(const WeightsFile& file) {
  Writer w;
  w.bytes("NCAW");
  w.u32(WeightsFile::kVersion);
  w.u32(static_cast<uint32_t>(file.entries.size()));
  std::set<std::string> names;
  for (const auto& e : file.entries) {
    if (!names.insert(e.name).second) throw std::invalid_argument("duplicate tensor name: " + e.name);
    if (e.name.size() > 0xFFFF) throw std::invalid_argument("tensor name too long: " + e.name);
    w.u16(static_cast<uint16_t>(e.name.size()));
    w.bytes(e.name);
    w.u8(static_cast<uint8_t>(e.value.rank()));
    for (int d : e.value.dims()) w.u32(static_cast<uint32_t>(d));
    w.u8(0);
    for (float v : e.value.data()) w.f32(v);
  }
  const uint32_t crc = crc32(w.view());
  w.u32(crc);
  return w.take();
}

WeightsFile decode(std::span<const uint8_t> bytes) {
  if (bytes.size() < 16) throw FormatError("weights file truncated (CRC mismatch)");
  if (std::memcmp(bytes.data(), "NCAW", 4) != 0) throw FormatError("bad magic: not an NCAW weights file");
  const auto body = bytes.first(bytes.size() - 4);
  Reader tail(bytes.subspan(bytes.size() - 4));
  if (crc32(body) != tail.u32()) throw FormatError("CRC mismatch: weights file is corrupt or truncated");

  Reader r(body);
  r.str(4);
  const uint32_t version = r.u32();
  if (version != WeightsFile::kVersion) throw FormatError("unsupported weights format version " + std::to_string(version));
  const uint32_t count = r.u32();
  WeightsFile out;
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u16());
    const int rank = r.u8();
    if (rank < 1 || rank > 4) throw FormatError("tensor " + name + ": bad rank " + std::to_string(rank));
    Shape dims;
    for (int k = 0; k < rank; ++k) {
      const uint32_t d = r.u32();
      if (d < 1 || d > (1u << 28)) throw FormatError("tensor " + name + ": bad dim");
      dims.push_back(static_cast<int>(d));
    }
    const uint8_t dtype = r.u8();
    if (dtype != 0) throw FormatError("tensor " + name + ": unknown dtype " + std::to_string(dtype));
    std::vector<float> data(shape_numel(dims));
    for (float& v : data) v = r.f32();
    if (out.contains(name)) throw FormatError("duplicate tensor name: " + name);
    out.entries.push_back({std::move(name), Tensor(std::move(dims), std::move(data))});
  }
  if (r.pos() != body.size()) throw FormatError("trailing bytes after last tensor");
  return out;
}

void write_file(const std::filesystem::path& path, std::span<const uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + tmp);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

std::vector<uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path.string());
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void save_weights_file(const std::filesystem::path& path, const WeightsFile& file) { write_file(path, encode(file)); }

WeightsFile load_weights_file(const std::filesystem::path& path) { return decode(read_file(path)); }

// ---- model --------------------------------------------------------------

float Model::fire_rate() const {
  auto it = metadata.find("fire_rate");
  return it == metadata.end() ? 1.0f : it->second;
}

WeightsFile model_to_weights(const UpdateRuleParams& params, const std::map<std::string, float>& metadata) {
  params.validate();
  WeightsFile f;
  std::map<std::string, float> meta = metadata;
  meta["n"] = static_cast<float>(params.shape.channels);
  meta["n_f"] = static_cast<float>(params.shape.hidden_filters);
  meta["n_g"] = static_cast<float>(params.shape.genome_channels);
  for (const auto& [k, v] : meta) f.add("meta." + k, Tensor::scalar(v));
  for (const ad::Parameter* p : params.list()) f.add("nca." + p->name, p->value);
  return f;
}

Model model_from_weights(const WeightsFile& file) {
  Model m;
  for (const auto& e : file.entries)
    if (e.name.rfind("meta.", 0) == 0) {
      if (e.value.size() != 1) throw FormatError("metadata entry " + e.name + " must be a scalar");
      m.metadata[e.name.substr(5)] = e.value[0];
    }
  auto shape_entry = [&](const char* key) {
    auto it = m.metadata.find(key);
    if (it == m.metadata.end()) throw FormatError(std::string("missing metadata entry meta.") + key);
    return static_cast<int>(it->second);
  };
  ModelShape shape{shape_entry("n"), shape_entry("n_f"), shape_entry("n_g")};
  try {
    shape.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("invalid declared shape: ") + e.what());
  }
  m.params = UpdateRuleParams::zeros(shape);
  for (ad::Parameter* p : m.params.list()) {
    const Tensor& t = file.get("nca." + p->name);
    if (t.dims() != p->value.dims())
      throw FormatError("shape mismatch for nca." + p->name + ": declared " + shape_str(p->value.dims()) + ", found " +
                        shape_str(t.dims()));
    p->value = t;
    p->grad = Tensor(t.dims());
  }
  return m;
}

void save_weights(const std::filesystem::path& path, const UpdateRuleParams& params,
                  const std::map<std::string, float>& metadata) {
  save_weights_file(path, model_to_weights(params, metadata));
}

Model load_weights(const std::filesystem::path& path) { return model_from_weights(load_weights_file(path)); }

}  // namespace nca::io
