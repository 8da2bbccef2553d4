#include "nca/service/session.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "nca/image_io.hpp"

namespace nca::service {

std::string encode_frame(uint64_t step, const std::vector<uint8_t>& rgb) {
  std::string out(8 + rgb.size(), '\0');
  for (int i = 0; i < 8; ++i) out[static_cast<size_t>(i)] = static_cast<char>((step >> (8 * i)) & 0xFF);
  std::copy(rgb.begin(), rgb.end(), out.begin() + 8);
  return out;
}

json Ack::to_json() const {
  json j{{"type", "ack"}, {"command", type}, {"ok", ok}, {"applied_at_step", applied_at_step}};
  if (id) j["id"] = *id;
  if (!ok) j["error"] = error;
  return j;
}

json SessionStatus::to_json() const {
  return {{"session_id", id}, {"model_id", model_id}, {"state", running ? "running" : "paused"}, {"step", step},
          {"sps", sps},       {"stride", stride},     {"height", height},                          {"width", width}};
}

// ---- parsing --------------------------------------------------------------------

namespace {

int get_int(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number_integer()) throw std::invalid_argument(std::string("missing integer field '") + key + "'");
  return j[key].get<int>();
}

double get_number(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number()) throw std::invalid_argument(std::string("missing numeric field '") + key + "'");
  return j[key].get<double>();
}

double get_number_or(const json& j, const char* key, double fallback) {
  return j.contains(key) ? get_number(j, key) : fallback;
}

void check_genome(int g, int genome_channels) {
  if (g < 0 || g >= (1 << genome_channels))
    throw std::invalid_argument("genome_index " + std::to_string(g) + " out of range for n_g=" +
                                std::to_string(genome_channels));
}

std::vector<std::pair<int, int>> parse_runs(const json& runs, size_t cells) {
  if (!runs.is_array()) throw std::invalid_argument("runs must be an array of [start, length] pairs");
  std::vector<std::pair<int, int>> out;
  for (const json& r : runs) {
    if (!r.is_array() || r.size() < 2 || !r[0].is_number_integer() || !r[1].is_number_integer())
      throw std::invalid_argument("each run must be [start, length]");
    const long long start = r[0].get<long long>(), len = r[1].get<long long>();
    if (start < 0 || len < 0 || static_cast<size_t>(start + len) > cells)
      throw std::invalid_argument("run [" + std::to_string(start) + ", " + std::to_string(len) + "] leaves the grid");
    out.emplace_back(static_cast<int>(start), static_cast<int>(len));
  }
  return out;
}

Region parse_region(const json& j, int height, int width) {
  const std::string kind = j.value("kind", "");
  Region r;
  if (kind == "rect")
    r = Region::rect(get_int(j, "x0"), get_int(j, "y0"), get_int(j, "x1"), get_int(j, "y1"));
  else if (kind == "disk")
    r = Region::disk(get_int(j, "cx"), get_int(j, "cy"), static_cast<float>(get_number(j, "radius")));
  else
    throw std::invalid_argument("region kind must be 'rect' or 'disk'");
  r.validate(height, width);
  return r;
}

}  // namespace

GraftLayout parse_layout(const json& j, int height, int width) {
  if (!j.is_object()) throw std::invalid_argument("layout must be an object");
  GraftLayout l;
  if (!j.contains("genomes") || !j["genomes"].is_array()) throw std::invalid_argument("layout needs a 'genomes' array");
  for (const json& g : j["genomes"]) {
    if (!g.is_number_integer()) throw std::invalid_argument("genomes must be integers");
    l.genomes.push_back(g.get<int>());
  }
  l.blend_width = static_cast<float>(get_number_or(j, "blend_width", 8.0));
  const std::string kind = j.value("kind", "halves");
  if (kind == "halves") {
    l.kind = LayoutKind::halves;
  } else if (kind == "stripes" || kind == "concentric") {
    l.kind = kind == "stripes" ? LayoutKind::stripes : LayoutKind::concentric;
    l.count = get_int(j, "count");
  } else if (kind == "mask") {
    l.kind = LayoutKind::custom;
    l.count = static_cast<int>(l.genomes.size());
    const size_t cells = static_cast<size_t>(height) * width;
    l.mask = {width, height, std::vector<uint8_t>(cells, 0)};
    if (!j.contains("mask") || !j["mask"].is_array()) throw std::invalid_argument("mask layout needs 'mask' runs");
    const int regions = l.count;
    for (const json& r : j["mask"]) {
      if (!r.is_array() || r.size() != 3) throw std::invalid_argument("mask runs must be [start, length, region]");
      const long long start = r[0].get<long long>(), len = r[1].get<long long>();
      const int region = r[2].get<int>();
      if (start < 0 || len < 0 || static_cast<size_t>(start + len) > cells || region < 0 || region >= regions)
        throw std::invalid_argument("mask run out of range");
      const auto level = static_cast<uint8_t>(regions > 1 ? 255 * region / (regions - 1) : 0);
      std::fill_n(l.mask.pixels.begin() + start, len, level);
    }
  } else {
    throw std::invalid_argument("unknown layout kind '" + kind + "'");
  }
  return l;
}

Command parse_command(const json& j, int height, int width, int genome_channels) {
  if (!j.is_object() || !j.contains("type") || !j["type"].is_string())
    throw std::invalid_argument("command must be an object with a string 'type'");
  Command c;
  c.type = j["type"].get<std::string>();
  if (j.contains("id")) c.id = j["id"];
  const std::string& t = c.type;
  if (t == "damage") {
    cmd::Damage d{get_int(j, "x"), get_int(j, "y"), static_cast<float>(get_number(j, "radius")), DamageFill::randomize};
    const std::string fill = j.value("fill", "randomize");
    if (fill == "zero")
      d.fill = DamageFill::zero;
    else if (fill != "randomize")
      throw std::invalid_argument("fill must be 'randomize' or 'zero'");
    if (d.x < 0 || d.y < 0 || d.x >= width || d.y >= height) throw std::invalid_argument("damage center outside the grid");
    if (!(d.radius > 0.0f)) throw std::invalid_argument("damage radius must be positive");
    c.body = d;
  } else if (t == "paint_genome") {
    cmd::PaintGenome p;
    if (j.contains("mask_id")) throw std::invalid_argument("stored masks are not supported; send inline 'runs'");
    p.runs = parse_runs(j.value("runs", json::array()), static_cast<size_t>(height) * width);
    p.genome_index = get_int(j, "genome_index");
    check_genome(p.genome_index, genome_channels);
    p.blend_width = static_cast<float>(get_number_or(j, "blend_width", 0.0));
    if (!(p.blend_width >= 0.0f)) throw std::invalid_argument("blend_width must be >= 0");
    c.body = p;
  } else if (t == "patch_transfer") {
    cmd::PatchTransfer p;
    p.source_genome = get_int(j, "source_genome");
    check_genome(p.source_genome, genome_channels);
    if (!j.contains("region")) throw std::invalid_argument("patch_transfer needs a 'region'");
    p.region = parse_region(j["region"], height, width);
    p.transfer_step = j.contains("t") ? get_int(j, "t") : 0;
    if (p.transfer_step < 0) throw std::invalid_argument("t must be >= 0");
    c.body = p;
  } else if (t == "pause") {
    c.body = cmd::Pause{};
  } else if (t == "resume") {
    c.body = cmd::Resume{};
  } else if (t == "step") {
    cmd::Step s{j.contains("k") ? get_int(j, "k") : 1};
    if (s.count < 1) throw std::invalid_argument("step count must be >= 1");
    c.body = s;
  } else if (t == "reset") {
    if (!j.contains("layout")) throw std::invalid_argument("reset needs a 'layout'");
    cmd::Reset r{parse_layout(j["layout"], height, width)};
    r.layout.validate(height, width, genome_channels);
    c.body = r;
  } else if (t == "set_speed") {
    cmd::SetSpeed s{get_number(j, "sps")};
    if (!(s.sps >= 0.0)) throw std::invalid_argument("sps must be >= 0");
    c.body = s;
  } else if (t == "set_stride") {
    cmd::SetStride s{get_int(j, "stride")};
    if (s.stride < 1) throw std::invalid_argument("stride must be >= 1");
    c.body = s;
  } else {
    throw std::invalid_argument("unknown command type '" + t + "'");
  }
  return c;
}

// ---- session ----------------------------------------------------------------------

Session::Session(std::string id, std::string model_id, std::shared_ptr<const io::Model> model, SessionOptions options)
    : id_(std::move(id)),
      model_id_(std::move(model_id)),
      model_(std::move(model)),
      opt_(std::move(options)),
      evolver_(model_->params),
      rng_(opt_.seed, Rng::service) {
  if (opt_.stride < 1) throw std::invalid_argument("stride must be >= 1");
  if (!(opt_.sps >= 0.0)) throw std::invalid_argument("sps must be >= 0");
  grid_ = compose_graft_seed(opt_.height, opt_.width, opt_.layout, model_->params.shape);
}

Session::~Session() { stop(); }

void Session::submit(Command c, std::function<void(const Ack&)> on_ack) {
  {
    std::lock_guard lk(queue_mu_);
    queue_.push_back({std::move(c), std::move(on_ack)});
  }
  queue_cv_.notify_all();
}

std::future<Ack> Session::submit_async(Command c) {
  auto promise = std::make_shared<std::promise<Ack>>();
  auto fut = promise->get_future();
  submit(std::move(c), [promise](const Ack& a) { promise->set_value(a); });
  return fut;
}

namespace {

// Distance from each cell to the nearest cell on the other side of `inside`, capped at `reach`.
std::vector<double> boundary_distance(const std::vector<bool>& inside, int height, int width, int reach) {
  std::vector<double> d(inside.size(), std::numeric_limits<double>::infinity());
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const bool own = inside[static_cast<size_t>(y) * width + x];
      double best = std::numeric_limits<double>::infinity();
      for (int yy = std::max(0, y - reach); yy <= std::min(height - 1, y + reach); ++yy)
        for (int xx = std::max(0, x - reach); xx <= std::min(width - 1, x + reach); ++xx)
          if (inside[static_cast<size_t>(yy) * width + xx] != own) best = std::min(best, std::hypot(xx - x, yy - y));
      d[static_cast<size_t>(y) * width + x] = best;
    }
  return d;
}

}  // namespace

Ack Session::apply(const Command& c) {
  std::lock_guard lk(state_mu_);
  Ack ack;
  ack.type = c.type;
  ack.id = c.id;
  ack.applied_at_step = step_;
  const ModelShape& shape = model_->params.shape;
  std::visit(
      [&](const auto& body) {
        using T = std::decay_t<decltype(body)>;
        if constexpr (std::is_same_v<T, cmd::Damage>) {
          apply_damage(grid_, {body.x, body.y, body.radius, body.fill}, rng_);
        } else if constexpr (std::is_same_v<T, cmd::PaintGenome>) {
          const int h = grid_.height(), w = grid_.width();
          std::vector<bool> inside(static_cast<size_t>(h) * w, false);
          for (const auto& [start, len] : body.runs)
            for (int i = start; i < start + len; ++i) inside[static_cast<size_t>(i)] = true;
          const int reach = body.blend_width > 0.0f ? static_cast<int>(std::ceil(body.blend_width / 2.0f + 0.5f)) + 1 : 0;
          const std::vector<double> dist = boundary_distance(inside, h, w, reach);
          const GenomeCode code = genome_of_index(body.genome_index, shape.genome_channels);
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
              const size_t i = static_cast<size_t>(y) * w + x;
              float t = 0.0f;
              if (body.blend_width <= 0.0f) {
                t = inside[i] ? 1.0f : 0.0f;
              } else {
                const double s = (dist[i] - 0.5) / body.blend_width;
                t = static_cast<float>(inside[i] ? std::min(1.0, 0.5 + s) : std::max(0.0, 0.5 - s));
              }
              if (t == 0.0f) continue;
              for (int b = 0; b < shape.genome_channels; ++b) {
                float& v = grid_.at(grid_.genome_offset() + b, y, x);
                v = std::lerp(v, code.bits[static_cast<size_t>(b)], t);
              }
            }
        } else if constexpr (std::is_same_v<T, cmd::PatchTransfer>) {
          const UpdateMask mask{model_->fire_rate(), hash_combine(opt_.seed, step_), 0};
          const CellGrid source =
              synthesize(model_->params, body.source_genome, grid_.height(), grid_.width(), body.transfer_step, mask);
          grid_ = patch_transfer(source, grid_, body.region);
        } else if constexpr (std::is_same_v<T, cmd::Pause>) {
          running_ = false;
        } else if constexpr (std::is_same_v<T, cmd::Resume>) {
          running_ = true;
        } else if constexpr (std::is_same_v<T, cmd::Step>) {
          pending_steps_ += body.count;
        } else if constexpr (std::is_same_v<T, cmd::Reset>) {
          grid_ = compose_graft_seed(grid_.height(), grid_.width(), body.layout, shape);
        } else if constexpr (std::is_same_v<T, cmd::SetSpeed>) {
          opt_.sps = body.sps;
        } else if constexpr (std::is_same_v<T, cmd::SetStride>) {
          opt_.stride = body.stride;
        }
      },
      c.body);
  return ack;
}

void Session::publish(const Message& m) {
  std::lock_guard lk(listeners_mu_);
  for (auto& [token, l] : listeners_) l(m);
}

bool Session::tick() {
  std::deque<Pending> batch;
  {
    std::lock_guard lk(queue_mu_);
    batch.swap(queue_);
  }
  for (Pending& p : batch) {
    Ack a;
    try {
      a = apply(p.command);
    } catch (const std::exception& e) {
      std::lock_guard lk(state_mu_);
      a = Ack{false, p.command.type, p.command.id, step_, e.what()};
    }
    if (p.on_ack) p.on_ack(a);
  }

  std::optional<Message> frame;
  {
    std::lock_guard lk(state_mu_);
    if (!running_ && pending_steps_ == 0) return false;
    if (pending_steps_ > 0) --pending_steps_;
    const UpdateMask mask{model_->fire_rate(), opt_.seed, 0};
    evolver_.run(grid_, 1, mask.advanced(static_cast<int>(step_)));
    ++step_;
    if (step_ % static_cast<uint64_t>(opt_.stride) == 0)
      frame = Message{true, encode_frame(step_, io::to_rgb8(to_rgb(grid_)))};
  }
  if (frame) publish(*frame);
  return true;
}

void Session::loop() {
  using clock = std::chrono::steady_clock;
  auto next_step = clock::now();
  auto last_beat = clock::now();
  const auto beat = std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(opt_.heartbeat_seconds));
  while (!stop_) {
    bool want = false;
    double sps = 0.0;
    {
      std::lock_guard lk(state_mu_);
      want = running_ || pending_steps_ > 0;
      sps = opt_.sps;
    }
    bool has_commands = false;
    {
      std::lock_guard lk(queue_mu_);
      has_commands = !queue_.empty();
    }
    const auto now = clock::now();
    if (has_commands || (want && now >= next_step)) {
      const bool stepped = tick();
      if (stepped) {
        last_beat = now;
        if (sps > 0.0) {
          const auto period = std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(1.0 / sps));
          next_step = std::max(next_step + period, now - period);
        } else {
          next_step = now;
        }
      }
      continue;
    }
    const auto deadline = want ? next_step : last_beat + beat;
    {
      std::unique_lock lk(queue_mu_);
      queue_cv_.wait_until(lk, deadline, [&] { return stop_.load() || !queue_.empty(); });
    }
    if (!want && clock::now() >= last_beat + beat) {
      last_beat = clock::now();
      uint64_t step = 0;
      {
        std::lock_guard lk(state_mu_);
        step = step_;
      }
      publish({false, json{{"type", "heartbeat"}, {"step", step}, {"state", "paused"}}.dump()});
    }
  }
}

void Session::start() {
  if (thread_.joinable()) return;
  stop_ = false;
  thread_ = std::thread([this] { loop(); });
}

void Session::stop() {
  stop_ = true;
  queue_cv_.notify_all();
  if (thread_.joinable()) thread_.join();
}

int Session::subscribe(Listener l) {
  std::lock_guard lk(listeners_mu_);
  const int token = next_token_++;
  listeners_[token] = std::move(l);
  return token;
}

void Session::unsubscribe(int token) {
  std::lock_guard lk(listeners_mu_);
  listeners_.erase(token);
}

SessionStatus Session::status() const {
  std::lock_guard lk(state_mu_);
  return {id_, model_id_, running_, step_, opt_.sps, opt_.stride, grid_.height(), grid_.width()};
}

CellGrid Session::grid() const {
  std::lock_guard lk(state_mu_);
  return grid_;
}

std::vector<uint8_t> Session::snapshot_rgb() const { return io::to_rgb8(to_rgb(grid())); }

std::vector<uint8_t> Session::snapshot_png() const { return io::encode_png(to_rgb(grid())); }

// ---- registry -------------------------------------------------------------------------

std::string Registry::add_model(std::shared_ptr<const io::Model> model) {
  std::lock_guard lk(mu_);
  const std::string id = "m" + std::to_string(++next_model_);
  models_[id] = std::move(model);
  return id;
}

std::string Registry::load_model(const std::filesystem::path& path) {
  return add_model(std::make_shared<const io::Model>(io::load_weights(path)));
}

std::shared_ptr<const io::Model> Registry::model(const std::string& id) const {
  std::lock_guard lk(mu_);
  const auto it = models_.find(id);
  if (it == models_.end()) throw NotFound("unknown model '" + id + "'");
  return it->second;
}

std::shared_ptr<Session> Registry::create_session(const std::string& model_id, SessionOptions options, bool start_loop) {
  auto m = model(model_id);
  std::string id;
  {
    std::lock_guard lk(mu_);
    id = "s" + std::to_string(++next_session_);
  }
  auto s = std::make_shared<Session>(id, model_id, std::move(m), std::move(options));
  {
    std::lock_guard lk(mu_);
    sessions_[id] = s;
  }
  if (start_loop) s->start();
  return s;
}

std::shared_ptr<Session> Registry::session(const std::string& id) const {
  std::lock_guard lk(mu_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw NotFound("unknown session '" + id + "'");
  return it->second;
}

std::vector<std::shared_ptr<Session>> Registry::sessions() const {
  std::lock_guard lk(mu_);
  std::vector<std::shared_ptr<Session>> out;
  for (const auto& [id, s] : sessions_) out.push_back(s);
  return out;
}

bool Registry::remove_session(const std::string& id) {
  std::shared_ptr<Session> s;
  {
    std::lock_guard lk(mu_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) return false;
    s = it->second;
    sessions_.erase(it);
  }
  s->stop();
  return true;
}

}  // namespace nca::service
