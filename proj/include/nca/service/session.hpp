#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <json.hpp>

#include "nca/inference.hpp"
#include "nca/weights_io.hpp"

namespace nca::service {

using nlohmann::json;

// One message on a session's outbound stream.
struct Message {
  bool binary = false;
  std::string payload;
};

// Binary frame: u64 step (little-endian) followed by interleaved 8-bit RGB, row-major.
std::string encode_frame(uint64_t step, const std::vector<uint8_t>& rgb);

namespace cmd {
struct Damage {
  int x = 0, y = 0;
  float radius = 1.0f;
  DamageFill fill = DamageFill::randomize;
};
// Cells whose row-major index falls in one of the [start, start + length) runs take the genome.
struct PaintGenome {
  std::vector<std::pair<int, int>> runs;
  int genome_index = 0;
  float blend_width = 0.0f;
};
struct PatchTransfer {
  int source_genome = 0;
  Region region;
  int transfer_step = 0;  // age of the source rollout when the patch is cut
};
struct Pause {};
struct Resume {};
struct Step {
  int count = 1;
};
struct Reset {
  GraftLayout layout;
};
struct SetSpeed {
  double sps = 0.0;  // 0 runs unthrottled
};
struct SetStride {
  int stride = 1;
};
}  // namespace cmd

using CommandBody = std::variant<cmd::Damage, cmd::PaintGenome, cmd::PatchTransfer, cmd::Pause, cmd::Resume, cmd::Step,
                                 cmd::Reset, cmd::SetSpeed, cmd::SetStride>;

struct Command {
  std::string type;
  std::optional<json> id;  // echoed in the ack
  CommandBody body;
};

struct Ack {
  bool ok = true;
  std::string type;
  std::optional<json> id;
  uint64_t applied_at_step = 0;
  std::string error;

  json to_json() const;
};

// Parses and validates a command envelope {"type": ...} against the grid and genome range.
Command parse_command(const json& j, int height, int width, int genome_channels);

// Parses a layout object {"kind": "halves"|"stripes"|"concentric"|"mask", "count", "genomes", "blend_width", "mask"}.
// For "mask" the value is an inline run-length list [[start, length, region], ...].
GraftLayout parse_layout(const json& j, int height, int width);

struct SessionOptions {
  int height = 64;
  int width = 64;
  GraftLayout layout;
  uint64_t seed = 0;
  double sps = 30.0;
  int stride = 1;
  double heartbeat_seconds = 1.0;
  size_t max_pending_frames = 4;
};

struct SessionStatus {
  std::string id;
  std::string model_id;
  bool running = false;
  uint64_t step = 0;
  double sps = 0.0;
  int stride = 1;
  int height = 0, width = 0;
  json to_json() const;
};

// A live automaton. Exactly one thread (the evolution loop, or the caller of tick()
// when the loop is not started) mutates the grid. Commands are applied between
// steps in submission order.
class Session {
 public:
  using Listener = std::function<void(const Message&)>;

  Session(std::string id, std::string model_id, std::shared_ptr<const io::Model> model, SessionOptions options);
  ~Session();
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  const std::string& id() const { return id_; }
  int genome_channels() const { return model_->params.shape.genome_channels; }

  // Queues a command; `on_ack` runs on the mutating thread once it is applied.
  void submit(Command c, std::function<void(const Ack&)> on_ack = {});
  std::future<Ack> submit_async(Command c);

  // Applies pending commands, then advances one step if running or a step
  // command is outstanding. Returns true when a step happened.
  bool tick();

  void start();
  void stop();

  int subscribe(Listener l);
  void unsubscribe(int token);

  SessionStatus status() const;
  CellGrid grid() const;
  std::vector<uint8_t> snapshot_rgb() const;
  std::vector<uint8_t> snapshot_png() const;

 private:
  struct Pending {
    Command command;
    std::function<void(const Ack&)> on_ack;
  };

  Ack apply(const Command& c);
  void publish(const Message& m);
  void loop();

  std::string id_;
  std::string model_id_;
  std::shared_ptr<const io::Model> model_;
  SessionOptions opt_;
  Evolver evolver_;
  Rng rng_;

  mutable std::mutex state_mu_;
  CellGrid grid_;
  uint64_t step_ = 0;
  bool running_ = false;
  int pending_steps_ = 0;

  std::mutex queue_mu_;
  std::condition_variable queue_cv_;
  std::deque<Pending> queue_;

  std::mutex listeners_mu_;
  std::map<int, Listener> listeners_;
  int next_token_ = 0;

  std::atomic<bool> stop_{false};
  std::thread thread_;
};

// Thread-safe registry of loaded models and live sessions.
class Registry {
 public:
  std::string add_model(std::shared_ptr<const io::Model> model);
  std::string load_model(const std::filesystem::path& path);
  std::shared_ptr<const io::Model> model(const std::string& id) const;

  std::shared_ptr<Session> create_session(const std::string& model_id, SessionOptions options, bool start_loop = true);
  std::shared_ptr<Session> session(const std::string& id) const;
  std::vector<std::shared_ptr<Session>> sessions() const;
  bool remove_session(const std::string& id);

 private:
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<const io::Model>> models_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  int next_model_ = 0;
  int next_session_ = 0;
};

class NotFound : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace nca::service
