#pragma once

// Live deployment of the weight-exchange protocol over TCP.
//
// Message layout (little-endian): u8 type | u8 device_id | u16 reserved (0) |
// u32 body length | body. MODEL_DATA bodies carry a framed EncodedModel; an
// ERROR body carries a UTF-8 reason; an ACK body is empty or "DATA_EXHAUSTED".
//
// Exchange, all initiated by the server:
//   on registration   agent HELLO -> server PUSH_MODEL, MODEL_DATA -> agent ACK
//   each round        server PULL_MODEL -> agent MODEL_DATA
//                     server PUSH_MODEL, MODEL_DATA -> agent ACK

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "fedtl/data.hpp"
#include "fedtl/federation.hpp"
#include "fedtl/nn.hpp"

namespace fedtl {

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  /// "host:port"; port 0 asks the OS for an ephemeral port when listening.
  static Endpoint parse(std::string_view text);
  std::string to_string() const;
};

enum class MessageType : std::uint8_t {
  hello = 1,
  push_model = 2,
  pull_model = 3,
  model_data = 4,
  ack = 5,
  error = 6,
};

std::string_view to_string(MessageType type) noexcept;

inline constexpr std::size_t kMessageHeaderBytes = 8;
inline constexpr std::size_t kMaxMessageBody = 64u << 20;
inline constexpr std::string_view kAckDataExhausted = "DATA_EXHAUSTED";

struct Message {
  MessageType type = MessageType::ack;
  std::uint8_t device_id = 0;
  std::vector<std::uint8_t> body;

  friend bool operator==(const Message&, const Message&) = default;
};

struct MessageHeader {
  MessageType type;
  std::uint8_t device_id;
  std::uint32_t body_length;
};

std::vector<std::uint8_t> encode_message(const Message& message);
/// Validates type, reserved field and body length limit (ProtocolError).
MessageHeader parse_message_header(std::span<const std::uint8_t> header);
/// Whole message; trailing or missing body bytes are a TruncationError.
Message decode_message(std::span<const std::uint8_t> data);

Message model_message(std::uint8_t device_id, const ModelBlob& blob);

// ---------------------------------------------------------------------------
// Server

struct RoundPolicy {
  enum class Kind {
    manual,  // rounds run only through Server::run_round
    timer,   // every `period` once `quorum` devices are registered
    quorum,  // back to back whenever `quorum` devices are registered
  };
  Kind kind = Kind::manual;
  std::chrono::milliseconds period{1000};
  std::size_t quorum = 1;
  std::size_t max_rounds = 0;  // 0 = unbounded
};

struct ServerOptions {
  Endpoint endpoint;
  RoundPolicy policy;
  std::chrono::milliseconds reply_timeout{5000};
};

struct RoundReport {
  std::size_t round = 0;  // 1-based
  ModelBlob global;
  std::uint32_t checksum = 0;  // CRC32 of the encoded global model
  std::vector<int> contributors;  // device ids averaged, ascending
  std::vector<int> stale;         // timed out or disconnected, dropped
  std::vector<int> rejected;      // sent an undecodable or mismatched model
  std::vector<int> exhausted;     // acknowledged with DATA_EXHAUSTED
  std::size_t bytes_received = 0;  // MODEL_DATA bodies
  std::size_t bytes_sent = 0;      // MODEL_DATA bodies
};

class Server {
 public:
  Server(ServerOptions options, ModelBlob initial);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds and starts accepting devices in the background.
  void start();
  std::uint16_t port() const;

  bool wait_for_devices(std::size_t count, std::chrono::milliseconds timeout);
  std::vector<int> devices() const;

  /// Pull from every registered device, average, push. Serialized with
  /// registration so every round sees a consistent device snapshot.
  RoundReport run_round();

  /// Applies the round policy until stop() or max_rounds.
  void serve();
  void stop();

  ModelBlob global() const;
  std::size_t rounds_completed() const;
  void on_round(std::function<void(const RoundReport&)> callback);

 private:
  struct Connection;

  void accept_loop();
  void register_device(std::shared_ptr<Connection> conn);

  ServerOptions options_;
  ModelBlob global_;
  std::size_t rounds_ = 0;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;

  mutable std::mutex state_mutex_;  // global_, rounds_, devices_
  std::condition_variable devices_changed_;
  std::map<int, std::shared_ptr<Connection>> devices_;
  std::mutex round_mutex_;  // serializes rounds and registrations
  std::function<void(const RoundReport&)> on_round_;

  std::atomic<bool> stopping_{false};
  std::jthread acceptor_;
};

/// Runs a server with the given policy until it stops.
void serve(const Endpoint& endpoint, const ModelBlob& initial,
           const RoundPolicy& policy);

// ---------------------------------------------------------------------------
// Agent

/// Yields the next unseen sample, or nothing once the stream is exhausted.
using SampleSource = std::function<std::optional<EmbeddingSample>()>;

/// One-shot source over a device's shard of a dataset.
SampleSource stream_source(std::shared_ptr<const EmbeddingDataset> dataset,
                           DeviceStream stream);

// Network-free training core of an agent: draws B samples, trains, discards
// them. Holds at most B samples at any time.
class LocalTrainer {
 public:
  LocalTrainer(DenseHead initial, SampleSource source, std::size_t batch_size,
               std::size_t local_episodes, double learning_rate);

  /// Trains on the next batch. Returns false (and trains nothing) once the
  /// source cannot fill a batch.
  bool step();

  const DenseHead& head() const noexcept { return head_; }
  void install(DenseHead head);
  bool exhausted() const noexcept { return exhausted_; }
  std::size_t samples_consumed() const noexcept { return consumed_; }
  std::size_t steps() const noexcept { return steps_; }
  std::size_t buffered_samples() const noexcept { return batch_.size(); }

 private:
  DenseHead head_;
  SampleSource source_;
  std::size_t batch_size_;
  std::size_t local_episodes_;
  double learning_rate_;
  std::vector<EmbeddingSample> batch_;
  std::size_t consumed_ = 0;
  std::size_t steps_ = 0;
  bool exhausted_ = false;
};

struct AgentOptions {
  Endpoint endpoint;
  std::uint8_t device_id = 0;
  double learning_rate = kDefaultLearningRate;
  std::size_t local_episodes = 20;
  std::size_t batch_size = 1;
  /// 0: train continuously. k > 0: after each installed model train k
  /// batches, then wait for the server; nothing is trained before the first
  /// model arrives.
  std::size_t steps_per_contact = 0;
  std::size_t max_reconnects = 5;
  std::chrono::milliseconds backoff{50};
  std::chrono::milliseconds step_delay{0};
};

struct AgentStats {
  std::size_t samples_consumed = 0;
  std::size_t steps = 0;
  std::size_t models_installed = 0;
  std::size_t models_rejected = 0;
  std::size_t pulls_answered = 0;
  std::size_t connections = 0;
  bool exhausted = false;
  bool connected = false;
};

class Agent {
 public:
  Agent(AgentOptions options, DenseHead initial, SampleSource source);
  ~Agent();
  Agent(const Agent&) = delete;
  Agent& operator=(const Agent&) = delete;

  void start();
  void stop();
  /// Blocks until stop() is called from another thread.
  void wait();

  ModelBlob snapshot() const;
  AgentStats stats() const;

 private:
  struct Link;

  void connection_loop(std::stop_token stop);
  void training_loop(std::stop_token stop);
  void handle(const Message& message);
  void send(const Message& message);

  AgentOptions options_;
  LocalTrainer trainer_;
  std::size_t steps_since_install_ = 0;
  bool have_model_ = false;

  mutable std::mutex head_mutex_;  // guards snapshot reads of trainer_
  AgentStats stats_;

  std::mutex inbox_mutex_;
  std::condition_variable_any inbox_cv_;
  std::deque<Message> inbox_;

  std::mutex link_mutex_;
  std::shared_ptr<Link> link_;

  std::atomic<bool> stopped_{false};
  std::jthread connection_;
  std::jthread training_;
};

}  // namespace fedtl
