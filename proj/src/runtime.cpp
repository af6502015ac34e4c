#include "fedtl/runtime.hpp"

#include <fmt/format.h>
#include <unistd.h>

#include <charconv>
#include <exception>

#include "bytes.hpp"
#include "fedtl/errors.hpp"
#include "fedtl/log.hpp"
#include "fedtl/wire.hpp"
#include "socket.hpp"

namespace fedtl {

using namespace std::chrono_literals;

Endpoint Endpoint::parse(std::string_view text) {
  const auto colon = text.rfind(':');
  if (colon == std::string_view::npos) {
    throw UsageError("endpoint '" + std::string(text) +
                     "' is not of the form host:port");
  }
  Endpoint ep;
  ep.host = std::string(text.substr(0, colon));
  const auto port = text.substr(colon + 1);
  unsigned value = 0;
  const auto [ptr, ec] =
      std::from_chars(port.data(), port.data() + port.size(), value);
  if (ec != std::errc{} || ptr != port.data() + port.size() || value > 65535) {
    throw UsageError("invalid port in endpoint '" + std::string(text) + "'");
  }
  ep.port = static_cast<std::uint16_t>(value);
  if (ep.host.empty()) ep.host = "127.0.0.1";
  return ep;
}

std::string Endpoint::to_string() const {
  return host + ":" + std::to_string(port);
}

std::string_view to_string(MessageType type) noexcept {
  switch (type) {
    case MessageType::hello: return "HELLO";
    case MessageType::push_model: return "PUSH_MODEL";
    case MessageType::pull_model: return "PULL_MODEL";
    case MessageType::model_data: return "MODEL_DATA";
    case MessageType::ack: return "ACK";
    case MessageType::error: return "ERROR";
  }
  return "UNKNOWN";
}

std::vector<std::uint8_t> encode_message(const Message& message) {
  if (message.body.size() > kMaxMessageBody) {
    throw EncodingError("message body of " +
                        std::to_string(message.body.size()) +
                        " bytes exceeds the limit");
  }
  std::vector<std::uint8_t> out;
  out.reserve(kMessageHeaderBytes + message.body.size());
  bytes::put_u8(out, static_cast<std::uint8_t>(message.type));
  bytes::put_u8(out, message.device_id);
  bytes::put_u16(out, 0);
  bytes::put_u32(out, static_cast<std::uint32_t>(message.body.size()));
  out.insert(out.end(), message.body.begin(), message.body.end());
  return out;
}

MessageHeader parse_message_header(std::span<const std::uint8_t> header) {
  if (header.size() < kMessageHeaderBytes) {
    throw TruncationError("message header needs 8 bytes, got " +
                          std::to_string(header.size()));
  }
  const std::uint8_t type = header[0];
  if (type < static_cast<std::uint8_t>(MessageType::hello) ||
      type > static_cast<std::uint8_t>(MessageType::error)) {
    throw ProtocolError("unknown message type " + std::to_string(type));
  }
  if (bytes::get_u16(header, 2) != 0) {
    throw ProtocolError("reserved message field is not zero");
  }
  const std::uint32_t length = bytes::get_u32(header, 4);
  if (length > kMaxMessageBody) {
    throw ProtocolError("message body length " + std::to_string(length) +
                        " exceeds the limit");
  }
  return {static_cast<MessageType>(type), header[1], length};
}

Message decode_message(std::span<const std::uint8_t> data) {
  const MessageHeader h = parse_message_header(data);
  if (data.size() != kMessageHeaderBytes + h.body_length) {
    throw TruncationError("message declares " + std::to_string(h.body_length) +
                          " body bytes, has " +
                          std::to_string(data.size() - kMessageHeaderBytes));
  }
  const auto body = data.subspan(kMessageHeaderBytes);
  return {h.type, h.device_id, {body.begin(), body.end()}};
}

Message model_message(std::uint8_t device_id, const ModelBlob& blob) {
  return {MessageType::model_data, device_id, pack_model(blob)};
}

namespace {

Message text_message(MessageType type, std::uint8_t device_id,
                     std::string_view text) {
  return {type, device_id, {text.begin(), text.end()}};
}

void send_message(net::Socket& socket, const Message& message) {
  socket.send_all(encode_message(message));
}

Message recv_message(net::Socket& socket,
                     std::optional<std::chrono::milliseconds> timeout) {
  std::array<std::uint8_t, kMessageHeaderBytes> header{};
  socket.recv_exact(header, timeout);
  const MessageHeader h = parse_message_header(header);
  Message m{h.type, h.device_id, std::vector<std::uint8_t>(h.body_length)};
  socket.recv_exact(m.body, timeout);
  return m;
}

std::string body_text(const Message& m) {
  return std::string(m.body.begin(), m.body.end());
}

template <typename Fn>
void for_each_concurrently(std::size_t count, Fn fn) {
  std::vector<std::jthread> workers;
  workers.reserve(count);
  for (std::size_t i = 0; i < count; ++i) workers.emplace_back([&fn, i] { fn(i); });
}

}  // namespace

// ---------------------------------------------------------------------------
// Server

struct Server::Connection {
  int device_id = 0;
  net::Socket socket;
};

Server::Server(ServerOptions options, ModelBlob initial)
    : options_(std::move(options)), global_(std::move(initial)) {
  global_.validate();
}

Server::~Server() { stop(); }

void Server::start() {
  listen_fd_ = net::listen_on(options_.endpoint.host, options_.endpoint.port,
                              port_);
  log::info(fmt::format("server listening on {}:{} for a {}x{} model",
                        options_.endpoint.host, port_, global_.num_classes,
                        global_.embedding_dim));
  acceptor_ = std::jthread([this] { accept_loop(); });
}

std::uint16_t Server::port() const { return port_; }

void Server::accept_loop() {
  while (!stopping_) {
    net::Socket socket = net::accept_from(listen_fd_, 100ms);
    if (!socket.valid()) continue;
    try {
      const Message hello = recv_message(socket, options_.reply_timeout);
      if (hello.type != MessageType::hello) {
        send_message(socket, text_message(MessageType::error, hello.device_id,
                                          "expected HELLO"));
        continue;
      }
      auto conn = std::make_shared<Connection>();
      conn->device_id = hello.device_id;
      conn->socket = std::move(socket);
      register_device(std::move(conn));
    } catch (const std::exception& e) {
      log::error(fmt::format("registration failed: {}", e.what()));
    }
  }
}

void Server::register_device(std::shared_ptr<Connection> conn) {
  std::lock_guard round_lock(round_mutex_);
  const ModelBlob current = global();
  const auto id = static_cast<std::uint8_t>(conn->device_id);
  send_message(conn->socket, {MessageType::push_model, id, {}});
  send_message(conn->socket, model_message(id, current));
  const Message reply = recv_message(conn->socket, options_.reply_timeout);
  if (reply.type != MessageType::ack) {
    throw ProtocolError(fmt::format("device {} answered the initial model with {}",
                                    conn->device_id, to_string(reply.type)));
  }
  {
    std::lock_guard lock(state_mutex_);
    if (auto it = devices_.find(conn->device_id); it != devices_.end()) {
      it->second->socket.shutdown();
    }
    devices_[conn->device_id] = conn;
  }
  devices_changed_.notify_all();
  log::info(fmt::format("device {} registered", conn->device_id));
}

bool Server::wait_for_devices(std::size_t count,
                              std::chrono::milliseconds timeout) {
  std::unique_lock lock(state_mutex_);
  return devices_changed_.wait_for(lock, timeout, [&] {
    return devices_.size() >= count || stopping_;
  }) && devices_.size() >= count;
}

std::vector<int> Server::devices() const {
  std::lock_guard lock(state_mutex_);
  std::vector<int> ids;
  for (const auto& [id, conn] : devices_) ids.push_back(id);
  return ids;
}

ModelBlob Server::global() const {
  std::lock_guard lock(state_mutex_);
  return global_;
}

std::size_t Server::rounds_completed() const {
  std::lock_guard lock(state_mutex_);
  return rounds_;
}

void Server::on_round(std::function<void(const RoundReport&)> callback) {
  std::lock_guard lock(round_mutex_);
  on_round_ = std::move(callback);
}

RoundReport Server::run_round() {
  std::lock_guard round_lock(round_mutex_);
  std::vector<std::shared_ptr<Connection>> snapshot;
  ModelBlob current;
  {
    std::lock_guard lock(state_mutex_);
    for (const auto& [id, conn] : devices_) snapshot.push_back(conn);
    current = global_;
  }

  enum class Outcome { ok, stale, rejected, exhausted };
  const std::size_t n = snapshot.size();
  std::vector<Outcome> outcome(n, Outcome::ok);
  std::vector<std::optional<ModelBlob>> uploads(n);
  std::vector<std::size_t> received(n, 0), sent(n, 0);

  for_each_concurrently(n, [&](std::size_t i) {
    auto& conn = *snapshot[i];
    const auto id = static_cast<std::uint8_t>(conn.device_id);
    try {
      send_message(conn.socket, {MessageType::pull_model, id, {}});
      const Message reply = recv_message(conn.socket, options_.reply_timeout);
      if (reply.type != MessageType::model_data) {
        log::error(fmt::format("device {} answered PULL_MODEL with {} {}",
                               conn.device_id, to_string(reply.type),
                               body_text(reply)));
        outcome[i] = Outcome::rejected;
        return;
      }
      received[i] = reply.body.size();
      try {
        ModelBlob blob = unpack_model(reply.body);
        if (blob.embedding_dim != current.embedding_dim ||
            blob.num_classes != current.num_classes) {
          throw ShapeError(fmt::format("model is {}x{}, session is {}x{}",
                                       blob.num_classes, blob.embedding_dim,
                                       current.num_classes,
                                       current.embedding_dim));
        }
        uploads[i] = std::move(blob);
      } catch (const Error& e) {
        log::error(fmt::format("device {} sent an unusable model: {}",
                               conn.device_id, e.what()));
        send_message(conn.socket,
                     text_message(MessageType::error, id, e.what()));
        outcome[i] = Outcome::rejected;
      }
    } catch (const TransportError& e) {
      log::error(fmt::format("device {} stale: {}", conn.device_id, e.what()));
      outcome[i] = Outcome::stale;
    }
  });

  RoundReport report;
  std::vector<ModelBlob> contributions;
  for (std::size_t i = 0; i < n; ++i) {
    if (uploads[i]) {
      contributions.push_back(*uploads[i]);
      report.contributors.push_back(snapshot[i]->device_id);
    }
  }
  if (!contributions.empty()) current = average_blobs(contributions);

  const Message push_data = model_message(0, current);
  for_each_concurrently(n, [&](std::size_t i) {
    if (outcome[i] == Outcome::stale) return;
    auto& conn = *snapshot[i];
    const auto id = static_cast<std::uint8_t>(conn.device_id);
    try {
      send_message(conn.socket, {MessageType::push_model, id, {}});
      Message data = push_data;
      data.device_id = id;
      send_message(conn.socket, data);
      sent[i] = data.body.size();
      const Message reply = recv_message(conn.socket, options_.reply_timeout);
      if (reply.type == MessageType::error) {
        log::error(fmt::format("device {} rejected the global model: {}",
                               conn.device_id, body_text(reply)));
        outcome[i] = Outcome::rejected;
      } else if (reply.type == MessageType::ack &&
                 body_text(reply) == kAckDataExhausted) {
        if (outcome[i] == Outcome::ok) outcome[i] = Outcome::exhausted;
      }
    } catch (const TransportError& e) {
      log::error(fmt::format("device {} stale: {}", conn.device_id, e.what()));
      outcome[i] = Outcome::stale;
    }
  });

  for (std::size_t i = 0; i < n; ++i) {
    const int id = snapshot[i]->device_id;
    report.bytes_received += received[i];
    report.bytes_sent += sent[i];
    switch (outcome[i]) {
      case Outcome::stale: report.stale.push_back(id); break;
      case Outcome::rejected: report.rejected.push_back(id); break;
      case Outcome::exhausted: report.exhausted.push_back(id); break;
      case Outcome::ok: break;
    }
  }

  {
    std::lock_guard lock(state_mutex_);
    for (std::size_t i = 0; i < n; ++i) {
      if (outcome[i] != Outcome::stale) continue;
      snapshot[i]->socket.shutdown();
      auto it = devices_.find(snapshot[i]->device_id);
      if (it != devices_.end() && it->second == snapshot[i]) devices_.erase(it);
    }
    global_ = current;
    report.round = ++rounds_;
  }
  report.global = std::move(current);
  report.checksum = crc32(encode_model(report.global));
  log::info(fmt::format("round {} checksum {:08x} from {} device(s), {} stale, "
                        "{} rejected",
                        report.round, report.checksum,
                        report.contributors.size(), report.stale.size(),
                        report.rejected.size()));
  if (on_round_) on_round_(report);
  return report;
}

void Server::serve() {
  const RoundPolicy& policy = options_.policy;
  auto done = [&] {
    return stopping_ ||
           (policy.max_rounds != 0 && rounds_completed() >= policy.max_rounds);
  };
  while (!done()) {
    switch (policy.kind) {
      case RoundPolicy::Kind::manual:
        std::this_thread::sleep_for(100ms);
        break;
      case RoundPolicy::Kind::timer: {
        const auto until = std::chrono::steady_clock::now() + policy.period;
        while (!stopping_ && std::chrono::steady_clock::now() < until) {
          std::this_thread::sleep_for(std::min<std::chrono::milliseconds>(
              policy.period, 50ms));
        }
        if (!stopping_ && devices().size() >= policy.quorum) run_round();
        break;
      }
      case RoundPolicy::Kind::quorum:
        if (wait_for_devices(policy.quorum, 100ms) && !stopping_) run_round();
        break;
    }
  }
}

void Server::stop() {
  if (stopping_.exchange(true)) return;
  devices_changed_.notify_all();
  if (acceptor_.joinable()) acceptor_.join();
  if (listen_fd_ >= 0) {
    ::close(listen_fd_);
    listen_fd_ = -1;
  }
  std::lock_guard lock(state_mutex_);
  for (auto& [id, conn] : devices_) conn->socket.shutdown();
}

void serve(const Endpoint& endpoint, const ModelBlob& initial,
           const RoundPolicy& policy) {
  Server server(ServerOptions{endpoint, policy, 5000ms}, initial);
  server.start();
  server.serve();
}

// ---------------------------------------------------------------------------
// Agent

SampleSource stream_source(std::shared_ptr<const EmbeddingDataset> dataset,
                           DeviceStream stream) {
  return [dataset = std::move(dataset),
          stream = std::move(stream)]() mutable -> std::optional<EmbeddingSample> {
    if (stream.remaining() == 0) return std::nullopt;
    return dataset->samples.at(stream.take(1).front());
  };
}

LocalTrainer::LocalTrainer(DenseHead initial, SampleSource source,
                           std::size_t batch_size, std::size_t local_episodes,
                           double learning_rate)
    : head_(std::move(initial)),
      source_(std::move(source)),
      batch_size_(batch_size),
      local_episodes_(local_episodes),
      learning_rate_(learning_rate) {
  if (batch_size_ == 0) throw UsageError("batch_size must be >= 1");
  if (local_episodes_ == 0) throw UsageError("local_episodes must be >= 1");
  if (!(learning_rate_ > 0.0)) throw UsageError("learning_rate must be > 0");
  batch_.reserve(batch_size_);
}

bool LocalTrainer::step() {
  if (exhausted_) return false;
  batch_.clear();
  while (batch_.size() < batch_size_) {
    auto sample = source_ ? source_() : std::nullopt;
    if (!sample) {
      exhausted_ = true;
      batch_.clear();
      return false;
    }
    ++consumed_;
    batch_.push_back(std::move(*sample));
  }
  head_ = train_batch(head_, batch_, learning_rate_, local_episodes_);
  batch_.clear();
  ++steps_;
  return true;
}

void LocalTrainer::install(DenseHead head) {
  if (head.embedding_dim() != head_.embedding_dim() ||
      head.num_classes() != head_.num_classes()) {
    throw ShapeError("installed model does not match the local head shape");
  }
  head_ = std::move(head);
}

struct Agent::Link {
  net::Socket socket;
  std::mutex send_mutex;
};

Agent::Agent(AgentOptions options, DenseHead initial, SampleSource source)
    : options_(std::move(options)),
      trainer_(std::move(initial), std::move(source), options_.batch_size,
               options_.local_episodes, options_.learning_rate) {}

Agent::~Agent() { stop(); }

void Agent::start() {
  training_ = std::jthread([this](std::stop_token st) { training_loop(st); });
  connection_ =
      std::jthread([this](std::stop_token st) { connection_loop(st); });
}

void Agent::stop() {
  if (stopped_.exchange(true)) return;
  connection_.request_stop();
  training_.request_stop();
  {
    std::lock_guard lock(link_mutex_);
    if (link_) link_->socket.shutdown();
  }
  inbox_cv_.notify_all();
  if (connection_.joinable()) connection_.join();
  if (training_.joinable()) training_.join();
  stopped_.notify_all();
}

void Agent::wait() { stopped_.wait(false); }

ModelBlob Agent::snapshot() const {
  std::lock_guard lock(head_mutex_);
  return to_blob(trainer_.head());
}

AgentStats Agent::stats() const {
  std::lock_guard lock(head_mutex_);
  AgentStats s = stats_;
  s.samples_consumed = trainer_.samples_consumed();
  s.steps = trainer_.steps();
  s.exhausted = trainer_.exhausted();
  return s;
}

void Agent::send(const Message& message) {
  std::shared_ptr<Link> link;
  {
    std::lock_guard lock(link_mutex_);
    link = link_;
  }
  if (!link) {
    log::debug(fmt::format("agent {} offline, dropping {}", options_.device_id,
                           to_string(message.type)));
    return;
  }
  try {
    std::lock_guard lock(link->send_mutex);
    send_message(link->socket, message);
  } catch (const TransportError& e) {
    log::error(fmt::format("agent {} send failed: {}", options_.device_id,
                           e.what()));
  }
}

void Agent::connection_loop(std::stop_token stop) {
  std::size_t failures = 0;
  std::mutex sleep_mutex;
  std::condition_variable_any sleeper;
  while (!stop.stop_requested()) {
    try {
      auto link = std::make_shared<Link>();
      link->socket = net::Socket::connect(options_.endpoint.host,
                                          options_.endpoint.port, 1000ms);
      send_message(link->socket,
                   {MessageType::hello, options_.device_id, {}});
      {
        std::lock_guard lock(link_mutex_);
        link_ = link;
      }
      {
        std::lock_guard lock(head_mutex_);
        stats_.connected = true;
        ++stats_.connections;
      }
      failures = 0;
      log::info(fmt::format("agent {} connected to {}", options_.device_id,
                            options_.endpoint.to_string()));
      while (!stop.stop_requested()) {
        if (!link->socket.wait_readable(100ms)) continue;
        Message m = recv_message(link->socket, 5000ms);
        {
          std::lock_guard lock(inbox_mutex_);
          inbox_.push_back(std::move(m));
        }
        inbox_cv_.notify_all();
      }
    } catch (const std::exception& e) {
      if (stop.stop_requested()) break;
      log::error(fmt::format("agent {} link error: {}", options_.device_id,
                             e.what()));
    }
    {
      std::lock_guard lock(link_mutex_);
      link_.reset();
    }
    {
      std::lock_guard lock(head_mutex_);
      stats_.connected = false;
    }
    if (stop.stop_requested()) break;
    if (++failures > options_.max_reconnects) {
      log::error(fmt::format(
          "agent {} giving up after {} reconnect attempts; training offline",
          options_.device_id, options_.max_reconnects));
      break;
    }
    const auto delay = options_.backoff * (1 << std::min<std::size_t>(failures - 1, 10));
    std::unique_lock lock(sleep_mutex);
    sleeper.wait_for(lock, stop, delay, [] { return false; });
  }
}

void Agent::training_loop(std::stop_token stop) {
  const bool synchronized = options_.steps_per_contact > 0;
  while (!stop.stop_requested()) {
    const bool quota_pending =
        synchronized && have_model_ && !trainer_.exhausted() &&
        steps_since_install_ < options_.steps_per_contact;
    if (!quota_pending) {
      std::deque<Message> pending;
      {
        std::lock_guard lock(inbox_mutex_);
        pending.swap(inbox_);
      }
      for (const auto& m : pending) handle(m);
    }

    const bool may_train =
        !trainer_.exhausted() &&
        (!synchronized ||
         (have_model_ && steps_since_install_ < options_.steps_per_contact));
    if (may_train) {
      bool trained = false;
      {
        std::lock_guard lock(head_mutex_);
        trained = trainer_.step();
      }
      if (trained) {
        ++steps_since_install_;
      } else {
        log::info(fmt::format("agent {} data stream exhausted after {} samples",
                              options_.device_id, trainer_.samples_consumed()));
      }
      if (options_.step_delay.count() > 0) {
        std::this_thread::sleep_for(options_.step_delay);
      }
      continue;
    }
    std::unique_lock lock(inbox_mutex_);
    inbox_cv_.wait_for(lock, stop, 50ms, [&] { return !inbox_.empty(); });
  }
}

void Agent::handle(const Message& message) {
  const std::uint8_t id = options_.device_id;
  switch (message.type) {
    case MessageType::pull_model: {
      send(model_message(id, snapshot()));
      std::lock_guard lock(head_mutex_);
      ++stats_.pulls_answered;
      break;
    }
    case MessageType::model_data: {
      std::optional<DenseHead> incoming;
      try {
        const ModelBlob blob = unpack_model(message.body);
        const DenseHead& current = trainer_.head();
        if (blob.embedding_dim != current.embedding_dim() ||
            blob.num_classes != current.num_classes()) {
          throw ShapeError("model shape does not match the local head");
        }
        incoming = to_head(blob);
      } catch (const Error& e) {
        log::error(fmt::format("agent {} rejected model: {}", id, e.what()));
        {
          std::lock_guard lock(head_mutex_);
          ++stats_.models_rejected;
        }
        send(text_message(MessageType::error, id, e.what()));
        break;
      }
      bool exhausted = false;
      {
        std::lock_guard lock(head_mutex_);
        trainer_.install(std::move(*incoming));
        ++stats_.models_installed;
        exhausted = trainer_.exhausted();
      }
      steps_since_install_ = 0;
      have_model_ = true;
      send(exhausted ? text_message(MessageType::ack, id, kAckDataExhausted)
                     : Message{MessageType::ack, id, {}});
      break;
    }
    case MessageType::push_model:
      log::debug(fmt::format("agent {} expecting a pushed model", id));
      break;
    case MessageType::error:
      log::error(fmt::format("agent {} got ERROR: {}", id, body_text(message)));
      break;
    case MessageType::hello:
    case MessageType::ack:
      log::debug(fmt::format("agent {} ignoring {}", id, to_string(message.type)));
      break;
  }
}

}  // namespace fedtl
