#include <doctest.h>

#include <future>
#include <random>
#include <thread>

#include <unistd.h>

#include "fedtl/errors.hpp"
#include "fedtl/runtime.hpp"
#include "fedtl/wire.hpp"
#include "helpers.hpp"
#include "socket.hpp"

using namespace fedtl;
using namespace std::chrono_literals;

namespace {

// Scripted device speaking the message protocol over a raw socket.
class FakeDevice {
 public:
  FakeDevice(std::uint16_t port, std::uint8_t id) : id_(id) {
    socket_ = net::Socket::connect("127.0.0.1", port, 1000ms);
    send({MessageType::hello, id_, {}});
    expect(MessageType::push_model);
    initial_ = unpack_model(expect(MessageType::model_data).body);
    send({MessageType::ack, id_, {}});
  }

  void send(const Message& m) { socket_.send_all(encode_message(m)); }

  Message recv() {
    std::vector<std::uint8_t> header(kMessageHeaderBytes);
    socket_.recv_exact(header, 5000ms);
    const auto h = parse_message_header(header);
    Message m{h.type, h.device_id, std::vector<std::uint8_t>(h.body_length)};
    socket_.recv_exact(m.body, 5000ms);
    return m;
  }

  Message expect(MessageType type) {
    Message m = recv();
    REQUIRE(m.type == type);
    return m;
  }

  // Answers one PULL with `blob`, then consumes the push and acknowledges it.
  ModelBlob answer_round(const ModelBlob& blob) {
    expect(MessageType::pull_model);
    send(model_message(id_, blob));
    expect(MessageType::push_model);
    const ModelBlob global = unpack_model(expect(MessageType::model_data).body);
    send({MessageType::ack, id_, {}});
    return global;
  }

  const ModelBlob& initial() const { return initial_; }
  void close() { socket_.close(); }

 private:
  std::uint8_t id_;
  net::Socket socket_;
  ModelBlob initial_;
};

ModelBlob blob_of(std::size_t e, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  ModelBlob b{e, c, std::vector<double>(c * e + c)};
  for (double& v : b.values) v = static_cast<float>(u(rng));
  return b;
}

ServerOptions local_options(std::chrono::milliseconds timeout = 2000ms) {
  ServerOptions o;
  o.endpoint = Endpoint{"127.0.0.1", 0};
  o.reply_timeout = timeout;
  return o;
}

}  // namespace

TEST_CASE("endpoint parsing") {
  const auto e = Endpoint::parse("localhost:5555");
  CHECK(e.host == "localhost");
  CHECK(e.port == 5555);
  CHECK(e.to_string() == "localhost:5555");
  CHECK_THROWS_AS(Endpoint::parse("nohost"), UsageError);
  CHECK_THROWS_AS(Endpoint::parse("h:99999"), UsageError);
  CHECK_THROWS_AS(Endpoint::parse("h:x"), UsageError);
}

TEST_CASE("message layout") {
  const Message m{MessageType::model_data, 7, {1, 2, 3}};
  const auto bytes = encode_message(m);
  REQUIRE(bytes.size() == 11);
  CHECK(bytes[0] == 4);
  CHECK(bytes[1] == 7);
  CHECK(bytes[2] == 0);
  CHECK(bytes[3] == 0);
  CHECK(bytes[4] == 3);
  CHECK(bytes[5] == 0);
  CHECK(decode_message(bytes) == m);

  auto bad_type = bytes;
  bad_type[0] = 9;
  CHECK_THROWS_AS(decode_message(bad_type), ProtocolError);
  auto reserved = bytes;
  reserved[2] = 1;
  CHECK_THROWS_AS(decode_message(reserved), ProtocolError);
  CHECK_THROWS_AS(decode_message(std::span(bytes).first(10)), TruncationError);

  // MODEL_DATA carries the framed model: frames x 8 bytes.
  const auto mm = model_message(1, ModelBlob{256, 2, std::vector<double>(514, 0.0)});
  CHECK(mm.body.size() == 518 * kFrameWireBytes);
}

TEST_CASE("single device round returns the device model") {
  Server server(local_options(), blob_of(4, 2, 1));
  server.start();
  FakeDevice dev(server.port(), 3);
  CHECK(dev.initial() == blob_of(4, 2, 1));
  REQUIRE(server.wait_for_devices(1, 2000ms));

  const auto w = blob_of(4, 2, 2);
  auto fut = std::async(std::launch::async, [&] { return dev.answer_round(w); });
  const auto report = server.run_round();
  CHECK(report.global == w);
  CHECK(fut.get() == w);
  CHECK(report.contributors == std::vector<int>{3});
  CHECK(report.round == 1);
  CHECK(report.checksum == crc32(encode_model(w)));
  CHECK(report.bytes_received == frame_count(encoded_size(4, 2)) * kFrameWireBytes);
  CHECK(report.bytes_sent == report.bytes_received);
  server.stop();
}

TEST_CASE("symmetric devices average to zero") {
  Server server(local_options(), blob_of(3, 2, 1));
  server.start();
  FakeDevice a(server.port(), 1), b(server.port(), 2);
  REQUIRE(server.wait_for_devices(2, 2000ms));
  auto w = blob_of(3, 2, 7);
  auto neg = w;
  for (double& v : neg.values) v = -v;
  auto fa = std::async(std::launch::async, [&] { return a.answer_round(w); });
  auto fb = std::async(std::launch::async, [&] { return b.answer_round(neg); });
  const auto report = server.run_round();
  for (double v : report.global.values) CHECK(v == 0.0);
  CHECK(report.contributors == std::vector<int>{1, 2});
  fa.get();
  fb.get();
  server.stop();
}

TEST_CASE("bad models are rejected and silent devices go stale") {
  Server server(local_options(300ms), blob_of(3, 2, 1));
  server.start();
  FakeDevice good(server.port(), 1), bad(server.port(), 2), silent(server.port(), 3);
  REQUIRE(server.wait_for_devices(3, 2000ms));
  const auto w = blob_of(3, 2, 5);

  auto fg = std::async(std::launch::async, [&] { return good.answer_round(w); });
  auto fb = std::async(std::launch::async, [&] {
    bad.expect(MessageType::pull_model);
    auto msg = model_message(2, w);
    msg.body[8 * 6 + 4] ^= 0xFF;  // corrupt a payload byte
    bad.send(msg);
    const Message err = bad.expect(MessageType::error);
    bad.expect(MessageType::push_model);
    bad.expect(MessageType::model_data);
    bad.send({MessageType::ack, 2, {}});
    return std::string(err.body.begin(), err.body.end());
  });
  const auto report = server.run_round();
  CHECK(report.global == w);
  CHECK(report.contributors == std::vector<int>{1});
  CHECK(report.rejected == std::vector<int>{2});
  CHECK(report.stale == std::vector<int>{3});
  CHECK(fg.get() == w);
  CHECK(fb.get().find("CRC") != std::string::npos);
  CHECK(server.devices() == std::vector<int>{1, 2});
  server.stop();
}

TEST_CASE("mismatched shapes are rejected") {
  Server server(local_options(), blob_of(3, 2, 1));
  server.start();
  FakeDevice dev(server.port(), 4);
  REQUIRE(server.wait_for_devices(1, 2000ms));
  auto f = std::async(std::launch::async, [&] {
    dev.expect(MessageType::pull_model);
    dev.send(model_message(4, blob_of(5, 2, 1)));
    dev.expect(MessageType::error);
    dev.expect(MessageType::push_model);
    const auto g = unpack_model(dev.expect(MessageType::model_data).body);
    dev.send({MessageType::ack, 4, {}});
    return g;
  });
  const auto report = server.run_round();
  CHECK(report.rejected == std::vector<int>{4});
  CHECK(report.global == blob_of(3, 2, 1));
  CHECK(f.get() == blob_of(3, 2, 1));
  server.stop();
}

TEST_CASE("local trainer holds at most one batch") {
  auto ds = std::make_shared<const EmbeddingDataset>(synth_separable(8, 2, 50, 1.0, 3));
  LocalTrainer t(DenseHead(8, 2), stream_source(ds, partition(*ds, 1, 0)[0]), 4, 2, 0.1);
  std::size_t steps = 0;
  while (t.step()) {
    ++steps;
    CHECK(t.buffered_samples() == 0);
  }
  CHECK(steps == 12);
  CHECK(t.exhausted());
  CHECK(t.samples_consumed() == 50);
  CHECK_FALSE(t.step());
  CHECK_THROWS_AS(t.install(DenseHead(3, 2)), ShapeError);
}

TEST_CASE("agent with no data returns exactly the pushed model") {
  const auto initial = blob_of(6, 2, 9);
  Server server(local_options(), initial);
  server.start();
  AgentOptions opts;
  opts.endpoint = Endpoint{"127.0.0.1", server.port()};
  opts.device_id = 5;
  Agent agent(opts, DenseHead(6, 2), [] { return std::optional<EmbeddingSample>{}; });
  agent.start();
  REQUIRE(server.wait_for_devices(1, 3000ms));
  const auto report = server.run_round();
  CHECK(report.global == initial);
  CHECK(report.exhausted == std::vector<int>{5});
  CHECK(agent.snapshot() == initial);
  agent.stop();
  server.stop();
}

TEST_CASE("agent replay matches an offline trainer") {
  auto ds = std::make_shared<const EmbeddingDataset>(synth_separable(8, 2, 30, 1.0, 4));
  const auto initial = to_blob(init_head(8, 2, init::Random{2}));
  Server server(local_options(), initial);
  server.start();
  AgentOptions opts;
  opts.endpoint = Endpoint{"127.0.0.1", server.port()};
  opts.device_id = 0;
  opts.batch_size = 1;
  opts.local_episodes = 20;
  opts.steps_per_contact = 7;
  Agent agent(opts, DenseHead(8, 2), stream_source(ds, partition(*ds, 1, 0)[0]));
  agent.start();
  REQUIRE(server.wait_for_devices(1, 3000ms));
  const auto report = server.run_round();

  LocalTrainer offline(to_head(quantize_f32(initial)), stream_source(ds, partition(*ds, 1, 0)[0]),
                       1, 20, kDefaultLearningRate);
  for (int k = 0; k < 7; ++k) REQUIRE(offline.step());
  CHECK(report.global == quantize_f32(to_blob(offline.head())));
  CHECK(agent.stats().samples_consumed >= 7);
  agent.stop();
  server.stop();
}

TEST_CASE("corrupted pushes never replace the agent head") {
  std::uint16_t port = 0;
  const int fd = net::listen_on("127.0.0.1", 0, port);
  const auto initial = blob_of(4, 2, 3);
  AgentOptions opts;
  opts.endpoint = Endpoint{"127.0.0.1", port};
  opts.device_id = 2;
  Agent agent(opts, DenseHead(4, 2), [] { return std::optional<EmbeddingSample>{}; });
  agent.start();

  net::Socket conn = net::accept_from(fd, 3000ms);
  REQUIRE(conn.valid());
  auto recv = [&] {
    std::vector<std::uint8_t> header(kMessageHeaderBytes);
    conn.recv_exact(header, 3000ms);
    const auto h = parse_message_header(header);
    Message m{h.type, h.device_id, std::vector<std::uint8_t>(h.body_length)};
    conn.recv_exact(m.body, 3000ms);
    return m;
  };
  CHECK(recv().type == MessageType::hello);
  conn.send_all(encode_message({MessageType::push_model, 2, {}}));
  conn.send_all(encode_message(model_message(2, initial)));
  const Message ack = recv();
  CHECK(ack.type == MessageType::ack);
  CHECK(agent.snapshot() == initial);

  auto corrupt = model_message(2, blob_of(4, 2, 8));
  corrupt.body[8 * 7 + 5] ^= 0x10;
  conn.send_all(encode_message({MessageType::push_model, 2, {}}));
  conn.send_all(encode_message(corrupt));
  CHECK(recv().type == MessageType::error);
  CHECK(agent.snapshot() == initial);
  CHECK(agent.stats().models_rejected == 1);

  conn.send_all(encode_message({MessageType::pull_model, 2, {}}));
  const Message reply = recv();
  CHECK(reply.type == MessageType::model_data);
  CHECK(unpack_model(reply.body) == initial);
  agent.stop();
  ::close(fd);
}

TEST_CASE("agent gives up after bounded reconnects") {
  AgentOptions opts;
  opts.endpoint = Endpoint{"127.0.0.1", 1};  // nothing listens here
  opts.max_reconnects = 2;
  opts.backoff = 5ms;
  auto ds = std::make_shared<const EmbeddingDataset>(synth_separable(4, 2, 10, 1.0, 1));
  Agent agent(opts, DenseHead(4, 2), stream_source(ds, partition(*ds, 1, 0)[0]));
  agent.start();
  // Training continues offline until the stream runs out.
  for (int i = 0; i < 200 && !agent.stats().exhausted; ++i) std::this_thread::sleep_for(10ms);
  CHECK(agent.stats().exhausted);
  CHECK(agent.stats().samples_consumed == 10);
  CHECK_FALSE(agent.stats().connected);
  agent.stop();
}
