#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "fedtl/data.hpp"
#include "fedtl/errors.hpp"
#include "fedtl/federation.hpp"
#include "helpers.hpp"

using namespace fedtl;

namespace {

ModelBlob random_blob(std::size_t e, std::size_t c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  ModelBlob b{e, c, std::vector<double>(c * e + c)};
  for (double& v : b.values) v = u(rng);
  return b;
}

// Two-class pool, every sample tagged train.
EmbeddingDataset separable_pool(std::size_t n, std::uint64_t seed) {
  return synth_separable(16, 2, n, 1.0, seed);
}

}  // namespace

TEST_CASE("average_blobs against a per-index mean oracle") {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 5;
    std::vector<ModelBlob> blobs;
    for (std::size_t i = 0; i < n; ++i) blobs.push_back(random_blob(4, 2, rng));
    const auto avg = average_blobs(blobs);
    REQUIRE(avg.values.size() == 10);
    CHECK(avg.embedding_dim == 4);
    CHECK(avg.num_classes == 2);
    for (std::size_t k = 0; k < 10; ++k) {
      long double sum = 0.0L;
      for (std::size_t i = 0; i < n; ++i) sum += blobs[i].values[k];
      CHECK(avg.values[k] == static_cast<double>(sum / static_cast<long double>(n)));
    }
  }
}

TEST_CASE("average_blobs identity and symmetric pair") {
  std::mt19937_64 rng(2);
  const auto w = random_blob(5, 3, rng);
  CHECK(average_blobs(std::vector<ModelBlob>{w}) == w);
  ModelBlob neg = w;
  for (double& v : neg.values) v = -v;
  const auto zero = average_blobs(std::vector<ModelBlob>{w, neg});
  for (double v : zero.values) CHECK(v == 0.0);
  for (std::size_t n : {2u, 3u, 5u, 7u, 64u}) {
    CHECK(average_blobs(std::vector<ModelBlob>(n, w)) == w);
  }
}

TEST_CASE("average_blobs is permutation invariant within 1e-12") {
  std::mt19937_64 rng(23);
  std::vector<ModelBlob> blobs;
  for (int i = 0; i < 6; ++i) blobs.push_back(random_blob(3, 2, rng));
  const auto ref = average_blobs(blobs);
  for (int p = 0; p < 20; ++p) {
    std::shuffle(blobs.begin(), blobs.end(), rng);
    const auto got = average_blobs(blobs);
    for (std::size_t k = 0; k < ref.values.size(); ++k) {
      CHECK(std::abs(got.values[k] - ref.values[k]) <= 1e-12);
    }
  }
}

TEST_CASE("average_blobs errors") {
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(average_blobs(std::vector<ModelBlob>{}), UsageError);
  CHECK_THROWS_AS(average_blobs(std::vector<ModelBlob>{random_blob(3, 2, rng),
                                                       random_blob(4, 2, rng)}),
                  ShapeError);
  ModelBlob bad = random_blob(3, 2, rng);
  bad.values.pop_back();
  CHECK_THROWS_AS(average_blobs(std::vector<ModelBlob>{bad}), ShapeError);
}

TEST_CASE("blob and head conversions are inverse") {
  std::mt19937_64 rng(4);
  const auto h = fedtl::test::random_head(7, 3, rng);
  const auto blob = to_blob(h);
  CHECK(blob.values.size() == 24);
  CHECK(blob.values[7] == h.weight(1, 0));
  CHECK(blob.values[21] == h.bias()[0]);
  CHECK(to_head(blob) == h);
}

TEST_CASE("evaluate") {
  std::vector<EmbeddingSample> balanced;
  for (int i = 0; i < 10; ++i) {
    balanced.push_back({{static_cast<double>(i), 1.0}, static_cast<std::size_t>(i % 2)});
  }
  CHECK(evaluate(DenseHead(2, 2), balanced) == 0.5);

  // x0 > 0 means class 1.
  std::vector<EmbeddingSample> constructed{
      {{1.0, 0.0}, 1}, {{-1.0, 0.0}, 0}, {{2.0, 5.0}, 1}, {{-0.5, -3.0}, 0}};
  DenseHead sep(2, 2);
  sep.weight(1, 0) = 1.0;
  CHECK(evaluate(sep, constructed) == 1.0);

  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const auto h = fedtl::test::random_head(5, 4, rng);
    std::vector<EmbeddingSample> set;
    for (int i = 0; i < 50; ++i) set.push_back(fedtl::test::random_sample(5, 4, rng));
    std::size_t correct = 0;
    for (const auto& s : set) {
      std::size_t best = 0;
      double best_v = -1e300;
      for (std::size_t c = 0; c < 4; ++c) {
        double v = h.bias()[c];
        for (std::size_t e = 0; e < 5; ++e) v += h.weight(c, e) * s.features[e];
        if (v > best_v) best_v = v, best = c;
      }
      correct += best == s.label;
    }
    CHECK(evaluate(to_blob(h), set) == static_cast<double>(correct) / 50.0);
  }
  CHECK_THROWS_AS(evaluate(DenseHead(2, 2), std::vector<EmbeddingSample>{}),
                  UsageError);
}

TEST_CASE("single-device round equals plain train_batch") {
  const auto pool = separable_pool(100, 3);
  auto streams = partition(pool, 1, 9);
  const std::vector<std::size_t> first(streams[0].indices().begin(),
                                       streams[0].indices().begin() + 20);
  auto devices = make_devices(std::move(streams), DenseHead(16, 2));
  const ModelBlob start = to_blob(init_head(16, 2, init::Random{5}));
  RoundConfig cfg;
  cfg.num_devices = 1;
  const auto result = federated_round(devices, start, cfg, pool, pool.samples);
  const auto expected =
      train_batch(to_head(start), gather(pool, first), cfg.learning_rate, 5);
  CHECK(result.global == to_blob(expected));
  CHECK(devices[0].samples_seen == 20);
  CHECK(devices[0].stream.cursor() == 20);
  CHECK(result.train_accuracies.size() == 1);
}

TEST_CASE("identical device batches average to the same head") {
  const auto pool = separable_pool(40, 6);
  std::vector<std::size_t> idx(20);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<DeviceStream> streams{DeviceStream(0, idx), DeviceStream(1, idx)};
  auto devices = make_devices(std::move(streams), DenseHead(16, 2));
  RoundConfig cfg;
  const ModelBlob start = to_blob(init_head(16, 2, init::Random{1}));
  const auto result = federated_round(devices, start, cfg, pool, pool.samples);
  CHECK(result.global == to_blob(devices[0].head));
  CHECK(result.global == to_blob(devices[1].head));
}

TEST_CASE("round pre-checks data for all devices") {
  const auto pool = separable_pool(50, 2);
  auto devices = make_devices(partition(pool, 2, 1), DenseHead(16, 2));
  RoundConfig cfg;
  const auto start = to_blob(DenseHead(16, 2));
  federated_round(devices, start, cfg, pool, pool.samples);
  CHECK(devices[0].stream.remaining() == 5);
  try {
    federated_round(devices, start, cfg, pool, pool.samples);
    FAIL("expected DataExhaustedError");
  } catch (const DataExhaustedError& e) {
    CHECK(e.device_id() == 0);
  }
  CHECK(devices[0].stream.cursor() == 20);
  CHECK(devices[1].stream.cursor() == 20);
  CHECK_THROWS_AS(federated_round(devices, start, cfg, pool, {}), UsageError);
}

TEST_CASE("serial and parallel execution agree bitwise") {
  const auto pool = separable_pool(4 * 20 * 10, 12);
  const auto val = synth_separable(16, 2, 200, 1.0, 12).samples;
  RoundConfig cfg;
  cfg.num_devices = 4;
  cfg.epochs = 10;
  const auto serial = run_training(cfg, partition(pool, 4, 3), pool, val,
                                   init::Random{3}, Execution::serial);
  const auto parallel = run_training(cfg, partition(pool, 4, 3), pool, val,
                                     init::Random{3}, Execution::parallel);
  CHECK(serial.globals == parallel.globals);
}

TEST_CASE("run_training minimal configuration and determinism") {
  const auto pool = separable_pool(10, 8);
  RoundConfig cfg{1, 1, 1, 0.01, 1};
  const auto run = run_training(cfg, partition(pool, 1, 0), pool, pool.samples,
                                init::Zeros{});
  REQUIRE(run.history.size() == 1);
  const auto first = partition(pool, 1, 0)[0].take(1);
  const auto expected = sgd_step(DenseHead(16, 2),
                                 batch_gradient(DenseHead(16, 2), gather(pool, first)),
                                 0.01);
  CHECK(run.globals[0] == to_blob(expected));
  CHECK(run.history[0].val_accuracy == evaluate(expected, pool.samples));
  CHECK(run.history[0].examples_seen == 1);

  RoundConfig c2;
  c2.epochs = 5;
  const auto big = separable_pool(400, 1);
  const auto a = run_training(c2, partition(big, 2, 4), big, big.samples, init::Random{1});
  const auto b = run_training(c2, partition(big, 2, 4), big, big.samples, init::Random{1});
  CHECK(a.globals == b.globals);
  for (std::size_t t = 0; t < 5; ++t) {
    CHECK(a.history[t].val_accuracy == b.history[t].val_accuracy);
    CHECK(a.history[t].examples_seen == 2 * 20 * (t + 1));
  }
}

TEST_CASE("one-shot accounting over a full run") {
  const auto pool = separable_pool(3 * 5 * 8, 2);
  auto streams = partition(pool, 3, 6);
  std::set<std::size_t> all;
  for (const auto& s : streams) all.insert(s.indices().begin(), s.indices().end());
  CHECK(all.size() == pool.size());

  RoundConfig cfg{3, 5, 2, 0.01, 8};
  auto devices = make_devices(std::move(streams), DenseHead(16, 2));
  ModelBlob global = to_blob(DenseHead(16, 2));
  for (std::size_t t = 0; t < cfg.epochs; ++t) {
    global = federated_round(devices, global, cfg, pool, pool.samples).global;
    for (const auto& d : devices) CHECK(d.samples_seen == 5 * (t + 1));
  }
  std::size_t consumed = 0;
  for (auto& d : devices) {
    consumed += d.stream.cursor();
    CHECK_THROWS_AS(d.stream.take(1), DataExhaustedError);
  }
  CHECK(consumed == 3 * 5 * 8);
}

TEST_CASE("federated training on separable data") {
  const std::size_t rounds = 50;
  auto ds = synth_separable(64, 2, 2 * 20 * rounds + 500, 1.0, 21);
  hold_out_tail(ds, 500);
  const auto val = ds.subset(Split::validation);
  RoundConfig cfg;
  cfg.epochs = rounds;
  const auto run = run_training(cfg, partition(ds, 2, 21), ds, val, init::Zeros{});
  CHECK(run.history.back().val_accuracy >= 0.95);

  // Centralized oracle on the pooled stream reaches the same threshold.
  RoundConfig central = cfg;
  central.num_devices = 1;
  central.batch_size = 40;
  const auto pooled = run_training(central, partition(ds, 1, 21), ds, val, init::Zeros{});
  CHECK(pooled.history.back().val_accuracy >= 0.95);
  CHECK(std::abs(run.history.back().val_accuracy -
                 pooled.history.back().val_accuracy) <= 0.05);
}

TEST_CASE("round config validation") {
  RoundConfig cfg;
  cfg.num_devices = 0;
  CHECK_THROWS_AS(cfg.validate(), UsageError);
  cfg = {};
  cfg.learning_rate = 0.0;
  CHECK_THROWS_AS(cfg.validate(), UsageError);
  cfg = {};
  cfg.local_episodes = 0;
  CHECK_THROWS_AS(cfg.validate(), UsageError);
}
