#include "fedtl/federation.hpp"

#include <algorithm>
#include <exception>
#include <string>
#include <thread>

#include "fedtl/errors.hpp"

namespace fedtl {

void ModelBlob::validate() const {
  if (embedding_dim == 0 || num_classes == 0) {
    throw ShapeError("model blob dimensions must be positive");
  }
  if (values.size() != expected_size()) {
    throw ShapeError("model blob has " + std::to_string(values.size()) +
                     " values, expected " + std::to_string(expected_size()));
  }
}

ModelBlob to_blob(const DenseHead& head) {
  ModelBlob blob{head.embedding_dim(), head.num_classes(), {}};
  blob.values.reserve(head.parameter_count());
  blob.values.insert(blob.values.end(), head.weights().begin(),
                     head.weights().end());
  blob.values.insert(blob.values.end(), head.bias().begin(), head.bias().end());
  return blob;
}

init::Pretrained pretrained(const ModelBlob& blob) {
  blob.validate();
  return init::Pretrained{blob.values};
}

DenseHead to_head(const ModelBlob& blob) {
  return init_head(blob.embedding_dim, blob.num_classes, pretrained(blob));
}

ModelBlob average_blobs(std::span<const ModelBlob> blobs) {
  if (blobs.empty()) throw UsageError("cannot average an empty list of blobs");
  const ModelBlob& first = blobs.front();
  first.validate();
  for (const auto& b : blobs) {
    if (b.embedding_dim != first.embedding_dim ||
        b.num_classes != first.num_classes) {
      throw ShapeError("cannot average blobs of different shapes");
    }
    b.validate();
  }
  // Extended-precision accumulation keeps sums of up to 2^11 equal values
  // exact, so averaging identical models returns them unchanged.
  ModelBlob out{first.embedding_dim, first.num_classes,
                std::vector<double>(first.values.size(), 0.0)};
  const auto n = static_cast<long double>(blobs.size());
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    long double sum = 0.0L;
    for (const auto& b : blobs) sum += b.values[i];
    out.values[i] = static_cast<double>(sum / n);
  }
  return out;
}

void RoundConfig::validate() const {
  if (num_devices == 0) throw UsageError("num_devices must be >= 1");
  if (batch_size == 0) throw UsageError("batch_size must be >= 1");
  if (local_episodes == 0) throw UsageError("local_episodes must be >= 1");
  if (epochs == 0) throw UsageError("epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw UsageError("learning_rate must be > 0");
}

std::vector<DeviceState> make_devices(std::vector<DeviceStream> streams,
                                      const DenseHead& initial) {
  std::vector<DeviceState> devices;
  devices.reserve(streams.size());
  for (auto& s : streams) devices.emplace_back(std::move(s), initial);
  return devices;
}

double evaluate(const DenseHead& head,
                std::span<const EmbeddingSample> samples) {
  if (samples.empty()) throw UsageError("cannot evaluate on an empty set");
  std::size_t correct = 0;
  for (const auto& s : samples) {
    if (s.label >= head.num_classes()) {
      throw IndexError("label " + std::to_string(s.label) + " out of range");
    }
    if (predict(head, s.features) == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

double evaluate(const ModelBlob& blob,
                std::span<const EmbeddingSample> samples) {
  return evaluate(to_head(blob), samples);
}

namespace {

double local_step(DeviceState& device, const DenseHead& global,
                  const RoundConfig& cfg, const EmbeddingDataset& pool) {
  const auto batch = gather(pool, device.stream.take(cfg.batch_size));
  device.head = train_batch(global, batch, cfg.learning_rate,
                            cfg.local_episodes);
  device.samples_seen += batch.size();
  return evaluate(device.head, batch);
}

}  // namespace

RoundResult federated_round(std::span<DeviceState> devices,
                            const ModelBlob& global, const RoundConfig& cfg,
                            const EmbeddingDataset& pool,
                            std::span<const EmbeddingSample> val,
                            Execution execution) {
  cfg.validate();
  if (devices.empty()) throw UsageError("a round needs at least one device");
  if (val.empty()) throw UsageError("validation set is empty");
  for (const auto& d : devices) {
    if (d.stream.remaining() < cfg.batch_size) {
      throw DataExhaustedError(
          d.device_id, "device " + std::to_string(d.device_id) + " has " +
                           std::to_string(d.stream.remaining()) +
                           " unseen samples, round needs " +
                           std::to_string(cfg.batch_size));
    }
  }
  const DenseHead start = to_head(global);
  if (start.embedding_dim() != pool.embedding_dim ||
      start.num_classes() != pool.num_classes) {
    throw ShapeError("global model shape does not match the data");
  }

  RoundResult result;
  result.train_accuracies.assign(devices.size(), 0.0);
  if (execution == Execution::serial || devices.size() == 1) {
    for (std::size_t i = 0; i < devices.size(); ++i) {
      result.train_accuracies[i] = local_step(devices[i], start, cfg, pool);
    }
  } else {
    std::vector<std::exception_ptr> failures(devices.size());
    {
      std::vector<std::jthread> workers;
      workers.reserve(devices.size());
      for (std::size_t i = 0; i < devices.size(); ++i) {
        workers.emplace_back([&, i] {
          try {
            result.train_accuracies[i] = local_step(devices[i], start, cfg, pool);
          } catch (...) {
            failures[i] = std::current_exception();
          }
        });
      }
    }
    for (const auto& f : failures) {
      if (f) std::rethrow_exception(f);
    }
  }

  // Reduction order is the device order, independent of execution mode.
  std::vector<ModelBlob> locals;
  locals.reserve(devices.size());
  for (const auto& d : devices) locals.push_back(to_blob(d.head));
  result.global = average_blobs(locals);
  result.val_accuracy = evaluate(result.global, val);
  return result;
}

TrainingRun run_training(const RoundConfig& cfg,
                         std::vector<DeviceStream> partitions,
                         const EmbeddingDataset& pool,
                         std::span<const EmbeddingSample> val,
                         const InitMode& init, Execution execution) {
  cfg.validate();
  if (partitions.size() != cfg.num_devices) {
    throw UsageError("expected " + std::to_string(cfg.num_devices) +
                     " partitions, got " + std::to_string(partitions.size()));
  }
  const DenseHead initial =
      init_head(pool.embedding_dim, pool.num_classes, init);
  auto devices = make_devices(std::move(partitions), initial);

  TrainingRun run;
  run.history.reserve(cfg.epochs);
  run.globals.reserve(cfg.epochs);
  ModelBlob global = to_blob(initial);
  std::size_t seen = 0;
  for (std::size_t t = 0; t < cfg.epochs; ++t) {
    RoundResult round =
        federated_round(devices, global, cfg, pool, val, execution);
    seen += cfg.num_devices * cfg.batch_size;
    double train_sum = 0.0;
    for (double a : round.train_accuracies) train_sum += a;
    run.history.push_back(
        {round.val_accuracy,
         train_sum / static_cast<double>(round.train_accuracies.size()), seen});
    global = std::move(round.global);
    run.globals.push_back(global);
  }
  return run;
}

}  // namespace fedtl
