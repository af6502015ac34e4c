#pragma once

// Federated averaging over dense heads under a one-shot data regime: every
// round each device pulls its next B unseen samples, trains locally, and the
// server replaces the global model with the uniform mean of device models.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fedtl/data.hpp"
#include "fedtl/nn.hpp"

namespace fedtl {

// Flat parameters in canonical order: weight rows by class, then bias.
struct ModelBlob {
  std::size_t embedding_dim = 0;
  std::size_t num_classes = 0;
  std::vector<double> values;

  std::size_t expected_size() const noexcept {
    return num_classes * embedding_dim + num_classes;
  }
  /// Throws ShapeError if values.size() != C*E + C or a dimension is zero.
  void validate() const;

  friend bool operator==(const ModelBlob&, const ModelBlob&) = default;
};

ModelBlob to_blob(const DenseHead& head);
DenseHead to_head(const ModelBlob& blob);
init::Pretrained pretrained(const ModelBlob& blob);

/// Element-wise mean. Values are summed in list order in long double, divided
/// by the list length and rounded once to double, so the result is
/// reproducible for a fixed order and exact for identical inputs.
ModelBlob average_blobs(std::span<const ModelBlob> blobs);

struct RoundConfig {
  std::size_t num_devices = 2;
  std::size_t batch_size = 20;
  std::size_t local_episodes = 5;
  double learning_rate = kDefaultLearningRate;
  std::size_t epochs = 100;

  void validate() const;
  friend bool operator==(const RoundConfig&, const RoundConfig&) = default;
};

struct DeviceState {
  DeviceState(DeviceStream stream, const DenseHead& head)
      : device_id(stream.device_id()), head(head), stream(std::move(stream)) {}

  int device_id;
  DenseHead head;
  DeviceStream stream;
  std::size_t samples_seen = 0;
};

/// Builds one DeviceState per stream, each holding a copy of `initial`.
std::vector<DeviceState> make_devices(std::vector<DeviceStream> streams,
                                      const DenseHead& initial);

enum class Execution { serial, parallel };

struct RoundResult {
  ModelBlob global;
  double val_accuracy = 0.0;
  /// Accuracy of each device's locally trained head on the batch it just
  /// consumed, in device order.
  std::vector<double> train_accuracies;
};

/// Fraction of samples whose argmax prediction equals the label.
double evaluate(const ModelBlob& blob, std::span<const EmbeddingSample> samples);
double evaluate(const DenseHead& head, std::span<const EmbeddingSample> samples);

/// One FedAvg round. Device streams index into `pool`. All devices are checked
/// for B unseen samples before any state changes.
RoundResult federated_round(std::span<DeviceState> devices,
                            const ModelBlob& global, const RoundConfig& cfg,
                            const EmbeddingDataset& pool,
                            std::span<const EmbeddingSample> val,
                            Execution execution = Execution::serial);

struct EpochRecord {
  double val_accuracy = 0.0;
  double train_accuracy = 0.0;  // mean over devices
  std::size_t examples_seen = 0;  // cumulative, across all devices
};

struct TrainingRun {
  std::vector<EpochRecord> history;
  std::vector<ModelBlob> globals;  // global model after each round
};

/// T rounds from an init_head-initialized global model.
TrainingRun run_training(const RoundConfig& cfg,
                         std::vector<DeviceStream> partitions,
                         const EmbeddingDataset& pool,
                         std::span<const EmbeddingSample> val,
                         const InitMode& init,
                         Execution execution = Execution::serial);

}  // namespace fedtl
