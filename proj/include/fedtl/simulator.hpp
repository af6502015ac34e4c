#pragma once

// Experiment harness: repeated seeded FedAvg runs over one swept parameter,
// aggregated to per-epoch mean and standard deviation, emitted as CSV.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fedtl/data.hpp"
#include "fedtl/federation.hpp"

namespace fedtl {

enum class SweepAxis { devices, batch_size, local_episodes, init_mode };
enum class InitKind { random, zeros, pretrained };

std::string_view to_string(SweepAxis axis) noexcept;
std::string_view to_string(InitKind kind) noexcept;
SweepAxis parse_sweep_axis(std::string_view text);
InitKind parse_init_kind(std::string_view text);

struct SyntheticSource {
  enum class Kind { separable, sparse };
  Kind kind = Kind::separable;
  std::size_t embedding_dim = kPerfMobilenet.embedding_dim;
  std::size_t num_classes = kPerfMobilenet.num_classes;
  double margin = 1.0;
  std::size_t active_dims = 16;  // sparse only
  std::size_t validation_size = 1000;

  friend bool operator==(const SyntheticSource&,
                         const SyntheticSource&) = default;
};

struct FileSource {
  std::filesystem::path dataset;
  /// Encoded model used for pretrained init; required only for that mode.
  std::optional<std::filesystem::path> pretrained_model;

  friend bool operator==(const FileSource&, const FileSource&) = default;
};

using DataSource = std::variant<SyntheticSource, FileSource>;
using SweepValue = std::variant<std::size_t, InitKind>;

std::string to_string(const SweepValue& value);

struct ExperimentConfig {
  std::string name = "custom";
  RoundConfig base;
  std::size_t repetitions = 10;
  std::uint64_t base_seed = 0;
  InitKind init = InitKind::random;
  DataSource source = SyntheticSource{};
  SweepAxis axis = SweepAxis::devices;
  std::vector<SweepValue> values = {std::size_t{2}};
  /// Worker threads for repetitions; results do not depend on it.
  std::size_t jobs = 1;

  void validate() const;
  /// Round configuration and init mode for one sweep value.
  RoundConfig round_for(const SweepValue& value) const;
  InitKind init_for(const SweepValue& value) const;

  friend bool operator==(const ExperimentConfig&,
                         const ExperimentConfig&) = default;
};

struct EpochStats {
  std::size_t epoch = 0;  // 0-based round index
  std::size_t examples_seen = 0;
  double val_mean = 0.0;
  double val_std = 0.0;
  double train_mean = 0.0;
  double train_std = 0.0;
};

struct SweepPoint {
  SweepValue value;
  std::vector<EpochStats> epochs;
};

struct SweepResult {
  SweepAxis axis = SweepAxis::devices;
  std::vector<SweepPoint> points;
};

/// Seed offset separating the pretraining source task from the target task.
inline constexpr std::uint64_t kSourceTaskSeedOffset = 0x9e3779b97f4a7c15ULL;

/// Dataset for one repetition of one sweep value: `train_needed` training
/// samples plus the configured validation tail for synthetic sources, or the
/// file contents for file sources.
EmbeddingDataset materialize(const DataSource& source,
                             std::size_t train_needed, std::uint64_t seed);

/// Head trained centrally, one pass, on a synthetic source task drawn with
/// seed + kSourceTaskSeedOffset; stands in for a head pretrained on a
/// different classification problem over the same embedding space.
ModelBlob pretrain_source_head(const SyntheticSource& source,
                               const RoundConfig& cfg, std::uint64_t seed);

/// Per-repetition training history for one sweep value.
TrainingRun run_repetition(const ExperimentConfig& cfg,
                           const SweepValue& value, std::uint64_t seed);

SweepResult run_sweep(const ExperimentConfig& cfg);

/// Population mean and standard deviation.
std::pair<double, double> mean_std(std::span<const double> values);

inline constexpr std::string_view kCsvHeader =
    "sweep_param,sweep_value,epoch,examples_seen,val_acc_mean,val_acc_std,"
    "train_acc_mean,train_acc_std";

std::string format_csv(const SweepResult& result);
void emit_csv(const SweepResult& result, const std::filesystem::path& path);
SweepResult parse_csv(std::string_view text);

/// Named experiment presets `fig1`..`fig4`.
std::map<std::string, ExperimentConfig> default_presets();

/// Flat `key = value` configuration. Unknown keys are a ParseError naming
/// the line. Keys: name, devices, batch_size, local_episodes, learning_rate,
/// epochs, repetitions, seed, init, jobs, data (synthetic | sparse | path),
/// pretrained_model, dim, classes, margin, active_dims, validation_size,
/// sweep, sweep_values (comma separated).
ExperimentConfig parse_config(std::string_view text,
                              ExperimentConfig base = {});
ExperimentConfig load_config(const std::filesystem::path& path,
                             ExperimentConfig base = {});
/// Applies a single key/value pair; shared by file parsing and CLI overrides.
void apply_setting(ExperimentConfig& cfg, std::string_view key,
                   std::string_view value);
/// Full resolved configuration in the same key = value format.
std::string describe(const ExperimentConfig& cfg);

}  // namespace fedtl
