#pragma once

// Embedding datasets, one-shot per-device streams and synthetic generators.
//
// On-disk format (all integers little-endian):
//   header   "FTED" | u32 E | u32 C | u32 n
//   record   u8 split (0 train, 1 validation) | u8 label | 2 zero bytes |
//            E x float32 features
// Features are float32 on disk. Generators round their output to float32 so
// that a save/load cycle is the identity.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fedtl/nn.hpp"

namespace fedtl {

enum class Split : std::uint8_t { train = 0, validation = 1 };

struct EmbeddingDataset {
  std::string name;
  std::size_t embedding_dim = 0;
  std::size_t num_classes = 0;
  std::vector<EmbeddingSample> samples;
  std::vector<Split> splits;  // parallel to samples

  std::size_t size() const noexcept { return samples.size(); }
  std::vector<std::size_t> indices(Split split) const;
  std::vector<EmbeddingSample> subset(Split split) const;

  /// Throws ShapeError / IndexError if any sample violates E, C or the
  /// samples/splits lengths differ.
  void validate() const;

  friend bool operator==(const EmbeddingDataset&,
                         const EmbeddingDataset&) = default;
};

inline constexpr char kDatasetMagic[4] = {'F', 'T', 'E', 'D'};
inline constexpr std::size_t kDatasetHeaderBytes = 16;

std::vector<std::uint8_t> serialize_dataset(const EmbeddingDataset& dataset);
EmbeddingDataset parse_dataset(std::span<const std::uint8_t> bytes,
                               std::string name = {});

void save_dataset(const EmbeddingDataset& dataset,
                  const std::filesystem::path& path);
EmbeddingDataset load_dataset(const std::filesystem::path& path);

// A device's private, read-once view of the training pool. Indices refer to
// positions in EmbeddingDataset::samples.
class DeviceStream {
 public:
  DeviceStream(int device_id, std::vector<std::size_t> indices);

  int device_id() const noexcept { return device_id_; }
  std::span<const std::size_t> indices() const noexcept { return indices_; }
  std::size_t cursor() const noexcept { return cursor_; }
  std::size_t remaining() const noexcept { return indices_.size() - cursor_; }

  /// Yields the next `count` unseen indices and advances the cursor.
  /// Throws DataExhaustedError naming the device if fewer remain; the
  /// cursor is left untouched in that case.
  std::vector<std::size_t> take(std::size_t count);

 private:
  int device_id_;
  std::vector<std::size_t> indices_;
  std::size_t cursor_ = 0;
};

/// Seeded shuffle of the train split, cut into N contiguous shards of
/// floor(n / N) indices; the last shard also receives the remainder.
std::vector<DeviceStream> partition(const EmbeddingDataset& dataset,
                                    std::size_t num_devices,
                                    std::uint64_t seed);

/// Gathers samples of `dataset` by index.
std::vector<EmbeddingSample> gather(const EmbeddingDataset& dataset,
                                    std::span<const std::size_t> indices);

/// Gaussian clusters around C class centroids that are pairwise at least
/// `margin` apart, with per-coordinate noise sigma = margin / 6. Labels cycle
/// through the classes so counts differ by at most one; sample order is
/// shuffled. All samples are tagged train.
EmbeddingDataset synth_separable(std::size_t embedding_dim,
                                 std::size_t num_classes, std::size_t count,
                                 double margin, std::uint64_t seed);

/// Like synth_separable restricted to a seeded subset of `active_dims`
/// coordinates; every other coordinate is exactly zero in every sample.
EmbeddingDataset synth_sparse(std::size_t embedding_dim,
                              std::size_t active_dims,
                              std::size_t num_classes, std::size_t count,
                              std::uint64_t seed, double margin = 1.0);

/// Source task for transfer experiments. Class 0 (the "background" class)
/// keeps the centroid of synth_separable(..., target_seed); every other class
/// gets a fresh centroid orthogonal to all target centroids, so the tasks are
/// related but distinct. Needs 2C - 1 <= E, otherwise the task is unrelated.
EmbeddingDataset synth_source_task(std::size_t embedding_dim,
                                   std::size_t num_classes, std::size_t count,
                                   double margin, std::uint64_t target_seed,
                                   std::uint64_t source_seed);

/// synth_source_task inside the active coordinates of
/// synth_sparse(..., target_seed).
EmbeddingDataset synth_sparse_source_task(std::size_t embedding_dim,
                                          std::size_t active_dims,
                                          std::size_t num_classes,
                                          std::size_t count, double margin,
                                          std::uint64_t target_seed,
                                          std::uint64_t source_seed);

/// Coordinates that are non-zero in at least one sample.
std::vector<std::size_t> active_dimensions(const EmbeddingDataset& dataset);

/// Retags the last `count` samples as validation.
void hold_out_tail(EmbeddingDataset& dataset, std::size_t count);

}  // namespace fedtl
