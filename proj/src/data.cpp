#include "fedtl/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include "bytes.hpp"
#include "fedtl/errors.hpp"

namespace fedtl {

std::vector<std::size_t> EmbeddingDataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == split) out.push_back(i);
  }
  return out;
}

std::vector<EmbeddingSample> EmbeddingDataset::subset(Split split) const {
  return gather(*this, indices(split));
}

void EmbeddingDataset::validate() const {
  if (embedding_dim == 0 || num_classes == 0) {
    throw ShapeError("dataset dimensions must be positive");
  }
  if (splits.size() != samples.size()) {
    throw ShapeError("dataset split tags do not match sample count");
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].features.size() != embedding_dim) {
      throw ShapeError("sample " + std::to_string(i) + " has " +
                       std::to_string(samples[i].features.size()) +
                       " features, expected " + std::to_string(embedding_dim));
    }
    if (samples[i].label >= num_classes) {
      throw IndexError("sample " + std::to_string(i) + " label " +
                       std::to_string(samples[i].label) + " out of range");
    }
  }
}

std::vector<std::uint8_t> serialize_dataset(const EmbeddingDataset& dataset) {
  dataset.validate();
  if (dataset.embedding_dim > UINT32_MAX || dataset.num_classes > 256 ||
      dataset.size() > UINT32_MAX) {
    throw EncodingError("dataset does not fit the file format limits");
  }
  std::vector<std::uint8_t> out;
  out.reserve(kDatasetHeaderBytes +
              dataset.size() * (4 + 4 * dataset.embedding_dim));
  out.insert(out.end(), std::begin(kDatasetMagic), std::end(kDatasetMagic));
  bytes::put_u32(out, static_cast<std::uint32_t>(dataset.embedding_dim));
  bytes::put_u32(out, static_cast<std::uint32_t>(dataset.num_classes));
  bytes::put_u32(out, static_cast<std::uint32_t>(dataset.size()));
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    bytes::put_u8(out, static_cast<std::uint8_t>(dataset.splits[i]));
    bytes::put_u8(out, static_cast<std::uint8_t>(dataset.samples[i].label));
    bytes::put_u16(out, 0);
    for (double v : dataset.samples[i].features) {
      bytes::put_f32(out, static_cast<float>(v));
    }
  }
  return out;
}

EmbeddingDataset parse_dataset(std::span<const std::uint8_t> in,
                               std::string name) {
  if (in.size() < kDatasetHeaderBytes) {
    throw ParseError(in.size(), "dataset header truncated: " +
                                    std::to_string(in.size()) + " bytes");
  }
  if (!std::equal(std::begin(kDatasetMagic), std::end(kDatasetMagic),
                  in.begin())) {
    throw ParseError(0, "bad dataset magic, expected \"FTED\"");
  }
  EmbeddingDataset ds;
  ds.name = std::move(name);
  ds.embedding_dim = bytes::get_u32(in, 4);
  ds.num_classes = bytes::get_u32(in, 8);
  const std::size_t count = bytes::get_u32(in, 12);
  if (ds.embedding_dim == 0) throw ParseError(4, "embedding dim is zero");
  if (ds.num_classes == 0) throw ParseError(8, "class count is zero");

  const std::size_t record_bytes = 4 + 4 * ds.embedding_dim;
  ds.samples.reserve(std::min(count, in.size() / record_bytes));
  ds.splits.reserve(ds.samples.capacity());
  std::size_t at = kDatasetHeaderBytes;
  for (std::size_t r = 0; r < count; ++r) {
    const std::string where = "record " + std::to_string(r) + " (offset " +
                              std::to_string(at) + ")";
    if (in.size() - at < record_bytes) {
      throw ParseError(at, where + " truncated: " +
                               std::to_string(in.size() - at) +
                               " bytes left, expected " +
                               std::to_string(record_bytes) + " for E=" +
                               std::to_string(ds.embedding_dim));
    }
    const std::uint8_t split = in[at];
    const std::uint8_t label = in[at + 1];
    if (split > 1) {
      throw ParseError(at, where + ": unknown split tag " +
                               std::to_string(split));
    }
    if (label >= ds.num_classes) {
      throw ParseError(at + 1, where + ": label " + std::to_string(label) +
                                   " out of range for C=" +
                                   std::to_string(ds.num_classes));
    }
    if (in[at + 2] != 0 || in[at + 3] != 0) {
      throw ParseError(at + 2, where + ": non-zero padding");
    }
    EmbeddingSample sample;
    sample.label = label;
    sample.features.resize(ds.embedding_dim);
    for (std::size_t e = 0; e < ds.embedding_dim; ++e) {
      const float v = bytes::get_f32(in, at + 4 + 4 * e);
      if (!std::isfinite(v)) {
        throw ParseError(at + 4 + 4 * e,
                         where + ": non-finite feature " + std::to_string(e));
      }
      sample.features[e] = v;
    }
    ds.samples.push_back(std::move(sample));
    ds.splits.push_back(static_cast<Split>(split));
    at += record_bytes;
  }
  if (at != in.size()) {
    throw ParseError(at, std::to_string(in.size() - at) +
                             " trailing bytes after " + std::to_string(count) +
                             " records");
  }
  return ds;
}

void save_dataset(const EmbeddingDataset& dataset,
                  const std::filesystem::path& path) {
  const auto data = serialize_dataset(dataset);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

EmbeddingDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  return parse_dataset(data, path.stem().string());
}

DeviceStream::DeviceStream(int device_id, std::vector<std::size_t> indices)
    : device_id_(device_id), indices_(std::move(indices)) {}

std::vector<std::size_t> DeviceStream::take(std::size_t count) {
  if (count > remaining()) {
    throw DataExhaustedError(
        device_id_, "device " + std::to_string(device_id_) + " has " +
                        std::to_string(remaining()) +
                        " unseen samples, needs " + std::to_string(count));
  }
  const auto first = indices_.begin() + static_cast<std::ptrdiff_t>(cursor_);
  std::vector<std::size_t> out(first,
                               first + static_cast<std::ptrdiff_t>(count));
  cursor_ += count;
  return out;
}

std::vector<DeviceStream> partition(const EmbeddingDataset& dataset,
                                    std::size_t num_devices,
                                    std::uint64_t seed) {
  if (num_devices == 0) throw UsageError("need at least one device");
  auto pool = dataset.indices(Split::train);
  if (num_devices > pool.size()) {
    throw UsageError("cannot split " + std::to_string(pool.size()) +
                     " training samples across " +
                     std::to_string(num_devices) + " devices");
  }
  std::mt19937_64 rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);

  const std::size_t shard = pool.size() / num_devices;
  std::vector<DeviceStream> streams;
  streams.reserve(num_devices);
  for (std::size_t d = 0; d < num_devices; ++d) {
    const auto first = pool.begin() + static_cast<std::ptrdiff_t>(d * shard);
    const auto last = d + 1 == num_devices
                          ? pool.end()
                          : first + static_cast<std::ptrdiff_t>(shard);
    streams.emplace_back(static_cast<int>(d),
                         std::vector<std::size_t>(first, last));
  }
  return streams;
}

std::vector<EmbeddingSample> gather(const EmbeddingDataset& dataset,
                                    std::span<const std::size_t> indices) {
  std::vector<EmbeddingSample> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(dataset.samples.at(i));
  return out;
}

namespace {

using Centroids = std::vector<std::vector<double>>;

// Extends `basis` (orthonormal rows) with fresh random orthonormal directions
// until it holds `count` rows.
void extend_orthonormal(Centroids& basis, std::size_t dim, std::size_t count,
                        std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  while (basis.size() < count) {
    std::vector<double> v(dim);
    for (double& x : v) x = normal(rng);
    for (const auto& b : basis) {
      const double proj = std::inner_product(v.begin(), v.end(), b.begin(), 0.0);
      for (std::size_t i = 0; i < dim; ++i) v[i] -= proj * b[i];
    }
    const double norm = std::sqrt(std::inner_product(v.begin(), v.end(),
                                                     v.begin(), 0.0));
    if (norm < 1e-6) continue;
    for (double& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
}

// Orthonormal directions scaled by margin/sqrt(2) sit exactly `margin`
// apart; the small inflation absorbs rounding.
Centroids scale_centroids(Centroids basis, double margin) {
  const double scale = margin / std::sqrt(2.0) * (1.0 + 1e-9);
  for (auto& b : basis) {
    for (double& x : b) x *= scale;
  }
  return basis;
}

Centroids orthogonal_centroids(std::size_t dim, std::size_t classes,
                               double margin, std::mt19937_64& rng) {
  Centroids basis;
  extend_orthonormal(basis, dim, classes, rng);
  return scale_centroids(std::move(basis), margin);
}

Centroids packed_centroids(std::size_t dim, std::size_t classes, double margin,
                           std::mt19937_64& rng) {
  double radius = margin * static_cast<double>(classes);
  for (;;) {
    std::uniform_real_distribution<double> box(-radius, radius);
    Centroids out;
    for (int attempt = 0; attempt < 10000 && out.size() < classes; ++attempt) {
      std::vector<double> c(dim);
      for (double& x : c) x = box(rng);
      const bool clear = std::all_of(out.begin(), out.end(), [&](const auto& o) {
        double d2 = 0.0;
        for (std::size_t i = 0; i < dim; ++i) d2 += (c[i] - o[i]) * (c[i] - o[i]);
        return d2 >= margin * margin;
      });
      if (clear) out.push_back(std::move(c));
    }
    if (out.size() == classes) return out;
    radius *= 2.0;
  }
}

}  // namespace

namespace {

void check_synth_args(std::size_t embedding_dim, std::size_t num_classes,
                      double margin) {
  if (embedding_dim == 0 || num_classes == 0) {
    throw UsageError("synthetic dataset dimensions must be positive");
  }
  if (!(margin > 0.0) || !std::isfinite(margin)) {
    throw UsageError("margin must be positive");
  }
}

Centroids draw_centroids(std::size_t dim, std::size_t classes, double margin,
                         std::mt19937_64& rng) {
  return classes <= dim ? orthogonal_centroids(dim, classes, margin, rng)
                        : packed_centroids(dim, classes, margin, rng);
}

EmbeddingDataset sample_clusters(const Centroids& centroids, std::size_t count,
                                 double margin, std::mt19937_64& rng) {
  const std::size_t dim = centroids.front().size();
  std::normal_distribution<double> noise(0.0, margin / 6.0);
  EmbeddingDataset ds;
  ds.name = "synth-separable";
  ds.embedding_dim = dim;
  ds.num_classes = centroids.size();
  ds.samples.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto& s = ds.samples[i];
    s.label = i % centroids.size();
    s.features.resize(dim);
    for (std::size_t e = 0; e < dim; ++e) {
      s.features[e] = static_cast<float>(centroids[s.label][e] + noise(rng));
    }
  }
  std::shuffle(ds.samples.begin(), ds.samples.end(), rng);
  ds.splits.assign(count, Split::train);
  return ds;
}

std::vector<std::size_t> sparse_dims(std::size_t embedding_dim,
                                     std::size_t active_dims,
                                     std::uint64_t seed) {
  if (active_dims == 0 || active_dims > embedding_dim) {
    throw UsageError("active dimension count " + std::to_string(active_dims) +
                     " must lie in [1, " + std::to_string(embedding_dim) + "]");
  }
  std::vector<std::size_t> dims(embedding_dim);
  std::iota(dims.begin(), dims.end(), std::size_t{0});
  std::mt19937_64 pick(seed ^ 0x5eed5a2eULL);
  std::shuffle(dims.begin(), dims.end(), pick);
  dims.resize(active_dims);
  std::sort(dims.begin(), dims.end());
  return dims;
}

EmbeddingDataset widen(EmbeddingDataset dense, std::size_t embedding_dim,
                       std::span<const std::size_t> dims) {
  EmbeddingDataset ds;
  ds.name = "synth-sparse";
  ds.embedding_dim = embedding_dim;
  ds.num_classes = dense.num_classes;
  ds.splits = std::move(dense.splits);
  ds.samples.reserve(dense.samples.size());
  for (auto& s : dense.samples) {
    EmbeddingSample wide;
    wide.label = s.label;
    wide.features.assign(embedding_dim, 0.0);
    for (std::size_t k = 0; k < dims.size(); ++k) {
      wide.features[dims[k]] = s.features[k];
    }
    ds.samples.push_back(std::move(wide));
  }
  return ds;
}

}  // namespace

EmbeddingDataset synth_separable(std::size_t embedding_dim,
                                 std::size_t num_classes, std::size_t count,
                                 double margin, std::uint64_t seed) {
  check_synth_args(embedding_dim, num_classes, margin);
  std::mt19937_64 rng(seed);
  const Centroids centroids =
      draw_centroids(embedding_dim, num_classes, margin, rng);
  return sample_clusters(centroids, count, margin, rng);
}

EmbeddingDataset synth_source_task(std::size_t embedding_dim,
                                   std::size_t num_classes, std::size_t count,
                                   double margin, std::uint64_t target_seed,
                                   std::uint64_t source_seed) {
  check_synth_args(embedding_dim, num_classes, margin);
  std::mt19937_64 rng(source_seed);
  if (2 * num_classes - 1 > embedding_dim) {
    // No room for fresh orthogonal classes: fall back to an unrelated task.
    return sample_clusters(
        draw_centroids(embedding_dim, num_classes, margin, rng), count, margin,
        rng);
  }
  // Same draws as synth_separable(target_seed) up to the centroids.
  std::mt19937_64 target_rng(target_seed);
  Centroids basis;
  extend_orthonormal(basis, embedding_dim, num_classes, target_rng);
  extend_orthonormal(basis, embedding_dim, 2 * num_classes - 1, rng);
  Centroids chosen{basis.front()};
  chosen.insert(chosen.end(), basis.begin() + static_cast<std::ptrdiff_t>(num_classes),
                basis.end());
  return sample_clusters(scale_centroids(std::move(chosen), margin), count,
                         margin, rng);
}

EmbeddingDataset synth_sparse(std::size_t embedding_dim,
                              std::size_t active_dims,
                              std::size_t num_classes, std::size_t count,
                              std::uint64_t seed, double margin) {
  const auto dims = sparse_dims(embedding_dim, active_dims, seed);
  return widen(synth_separable(active_dims, num_classes, count, margin, seed),
               embedding_dim, dims);
}

EmbeddingDataset synth_sparse_source_task(std::size_t embedding_dim,
                                          std::size_t active_dims,
                                          std::size_t num_classes,
                                          std::size_t count, double margin,
                                          std::uint64_t target_seed,
                                          std::uint64_t source_seed) {
  const auto dims = sparse_dims(embedding_dim, active_dims, target_seed);
  return widen(synth_source_task(active_dims, num_classes, count, margin,
                                 target_seed, source_seed),
               embedding_dim, dims);
}

std::vector<std::size_t> active_dimensions(const EmbeddingDataset& dataset) {
  std::vector<std::size_t> out;
  for (std::size_t e = 0; e < dataset.embedding_dim; ++e) {
    const bool nonzero = std::any_of(
        dataset.samples.begin(), dataset.samples.end(),
        [e](const EmbeddingSample& s) { return s.features[e] != 0.0; });
    if (nonzero) out.push_back(e);
  }
  return out;
}

void hold_out_tail(EmbeddingDataset& dataset, std::size_t count) {
  if (count > dataset.size()) {
    throw UsageError("cannot hold out " + std::to_string(count) + " of " +
                     std::to_string(dataset.size()) + " samples");
  }
  std::fill(dataset.splits.end() - static_cast<std::ptrdiff_t>(count),
            dataset.splits.end(), Split::validation);
}

}  // namespace fedtl
