#pragma once

// Fully-connected classification head trained on top of frozen embeddings.
//
// Parameters are held in float64. Weights are stored row-major by class, so
// row c (length E) is the weight vector feeding logit c. This is also the
// canonical flattening order used by ModelBlob and the wire codec.

#include <cstddef>
#include <cstdint>
#include <span>
#include <variant>
#include <vector>

namespace fedtl {

struct EmbeddingSample {
  std::vector<double> features;
  std::size_t label = 0;

  friend bool operator==(const EmbeddingSample&,
                         const EmbeddingSample&) = default;
};

class DenseHead {
 public:
  DenseHead(std::size_t embedding_dim, std::size_t num_classes);

  std::size_t embedding_dim() const noexcept { return embedding_dim_; }
  std::size_t num_classes() const noexcept { return num_classes_; }
  std::size_t parameter_count() const noexcept {
    return weights_.size() + bias_.size();
  }

  std::span<const double> weights() const noexcept { return weights_; }
  std::span<double> weights() noexcept { return weights_; }
  std::span<const double> bias() const noexcept { return bias_; }
  std::span<double> bias() noexcept { return bias_; }

  std::span<const double> row(std::size_t c) const {
    return std::span<const double>(weights_).subspan(c * embedding_dim_,
                                                     embedding_dim_);
  }
  double weight(std::size_t c, std::size_t e) const {
    return weights_[c * embedding_dim_ + e];
  }
  double& weight(std::size_t c, std::size_t e) {
    return weights_[c * embedding_dim_ + e];
  }

  friend bool operator==(const DenseHead&, const DenseHead&) = default;

 private:
  std::size_t embedding_dim_;
  std::size_t num_classes_;
  std::vector<double> weights_;
  std::vector<double> bias_;
};

struct Gradients {
  std::size_t embedding_dim = 0;
  std::size_t num_classes = 0;
  std::vector<double> d_weights;  // C x E, row-major
  std::vector<double> d_bias;     // C

  static Gradients zeros_like(const DenseHead& head);

  friend bool operator==(const Gradients&, const Gradients&) = default;
};

/// Probability clamp used by cross_entropy.
inline constexpr double kProbabilityFloor = 1e-12;

/// Default SGD learning rate.
inline constexpr double kDefaultLearningRate = 0.01;

std::vector<double> forward(const DenseHead& head, std::span<const double> x);

std::vector<double> softmax(std::span<const double> logits);

double cross_entropy(std::span<const double> probs, std::size_t label);

Gradients backward(const DenseHead& head, std::span<const double> x,
                   std::span<const double> probs, std::size_t label);

DenseHead sgd_step(const DenseHead& head, const Gradients& g, double lr);

/// In-place variant used by the training loops.
void apply_sgd(DenseHead& head, const Gradients& g, double lr);

/// Mean per-sample gradient of the batch loss at the current parameters.
Gradients batch_gradient(const DenseHead& head,
                         std::span<const EmbeddingSample> batch);

/// Runs `local_episodes` SGD steps, each on the mean gradient of the whole
/// batch evaluated at the current parameters.
DenseHead train_batch(const DenseHead& head,
                      std::span<const EmbeddingSample> batch, double lr,
                      std::size_t local_episodes);

/// Argmax of the logits; ties go to the lowest class index.
std::size_t predict(const DenseHead& head, std::span<const double> x);

/// Mean loss over a batch.
double batch_loss(const DenseHead& head,
                  std::span<const EmbeddingSample> batch);

namespace init {
struct Zeros {};
struct Random {
  std::uint64_t seed = 0;
};
struct Pretrained {
  std::vector<double> values;  // canonical order: weight rows, then bias
};
}  // namespace init

using InitMode = std::variant<init::Zeros, init::Random, init::Pretrained>;

/// Random mode draws i.i.d. uniform values in [-s, s], s = sqrt(6 / (E + C)).
DenseHead init_head(std::size_t embedding_dim, std::size_t num_classes,
                    const InitMode& mode);

/// Bytes needed to store the head's parameters as float32.
std::size_t footprint_bytes(std::size_t embedding_dim, std::size_t num_classes);

/// Model shapes of the two deployed extractors.
struct ModelShape {
  std::size_t embedding_dim;
  std::size_t num_classes;
};
inline constexpr ModelShape kPerfMobilenet{256, 2};
inline constexpr ModelShape kTfMobilenet{1280, 2};

}  // namespace fedtl
