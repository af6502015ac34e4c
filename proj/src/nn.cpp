#include "fedtl/nn.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "fedtl/errors.hpp"

namespace fedtl {
namespace {

void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(what) + " contains a non-finite value");
    }
  }
}

void require_input(const DenseHead& head, std::span<const double> x) {
  if (x.size() != head.embedding_dim()) {
    throw ShapeError("input has " + std::to_string(x.size()) +
                     " features, head expects " +
                     std::to_string(head.embedding_dim()));
  }
}

void require_label(std::size_t label, std::size_t num_classes) {
  if (label >= num_classes) {
    throw IndexError("label " + std::to_string(label) + " out of range for " +
                     std::to_string(num_classes) + " classes");
  }
}

void require_matching(const DenseHead& head, const Gradients& g) {
  if (g.embedding_dim != head.embedding_dim() ||
      g.num_classes != head.num_classes() ||
      g.d_weights.size() != head.weights().size() ||
      g.d_bias.size() != head.bias().size()) {
    throw ShapeError("gradient shape does not match head");
  }
}

}  // namespace

DenseHead::DenseHead(std::size_t embedding_dim, std::size_t num_classes)
    : embedding_dim_(embedding_dim), num_classes_(num_classes) {
  if (embedding_dim == 0 || num_classes == 0) {
    throw ShapeError("head dimensions must be positive");
  }
  weights_.assign(embedding_dim * num_classes, 0.0);
  bias_.assign(num_classes, 0.0);
}

Gradients Gradients::zeros_like(const DenseHead& head) {
  Gradients g;
  g.embedding_dim = head.embedding_dim();
  g.num_classes = head.num_classes();
  g.d_weights.assign(head.weights().size(), 0.0);
  g.d_bias.assign(head.bias().size(), 0.0);
  return g;
}

std::vector<double> forward(const DenseHead& head, std::span<const double> x) {
  require_input(head, x);
  require_finite(x, "input");
  std::vector<double> logits(head.num_classes());
  for (std::size_t c = 0; c < head.num_classes(); ++c) {
    const auto row = head.row(c);
    double acc = head.bias()[c];
    for (std::size_t e = 0; e < row.size(); ++e) acc += row[e] * x[e];
    logits[c] = acc;
  }
  return logits;
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("softmax of an empty vector");
  require_finite(logits, "logits");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> probs(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] - m);
    total += probs[i];
  }
  for (double& p : probs) p /= total;
  return probs;
}

double cross_entropy(std::span<const double> probs, std::size_t label) {
  require_label(label, probs.size());
  return -std::log(std::max(probs[label], kProbabilityFloor));
}

Gradients backward(const DenseHead& head, std::span<const double> x,
                   std::span<const double> probs, std::size_t label) {
  require_input(head, x);
  if (probs.size() != head.num_classes()) {
    throw ShapeError("probability vector does not match class count");
  }
  require_label(label, head.num_classes());

  Gradients g = Gradients::zeros_like(head);
  const std::size_t dim = head.embedding_dim();
  for (std::size_t c = 0; c < head.num_classes(); ++c) {
    const double delta = probs[c] - (c == label ? 1.0 : 0.0);
    g.d_bias[c] = delta;
    double* row = g.d_weights.data() + c * dim;
    for (std::size_t e = 0; e < dim; ++e) row[e] = delta * x[e];
  }
  return g;
}

void apply_sgd(DenseHead& head, const Gradients& g, double lr) {
  require_matching(head, g);
  if (!(lr >= 0.0) || !std::isfinite(lr)) {
    throw UsageError("learning rate must be a finite non-negative number");
  }
  require_finite(g.d_weights, "weight gradient");
  require_finite(g.d_bias, "bias gradient");

  auto step = [lr](std::span<double> params, const std::vector<double>& grad) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!std::isfinite(params[i] - lr * grad[i])) {
        throw NumericError("SGD update overflowed");
      }
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
  };
  step(head.weights(), g.d_weights);
  step(head.bias(), g.d_bias);
}

DenseHead sgd_step(const DenseHead& head, const Gradients& g, double lr) {
  DenseHead out = head;
  apply_sgd(out, g, lr);
  return out;
}

Gradients batch_gradient(const DenseHead& head,
                         std::span<const EmbeddingSample> batch) {
  if (batch.empty()) throw UsageError("batch is empty");
  Gradients sum = Gradients::zeros_like(head);
  for (const auto& sample : batch) {
    const auto probs = softmax(forward(head, sample.features));
    const Gradients g = backward(head, sample.features, probs, sample.label);
    for (std::size_t i = 0; i < sum.d_weights.size(); ++i) {
      sum.d_weights[i] += g.d_weights[i];
    }
    for (std::size_t i = 0; i < sum.d_bias.size(); ++i) {
      sum.d_bias[i] += g.d_bias[i];
    }
  }
  const auto n = static_cast<double>(batch.size());
  for (double& v : sum.d_weights) v /= n;
  for (double& v : sum.d_bias) v /= n;
  return sum;
}

DenseHead train_batch(const DenseHead& head,
                      std::span<const EmbeddingSample> batch, double lr,
                      std::size_t local_episodes) {
  if (local_episodes == 0) throw UsageError("local_episodes must be >= 1");
  if (batch.empty()) throw UsageError("batch is empty");
  DenseHead out = head;
  for (std::size_t episode = 0; episode < local_episodes; ++episode) {
    apply_sgd(out, batch_gradient(out, batch), lr);
  }
  return out;
}

std::size_t predict(const DenseHead& head, std::span<const double> x) {
  const auto logits = forward(head, x);
  std::size_t best = 0;
  for (std::size_t c = 1; c < logits.size(); ++c) {
    if (logits[c] > logits[best]) best = c;
  }
  return best;
}

double batch_loss(const DenseHead& head,
                  std::span<const EmbeddingSample> batch) {
  if (batch.empty()) throw UsageError("batch is empty");
  double total = 0.0;
  for (const auto& sample : batch) {
    total += cross_entropy(softmax(forward(head, sample.features)),
                           sample.label);
  }
  return total / static_cast<double>(batch.size());
}

DenseHead init_head(std::size_t embedding_dim, std::size_t num_classes,
                    const InitMode& mode) {
  DenseHead head(embedding_dim, num_classes);
  if (std::holds_alternative<init::Random>(mode)) {
    const double s =
        std::sqrt(6.0 / static_cast<double>(embedding_dim + num_classes));
    std::mt19937_64 rng(std::get<init::Random>(mode).seed);
    std::uniform_real_distribution<double> dist(-s, s);
    for (double& w : head.weights()) w = dist(rng);
    for (double& b : head.bias()) b = dist(rng);
  } else if (const auto* pre = std::get_if<init::Pretrained>(&mode)) {
    if (pre->values.size() != head.parameter_count()) {
      throw ShapeError("pretrained blob has " +
                       std::to_string(pre->values.size()) +
                       " values, expected " +
                       std::to_string(head.parameter_count()));
    }
    require_finite(pre->values, "pretrained blob");
    const auto split = pre->values.begin() +
                       static_cast<std::ptrdiff_t>(head.weights().size());
    std::copy(pre->values.begin(), split, head.weights().begin());
    std::copy(split, pre->values.end(), head.bias().begin());
  }
  return head;
}

std::size_t footprint_bytes(std::size_t embedding_dim,
                            std::size_t num_classes) {
  return sizeof(float) * (num_classes * embedding_dim + num_classes);
}

}  // namespace fedtl
