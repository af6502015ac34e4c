#include "fedtl/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace fedtl {
namespace {

double sample_loss(const DenseHead& head, const EmbeddingSample& s) {
  return cross_entropy(softmax(forward(head, s.features)), s.label);
}

}  // namespace

double relative_error(double analytic, double numeric) {
  const double scale =
      std::max({std::abs(analytic), std::abs(numeric), kGradcheckFloor});
  return std::abs(analytic - numeric) / scale;
}

std::vector<double> numeric_gradient(const DenseHead& head,
                                     const EmbeddingSample& sample,
                                     double step) {
  std::vector<double> out;
  out.reserve(head.parameter_count());
  DenseHead probe = head;
  auto differentiate = [&](double& p) {
    const double saved = p;
    p = saved + step;
    const double up = sample_loss(probe, sample);
    p = saved - step;
    const double down = sample_loss(probe, sample);
    p = saved;
    out.push_back((up - down) / (2.0 * step));
  };
  for (double& w : probe.weights()) differentiate(w);
  for (double& b : probe.bias()) differentiate(b);
  return out;
}

GradcheckReport gradcheck(const GradcheckOptions& options) {
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<std::size_t> dim(1, options.max_dim);
  std::uniform_int_distribution<std::size_t> classes(
      2, std::max<std::size_t>(2, options.max_classes));
  std::uniform_real_distribution<double> param(-1.0, 1.0);
  std::uniform_real_distribution<double> feature(-2.0, 2.0);

  GradcheckReport report;
  for (std::size_t t = 0; t < options.trials; ++t) {
    DenseHead head(dim(rng), classes(rng));
    for (double& w : head.weights()) w = param(rng);
    for (double& b : head.bias()) b = param(rng);
    EmbeddingSample s;
    s.features.resize(head.embedding_dim());
    for (double& x : s.features) x = feature(rng);
    s.label = std::uniform_int_distribution<std::size_t>(
        0, head.num_classes() - 1)(rng);

    const Gradients g =
        backward(head, s.features, softmax(forward(head, s.features)), s.label);
    const auto numeric = numeric_gradient(head, s, options.step);
    std::vector<double> analytic = g.d_weights;
    analytic.insert(analytic.end(), g.d_bias.begin(), g.d_bias.end());
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      report.max_relative_error = std::max(
          report.max_relative_error, relative_error(analytic[i], numeric[i]));
    }
    report.coordinates += analytic.size();
    ++report.trials;
  }
  return report;
}

}  // namespace fedtl
