#pragma once

// Finite-difference verification of the dense head's analytic gradients.

#include <cstddef>
#include <cstdint>

#include "fedtl/nn.hpp"

namespace fedtl {

struct GradcheckOptions {
  std::size_t trials = 100;
  std::uint64_t seed = 7;
  std::size_t max_dim = 8;
  std::size_t max_classes = 4;
  double step = 1e-5;
};

struct GradcheckReport {
  std::size_t trials = 0;
  std::size_t coordinates = 0;
  double max_relative_error = 0.0;
};

/// |a - n| / max(|a|, |n|, kGradcheckFloor): relative where gradients are
/// meaningfully non-zero, absolute (scaled) near zero.
inline constexpr double kGradcheckFloor = 1e-4;
double relative_error(double analytic, double numeric);

/// Central-difference gradient of cross_entropy(softmax(forward(head, x)))
/// with respect to every parameter, in canonical order.
std::vector<double> numeric_gradient(const DenseHead& head,
                                     const EmbeddingSample& sample,
                                     double step);

/// Random heads and samples with E <= max_dim, 2 <= C <= max_classes.
GradcheckReport gradcheck(const GradcheckOptions& options);

}  // namespace fedtl
