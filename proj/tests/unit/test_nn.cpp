#include <doctest.h>

#include <cmath>
#include <random>

#include "fedtl/errors.hpp"
#include "fedtl/gradcheck.hpp"
#include "fedtl/nn.hpp"
#include "helpers.hpp"

using namespace fedtl;
using fedtl::test::random_head;
using fedtl::test::random_sample;

TEST_CASE("forward matches a naive dot product") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t e = 1 + trial % 9, c = 1 + trial % 4;
    const DenseHead h = random_head(e, c, rng);
    const auto s = random_sample(e, c, rng);
    const auto logits = forward(h, s.features);
    REQUIRE(logits.size() == c);
    for (std::size_t k = 0; k < c; ++k) {
      long double acc = h.bias()[k];
      for (std::size_t j = 0; j < e; ++j) {
        acc += static_cast<long double>(h.weights()[k * e + j]) * s.features[j];
      }
      CHECK(logits[k] == doctest::Approx(static_cast<double>(acc)).epsilon(1e-12));
    }
  }
}

TEST_CASE("softmax closed forms") {
  const std::vector<double> two{2.0, 0.0};
  const auto p = softmax(two);
  CHECK(p[0] == doctest::Approx(0.8807970779778823));
  CHECK(p[1] == doctest::Approx(0.11920292202211755));

  const std::vector<double> same{3.0, 3.0, 3.0};
  for (double v : softmax(same)) CHECK(v == doctest::Approx(1.0 / 3.0));

  // Max subtraction keeps large logits finite.
  const std::vector<double> big{1000.0, 0.0};
  const auto q = softmax(big);
  CHECK(q[0] == 1.0);
  CHECK(std::isfinite(q[1]));

  CHECK_THROWS_AS(softmax(std::vector<double>{}), ShapeError);
  CHECK_THROWS_AS(softmax(std::vector<double>{1.0, NAN}), NumericError);
}

TEST_CASE("cross entropy closed forms and clamp") {
  // -log(0.1192029...) for logits (2, 0) and label 1.
  const auto p = softmax(std::vector<double>{2.0, 0.0});
  CHECK(cross_entropy(p, 1) == doctest::Approx(2.1269280110429727));
  CHECK(cross_entropy(p, 0) == doctest::Approx(0.12692801104297263));
  const std::vector<double> zero{1.0, 0.0};
  CHECK(cross_entropy(zero, 1) == doctest::Approx(-std::log(1e-12)));
  CHECK_THROWS_AS(cross_entropy(zero, 2), IndexError);
}

TEST_CASE("backward matches central differences") {
  GradcheckOptions opts;
  opts.trials = 100;
  const auto report = gradcheck(opts);
  CHECK(report.trials == 100);
  CHECK(report.coordinates > 0);
  CHECK(report.max_relative_error <= 1e-5);
}

TEST_CASE("backward delta form") {
  DenseHead h(2, 2);
  const std::vector<double> x{1.0, -2.0};
  const std::vector<double> probs{0.25, 0.75};
  const auto g = backward(h, x, probs, 0);
  // delta = p - onehot = (-0.75, 0.75)
  CHECK(g.d_bias == std::vector<double>{-0.75, 0.75});
  CHECK(g.d_weights == std::vector<double>{-0.75, 1.5, 0.75, -1.5});
}

TEST_CASE("zero input coordinates get exactly zero weight gradient") {
  std::mt19937_64 rng(3);
  const DenseHead h = random_head(6, 3, rng);
  EmbeddingSample s = random_sample(6, 3, rng);
  s.features[1] = 0.0;
  s.features[4] = 0.0;
  const auto g = backward(h, s.features, softmax(forward(h, s.features)), s.label);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(g.d_weights[c * 6 + 1] == 0.0);
    CHECK(g.d_weights[c * 6 + 4] == 0.0);
  }
}

TEST_CASE("sgd step moves against the gradient and lr 0 is identity") {
  std::mt19937_64 rng(5);
  const DenseHead h = random_head(3, 2, rng);
  const auto s = random_sample(3, 2, rng);
  const auto g = backward(h, s.features, softmax(forward(h, s.features)), s.label);
  const DenseHead moved = sgd_step(h, g, 0.1);
  for (std::size_t i = 0; i < h.weights().size(); ++i) {
    CHECK(moved.weights()[i] == h.weights()[i] - 0.1 * g.d_weights[i]);
  }
  CHECK(sgd_step(h, g, 0.0) == h);
  CHECK_THROWS_AS(sgd_step(h, g, -1.0), UsageError);

  Gradients bad = g;
  bad.d_bias[0] = INFINITY;
  CHECK_THROWS_AS(sgd_step(h, bad, 0.1), NumericError);
  Gradients wrong = Gradients::zeros_like(DenseHead(4, 2));
  CHECK_THROWS_AS(sgd_step(h, wrong, 0.1), ShapeError);
}

TEST_CASE("batch gradient is the mean of per-sample gradients") {
  std::mt19937_64 rng(8);
  const DenseHead h = random_head(4, 3, rng);
  std::vector<EmbeddingSample> batch;
  for (int i = 0; i < 7; ++i) batch.push_back(random_sample(4, 3, rng));
  const auto g = batch_gradient(h, batch);
  std::vector<double> mean(g.d_weights.size(), 0.0);
  for (const auto& s : batch) {
    const auto gi = backward(h, s.features, softmax(forward(h, s.features)), s.label);
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += gi.d_weights[i] / 7.0;
  }
  for (std::size_t i = 0; i < mean.size(); ++i) {
    CHECK(g.d_weights[i] == doctest::Approx(mean[i]).epsilon(1e-12));
  }
}

TEST_CASE("train_batch runs exactly L steps and lowers the loss") {
  std::mt19937_64 rng(9);
  const DenseHead h = random_head(5, 2, rng, 0.1);
  std::vector<EmbeddingSample> batch;
  for (int i = 0; i < 10; ++i) batch.push_back(random_sample(5, 2, rng));

  DenseHead manual = h;
  for (int l = 0; l < 4; ++l) apply_sgd(manual, batch_gradient(manual, batch), 0.05);
  CHECK(train_batch(h, batch, 0.05, 4) == manual);
  CHECK(batch_loss(manual, batch) < batch_loss(h, batch));

  CHECK_THROWS_AS(train_batch(h, batch, 0.05, 0), UsageError);
  CHECK_THROWS_AS(train_batch(h, {}, 0.05, 1), UsageError);
}

TEST_CASE("predict breaks ties toward the lowest class") {
  DenseHead h(2, 3);
  const std::vector<double> x{1.0, 1.0};
  CHECK(predict(h, x) == 0);
  h.bias()[1] = 1.0;
  h.bias()[2] = 1.0;
  CHECK(predict(h, x) == 1);
  h.weight(2, 0) = 0.5;
  CHECK(predict(h, x) == 2);
}

TEST_CASE("shape and label errors") {
  DenseHead h(3, 2);
  CHECK_THROWS_AS(forward(h, std::vector<double>{1.0, 2.0}), ShapeError);
  CHECK_THROWS_AS(forward(h, std::vector<double>{1.0, NAN, 0.0}), NumericError);
  CHECK_THROWS_AS(DenseHead(0, 2), ShapeError);
  CHECK_THROWS_AS(DenseHead(2, 0), ShapeError);
  CHECK_THROWS_AS(
      backward(h, std::vector<double>{1, 2, 3}, std::vector<double>{0.5, 0.5}, 2),
      IndexError);
}

TEST_CASE("init modes") {
  const auto zeros = init_head(4, 3, init::Zeros{});
  for (double w : zeros.weights()) CHECK(w == 0.0);
  for (double b : zeros.bias()) CHECK(b == 0.0);

  const auto a = init_head(40, 2, init::Random{42});
  const auto b = init_head(40, 2, init::Random{42});
  const auto c = init_head(40, 2, init::Random{43});
  CHECK(a == b);
  CHECK_FALSE(a == c);
  const double s = std::sqrt(6.0 / 42.0);
  double lo = 1.0, hi = -1.0;
  for (double w : a.weights()) {
    CHECK(std::abs(w) <= s);
    lo = std::min(lo, w);
    hi = std::max(hi, w);
  }
  CHECK(lo < -s / 2);
  CHECK(hi > s / 2);

  std::vector<double> blob(2562, 0.25);
  const auto pre = init_head(1280, 2, init::Pretrained{blob});
  CHECK(pre.parameter_count() == 2562);
  CHECK(pre.bias()[1] == 0.25);
  blob.pop_back();
  CHECK_THROWS_AS(init_head(1280, 2, init::Pretrained{blob}), ShapeError);
}

TEST_CASE("footprint") {
  CHECK(footprint_bytes(256, 2) == 2056);
  CHECK(footprint_bytes(1280, 2) == 10248);
  CHECK(init_head(256, 2, init::Zeros{}).parameter_count() == 514);
  CHECK(init_head(1280, 2, init::Zeros{}).parameter_count() == 2562);
}

TEST_CASE("relative error floor") {
  CHECK(relative_error(1.0, 1.0) == 0.0);
  CHECK(relative_error(2.0, 1.0) == doctest::Approx(0.5));
  CHECK(relative_error(0.0, 1e-9) == doctest::Approx(1e-5));
}
