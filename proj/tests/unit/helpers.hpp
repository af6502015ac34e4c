#pragma once
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <vector>

#include "fedtl/nn.hpp"

namespace fedtl::test {

inline std::filesystem::path golden(const char* name) {
  return std::filesystem::path(FEDTL_GOLDEN_DIR) / name;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline DenseHead random_head(std::size_t e, std::size_t c, std::mt19937_64& rng,
                             double range = 1.0) {
  std::uniform_real_distribution<double> u(-range, range);
  DenseHead h(e, c);
  for (double& w : h.weights()) w = u(rng);
  for (double& b : h.bias()) b = u(rng);
  return h;
}

inline EmbeddingSample random_sample(std::size_t e, std::size_t c,
                                     std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  EmbeddingSample s;
  s.features.resize(e);
  for (double& x : s.features) x = u(rng);
  s.label = std::uniform_int_distribution<std::size_t>(0, c - 1)(rng);
  return s;
}

// Temp path removed on scope exit.
struct TempPath {
  std::filesystem::path path;
  explicit TempPath(const std::string& stem) {
    static std::mt19937_64 rng(std::random_device{}());
    path = std::filesystem::temp_directory_path() /
           (stem + "-" + std::to_string(rng()));
  }
  ~TempPath() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace fedtl::test
