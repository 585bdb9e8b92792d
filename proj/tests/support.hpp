// Copyright (c) 2026, The mergebench authors
// SPDX-License-Identifier: Apache-2.0

#ifndef MERGEBENCH_TESTS_SUPPORT_HPP
#define MERGEBENCH_TESTS_SUPPORT_HPP

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mergebench/checkpoint.hpp"

namespace testing_support {

namespace fs = std::filesystem;

// Fresh directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = fs::temp_directory_path() /
            ("mergebench-test-" + std::to_string(rd()) + "-" + std::to_string(counter.fetch_add(1)));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

using Layout = std::vector<std::pair<std::string, std::vector<std::int64_t>>>;

inline mergebench::TensorMap random_model(std::mt19937_64& rng, const Layout& layout, double scale = 1.0,
                                          double mean = 0.0) {
  std::normal_distribution<double> dist(mean, scale);
  mergebench::TensorMap out;
  for (const auto& [name, shape] : layout) {
    auto t = mergebench::Tensor::zeros(shape);
    for (auto& v : t.values) v = static_cast<float>(dist(rng));
    out.emplace(name, std::move(t));
  }
  return out;
}

inline mergebench::TensorMap single(const std::string& name, std::vector<float> values) {
  mergebench::TensorMap m;
  const auto n = static_cast<std::int64_t>(values.size());
  m.emplace(name, mergebench::Tensor({n}, std::move(values)));
  return m;
}

inline std::string file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << bytes;
}

inline std::string u64_le(std::uint64_t v) {
  std::string out(8, '\0');
  for (int i = 0; i < 8; ++i) out[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xff);
  return out;
}

}  // namespace testing_support

#endif  // MERGEBENCH_TESTS_SUPPORT_HPP
