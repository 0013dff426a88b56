#pragma once

#include <cstdint>
#include <unistd.h>

#include <filesystem>
#include <string>
#include <vector>

#include "demix/random.hpp"
#include "demix/tensor_store.hpp"

namespace demix::testing {

// Random parameter set with the fixed schema {a:[rows,cols], b:[cols], c:[3]}.
inline ParameterSet random_params(Rng& rng, std::size_t rows = 4, std::size_t cols = 5,
                                  double scale = 1.0) {
  ParameterSet p;
  auto fill = [&](std::size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = scale * rng.normal();
    return v;
  };
  p.insert("a", {rows, cols}, fill(rows * cols));
  p.insert("b", {cols}, fill(cols));
  p.insert("c", {3}, fill(3));
  return p;
}

inline ParameterSet make_params(std::initializer_list<std::pair<std::string, std::vector<double>>> entries) {
  ParameterSet p;
  for (const auto& [name, values] : entries) p.insert(name, {values.size()}, values);
  return p;
}

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("demix_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace demix::testing
