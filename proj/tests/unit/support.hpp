#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "shharm/dwi_core.hpp"

namespace test_support {

inline std::vector<shharm::Vec3> random_directions(int n, unsigned seed) {
  std::mt19937 gen(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<shharm::Vec3> dirs;
  while (static_cast<int>(dirs.size()) < n) {
    const double x = nd(gen), y = nd(gen), z = nd(gen);
    const double r = std::sqrt(x * x + y * y + z * z);
    if (r < 1e-6) continue;
    dirs.push_back({x / r, y / r, z / r});
  }
  return dirs;
}

// Fresh, empty scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("shharm_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace test_support
