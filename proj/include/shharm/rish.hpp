#pragma once

#include <vector>

#include "shharm/sh_basis.hpp"

namespace shharm {

// Per-order energy sum_m c_{l,m}^2, indexed by l / 2.
struct RishFeatures {
  std::vector<double> energy;

  double order(int l) const { return energy[static_cast<std::size_t>(l / 2)]; }
};

RishFeatures rish_features(const ShCoefficients& c, int sh_order);

struct RishProjection {
  ShCoefficients coeffs;
  // Orders where the input had no energy but the harmonized signal did; the
  // output block is left at zero for those.
  int degenerate_orders = 0;
};

// Rescales each order block of `input` so its energy matches `harmonized`
// while keeping the block's direction.
RishProjection rish_project(const ShCoefficients& input, const ShCoefficients& harmonized, int sh_order);

}  // namespace shharm
