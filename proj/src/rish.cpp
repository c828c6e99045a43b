#include "shharm/rish.hpp"

#include <cmath>

#include "shharm/error.hpp"

namespace shharm {

namespace {

void check_size(const ShCoefficients& c, int sh_order) {
  const ShBasisSpec spec{sh_order, 0.0};
  spec.validate();
  if (c.size() != spec.n_coef())
    throw ValidationError("expected " + std::to_string(spec.n_coef()) + " coefficients for order " +
                          std::to_string(sh_order) + ", got " + std::to_string(c.size()));
}

}  // namespace

RishFeatures rish_features(const ShCoefficients& c, int sh_order) {
  check_size(c, sh_order);
  RishFeatures f;
  for (int l = 0; l <= sh_order; l += 2) f.energy.push_back(c.segment(sh_block_start(l), sh_block_size(l)).squaredNorm());
  return f;
}

RishProjection rish_project(const ShCoefficients& input, const ShCoefficients& harmonized, int sh_order) {
  check_size(input, sh_order);
  check_size(harmonized, sh_order);
  RishProjection out;
  out.coeffs = ShCoefficients::Zero(input.size());
  for (int l = 0; l <= sh_order; l += 2) {
    const auto in_block = input.segment(sh_block_start(l), sh_block_size(l));
    const double e_in = in_block.squaredNorm();
    const double e_h = harmonized.segment(sh_block_start(l), sh_block_size(l)).squaredNorm();
    if (e_in == 0.0) {
      if (e_h > 0.0) ++out.degenerate_orders;
      continue;
    }
    out.coeffs.segment(sh_block_start(l), sh_block_size(l)) = in_block * std::sqrt(e_h / e_in);
  }
  return out;
}

}  // namespace shharm
