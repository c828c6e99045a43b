#pragma once

#include "shharm/dwi_core.hpp"
#include "shharm/sh_basis.hpp"
#include "shharm/shresnet.hpp"

namespace shharm {

struct ShHarmonization {
  ShVolume sh;  // RISH-projected prediction
  long degenerate_orders = 0;
};

// Network inference on every tissue voxel of `source` followed by RISH
// projection onto the source coefficients.
ShHarmonization harmonize_sh(const NetworkParams<float>& model, const ShVolume& source);

struct HarmonizeOptions {
  ShBasisSpec basis;
};

struct HarmonizeResult {
  DwiVolume volume;
  ShVolume sh;
  long degenerate_orders = 0;
};

// Full application path: SH fit, inference, projection, reconstruction at
// `output_table`'s weighted directions and rescaling by the source mean b0.
// b0 rows of `output_table` receive the source mean b0. Everything outside
// the tissue mask is zero.
HarmonizeResult harmonize_volume(const NetworkParams<float>& model, const NormalizedDwi& source, const TissueMask& mask,
                                 const GradientTable& output_table, const HarmonizeOptions& options = {});

}  // namespace shharm
