#include "shharm/harmonize.hpp"

#include "shharm/error.hpp"
#include "shharm/rish.hpp"

namespace shharm {

ShHarmonization harmonize_sh(const NetworkParams<float>& model, const ShVolume& source) {
  const int c = source.spec.n_coef();
  if (model.spec.sh_order != source.spec.order || model.spec.n_coef() != c)
    throw ValidationError("model was trained for order " + std::to_string(model.spec.sh_order) + ", data has order " +
                          std::to_string(source.spec.order));
  const auto voxels = tissue_voxels(source.mask);
  if (voxels.empty()) throw ValidationError("tissue mask is empty");

  const std::size_t stride = static_cast<std::size_t>(c) * kPatchTaps;
  std::vector<float> patches(voxels.size() * stride);
  for (std::size_t i = 0; i < voxels.size(); ++i)
    extract_patch(source.coeffs, source.mask, voxels[i], std::span<float>(patches).subspan(i * stride, stride));
  const auto pred = predict<float>(model, patches, static_cast<int>(voxels.size()));

  ShHarmonization out;
  out.sh.spec = source.spec;
  out.sh.mask = source.mask;
  out.sh.mean_b0 = source.mean_b0;
  out.sh.voxel_size_mm = source.voxel_size_mm;
  out.sh.coeffs = Image4(source.mask.grid, c);
  ShCoefficients input(c), predicted(c);
  std::vector<float> projected(static_cast<std::size_t>(c));
  for (std::size_t i = 0; i < voxels.size(); ++i) {
    for (int k = 0; k < c; ++k) {
      input(k) = source.coeffs.at(voxels[i], k);
      predicted(k) = pred[i * c + k];
    }
    const auto proj = rish_project(input, predicted, source.spec.order);
    out.degenerate_orders += proj.degenerate_orders;
    for (int k = 0; k < c; ++k) projected[k] = static_cast<float>(proj.coeffs(k));
    out.sh.coeffs.write_voxel(voxels[i], projected);
  }
  return out;
}

HarmonizeResult harmonize_volume(const NetworkParams<float>& model, const NormalizedDwi& source, const TissueMask& mask,
                                 const GradientTable& output_table, const HarmonizeOptions& options) {
  output_table.validate(1);
  const ShVolume sh = fit_sh_volume(source, mask, options.basis);
  auto harmonized = harmonize_sh(model, sh);

  const auto dw = output_table.dw_indices();
  const auto b0 = output_table.b0_indices();
  const auto dirs = output_table.directions();
  const Eigen::MatrixXd basis = design_matrix(ShBasisSpec{options.basis.order, 0.0}, dirs);

  HarmonizeResult result;
  result.volume.table = output_table;
  result.volume.voxel_size_mm = source.voxel_size_mm;
  result.volume.data = Image4(mask.grid, static_cast<int>(output_table.size()));
  const int c = options.basis.n_coef();
  Eigen::VectorXd coeffs(c);
  for (std::size_t v : tissue_voxels(mask)) {
    const double s0 = source.mean_b0[v];
    for (int k = 0; k < c; ++k) coeffs(k) = harmonized.sh.coeffs.at(v, k);
    const Eigen::VectorXd att = basis * coeffs;
    for (std::size_t j = 0; j < dw.size(); ++j) result.volume.data.at(v, dw[j]) = static_cast<float>(att(static_cast<Eigen::Index>(j)) * s0);
    for (int i : b0) result.volume.data.at(v, i) = static_cast<float>(s0);
  }
  result.sh = std::move(harmonized.sh);
  result.degenerate_orders = harmonized.degenerate_orders;
  return result;
}

}  // namespace shharm
