#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "shharm/dwi_core.hpp"

namespace shharm {

// One acquisition: volume stem plus FSL gradient files. Paths are relative
// to the manifest's directory unless absolute.
struct AcquisitionFiles {
  std::filesystem::path dwi;
  std::filesystem::path bval;
  std::filesystem::path bvec;
};

struct ManifestEntry {
  std::string id;
  AcquisitionFiles source;
  AcquisitionFiles target;
  std::filesystem::path mask;
  // Optional noise-free target volume (same gradients as the target), known
  // only for synthetic data. Evaluation scores against it when present.
  std::filesystem::path target_truth;
};

struct Manifest {
  int version = 1;
  nlohmann::json config = nlohmann::json::object();
  std::vector<ManifestEntry> subjects;
  std::filesystem::path base_dir;  // set by read(), not serialized

  nlohmann::json to_json() const;
  static Manifest from_json(const nlohmann::json& j);

  void write(const std::filesystem::path& path) const;
  static Manifest read(const std::filesystem::path& path);

  // Index of subject `id`; throws ValidationError naming it when absent.
  std::size_t find(const std::string& id) const;
  std::filesystem::path resolve(const std::filesystem::path& p) const;
};

struct PairedSubject {
  std::string id;
  DwiVolume source;
  DwiVolume target;
  TissueMask mask;
  std::optional<DwiVolume> target_truth;
};

// Loads both acquisitions and the mask; every failure names the subject.
PairedSubject load_pair(const Manifest& manifest, std::size_t index);
std::vector<PairedSubject> load_pairs(const Manifest& manifest);

}  // namespace shharm
