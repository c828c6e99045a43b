#include "shharm/manifest.hpp"

#include <fstream>

#include "shharm/error.hpp"

namespace shharm {

namespace {

nlohmann::json files_json(const AcquisitionFiles& f) {
  return {{"dwi", f.dwi.generic_string()}, {"bval", f.bval.generic_string()}, {"bvec", f.bvec.generic_string()}};
}

AcquisitionFiles files_from(const nlohmann::json& j) {
  return {j.at("dwi").get<std::string>(), j.at("bval").get<std::string>(), j.at("bvec").get<std::string>()};
}

}  // namespace

nlohmann::json Manifest::to_json() const {
  nlohmann::json subs = nlohmann::json::array();
  for (const auto& s : subjects) {
    nlohmann::json e{{"id", s.id},
                     {"source", files_json(s.source)},
                     {"target", files_json(s.target)},
                     {"mask", s.mask.generic_string()}};
    if (!s.target_truth.empty()) e["target_truth"] = s.target_truth.generic_string();
    subs.push_back(std::move(e));
  }
  return {{"version", version}, {"config", config}, {"subjects", subs}};
}

Manifest Manifest::from_json(const nlohmann::json& j) {
  Manifest m;
  try {
    m.version = j.value("version", 1);
    if (m.version != 1) throw ValidationError("unsupported manifest version " + std::to_string(m.version));
    m.config = j.value("config", nlohmann::json::object());
    for (const auto& s : j.at("subjects")) {
      ManifestEntry e;
      e.id = s.at("id").get<std::string>();
      try {
        e.source = files_from(s.at("source"));
        e.target = files_from(s.at("target"));
        e.mask = s.at("mask").get<std::string>();
        if (s.contains("target_truth")) e.target_truth = s.at("target_truth").get<std::string>();
      } catch (const nlohmann::json::exception& ex) {
        throw ValidationError("manifest entry for subject '" + e.id + "' is incomplete: " + ex.what());
      }
      m.subjects.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }
  for (std::size_t i = 0; i < m.subjects.size(); ++i)
    for (std::size_t k = 0; k < i; ++k)
      if (m.subjects[i].id == m.subjects[k].id)
        throw ValidationError("duplicate subject id '" + m.subjects[i].id + "' in manifest");
  return m;
}

void Manifest::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << to_json().dump(2) << '\n';
  if (!out) throw IoError("failed writing manifest " + path.string());
}

Manifest Manifest::read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  Manifest m = from_json(j);
  m.base_dir = path.parent_path();
  return m;
}

std::size_t Manifest::find(const std::string& id) const {
  for (std::size_t i = 0; i < subjects.size(); ++i)
    if (subjects[i].id == id) return i;
  throw ValidationError("subject '" + id + "' is not listed in the manifest");
}

std::filesystem::path Manifest::resolve(const std::filesystem::path& p) const {
  return p.is_absolute() ? p : base_dir / p;
}

PairedSubject load_pair(const Manifest& manifest, std::size_t index) {
  const auto& e = manifest.subjects.at(index);
  PairedSubject s;
  s.id = e.id;
  try {
    auto load = [&](const AcquisitionFiles& f) {
      return load_volume(manifest.resolve(f.dwi),
                         read_fsl_gradients(manifest.resolve(f.bval), manifest.resolve(f.bvec)));
    };
    s.source = load(e.source);
    s.target = load(e.target);
    s.mask = load_mask(manifest.resolve(e.mask));
    if (!e.target_truth.empty()) s.target_truth = load_volume(manifest.resolve(e.target_truth), s.target.table);
  } catch (const IoError& ex) {
    throw IoError("subject '" + e.id + "': " + ex.what());
  } catch (const ValidationError& ex) {
    throw ValidationError("subject '" + e.id + "': " + ex.what());
  }
  if (!(s.source.data.grid() == s.mask.grid) || !(s.target.data.grid() == s.mask.grid))
    throw ValidationError("subject '" + e.id + "': source, target and mask grids differ");
  if (s.target_truth && (!(s.target_truth->data.grid() == s.mask.grid) ||
                         s.target_truth->data.frames() != s.target.data.frames()))
    throw ValidationError("subject '" + e.id + "': target ground truth does not match the target acquisition");
  return s;
}

std::vector<PairedSubject> load_pairs(const Manifest& manifest) {
  std::vector<PairedSubject> out;
  for (std::size_t i = 0; i < manifest.subjects.size(); ++i) out.push_back(load_pair(manifest, i));
  return out;
}

}  // namespace shharm
