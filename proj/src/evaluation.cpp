#include "shharm/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

#include "shharm/dti_metrics.hpp"
#include "shharm/error.hpp"
#include "shharm/harmonize.hpp"
#include "shharm/nn/checkpoint.hpp"
#include "shharm/random.hpp"

namespace shharm {

namespace {

template <typename T>
double nmse_impl(std::span<const T> y, std::span<const T> y_hat) {
  if (y.size() != y_hat.size())
    throw ValidationError("nmse: length mismatch (" + std::to_string(y.size()) + " vs " +
                          std::to_string(y_hat.size()) + ")");
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = static_cast<double>(y[i]) - static_cast<double>(y_hat[i]);
    num += d * d;
    den += static_cast<double>(y[i]) * static_cast<double>(y[i]);
  }
  if (!(den > 0.0)) throw ValidationError("nmse: ground truth has zero norm");
  return num / den;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

double nmse(std::span<const double> y, std::span<const double> y_hat) { return nmse_impl(y, y_hat); }
double nmse(std::span<const float> y, std::span<const float> y_hat) { return nmse_impl(y, y_hat); }

nlohmann::json WilcoxonResult::to_json() const {
  return {{"n", n},           {"statistic", statistic}, {"w_plus", w_plus},         {"w_minus", w_minus},
          {"p_value", p_value}, {"exact", exact},       {"degenerate", degenerate}, {"stars", significance_stars(p_value)}};
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("wilcoxon: paired samples differ in length");
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a[i] - b[i];
    if (!std::isfinite(diff)) throw NumericalError("wilcoxon: non-finite difference");
    if (diff != 0.0) d.push_back(diff);
  }
  WilcoxonResult r;
  r.n = d.size();
  if (d.empty()) {
    r.degenerate = true;
    r.exact = true;
    return r;
  }
  const std::size_t n = d.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return std::abs(d[i]) < std::abs(d[j]); });
  // Doubled average ranks are integers: a tie group at positions i..i+t-1
  // (1-based) has doubled rank 2i + t - 1.
  std::vector<long> rank2(n);
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const long t = static_cast<long>(j - i + 1);
    for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = 2 * static_cast<long>(i + 1) + t - 1;
    tie_term += static_cast<double>(t * t * t - t);
    i = j + 1;
  }
  long wplus2 = 0;
  long total2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total2 += rank2[i];
    if (d[i] > 0) wplus2 += rank2[i];
  }
  const long w2 = std::min(wplus2, total2 - wplus2);
  r.w_plus = wplus2 / 2.0;
  r.w_minus = (total2 - wplus2) / 2.0;
  r.statistic = w2 / 2.0;

  if (n <= kWilcoxonExactMax) {
    // Number of sign assignments per doubled positive-rank sum.
    std::vector<double> count(static_cast<std::size_t>(total2) + 1, 0.0);
    count[0] = 1.0;
    long reach = 0;
    for (long rk : rank2) {
      for (long s = reach; s >= 0; --s)
        if (count[s] != 0.0) count[s + rk] += count[s];
      reach += rk;
    }
    double tail = 0.0;
    for (long s = 0; s <= w2; ++s) tail += count[s];
    r.p_value = std::min(1.0, 2.0 * tail / std::ldexp(1.0, static_cast<int>(n)));
    r.exact = true;
  } else {
    const double nn = static_cast<double>(n);
    const double mu = nn * (nn + 1.0) / 4.0;
    const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
    if (var <= 0.0) {
      r.p_value = 1.0;
    } else {
      const double z = std::min(0.0, r.statistic - mu + 0.5) / std::sqrt(var);
      r.p_value = std::min(1.0, std::erfc(-z / std::sqrt(2.0)));
    }
  }
  return r;
}

std::string significance_stars(double p) {
  if (p <= 0.01) return "**";
  if (p <= 0.05) return "*";
  return "";
}

std::vector<Fold> make_folds(std::size_t n, std::size_t k) {
  if (n < 3) throw ValidationError("cross-validation needs at least 3 subjects, got " + std::to_string(n));
  if (k == 0) k = n;
  if (k > n) throw ValidationError("cannot make " + std::to_string(k) + " folds from " + std::to_string(n) + " subjects");
  std::vector<Fold> folds;
  std::size_t start = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f < n % k ? 1 : 0);
    Fold fold;
    fold.index = static_cast<int>(f);
    for (std::size_t i = start; i < start + size; ++i) fold.test.push_back(i);
    fold.validation = (start + size) % n;
    for (std::size_t i = 0; i < n; ++i)
      if ((i < start || i >= start + size) && i != fold.validation) fold.train.push_back(i);
    if (fold.train.empty())
      throw ValidationError(std::to_string(k) + " folds over " + std::to_string(n) + " subjects leave no training subject");
    folds.push_back(std::move(fold));
    start += size;
  }
  return folds;
}

PreparedSubject prepare_subject(const PairedSubject& pair, const ShBasisSpec& basis) {
  PreparedSubject s;
  s.id = pair.id;
  s.mask = pair.mask;
  try {
    s.source = normalize_b0(pair.source, pair.mask);
    s.target = normalize_b0(pair.target, pair.mask);
    s.source_sh = fit_sh_volume(s.source, s.mask, basis);
    s.target_sh = fit_sh_volume(s.target, s.mask, basis);
    if (pair.target_truth) s.target_truth = normalize_b0(*pair.target_truth, pair.mask);
  } catch (const ValidationError& e) {
    throw ValidationError("subject '" + pair.id + "': " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError("subject '" + pair.id + "': " + e.what());
  }
  return s;
}

nlohmann::json CvConfig::to_json() const {
  nlohmann::json m = nlohmann::json::array();
  for (auto k : models) m.push_back(to_string(k));
  return {{"folds", folds},
          {"models", m},
          {"shresnet", shresnet.to_json()},
          {"golkov", golkov.to_json()},
          {"train", train.to_json()},
          {"sh_order", basis.order},
          {"sh_lambda", basis.lambda}};
}

double EvalReport::value(const std::string& subject, const std::string& tissue, const std::string& quantity,
                         const std::string& method) const {
  for (const auto& e : entries)
    if (e.subject == subject && e.tissue == tissue && e.quantity == quantity && e.method == method) return e.nmse;
  throw ValidationError("no NMSE recorded for " + subject + "/" + tissue + "/" + quantity + "/" + method);
}

std::vector<double> EvalReport::values(const std::string& tissue, const std::string& quantity,
                                       const std::string& method) const {
  std::vector<double> out;
  for (const auto& s : subjects) out.push_back(value(s, tissue, quantity, method));
  return out;
}

double EvalReport::mean(const std::string& tissue, const std::string& quantity, const std::string& method) const {
  const auto v = values(tissue, quantity, method);
  if (v.empty()) throw ValidationError("report has no subjects");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["subjects"] = subjects;
  j["methods"] = methods;
  j["config"] = config;
  auto& ent = j["nmse"] = nlohmann::json::array();
  for (const auto& e : entries)
    ent.push_back({{"subject", e.subject}, {"tissue", e.tissue}, {"quantity", e.quantity}, {"method", e.method}, {"nmse", e.nmse}});
  auto& cmp = j["comparisons"] = nlohmann::json::array();
  for (const auto& c : comparisons)
    cmp.push_back({{"tissue", c.tissue},
                   {"quantity", c.quantity},
                   {"method", c.method},
                   {"baseline", c.baseline},
                   {"wilcoxon", c.test.to_json()},
                   {"stars", c.stars}});
  auto& red = j["reductions"] = nlohmann::json::array();
  for (const auto& r : reductions)
    red.push_back({{"tissue", r.tissue},
                   {"quantity", r.quantity},
                   {"method", r.method},
                   {"mean_nmse", r.mean_nmse},
                   {"mean_nmse_unharmonized", r.mean_nmse_baseline},
                   {"percent_reduction", r.percent}});
  auto& fj = j["folds"] = nlohmann::json::array();
  for (const auto& f : folds)
    fj.push_back({{"index", f.index},
                  {"test", f.test},
                  {"validation", f.validation},
                  {"train", f.train},
                  {"best_val_loss", f.best_val_loss},
                  {"epochs", f.epochs},
                  {"degenerate_orders", f.degenerate_orders}});
  j["voxel_set_hash"] = voxel_set_hash;
  j["voxel_count"] = voxel_count;
  j["negative_eigenvalue_voxels"] = negative_eigenvalue_voxels;
  return j;
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out << "subject,tissue,quantity,method,nmse\n";
  char buf[64];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof(buf), "%.17g", e.nmse);
    out << e.subject << ',' << e.tissue << ',' << e.quantity << ',' << e.method << ',' << buf << '\n';
  }
  return out.str();
}

Eigen::MatrixXd target_basis(const PreparedSubject& subject, int sh_order) {
  const auto dirs = subject.target.table.directions();
  return design_matrix(ShBasisSpec{sh_order, 0.0}, dirs);
}

namespace {

bool same_acquisition(const GradientTable& a, const GradientTable& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::abs(a.bvals[i] - b.bvals[i]) > 1e-6) return false;
    for (int k = 0; k < 3; ++k)
      if (std::abs(a.bvecs[i][k] - b.bvecs[i][k]) > 1e-9) return false;
  }
  return true;
}

// Attenuations [voxels][dirs] gathered from a normalized image.
std::vector<double> gather(const Image4& signal, std::span<const std::size_t> voxels) {
  const int nd = signal.frames();
  std::vector<double> out(voxels.size() * static_cast<std::size_t>(nd));
  for (std::size_t i = 0; i < voxels.size(); ++i)
    for (int k = 0; k < nd; ++k) out[i * nd + k] = signal.at(voxels[i], k);
  return out;
}

std::vector<double> reconstruct_at(const ShVolume& sh, std::span<const std::size_t> voxels, const Eigen::MatrixXd& basis) {
  const auto nd = static_cast<std::size_t>(basis.rows());
  const int c = sh.spec.n_coef();
  std::vector<double> out(voxels.size() * nd);
  Eigen::VectorXd coeffs(c);
  for (std::size_t i = 0; i < voxels.size(); ++i) {
    for (int k = 0; k < c; ++k) coeffs(k) = sh.coeffs.at(voxels[i], k);
    const Eigen::VectorXd s = basis * coeffs;
    for (std::size_t k = 0; k < nd; ++k) out[i * nd + k] = s(static_cast<Eigen::Index>(k));
  }
  return out;
}

struct Metrics {
  std::vector<double> fa;
  std::vector<double> md;
};

Metrics tensor_metrics(std::span<const double> att, const TensorFitter& fitter, std::size_t& negatives) {
  Metrics m;
  const std::size_t nd = fitter.size();
  for (std::size_t i = 0; i * nd < att.size(); ++i) {
    const auto t = fitter.fit(att.subspan(i * nd, nd));
    if (t.eigenvalues().minCoeff() < 0.0) ++negatives;
    m.fa.push_back(fa(t));
    m.md.push_back(md(t));
  }
  return m;
}

}  // namespace

void score_subject(const PreparedSubject& subject, const std::map<std::string, const ShVolume*>& harmonized,
                   EvalReport& report) {
  const int order = subject.source_sh.spec.order;
  const Eigen::MatrixXd basis = target_basis(subject, order);
  const TensorFitter target_fitter(subject.target.table);
  const bool raw_source = same_acquisition(subject.source.table, subject.target.table);

  for (std::size_t t = 0; t < kTissueNames.size(); ++t) {
    const auto label = static_cast<std::uint8_t>(t + 1);
    std::vector<std::size_t> voxels;
    for (std::size_t v = 0; v < subject.mask.labels.size(); ++v)
      if (subject.mask.labels[v] == label) voxels.push_back(v);
    const std::string& tissue = kTissueNames[t];
    if (voxels.empty()) throw ValidationError("subject '" + subject.id + "' has no " + tissue + "-matter voxels");
    const std::string key = subject.id + "/" + tissue;
    std::vector<std::uint64_t> idx(voxels.begin(), voxels.end());
    report.voxel_set_hash[key] = hex64(nn::fnv1a64(
        std::string_view(reinterpret_cast<const char*>(idx.data()), idx.size() * sizeof(std::uint64_t))));
    report.voxel_count[key] = voxels.size();

    const auto truth = gather(subject.target_truth ? subject.target_truth->signal : subject.target.signal, voxels);
    const auto truth_dti = tensor_metrics(truth, target_fitter, report.negative_eigenvalue_voxels);

    auto record = [&](const std::string& method, const std::vector<double>& signal, const Metrics& m) {
      report.entries.push_back({subject.id, tissue, "signal", method, nmse(truth, signal)});
      report.entries.push_back({subject.id, tissue, "fa", method, nmse(truth_dti.fa, m.fa)});
      report.entries.push_back({subject.id, tissue, "md", method, nmse(truth_dti.md, m.md)});
    };

    // The source acquisition as measured; resampled through its SH fit only
    // when the two scanners used different directions.
    const auto unharmonized = raw_source ? gather(subject.source.signal, voxels)
                                         : reconstruct_at(subject.source_sh, voxels, basis);
    record(kUnharmonized, unharmonized, tensor_metrics(unharmonized, target_fitter, report.negative_eigenvalue_voxels));

    for (const auto& [method, sh] : harmonized) {
      const auto signal = reconstruct_at(*sh, voxels, basis);
      record(method, signal, tensor_metrics(signal, target_fitter, report.negative_eigenvalue_voxels));
    }
  }
}

void summarize(EvalReport& report) {
  report.comparisons.clear();
  report.reductions.clear();
  std::vector<std::string> harmonized;
  for (const auto& m : report.methods)
    if (m != kUnharmonized) harmonized.push_back(m);
  for (const auto& tissue : kTissueNames) {
    for (const auto& q : kQuantityNames) {
      const auto base = report.values(tissue, q, kUnharmonized);
      const double base_mean = report.mean(tissue, q, kUnharmonized);
      for (const auto& m : harmonized) {
        const auto vals = report.values(tissue, q, m);
        const auto w = wilcoxon_signed_rank(vals, base);
        report.comparisons.push_back({tissue, q, m, kUnharmonized, w, significance_stars(w.p_value)});
        const double mean = report.mean(tissue, q, m);
        report.reductions.push_back({tissue, q, m, mean, base_mean, 100.0 * (base_mean - mean) / base_mean});
      }
      for (std::size_t i = 0; i < harmonized.size(); ++i) {
        for (std::size_t k = i + 1; k < harmonized.size(); ++k) {
          const auto w = wilcoxon_signed_rank(report.values(tissue, q, harmonized[i]), report.values(tissue, q, harmonized[k]));
          report.comparisons.push_back({tissue, q, harmonized[i], harmonized[k], w, significance_stars(w.p_value)});
        }
      }
    }
  }
}

TrainingData pooled_training_data(const std::vector<PreparedSubject>& subjects, std::span<const std::size_t> indices) {
  TrainingData out;
  out.n_coef = subjects.at(indices.front()).source_sh.spec.n_coef();
  for (std::size_t i : indices) out.append(make_training_data(subjects.at(i).source_sh, subjects.at(i).target_sh));
  return out;
}

namespace {

void check_disjoint(const Fold& f) {
  std::set<std::size_t> seen(f.test.begin(), f.test.end());
  if (seen.count(f.validation)) throw std::logic_error("fold validation subject overlaps its test set");
  for (std::size_t i : f.train)
    if (seen.count(i) || i == f.validation) throw std::logic_error("fold training subjects overlap test/validation");
}

NetworkSpec model_spec(const CvConfig& cfg, ModelKind kind, std::uint64_t seed) {
  NetworkSpec spec = kind == ModelKind::kShResNet ? cfg.shresnet : cfg.golkov;
  spec.kind = kind;
  spec.sh_order = cfg.basis.order;
  spec.seed = seed;
  return spec;
}

void check_same_directions(const std::vector<PreparedSubject>& subjects) {
  for (const auto& s : subjects)
    if (!same_acquisition(s.target.table, subjects.front().target.table))
      throw ValidationError("subject '" + s.id + "' target acquisition differs from '" + subjects.front().id +
                            "'; training pools subjects and needs one target direction set");
}

}  // namespace

EvalReport cross_validate(const std::vector<PreparedSubject>& subjects, const CvConfig& cfg) {
  cfg.basis.validate();
  cfg.train.validate();
  if (cfg.models.empty()) throw ValidationError("no models selected for evaluation");
  const auto folds = make_folds(subjects.size(), cfg.folds);
  check_same_directions(subjects);

  const bool truth = subjects.front().target_truth.has_value();
  for (const auto& s : subjects)
    if (s.target_truth.has_value() != truth)
      throw ValidationError("subject '" + s.id + "' " + (truth ? "lacks" : "has") +
                            " a target ground truth while '" + subjects.front().id + "' " + (truth ? "has one" : "does not"));

  EvalReport report;
  report.config = cfg.to_json();
  report.config["reference"] = truth ? "target_truth" : "target";
  for (const auto& s : subjects) report.subjects.push_back(s.id);
  report.methods.push_back(kUnharmonized);
  for (auto k : cfg.models) report.methods.push_back(to_string(k));

  const Eigen::MatrixXd basis = target_basis(subjects.front(), cfg.basis.order);
  for (const auto& fold : folds) {
    check_disjoint(fold);
    FoldSummary summary;
    summary.index = fold.index;
    for (auto i : fold.test) summary.test.push_back(subjects[i].id);
    summary.validation = subjects[fold.validation].id;
    for (auto i : fold.train) summary.train.push_back(subjects[i].id);

    const TrainingData train_data = pooled_training_data(subjects, fold.train);
    const std::size_t val_index[] = {fold.validation};
    const TrainingData val_data = pooled_training_data(subjects, val_index);

    std::map<std::string, NetworkParams<float>> models;
    for (auto kind : cfg.models) {
      const std::string name = to_string(kind);
      if (cfg.progress) cfg.progress("fold " + std::to_string(fold.index) + ": training " + name);
      TrainConfig tc = cfg.train;
      tc.seed = mix_seed(cfg.train.seed, static_cast<std::uint64_t>(fold.index) * 2 + 1);
      const NetworkSpec spec = model_spec(cfg, kind, mix_seed(cfg.train.seed, static_cast<std::uint64_t>(fold.index) * 2));
      auto result = train(spec, train_data, val_data, basis, tc);
      summary.best_val_loss[name] = result.log.best_val_loss;
      summary.epochs[name] = static_cast<int>(result.log.epochs.size());
      models.emplace(name, std::move(result.params));
    }

    for (auto i : fold.test) {
      std::map<std::string, ShVolume> outputs;
      for (const auto& [name, params] : models) {
        auto h = harmonize_sh(params, subjects[i].source_sh);
        summary.degenerate_orders[name] += h.degenerate_orders;
        outputs.emplace(name, std::move(h.sh));
      }
      std::map<std::string, const ShVolume*> view;
      for (const auto& [name, sh] : outputs) view[name] = &sh;
      score_subject(subjects[i], view, report);
    }
    report.folds.push_back(std::move(summary));
  }
  summarize(report);
  return report;
}

nlohmann::json SweepTable::to_json() const {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& c : cells) {
    nlohmann::json cj{{"n_resblocks", c.n_resblocks}, {"fold_losses", c.fold_losses}};
    cj["mean_loss_x100"] = c.mean_loss_x100 ? nlohmann::json(*c.mean_loss_x100) : nlohmann::json(nullptr);
    if (!c.error.empty()) cj["error"] = c.error;
    j.push_back(cj);
  }
  return j;
}

std::string SweepTable::format() const {
  std::string header = "n ResBlocks  |";
  std::string row = "MSE x 100    |";
  char buf[64];
  for (const auto& c : cells) {
    std::snprintf(buf, sizeof(buf), " %8d |", c.n_resblocks);
    header += buf;
    if (c.mean_loss_x100)
      std::snprintf(buf, sizeof(buf), " %8.4f |", *c.mean_loss_x100);
    else
      std::snprintf(buf, sizeof(buf), " %8s |", "failed");
    row += buf;
  }
  return header + "\n" + row + "\n";
}

SweepTable resblock_sweep(std::span<const int> n_values, const std::vector<PreparedSubject>& subjects,
                          const CvConfig& cfg) {
  for (int n : n_values)
    if (n < 1) throw ValidationError("ResBlock counts must be >= 1, got " + std::to_string(n));
  cfg.train.validate();
  const auto folds = make_folds(subjects.size(), cfg.folds);
  check_same_directions(subjects);
  const Eigen::MatrixXd basis = target_basis(subjects.front(), cfg.basis.order);

  std::vector<TrainingData> train_sets, val_sets;
  for (const auto& fold : folds) {
    check_disjoint(fold);
    train_sets.push_back(pooled_training_data(subjects, fold.train));
    const std::size_t v[] = {fold.validation};
    val_sets.push_back(pooled_training_data(subjects, v));
  }

  SweepTable table;
  for (int n : n_values) {
    SweepCell cell;
    cell.n_resblocks = n;
    try {
      for (std::size_t f = 0; f < folds.size(); ++f) {
        if (cfg.progress) cfg.progress("sweep n=" + std::to_string(n) + " fold " + std::to_string(f));
        NetworkSpec spec = model_spec(cfg, ModelKind::kShResNet, mix_seed(cfg.train.seed, f * 2));
        spec.n_resblocks = n;
        TrainConfig tc = cfg.train;
        tc.seed = mix_seed(cfg.train.seed, f * 2 + 1);
        cell.fold_losses.push_back(train(spec, train_sets[f], val_sets[f], basis, tc).log.best_val_loss);
      }
      const double mean = std::accumulate(cell.fold_losses.begin(), cell.fold_losses.end(), 0.0) /
                          static_cast<double>(cell.fold_losses.size());
      cell.mean_loss_x100 = 100.0 * mean;
    } catch (const Error& e) {
      cell.error = e.what();
    }
    table.cells.push_back(std::move(cell));
  }
  return table;
}

}  // namespace shharm
