#pragma once

// Desk-scale analyses: the four-mode ablation ladder, single-view domain
// shift, paired-view embedding geometry and temperature sweeps.

#include "mvcodot/training.hpp"

#include <Eigen/Eigenvalues>

#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace mvcodot::experiments {

struct TrainedRun {
  std::unique_ptr<Trainer> trainer;
  TrainLog log;
};

inline TrainedRun train_run(const Config& cfg, const PreparedData& data) {
  TrainedRun r{std::make_unique<Trainer>(cfg, data), {}};
  r.trainer->run(r.log);
  return r;
}

// ---------------------------------------------------------------------------
// Ablation

inline const std::vector<AblationMode>& all_modes() {
  static const std::vector<AblationMode> m{AblationMode::base_cat, AblationMode::mvco_cat, AblationMode::mvco_fusion,
                                           AblationMode::mvco_dot};
  return m;
}

struct AblationResult {
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::vector<metrics::MetricReport>> per_seed;  // mode -> one report per seed

  metrics::MetricReport mean(const std::string& mode) const {
    const auto& v = per_seed.at(mode);
    metrics::MetricReport m;
    for (const auto& r : v) {
      for (std::size_t i = 0; i < 4; ++i) m.bleu[i] += r.bleu[i] / static_cast<double>(v.size());
      m.meteor += r.meteor / static_cast<double>(v.size());
      m.rouge_l += r.rouge_l / static_cast<double>(v.size());
    }
    return m;
  }

  void write_csv(std::ostream& os) const {
    os << "mode,seed," << metrics::kMetricHeader << "\n";
    for (AblationMode mode : all_modes()) {
      const std::string name = to_string(mode);
      auto it = per_seed.find(name);
      if (it == per_seed.end()) continue;
      for (std::size_t s = 0; s < it->second.size(); ++s) {
        os << name << ',' << seeds[s] << ',';
        metrics::write_csv_row(os, it->second[s]);
        os << "\n";
      }
      os << name << ",mean,";
      metrics::write_csv_row(os, mean(name));
      os << "\n";
    }
  }
};

using RunHook = std::function<void(AblationMode, std::uint64_t seed, TrainedRun&)>;

// Trains every mode for every seed on the same data and scores the test split.
inline AblationResult run_ablation(const Config& base, const PreparedData& data, const std::vector<std::uint64_t>& seeds,
                                   const RunHook& hook = {}) {
  AblationResult res;
  res.seeds = seeds;
  const Decode decode = parse_decode(base.eval.decode);
  for (std::uint64_t seed : seeds) {
    for (AblationMode mode : all_modes()) {
      Config c = base;
      c.train.mode = to_string(mode);
      c.train.seed = seed;
      TrainedRun run = train_run(c, data);
      res.per_seed[to_string(mode)].push_back(evaluate(run.trainer->model(), data.test, data.vocab, decode).report);
      if (hook) hook(mode, seed, run);
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Domain shift

inline const std::array<std::set<ViewTag>, 3>& input_conditions() {
  static const std::array<std::set<ViewTag>, 3> c{std::set<ViewTag>{ViewTag::frontal}, std::set<ViewTag>{ViewTag::lateral},
                                                  std::set<ViewTag>{ViewTag::frontal, ViewTag::lateral}};
  return c;
}

inline const std::array<const char*, 3>& input_condition_names() {
  static const std::array<const char*, 3> n{"frontal", "lateral", "both"};
  return n;
}

struct DomainShiftRow {
  std::string model;
  std::array<metrics::MetricReport, 3> by_condition;  // frontal, lateral, both

  // B-1 of both views minus the worse single view.
  double gap() const { return by_condition[2].bleu[0] - std::min(by_condition[0].bleu[0], by_condition[1].bleu[0]); }
};

inline DomainShiftRow domain_shift_row(const std::string& name, const Model& model, const std::vector<PreparedCase>& cases,
                                       const data::Vocabulary& vocab, Decode decode) {
  DomainShiftRow row{name, {}};
  for (std::size_t k = 0; k < 3; ++k) row.by_condition[k] = evaluate(model, cases, vocab, decode, input_conditions()[k]).report;
  return row;
}

struct DomainShiftResult {
  std::array<DomainShiftRow, 2> rows;  // MvCo, MvCo-DoT

  void write_csv(std::ostream& os) const {
    os << "model,input," << metrics::kMetricHeader << "\n";
    for (const auto& r : rows) {
      for (std::size_t k = 0; k < 3; ++k) {
        os << r.model << ',' << input_condition_names()[k] << ',';
        metrics::write_csv_row(os, r.by_condition[k]);
        os << "\n";
      }
    }
  }
};

inline DomainShiftResult run_domain_shift(const Model& mvco, const Model& mvco_dot, const PreparedData& data, Decode decode) {
  return {{domain_shift_row("MvCo", mvco, data.test, data.vocab, decode),
           domain_shift_row("MvCo-DoT", mvco_dot, data.test, data.vocab, decode)}};
}

// ---------------------------------------------------------------------------
// Embedding geometry

struct EmbeddingAnalysis {
  std::vector<double> distances;  // per case, 1 - cos(x_f, x_l)
  double mean = 0.0;
  double stddev = 0.0;
  Matrix frontal;                 // N x P semantic embeddings
  Matrix lateral;
  Matrix coords;                  // 2N x 2 principal-component projection, frontal rows first

  void write_scatter_csv(std::ostream& os, const std::vector<PreparedCase>& cases) const {
    os << "case,view,pc1,pc2\n";
    const auto n = frontal.rows();
    for (Eigen::Index i = 0; i < 2 * n; ++i) {
      os << cases[static_cast<std::size_t>(i % n)].id << ',' << (i < n ? "frontal" : "lateral") << ',' << coords(i, 0)
         << ',' << coords(i, 1) << "\n";
    }
  }
};

// Top-two principal components; each axis is signed so its largest-magnitude
// loading is positive.
inline Matrix pca_2d(const Matrix& x) {
  Matrix centered = x.rowwise() - x.colwise().mean();
  Matrix cov = centered.transpose() * centered / std::max<double>(1.0, static_cast<double>(x.rows() - 1));
  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  const Eigen::Index p = cov.cols();
  Matrix axes(p, 2);
  for (Eigen::Index k = 0; k < 2 && k < p; ++k) {
    Vector v = es.eigenvectors().col(p - 1 - k);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    axes.col(k) = v;
  }
  if (p < 2) axes.col(1).setZero();
  return centered * axes;
}

inline EmbeddingAnalysis run_embedding_analysis(const Model& model, const std::vector<PreparedCase>& cases) {
  ag::NoGradGuard ng;
  EmbeddingAnalysis a;
  const std::size_t chunk = 64;
  std::vector<Matrix> fs, ls;
  Eigen::Index total = 0;
  for (std::size_t begin = 0; begin < cases.size(); begin += chunk) {
    Batch b = make_batch(case_pointers(cases, begin, std::min(cases.size(), begin + chunk)));
    auto [f, l] = model.paired_semantics(b);
    fs.push_back(f.x.value());
    ls.push_back(l.x.value());
    total += b.size();
  }
  const Eigen::Index p = fs.front().cols();
  a.frontal.resize(total, p);
  a.lateral.resize(total, p);
  Eigen::Index row = 0;
  for (std::size_t k = 0; k < fs.size(); ++k) {
    a.frontal.middleRows(row, fs[k].rows()) = fs[k];
    a.lateral.middleRows(row, ls[k].rows()) = ls[k];
    row += fs[k].rows();
  }
  for (Eigen::Index i = 0; i < total; ++i) {
    a.distances.push_back(1.0 - mvco::cosine_sim(a.frontal.row(i).transpose(), a.lateral.row(i).transpose()));
  }
  for (double d : a.distances) a.mean += d / static_cast<double>(total);
  for (double d : a.distances) a.stddev += (d - a.mean) * (d - a.mean) / static_cast<double>(total);
  a.stddev = std::sqrt(a.stddev);
  Matrix both(2 * total, p);
  both << a.frontal, a.lateral;
  a.coords = pca_2d(both);
  return a;
}

// ---------------------------------------------------------------------------
// Temperature sweeps

struct SweepRow {
  std::string param;
  double value = 0.0;
  std::uint64_t seed = 0;
  metrics::MetricReport report;
};

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "param,value,seed," << metrics::kMetricHeader << "\n";
  for (const auto& r : rows) {
    os << r.param << ',' << r.value << ',' << r.seed << ',';
    metrics::write_csv_row(os, r.report);
    os << "\n";
  }
}

// `param` is "tau_c" or "tau_s"; every run shares `data`.
inline std::vector<SweepRow> run_temperature_sweep(const Config& base, const PreparedData& data, const std::string& param,
                                                   const std::vector<double>& values, const std::vector<std::uint64_t>& seeds) {
  if (param != "tau_c" && param != "tau_s") throw ConfigError("sweep parameter must be tau_c or tau_s, got '" + param + "'");
  std::vector<SweepRow> rows;
  const Decode decode = parse_decode(base.eval.decode);
  for (double v : values) {
    for (std::uint64_t seed : seeds) {
      Config c = base;
      (param == "tau_c" ? c.mvco.tau_c : c.dot.tau_s) = v;
      c.train.seed = seed;
      TrainedRun run = train_run(c, data);
      rows.push_back({param, v, seed, evaluate(run.trainer->model(), data.test, data.vocab, decode).report});
    }
  }
  return rows;
}

}  // namespace mvcodot::experiments
