#pragma once

// Shared fixtures for the unit and acceptance tests.

#include "mvcodot.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace mvcodot::test {

// Central-difference gradient check of a scalar function of `params`.
// Relative error is |a - n| / max(|a|, |n|, floor).
struct GradCheck {
  double max_rel = 0.0;
  long checked = 0;
};

inline GradCheck gradcheck(const std::function<ag::Var()>& f, const std::vector<ag::Var>& params, int per_tensor = 0,
                           std::uint64_t seed = 1, double h = 1e-5, double floor = 1e-2) {
  std::vector<ag::Var> ps = params;
  for (auto& p : ps) p.zero_grad();
  f().backward();
  std::vector<Matrix> analytic;
  for (const auto& p : ps) analytic.push_back(p.grad().size() ? p.grad() : Matrix::Zero(p.rows(), p.cols()));

  GradCheck out;
  std::mt19937_64 rng(seed);
  ag::NoGradGuard ng;
  for (std::size_t k = 0; k < ps.size(); ++k) {
    const Eigen::Index n = ps[k].value().size();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    if (per_tensor > 0 && n > per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<std::size_t>(per_tensor));
    }
    for (Eigen::Index i : idx) {
      double& x = ps[k].mutable_value().data()[i];
      const double x0 = x;
      x = x0 + h;
      const double up = f().item();
      x = x0 - h;
      const double down = f().item();
      x = x0;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k].data()[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      out.max_rel = std::max(out.max_rel, rel);
      ++out.checked;
    }
  }
  return out;
}

inline std::vector<ag::Var> all_params(nn::ParameterStore& store) {
  std::vector<ag::Var> v;
  for (auto& [_, p] : store.all()) v.push_back(p);
  return v;
}

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// A model small enough for exhaustive gradient checks and second-scale runs.
inline Config tiny_config(const std::string& mode = "mvco_dot") {
  Config c;
  c.data.cases = 60;
  c.data.image_size = 8;
  c.data.min_freq = 1;
  c.data.max_len = 24;
  c.vision.grid = 2;
  c.vision.feature_dim = 6;
  c.vision.latent_dim = 8;
  c.dot.hidden_dim = 6;
  c.gen.layers = 1;
  c.gen.heads = 2;
  c.gen.ffn_dim = 12;
  c.gen.hidden = 8;
  c.gen.embed = 6;
  c.mvco.proj_dim = 8;
  c.train.mode = mode;
  c.train.pretrain_epochs = 2;
  c.train.rl_epochs = 1;
  c.train.batch = 6;
  c.train.rl_batch = 6;
  c.train.warmup = 10;
  c.train.base_lr = 1e-2;
  c.train.gen_per_cycle = 2;
  return c;
}

// NT-Xent computed term by term from the explicit 2N x 2N cosine-similarity
// matrix of the pool [x_l; x_f].
inline double ntxent_oracle(const Matrix& xf, const Matrix& xl, double tau, bool symmetric = true) {
  const Eigen::Index n = xf.rows();
  Matrix z(2 * n, xf.cols());
  z << xl, xf;
  Matrix sim(2 * n, 2 * n);
  for (Eigen::Index i = 0; i < 2 * n; ++i)
    for (Eigen::Index j = 0; j < 2 * n; ++j) sim(i, j) = z.row(i).dot(z.row(j)) / (z.row(i).norm() * z.row(j).norm());
  double total = 0.0;
  const Eigen::Index anchors = symmetric ? 2 * n : n;
  for (Eigen::Index k = 0; k < anchors; ++k) {
    const Eigen::Index pos = k < n ? k + n : k - n;
    double denom = 0.0;
    for (Eigen::Index j = 0; j < 2 * n; ++j)
      if (j != k) denom += std::exp(sim(k, j) / tau);
    total += -std::log(std::exp(sim(k, pos) / tau) / denom);
  }
  return total / static_cast<double>(anchors);
}

// Longest common subsequence by enumerating every subsequence of `a`.
inline std::size_t brute_force_lcs(const metrics::Tokens& a, const metrics::Tokens& b) {
  std::size_t best = 0;
  const std::size_t n = a.size();
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    std::size_t j = 0, len = 0;
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) {
      if (!(mask & (1u << i))) continue;
      while (j < b.size() && b[j] != a[i]) ++j;
      if (j == b.size()) ok = false;
      else {
        ++j;
        ++len;
      }
    }
    if (ok) best = std::max(best, len);
  }
  return best;
}

inline metrics::Tokens random_tokens(std::mt19937_64& rng, std::size_t max_len, int alphabet) {
  std::uniform_int_distribution<std::size_t> len(0, max_len);
  std::uniform_int_distribution<int> sym(0, alphabet - 1);
  metrics::Tokens t(len(rng));
  for (auto& x : t) x = std::string(1, static_cast<char>('a' + sym(rng)));
  return t;
}

}  // namespace mvcodot::test
