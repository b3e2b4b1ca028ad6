#pragma once

// Multi-view contrastive branch: a two-layer projection head over the
// decoder's final (context, hidden) pair, and an NT-Xent loss that pulls the
// frontal and lateral embeddings of a case together against every other
// embedding in the batch.

#include "mvcodot/autograd.hpp"
#include "mvcodot/data.hpp"
#include "mvcodot/nn.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvcodot::mvco {

using ag::Var;

struct SemanticEmbedding {
  Var x;  // B x P
  data::ViewTag view_tag = data::ViewTag::frontal;
};

// psi(concat(c, h)) = FC2(ReLU(FC1(concat(c, h))))
class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(nn::ParameterStore& store, const std::string& name, Eigen::Index context_dim,
                 Eigen::Index hidden_dim, Eigen::Index proj_dim, std::mt19937_64& rng)
      : context_dim_(context_dim),
        hidden_dim_(hidden_dim),
        fc1_(store, name + ".fc1", context_dim + hidden_dim, proj_dim, rng),
        fc2_(store, name + ".fc2", proj_dim, proj_dim, rng) {}

  SemanticEmbedding operator()(const Var& c, const Var& h, data::ViewTag tag) const {
    if (c.cols() != context_dim_ || h.cols() != hidden_dim_ || c.rows() != h.rows()) {
      throw std::invalid_argument("project_semantic: expected (" + std::to_string(context_dim_) + ", " +
                                  std::to_string(hidden_dim_) + ") inputs");
    }
    return {fc2_(ag::relu(fc1_(ag::concat_cols({c, h})))), tag};
  }

  const nn::Linear& fc1() const { return fc1_; }
  const nn::Linear& fc2() const { return fc2_; }

 private:
  Eigen::Index context_dim_ = 0;
  Eigen::Index hidden_dim_ = 0;
  nn::Linear fc1_;
  nn::Linear fc2_;
};

inline double cosine_sim(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_sim: dimension mismatch");
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw std::domain_error("cosine_sim: zero vector");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

// NT-Xent over the pool [x_l; x_f] of 2N embeddings. Anchor k's positive is
// the other view of the same case; its denominator spans the remaining 2N-1
// embeddings. The loss is the mean over anchors: all 2N when symmetric,
// otherwise only the N lateral anchors.
inline Var mvco_loss(const Var& x_frontal, const Var& x_lateral, double tau_c, bool symmetric = true) {
  if (!(tau_c > 0.0)) throw std::invalid_argument("mvco_loss: tau_c must be positive");
  if (x_frontal.rows() != x_lateral.rows() || x_frontal.cols() != x_lateral.cols()) {
    throw std::invalid_argument("mvco_loss: frontal and lateral batches differ in shape");
  }
  const Eigen::Index n = x_frontal.rows();
  if (n < 1) throw std::invalid_argument("mvco_loss: empty batch");
  Var z = ag::row_l2_normalize(ag::concat_rows({x_lateral, x_frontal}));
  Var logits = ag::scale(ag::matmul_nt(z, z), 1.0 / tau_c);
  Var logp = ag::log_softmax_rows(logits, /*mask_diagonal=*/true);
  std::vector<int> positive(static_cast<std::size_t>(2 * n), -1);
  for (Eigen::Index i = 0; i < n; ++i) {
    positive[static_cast<std::size_t>(i)] = static_cast<int>(n + i);
    if (symmetric) positive[static_cast<std::size_t>(n + i)] = static_cast<int>(i);
  }
  const double anchors = symmetric ? 2.0 * static_cast<double>(n) : static_cast<double>(n);
  return ag::scale(ag::sum(ag::pick(logp, positive)), -1.0 / anchors);
}

inline Var mvco_loss(const SemanticEmbedding& frontal, const SemanticEmbedding& lateral, double tau_c,
                     bool symmetric = true) {
  return mvco_loss(frontal.x, lateral.x, tau_c, symmetric);
}

}  // namespace mvcodot::mvco
