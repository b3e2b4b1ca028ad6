#pragma once

// Domain transfer routing: a confidence head over the two view embeddings
// scores the actions {frontal, lateral, fusion}; a Gumbel-Softmax draw picks
// one per sample during training, and the chosen candidate is passed through
// unchanged (straight-through gradients follow the relaxed weights). At
// inference the action is determined by which views are present.

#include "mvcodot/autograd.hpp"
#include "mvcodot/nn.hpp"
#include "mvcodot/vision.hpp"

#include <array>
#include <cmath>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <vector>

namespace mvcodot::dot {

using ag::Var;
using data::ViewTag;

enum Action : int { kFrontal = 0, kLateral = 1, kFusion = 2 };
inline constexpr int kNumActions = 3;

inline const char* action_name(int a) {
  switch (a) {
    case kFrontal:
      return "frontal";
    case kLateral:
      return "lateral";
    case kFusion:
      return "fusion";
  }
  return "?";
}

// How Gumbel noise enters the relaxed sample:
//   standard: softmax((log p + g) / tau)
//   printed:  softmax(log p + g / tau)  (temperature applied to the noise only)
enum class GumbelForm { standard, printed };

struct ActionDistribution {
  Var logits;    // B x 3
  Matrix probs;  // B x 3, softmax(logits)

  static ActionDistribution from_logits(Var logits) {
    ActionDistribution d;
    d.probs = ag::softmax_rows_value(logits.value());
    d.logits = std::move(logits);
    return d;
  }
};

struct ActionSample {
  Var soft;               // B x 3 relaxed sample
  std::vector<int> hard;  // argmax of each soft row
  double tau_s = 0.3;
};

// Global mean pooling -> concat -> affine + tanh -> linear head to 3 logits.
class ConfidenceHead {
 public:
  ConfidenceHead() = default;
  ConfidenceHead(nn::ParameterStore& store, const std::string& name, Eigen::Index latent_dim,
                 Eigen::Index hidden_dim, std::mt19937_64& rng)
      : hidden_(store, name + ".hidden", 2 * latent_dim, hidden_dim, rng),
        head_(store, name + ".head", hidden_dim, kNumActions, rng) {}

  ActionDistribution operator()(const vision::ViewEmbedding& f, const vision::ViewEmbedding& l,
                                Eigen::Index regions) const {
    if (f.regions.rows() != l.regions.rows() || f.regions.cols() != l.regions.cols()) {
      throw std::invalid_argument("action_confidence: view embeddings differ in shape");
    }
    Var gf = ag::block_mean_rows(f.regions, regions);
    Var gl = ag::block_mean_rows(l.regions, regions);
    Var h = ag::tanh(hidden_(ag::concat_cols({gf, gl})));
    return ActionDistribution::from_logits(head_(h));
  }

  const nn::Linear& head() const { return head_; }

 private:
  nn::Linear hidden_;
  nn::Linear head_;
};

inline double standard_gumbel(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double x = u(rng);
  while (x <= 0.0) x = u(rng);
  return -std::log(-std::log(x));
}

// Draws one relaxed sample per row of P. Noise is consumed row by row in
// order, so results depend only on the rng state.
inline ActionSample sample_action(const ActionDistribution& p, double tau_s, std::mt19937_64& rng,
                                  GumbelForm form = GumbelForm::standard) {
  if (!(tau_s > 0.0)) throw std::invalid_argument("sample_action: tau_s must be positive");
  const Eigen::Index b = p.logits.rows();
  Matrix g(b, kNumActions);
  for (Eigen::Index i = 0; i < b; ++i)
    for (int a = 0; a < kNumActions; ++a) g(i, a) = standard_gumbel(rng);

  Var logp = ag::log_softmax_rows(p.logits);
  Var z = form == GumbelForm::standard ? ag::scale(ag::add(logp, Var::constant(g)), 1.0 / tau_s)
                                       : ag::add(logp, Var::constant(g / tau_s));
  ActionSample s;
  s.soft = ag::softmax_rows(z);
  s.tau_s = tau_s;
  s.hard.resize(static_cast<std::size_t>(b));
  for (Eigen::Index i = 0; i < b; ++i) {
    Eigen::Index arg = 0;
    s.soft.value().row(i).maxCoeff(&arg);
    s.hard[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return s;
}

// Forward value: exactly candidates[hard[b]] for each sample block b.
// Backward: gradients as for sum_i soft(b, i) * candidates[i].
inline Var select_input(const std::array<Var, kNumActions>& candidates, const ActionSample& v, Eigen::Index regions) {
  return ag::weighted_select({candidates.begin(), candidates.end()}, v.soft, regions, &v.hard);
}

// Fully relaxed mixture (forward and backward use the soft weights).
inline Var soft_select(const std::array<Var, kNumActions>& candidates, const ActionSample& v, Eigen::Index regions) {
  return ag::weighted_select({candidates.begin(), candidates.end()}, v.soft, regions, nullptr);
}

// Deterministic routing from the available views: a single view forces its
// own embedding, both views use the fused embedding.
inline Var inference_select(const std::set<ViewTag>& available, const std::optional<Var>& frontal,
                            const std::optional<Var>& lateral) {
  const bool has_f = available.count(ViewTag::frontal) != 0;
  const bool has_l = available.count(ViewTag::lateral) != 0;
  if (!has_f && !has_l) throw std::invalid_argument("inference_select: no views available");
  if ((has_f && !frontal) || (has_l && !lateral)) {
    throw std::invalid_argument("inference_select: embedding missing for an available view");
  }
  if (has_f && has_l) {
    return vision::fuse_views({*frontal, ViewTag::frontal}, {*lateral, ViewTag::lateral}).regions;
  }
  return has_f ? *frontal : *lateral;
}

inline int inference_action(const std::set<ViewTag>& available) {
  const bool has_f = available.count(ViewTag::frontal) != 0;
  const bool has_l = available.count(ViewTag::lateral) != 0;
  if (has_f && has_l) return kFusion;
  if (has_f) return kFrontal;
  if (has_l) return kLateral;
  throw std::invalid_argument("inference_select: no views available");
}

}  // namespace mvcodot::dot
