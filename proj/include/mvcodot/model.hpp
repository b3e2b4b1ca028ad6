#pragma once

// The full report generator: per-view projections, concatenation layer for
// the *_cat ablations, DoT confidence head, encoder, decoder(s) and the
// semantic projection head, wired according to the ablation mode.

#include "mvcodot/autograd.hpp"
#include "mvcodot/config.hpp"
#include "mvcodot/data.hpp"
#include "mvcodot/dot.hpp"
#include "mvcodot/generator.hpp"
#include "mvcodot/metrics.hpp"
#include "mvcodot/mvco.hpp"
#include "mvcodot/nn.hpp"
#include "mvcodot/vision.hpp"

#include <array>
#include <optional>
#include <random>
#include <set>
#include <vector>

namespace mvcodot {

using ag::Var;
using data::ViewTag;

// A case after feature extraction and encoding.
struct PreparedCase {
  std::string id;
  Matrix frontal;  // R x D
  Matrix lateral;  // R x D
  std::vector<int> ids;
  metrics::Tokens reference;
};

// Region features of several cases stacked sample-major.
struct Batch {
  Matrix frontal;  // (B*R) x D
  Matrix lateral;  // (B*R) x D
  std::vector<std::vector<int>> ids;
  std::vector<metrics::Tokens> references;
  Eigen::Index regions = 0;

  Eigen::Index size() const { return static_cast<Eigen::Index>(ids.size()); }
};

inline Batch make_batch(const std::vector<const PreparedCase*>& cases) {
  if (cases.empty()) throw std::invalid_argument("make_batch: empty batch");
  Batch b;
  b.regions = cases.front()->frontal.rows();
  const Eigen::Index d = cases.front()->frontal.cols();
  const auto n = static_cast<Eigen::Index>(cases.size());
  b.frontal.resize(n * b.regions, d);
  b.lateral.resize(n * b.regions, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const PreparedCase& c = *cases[static_cast<std::size_t>(i)];
    b.frontal.middleRows(i * b.regions, b.regions) = c.frontal;
    b.lateral.middleRows(i * b.regions, b.regions) = c.lateral;
    b.ids.push_back(c.ids);
    b.references.push_back(c.reference);
  }
  return b;
}

struct GenerationInput {
  Var features;             // (B*R) x d, input to the encoder
  std::vector<int> actions;  // routing decision per sample (DoT modes)
  std::optional<dot::ActionDistribution> confidence;
};

class Model {
 public:
  Model(const Config& cfg, int vocab_size, Eigen::Index regions, Eigen::Index feature_dim)
      : cfg_(cfg), mode_(parse_mode(cfg.train.mode)), regions_(regions), feature_dim_(feature_dim) {
    std::mt19937_64 rng(cfg.train.seed * 0x9E3779B97F4A7C15ULL + 11);
    const Eigen::Index d = cfg.vision.latent_dim;
    views_.frontal = vision::ViewProjection(params_, "vision.phi_frontal", feature_dim, d, cfg.vision.phi_depth, rng);
    views_.lateral = vision::ViewProjection(params_, "vision.phi_lateral", feature_dim, d, cfg.vision.phi_depth, rng);
    concat_ = vision::ViewProjection(params_, "vision.phi_concat", 2 * feature_dim, d, cfg.vision.phi_depth, rng);
    confidence_ = dot::ConfidenceHead(params_, "dot.confidence", d, cfg.dot.hidden_dim, rng);
    encoder_ = generator::Encoder(params_, "encoder", d, cfg.gen.layers, cfg.gen.heads, cfg.gen.ffn_dim, rng);
    decoder_ = generator::Decoder(params_, "decoder", vocab_size, cfg.gen.embed, d, cfg.gen.hidden, rng);
    if (!cfg.gen.shared_decoder) {
      decoder_lateral_ = generator::Decoder(params_, "decoder_lateral", vocab_size, cfg.gen.embed, d, cfg.gen.hidden, rng);
    }
    psi_ = mvco::ProjectionHead(params_, "mvco.psi", d, cfg.gen.hidden, cfg.mvco.proj_dim, rng);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const Config& config() const { return cfg_; }
  AblationMode mode() const { return mode_; }
  Eigen::Index regions() const { return regions_; }
  nn::ParameterStore& params() { return params_; }
  const nn::ParameterStore& params() const { return params_; }
  const generator::Decoder& decoder() const { return decoder_; }
  const generator::Decoder& decoder_for(ViewTag v) const {
    return v == ViewTag::lateral && !cfg_.gen.shared_decoder ? decoder_lateral_ : decoder_;
  }
  const mvco::ProjectionHead& psi() const { return psi_; }
  const dot::ConfidenceHead& confidence_head() const { return confidence_; }
  const vision::ViewProjections& view_projections() const { return views_; }
  const generator::Encoder& encoder() const { return encoder_; }

  dot::GumbelForm gumbel_form() const {
    return cfg_.dot.gumbel_form == "printed" ? dot::GumbelForm::printed : dot::GumbelForm::standard;
  }

  // Single-view stream input. Models with a contrastive branch use the
  // view's own projection; base_cat, which has no per-view path, uses its
  // concatenation layer with the missing half zeroed.
  Var view_input(const Batch& b, ViewTag v) const {
    if (!uses_contrastive(mode_)) {
      Matrix zero = Matrix::Zero(b.frontal.rows(), b.frontal.cols());
      Matrix cat(b.frontal.rows(), 2 * b.frontal.cols());
      cat << (v == ViewTag::frontal ? b.frontal : zero), (v == ViewTag::lateral ? b.lateral : zero);
      return concat_(Var::constant(std::move(cat)));
    }
    return views_.project(Var::constant(v == ViewTag::frontal ? b.frontal : b.lateral), v).regions;
  }

  // Input to the generation branch. Training in mvco_dot mode samples a
  // route per case; evaluation routes deterministically from `available`.
  GenerationInput generation_input(const Batch& b, bool training, std::mt19937_64* rng,
                                   const std::set<ViewTag>& available = {ViewTag::frontal, ViewTag::lateral}) const {
    GenerationInput in;
    const bool has_f = available.count(ViewTag::frontal) != 0;
    const bool has_l = available.count(ViewTag::lateral) != 0;
    if (!has_f && !has_l) throw std::invalid_argument("generation_input: no views available");
    if (uses_concat_input(mode_)) {
      Matrix cat(b.frontal.rows(), 2 * b.frontal.cols());
      cat << (has_f ? b.frontal : Matrix::Zero(b.frontal.rows(), b.frontal.cols())),
          (has_l ? b.lateral : Matrix::Zero(b.lateral.rows(), b.lateral.cols()));
      in.features = concat_(Var::constant(std::move(cat)));
      return in;
    }
    std::optional<Var> f, l;
    if (has_f) f = views_.project(Var::constant(b.frontal), ViewTag::frontal).regions;
    if (has_l) l = views_.project(Var::constant(b.lateral), ViewTag::lateral).regions;
    if (mode_ == AblationMode::mvco_dot && training) {
      if (!rng) throw std::invalid_argument("generation_input: sampling requires an rng");
      if (!f || !l) throw std::invalid_argument("generation_input: DoT training needs both views");
      vision::ViewEmbedding ef{*f, ViewTag::frontal}, el{*l, ViewTag::lateral};
      auto p = confidence_(ef, el, regions_);
      auto sample = dot::sample_action(p, cfg_.dot.tau_s, *rng, gumbel_form());
      Var fused = vision::fuse_views(ef, el).regions;
      in.features = dot::select_input({*f, *l, fused}, sample, regions_);
      in.actions = sample.hard;
      in.confidence = std::move(p);
      return in;
    }
    in.features = dot::inference_select(available, f, l);
    in.actions.assign(static_cast<std::size_t>(b.size()), dot::inference_action(available));
    return in;
  }

  generator::Memory encode(const Var& features, ViewTag stream = ViewTag::frontal) const {
    return decoder_for(stream).prepare(encoder_(features, regions_), regions_);
  }

  // Teacher-forced pass of one view stream; returns decoder outputs and the
  // semantic embedding of the final step.
  struct StreamPass {
    generator::TeacherForced forced;
    mvco::SemanticEmbedding semantic;
  };

  StreamPass view_stream(const Batch& b, ViewTag v) const {
    const auto& dec = decoder_for(v);
    generator::Memory mem = encode(view_input(b, v), v);
    StreamPass s{generator::teacher_force(dec, mem, b.ids), {}};
    s.semantic = psi_(s.forced.c_last, s.forced.h_last, v);
    return s;
  }

  // Semantic embeddings of both view streams. With a shared decoder the two
  // streams run as one stacked batch, which is numerically identical.
  std::pair<mvco::SemanticEmbedding, mvco::SemanticEmbedding> paired_semantics(const Batch& b) const {
    if (!cfg_.gen.shared_decoder) return {view_stream(b, ViewTag::frontal).semantic, view_stream(b, ViewTag::lateral).semantic};
    Var in = ag::concat_rows({view_input(b, ViewTag::frontal), view_input(b, ViewTag::lateral)});
    std::vector<std::vector<int>> ids = b.ids;
    ids.insert(ids.end(), b.ids.begin(), b.ids.end());
    auto forced = generator::teacher_force(decoder_, encode(in), ids);
    const Eigen::Index n = b.size();
    Var x = psi_(forced.c_last, forced.h_last, ViewTag::frontal).x;
    return {{ag::slice_rows(x, 0, n), ViewTag::frontal}, {ag::slice_rows(x, n, n), ViewTag::lateral}};
  }

 private:
  Config cfg_;
  AblationMode mode_;
  Eigen::Index regions_;
  Eigen::Index feature_dim_;
  nn::ParameterStore params_;
  vision::ViewProjections views_;
  vision::ViewProjection concat_;
  dot::ConfidenceHead confidence_;
  generator::Encoder encoder_;
  generator::Decoder decoder_;
  generator::Decoder decoder_lateral_;
  mvco::ProjectionHead psi_;
};

}  // namespace mvcodot
