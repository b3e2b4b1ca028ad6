#pragma once

// Generation branch: a stack of self-attention blocks over the selected
// region embeddings, and an attention-augmented LSTM decoder. Decoding
// strategies (greedy, sampling, beam search) are templates over any
// step model so they can be checked against toy models with known logits.

#include "mvcodot/autograd.hpp"
#include "mvcodot/data.hpp"
#include "mvcodot/nn.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mvcodot::generator {

using ag::Var;
using data::Vocabulary;

struct Memory {
  Var encoded;  // (B*R) x d
  Var keys;     // encoded projected for decoder attention
  Eigen::Index regions = 0;
  Eigen::Index batch() const { return encoded.rows() / regions; }
};

struct DecoderState {
  Var h;     // B x H
  Var cell;  // B x H
  Var c;     // B x d attention context
  int t = 0;
};

struct Hypothesis {
  std::vector<int> ids;
  double logprob = 0.0;
  double score = 0.0;
  bool finished = false;
};

// ---------------------------------------------------------------------------
// Encoder

class AttentionBlock {
 public:
  AttentionBlock() = default;
  AttentionBlock(nn::ParameterStore& store, const std::string& name, Eigen::Index dim, int heads,
                 Eigen::Index ffn_dim, std::mt19937_64& rng)
      : heads_(heads),
        qkv_(store.add(name + ".Wqkv", nn::xavier_uniform(dim, 3 * dim, rng))),
        out_(store, name + ".out", dim, dim, rng),
        norm1_(store, name + ".ln1", dim),
        ffn1_(store, name + ".ffn1", dim, ffn_dim, rng),
        ffn2_(store, name + ".ffn2", ffn_dim, dim, rng),
        norm2_(store, name + ".ln2", dim) {
    if (heads <= 0 || dim % heads != 0) throw std::invalid_argument("AttentionBlock: dim must divide by heads");
  }

  Var operator()(const Var& x, Eigen::Index regions) const {
    const Eigen::Index d = x.cols();
    const Eigen::Index hd = d / heads_;
    Var qkv = ag::matmul(x, qkv_);
    std::vector<Var> parts;
    for (int h = 0; h < heads_; ++h) {
      Var q = ag::slice_cols(qkv, h * hd, hd);
      Var k = ag::slice_cols(qkv, d + h * hd, hd);
      Var v = ag::slice_cols(qkv, 2 * d + h * hd, hd);
      parts.push_back(ag::block_attention(q, k, v, regions, regions));
    }
    Var attn = heads_ == 1 ? parts.front() : ag::concat_cols(parts);
    Var x1 = norm1_(ag::add(x, out_(attn)));
    return norm2_(ag::add(x1, ffn2_(ag::relu(ffn1_(x1)))));
  }

 private:
  int heads_ = 1;
  Var qkv_;
  nn::Linear out_;
  nn::LayerNorm norm1_;
  nn::Linear ffn1_;
  nn::Linear ffn2_;
  nn::LayerNorm norm2_;
};

// N stacked blocks; no positional information over regions, so the encoder
// is permutation-equivariant within each sample. Zero blocks is identity.
class Encoder {
 public:
  Encoder() = default;
  Encoder(nn::ParameterStore& store, const std::string& name, Eigen::Index dim, int layers, int heads,
          Eigen::Index ffn_dim, std::mt19937_64& rng) {
    for (int i = 0; i < layers; ++i) {
      blocks_.emplace_back(store, name + ".block" + std::to_string(i), dim, heads, ffn_dim, rng);
    }
  }

  Var operator()(const Var& x, Eigen::Index regions) const {
    Var h = x;
    for (const auto& b : blocks_) h = b(h, regions);
    return h;
  }

  std::size_t layers() const { return blocks_.size(); }

 private:
  std::vector<AttentionBlock> blocks_;
};

// ---------------------------------------------------------------------------
// Decoder

struct StepOutput {
  Var logits;  // B x V
  DecoderState state;
  ag::AttentionWeights attention;
};

class Decoder {
 public:
  Decoder() = default;
  Decoder(nn::ParameterStore& store, const std::string& name, int vocab_size, Eigen::Index embed_dim,
          Eigen::Index latent_dim, Eigen::Index hidden_dim, std::mt19937_64& rng)
      : vocab_size_(vocab_size),
        hidden_dim_(hidden_dim),
        latent_dim_(latent_dim),
        embedding_(store.add(name + ".embed", nn::normal_matrix(vocab_size, embed_dim, 0.1, rng))),
        lstm_(store, name + ".lstm", embed_dim + latent_dim + hidden_dim, 4 * hidden_dim, rng),
        key_(store, name + ".key", latent_dim, latent_dim, rng),
        query_(store, name + ".query", hidden_dim, latent_dim, rng),
        out_(store, name + ".out", hidden_dim + latent_dim, vocab_size, rng) {
    // forget-gate bias starts at 1
    store.at(name + ".lstm.b").mutable_value().middleCols(hidden_dim, hidden_dim).setOnes();
  }

  Memory prepare(const Var& encoded, Eigen::Index regions) const {
    if (regions <= 0 || encoded.rows() % regions != 0) throw std::invalid_argument("Decoder: bad region count");
    return {encoded, key_(encoded), regions};
  }

  DecoderState initial_state(const Memory& m) const {
    const Eigen::Index b = m.batch();
    return {Var::constant(Matrix::Zero(b, hidden_dim_)), Var::constant(Matrix::Zero(b, hidden_dim_)),
            ag::block_mean_rows(m.encoded, m.regions), 0};
  }

  StepOutput step(const DecoderState& s, const std::vector<int>& tokens, const Memory& m) const {
    if (static_cast<Eigen::Index>(tokens.size()) != m.batch()) {
      throw std::invalid_argument("decode_step: one token per sample required");
    }
    for (int t : tokens) {
      if (t < 0 || t >= vocab_size_) throw std::out_of_range("decode_step: token id " + std::to_string(t) + " outside vocabulary");
    }
    const Eigen::Index hd = hidden_dim_;
    Var x = ag::concat_cols({ag::embedding(embedding_, tokens), s.c, s.h});
    Var gates = lstm_(x);
    Var i = ag::sigmoid(ag::slice_cols(gates, 0, hd));
    Var f = ag::sigmoid(ag::slice_cols(gates, hd, hd));
    Var g = ag::tanh(ag::slice_cols(gates, 2 * hd, hd));
    Var o = ag::sigmoid(ag::slice_cols(gates, 3 * hd, hd));
    Var cell = ag::add(ag::mul(f, s.cell), ag::mul(i, g));
    Var h = ag::mul(o, ag::tanh(cell));
    StepOutput out;
    Var ctx = ag::block_attention(query_(h), m.keys, m.encoded, 1, m.regions, &out.attention);
    out.logits = out_(ag::concat_cols({h, ctx}));
    out.state = {h, cell, ctx, s.t + 1};
    return out;
  }

  int vocab_size() const { return vocab_size_; }
  Eigen::Index hidden_dim() const { return hidden_dim_; }
  Eigen::Index latent_dim() const { return latent_dim_; }

 private:
  int vocab_size_ = 0;
  Eigen::Index hidden_dim_ = 0;
  Eigen::Index latent_dim_ = 0;
  Var embedding_;
  nn::Linear lstm_;
  nn::Linear key_;
  nn::Linear query_;
  nn::Linear out_;
};

// ---------------------------------------------------------------------------
// Teacher forcing and the token-level objective

struct TeacherForced {
  std::vector<Var> logits;                // one B x V per step
  std::vector<std::vector<int>> targets;  // per step, B ids (-1 = padding)
  Var c_last;                             // B x d at each sample's EOS-emitting step
  Var h_last;                             // B x H
};

// Feeds sequence[t] and predicts sequence[t+1] for every sample; sequences
// must start with BOS and may differ in length (shorter ones are padded).
inline TeacherForced teacher_force(const Decoder& dec, const Memory& mem, const std::vector<std::vector<int>>& seqs) {
  const auto b = static_cast<std::size_t>(mem.batch());
  if (seqs.size() != b) throw std::invalid_argument("teacher_force: one sequence per sample required");
  std::size_t longest = 0;
  for (const auto& s : seqs) {
    if (s.size() < 2) throw std::invalid_argument("teacher_force: sequences need at least BOS and one target");
    longest = std::max(longest, s.size());
  }
  TeacherForced out;
  DecoderState st = dec.initial_state(mem);
  std::vector<Var> c_parts, h_parts;
  for (std::size_t t = 0; t + 1 < longest; ++t) {
    std::vector<int> in(b), tgt(b);
    Matrix last_mask = Matrix::Zero(static_cast<Eigen::Index>(b), 1);
    bool any_last = false;
    for (std::size_t i = 0; i < b; ++i) {
      in[i] = t < seqs[i].size() ? seqs[i][t] : Vocabulary::kPad;
      tgt[i] = t + 1 < seqs[i].size() ? seqs[i][t + 1] : -1;
      if (t + 2 == seqs[i].size()) {
        last_mask(static_cast<Eigen::Index>(i), 0) = 1.0;
        any_last = true;
      }
    }
    StepOutput so = dec.step(st, in, mem);
    st = so.state;
    out.logits.push_back(so.logits);
    out.targets.push_back(std::move(tgt));
    if (any_last) {
      c_parts.push_back(ag::mul_const(st.c, last_mask.replicate(1, st.c.cols())));
      h_parts.push_back(ag::mul_const(st.h, last_mask.replicate(1, st.h.cols())));
    }
  }
  out.c_last = c_parts.front();
  out.h_last = h_parts.front();
  for (std::size_t k = 1; k < c_parts.size(); ++k) {
    out.c_last = ag::add(out.c_last, c_parts[k]);
    out.h_last = ag::add(out.h_last, h_parts[k]);
  }
  return out;
}

// Mean token-level negative log-likelihood over non-padding targets.
inline Var xe_loss(const std::vector<Var>& logits, const std::vector<std::vector<int>>& targets) {
  if (logits.size() != targets.size() || logits.empty()) throw std::invalid_argument("xe_loss: one target row per step");
  std::size_t count = 0;
  Var total;
  for (std::size_t t = 0; t < logits.size(); ++t) {
    for (int id : targets[t]) count += id >= 0 ? 1 : 0;
    Var picked = ag::sum(ag::pick(ag::log_softmax_rows(logits[t]), targets[t]));
    total = total.defined() ? ag::add(total, picked) : picked;
  }
  if (count == 0) throw std::invalid_argument("xe_loss: no unmasked targets");
  return ag::scale(total, -1.0 / static_cast<double>(count));
}

// (c, h) of the last emitted step of a single-sequence trace.
inline std::pair<Var, Var> last_step_semantics(const std::vector<DecoderState>& trace) {
  if (trace.empty()) throw std::invalid_argument("last_step_semantics: empty trace");
  return {trace.back().c, trace.back().h};
}

// ---------------------------------------------------------------------------
// Decoding strategies

template <class M>
concept StepModel = requires(const M& m, const typename M::State& s, int token) {
  { m.initial_state() } -> std::convertible_to<typename M::State>;
  { m.step(s, token) } -> std::convertible_to<std::pair<Vector, typename M::State>>;
  { m.vocab_size() } -> std::convertible_to<int>;
};

inline int argmax(const Vector& v) {
  Eigen::Index i = 0;
  v.maxCoeff(&i);
  return static_cast<int>(i);
}

inline double hypothesis_score(double logprob, std::size_t generated, bool length_normalize) {
  if (!length_normalize || generated == 0) return logprob;
  return logprob / static_cast<double>(generated);
}

template <StepModel M>
Hypothesis generate_greedy(const M& model, int max_len) {
  Hypothesis hyp;
  hyp.ids = {Vocabulary::kBos};
  auto state = model.initial_state();
  while (static_cast<int>(hyp.ids.size()) < max_len) {
    auto [logp, next] = model.step(state, hyp.ids.back());
    const int tok = argmax(logp);
    hyp.logprob += logp(tok);
    hyp.ids.push_back(tok);
    state = std::move(next);
    if (tok == Vocabulary::kEos) break;
  }
  hyp.finished = true;
  hyp.score = hyp.logprob;
  return hyp;
}

struct SampleResult {
  Hypothesis hypothesis;
  std::vector<double> step_logprobs;
};

// Draws each token from softmax(logp / temperature); temperature <= 0 means
// argmax. Recorded log-probabilities are under the untempered model.
template <StepModel M>
SampleResult generate_sample(const M& model, int max_len, std::mt19937_64& rng, double temperature = 1.0) {
  SampleResult r;
  r.hypothesis.ids = {Vocabulary::kBos};
  auto state = model.initial_state();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  while (static_cast<int>(r.hypothesis.ids.size()) < max_len) {
    auto [logp, next] = model.step(state, r.hypothesis.ids.back());
    int tok = argmax(logp);
    if (temperature > 0.0) {
      Vector z = logp / temperature;
      z.array() -= z.maxCoeff();
      Vector p = z.array().exp();
      p /= p.sum();
      double x = u(rng);
      tok = static_cast<int>(p.size()) - 1;
      for (Eigen::Index k = 0; k < p.size(); ++k) {
        x -= p(k);
        if (x < 0.0) {
          tok = static_cast<int>(k);
          break;
        }
      }
    }
    r.step_logprobs.push_back(logp(tok));
    r.hypothesis.logprob += logp(tok);
    r.hypothesis.ids.push_back(tok);
    state = std::move(next);
    if (tok == Vocabulary::kEos) break;
  }
  r.hypothesis.finished = true;
  r.hypothesis.score = r.hypothesis.logprob;
  return r;
}

// Keeps the `beam` best partial hypotheses per step; a hypothesis leaves the
// beam once it emits EOS or reaches max_len. Returns the best finished one.
// Scores are mean log-probability per generated token unless
// length_normalize is false (plain sum).
template <StepModel M>
Hypothesis beam_search(const M& model, int beam, int max_len, bool length_normalize = true) {
  if (beam < 1) throw std::invalid_argument("beam_search: beam must be >= 1");
  using State = typename M::State;
  struct Live {
    Hypothesis hyp;
    State state;
  };
  std::vector<Live> live;
  {
    Hypothesis h;
    h.ids = {Vocabulary::kBos};
    if (max_len <= 1) {
      h.finished = true;
      return h;
    }
    live.push_back({std::move(h), model.initial_state()});
  }
  std::vector<Hypothesis> finished;
  while (!live.empty()) {
    struct Cand {
      std::size_t parent;
      int token;
      double logprob;
      double score;
    };
    std::vector<Cand> cands;
    std::vector<State> next_states;
    next_states.reserve(live.size());
    for (std::size_t p = 0; p < live.size(); ++p) {
      auto [logp, next] = model.step(live[p].state, live[p].hyp.ids.back());
      next_states.push_back(std::move(next));
      const std::size_t generated = live[p].hyp.ids.size();
      for (Eigen::Index v = 0; v < logp.size(); ++v) {
        const double lp = live[p].hyp.logprob + logp(v);
        cands.push_back({p, static_cast<int>(v), lp, hypothesis_score(lp, generated, length_normalize)});
      }
    }
    const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(beam), cands.size());
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.score > b.score; });
    std::vector<Live> next_live;
    for (std::size_t k = 0; k < keep; ++k) {
      const Cand& c = cands[k];
      Hypothesis h = live[c.parent].hyp;
      h.ids.push_back(c.token);
      h.logprob = c.logprob;
      h.score = c.score;
      if (c.token == Vocabulary::kEos || static_cast<int>(h.ids.size()) >= max_len) {
        h.finished = true;
        finished.push_back(std::move(h));
      } else {
        next_live.push_back({std::move(h), next_states[c.parent]});
      }
    }
    live = std::move(next_live);
  }
  auto best = std::max_element(finished.begin(), finished.end(),
                               [](const Hypothesis& a, const Hypothesis& b) { return a.score < b.score; });
  return *best;
}

// Step model over one sample's memory, evaluated without graph recording.
class CaseStepper {
 public:
  using State = DecoderState;

  CaseStepper(const Decoder& dec, Memory mem) : dec_(&dec), mem_(std::move(mem)) {
    if (mem_.batch() != 1) throw std::invalid_argument("CaseStepper: memory must hold one sample");
  }

  State initial_state() const {
    ag::NoGradGuard ng;
    return dec_->initial_state(mem_);
  }

  std::pair<Vector, State> step(const State& s, int token) const {
    ag::NoGradGuard ng;
    StepOutput so = dec_->step(s, {token}, mem_);
    Matrix lp = ag::log_softmax_rows(so.logits).value();
    return {lp.row(0).transpose(), so.state};
  }

  int vocab_size() const { return dec_->vocab_size(); }

 private:
  const Decoder* dec_;
  Memory mem_;
};

// ---------------------------------------------------------------------------
// Batched rollouts used by self-critical training

// Greedy decode of every sample; returns generated ids without BOS.
inline std::vector<std::vector<int>> batch_greedy(const Decoder& dec, const Memory& mem, int max_len) {
  ag::NoGradGuard ng;
  const auto b = static_cast<std::size_t>(mem.batch());
  std::vector<std::vector<int>> out(b);
  std::vector<int> last(b, Vocabulary::kBos);
  std::vector<bool> done(b, false);
  DecoderState st = dec.initial_state(mem);
  for (int len = 1; len < max_len; ++len) {
    StepOutput so = dec.step(st, last, mem);
    st = so.state;
    bool all_done = true;
    for (std::size_t i = 0; i < b; ++i) {
      if (done[i]) {
        last[i] = Vocabulary::kPad;
        continue;
      }
      Eigen::Index arg = 0;
      so.logits.value().row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
      last[i] = static_cast<int>(arg);
      out[i].push_back(last[i]);
      if (last[i] == Vocabulary::kEos) done[i] = true;
      all_done = all_done && done[i];
    }
    if (all_done) break;
  }
  return out;
}

struct BatchSample {
  std::vector<std::vector<int>> ids;  // generated ids without BOS
  Var logprob_sum;                    // B x 1, differentiable
};

inline BatchSample batch_sample(const Decoder& dec, const Memory& mem, int max_len, std::mt19937_64& rng) {
  const auto b = static_cast<std::size_t>(mem.batch());
  BatchSample out;
  out.ids.resize(b);
  std::vector<int> last(b, Vocabulary::kBos);
  std::vector<bool> done(b, false);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  DecoderState st = dec.initial_state(mem);
  for (int len = 1; len < max_len; ++len) {
    StepOutput so = dec.step(st, last, mem);
    st = so.state;
    Var logp = ag::log_softmax_rows(so.logits);
    std::vector<int> chosen(b, -1);
    bool all_done = true;
    for (std::size_t i = 0; i < b; ++i) {
      if (done[i]) {
        last[i] = Vocabulary::kPad;
        continue;
      }
      auto row = logp.value().row(static_cast<Eigen::Index>(i));
      double x = u(rng);
      int tok = static_cast<int>(row.size()) - 1;
      for (Eigen::Index k = 0; k < row.size(); ++k) {
        x -= std::exp(row(k));
        if (x < 0.0) {
          tok = static_cast<int>(k);
          break;
        }
      }
      chosen[i] = tok;
      last[i] = tok;
      out.ids[i].push_back(tok);
      if (tok == Vocabulary::kEos) done[i] = true;
      all_done = all_done && done[i];
    }
    Var picked = ag::pick(logp, chosen);
    out.logprob_sum = out.logprob_sum.defined() ? ag::add(out.logprob_sum, picked) : picked;
    if (all_done) break;
  }
  if (!out.logprob_sum.defined()) out.logprob_sum = Var::constant(Matrix::Zero(static_cast<Eigen::Index>(b), 1));
  return out;
}

}  // namespace mvcodot::generator
