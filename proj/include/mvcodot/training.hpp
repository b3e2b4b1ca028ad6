#pragma once

// Two-phase training: alternating generation / contrastive pretraining under
// an inverse-square-root warmup, then self-critical fine-tuning with the
// mixed reward under cosine annealing with restarts.

#include "mvcodot/checkpoint.hpp"
#include "mvcodot/config.hpp"
#include "mvcodot/data.hpp"
#include "mvcodot/metrics.hpp"
#include "mvcodot/model.hpp"
#include "mvcodot/vision.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace mvcodot {

// ---------------------------------------------------------------------------
// Data preparation

struct PreparedData {
  data::Vocabulary vocab;
  std::vector<PreparedCase> train;
  std::vector<PreparedCase> val;
  std::vector<PreparedCase> test;
  Eigen::Index regions = 0;
  Eigen::Index feature_dim = 0;
};

inline std::vector<data::Case> load_cases(const Config& cfg) {
  if (!cfg.data.path.empty()) return data::load_external_dataset(cfg.data.path);
  data::SynthOptions o;
  o.n_cases = cfg.data.cases;
  o.n_findings = cfg.data.findings;
  o.noise_level = cfg.data.noise;
  o.seed = cfg.data.seed;
  o.image_size = cfg.data.image_size;
  return data::generate_synthetic_dataset(o);
}

inline std::unique_ptr<vision::FeatureExtractor> make_extractor(const Config& cfg, const data::Case& sample) {
  if (!cfg.vision.features_path.empty()) {
    return std::make_unique<vision::PrecomputedFeatureExtractor>(vision::FeatureArchive::load(cfg.vision.features_path));
  }
  if (sample.frontal.height != sample.frontal.width) throw DataError("images must be square");
  vision::ConvExtractorOptions o;
  o.channels = sample.frontal.channels;
  o.image_size = sample.frontal.height;
  o.grid = cfg.vision.grid;
  o.feature_dim = cfg.vision.feature_dim;
  o.seed = cfg.vision.extractor_seed;
  return std::make_unique<vision::ConvFeatureExtractor>(o);
}

inline PreparedData prepare_data(const Config& cfg, const std::vector<data::Case>& cases) {
  data::DatasetSplit split = data::split_dataset(cases, cfg.data.split_seed);
  std::vector<std::vector<std::string>> train_reports;
  for (const auto& c : split.train) train_reports.push_back(c.report);
  PreparedData out;
  out.vocab = data::build_vocabulary(train_reports, cfg.data.min_freq);
  auto extractor = make_extractor(cfg, cases.front());
  out.regions = extractor->regions();
  out.feature_dim = extractor->feature_dim();
  auto convert = [&](const std::vector<data::Case>& in) {
    std::vector<PreparedCase> v;
    v.reserve(in.size());
    for (const auto& c : in) {
      PreparedCase p;
      p.id = c.id;
      p.frontal = extractor->extract(c.frontal, ViewTag::frontal, c.id).regions;
      p.lateral = extractor->extract(c.lateral, ViewTag::lateral, c.id).regions;
      p.ids = data::encode_report(c.report, out.vocab, cfg.data.max_len);
      p.reference = c.report;
      v.push_back(std::move(p));
    }
    return v;
  };
  out.train = convert(split.train);
  out.val = convert(split.val);
  out.test = convert(split.test);
  return out;
}

inline PreparedData prepare_data(const Config& cfg) { return prepare_data(cfg, load_cases(cfg)); }

// ---------------------------------------------------------------------------
// Schedules

// Inverse-square-root warmup, normalised so lr(warmup) = base_lr. Steps are
// 1-based; step 0 is treated as step 1.
inline double lr_pretrain(double step, double base_lr, double warmup) {
  if (warmup <= 0.0) throw std::invalid_argument("lr_pretrain: warmup must be positive");
  const double s = std::max(step, 1.0);
  return base_lr * std::min(std::pow(s, -0.5), s * std::pow(warmup, -1.5)) / std::pow(warmup, -0.5);
}

// Cosine annealing from rl_lr down to floor_ratio * rl_lr, restarting every
// `period` epochs.
inline double lr_rl(double epoch, double rl_lr, double period, double floor_ratio) {
  if (period <= 0.0) throw std::invalid_argument("lr_rl: period must be positive");
  const double floor = floor_ratio * rl_lr;
  const double phase = std::fmod(epoch, period) / period;
  return floor + 0.5 * (rl_lr - floor) * (1.0 + std::cos(std::numbers::pi * phase));
}

enum class Branch { generation, contrastive };

// Cycle of `gen` generation steps followed by `con` contrastive steps.
inline Branch alternate_schedule(std::int64_t step, int gen, int con) {
  if (gen < 1 || con < 0) throw std::invalid_argument("alternate_schedule: need gen >= 1 and con >= 0");
  return step % (gen + con) < gen ? Branch::generation : Branch::contrastive;
}

inline metrics::RewardWeights parse_reward_weights(const std::string& s) {
  metrics::RewardWeights w;
  std::stringstream ss(s);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= 6) throw ConfigError("reward.weights: expected 6 weights");
    w.w[i++] = std::stod(item);
  }
  if (i != 6) throw ConfigError("reward.weights: expected 6 weights");
  w.validate();
  return w;
}

// ---------------------------------------------------------------------------
// Train log

class TrainLog {
 public:
  void append(nlohmann::json record) { records_.push_back(std::move(record)); }
  const std::vector<nlohmann::json>& records() const { return records_; }

  std::string to_jsonl() const {
    std::string out;
    for (const auto& r : records_) out += r.dump() + "\n";
    return out;
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write train log " + path.string());
    f << to_jsonl();
  }

  static TrainLog read(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read train log " + path.string());
    TrainLog log;
    std::string line;
    while (std::getline(f, line)) {
      if (!line.empty()) log.append(nlohmann::json::parse(line));
    }
    return log;
  }

  std::vector<nlohmann::json> of_type(const std::string& type) const {
    std::vector<nlohmann::json> out;
    for (const auto& r : records_)
      if (r.value("type", "") == type) out.push_back(r);
    return out;
  }

 private:
  std::vector<nlohmann::json> records_;
};

inline nlohmann::json metrics_json(const metrics::MetricReport& m) {
  return {{"B-1", m.bleu[0]}, {"B-2", m.bleu[1]}, {"B-3", m.bleu[2]},
          {"B-4", m.bleu[3]}, {"ME", m.meteor},   {"RO", m.rouge_l}};
}

// ---------------------------------------------------------------------------
// Evaluation

enum class Decode { greedy, beam };

inline Decode parse_decode(const std::string& s) {
  if (s == "greedy") return Decode::greedy;
  if (s == "beam") return Decode::beam;
  throw ConfigError("unknown decode '" + s + "' (expected greedy or beam)");
}

struct EvalResult {
  metrics::MetricReport report;
  std::vector<metrics::Tokens> candidates;
  double mean_reward = 0.0;
};

inline std::vector<const PreparedCase*> case_pointers(const std::vector<PreparedCase>& cases, std::size_t begin,
                                                      std::size_t end) {
  std::vector<const PreparedCase*> out;
  for (std::size_t i = begin; i < end; ++i) out.push_back(&cases[i]);
  return out;
}

// Decodes every case with deterministic routing from `available`.
inline EvalResult evaluate(const Model& model, const std::vector<PreparedCase>& cases, const data::Vocabulary& vocab,
                           Decode decode, const std::set<ViewTag>& available = {ViewTag::frontal, ViewTag::lateral},
                           const metrics::RewardWeights& weights = {}) {
  ag::NoGradGuard ng;
  EvalResult r;
  const Config& cfg = model.config();
  const int max_len = cfg.data.max_len;
  const std::size_t chunk = 64;
  for (std::size_t begin = 0; begin < cases.size(); begin += chunk) {
    const std::size_t end = std::min(cases.size(), begin + chunk);
    Batch b = make_batch(case_pointers(cases, begin, end));
    GenerationInput in = model.generation_input(b, false, nullptr, available);
    generator::Memory mem = model.encode(in.features);
    const auto& dec = model.decoder();
    if (decode == Decode::greedy) {
      for (const auto& ids : generator::batch_greedy(dec, mem, max_len)) r.candidates.push_back(data::decode_ids(ids, vocab));
      continue;
    }
    const Eigen::Index R = mem.regions;
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      generator::Memory one{Var::constant(mem.encoded.value().middleRows(i * R, R)),
                            Var::constant(mem.keys.value().middleRows(i * R, R)), R};
      generator::CaseStepper stepper(dec, std::move(one));
      auto hyp = generator::beam_search(stepper, cfg.gen.beam, max_len, cfg.gen.length_norm);
      r.candidates.push_back(data::decode_ids(hyp.ids, vocab));
    }
  }
  std::vector<std::vector<metrics::Tokens>> refs;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    refs.push_back({cases[i].reference});
    r.mean_reward += metrics::mixed_reward(r.candidates[i], cases[i].reference, weights);
  }
  if (!cases.empty()) r.mean_reward /= static_cast<double>(cases.size());
  r.report = metrics::corpus_metrics(r.candidates, refs);
  return r;
}

// ---------------------------------------------------------------------------
// Self-critical objective

// -(1/B) sum_b (r_sample_b - r_greedy_b) * logprob_sum_b
inline Var scst_loss(const Var& logprob_sum, const std::vector<double>& r_sample, const std::vector<double>& r_greedy) {
  const auto b = static_cast<Eigen::Index>(r_sample.size());
  if (logprob_sum.rows() != b || static_cast<Eigen::Index>(r_greedy.size()) != b || logprob_sum.cols() != 1) {
    throw std::invalid_argument("scst_loss: one reward pair per sample required");
  }
  Matrix adv(b, 1);
  for (Eigen::Index i = 0; i < b; ++i) adv(i, 0) = r_sample[static_cast<std::size_t>(i)] - r_greedy[static_cast<std::size_t>(i)];
  return ag::scale(ag::sum(ag::mul_const(logprob_sum, adv)), -1.0 / static_cast<double>(b));
}

inline std::vector<double> sequence_rewards(const std::vector<std::vector<int>>& ids, const std::vector<metrics::Tokens>& refs,
                                            const data::Vocabulary& vocab, const metrics::RewardWeights& w) {
  std::vector<double> r;
  for (std::size_t i = 0; i < ids.size(); ++i) r.push_back(metrics::mixed_reward(data::decode_ids(ids[i], vocab), refs[i], w));
  return r;
}

// ---------------------------------------------------------------------------
// Trainer

struct StepResult {
  double loss = 0.0;
  double lr = 0.0;
};

class Trainer {
 public:
  Trainer(const Config& cfg, const PreparedData& data)
      : cfg_(cfg),
        data_(&data),
        model_(cfg, data.vocab.size(), data.regions, data.feature_dim),
        adam_(adam_settings(cfg)),
        adam_con_(adam_settings(cfg)),
        weights_(parse_reward_weights(cfg.reward_weights)),
        rng_(cfg.train.seed) {}

  Model& model() { return model_; }
  const Model& model() const { return model_; }
  nn::Adam& optimizer() { return adam_; }
  nn::Adam& contrastive_optimizer() { return adam_con_; }
  const checkpoint::TrainerState& state() const { return state_; }
  std::mt19937_64& rng() { return rng_; }
  const PreparedData& data() const { return *data_; }

  // Each branch follows the warmup schedule over its own update count.
  double current_pretrain_lr(Branch b = Branch::generation) const {
    const nn::Adam& opt = b == Branch::generation ? adam_ : adam_con_;
    return lr_pretrain(static_cast<double>(opt.steps() + 1), cfg_.train.base_lr, cfg_.train.warmup);
  }
  double current_rl_lr() const {
    return lr_rl(static_cast<double>(state_.epoch), cfg_.train.rl_lr, cfg_.train.cosine_period, cfg_.train.rl_floor_ratio);
  }

  // One optimizer update on the token-level XE loss of the generation branch.
  StepResult pretrain_step_generation(const Batch& b) {
    model_.params().zero_grad();
    GenerationInput in = model_.generation_input(b, true, &rng_);
    count_actions(in.actions);
    generator::Memory mem = model_.encode(in.features);
    auto tf = generator::teacher_force(model_.decoder(), mem, b.ids);
    Var loss = generator::xe_loss(tf.logits, tf.targets);
    loss.backward();
    StepResult r{loss.item(), current_pretrain_lr()};
    adam_.step(model_.params(), r.lr);
    ++state_.step;
    return r;
  }

  // One optimizer update on the contrastive loss between the two view streams.
  StepResult pretrain_step_contrastive(const Batch& b) {
    model_.params().zero_grad();
    Var loss = contrastive_loss(b);
    loss.backward();
    StepResult r{loss.item(), current_pretrain_lr(Branch::contrastive)};
    adam_con_.step(model_.params(), r.lr);
    ++state_.step;
    return r;
  }

  Var contrastive_loss(const Batch& b) const {
    auto [f, l] = model_.paired_semantics(b);
    return mvco::mvco_loss(f, l, cfg_.mvco.tau_c, cfg_.mvco.symmetric);
  }

  // One self-critical update: sampled rollout baselined by the greedy one.
  StepResult scst_step(const Batch& b) {
    model_.params().zero_grad();
    GenerationInput in = model_.generation_input(b, true, &rng_);
    count_actions(in.actions);
    generator::Memory mem = model_.encode(in.features);
    const auto greedy = generator::batch_greedy(model_.decoder(), mem, cfg_.data.max_len);
    auto sample = generator::batch_sample(model_.decoder(), mem, cfg_.data.max_len, rng_);
    const auto rs = sequence_rewards(sample.ids, b.references, data_->vocab, weights_);
    const auto rg = sequence_rewards(greedy, b.references, data_->vocab, weights_);
    Var loss = scst_loss(sample.logprob_sum, rs, rg);
    loss.backward();
    StepResult r{loss.item(), current_rl_lr()};
    adam_.step(model_.params(), r.lr);
    ++state_.rl_step;
    return r;
  }

  // Runs (or resumes) both phases to completion. `on_epoch` fires after
  // every epoch with the trainer in a checkpointable state.
  void run(TrainLog& log, const std::function<void(Trainer&)>& on_epoch = {}) {
    if (state_.phase == "pretrain") {
      while (state_.epoch < cfg_.train.pretrain_epochs) {
        run_epoch(log, false);
        ++state_.epoch;
        if (on_epoch) on_epoch(*this);
      }
      state_.phase = "rl";
      state_.epoch = 0;
      adam_ = nn::Adam(adam_settings(cfg_));
      adam_con_ = nn::Adam(adam_settings(cfg_));
    }
    if (state_.phase == "rl") {
      while (state_.epoch < cfg_.train.rl_epochs) {
        run_epoch(log, true);
        ++state_.epoch;
        if (on_epoch) on_epoch(*this);
      }
      state_.phase = "done";
    }
  }

  checkpoint::Checkpoint make_checkpoint(bool with_optimizer = true) const {
    checkpoint::Checkpoint ck;
    ck.config_text = config_to_text(cfg_);
    ck.vocabulary = data_->vocab.regular_tokens();
    ck.parameters = checkpoint::snapshot_parameters(model_.params());
    if (with_optimizer) {
      ck.optimizers["generation"] = checkpoint::capture(adam_);
      ck.optimizers["contrastive"] = checkpoint::capture(adam_con_);
      checkpoint::TrainerState t = state_;
      std::ostringstream os;
      os << rng_;
      t.rng_state = os.str();
      ck.trainer = t;
    }
    return ck;
  }

  void restore(const checkpoint::Checkpoint& ck) {
    if (ck.vocabulary != data_->vocab.regular_tokens()) throw CheckpointError("checkpoint vocabulary does not match data");
    checkpoint::restore_parameters(ck, model_.params());
    adam_ = nn::Adam(adam_settings(cfg_));
    adam_con_ = nn::Adam(adam_settings(cfg_));
    if (auto it = ck.optimizers.find("generation"); it != ck.optimizers.end()) checkpoint::apply(it->second, adam_);
    if (auto it = ck.optimizers.find("contrastive"); it != ck.optimizers.end()) checkpoint::apply(it->second, adam_con_);
    if (ck.trainer) {
      state_ = *ck.trainer;
      std::istringstream is(state_.rng_state);
      is >> rng_;
      if (!is) throw CheckpointError("corrupt rng state in checkpoint");
      state_.rng_state.clear();
    }
  }

 private:
  static nn::AdamSettings adam_settings(const Config& c) {
    return {c.train.adam_beta1, c.train.adam_beta2, c.train.adam_eps, c.train.clip_norm};
  }

  void count_actions(const std::vector<int>& actions) {
    for (int a : actions) ++action_counts_[static_cast<std::size_t>(a)];
  }

  void run_epoch(TrainLog& log, bool rl) {
    action_counts_ = {};
    std::vector<std::size_t> order(data_->train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng_);
    const std::size_t bs = static_cast<std::size_t>(rl ? cfg_.train.rl_batch : cfg_.train.batch);
    const bool contrastive = uses_contrastive(model_.mode()) && cfg_.train.con_per_cycle > 0 &&
                             (!rl || cfg_.train.rl_alternate);
    std::size_t next = 0;
    std::int64_t cycle = 0;
    Batch last;
    double sum_main = 0.0, sum_con = 0.0;
    int n_main = 0, n_con = 0;
    while (true) {
      const Branch br = contrastive ? alternate_schedule(cycle, cfg_.train.gen_per_cycle, cfg_.train.con_per_cycle)
                                    : Branch::generation;
      if (br == Branch::generation) {
        if (next >= order.size()) break;
        std::vector<const PreparedCase*> ptrs;
        for (std::size_t k = next; k < std::min(order.size(), next + bs); ++k) ptrs.push_back(&data_->train[order[k]]);
        next += bs;
        last = make_batch(ptrs);
        StepResult r = rl ? scst_step(last) : pretrain_step_generation(last);
        log.append({{"type", "step"}, {"phase", rl ? "rl" : "pretrain"}, {"epoch", state_.epoch},
                    {"kind", rl ? "rl" : "xe"}, {"loss", r.loss}, {"lr", r.lr}});
        sum_main += r.loss;
        ++n_main;
      } else {
        if (last.size() < 2) {
          ++cycle;
          continue;
        }
        StepResult r;
        if (rl) {
          model_.params().zero_grad();
          Var loss = contrastive_loss(last);
          loss.backward();
          r = {loss.item(), current_rl_lr()};
          adam_con_.step(model_.params(), r.lr);
        } else {
          r = pretrain_step_contrastive(last);
        }
        log.append({{"type", "step"}, {"phase", rl ? "rl" : "pretrain"}, {"epoch", state_.epoch},
                    {"kind", "mvco"}, {"loss", r.loss}, {"lr", r.lr}});
        sum_con += r.loss;
        ++n_con;
      }
      ++cycle;
    }
    nlohmann::json rec{{"type", "epoch"}, {"phase", rl ? "rl" : "pretrain"}, {"epoch", state_.epoch},
                       {"mean_loss", n_main ? sum_main / n_main : 0.0}};
    if (n_con) rec["mean_mvco"] = sum_con / n_con;
    const long total = action_counts_[0] + action_counts_[1] + action_counts_[2];
    if (total > 0) {
      nlohmann::json freq;
      for (int a = 0; a < dot::kNumActions; ++a) {
        freq[dot::action_name(a)] = static_cast<double>(action_counts_[static_cast<std::size_t>(a)]) / total;
      }
      rec["actions"] = freq;
    }
    const int every = cfg_.train.val_every;
    if (every > 0 && !data_->val.empty() && (state_.epoch + 1) % every == 0) {
      EvalResult v = evaluate(model_, data_->val, data_->vocab, Decode::greedy, {ViewTag::frontal, ViewTag::lateral}, weights_);
      rec["val"] = metrics_json(v.report);
      rec["val_reward"] = v.mean_reward;
    }
    log.append(std::move(rec));
  }

  Config cfg_;
  const PreparedData* data_;
  Model model_;
  nn::Adam adam_;      // generation and self-critical updates
  nn::Adam adam_con_;  // contrastive updates
  metrics::RewardWeights weights_;
  std::mt19937_64 rng_;
  checkpoint::TrainerState state_;
  std::array<long, dot::kNumActions> action_counts_{};
};

// Rebuilds a trained model from a checkpoint. The checkpoint's config
// snapshot is authoritative.
inline Config config_from_checkpoint(const checkpoint::Checkpoint& ck) {
  Config c;
  try {
    apply_config_text(c, ck.config_text);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config snapshot invalid: ") + e.what());
  }
  return c;
}

}  // namespace mvcodot
