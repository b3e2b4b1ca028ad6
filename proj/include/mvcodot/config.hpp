#pragma once

// Run configuration, its text format and profiles.
//
// File format: one `key = value` pair per line; `#` starts a comment; blank
// lines are ignored. Keys are dotted module paths (e.g. `dot.tau_s`).
// Unknown keys and unparsable values raise ConfigError naming the key.

#include "mvcodot/errors.hpp"

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <type_traits>
#include <string>
#include <vector>

namespace mvcodot {

enum class AblationMode { base_cat, mvco_cat, mvco_fusion, mvco_dot };

inline const char* to_string(AblationMode m) {
  switch (m) {
    case AblationMode::base_cat:
      return "base_cat";
    case AblationMode::mvco_cat:
      return "mvco_cat";
    case AblationMode::mvco_fusion:
      return "mvco_fusion";
    case AblationMode::mvco_dot:
      return "mvco_dot";
  }
  return "?";
}

inline AblationMode parse_mode(const std::string& s) {
  if (s == "base_cat") return AblationMode::base_cat;
  if (s == "mvco_cat") return AblationMode::mvco_cat;
  if (s == "mvco_fusion") return AblationMode::mvco_fusion;
  if (s == "mvco_dot") return AblationMode::mvco_dot;
  throw ConfigError("unknown ablation mode '" + s + "' (expected base_cat, mvco_cat, mvco_fusion, mvco_dot)");
}

inline bool uses_contrastive(AblationMode m) { return m != AblationMode::base_cat; }
inline bool uses_concat_input(AblationMode m) { return m == AblationMode::base_cat || m == AblationMode::mvco_cat; }

struct Config {
  struct Data {
    int cases = 1000;
    int findings = 4;
    double noise = 0.3;
    std::uint64_t seed = 7;
    int image_size = 16;
    std::string path;
    int min_freq = 5;
    int max_len = 114;
    std::uint64_t split_seed = 17;
  } data;

  struct Vision {
    int grid = 4;
    int feature_dim = 32;
    int latent_dim = 64;
    int phi_depth = 1;
    std::uint64_t extractor_seed = 1234;
    std::string features_path;
  } vision;

  struct Dot {
    double tau_s = 0.3;
    int hidden_dim = 32;
    std::string pooling = "mean";
    std::string gumbel_form = "standard";
  } dot;

  struct Gen {
    int layers = 2;
    int heads = 2;
    int ffn_dim = 128;
    int hidden = 64;
    int embed = 32;
    bool shared_decoder = true;
    int beam = 2;
    bool length_norm = true;
  } gen;

  struct Mvco {
    double tau_c = 0.1;
    int proj_dim = 64;
    bool symmetric = true;
  } mvco;

  struct Train {
    std::string mode = "mvco_dot";
    std::uint64_t seed = 1;
    int pretrain_epochs = 30;
    int rl_epochs = 10;
    int batch = 8;
    int rl_batch = 8;
    double base_lr = 1e-3;
    double rl_lr = 1e-4;
    int warmup = 200;
    double cosine_period = 15.0;
    double rl_floor_ratio = 0.01;
    int gen_per_cycle = 4;
    int con_per_cycle = 1;
    bool rl_alternate = false;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 5.0;
    int val_every = 1;
  } train;

  std::string reward_weights = "2,2,1,1,2,2";

  struct Eval {
    std::string decode = "beam";
  } eval;
};

namespace config_detail {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

inline long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    long long d = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace config_detail

struct ConfigKey {
  std::string key;
  std::string help;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

inline const std::vector<ConfigKey>& config_keys() {
  using namespace config_detail;
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    auto add_int = [&k](std::string key, std::string help, auto access, long long lo) {
      k.push_back({key, std::move(help), [access](const Config& c) { return std::to_string(access(const_cast<Config&>(c))); },
                   [access, key, lo](Config& c, const std::string& v) {
                     const long long x = parse_int(key, v);
                     if (x < lo) throw ConfigError("config key '" + key + "': must be >= " + std::to_string(lo));
                     access(c) = static_cast<std::remove_reference_t<decltype(access(c))>>(x);
                   }});
    };
    auto add_double = [&k](std::string key, std::string help, auto access, bool positive) {
      k.push_back({key, std::move(help), [access](const Config& c) { return format_double(access(const_cast<Config&>(c))); },
                   [access, key, positive](Config& c, const std::string& v) {
                     const double x = parse_double(key, v);
                     if (positive ? !(x > 0.0) : !(x >= 0.0)) {
                       throw ConfigError("config key '" + key + (positive ? "': must be > 0" : "': must be >= 0"));
                     }
                     access(c) = x;
                   }});
    };
    auto add_bool = [&k](std::string key, std::string help, auto access) {
      k.push_back({key, std::move(help), [access](const Config& c) { return access(const_cast<Config&>(c)) ? std::string("true") : std::string("false"); },
                   [access, key](Config& c, const std::string& v) { access(c) = parse_bool(key, v); }});
    };
    auto add_string = [&k](std::string key, std::string help, auto access, std::vector<std::string> allowed) {
      k.push_back({key, std::move(help), [access](const Config& c) { return access(const_cast<Config&>(c)); },
                   [access, key, allowed](Config& c, const std::string& v) {
                     if (!allowed.empty()) {
                       bool ok = false;
                       for (const auto& a : allowed) ok = ok || a == v;
                       if (!ok) {
                         std::string list;
                         for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
                         throw ConfigError("config key '" + key + "': expected one of {" + list + "}, got '" + v + "'");
                       }
                     }
                     access(c) = v;
                   }});
    };

    add_int("data.cases", "number of synthetic cases", [](Config& c) -> int& { return c.data.cases; }, 10);
    add_int("data.findings", "latent findings per synthetic case", [](Config& c) -> int& { return c.data.findings; }, 1);
    add_double("data.noise", "pixel noise standard deviation", [](Config& c) -> double& { return c.data.noise; }, false);
    add_int("data.seed", "synthetic dataset seed", [](Config& c) -> std::uint64_t& { return c.data.seed; }, 0);
    add_int("data.image_size", "image height and width", [](Config& c) -> int& { return c.data.image_size; }, 4);
    add_string("data.path", "external JSONL dataset (empty = synthesise)", [](Config& c) -> std::string& { return c.data.path; }, {});
    add_int("data.min_freq", "minimum token frequency kept in the vocabulary", [](Config& c) -> int& { return c.data.min_freq; }, 1);
    add_int("data.max_len", "maximum encoded report length including BOS/EOS", [](Config& c) -> int& { return c.data.max_len; }, 2);
    add_int("data.split_seed", "train/val/test split seed", [](Config& c) -> std::uint64_t& { return c.data.split_seed; }, 0);

    add_int("vision.grid", "region grid side (regions = grid^2)", [](Config& c) -> int& { return c.vision.grid; }, 1);
    add_int("vision.feature_dim", "region feature size D", [](Config& c) -> int& { return c.vision.feature_dim; }, 1);
    add_int("vision.latent_dim", "projected latent size d", [](Config& c) -> int& { return c.vision.latent_dim; }, 1);
    add_int("vision.phi_depth", "affine+ELU layers per view projection", [](Config& c) -> int& { return c.vision.phi_depth; }, 1);
    add_int("vision.extractor_seed", "seed of the frozen convolutional extractor", [](Config& c) -> std::uint64_t& { return c.vision.extractor_seed; }, 0);
    add_string("vision.features_path", "precomputed feature archive (empty = extract)", [](Config& c) -> std::string& { return c.vision.features_path; }, {});

    add_double("dot.tau_s", "Gumbel-Softmax temperature", [](Config& c) -> double& { return c.dot.tau_s; }, true);
    add_int("dot.hidden_dim", "confidence head hidden size", [](Config& c) -> int& { return c.dot.hidden_dim; }, 1);
    add_string("dot.pooling", "global pooling over regions", [](Config& c) -> std::string& { return c.dot.pooling; }, {"mean"});
    add_string("dot.gumbel_form", "noise placement in the relaxed sample", [](Config& c) -> std::string& { return c.dot.gumbel_form; }, {"standard", "printed"});

    add_int("gen.layers", "self-attention encoder blocks", [](Config& c) -> int& { return c.gen.layers; }, 0);
    add_int("gen.heads", "attention heads per encoder block", [](Config& c) -> int& { return c.gen.heads; }, 1);
    add_int("gen.ffn_dim", "encoder feed-forward width", [](Config& c) -> int& { return c.gen.ffn_dim; }, 1);
    add_int("gen.hidden", "decoder LSTM hidden size H", [](Config& c) -> int& { return c.gen.hidden; }, 1);
    add_int("gen.embed", "word embedding size", [](Config& c) -> int& { return c.gen.embed; }, 1);
    add_bool("gen.shared_decoder", "twin decoder streams share parameters", [](Config& c) -> bool& { return c.gen.shared_decoder; });
    add_int("gen.beam", "beam width for evaluation", [](Config& c) -> int& { return c.gen.beam; }, 1);
    add_bool("gen.length_norm", "beam scores are mean log-probability per token", [](Config& c) -> bool& { return c.gen.length_norm; });

    add_double("mvco.tau_c", "contrastive temperature", [](Config& c) -> double& { return c.mvco.tau_c; }, true);
    add_int("mvco.proj_dim", "semantic projection size", [](Config& c) -> int& { return c.mvco.proj_dim; }, 1);
    add_bool("mvco.symmetric", "average both anchor directions", [](Config& c) -> bool& { return c.mvco.symmetric; });

    add_string("train.mode", "ablation wiring", [](Config& c) -> std::string& { return c.train.mode; }, {"base_cat", "mvco_cat", "mvco_fusion", "mvco_dot"});
    add_int("train.seed", "training seed", [](Config& c) -> std::uint64_t& { return c.train.seed; }, 0);
    add_int("train.pretrain_epochs", "cross-entropy/contrastive epochs", [](Config& c) -> int& { return c.train.pretrain_epochs; }, 0);
    add_int("train.rl_epochs", "self-critical epochs", [](Config& c) -> int& { return c.train.rl_epochs; }, 0);
    add_int("train.batch", "pretraining batch size", [](Config& c) -> int& { return c.train.batch; }, 1);
    add_int("train.rl_batch", "self-critical batch size", [](Config& c) -> int& { return c.train.rl_batch; }, 1);
    add_double("train.base_lr", "peak pretraining learning rate", [](Config& c) -> double& { return c.train.base_lr; }, true);
    add_double("train.rl_lr", "initial self-critical learning rate", [](Config& c) -> double& { return c.train.rl_lr; }, true);
    add_int("train.warmup", "warm-up steps of the inverse-sqrt schedule", [](Config& c) -> int& { return c.train.warmup; }, 1);
    add_double("train.cosine_period", "cosine annealing period in epochs", [](Config& c) -> double& { return c.train.cosine_period; }, true);
    add_double("train.rl_floor_ratio", "cosine floor as a fraction of rl_lr", [](Config& c) -> double& { return c.train.rl_floor_ratio; }, false);
    add_int("train.gen_per_cycle", "generation steps per alternation cycle", [](Config& c) -> int& { return c.train.gen_per_cycle; }, 1);
    add_int("train.con_per_cycle", "contrastive steps per alternation cycle", [](Config& c) -> int& { return c.train.con_per_cycle; }, 0);
    add_bool("train.rl_alternate", "keep contrastive steps during self-critical training", [](Config& c) -> bool& { return c.train.rl_alternate; });
    add_double("train.adam_beta1", "Adam beta1", [](Config& c) -> double& { return c.train.adam_beta1; }, false);
    add_double("train.adam_beta2", "Adam beta2", [](Config& c) -> double& { return c.train.adam_beta2; }, false);
    add_double("train.adam_eps", "Adam epsilon", [](Config& c) -> double& { return c.train.adam_eps; }, true);
    add_double("train.clip_norm", "global gradient norm clip (0 = off)", [](Config& c) -> double& { return c.train.clip_norm; }, false);
    add_int("train.val_every", "epochs between validation passes (0 = never)", [](Config& c) -> int& { return c.train.val_every; }, 0);

    k.push_back({"reward.weights", "mixed reward weights for B1,B2,B3,B4,ME,RO",
                 [](const Config& c) { return c.reward_weights; },
                 [](Config& c, const std::string& v) {
                   std::stringstream ss(v);
                   std::string item;
                   int n = 0;
                   while (std::getline(ss, item, ',')) {
                     if (parse_double("reward.weights", trim(item)) < 0.0) {
                       throw ConfigError("config key 'reward.weights': weights must be nonnegative");
                     }
                     ++n;
                   }
                   if (n != 6) throw ConfigError("config key 'reward.weights': expected 6 comma-separated weights");
                   c.reward_weights = v;
                 }});
    add_string("eval.decode", "decoding for evaluation", [](Config& c) -> std::string& { return c.eval.decode; }, {"beam", "greedy"});
    return k;
  }();
  return keys;
}

inline const ConfigKey& find_config_key(const std::string& key) {
  for (const auto& k : config_keys()) {
    if (k.key == key) return k;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline void set_config_value(Config& c, const std::string& key, const std::string& value) {
  find_config_key(key).set(c, config_detail::trim(value));
}

inline std::string get_config_value(const Config& c, const std::string& key) { return find_config_key(key).get(c); }

// Applies "key=value" overrides in order.
inline void apply_overrides(Config& c, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not of the form key=value");
    set_config_value(c, config_detail::trim(o.substr(0, eq)), o.substr(eq + 1));
  }
}

inline void apply_config_text(Config& c, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    set_config_value(c, config_detail::trim(line.substr(0, eq)), line.substr(eq + 1));
  }
}

inline void apply_config_file(Config& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(c, ss.str());
}

// Fully resolved config, one key per line in registry order.
inline std::string config_to_text(const Config& c) {
  std::string out;
  for (const auto& k : config_keys()) out += k.key + " = " + k.get(c) + "\n";
  return out;
}

// `desk`: CPU-minute defaults. `paper`: the published full-scale settings.
inline Config profile(const std::string& name) {
  Config c;
  if (name == "desk") return c;
  if (name == "paper") {
    c.data.cases = 3111;
    c.vision.grid = 7;
    c.vision.feature_dim = 2048;
    c.vision.latent_dim = 1024;
    c.data.image_size = 224;
    c.gen.layers = 4;
    c.gen.heads = 8;
    c.gen.ffn_dim = 4096;
    c.gen.hidden = 1024;
    c.gen.embed = 1024;
    c.mvco.proj_dim = 1024;
    c.train.pretrain_epochs = 60;
    c.train.rl_epochs = 60;
    c.train.batch = 6;
    c.train.rl_batch = 2;
    c.train.base_lr = 1e-4;
    c.train.rl_lr = 1e-5;
    c.train.warmup = 10000;
    c.train.gen_per_cycle = 1;
    return c;
  }
  throw ConfigError("unknown profile '" + name + "' (expected desk or paper)");
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string config_hash(const Config& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(config_to_text(c))));
  return buf;
}

}  // namespace mvcodot
