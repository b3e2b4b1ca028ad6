// mvcodot command-line entry point.

#include "mvcodot.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace mvcodot;

namespace {

// Raised when an artifact already exists with different content.
class RunDirError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string profile = "desk";
  std::string config_file;
  std::vector<std::string> overrides;
  std::string runs = "runs";
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--profile", c.profile, "Base profile: desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--config", c.config_file, "Config file of key = value lines");
  cmd->add_option("--set", c.overrides, "Override a config key (key=value), repeatable");
  cmd->add_option("--runs", c.runs, "Root directory for run directories");
  cmd->add_flag("--force", c.force, "Overwrite existing artifacts");
}

Config resolve(const Common& c, const std::vector<std::pair<std::string, std::string>>& extra = {}) {
  Config cfg = profile(c.profile);
  if (!c.config_file.empty()) apply_config_file(cfg, c.config_file);
  apply_overrides(cfg, c.overrides);
  for (const auto& [k, v] : extra) set_config_value(cfg, k, v);
  return cfg;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes `content` unless the file already holds it; differing content is
// only replaced with --force.
void write_artifact(const fs::path& p, const std::string& content, bool force) {
  if (fs::exists(p) && !force) {
    if (read_file(p) == content) return;
    throw RunDirError(p.string() + " exists with different content (use --force)");
  }
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << content;
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

fs::path run_dir(const Common& c, const std::string& prefix, const Config& cfg, const std::string& seed) {
  return fs::path(c.runs) / (prefix + config_hash(cfg) + "-s" + seed);
}

std::string joined(const std::vector<std::uint64_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "-" : "") + std::to_string(v[i]);
  return s;
}

std::set<ViewTag> parse_views(const std::string& s) {
  if (s == "frontal") return {ViewTag::frontal};
  if (s == "lateral") return {ViewTag::lateral};
  if (s == "both") return {ViewTag::frontal, ViewTag::lateral};
  throw ConfigError("--views must be frontal, lateral or both, got '" + s + "'");
}

template <typename F>
std::string to_text(F&& write) {
  std::ostringstream os;
  write(os);
  return os.str();
}

std::string report_csv(const metrics::MetricReport& r) {
  return to_text([&](std::ostream& os) {
    os << metrics::kMetricHeader << "\n";
    metrics::write_csv_row(os, r);
    os << "\n";
  });
}

// A trained model rebuilt from a checkpoint together with its data.
struct Loaded {
  Config cfg;
  PreparedData data;
  std::unique_ptr<Trainer> trainer;
};

std::unique_ptr<Loaded> load_model(const std::string& path) {
  auto ck = checkpoint::load(path);
  auto l = std::make_unique<Loaded>();
  l->cfg = config_from_checkpoint(ck);
  l->data = prepare_data(l->cfg);
  l->trainer = std::make_unique<Trainer>(l->cfg, l->data);
  l->trainer->restore(ck);
  return l;
}

void print_epoch(const nlohmann::json& rec) {
  std::cerr << rec["phase"].get<std::string>() << " epoch " << rec["epoch"].get<long>() << " loss "
            << rec["mean_loss"].get<double>();
  if (rec.contains("mean_mvco")) std::cerr << " mvco " << rec["mean_mvco"].get<double>();
  if (rec.contains("val")) std::cerr << " val B-1 " << rec["val"]["B-1"].get<double>();
  std::cerr << "\n";
}

int cmd_synth(const Common& c, const std::vector<std::pair<std::string, std::string>>& extra) {
  Config cfg = resolve(c, extra);
  const auto cases = load_cases(cfg);
  const fs::path dir = run_dir(c, "synth-", cfg, std::to_string(cfg.data.seed));
  fs::create_directories(dir);
  const fs::path tmp = dir / "dataset.jsonl.tmp";
  data::export_dataset(cases, tmp);
  const std::string content = read_file(tmp);
  fs::remove(tmp);
  write_artifact(dir / "dataset.jsonl", content, c.force);
  write_artifact(dir / "config.txt", config_to_text(cfg), c.force);
  std::cout << (dir / "dataset.jsonl").string() << "\n";
  return 0;
}

int cmd_train(const Common& c, const std::vector<std::pair<std::string, std::string>>& extra, bool resume) {
  Config cfg = resolve(c, extra);
  const fs::path dir = run_dir(c, "", cfg, std::to_string(cfg.train.seed));
  const fs::path model_path = dir / "model.ckpt", last_path = dir / "last.ckpt", log_path = dir / "train_log.jsonl";
  if (fs::exists(model_path) && !c.force) {
    throw RunDirError(model_path.string() + " exists (use --force to retrain)");
  }
  fs::create_directories(dir);
  write_artifact(dir / "config.txt", config_to_text(cfg), true);
  PreparedData data = prepare_data(cfg);
  Trainer trainer(cfg, data);
  TrainLog log;
  if (resume && fs::exists(last_path)) {
    trainer.restore(checkpoint::load(last_path));
    if (fs::exists(log_path)) log = TrainLog::read(log_path);
    std::cerr << "resuming " << trainer.state().phase << " epoch " << trainer.state().epoch << "\n";
  }
  trainer.run(log, [&](Trainer& t) {
    print_epoch(log.records().back());
    checkpoint::save(t.make_checkpoint(true), last_path);
    log.write(log_path);
  });
  log.write(log_path);
  checkpoint::save(trainer.make_checkpoint(true), model_path);
  fs::remove(last_path);
  std::cout << dir.string() << "\n";
  return 0;
}

int cmd_eval(const Common& c, const std::string& ckpt, const std::string& views, const std::string& split,
             const std::string& decode) {
  auto l = load_model(ckpt);
  const auto& cases = split == "val" ? l->data.val : l->data.test;
  const std::string dec = decode.empty() ? l->cfg.eval.decode : decode;
  EvalResult r = evaluate(l->trainer->model(), cases, l->data.vocab, parse_decode(dec), parse_views(views),
                          parse_reward_weights(l->cfg.reward_weights));
  const std::string csv = report_csv(r.report);
  const fs::path dir = fs::path(ckpt).parent_path();
  const std::string stem = "eval-" + split + "-" + views + "-" + dec;
  write_artifact(dir / (stem + ".csv"), csv, c.force);
  std::string cands;
  for (std::size_t i = 0; i < r.candidates.size(); ++i) cands += cases[i].id + "\t" + data::join_tokens(r.candidates[i]) + "\n";
  write_artifact(dir / (stem + ".txt"), cands, c.force);
  std::cout << csv;
  return 0;
}

std::vector<metrics::Tokens> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  std::vector<metrics::Tokens> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(data::tokenize(line));
  return out;
}

int cmd_score(const Common& c, const std::string& cand_path, const std::string& ref_path, const std::string& out) {
  const auto cands = read_lines(cand_path);
  const auto refs = read_lines(ref_path);
  if (cands.size() != refs.size()) {
    throw DataError("candidates have " + std::to_string(cands.size()) + " lines, references " + std::to_string(refs.size()));
  }
  std::vector<std::vector<metrics::Tokens>> wrapped;
  for (const auto& r : refs) wrapped.push_back({r});
  const std::string csv = report_csv(metrics::corpus_metrics(cands, wrapped));
  if (!out.empty()) write_artifact(out, csv, c.force);
  std::cout << csv;
  return 0;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) v.push_back(static_cast<std::uint64_t>(config_detail::parse_int("--seeds", item)));
  if (v.empty()) throw ConfigError("--seeds is empty");
  return v;
}

int cmd_ablate(const Common& c, const std::string& seeds_text) {
  Config cfg = resolve(c);
  const auto seeds = parse_seeds(seeds_text);
  const fs::path dir = run_dir(c, "ablate-", cfg, joined(seeds));
  if (fs::exists(dir / "ablation.csv") && !c.force) throw RunDirError((dir / "ablation.csv").string() + " exists (use --force)");
  PreparedData data = prepare_data(cfg);
  auto res = experiments::run_ablation(cfg, data, seeds, [&](AblationMode m, std::uint64_t seed, experiments::TrainedRun& r) {
    write_artifact(dir / (std::string(to_string(m)) + "-s" + std::to_string(seed) + ".jsonl"), r.log.to_jsonl(), c.force);
    std::cerr << to_string(m) << " seed " << seed << " done\n";
  });
  const std::string csv = to_text([&](std::ostream& os) { res.write_csv(os); });
  write_artifact(dir / "ablation.csv", csv, c.force);
  std::cout << csv;
  return 0;
}

int cmd_domain_shift(const Common& c, const std::string& mvco_path, const std::string& dot_path, const std::string& decode) {
  auto a = load_model(mvco_path);
  auto b = load_model(dot_path);
  if (a->data.vocab.regular_tokens() != b->data.vocab.regular_tokens()) {
    throw CheckpointError("checkpoints were trained on different data");
  }
  const std::string dec = decode.empty() ? b->cfg.eval.decode : decode;
  auto res = experiments::run_domain_shift(a->trainer->model(), b->trainer->model(), b->data, parse_decode(dec));
  const fs::path dir = run_dir(c, "domain-shift-", b->cfg, std::to_string(b->cfg.train.seed));
  const std::string csv = to_text([&](std::ostream& os) { res.write_csv(os); });
  write_artifact(dir / ("domain_shift-" + dec + ".csv"), csv, c.force);
  std::cout << csv;
  for (const auto& row : res.rows) std::cout << "# " << row.model << " gap " << row.gap() << "\n";
  return 0;
}

int cmd_embed(const Common& c, const std::string& ckpt) {
  auto l = load_model(ckpt);
  auto a = experiments::run_embedding_analysis(l->trainer->model(), l->data.test);
  const fs::path dir = run_dir(c, "embed-", l->cfg, std::to_string(l->cfg.train.seed));
  std::string dist = "case,distance\n";
  for (std::size_t i = 0; i < a.distances.size(); ++i) dist += l->data.test[i].id + "," + config_detail::format_double(a.distances[i]) + "\n";
  write_artifact(dir / "distances.csv", dist, c.force);
  write_artifact(dir / "scatter.csv", to_text([&](std::ostream& os) { a.write_scatter_csv(os, l->data.test); }), c.force);
  const nlohmann::json summary{{"mode", l->cfg.train.mode}, {"mean", a.mean}, {"stddev", a.stddev}, {"cases", a.distances.size()}};
  write_artifact(dir / "summary.json", summary.dump(2) + "\n", c.force);
  std::cout << summary.dump() << "\n";
  return 0;
}

int cmd_sweep(const Common& c, const std::string& param, const std::string& values_text, const std::string& seeds_text) {
  Config cfg = resolve(c);
  const auto seeds = parse_seeds(seeds_text);
  std::vector<double> values;
  std::stringstream ss(values_text);
  std::string item;
  while (std::getline(ss, item, ',')) values.push_back(config_detail::parse_double("--values", item));
  if (values.empty()) throw ConfigError("--values is empty");
  const fs::path dir = run_dir(c, "sweep-" + param + "-", cfg, joined(seeds));
  if (fs::exists(dir / "sweep.csv") && !c.force) throw RunDirError((dir / "sweep.csv").string() + " exists (use --force)");
  PreparedData data = prepare_data(cfg);
  auto rows = experiments::run_temperature_sweep(cfg, data, param, values, seeds);
  const std::string csv = to_text([&](std::ostream& os) { experiments::write_sweep_csv(os, rows); });
  write_artifact(dir / "sweep.csv", csv, c.force);
  std::cout << csv;
  return 0;
}

std::string config_key_listing() {
  std::ostringstream os;
  const Config d = profile("desk");
  os << "Config keys (desk default):\n";
  for (const auto& k : config_keys()) os << "  " << k.key << " = " << k.get(d) << "    " << k.help << "\n";
  os << "Exit codes: 0 ok, 2 config error, 3 data error, 4 checkpoint error, 1 other failure.";
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view report generation: synthetic data, training, evaluation and experiments"};
  app.require_subcommand(1);
  app.footer(config_key_listing());

  Common common;
  std::vector<std::pair<std::string, std::string>> extra;

  auto* synth = app.add_subcommand("synth", "Generate the synthetic dataset as JSONL");
  add_common(synth, common);
  int cases = 0, findings = 0;
  std::uint64_t data_seed = 0;
  synth->add_option("--cases", cases, "Number of cases");
  synth->add_option("--findings", findings, "Number of latent findings");
  synth->add_option("--seed", data_seed, "Dataset seed");

  auto* train = app.add_subcommand("train", "Train one model and write a checkpoint and TrainLog");
  add_common(train, common);
  std::string mode;
  std::uint64_t train_seed = 0;
  bool resume = false;
  train->add_option("--mode", mode, "base_cat, mvco_cat, mvco_fusion or mvco_dot");
  train->add_option("--seed", train_seed, "Training seed");
  train->add_flag("--resume", resume, "Continue from the run directory's last epoch checkpoint");

  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a split");
  add_common(eval, common);
  std::string ckpt, views = "both", split = "test", decode;
  eval->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  eval->add_option("--views", views, "frontal, lateral or both");
  eval->add_option("--split", split, "val or test")->check(CLI::IsMember({"val", "test"}));
  eval->add_option("--decode", decode, "greedy or beam (default: eval.decode)");

  auto* score = app.add_subcommand("score", "Score line-aligned candidate and reference files");
  add_common(score, common);
  std::string cand_path, ref_path, out_path;
  score->add_option("--candidates", cand_path, "Candidate reports, one per line")->required();
  score->add_option("--references", ref_path, "Reference reports, one per line")->required();
  score->add_option("--out", out_path, "Also write the CSV here");

  auto* ablate = app.add_subcommand("ablate", "Train and score all four modes per seed");
  add_common(ablate, common);
  std::string seeds = "1,2,3";
  ablate->add_option("--seeds", seeds, "Comma-separated training seeds");

  auto* shift = app.add_subcommand("domain-shift", "Compare single- and two-view inference of two checkpoints");
  add_common(shift, common);
  std::string mvco_ckpt, dot_ckpt;
  shift->add_option("--mvco", mvco_ckpt, "Checkpoint trained without DoT")->required();
  shift->add_option("--dot", dot_ckpt, "Checkpoint trained with DoT")->required();
  shift->add_option("--decode", decode, "greedy or beam (default: eval.decode)");

  auto* embed = app.add_subcommand("embed-analysis", "Paired-view embedding distances and 2-D projection");
  add_common(embed, common);
  embed->add_option("--checkpoint", ckpt, "Checkpoint file")->required();

  auto* sweep = app.add_subcommand("sweep", "Temperature sweep over tau_c or tau_s");
  add_common(sweep, common);
  std::string param, values;
  sweep->add_option("--param", param, "tau_c or tau_s")->required();
  sweep->add_option("--values", values, "Comma-separated values")->required();
  sweep->add_option("--seeds", seeds, "Comma-separated training seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) {
      if (synth->count("--cases")) extra.emplace_back("data.cases", std::to_string(cases));
      if (synth->count("--findings")) extra.emplace_back("data.findings", std::to_string(findings));
      if (synth->count("--seed")) extra.emplace_back("data.seed", std::to_string(data_seed));
      return cmd_synth(common, extra);
    }
    if (*train) {
      if (train->count("--mode")) extra.emplace_back("train.mode", mode);
      if (train->count("--seed")) extra.emplace_back("train.seed", std::to_string(train_seed));
      return cmd_train(common, extra, resume);
    }
    if (*eval) return cmd_eval(common, ckpt, views, split, decode);
    if (*score) return cmd_score(common, cand_path, ref_path, out_path);
    if (*ablate) return cmd_ablate(common, seeds);
    if (*shift) return cmd_domain_shift(common, mvco_ckpt, dot_ckpt, decode);
    if (*embed) return cmd_embed(common, ckpt);
    if (*sweep) return cmd_sweep(common, param, values, seeds);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
