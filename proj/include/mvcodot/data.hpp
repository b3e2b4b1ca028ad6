#pragma once

// Paired two-view cases: synthetic generation, tokenisation, vocabulary,
// splitting, and the JSONL interchange format.

#include "mvcodot/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mvcodot::data {

enum class ViewTag { frontal = 0, lateral = 1 };

inline const char* to_string(ViewTag v) { return v == ViewTag::frontal ? "frontal" : "lateral"; }

inline ViewTag parse_view_tag(const std::string& s) {
  if (s == "frontal") return ViewTag::frontal;
  if (s == "lateral") return ViewTag::lateral;
  throw std::invalid_argument("unknown view tag: " + s);
}

// Unit-scaled image tensor, channel-major (C x H x W).
struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int c, int h, int w) : channels(c), height(h), width(w), pixels(static_cast<std::size_t>(c * h * w), 0.0) {}

  double& at(int c, int y, int x) { return pixels[static_cast<std::size_t>((c * height + y) * width + x)]; }
  double at(int c, int y, int x) const { return pixels[static_cast<std::size_t>((c * height + y) * width + x)]; }

  bool operator==(const Image&) const = default;
};

struct Case {
  std::string id;
  std::vector<double> latent;  // empty for externally loaded cases
  Image frontal;
  Image lateral;
  std::vector<std::string> report;

  bool operator==(const Case&) const = default;
};

// ---------------------------------------------------------------------------
// Report template grammar

inline constexpr double kFindingThreshold = 0.5;
inline constexpr double kSevereThreshold = 0.775;
inline constexpr int kMaxFindings = 16;

inline const std::array<const char*, 4>& finding_nouns() {
  static const std::array<const char*, 4> nouns{"opacity", "effusion", "nodule", "consolidation"};
  return nouns;
}

inline const std::array<const char*, 4>& finding_locations() {
  static const std::array<const char*, 4> locs{"left-apex", "right-apex", "left-base", "right-base"};
  return locs;
}

// (noun, location) pair naming finding i; unique for i < kMaxFindings.
inline std::pair<std::string, std::string> finding_name(int i) {
  return {finding_nouns()[static_cast<std::size_t>(i % 4)],
          finding_locations()[static_cast<std::size_t>((i % 4 + i / 4) % 4)]};
}

// One sentence "<severity> <noun> at <location> ." per active finding, in
// finding order; "no acute findings ." when none is active.
inline std::vector<std::string> report_from_latent(const std::vector<double>& latent) {
  std::vector<std::string> out;
  for (int i = 0; i < static_cast<int>(latent.size()); ++i) {
    const double v = latent[static_cast<std::size_t>(i)];
    if (v < kFindingThreshold) continue;
    auto [noun, loc] = finding_name(i);
    out.insert(out.end(), {v >= kSevereThreshold ? "severe" : "mild", noun, "at", loc, "."});
  }
  if (out.empty()) out = {"no", "acute", "findings", "."};
  return out;
}

// ---------------------------------------------------------------------------
// Rendering

inline constexpr int kRenderGrid = 4;

// Grid cell holding finding i in the given view. Both maps are permutations
// of the 16 cells, so the views disagree on where a finding appears.
inline int finding_cell(int i, ViewTag view) {
  return view == ViewTag::frontal ? (5 * i + 1) % 16 : (7 * i + 10) % 16;
}

// Noise-free rendering of a latent: one Gaussian blob per finding at its
// view-specific cell plus a fixed view-specific background ramp.
inline Image render_view(const std::vector<double>& latent, ViewTag view, int image_size) {
  Image img(1, image_size, image_size);
  const double cell = static_cast<double>(image_size) / kRenderGrid;
  const double sigma = view == ViewTag::frontal ? 0.28 * cell : 0.36 * cell;
  const double gain = view == ViewTag::frontal ? 1.0 : 0.85;
  for (int y = 0; y < image_size; ++y) {
    for (int x = 0; x < image_size; ++x) {
      const double ramp = view == ViewTag::frontal ? static_cast<double>(y) / image_size
                                                   : static_cast<double>(x) / image_size;
      img.at(0, y, x) = 0.1 * ramp;
    }
  }
  for (int i = 0; i < static_cast<int>(latent.size()); ++i) {
    const int c = finding_cell(i, view);
    const double cy = (c / kRenderGrid + 0.5) * cell - 0.5;
    const double cx = (c % kRenderGrid + 0.5) * cell - 0.5;
    const double amp = gain * latent[static_cast<std::size_t>(i)];
    for (int y = 0; y < image_size; ++y) {
      for (int x = 0; x < image_size; ++x) {
        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        img.at(0, y, x) += amp * std::exp(-d2 / (2.0 * sigma * sigma));
      }
    }
  }
  return img;
}

struct SynthOptions {
  int n_cases = 1000;
  int n_findings = 4;
  double noise_level = 0.1;
  std::uint64_t seed = 7;
  int image_size = 16;
};

inline std::vector<Case> generate_synthetic_dataset(const SynthOptions& opt) {
  if (opt.n_cases < 10) throw std::invalid_argument("generate_synthetic_dataset: need at least 10 cases");
  if (opt.n_findings <= 0) throw std::invalid_argument("generate_synthetic_dataset: n_findings must be positive");
  if (opt.n_findings > kMaxFindings) {
    throw std::invalid_argument("generate_synthetic_dataset: at most " + std::to_string(kMaxFindings) + " findings");
  }
  if (opt.noise_level < 0.0) throw std::invalid_argument("generate_synthetic_dataset: noise_level must be >= 0");
  if (opt.image_size < kRenderGrid || opt.image_size % kRenderGrid != 0) {
    throw std::invalid_argument("generate_synthetic_dataset: image_size must be a positive multiple of 4");
  }

  std::mt19937_64 rng(opt.seed);
  std::bernoulli_distribution active(0.5);
  std::uniform_real_distribution<double> on(0.55, 1.0);
  std::uniform_real_distribution<double> off(0.0, 0.3);
  std::normal_distribution<double> noise(0.0, 1.0);

  std::vector<Case> cases;
  cases.reserve(static_cast<std::size_t>(opt.n_cases));
  for (int n = 0; n < opt.n_cases; ++n) {
    Case c;
    std::ostringstream id;
    id << "case" << std::setw(5) << std::setfill('0') << n;
    c.id = id.str();
    c.latent.resize(static_cast<std::size_t>(opt.n_findings));
    for (auto& v : c.latent) v = active(rng) ? on(rng) : off(rng);
    c.frontal = render_view(c.latent, ViewTag::frontal, opt.image_size);
    c.lateral = render_view(c.latent, ViewTag::lateral, opt.image_size);
    if (opt.noise_level > 0.0) {
      for (Image* img : {&c.frontal, &c.lateral}) {
        for (auto& p : img->pixels) p = std::clamp(p + opt.noise_level * noise(rng), 0.0, 1.0);
      }
    } else {
      for (Image* img : {&c.frontal, &c.lateral}) {
        for (auto& p : img->pixels) p = std::clamp(p, 0.0, 1.0);
      }
    }
    c.report = report_from_latent(c.latent);
    cases.push_back(std::move(c));
  }
  return cases;
}

// ---------------------------------------------------------------------------
// Tokenisation and vocabulary

inline std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isspace(u)) {
      flush();
    } else if (ch == '.' || ch == ',' || ch == ';' || ch == ':' || ch == '!' || ch == '?') {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(u)));
    }
  }
  flush();
  return out;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s.push_back(' ');
    s += tokens[i];
  }
  return s;
}

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  Vocabulary() { id_to_token_ = {"<pad>", "<bos>", "<eos>", "<unk>"}; index(); }

  // Tokens listed in id order after the four specials.
  explicit Vocabulary(const std::vector<std::string>& regular_tokens) : Vocabulary() {
    for (const auto& t : regular_tokens) {
      if (token_to_id_.count(t)) throw std::invalid_argument("Vocabulary: duplicate token " + t);
      id_to_token_.push_back(t);
      token_to_id_[t] = static_cast<int>(id_to_token_.size()) - 1;
    }
  }

  int id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
  }
  const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("Vocabulary: id out of range");
    return id_to_token_[static_cast<std::size_t>(id)];
  }
  bool contains(const std::string& token) const { return token_to_id_.count(token) != 0; }
  int size() const { return static_cast<int>(id_to_token_.size()); }
  static bool is_special(int id) { return id >= 0 && id <= kUnk; }

  std::vector<std::string> regular_tokens() const {
    return {id_to_token_.begin() + kUnk + 1, id_to_token_.end()};
  }

  bool operator==(const Vocabulary& o) const { return id_to_token_ == o.id_to_token_; }

 private:
  void index() {
    token_to_id_.clear();
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) token_to_id_[id_to_token_[i]] = static_cast<int>(i);
  }

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

// Keeps tokens seen at least min_freq times, ordered by descending
// frequency then lexicographically.
inline Vocabulary build_vocabulary(const std::vector<std::vector<std::string>>& reports, int min_freq) {
  if (min_freq < 1) throw std::invalid_argument("build_vocabulary: min_freq must be >= 1");
  std::map<std::string, int> counts;
  std::size_t total = 0;
  for (const auto& r : reports) {
    for (const auto& t : r) {
      ++counts[t];
      ++total;
    }
  }
  if (total == 0) throw DataError("build_vocabulary: empty corpus");
  std::vector<std::pair<std::string, int>> kept;
  for (const auto& [t, c] : counts) {
    if (c >= min_freq) kept.emplace_back(t, c);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens;
  for (auto& [t, _] : kept) tokens.push_back(t);
  return Vocabulary(tokens);
}

// BOS + ids + EOS, truncated to max_len total with EOS kept last.
inline std::vector<int> encode_report(const std::vector<std::string>& report, const Vocabulary& vocab, int max_len) {
  if (max_len < 2) throw std::invalid_argument("encode_report: max_len must be >= 2");
  const std::size_t body = std::min(report.size(), static_cast<std::size_t>(max_len - 2));
  std::vector<int> ids;
  ids.reserve(body + 2);
  ids.push_back(Vocabulary::kBos);
  for (std::size_t i = 0; i < body; ++i) ids.push_back(vocab.id(report[i]));
  ids.push_back(Vocabulary::kEos);
  return ids;
}

// Inverse of encode_report: drops framing and padding, stops at EOS.
inline std::vector<std::string> decode_ids(const std::vector<int>& ids, const Vocabulary& vocab) {
  std::vector<std::string> out;
  for (int id : ids) {
    if (id == Vocabulary::kEos) break;
    if (id == Vocabulary::kBos || id == Vocabulary::kPad) continue;
    out.push_back(vocab.token(id));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

struct DatasetSplit {
  std::vector<Case> train;
  std::vector<Case> val;
  std::vector<Case> test;
  std::uint64_t split_seed = 0;
};

// Seeded shuffle into 7:1:2 partitions (train and val sizes rounded).
inline DatasetSplit split_dataset(const std::vector<Case>& cases, std::uint64_t seed) {
  if (cases.size() < 10) throw DataError("split_dataset: need at least 10 cases");
  std::vector<std::size_t> order(cases.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size() - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(order[i], order[pick(rng)]);
  }
  const auto n = static_cast<double>(cases.size());
  const auto n_train = static_cast<std::size_t>(std::llround(0.7 * n));
  const auto n_val = static_cast<std::size_t>(std::llround(0.1 * n));
  DatasetSplit s;
  s.split_seed = seed;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Case& c = cases[order[i]];
    if (i < n_train) {
      s.train.push_back(c);
    } else if (i < n_train + n_val) {
      s.val.push_back(c);
    } else {
      s.test.push_back(c);
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// JSONL interchange
//
// One case per line:
//   {"id": str, "frontal": IMAGE, "lateral": IMAGE, "report": str, "latent": [..]?}
// IMAGE is either an inline nested array ([C][H][W], or [H][W] for one
// channel) or a path, relative to the JSONL file, to a .json file holding
// such an array or to a binary/ASCII PGM (P5/P2) greyscale image.

namespace detail {

inline Image image_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.empty()) throw DataError("image array must be a non-empty nested array");
  nlohmann::json chw = j;
  if (j[0].is_array() && !j[0].empty() && !j[0][0].is_array()) chw = nlohmann::json::array({j});
  const int c = static_cast<int>(chw.size());
  if (!chw[0].is_array() || chw[0].empty() || !chw[0][0].is_array()) throw DataError("image array has wrong nesting");
  const int h = static_cast<int>(chw[0].size());
  const int w = static_cast<int>(chw[0][0].size());
  Image img(c, h, w);
  for (int ci = 0; ci < c; ++ci) {
    if (!chw[ci].is_array() || static_cast<int>(chw[ci].size()) != h) throw DataError("ragged image array");
    for (int y = 0; y < h; ++y) {
      const auto& row = chw[ci][y];
      if (!row.is_array() || static_cast<int>(row.size()) != w) throw DataError("ragged image array");
      for (int x = 0; x < w; ++x) {
        if (!row[x].is_number()) throw DataError("image entries must be numbers");
        img.at(ci, y, x) = row[x].get<double>();
      }
    }
  }
  return img;
}

inline nlohmann::json image_to_json(const Image& img) {
  nlohmann::json chw = nlohmann::json::array();
  for (int c = 0; c < img.channels; ++c) {
    nlohmann::json plane = nlohmann::json::array();
    for (int y = 0; y < img.height; ++y) {
      nlohmann::json row = nlohmann::json::array();
      for (int x = 0; x < img.width; ++x) row.push_back(img.at(c, y, x));
      plane.push_back(std::move(row));
    }
    chw.push_back(std::move(plane));
  }
  return chw;
}

inline Image read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  std::string magic;
  in >> magic;
  auto next_int = [&]() {
    int v = 0;
    while (in >> std::ws && in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
    }
    if (!(in >> v)) throw DataError("malformed PGM header in " + path.string());
    return v;
  };
  if (magic != "P5" && magic != "P2") throw DataError("unsupported image format in " + path.string());
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw DataError("unsupported PGM geometry in " + path.string());
  Image img(1, h, w);
  if (magic == "P5") {
    in.get();
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const int v = in.get();
        if (v == EOF) throw DataError("truncated PGM " + path.string());
        img.at(0, y, x) = static_cast<double>(v) / maxval;
      }
    }
  } else {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) img.at(0, y, x) = static_cast<double>(next_int()) / maxval;
  }
  return img;
}

inline Image load_image_field(const nlohmann::json& field, const std::filesystem::path& base) {
  if (field.is_array()) return image_from_json(field);
  if (!field.is_string()) throw DataError("image field must be an array or a path");
  std::filesystem::path p = field.get<std::string>();
  if (p.is_relative()) p = base / p;
  if (p.extension() == ".pgm") return read_pgm(p);
  std::ifstream in(p);
  if (!in) throw DataError("cannot open image " + p.string());
  try {
    return image_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed image file " + p.string() + ": " + e.what());
  }
}

}  // namespace detail

inline std::vector<Case> load_external_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset " + path.string());
  const auto base = path.parent_path();
  std::vector<Case> cases;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + "malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw DataError(where + "record must be a JSON object");
    for (const char* key : {"id", "frontal", "lateral", "report"}) {
      if (!j.contains(key)) throw DataError(where + "missing field \"" + key + "\"");
    }
    if (!j["id"].is_string() || !j["report"].is_string()) throw DataError(where + "\"id\" and \"report\" must be strings");
    Case c;
    c.id = j["id"].get<std::string>();
    try {
      c.frontal = detail::load_image_field(j["frontal"], base);
      c.lateral = detail::load_image_field(j["lateral"], base);
      if (j.contains("latent")) c.latent = j["latent"].get<std::vector<double>>();
    } catch (const DataError& e) {
      throw DataError(where + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + e.what());
    }
    c.report = tokenize(j["report"].get<std::string>());
    cases.push_back(std::move(c));
  }
  return cases;
}

inline void export_dataset(const std::vector<Case>& cases, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset " + path.string());
  for (const auto& c : cases) {
    nlohmann::json j;
    j["id"] = c.id;
    j["frontal"] = detail::image_to_json(c.frontal);
    j["lateral"] = detail::image_to_json(c.lateral);
    j["report"] = join_tokens(c.report);
    if (!c.latent.empty()) j["latent"] = c.latent;
    out << j.dump() << '\n';
  }
}

}  // namespace mvcodot::data
