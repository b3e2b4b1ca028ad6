#pragma once

// Caption metrics computed from scratch on token sequences: BLEU-1..4
// (sentence level with add-one smoothing for n >= 2, corpus level
// unsmoothed), exact-match METEOR ("METEOR-lite"), ROUGE-L, and the
// weighted mixed reward used for self-critical fine-tuning.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvcodot::metrics {

using Tokens = std::vector<std::string>;

struct MetricReport {
  std::array<double, 4> bleu{};  // BLEU-1..BLEU-4
  double meteor = 0.0;
  double rouge_l = 0.0;

  std::array<double, 6> as_array() const { return {bleu[0], bleu[1], bleu[2], bleu[3], meteor, rouge_l}; }
};

inline const char* kMetricHeader = "B-1,B-2,B-3,B-4,ME,RO";

inline void write_csv_row(std::ostream& os, const MetricReport& r) {
  auto a = r.as_array();
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (i) os << ',';
    os << a[i];
  }
}

// Weights for (B1, B2, B3, B4, METEOR, ROUGE-L).
struct RewardWeights {
  std::array<double, 6> w{2.0, 2.0, 1.0, 1.0, 2.0, 2.0};

  double total() const { return std::accumulate(w.begin(), w.end(), 0.0); }
  void validate() const {
    for (double x : w)
      if (x < 0.0 || !std::isfinite(x)) throw std::invalid_argument("RewardWeights: weights must be nonnegative");
  }
};

// ---------------------------------------------------------------------------
// BLEU

using NgramCounts = std::map<Tokens, int>;

inline NgramCounts ngram_counts(const Tokens& s, int n) {
  NgramCounts c;
  if (static_cast<int>(s.size()) < n) return c;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= s.size(); ++i) {
    ++c[Tokens(s.begin() + static_cast<std::ptrdiff_t>(i), s.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  }
  return c;
}

struct NgramMatch {
  int matched = 0;  // clipped
  int total = 0;
};

// Clipped n-gram matches: each candidate n-gram counts at most as often as
// it appears in any single reference.
inline NgramMatch modified_precision(const Tokens& candidate, const std::vector<Tokens>& references, int n) {
  NgramMatch m;
  const NgramCounts cand = ngram_counts(candidate, n);
  NgramCounts max_ref;
  for (const auto& r : references) {
    for (const auto& [g, c] : ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
  }
  for (const auto& [g, c] : cand) {
    m.total += c;
    auto it = max_ref.find(g);
    if (it != max_ref.end()) m.matched += std::min(c, it->second);
  }
  return m;
}

// Reference length closest to the candidate length (shorter wins ties).
inline std::size_t closest_ref_length(std::size_t cand_len, const std::vector<Tokens>& references) {
  if (references.empty()) throw std::invalid_argument("BLEU: at least one reference required");
  std::size_t best = references.front().size();
  for (const auto& r : references) {
    const auto d = static_cast<long>(r.size()) - static_cast<long>(cand_len);
    const auto bd = static_cast<long>(best) - static_cast<long>(cand_len);
    if (std::labs(d) < std::labs(bd) || (std::labs(d) == std::labs(bd) && r.size() < best)) best = r.size();
  }
  return best;
}

inline double brevity_penalty(double cand_len, double ref_len) {
  if (cand_len <= 0.0) return 0.0;
  return cand_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
}

// Sentence BLEU-n: geometric mean of p_1..p_n times the brevity penalty.
// p_1 is unsmoothed; p_i for i >= 2 uses add-one smoothing when `smooth`.
inline double bleu_n(const Tokens& candidate, const std::vector<Tokens>& references, int n, bool smooth = true) {
  if (n < 1 || n > 4) throw std::invalid_argument("bleu_n: n must be in [1, 4]");
  if (candidate.empty()) return 0.0;
  double log_sum = 0.0;
  for (int i = 1; i <= n; ++i) {
    const NgramMatch m = modified_precision(candidate, references, i);
    double p;
    if (i >= 2 && smooth) {
      p = (m.matched + 1.0) / (m.total + 1.0);
    } else {
      if (m.total == 0 || m.matched == 0) return 0.0;
      p = static_cast<double>(m.matched) / m.total;
    }
    log_sum += std::log(p);
  }
  const auto r = static_cast<double>(closest_ref_length(candidate.size(), references));
  return brevity_penalty(static_cast<double>(candidate.size()), r) * std::exp(log_sum / n);
}

// Corpus BLEU-n from pooled clipped counts, unsmoothed.
inline double corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references,
                          int n) {
  if (n < 1 || n > 4) throw std::invalid_argument("corpus_bleu: n must be in [1, 4]");
  if (candidates.size() != references.size()) throw std::invalid_argument("corpus_bleu: size mismatch");
  std::array<long, 4> matched{}, total{};
  double c_len = 0.0, r_len = 0.0;
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    for (int i = 1; i <= n; ++i) {
      const NgramMatch m = modified_precision(candidates[k], references[k], i);
      matched[static_cast<std::size_t>(i - 1)] += m.matched;
      total[static_cast<std::size_t>(i - 1)] += m.total;
    }
    c_len += static_cast<double>(candidates[k].size());
    r_len += static_cast<double>(closest_ref_length(candidates[k].size(), references[k]));
  }
  double log_sum = 0.0;
  for (int i = 0; i < n; ++i) {
    if (total[static_cast<std::size_t>(i)] == 0 || matched[static_cast<std::size_t>(i)] == 0) return 0.0;
    log_sum += std::log(static_cast<double>(matched[static_cast<std::size_t>(i)]) / total[static_cast<std::size_t>(i)]);
  }
  return brevity_penalty(c_len, r_len) * std::exp(log_sum / n);
}

// ---------------------------------------------------------------------------
// ROUGE-L

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline constexpr double kRougeBeta = 1.2;

inline double rouge_l(const Tokens& candidate, const std::vector<Tokens>& references) {
  if (candidate.empty()) return 0.0;
  double best = 0.0;
  for (const auto& r : references) {
    if (r.empty()) continue;
    const auto lcs = static_cast<double>(lcs_length(candidate, r));
    if (lcs == 0.0) continue;
    const double p = lcs / static_cast<double>(candidate.size());
    const double rec = lcs / static_cast<double>(r.size());
    const double b2 = kRougeBeta * kRougeBeta;
    best = std::max(best, (1.0 + b2) * p * rec / (rec + b2 * p));
  }
  return best;
}

// ---------------------------------------------------------------------------
// METEOR-lite

struct Alignment {
  int matches = 0;
  int chunks = 0;
};

// Exact unigram alignment. Candidate tokens are visited left to right; each
// takes the reference position that extends the current chunk when possible,
// otherwise the earliest unused matching position.
inline Alignment align_exact(const Tokens& candidate, const Tokens& reference) {
  std::vector<bool> used(reference.size(), false);
  Alignment a;
  long prev_ref = -2;
  long prev_cand = -2;
  for (std::size_t j = 0; j < candidate.size(); ++j) {
    long chosen = -1;
    const long next = prev_ref + 1;
    if (prev_cand == static_cast<long>(j) - 1 && next >= 0 && next < static_cast<long>(reference.size()) &&
        !used[static_cast<std::size_t>(next)] && reference[static_cast<std::size_t>(next)] == candidate[j]) {
      chosen = next;
    } else {
      for (std::size_t i = 0; i < reference.size(); ++i) {
        if (!used[i] && reference[i] == candidate[j]) {
          chosen = static_cast<long>(i);
          break;
        }
      }
    }
    if (chosen < 0) continue;
    used[static_cast<std::size_t>(chosen)] = true;
    const bool continues = prev_cand == static_cast<long>(j) - 1 && chosen == prev_ref + 1;
    if (!continues) ++a.chunks;
    ++a.matches;
    prev_ref = chosen;
    prev_cand = static_cast<long>(j);
  }
  return a;
}

inline double meteor_from_alignment(const Alignment& a, std::size_t cand_len, std::size_t ref_len) {
  if (a.matches == 0) return 0.0;
  const double p = static_cast<double>(a.matches) / static_cast<double>(cand_len);
  const double r = static_cast<double>(a.matches) / static_cast<double>(ref_len);
  const double fmean = 10.0 * p * r / (r + 9.0 * p);
  const double frag = static_cast<double>(a.chunks) / a.matches;
  return fmean * (1.0 - 0.5 * frag * frag * frag);
}

inline double meteor_lite(const Tokens& candidate, const std::vector<Tokens>& references) {
  if (candidate.empty()) return 0.0;
  double best = 0.0;
  for (const auto& r : references) {
    if (r.empty()) continue;
    best = std::max(best, meteor_from_alignment(align_exact(candidate, r), candidate.size(), r.size()));
  }
  return best;
}

// ---------------------------------------------------------------------------
// Aggregates

inline MetricReport sentence_metrics(const Tokens& candidate, const std::vector<Tokens>& references) {
  MetricReport m;
  for (int n = 1; n <= 4; ++n) m.bleu[static_cast<std::size_t>(n - 1)] = bleu_n(candidate, references, n);
  m.meteor = meteor_lite(candidate, references);
  m.rouge_l = rouge_l(candidate, references);
  return m;
}

inline double mixed_reward(const Tokens& candidate, const Tokens& reference, const RewardWeights& weights = {}) {
  const auto s = sentence_metrics(candidate, {reference}).as_array();
  double r = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) r += weights.w[i] * s[i];
  return r;
}

// Corpus BLEU (unsmoothed) with METEOR-lite and ROUGE-L averaged over
// sentences.
inline MetricReport corpus_metrics(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references) {
  if (candidates.size() != references.size()) throw std::invalid_argument("corpus_metrics: size mismatch");
  MetricReport m;
  if (candidates.empty()) return m;
  for (int n = 1; n <= 4; ++n) m.bleu[static_cast<std::size_t>(n - 1)] = corpus_bleu(candidates, references, n);
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    m.meteor += meteor_lite(candidates[k], references[k]);
    m.rouge_l += rouge_l(candidates[k], references[k]);
  }
  m.meteor /= static_cast<double>(candidates.size());
  m.rouge_l /= static_cast<double>(candidates.size());
  return m;
}

}  // namespace mvcodot::metrics
