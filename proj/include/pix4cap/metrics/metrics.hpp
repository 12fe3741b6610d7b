#pragma once

// Corpus caption metrics. Every score is reported on a x100 scale.
//
//   BLEU-N   corpus n-gram precision with clipping, closest reference length,
//            brevity penalty; no smoothing unless requested
//   ROUGE-L  LCS F-measure with beta = 1.2, best reference
//   METEOR   exact then Porter-stem unigram matches, F_mean with alpha = 0.9,
//            penalty gamma * ((chunks - 1) / matches)^theta, gamma 0.5, theta 3
//   CIDEr-D  tf-idf n-gram cosine with clipping and a length Gaussian
//            (sigma 6), n = 1..4, x10, averaged over references
//   S*_m     mean of BLEU-4, METEOR, ROUGE-L and CIDEr

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "pix4cap/metrics/porter.hpp"
#include "pix4cap/text/vocabulary.hpp"

namespace pix4cap::metrics {

using Tokens = std::vector<std::string>;

struct EvalPair {
  Tokens candidate;
  std::vector<Tokens> references;
};

inline EvalPair make_eval_pair(const std::string& candidate, const std::vector<std::string>& references) {
  EvalPair p{text::tokenize(candidate), {}};
  for (const auto& r : references) p.references.push_back(text::tokenize(r));
  return p;
}

using NgramCounts = std::map<Tokens, int>;

inline NgramCounts ngram_counts(const Tokens& words, int n) {
  NgramCounts counts;
  for (std::size_t i = 0; i + n <= words.size(); ++i) ++counts[Tokens(words.begin() + i, words.begin() + i + n)];
  return counts;
}

// ------------------------------------------------------------------- BLEU

struct BleuOptions {
  int max_n = 4;
  bool smoothing = false;  // add-one on orders >= 2, for sentence-level use
};

// Returns B_1..B_max_n. An empty candidate corpus scores 0.
inline std::vector<double> bleu(const std::vector<EvalPair>& corpus, const BleuOptions& options = {}) {
  const int max_n = options.max_n;
  if (max_n < 1 || max_n > 4) throw UsageError("BLEU order must lie in 1..4");
  std::vector<double> matched(max_n, 0.0), total(max_n, 0.0);
  double cand_len = 0, ref_len = 0;
  for (const auto& pair : corpus) {
    const double c = static_cast<double>(pair.candidate.size());
    cand_len += c;
    // closest reference length, ties to the shorter one
    double best = -1;
    for (const auto& r : pair.references) {
      const double rl = static_cast<double>(r.size());
      if (best < 0 || std::abs(rl - c) < std::abs(best - c) || (std::abs(rl - c) == std::abs(best - c) && rl < best))
        best = rl;
    }
    ref_len += std::max(best, 0.0);
    for (int n = 1; n <= max_n; ++n) {
      const auto cand = ngram_counts(pair.candidate, n);
      NgramCounts max_ref;
      for (const auto& r : pair.references)
        for (const auto& [gram, count] : ngram_counts(r, n)) max_ref[gram] = std::max(max_ref[gram], count);
      for (const auto& [gram, count] : cand) {
        auto it = max_ref.find(gram);
        matched[n - 1] += std::min(count, it == max_ref.end() ? 0 : it->second);
        total[n - 1] += count;
      }
    }
  }
  std::vector<double> scores(max_n, 0.0);
  if (cand_len == 0) return scores;
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  double log_sum = 0;
  for (int n = 1; n <= max_n; ++n) {
    double m = matched[n - 1], t = total[n - 1];
    if (options.smoothing && n > 1) {
      m += 1;
      t += 1;
    }
    if (m == 0 || t == 0) {
      for (int k = n; k <= max_n; ++k) scores[k - 1] = 0.0;
      break;
    }
    log_sum += std::log(m / t);
    scores[n - 1] = 100.0 * bp * std::exp(log_sum / n);
  }
  return scores;
}

// ---------------------------------------------------------------- ROUGE-L

inline int lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<int> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double rouge_l(const EvalPair& pair, double beta = 1.2) {
  double best = 0;
  for (const auto& r : pair.references) {
    if (pair.candidate.empty() || r.empty()) continue;
    const double lcs = lcs_length(pair.candidate, r);
    if (lcs == 0) continue;
    const double p = lcs / pair.candidate.size(), rec = lcs / r.size();
    best = std::max(best, (1 + beta * beta) * p * rec / (rec + beta * beta * p));
  }
  return 100.0 * best;
}

// ------------------------------------------------------------- METEOR-lite

struct MeteorParams {
  double alpha = 0.9, gamma = 0.5, theta = 3.0;
};

// Unigram alignment: exact matches first, then stem matches among the
// leftovers. Each candidate word takes the reference slot right after the
// previous match when possible, else the leftmost free one.
inline std::vector<int> meteor_alignment(const Tokens& cand, const Tokens& ref) {
  std::vector<int> link(cand.size(), -1);
  std::vector<bool> used(ref.size(), false);
  std::vector<std::string> cand_stem, ref_stem;
  for (const auto& w : cand) cand_stem.push_back(porter_stem(w));
  for (const auto& w : ref) ref_stem.push_back(porter_stem(w));
  for (int stage = 0; stage < 2; ++stage) {
    int prev = -2;
    for (std::size_t i = 0; i < cand.size(); ++i) {
      if (link[i] >= 0) {
        prev = link[i];
        continue;
      }
      const auto match = [&](std::size_t j) {
        return !used[j] && (stage == 0 ? cand[i] == ref[j] : cand_stem[i] == ref_stem[j]);
      };
      int chosen = -1;
      if (prev + 1 >= 0 && prev + 1 < static_cast<int>(ref.size()) && match(static_cast<std::size_t>(prev + 1)))
        chosen = prev + 1;
      for (std::size_t j = 0; chosen < 0 && j < ref.size(); ++j)
        if (match(j)) chosen = static_cast<int>(j);
      if (chosen >= 0) {
        link[i] = chosen;
        used[static_cast<std::size_t>(chosen)] = true;
        prev = chosen;
      }
    }
  }
  return link;
}

inline double meteor_single(const Tokens& cand, const Tokens& ref, const MeteorParams& params = {}) {
  if (cand.empty() || ref.empty()) return 0.0;
  const auto link = meteor_alignment(cand, ref);
  int matches = 0, chunks = 0, last = -2;
  bool in_chunk = false;
  for (int j : link) {
    if (j < 0) {
      in_chunk = false;
      continue;
    }
    ++matches;
    if (!in_chunk || j != last + 1) ++chunks;
    in_chunk = true;
    last = j;
  }
  if (matches == 0) return 0.0;
  const double p = static_cast<double>(matches) / cand.size(), r = static_cast<double>(matches) / ref.size();
  const double f_mean = p * r / (params.alpha * p + (1 - params.alpha) * r);
  const double penalty = params.gamma * std::pow(static_cast<double>(chunks - 1) / matches, params.theta);
  return 100.0 * f_mean * (1 - penalty);
}

inline double meteor_lite(const EvalPair& pair, const MeteorParams& params = {}) {
  double best = 0;
  for (const auto& r : pair.references) best = std::max(best, meteor_single(pair.candidate, r, params));
  return best;
}

// ------------------------------------------------------------------ CIDEr-D

struct CiderOptions {
  double sigma = 6.0;
  int max_n = 4;
};

namespace cider_detail {

struct Vector {
  std::array<std::map<Tokens, double>, 4> grams;
  std::array<double, 4> norm{};
  double length = 0;
};

inline double similarity(const Vector& cand, const Vector& ref, int n, double sigma) {
  const auto& a = cand.grams[n];
  const auto& b = ref.grams[n];
  double val = 0;
  for (const auto& [gram, w] : a) {
    auto it = b.find(gram);
    if (it != b.end()) val += std::min(w, it->second) * it->second;
  }
  if (cand.norm[n] != 0 && ref.norm[n] != 0) val /= cand.norm[n] * ref.norm[n];
  const double delta = cand.length - ref.length;
  return val * std::exp(-(delta * delta) / (2 * sigma * sigma));
}

}  // namespace cider_detail

// Corpus mean of per-pair CIDEr-D, x100. Document frequencies come from the
// reference sets. A one-pair corpus makes log(N) - log(df) vanish for every
// n-gram, so it falls back to the smoothed idf log((N + 1) / df) and records
// a warning.
inline std::vector<double> cider_per_pair(const std::vector<EvalPair>& corpus, std::vector<std::string>* warnings = nullptr,
                                          const CiderOptions& options = {}) {
  const int max_n = options.max_n;
  std::map<Tokens, double> df;
  for (const auto& pair : corpus) {
    std::map<Tokens, bool> seen;
    for (const auto& r : pair.references)
      for (int n = 1; n <= max_n; ++n)
        for (const auto& [gram, count] : ngram_counts(r, n)) seen[gram] = true;
    for (const auto& [gram, flag] : seen) df[gram] += 1;
  }
  const double docs = static_cast<double>(corpus.size());
  const bool smoothed = corpus.size() == 1;
  if (smoothed) {
    const std::string msg = "CIDEr on a single-pair corpus is ill-conditioned; using smoothed idf";
    if (warnings) warnings->push_back(msg);
    else std::cerr << "warning: " << msg << '\n';
  }
  const auto idf = [&](const Tokens& gram) {
    auto it = df.find(gram);
    const double d = it == df.end() ? 0.0 : it->second;
    return smoothed ? std::log((docs + 1) / std::max(1.0, d)) : std::log(docs) - std::log(std::max(1.0, d));
  };
  const auto vectorize = [&](const Tokens& words) {
    cider_detail::Vector v;
    v.length = static_cast<double>(words.size());
    for (int n = 1; n <= max_n; ++n) {
      double sq = 0;
      for (const auto& [gram, count] : ngram_counts(words, n)) {
        const double w = count * idf(gram);
        v.grams[n - 1][gram] = w;
        sq += w * w;
      }
      v.norm[n - 1] = std::sqrt(sq);
    }
    return v;
  };

  std::vector<double> scores;
  scores.reserve(corpus.size());
  for (const auto& pair : corpus) {
    const auto cand = vectorize(pair.candidate);
    double total = 0;
    for (const auto& r : pair.references) {
      const auto ref = vectorize(r);
      double s = 0;
      for (int n = 0; n < max_n; ++n) s += cider_detail::similarity(cand, ref, n, options.sigma);
      total += s / max_n;
    }
    scores.push_back(pair.references.empty() ? 0.0 : 100.0 * 10.0 * total / pair.references.size());
  }
  return scores;
}

inline double cider(const std::vector<EvalPair>& corpus, std::vector<std::string>* warnings = nullptr,
                    const CiderOptions& options = {}) {
  const auto s = cider_per_pair(corpus, warnings, options);
  double sum = 0;
  for (double v : s) sum += v;
  return s.empty() ? 0.0 : sum / s.size();
}

// ------------------------------------------------------------------ report

inline double s_star_m(double bleu4, double meteor, double rouge, double cider_score) {
  return (bleu4 + meteor + rouge + cider_score) / 4.0;
}

struct MetricReport {
  std::array<double, 4> bleu{};
  double meteor = 0, rouge_l = 0, cider = 0, s_star_m = 0;
  std::size_t pairs = 0;
  std::vector<std::string> warnings;
};

inline MetricReport evaluate_corpus(const std::vector<EvalPair>& corpus) {
  MetricReport r;
  r.pairs = corpus.size();
  if (corpus.empty()) return r;
  for (const auto& p : corpus)
    if (p.references.empty()) throw DataError("every evaluation pair needs at least one reference");
  const auto b = bleu(corpus);
  std::copy(b.begin(), b.end(), r.bleu.begin());
  for (const auto& p : corpus) {
    r.meteor += meteor_lite(p);
    r.rouge_l += rouge_l(p);
  }
  r.meteor /= corpus.size();
  r.rouge_l /= corpus.size();
  r.cider = cider(corpus, &r.warnings);
  r.s_star_m = s_star_m(r.bleu[3], r.meteor, r.rouge_l, r.cider);
  return r;
}

inline nlohmann::json to_json(const MetricReport& r) {
  return {{"BLEU-1", r.bleu[0]}, {"BLEU-2", r.bleu[1]},  {"BLEU-3", r.bleu[2]}, {"BLEU-4", r.bleu[3]},
          {"METEOR", r.meteor},  {"ROUGE_L", r.rouge_l}, {"CIDEr", r.cider},    {"S*_m", r.s_star_m},
          {"pairs", r.pairs},    {"warnings", r.warnings}};
}

// Aligned table in the usual column order, two decimals.
inline std::string format_table(const std::vector<std::pair<std::string, MetricReport>>& rows) {
  std::ostringstream out;
  std::size_t name_width = 6;
  for (const auto& [name, report] : rows) name_width = std::max(name_width, name.size());
  const std::vector<std::string> headers{"BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE_L", "CIDEr", "S*_m"};
  out << std::left << std::setw(static_cast<int>(name_width)) << "Method";
  for (const auto& h : headers) out << "  " << std::right << std::setw(8) << h;
  out << '\n';
  out << std::fixed << std::setprecision(2);
  for (const auto& [name, r] : rows) {
    out << std::left << std::setw(static_cast<int>(name_width)) << name << std::right;
    for (double v : {r.bleu[0], r.bleu[1], r.bleu[2], r.bleu[3], r.meteor, r.rouge_l, r.cider, r.s_star_m})
      out << "  " << std::setw(8) << v;
    out << '\n';
  }
  return out.str();
}

}  // namespace pix4cap::metrics
