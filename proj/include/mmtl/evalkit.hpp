#pragma once

// Corpus BLEU-4, an exact-match METEOR surrogate, multi-run aggregation
// and the multeval-style approximate-randomization significance test.
//
// The METEOR surrogate is exact-match unigram METEOR (no stemming, no
// synonymy, no paraphrase tables): Fmean = 10PR/(R+9P), penalty =
// 0.5*(chunks/matches)^3, score = Fmean*(1-penalty). Every report labels
// it "METEOR-x (exact-match surrogate)"; values are not comparable to
// full METEOR.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmtl/rng.hpp"

namespace mmtl {

using TokenLine = std::vector<std::string>;
using TokenCorpus = std::vector<TokenLine>;

// --- BLEU --------------------------------------------------------------------

/// Per-sentence sufficient statistics for corpus BLEU-4.
struct BleuStats {
  std::array<long long, 4> match{};  // clipped n-gram matches
  std::array<long long, 4> total{};  // hypothesis n-gram counts
  long long hyp_len = 0;
  long long ref_len = 0;

  BleuStats& operator+=(const BleuStats& o) {
    for (int n = 0; n < 4; ++n) {
      match[n] += o.match[n];
      total[n] += o.total[n];
    }
    hyp_len += o.hyp_len;
    ref_len += o.ref_len;
    return *this;
  }
};

inline BleuStats bleu_sentence_stats(const TokenLine& hyp, const TokenLine& ref) {
  BleuStats st;
  st.hyp_len = static_cast<long long>(hyp.size());
  st.ref_len = static_cast<long long>(ref.size());
  for (int n = 1; n <= 4; ++n) {
    if (static_cast<int>(hyp.size()) < n) break;
    std::map<std::vector<std::string>, long long> hyp_counts, ref_counts;
    for (std::size_t i = 0; i + n <= hyp.size(); ++i)
      ++hyp_counts[std::vector<std::string>(hyp.begin() + i, hyp.begin() + i + n)];
    for (std::size_t i = 0; i + n <= ref.size(); ++i)
      ++ref_counts[std::vector<std::string>(ref.begin() + i, ref.begin() + i + n)];
    for (const auto& [gram, c] : hyp_counts) {
      st.total[n - 1] += c;
      auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) st.match[n - 1] += std::min(c, it->second);
    }
  }
  return st;
}

/// Corpus BLEU-4 from pooled statistics: geometric mean of clipped
/// precisions, brevity penalty exp(1 - r/c) when c < r, no smoothing.
/// Returns a score in [0, 100].
inline double bleu_from_stats(const BleuStats& st) {
  double log_prec = 0.0;
  for (int n = 0; n < 4; ++n) {
    if (st.match[n] == 0 || st.total[n] == 0) return 0.0;
    log_prec += std::log(static_cast<double>(st.match[n]) /
                         static_cast<double>(st.total[n]));
  }
  double bp = 1.0;
  if (st.hyp_len < st.ref_len && st.hyp_len > 0)
    bp = std::exp(1.0 - static_cast<double>(st.ref_len) /
                            static_cast<double>(st.hyp_len));
  return 100.0 * bp * std::exp(log_prec / 4.0);
}

inline double bleu(const TokenCorpus& hyps, const TokenCorpus& refs) {
  if (hyps.size() != refs.size())
    throw std::invalid_argument("bleu: hypothesis/reference count mismatch");
  if (refs.empty()) throw std::invalid_argument("bleu: empty corpus");
  BleuStats st;
  for (std::size_t i = 0; i < hyps.size(); ++i)
    st += bleu_sentence_stats(hyps[i], refs[i]);
  return bleu_from_stats(st);
}

// --- METEOR surrogate ---------------------------------------------------------

struct MeteorSentence {
  int matches = 0;
  int chunks = 0;
  double score = 0.0;
};

namespace meteor_detail {

/// Minimal chunk count over maximal exact unigram alignments. Exact
/// depth-first search with pruning; falls back to a greedy
/// adjacency-preferring alignment if the node budget runs out (long
/// sentences with heavy token repetition).
struct ChunkSearch {
  const TokenLine& hyp;
  const TokenLine& ref;
  std::map<std::string, int> quota;  // per token: matches still to place
  std::vector<char> ref_used;
  std::map<std::string, int> hyp_remaining;  // occurrences at >= current pos
  int best = 1 << 30;
  long long nodes = 0;
  static constexpr long long kBudget = 200000;
  bool exact = true;

  ChunkSearch(const TokenLine& h, const TokenLine& r) : hyp(h), ref(r) {
    std::map<std::string, int> hc, rc;
    for (const auto& t : h) ++hc[t];
    for (const auto& t : r) ++rc[t];
    for (const auto& [t, c] : hc) {
      auto it = rc.find(t);
      if (it != rc.end()) quota[t] = std::min(c, it->second);
    }
    ref_used.assign(r.size(), 0);
    hyp_remaining = hc;
  }

  int total_matches() const {
    int m = 0;
    for (const auto& [t, c] : quota) m += c;
    return m;
  }

  void dfs(std::size_t i, int chunks, int prev_ref) {
    if (++nodes > kBudget) {
      exact = false;
      return;
    }
    if (chunks >= best) return;
    if (i == hyp.size()) {
      best = chunks;
      return;
    }
    const std::string& tok = hyp[i];
    auto qit = quota.find(tok);
    const int need = qit == quota.end() ? 0 : qit->second;
    auto& remain = hyp_remaining[tok];

    if (need > 0) {
      // try matching this occurrence to each unused ref slot, adjacent
      // continuation first (it can only lower the chunk count)
      std::vector<std::size_t> slots;
      for (std::size_t j = 0; j < ref.size(); ++j)
        if (!ref_used[j] && ref[j] == tok) slots.push_back(j);
      std::stable_sort(slots.begin(), slots.end(), [&](std::size_t a, std::size_t b) {
        const bool ca = prev_ref >= 0 && a == static_cast<std::size_t>(prev_ref) + 1;
        const bool cb = prev_ref >= 0 && b == static_cast<std::size_t>(prev_ref) + 1;
        return ca > cb;
      });
      for (std::size_t j : slots) {
        const bool cont = prev_ref >= 0 && j == static_cast<std::size_t>(prev_ref) + 1;
        ref_used[j] = 1;
        --qit->second;
        --remain;
        dfs(i + 1, chunks + (cont ? 0 : 1), static_cast<int>(j));
        ++remain;
        ++qit->second;
        ref_used[j] = 0;
        if (!exact) return;
      }
    }
    // skip this occurrence if the remaining ones can still fill the quota
    if (remain - 1 >= need) {
      --remain;
      dfs(i + 1, chunks, -1);  // a skipped token always breaks the chunk
      ++remain;
    }
  }

  /// Greedy fallback: left to right, prefer the ref slot adjacent to the
  /// previous match, else the leftmost unused slot.
  int greedy() {
    std::map<std::string, int> q = quota;
    std::vector<char> used(ref.size(), 0);
    int chunks = 0, prev = -2;
    for (std::size_t i = 0; i < hyp.size(); ++i) {
      auto it = q.find(hyp[i]);
      if (it == q.end() || it->second == 0) {
        prev = -2;
        continue;
      }
      int pick = -1;
      if (prev >= 0 && static_cast<std::size_t>(prev + 1) < ref.size() &&
          !used[prev + 1] && ref[prev + 1] == hyp[i])
        pick = prev + 1;
      else
        for (std::size_t j = 0; j < ref.size(); ++j)
          if (!used[j] && ref[j] == hyp[i]) {
            pick = static_cast<int>(j);
            break;
          }
      if (pick < 0) {
        prev = -2;
        continue;
      }
      if (pick != prev + 1) ++chunks;
      used[pick] = 1;
      --it->second;
      prev = pick;
    }
    return chunks;
  }

  int run() {
    if (total_matches() == 0) return 0;
    dfs(0, 0, -2);
    if (!exact) return greedy();
    return best;
  }
};

}  // namespace meteor_detail

inline MeteorSentence meteor_sentence(const TokenLine& hyp, const TokenLine& ref) {
  MeteorSentence out;
  if (hyp.empty() || ref.empty()) return out;
  meteor_detail::ChunkSearch cs(hyp, ref);
  out.matches = cs.total_matches();
  if (out.matches == 0) return out;
  out.chunks = cs.run();
  const double p = static_cast<double>(out.matches) / static_cast<double>(hyp.size());
  const double r = static_cast<double>(out.matches) / static_cast<double>(ref.size());
  const double fmean = 10.0 * p * r / (r + 9.0 * p);
  const double frac = static_cast<double>(out.chunks) / static_cast<double>(out.matches);
  const double penalty = 0.5 * frac * frac * frac;
  out.score = fmean * (1.0 - penalty);
  return out;
}

/// Corpus score in [0, 1]: mean of per-sentence scores.
inline double meteor_surrogate(const TokenCorpus& hyps, const TokenCorpus& refs) {
  if (hyps.size() != refs.size())
    throw std::invalid_argument("meteor: hypothesis/reference count mismatch");
  if (refs.empty()) throw std::invalid_argument("meteor: empty corpus");
  double acc = 0.0;
  for (std::size_t i = 0; i < hyps.size(); ++i)
    acc += meteor_sentence(hyps[i], refs[i]).score;
  return acc / static_cast<double>(hyps.size());
}

// --- approximate randomization test -------------------------------------------

enum class Metric { kBleu, kMeteor };

inline double corpus_metric(Metric m, const TokenCorpus& hyps, const TokenCorpus& refs) {
  return m == Metric::kBleu ? bleu(hyps, refs) : meteor_surrogate(hyps, refs);
}

/// p = (#{|delta'| >= |delta|} + 1) / (n_shuffles + 1) under per-sentence
/// output swaps with probability 0.5.
inline double ar_test(Metric metric, const TokenCorpus& hyps_a,
                      const TokenCorpus& hyps_b, const TokenCorpus& refs,
                      int n_shuffles, Rng& rng) {
  if (hyps_a.size() != refs.size() || hyps_b.size() != refs.size())
    throw std::invalid_argument("ar_test: misaligned inputs");
  if (n_shuffles < 1) throw std::invalid_argument("ar_test: n_shuffles < 1");
  const std::size_t n = refs.size();

  // per-sentence sufficient statistics so each shuffle is O(n)
  std::vector<BleuStats> bleu_a(n), bleu_b(n);
  std::vector<double> met_a(n), met_b(n);
  if (metric == Metric::kBleu) {
    for (std::size_t i = 0; i < n; ++i) {
      bleu_a[i] = bleu_sentence_stats(hyps_a[i], refs[i]);
      bleu_b[i] = bleu_sentence_stats(hyps_b[i], refs[i]);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      met_a[i] = meteor_sentence(hyps_a[i], refs[i]).score;
      met_b[i] = meteor_sentence(hyps_b[i], refs[i]).score;
    }
  }

  const auto delta = [&](const std::vector<char>& swap) {
    if (metric == Metric::kBleu) {
      BleuStats sa, sb;
      for (std::size_t i = 0; i < n; ++i) {
        sa += swap[i] ? bleu_b[i] : bleu_a[i];
        sb += swap[i] ? bleu_a[i] : bleu_b[i];
      }
      return std::abs(bleu_from_stats(sa) - bleu_from_stats(sb));
    }
    double sa = 0, sb = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sa += swap[i] ? met_b[i] : met_a[i];
      sb += swap[i] ? met_a[i] : met_b[i];
    }
    return std::abs(sa - sb) / static_cast<double>(n);
  };

  std::vector<char> no_swap(n, 0);
  const double observed = delta(no_swap);
  long long ge = 0;
  std::vector<char> swap(n);
  for (int s = 0; s < n_shuffles; ++s) {
    for (std::size_t i = 0; i < n; ++i) swap[i] = rng.coin() ? 1 : 0;
    if (delta(swap) >= observed) ++ge;
  }
  return static_cast<double>(ge + 1) / static_cast<double>(n_shuffles + 1);
}

// --- multi-run aggregation ------------------------------------------------------

/// Per-system metrics in the "mu +/- sigma / Ensemble" report layout.
struct SystemReport {
  std::vector<double> bleu_runs, meteor_runs;
  double bleu_mean = 0, bleu_std = 0, meteor_mean = 0, meteor_std = 0;
  bool has_std = false;
  double bleu_ensemble = 0, meteor_ensemble = 0;
  bool has_ensemble = false;
};

inline SystemReport aggregate_runs(const std::vector<TokenCorpus>& per_seed_hyps,
                                   const TokenCorpus* ensemble_hyps,
                                   const TokenCorpus& refs) {
  if (per_seed_hyps.empty()) throw std::invalid_argument("aggregate_runs: no runs");
  SystemReport r;
  for (const auto& hyps : per_seed_hyps) {
    r.bleu_runs.push_back(bleu(hyps, refs));
    r.meteor_runs.push_back(meteor_surrogate(hyps, refs));
  }
  const auto mean_std = [](const std::vector<double>& xs, double& mean, double& sd) {
    mean = 0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    sd = 0;
    if (xs.size() >= 2) {
      for (double x : xs) sd += (x - mean) * (x - mean);
      sd = std::sqrt(sd / static_cast<double>(xs.size() - 1));  // sample std
    }
  };
  mean_std(r.bleu_runs, r.bleu_mean, r.bleu_std);
  mean_std(r.meteor_runs, r.meteor_mean, r.meteor_std);
  r.has_std = per_seed_hyps.size() >= 2;
  if (ensemble_hyps) {
    r.bleu_ensemble = bleu(*ensemble_hyps, refs);
    r.meteor_ensemble = meteor_surrogate(*ensemble_hyps, refs);
    r.has_ensemble = true;
  }
  return r;
}

inline void to_json(nlohmann::json& j, const SystemReport& r) {
  j = {{"bleu", {{"runs", r.bleu_runs}, {"mean", r.bleu_mean}}},
       {"meteor_x", {{"runs", r.meteor_runs}, {"mean", r.meteor_mean}}},
       {"metric_note", "METEOR-x is an exact-match surrogate, not full METEOR"}};
  if (r.has_std) {
    j["bleu"]["std"] = r.bleu_std;
    j["meteor_x"]["std"] = r.meteor_std;
  }
  if (r.has_ensemble) {
    j["bleu"]["ensemble"] = r.bleu_ensemble;
    j["meteor_x"]["ensemble"] = r.meteor_ensemble;
  }
}

/// One row of the "mu +/- sigma / Ensemble" text table, 1 decimal.
inline std::string render_report_row(const std::string& name, const SystemReport& r) {
  char buf[256];
  const auto cell = [&](double mean, double sd, double ens, double scale) {
    std::string s;
    std::snprintf(buf, sizeof buf, "%.1f", mean * scale);
    s = buf;
    if (r.has_std) {
      std::snprintf(buf, sizeof buf, " +- %.1f", sd * scale);
      s += buf;
    }
    if (r.has_ensemble) {
      std::snprintf(buf, sizeof buf, " / %.1f", ens * scale);
      s += buf;
    }
    return s;
  };
  std::string row = name;
  row += "  BLEU " + cell(r.bleu_mean, r.bleu_std, r.bleu_ensemble, 1.0);
  row += "  METEOR-x (exact-match surrogate) " +
         cell(r.meteor_mean, r.meteor_std, r.meteor_ensemble, 100.0);
  return row;
}

}  // namespace mmtl
