#pragma once

// Beam-search translation over one or more frozen models. With several
// models the per-step distribution is the combination of the models'
// softmax outputs (arithmetic mean by default; geometric offered).

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "mmtl/model.hpp"

namespace mmtl {

enum class EnsembleMode { kArith, kGeo };

/// Combine k probability vectors into one. Arithmetic mean keeps the
/// simplex exactly; geometric renormalizes.
template <class Real>
std::vector<Real> ensemble_step(const std::vector<std::vector<Real>>& dists,
                                EnsembleMode mode = EnsembleMode::kArith) {
  if (dists.empty()) throw std::invalid_argument("ensemble_step: no inputs");
  const std::size_t n = dists[0].size();
  for (const auto& d : dists)
    if (d.size() != n) throw std::invalid_argument("ensemble_step: length mismatch");
  std::vector<Real> out(n, Real(0));
  if (mode == EnsembleMode::kArith) {
    for (const auto& d : dists)
      for (std::size_t i = 0; i < n; ++i) out[i] += d[i];
    const Real inv = Real(1) / static_cast<Real>(dists.size());
    for (auto& x : out) x *= inv;
  } else {
    const Real inv = Real(1) / static_cast<Real>(dists.size());
    for (std::size_t i = 0; i < n; ++i) {
      Real acc = 0;
      for (const auto& d : dists)
        acc += std::log(std::max(d[i], static_cast<Real>(1e-30)));
      out[i] = std::exp(acc * inv);
    }
    Real z = 0;
    for (Real x : out) z += x;
    for (auto& x : out) x /= z;
  }
  return out;
}

struct BeamResult {
  std::vector<int> ids;  // without <bos>, ends with <eos> when finished
  double logp = 0.0;
  bool finished = false;  // false: max_len hit with no finished hypothesis
};

/// Partial target sequence with accumulated log-probability and one
/// decoder state per ensembled model.
template <class Real>
struct Hypothesis {
  std::vector<int> ids;  // starts with <bos>
  double logp = 0.0;
  std::vector<std::vector<Real>> states;  // per model
  bool finished = false;
};

/// Standard beam search over summed token log-probabilities. Finished
/// hypotheses are retired; the live beam is refilled to beam_size from
/// the remaining candidates. No length normalization unless asked for.
template <class Real>
BeamResult beam_search(const std::vector<const Model<Real>*>& models,
                       const Sample& sample, int beam_size = 12, int max_len = -1,
                       bool length_norm = false,
                       EnsembleMode mode = EnsembleMode::kArith) {
  if (models.empty()) throw std::invalid_argument("beam_search: no models");
  if (beam_size < 1) throw std::invalid_argument("beam_search: beam_size < 1");
  const int vocab = models[0]->config().trg_vocab_size;
  for (const auto* m : models)
    if (m->config().trg_vocab_size != vocab)
      throw std::invalid_argument("beam_search: models disagree on target vocabulary");
  if (max_len < 0) max_len = 3 * static_cast<int>(sample.src_ids.size()) + 5;

  std::vector<DecodeSession<Real>> sessions;
  sessions.reserve(models.size());
  for (const auto* m : models) sessions.push_back(m->start_session(sample));

  std::vector<Hypothesis<Real>> live(1);
  live[0].ids = {kBosId};
  for (const auto& s : sessions) live[0].states.push_back(s.h0);

  std::vector<Hypothesis<Real>> done;
  const auto final_score = [&](const Hypothesis<Real>& h) {
    return length_norm ? h.logp / static_cast<double>(h.ids.size() - 1) : h.logp;
  };

  for (int step = 0; step < max_len && !live.empty(); ++step) {
    struct Cand {
      double logp;
      int hyp;
      int token;
    };
    std::vector<Cand> cands;
    cands.reserve(live.size() * static_cast<std::size_t>(vocab));
    std::vector<std::vector<DecoderState<Real>>> new_states(live.size());
    for (std::size_t hi = 0; hi < live.size(); ++hi) {
      std::vector<std::vector<Real>> dists;
      dists.reserve(models.size());
      for (std::size_t mi = 0; mi < models.size(); ++mi) {
        auto [dist, st] =
            models[mi]->decode_step(sessions[mi], live[hi].ids.back(), live[hi].states[mi]);
        dists.push_back(std::move(dist));
        new_states[hi].push_back(std::move(st));
      }
      const auto combined =
          models.size() == 1 ? std::move(dists[0]) : ensemble_step(dists, mode);
      for (int v = 0; v < vocab; ++v) {
        if (v == kPadId || v == kBosId) continue;
        cands.push_back({live[hi].logp +
                             std::log(std::max(static_cast<double>(combined[v]), 1e-300)),
                         static_cast<int>(hi), v});
      }
    }
    // deterministic order: score desc, then hyp index, then token id
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.logp != b.logp) return a.logp > b.logp;
      if (a.hyp != b.hyp) return a.hyp < b.hyp;
      return a.token < b.token;
    });

    std::vector<Hypothesis<Real>> next;
    for (const Cand& c : cands) {
      if (static_cast<int>(next.size()) >= beam_size) break;
      Hypothesis<Real> h;
      h.ids = live[c.hyp].ids;
      h.ids.push_back(c.token);
      h.logp = c.logp;
      h.states.reserve(models.size());
      for (const auto& st : new_states[c.hyp]) h.states.push_back(st.h_tilde);
      if (c.token == kEosId) {
        h.finished = true;
        done.push_back(std::move(h));  // retired; score is final
      } else {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
    if (!done.empty() && !live.empty() && !length_norm) {
      // scores only decrease, so once the best retired hypothesis beats
      // every live one the search cannot improve
      double best_done = done[0].logp;
      for (const auto& h : done) best_done = std::max(best_done, h.logp);
      double best_live = live[0].logp;
      for (const auto& h : live) best_live = std::max(best_live, h.logp);
      if (best_done >= best_live) break;
    }
  }

  const auto pick = [&](const std::vector<Hypothesis<Real>>& hs) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < hs.size(); ++i)
      if (final_score(hs[i]) > final_score(hs[best])) best = i;
    return best;
  };

  BeamResult result;
  if (!done.empty()) {
    const auto& h = done[pick(done)];
    result.ids.assign(h.ids.begin() + 1, h.ids.end());
    result.logp = h.logp;
    result.finished = true;
  } else if (!live.empty()) {
    const auto& h = live[pick(live)];
    result.ids.assign(h.ids.begin() + 1, h.ids.end());
    result.logp = h.logp;
    result.finished = false;
  }
  return result;
}

template <class Real>
BeamResult beam_search(const Model<Real>& model, const Sample& sample,
                       int beam_size = 12, int max_len = -1,
                       bool length_norm = false) {
  return beam_search(std::vector<const Model<Real>*>{&model}, sample, beam_size,
                     max_len, length_norm);
}

/// Decode ids into tokens (drops <eos> and other specials, undoes BPE).
inline std::vector<std::string> ids_to_tokens(const std::vector<int>& ids,
                                              const Vocabulary& vocab,
                                              bool undo_bpe = true) {
  std::vector<std::string> sub;
  for (int id : ids) {
    if (id == kEosId || id == kBosId || id == kPadId) continue;
    sub.push_back(vocab.decode(id));
  }
  return undo_bpe ? bpe_undo(sub) : sub;
}

}  // namespace mmtl
