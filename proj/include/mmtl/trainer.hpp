#pragma once

// Training loop: ADAM with L2 gradient augmentation, global-norm
// clipping, dropout, periodic beam-search validation scored with the
// METEOR surrogate, patience-based early stopping and seeded multi-run
// training.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "mmtl/datastore.hpp"
#include "mmtl/decoder.hpp"
#include "mmtl/evalkit.hpp"
#include "mmtl/model.hpp"
#include "mmtl/numerics.hpp"

namespace mmtl {

struct TrainConfig {
  double lr = 4e-4;
  int batch_size = 32;
  double clip = 5.0;
  double l2 = 1e-5;
  std::array<double, 3> dropout{0.3, 0.5, 0.5};  // "enfr" preset: (0.2, 0.4, 0.4)
  int eval_every = 1000;   // updates between validations
  int patience = 10;       // non-improving validations before stopping
  int beam_for_validation = 12;
  long long max_updates = 100000;  // safety bound, not a tuned value
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (lr <= 0 || batch_size < 1 || clip <= 0 || l2 < 0 || eval_every < 1 ||
        patience < 1 || beam_for_validation < 1 || max_updates < 1)
      throw std::invalid_argument("train config: all fields must be positive");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"batch_size", c.batch_size},
       {"clip", c.clip},
       {"l2", c.l2},
       {"dropout", c.dropout},
       {"eval_every", c.eval_every},
       {"patience", c.patience},
       {"beam_for_validation", c.beam_for_validation},
       {"max_updates", c.max_updates}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.clip = j.value("clip", d.clip);
  c.l2 = j.value("l2", d.l2);
  if (j.contains("dropout")) c.dropout = j.at("dropout").get<std::array<double, 3>>();
  c.eval_every = j.value("eval_every", d.eval_every);
  c.patience = j.value("patience", d.patience);
  c.beam_for_validation = j.value("beam_for_validation", d.beam_for_validation);
  c.max_updates = j.value("max_updates", d.max_updates);
}

/// Bias-corrected ADAM with the L2 term folded into the gradient
/// (l2 * theta) before the moment updates.
template <class Real>
struct AdamState {
  std::map<std::string, std::pair<std::vector<Real>, std::vector<Real>>> moments;
  long long t = 0;
};

template <class Real>
void adam_step(ParamStore<Real>& params, AdamState<Real>& state, double lr,
               double beta1, double beta2, double eps, long long t, double l2) {
  if (t < 1) throw std::invalid_argument("adam_step: t must be >= 1");
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (auto& [name, p] : params.entries()) {
    p.ensure_grad();
    auto& [m, v] = state.moments[name];
    if (m.size() != p.v.size()) {
      m.assign(p.v.size(), Real(0));
      v.assign(p.v.size(), Real(0));
    }
    for (std::size_t i = 0; i < p.v.size(); ++i) {
      const double g = static_cast<double>(p.g[i]) + l2 * static_cast<double>(p.v[i]);
      const double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * g;
      const double vi = beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * g * g;
      m[i] = static_cast<Real>(mi);
      v[i] = static_cast<Real>(vi);
      p.v[i] -= static_cast<Real>(lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
    }
  }
  state.t = t;
}

/// Inverted dropout on a plain vector: zero with probability p, the
/// survivors scaled by 1/(1-p). Identity in eval mode and at p = 0.
template <class Real>
std::vector<Real> apply_dropout(const std::vector<Real>& x, double p,
                                bool train_mode, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0,1)");
  if (!train_mode || p == 0.0) return x;
  std::vector<Real> out(x.size());
  const Real keep = static_cast<Real>(1.0 / (1.0 - p));
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = rng.uniform() < p ? Real(0) : x[i] * keep;
  return out;
}

struct TrainError : std::runtime_error {
  long long update;
  std::size_t batch_index;
  TrainError(long long u, std::size_t b)
      : std::runtime_error("non-finite loss at update " + std::to_string(u) +
                           ", batch " + std::to_string(b)),
        update(u),
        batch_index(b) {}
};

struct RunLogEvent {
  std::string type;  // "update" | "validation"
  long long update = 0;
  double loss = 0.0;    // per-token NLL (updates)
  double metric = 0.0;  // METEOR surrogate (validations)
  double best = 0.0;
};

struct RunLog {
  std::uint64_t seed = 0;
  std::vector<RunLogEvent> events;
  std::string stop_reason;  // "early_stop" | "max_updates"
  double best_metric = 0.0;
  long long best_update = 0;
  long long total_updates = 0;
  std::string checkpoint_path;

  void save_jsonl(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("runlog: cannot open " + path);
    for (const auto& e : events) {
      nlohmann::json j = {{"type", e.type}, {"update", e.update}};
      if (e.type == "update") j["loss"] = e.loss;
      if (e.type == "validation") {
        j["metric"] = e.metric;
        j["best"] = e.best;
      }
      os << j.dump() << '\n';
    }
    nlohmann::json fin = {{"type", "final"},
                          {"seed", seed},
                          {"stop_reason", stop_reason},
                          {"best_metric", best_metric},
                          {"best_update", best_update},
                          {"total_updates", total_updates},
                          {"checkpoint", checkpoint_path}};
    os << fin.dump() << '\n';
  }
};

struct TrainData {
  const std::vector<Sample>* train = nullptr;
  const std::vector<Sample>* val = nullptr;       // optional
  TokenCorpus val_refs;                           // un-BPE'd reference tokens
  const Vocabulary* trg_vocab = nullptr;          // required when val given
};

template <class Real>
struct TrainResult {
  RunLog log;
  ParamStore<Real> params;  // best checkpoint (or final, if never validated)
};

/// One training run. Deterministic given (configs, data, seed): a single
/// RNG stream drives init, shuffling and dropout in a fixed order.
template <class Real>
TrainResult<Real> train(const ModelConfig& model_cfg_in, const TrainConfig& train_cfg,
                        const TrainData& data, std::uint64_t seed,
                        const std::string& checkpoint_path = "") {
  train_cfg.validate();
  if (!data.train || data.train->empty())
    throw std::invalid_argument("train: no training data");
  ModelConfig model_cfg = model_cfg_in;
  model_cfg.dropout = train_cfg.dropout;
  model_cfg.l2_factor = train_cfg.l2;

  TrainResult<Real> result;
  result.log.seed = seed;
  result.params.rng_seed = seed;
  Rng rng(seed);
  register_params(model_cfg, result.params, rng);
  Model<Real> model(model_cfg, result.params);

  AdamState<Real> adam;
  std::vector<Tensor<Real>*> grad_refs;
  for (auto& [name, t] : result.params.entries()) grad_refs.push_back(&t);

  std::optional<ParamStore<Real>> best_params;
  double best_metric = -1.0;
  long long best_update = 0;
  int bad_validations = 0;
  long long update = 0;
  bool stop = false;

  const auto validate_now = [&]() {
    if (!data.val || data.val->empty()) return;
    TokenCorpus hyps;
    hyps.reserve(data.val->size());
    for (const auto& s : *data.val) {
      BeamResult br = beam_search(model, s, train_cfg.beam_for_validation);
      hyps.push_back(ids_to_tokens(br.ids, *data.trg_vocab));
    }
    const double metric = meteor_surrogate(hyps, data.val_refs);
    if (metric > best_metric) {
      best_metric = metric;
      best_update = update;
      best_params = result.params;  // deep copy of the current weights
      bad_validations = 0;
    } else {
      ++bad_validations;
    }
    result.log.events.push_back({"validation", update, 0.0, metric, best_metric});
    if (bad_validations >= train_cfg.patience) {
      stop = true;
      result.log.stop_reason = "early_stop";
    }
  };

  while (!stop) {
    auto batches = make_batches(*data.train, train_cfg.batch_size, rng, true);
    for (std::size_t bi = 0; bi < batches.size() && !stop; ++bi) {
      const Batch& batch = batches[bi];
      Tape<Real> tape;
      std::vector<typename Tape<Real>::Ref> losses;
      int tokens = 0;
      for (const Sample* s : batch.samples) {
        auto [loss, n] = model.sentence_nll(tape, *s, true, &rng);
        losses.push_back(loss);
        tokens += n;
      }
      auto total = ops::sum_scalars(tape, losses);
      auto loss = ops::scale(tape, total, static_cast<Real>(1.0 / tokens));
      const double loss_val = static_cast<double>(loss->v[0]);
      ++update;
      if (!std::isfinite(loss_val)) throw TrainError(update, bi);
      result.params.zero_grad();
      tape.backward(loss);
      clip_global_norm(grad_refs, train_cfg.clip);
      adam_step(result.params, adam, train_cfg.lr, train_cfg.adam_beta1,
                train_cfg.adam_beta2, train_cfg.adam_eps, update, train_cfg.l2);
      result.log.events.push_back({"update", update, loss_val, 0.0, 0.0});

      if (update % train_cfg.eval_every == 0) validate_now();
      if (!stop && update >= train_cfg.max_updates) {
        stop = true;
        result.log.stop_reason = "max_updates";
      }
    }
  }

  if (best_params) result.params = std::move(*best_params);
  result.log.best_metric = std::max(best_metric, 0.0);
  result.log.best_update = best_update;
  result.log.total_updates = update;
  if (!checkpoint_path.empty()) {
    save_checkpoint(result.params, checkpoint_path);
    result.log.checkpoint_path = checkpoint_path;
  }
  return result;
}

/// Independent runs with independent RNG streams; results ordered as the
/// seed list. Runs share no mutable state, so they may fan out across
/// worker threads.
template <class Real>
std::vector<TrainResult<Real>> train_multi(const ModelConfig& model_cfg,
                                           const TrainConfig& train_cfg,
                                           const TrainData& data,
                                           const std::vector<std::uint64_t>& seeds,
                                           const std::string& checkpoint_prefix = "",
                                           unsigned n_workers = 1) {
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw std::invalid_argument("train_multi: duplicate seeds");
  std::vector<TrainResult<Real>> results(seeds.size());
  std::exception_ptr first_error;

  const auto run_one = [&](std::size_t i) {
    const std::string path =
        checkpoint_prefix.empty()
            ? ""
            : checkpoint_prefix + "seed" + std::to_string(seeds[i]) + ".mmtl";
    results[i] = train<Real>(model_cfg, train_cfg, data, seeds[i], path);
  };

  if (n_workers <= 1) {
    for (std::size_t i = 0; i < seeds.size(); ++i) run_one(i);
  } else {
    std::vector<std::thread> pool;
    std::size_t next = 0;
    std::mutex mu;
    for (unsigned w = 0; w < n_workers; ++w)
      pool.emplace_back([&] {
        for (;;) {
          std::size_t i;
          {
            std::lock_guard<std::mutex> lock(mu);
            if (next >= seeds.size() || first_error) return;
            i = next++;
          }
          try {
            run_one(i);
          } catch (...) {
            std::lock_guard<std::mutex> lock(mu);
            if (!first_error) first_error = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }
  return results;
}

}  // namespace mmtl
