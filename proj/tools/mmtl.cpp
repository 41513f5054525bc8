// mmtl — single entry point for the multimodal translation pipeline.
//
// Subcommands: learn-bpe, apply-bpe, build-vocab, synth, train, translate,
// evaluate, significance, count-params, grad-check.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
// Every subcommand writes only inside its --out directory and is
// reproducible from its config + seed alone (the effective config is
// echoed verbatim into --out).

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mmtl/datastore.hpp"
#include "mmtl/decoder.hpp"
#include "mmtl/evalkit.hpp"
#include "mmtl/model.hpp"
#include "mmtl/trainer.hpp"

using namespace mmtl;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

unsigned thread_cap() {
  const char* env = std::getenv("MMTL_THREADS");
  if (!env) return std::thread::hardware_concurrency() > 0
                       ? std::thread::hardware_concurrency()
                       : 1u;
  const long v = std::strtol(env, nullptr, 10);
  if (v < 1) throw std::runtime_error("MMTL_THREADS must be a positive integer");
  return static_cast<unsigned>(v);
}

json load_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

void echo_config(const std::string& config_path, const std::string& out_dir) {
  std::ifstream is(config_path, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  std::ofstream os(out_dir + "/" + fs::path(config_path).filename().string(),
                   std::ios::binary);
  os << ss.str();
  if (!os) throw std::runtime_error("cannot echo config into " + out_dir);
}

void ensure_out(const std::string& out_dir) {
  if (out_dir.empty()) throw std::runtime_error("--out directory required");
  fs::create_directories(out_dir);
}

TokenCorpus read_token_lines(const std::string& path, bool undo_bpe) {
  TokenCorpus corpus;
  for (const auto& line : read_lines(path)) {
    auto toks = split_ws(line);
    corpus.push_back(undo_bpe ? bpe_undo(toks) : std::move(toks));
  }
  return corpus;
}

void write_token_lines(const TokenCorpus& corpus, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  for (const auto& line : corpus) {
    for (std::size_t i = 0; i < line.size(); ++i)
      os << line[i] << (i + 1 < line.size() ? " " : "");
    os << '\n';
  }
}

// --- experiment configuration -------------------------------------------------

struct DataConfig {
  std::string train_src, train_trg, val_src, val_trg;
  std::string src_vocab, trg_vocab;
  std::string train_global, train_spatial, val_global, val_spatial;
  bool normalize_features = false;
};

void from_json(const json& j, DataConfig& c) {
  c.train_src = j.value("train_src", "");
  c.train_trg = j.value("train_trg", "");
  c.val_src = j.value("val_src", "");
  c.val_trg = j.value("val_trg", "");
  c.src_vocab = j.value("src_vocab", "");
  c.trg_vocab = j.value("trg_vocab", "");
  c.train_global = j.value("train_global", "");
  c.train_spatial = j.value("train_spatial", "");
  c.val_global = j.value("val_global", "");
  c.val_spatial = j.value("val_spatial", "");
  c.normalize_features = j.value("normalize_features", false);
}

struct ExperimentConfig {
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
};

void from_json(const json& j, ExperimentConfig& c) {
  if (j.contains("data")) c.data = j.at("data").get<DataConfig>();
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw std::runtime_error("config is missing the " + what + " path");
  if (!fs::exists(path)) throw std::runtime_error(what + " file not found: " + path);
}

std::vector<Sample> load_split(const DataConfig& d, const ModelConfig& m,
                               const Vocabulary& sv, const Vocabulary& tv,
                               const std::string& src, const std::string& trg,
                               const std::string& global_path,
                               const std::string& spatial_path) {
  auto samples = load_parallel(src, trg, sv, tv);
  if (m.uses_global()) {
    require_file(global_path, "global feature");
    attach_features(samples, load_features(global_path), false);
  }
  if (m.uses_spatial()) {
    require_file(spatial_path, "spatial feature");
    attach_features(samples, load_features(spatial_path), true);
  }
  if (d.normalize_features) l2_normalize_features(samples);
  return samples;
}

// --- subcommand implementations -------------------------------------------------

int cmd_learn_bpe(const std::vector<std::string>& inputs, int merges,
                  const std::string& out_dir, const std::string& name, bool raw) {
  ensure_out(out_dir);
  std::vector<std::vector<std::string>> corpus;
  for (const auto& path : inputs)
    for (const auto& line : read_lines(path))
      corpus.push_back(raw ? split_ws(line) : normalize_line(line));
  const BpeModel model = bpe_learn(corpus, merges);
  bpe_save(model, out_dir + "/" + name);
  std::printf("learned %zu merges from %zu lines -> %s/%s\n", model.merges.size(),
              corpus.size(), out_dir.c_str(), name.c_str());
  return 0;
}

int cmd_apply_bpe(const std::string& model_path, const std::string& input,
                  const std::string& out_dir, std::string name, bool raw) {
  ensure_out(out_dir);
  const BpeModel model = bpe_load(model_path);
  if (name.empty()) name = fs::path(input).filename().string() + ".bpe";
  TokenCorpus out;
  for (const auto& line : read_lines(input))
    out.push_back(bpe_apply(model, raw ? split_ws(line) : normalize_line(line)));
  write_token_lines(out, out_dir + "/" + name);
  std::printf("wrote %zu lines -> %s/%s\n", out.size(), out_dir.c_str(), name.c_str());
  return 0;
}

int cmd_build_vocab(const std::vector<std::string>& inputs,
                    const std::string& out_dir, const std::string& name) {
  ensure_out(out_dir);
  std::vector<std::vector<std::string>> corpus;
  for (const auto& path : inputs)
    for (const auto& line : read_lines(path)) corpus.push_back(split_ws(line));
  const Vocabulary vocab = Vocabulary::build(corpus);
  vocab.save(out_dir + "/" + name);
  std::printf("vocabulary of %d tokens -> %s/%s\n", vocab.size(), out_dir.c_str(),
              name.c_str());
  return 0;
}

int cmd_synth(const std::string& config_path, std::uint64_t seed,
              const std::string& out_dir) {
  ensure_out(out_dir);
  SynthConfig cfg;
  if (!config_path.empty()) {
    cfg = load_json(config_path).get<SynthConfig>();
    echo_config(config_path, out_dir);
  }
  synth_generate(cfg, seed, out_dir);
  std::printf("synthetic corpus (%d train / %d test) -> %s\n", cfg.n_train,
              cfg.n_test, out_dir.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::string& seeds_flag, unsigned parallel) {
  ensure_out(out_dir);
  const json raw = load_json(config_path);
  ExperimentConfig cfg = raw.get<ExperimentConfig>();
  echo_config(config_path, out_dir);

  if (!seeds_flag.empty()) {
    cfg.seeds.clear();
    std::istringstream ss(seeds_flag);
    std::string item;
    while (std::getline(ss, item, ','))
      cfg.seeds.push_back(std::stoull(item));
  }
  if (cfg.seeds.empty()) throw std::runtime_error("no seeds given");

  require_file(cfg.data.train_src, "train source");
  require_file(cfg.data.train_trg, "train target");
  require_file(cfg.data.src_vocab, "source vocabulary");
  require_file(cfg.data.trg_vocab, "target vocabulary");
  const Vocabulary sv = Vocabulary::load(cfg.data.src_vocab);
  const Vocabulary tv = Vocabulary::load(cfg.data.trg_vocab);
  cfg.model.src_vocab_size = sv.size();
  cfg.model.trg_vocab_size = tv.size();

  const auto train_set =
      load_split(cfg.data, cfg.model, sv, tv, cfg.data.train_src,
                 cfg.data.train_trg, cfg.data.train_global, cfg.data.train_spatial);
  std::vector<Sample> val_set;
  TrainData data;
  data.train = &train_set;
  if (!cfg.data.val_src.empty()) {
    require_file(cfg.data.val_trg, "validation target");
    val_set = load_split(cfg.data, cfg.model, sv, tv, cfg.data.val_src,
                         cfg.data.val_trg, cfg.data.val_global, cfg.data.val_spatial);
    data.val = &val_set;
    data.val_refs = read_token_lines(cfg.data.val_trg, true);
    data.trg_vocab = &tv;
  }

  parallel = std::min(std::max(parallel, 1u), thread_cap());
  const auto results =
      train_multi<float>(cfg.model, cfg.train, data, cfg.seeds, "", parallel);

  ModelConfig saved_cfg = cfg.model;
  saved_cfg.dropout = cfg.train.dropout;
  saved_cfg.l2_factor = cfg.train.l2;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const std::string stem = out_dir + "/seed" + std::to_string(cfg.seeds[i]);
    save_model(saved_cfg, results[i].params, stem + ".mmtm");
    RunLog log = results[i].log;
    log.checkpoint_path = stem + ".mmtm";
    log.save_jsonl(stem + ".log.jsonl");
    std::printf("seed %llu: %lld updates, stop=%s, best METEOR-x %.4f -> %s.mmtm\n",
                static_cast<unsigned long long>(cfg.seeds[i]), log.total_updates,
                log.stop_reason.c_str(), log.best_metric, stem.c_str());
  }
  return 0;
}

int cmd_translate(const std::vector<std::string>& checkpoints,
                  const std::string& src_path, const std::string& src_vocab_path,
                  const std::string& trg_vocab_path, const std::string& global_path,
                  const std::string& spatial_path, int beam, int max_len,
                  bool length_norm, const std::string& ensemble_mode,
                  const std::string& out_dir, const std::string& name) {
  ensure_out(out_dir);
  const Vocabulary sv = Vocabulary::load(src_vocab_path);
  const Vocabulary tv = Vocabulary::load(trg_vocab_path);

  std::vector<ModelConfig> cfgs;
  std::vector<ParamStore<float>> stores;
  for (const auto& path : checkpoints) {
    auto [cfg, ps] = load_model<float>(path);
    cfgs.push_back(cfg);
    stores.push_back(std::move(ps));
  }
  std::vector<Model<float>> models;
  models.reserve(cfgs.size());
  for (std::size_t i = 0; i < cfgs.size(); ++i) models.emplace_back(cfgs[i], stores[i]);
  std::vector<const Model<float>*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);

  std::vector<Sample> samples;
  for (const auto& line : read_lines(src_path)) {
    const auto toks = split_ws(line);
    if (toks.empty()) throw std::runtime_error("empty source line in " + src_path);
    Sample s;
    s.src_ids = sv.encode(toks);
    s.src_ids.push_back(kEosId);
    samples.push_back(std::move(s));
  }
  if (cfgs[0].uses_global()) {
    require_file(global_path, "global feature");
    attach_features(samples, load_features(global_path), false);
  }
  if (cfgs[0].uses_spatial()) {
    require_file(spatial_path, "spatial feature");
    attach_features(samples, load_features(spatial_path), true);
  }

  const EnsembleMode mode =
      ensemble_mode == "geo" ? EnsembleMode::kGeo : EnsembleMode::kArith;
  TokenCorpus hyps;
  for (const auto& s : samples) {
    const auto br = beam_search(ptrs, s, beam, max_len, length_norm, mode);
    hyps.push_back(ids_to_tokens(br.ids, tv));
  }
  write_token_lines(hyps, out_dir + "/" + name);
  std::printf("translated %zu lines with %zu model(s), beam %d -> %s/%s\n",
              hyps.size(), models.size(), beam, out_dir.c_str(), name.c_str());
  return 0;
}

int cmd_evaluate(const std::vector<std::string>& hyp_paths,
                 const std::string& ensemble_path, const std::string& ref_path,
                 const std::string& system_name, const std::string& out_dir) {
  std::vector<TokenCorpus> per_seed;
  for (const auto& p : hyp_paths) per_seed.push_back(read_token_lines(p, true));
  const TokenCorpus refs = read_token_lines(ref_path, true);
  TokenCorpus ensemble;
  if (!ensemble_path.empty()) ensemble = read_token_lines(ensemble_path, true);
  const SystemReport report =
      aggregate_runs(per_seed, ensemble_path.empty() ? nullptr : &ensemble, refs);
  std::printf("%s\n", render_report_row(system_name, report).c_str());
  if (!out_dir.empty()) {
    ensure_out(out_dir);
    std::ofstream os(out_dir + "/report.json");
    os << json(report).dump(2) << '\n';
    if (!os) throw std::runtime_error("cannot write report.json");
  }
  return 0;
}

int cmd_significance(const std::string& hyp_a, const std::string& hyp_b,
                     const std::string& ref_path, const std::string& metric_name,
                     int shuffles, std::uint64_t seed) {
  const Metric metric = metric_name == "bleu" ? Metric::kBleu : Metric::kMeteor;
  const TokenCorpus a = read_token_lines(hyp_a, true);
  const TokenCorpus b = read_token_lines(hyp_b, true);
  const TokenCorpus refs = read_token_lines(ref_path, true);
  Rng rng(seed);
  const double p = ar_test(metric, a, b, refs, shuffles, rng);
  const double score_a = corpus_metric(metric, a, refs);
  const double score_b = corpus_metric(metric, b, refs);
  std::printf("%s: A=%.4f B=%.4f  approximate-randomization p=%.6f (%d shuffles)\n",
              metric_name.c_str(), score_a, score_b, p, shuffles);
  return 0;
}

int cmd_count_params(const std::string& config_path, const std::string& variant_flag) {
  const json j = load_json(config_path);
  ModelConfig cfg = (j.contains("model") ? j.at("model") : j).get<ModelConfig>();
  if (!variant_flag.empty()) cfg.variant = variant_from_name(variant_flag);
  const ParamCount pc = count_params(cfg);
  std::printf("variant %s\n", variant_name(cfg.variant));
  for (const auto& [name, n] : pc.breakdown)
    std::printf("  %-24s %10zu\n", name.c_str(), n);
  std::printf("total %zu (%.2fM)\n", pc.total, static_cast<double>(pc.total) / 1e6);
  return 0;
}

int cmd_grad_check(double eps, double tol) {
  ModelConfig cfg;
  cfg.E = 8;
  cfg.R = 8;
  cfg.src_vocab_size = 20;
  cfg.trg_vocab_size = 20;
  cfg.D_g = 12;
  cfg.P = 4;
  cfg.D_s = 6;
  bool all_pass = true;
  for (Variant v : all_variants()) {
    cfg.variant = v;
    ParamStore<double> ps;
    Rng rng(1234);
    register_params(cfg, ps, rng);
    Model<double> model(cfg, ps);
    Sample smp;
    smp.src_ids = {5, 9, 14, kEosId};
    smp.trg_ids = {kBosId, 7, 11, 4, kEosId};
    if (cfg.uses_global()) {
      Rng fr(5);
      smp.global_feat.resize(cfg.D_g);
      for (auto& x : smp.global_feat) x = static_cast<float>(fr.uniform(-1, 1));
    }
    if (cfg.uses_spatial()) {
      Rng fr(6);
      smp.spatial_feat.resize(static_cast<std::size_t>(cfg.P) * cfg.D_s);
      for (auto& x : smp.spatial_feat) x = static_cast<float>(fr.uniform(-1, 1));
      smp.spatial_rows = cfg.P;
      smp.spatial_cols = cfg.D_s;
    }
    const auto model_fn = [&](bool with_grad) -> double {
      Tape<double> tp(with_grad);
      auto [loss, n] = model.sentence_nll(tp, smp);
      if (with_grad) tp.backward(loss);
      return loss->v[0];
    };
    const auto report = grad_check<double>(model_fn, ps, eps, tol);
    std::printf("%-22s %s (worst rel err %.3e)\n", variant_name(v),
                report.pass ? "ok" : "FAIL", report.worst);
    if (!report.pass) all_pass = false;
  }
  if (!all_pass) {
    std::fprintf(stderr, "gradient check failed\n");
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mmtl — multimodal attentive translation pipeline"};
  app.require_subcommand(1);

  // learn-bpe
  auto* learn = app.add_subcommand("learn-bpe", "learn BPE merges from raw text");
  std::vector<std::string> lb_inputs;
  int lb_merges = 10000;
  std::string lb_out, lb_name = "bpe.model";
  bool lb_raw = false;
  learn->add_option("--input", lb_inputs, "input text file(s)")->required();
  learn->add_option("--merges", lb_merges, "number of merges");
  learn->add_option("--out", lb_out, "output directory")->required();
  learn->add_option("--name", lb_name, "output file name");
  learn->add_flag("--raw", lb_raw, "skip normalization, split on whitespace");

  // apply-bpe
  auto* apply = app.add_subcommand("apply-bpe", "segment text with a BPE model");
  std::string ab_model, ab_input, ab_out, ab_name;
  bool ab_raw = false;
  apply->add_option("--model", ab_model, "BPE model file")->required();
  apply->add_option("--input", ab_input, "input text file")->required();
  apply->add_option("--out", ab_out, "output directory")->required();
  apply->add_option("--name", ab_name, "output file name");
  apply->add_flag("--raw", ab_raw, "skip normalization, split on whitespace");

  // build-vocab
  auto* bv = app.add_subcommand("build-vocab", "build a vocabulary from tokens");
  std::vector<std::string> bv_inputs;
  std::string bv_out, bv_name = "vocab.txt";
  bv->add_option("--input", bv_inputs, "tokenized input file(s)")->required();
  bv->add_option("--out", bv_out, "output directory")->required();
  bv->add_option("--name", bv_name, "output file name");

  // synth
  auto* sy = app.add_subcommand("synth", "generate the synthetic grounded corpus");
  std::string sy_config, sy_out;
  std::uint64_t sy_seed = 1;
  sy->add_option("--config", sy_config, "SynthConfig JSON (optional)");
  sy->add_option("--seed", sy_seed, "generator seed");
  sy->add_option("--out", sy_out, "output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "train one or more seeded runs");
  std::string tr_config, tr_out, tr_seeds;
  unsigned tr_parallel = 1;
  tr->add_option("--config", tr_config, "experiment config JSON")->required();
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_option("--seeds", tr_seeds, "comma-separated seed list (overrides config)");
  tr->add_option("--parallel", tr_parallel, "concurrent runs (capped by MMTL_THREADS)");

  // translate
  auto* tl = app.add_subcommand("translate", "beam-search decode a source file");
  std::vector<std::string> tl_ckpts;
  std::string tl_src, tl_sv, tl_tv, tl_global, tl_spatial, tl_mode = "arith";
  std::string tl_out, tl_name = "hyp.txt";
  int tl_beam = 12, tl_maxlen = -1;
  bool tl_lnorm = false;
  tl->add_option("--checkpoint", tl_ckpts, "model file(s); several = ensemble")->required();
  tl->add_option("--src", tl_src, "tokenized source file")->required();
  tl->add_option("--src-vocab", tl_sv, "source vocabulary")->required();
  tl->add_option("--trg-vocab", tl_tv, "target vocabulary")->required();
  tl->add_option("--global", tl_global, "global feature file (.mmtf)");
  tl->add_option("--spatial", tl_spatial, "spatial feature file (.mmtf)");
  tl->add_option("--beam", tl_beam, "beam size");
  tl->add_option("--max-len", tl_maxlen, "max target length (-1: 3*src+5)");
  tl->add_flag("--length-norm", tl_lnorm, "normalize scores by length");
  tl->add_option("--ensemble", tl_mode, "arith|geo")->check(CLI::IsMember({"arith", "geo"}));
  tl->add_option("--out", tl_out, "output directory")->required();
  tl->add_option("--name", tl_name, "output file name");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "score hypotheses with BLEU and METEOR-x");
  std::vector<std::string> ev_hyps;
  std::string ev_ens, ev_ref, ev_name = "system", ev_out;
  ev->add_option("--hyp", ev_hyps, "hypothesis file(s), one per run")->required();
  ev->add_option("--ensemble-hyp", ev_ens, "ensemble hypothesis file (optional)");
  ev->add_option("--ref", ev_ref, "reference file")->required();
  ev->add_option("--name", ev_name, "system name for the report row");
  ev->add_option("--out", ev_out, "directory for report.json (optional)");

  // significance
  auto* sig = app.add_subcommand("significance", "approximate-randomization test");
  std::string sg_a, sg_b, sg_ref, sg_metric = "meteor";
  int sg_shuffles = 10000;
  std::uint64_t sg_seed = 1;
  sig->add_option("--hyp-a", sg_a, "system A hypotheses")->required();
  sig->add_option("--hyp-b", sg_b, "system B hypotheses")->required();
  sig->add_option("--ref", sg_ref, "reference file")->required();
  sig->add_option("--metric", sg_metric, "bleu|meteor")
      ->check(CLI::IsMember({"bleu", "meteor"}));
  sig->add_option("--shuffles", sg_shuffles, "number of shuffles");
  sig->add_option("--seed", sg_seed, "shuffle seed");

  // count-params
  auto* cp = app.add_subcommand("count-params", "parameter count and breakdown");
  std::string cp_config, cp_variant;
  cp->add_option("--config", cp_config, "model or experiment config JSON")->required();
  cp->add_option("--variant", cp_variant, "override the config's variant");

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient check");
  double gc_eps = 1e-5, gc_tol = 1e-4;
  gc->add_option("--eps", gc_eps, "finite-difference step");
  gc->add_option("--tol", gc_tol, "relative-error tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*learn) return cmd_learn_bpe(lb_inputs, lb_merges, lb_out, lb_name, lb_raw);
    if (*apply) return cmd_apply_bpe(ab_model, ab_input, ab_out, ab_name, ab_raw);
    if (*bv) return cmd_build_vocab(bv_inputs, bv_out, bv_name);
    if (*sy) return cmd_synth(sy_config, sy_seed, sy_out);
    if (*tr) return cmd_train(tr_config, tr_out, tr_seeds, tr_parallel);
    if (*tl)
      return cmd_translate(tl_ckpts, tl_src, tl_sv, tl_tv, tl_global, tl_spatial,
                           tl_beam, tl_maxlen, tl_lnorm, tl_mode, tl_out, tl_name);
    if (*ev) return cmd_evaluate(ev_hyps, ev_ens, ev_ref, ev_name, ev_out);
    if (*sig)
      return cmd_significance(sg_a, sg_b, sg_ref, sg_metric, sg_shuffles, sg_seed);
    if (*cp) return cmd_count_params(cp_config, cp_variant);
    if (*gc) return cmd_grad_check(gc_eps, gc_tol);
  } catch (const TrainError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
