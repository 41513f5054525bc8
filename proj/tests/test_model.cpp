#include <catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "mmtl/model.hpp"
#include "mmtl/numerics.hpp"
#include "mmtl/rng.hpp"

using namespace mmtl;

namespace {

ModelConfig tiny_cfg(Variant v) {
  ModelConfig cfg;
  cfg.variant = v;
  cfg.E = 2;
  cfg.R = 2;
  cfg.src_vocab_size = 5;
  cfg.trg_vocab_size = 6;
  cfg.D_g = 3;
  cfg.P = 2;
  cfg.D_s = 3;
  return cfg;
}

Sample tiny_sample(const ModelConfig& cfg) {
  Sample s;
  s.src_ids = {4, 3, kEosId};
  s.trg_ids = {kBosId, 4, 5, kEosId};
  if (cfg.uses_global()) s.global_feat = {0.4f, -0.2f, 0.7f};
  if (cfg.uses_spatial()) {
    s.spatial_feat = {0.1f, 0.5f, -0.3f, 0.2f, -0.6f, 0.9f};
    s.spatial_rows = cfg.P;
    s.spatial_cols = cfg.D_s;
  }
  return s;
}

using Vec = std::vector<double>;

Vec matv(const Tensor<double>& W, const Vec& x) {
  const int m = W.shape[0], n = W.shape[1];
  Vec y(m, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) y[i] += W.v[static_cast<std::size_t>(i) * n + j] * x[j];
  return y;
}

Vec vtanh(Vec x) {
  for (auto& v : x) v = std::tanh(v);
  return x;
}

Vec vsigmoid(Vec x) {
  for (auto& v : x) v = 1.0 / (1.0 + std::exp(-v));
  return x;
}

Vec vadd(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

Vec ln_plain(Vec s, const Vec& gain, const Vec& bias, double eps) {
  double mean = 0;
  for (double x : s) mean += x;
  mean /= static_cast<double>(s.size());
  double var = 0;
  for (double x : s) var += (x - mean) * (x - mean);
  var /= static_cast<double>(s.size());
  const double inv = 1.0 / std::sqrt(var + eps);
  for (std::size_t i = 0; i < s.size(); ++i)
    s[i] = (s[i] - mean) * inv * gain[i] + bias[i];
  return s;
}

/// Independent plain-loop reimplementation of the baseline forward pass.
double oracle_baseline_nll(const ModelConfig& cfg, const ParamStore<double>& ps,
                           const Sample& smp) {
  const auto& P = ps;
  const auto gru = [&](const std::string& p, const Vec& x, const Vec& h, bool ln) {
    const auto gate = [&](const char* g, const Vec& hin) {
      Vec s = vadd(vadd(matv(P.at(p + ".W" + g), x), matv(P.at(p + ".U" + g), hin)),
                   P.at(p + ".b" + g).v);
      if (ln)
        s = ln_plain(s, P.at(p + ".ln_" + std::string(g) + ".gain").v,
                     P.at(p + ".ln_" + std::string(g) + ".bias").v, cfg.ln_eps);
      return s;
    };
    const Vec z = vsigmoid(gate("z", h));
    const Vec r = vsigmoid(gate("r", h));
    Vec rh = h;
    for (std::size_t i = 0; i < rh.size(); ++i) rh[i] *= r[i];
    const Vec hc = vtanh(gate("h", rh));
    Vec out = h;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += z[i] * (hc[i] - h[i]);
    return out;
  };
  const auto embed = [&](const std::string& table, int id) {
    const auto& t = P.at(table);
    const int n = t.shape[1];
    return Vec(t.v.begin() + static_cast<std::size_t>(id) * n,
               t.v.begin() + static_cast<std::size_t>(id + 1) * n);
  };

  // encoder
  const std::size_t m = smp.src_ids.size();
  std::vector<Vec> xs(m), hf(m), hb(m);
  for (std::size_t i = 0; i < m; ++i) xs[i] = embed("src_emb", smp.src_ids[i]);
  Vec h(cfg.R, 0.0);
  for (std::size_t i = 0; i < m; ++i) h = hf[i] = gru("enc_fwd", xs[i], h, true);
  h.assign(cfg.R, 0.0);
  for (std::size_t i = m; i-- > 0;) h = hb[i] = gru("enc_bwd", xs[i], h, true);
  std::vector<Vec> S(m);
  for (std::size_t i = 0; i < m; ++i) {
    S[i] = hf[i];
    S[i].insert(S[i].end(), hb[i].begin(), hb[i].end());
  }

  // h0 = tanh(Winit mean(S))
  Vec mean(cfg.C(), 0.0);
  for (const auto& row : S)
    for (int j = 0; j < cfg.C(); ++j) mean[j] += row[j] / static_cast<double>(m);
  Vec hdec = vtanh(matv(P.at("Winit"), mean));

  double nll = 0.0;
  for (std::size_t t = 1; t < smp.trg_ids.size(); ++t) {
    const Vec y = embed("trg_emb", smp.trg_ids[t - 1]);
    const Vec h1 = gru("dec_gru1", y, hdec, false);
    // attention
    Vec g(m, 0.0);
    const Vec wh = matv(P.at("att.Wh"), h1);
    for (std::size_t i = 0; i < m; ++i) {
      Vec u = vadd(vadd(matv(P.at("att.Ws"), S[i]), P.at("att.bs").v), wh);
      u = vtanh(u);
      for (int j = 0; j < cfg.C(); ++j) g[i] += P.at("att.Wa").v[j] * u[j];
      g[i] += P.at("att.ba").v[0];
    }
    double gmax = g[0];
    for (double x : g) gmax = std::max(gmax, x);
    double z = 0;
    Vec alpha(m);
    for (std::size_t i = 0; i < m; ++i) z += alpha[i] = std::exp(g[i] - gmax);
    for (auto& a : alpha) a /= z;
    Vec c(cfg.C(), 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (int j = 0; j < cfg.C(); ++j) c[j] += alpha[i] * S[i][j];

    const Vec h2 = gru("dec_gru2", c, h1, false);
    Vec o = vtanh(vadd(vadd(matv(P.at("Wdec"), h2), matv(P.at("Wctx"), c)), y));
    const Vec logits = matv(P.at("Wo"), o);
    double lmax = logits[0];
    for (double x : logits) lmax = std::max(lmax, x);
    double lse = 0;
    for (double x : logits) lse += std::exp(x - lmax);
    nll -= logits[smp.trg_ids[t]] - lmax - std::log(lse);
    hdec = h2;
  }
  return nll;
}

}  // namespace

TEST_CASE("parameter counts match the frozen per-variant totals") {
  ModelConfig cfg;
  cfg.E = 128;
  cfg.R = 256;
  cfg.src_vocab_size = 5234;
  cfg.trg_vocab_size = 7052;
  cfg.D_g = 2048;
  cfg.P = 196;
  cfg.D_s = 1024;

  const std::vector<std::pair<Variant, std::size_t>> expect = {
      {Variant::kBaseline, 4579585},
      {Variant::kFusionConv, 6023426},
      {Variant::kDecInit, 4972801},
      {Variant::kEncDecInit, 4972801},
      {Variant::kCtxMul, 5497089},
      {Variant::kTrgMul, 4710657},
      {Variant::kDecInitCtxTrgMul, 6283521},
  };
  for (const auto& [v, total] : expect) {
    cfg.variant = v;
    const auto pc = count_params(cfg);
    INFO(variant_name(v));
    CHECK(pc.total == total);
    std::size_t sum = 0;
    for (const auto& [name, n] : pc.breakdown) sum += n;
    CHECK(sum == pc.total);
  }

  // published anchors, 5% tolerance (ctx-mul deliberately unanchored)
  const std::vector<std::pair<Variant, double>> anchors = {
      {Variant::kBaseline, 4.6e6},   {Variant::kFusionConv, 6.0e6},
      {Variant::kDecInit, 5.0e6},    {Variant::kEncDecInit, 5.0e6},
      {Variant::kTrgMul, 4.7e6},     {Variant::kDecInitCtxTrgMul, 6.3e6},
  };
  for (const auto& [v, anchor] : anchors) {
    cfg.variant = v;
    const double total = static_cast<double>(count_params(cfg).total);
    INFO(variant_name(v));
    CHECK(std::abs(total - anchor) / anchor < 0.05);
  }
}

TEST_CASE("variant names round-trip") {
  for (Variant v : all_variants()) CHECK(variant_from_name(variant_name(v)) == v);
  CHECK_THROWS(variant_from_name("nonsense"));
}

TEST_CASE("config validation") {
  ModelConfig cfg = tiny_cfg(Variant::kBaseline);
  CHECK_NOTHROW(cfg.validate());
  cfg.dropout = {0.5, 1.0, 0.0};
  CHECK_THROWS(cfg.validate());
  cfg = tiny_cfg(Variant::kDecInit);
  cfg.D_g = 0;
  CHECK_THROWS(cfg.validate());
  cfg = tiny_cfg(Variant::kBaseline);
  cfg.src_vocab_size = 0;
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("encoder shapes and attention invariants") {
  ModelConfig cfg = tiny_cfg(Variant::kBaseline);
  ParamStore<double> ps;
  Rng rng(17);
  register_params(cfg, ps, rng);
  Model<double> model(cfg, ps);
  const Sample smp = tiny_sample(cfg);

  Tape<double> tp(false);
  auto sg = model.build_sentence(tp, smp);
  CHECK(sg.S->rows() == static_cast<int>(smp.src_ids.size()));
  CHECK(sg.S->cols() == cfg.C());
  CHECK(sg.h0->n == static_cast<std::size_t>(cfg.R));

  auto step = model.decode_step_graph(tp, sg, kBosId, sg.h0);
  REQUIRE(step.alpha->n == smp.src_ids.size());
  double asum = 0;
  for (std::size_t i = 0; i < step.alpha->n; ++i) {
    CHECK(step.alpha->v[i] >= 0.0);
    asum += step.alpha->v[i];
  }
  CHECK(asum == Catch::Approx(1.0).margin(1e-12));
  CHECK(step.logits->n == static_cast<std::size_t>(cfg.trg_vocab_size));
}

TEST_CASE("attention with one annotation returns that annotation") {
  ModelConfig cfg = tiny_cfg(Variant::kBaseline);
  ParamStore<double> ps;
  Rng rng(18);
  register_params(cfg, ps, rng);
  Model<double> model(cfg, ps);
  Sample smp = tiny_sample(cfg);
  smp.src_ids = {4};  // single position

  Tape<double> tp(false);
  auto sg = model.build_sentence(tp, smp);
  auto step = model.decode_step_graph(tp, sg, kBosId, sg.h0);
  CHECK(step.alpha->v[0] == Catch::Approx(1.0).margin(1e-12));
  for (int j = 0; j < cfg.C(); ++j)
    CHECK(step.c->v[j] == Catch::Approx(sg.S->v[j]).margin(1e-12));
}

TEST_CASE("identical annotations get uniform attention") {
  ModelConfig cfg = tiny_cfg(Variant::kBaseline);
  ParamStore<double> ps;
  Rng rng(19);
  register_params(cfg, ps, rng);
  Model<double> model(cfg, ps);

  // bypass the encoder: craft a session whose S has identical rows
  Tape<double> tp(false);
  const int M = 4, C = cfg.C();
  std::vector<double> row{0.3, -0.1, 0.8, 0.2};
  std::vector<double> S;
  for (int i = 0; i < M; ++i) S.insert(S.end(), row.begin(), row.end());
  auto Sref = tp.constant(S, {M, C});
  auto SWsT = ops::linear_rows(tp, Sref, tp.leaf(ps.at("att.Ws")));
  auto h = tp.constant(std::vector<double>{0.5, -0.5}, {cfg.R});
  auto [alpha, c] = model.text_attention(tp, h, Sref, SWsT);
  for (int i = 0; i < M; ++i)
    CHECK(alpha->v[i] == Catch::Approx(1.0 / M).margin(1e-12));
}

TEST_CASE("baseline sentence_nll matches a straight-line reimplementation") {
  ModelConfig cfg = tiny_cfg(Variant::kBaseline);
  ParamStore<double> ps;
  Rng rng(23);
  register_params(cfg, ps, rng);
  Model<double> model(cfg, ps);
  const Sample smp = tiny_sample(cfg);

  Tape<double> tp(false);
  auto [loss, n_tokens] = model.sentence_nll(tp, smp);
  CHECK(n_tokens == 3);
  const double expected = oracle_baseline_nll(cfg, ps, smp);
  CHECK(loss->v[0] == Catch::Approx(expected).epsilon(1e-10));
}

TEST_CASE("zeroed output matrix gives the uniform loss n * ln(V)") {
  ModelConfig cfg = tiny_cfg(Variant::kBaseline);
  ParamStore<double> ps;
  Rng rng(29);
  register_params(cfg, ps, rng);
  std::fill(ps.at("Wo").v.begin(), ps.at("Wo").v.end(), 0.0);
  Model<double> model(cfg, ps);
  const Sample smp = tiny_sample(cfg);

  Tape<double> tp(false);
  auto [loss, n_tokens] = model.sentence_nll(tp, smp);
  CHECK(loss->v[0] ==
        Catch::Approx(n_tokens * std::log(cfg.trg_vocab_size)).epsilon(1e-12));
}

TEST_CASE("ctx-mul modulates the annotations by tanh(Wimg_ctx V)") {
  ModelConfig cfg = tiny_cfg(Variant::kCtxMul);
  ParamStore<double> ps;
  Rng rng(31);
  register_params(cfg, ps, rng);
  Model<double> model(cfg, ps);
  const Sample smp = tiny_sample(cfg);

  Tape<double> tp(false);
  auto sg = model.build_sentence(tp, smp);
  auto [rawS, e0] = model.encode(tp, smp.src_ids, nullptr);
  const Vec V(smp.global_feat.begin(), smp.global_feat.end());
  const Vec factor = vtanh(matv(ps.at("Wimg_ctx"), V));
  for (int i = 0; i < sg.S->rows(); ++i)
    for (int j = 0; j < cfg.C(); ++j) {
      const std::size_t k = static_cast<std::size_t>(i) * cfg.C() + j;
      CHECK(sg.S->v[k] == Catch::Approx(rawS->v[k] * factor[j]).margin(1e-12));
    }
}

TEST_CASE("a zero global feature neutralizes the dec-init state") {
  ModelConfig cfg = tiny_cfg(Variant::kDecInit);
  ParamStore<double> ps;
  Rng rng(37);
  register_params(cfg, ps, rng);
  Model<double> model(cfg, ps);
  Sample smp = tiny_sample(cfg);
  std::fill(smp.global_feat.begin(), smp.global_feat.end(), 0.0f);

  Tape<double> tp(false);
  auto sg = model.build_sentence(tp, smp);
  for (std::size_t i = 0; i < sg.h0->n; ++i) CHECK(sg.h0->v[i] == 0.0);
}

TEST_CASE("missing modalities are rejected") {
  for (Variant v : {Variant::kDecInit, Variant::kFusionConv}) {
    ModelConfig cfg = tiny_cfg(v);
    ParamStore<double> ps;
    Rng rng(41);
    register_params(cfg, ps, rng);
    Model<double> model(cfg, ps);
    Sample smp = tiny_sample(tiny_cfg(Variant::kBaseline));  // no features
    Tape<double> tp(false);
    CHECK_THROWS(model.sentence_nll(tp, smp));
  }
}

TEST_CASE("every variant passes a full-model gradient check") {
  for (Variant v : all_variants()) {
    ModelConfig cfg = tiny_cfg(v);
    ParamStore<double> ps;
    Rng rng(47);
    register_params(cfg, ps, rng);
    Model<double> model(cfg, ps);
    const Sample smp = tiny_sample(cfg);

    const auto model_fn = [&](bool with_grad) -> double {
      Tape<double> tp(with_grad);
      auto [loss, n] = model.sentence_nll(tp, smp);
      if (with_grad) tp.backward(loss);
      return loss->v[0];
    };
    auto report = grad_check<double>(model_fn, ps, 1e-5, 1e-4);
    std::string worst_name;
    for (const auto& e : report.entries)
      if (e.max_rel_error == report.worst) worst_name = e.name;
    INFO(variant_name(v) << " worst rel err " << report.worst << " at " << worst_name);
    CHECK(report.pass);
  }
}

TEST_CASE("decode_step agrees with the teacher-forced graph") {
  ModelConfig cfg = tiny_cfg(Variant::kTrgMul);
  ParamStore<double> ps;
  Rng rng(53);
  register_params(cfg, ps, rng);
  Model<double> model(cfg, ps);
  const Sample smp = tiny_sample(cfg);

  // sum of -log p over the session path must equal sentence_nll
  auto session = model.start_session(smp);
  std::vector<double> h = session.h0;
  double nll = 0;
  for (std::size_t t = 1; t < smp.trg_ids.size(); ++t) {
    auto [probs, st] = model.decode_step(session, smp.trg_ids[t - 1], h);
    double psum = 0;
    for (double p : probs) psum += p;
    CHECK(psum == Catch::Approx(1.0).margin(1e-12));
    nll -= std::log(probs[smp.trg_ids[t]]);
    h = st.h_tilde;
  }
  Tape<double> tp(false);
  auto [loss, n] = model.sentence_nll(tp, smp);
  CHECK(nll == Catch::Approx(loss->v[0]).epsilon(1e-10));
}

TEST_CASE("model file embeds the config and round-trips the weights") {
  ModelConfig cfg = tiny_cfg(Variant::kCtxMul);
  ParamStore<float> ps;
  Rng rng(59);
  register_params(cfg, ps, rng);
  const std::string path = "model_roundtrip.mmtl";
  save_model(cfg, ps, path);
  auto [cfg2, ps2] = load_model<float>(path);
  CHECK(cfg2.variant == cfg.variant);
  CHECK(cfg2.E == cfg.E);
  CHECK(cfg2.D_g == cfg.D_g);
  for (const auto& [name, t] : ps.entries()) CHECK(ps2.at(name).v == t.v);
  CHECK_THROWS(load_model<float>("no_such_model.mmtl"));
}

TEST_CASE("model config json round-trip") {
  ModelConfig cfg = tiny_cfg(Variant::kFusionConv);
  cfg.dropout = {0.3, 0.5, 0.5};
  nlohmann::json j = cfg;
  const ModelConfig back = j.get<ModelConfig>();
  CHECK(back.variant == cfg.variant);
  CHECK(back.E == cfg.E);
  CHECK(back.R == cfg.R);
  CHECK(back.dropout == cfg.dropout);
  CHECK(back.D_s == cfg.D_s);
}
