#pragma once

// The attentive GRU encoder-decoder and its six visual-fusion variants.
//
// Encoder: forward + backward layer-normalized GRUs, hidden states
// concatenated into source annotations S (M x C, C = 2R).
// Decoder: conditional GRU (two stacked GRUs; the first one drives the
// attention, the second one consumes the textual context vector).
// Output: o_t = tanh(y_prev + W_dec h~_t + W_ctx ctx_t), softmax(W_o o_t),
// where ctx_t is c_t, or [c_t; v_t] for fusion-conv (the visual context
// extends the output conditioning only; the second GRU always consumes
// c_t, which is also what reproduces the published parameter counts).

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmtl/datastore.hpp"
#include "mmtl/numerics.hpp"
#include "mmtl/rng.hpp"
#include "mmtl/tensor.hpp"

namespace mmtl {

enum class Variant {
  kBaseline,
  kFusionConv,
  kDecInit,
  kEncDecInit,
  kCtxMul,
  kTrgMul,
  kDecInitCtxTrgMul,
};

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kBaseline: return "baseline";
    case Variant::kFusionConv: return "fusion-conv";
    case Variant::kDecInit: return "dec-init";
    case Variant::kEncDecInit: return "encdec-init";
    case Variant::kCtxMul: return "ctx-mul";
    case Variant::kTrgMul: return "trg-mul";
    case Variant::kDecInitCtxTrgMul: return "dec-init-ctx-trg-mul";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& s) {
  for (Variant v : {Variant::kBaseline, Variant::kFusionConv, Variant::kDecInit,
                    Variant::kEncDecInit, Variant::kCtxMul, Variant::kTrgMul,
                    Variant::kDecInitCtxTrgMul})
    if (s == variant_name(v)) return v;
  throw std::invalid_argument("unknown variant: " + s);
}

inline const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v = {
      Variant::kBaseline,    Variant::kFusionConv, Variant::kDecInit,
      Variant::kEncDecInit,  Variant::kCtxMul,     Variant::kTrgMul,
      Variant::kDecInitCtxTrgMul};
  return v;
}

struct ModelConfig {
  Variant variant = Variant::kBaseline;
  int E = 128;
  int R = 256;
  int src_vocab_size = 0;
  int trg_vocab_size = 0;
  int D_g = 2048;
  int P = 196;
  int D_s = 1024;
  std::array<double, 3> dropout{0.0, 0.0, 0.0};  // (p_emb, p_annot, p_out)
  double l2_factor = 0.0;
  double ln_eps = 1e-5;

  int C() const { return 2 * R; }
  bool uses_global() const {
    switch (variant) {
      case Variant::kDecInit:
      case Variant::kEncDecInit:
      case Variant::kCtxMul:
      case Variant::kTrgMul:
      case Variant::kDecInitCtxTrgMul:
        return true;
      default:
        return false;
    }
  }
  bool uses_spatial() const { return variant == Variant::kFusionConv; }

  void validate() const {
    if (E <= 0 || R <= 0 || src_vocab_size <= 0 || trg_vocab_size <= 0)
      throw std::invalid_argument("model config: dims and vocab sizes must be positive");
    for (double p : dropout)
      if (p < 0.0 || p >= 1.0)
        throw std::invalid_argument("model config: dropout probs must be in [0,1)");
    if (uses_global() && D_g <= 0)
      throw std::invalid_argument("model config: D_g must be positive");
    if (uses_spatial() && (P <= 0 || D_s <= 0))
      throw std::invalid_argument("model config: P and D_s must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"variant", variant_name(c.variant)},
       {"E", c.E},
       {"R", c.R},
       {"src_vocab_size", c.src_vocab_size},
       {"trg_vocab_size", c.trg_vocab_size},
       {"D_g", c.D_g},
       {"P", c.P},
       {"D_s", c.D_s},
       {"dropout", c.dropout},
       {"l2_factor", c.l2_factor},
       {"ln_eps", c.ln_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.variant = variant_from_name(j.value("variant", std::string("baseline")));
  c.E = j.value("E", d.E);
  c.R = j.value("R", d.R);
  c.src_vocab_size = j.value("src_vocab_size", d.src_vocab_size);
  c.trg_vocab_size = j.value("trg_vocab_size", d.trg_vocab_size);
  c.D_g = j.value("D_g", d.D_g);
  c.P = j.value("P", d.P);
  c.D_s = j.value("D_s", d.D_s);
  if (j.contains("dropout")) c.dropout = j.at("dropout").get<std::array<double, 3>>();
  c.l2_factor = j.value("l2_factor", d.l2_factor);
  c.ln_eps = j.value("ln_eps", d.ln_eps);
}

/// Register all trainable tensors of a variant and initialize them:
/// Xavier-uniform weights, zero biases, unit layer-norm gains.
template <class Real>
void register_params(const ModelConfig& cfg, ParamStore<Real>& ps, Rng& rng) {
  cfg.validate();
  const int E = cfg.E, R = cfg.R, C = cfg.C();

  const auto mat = [&](const std::string& name, int m, int n) {
    xavier_init(ps.add(name, {m, n}), m, n, rng);
  };
  const auto vec = [&](const std::string& name, int n, Real fill) {
    auto& t = ps.add(name, {n});
    std::fill(t.v.begin(), t.v.end(), fill);
  };
  const auto gru = [&](const std::string& p, int in, int hid, bool ln) {
    for (const char* g : {"z", "r", "h"}) {
      mat(p + ".W" + g, hid, in);
      mat(p + ".U" + g, hid, hid);
      vec(p + ".b" + g, hid, Real(0));
      if (ln) {
        vec(p + ".ln_" + g + ".gain", hid, Real(1));
        vec(p + ".ln_" + g + ".bias", hid, Real(0));
      }
    }
  };
  const auto att = [&](const std::string& p, int dim, int hid) {
    mat(p + ".Ws", dim, dim);
    vec(p + ".bs", dim, Real(0));
    mat(p + ".Wh", dim, hid);
    mat(p + ".Wa", 1, dim);  // stored as a 1 x dim row; used as a vector
    vec(p + ".ba", 1, Real(0));
  };

  mat("src_emb", cfg.src_vocab_size, E);
  mat("trg_emb", cfg.trg_vocab_size, E);
  gru("enc_fwd", E, R, true);
  gru("enc_bwd", E, R, true);
  gru("dec_gru1", E, R, false);
  gru("dec_gru2", C, R, false);
  att("att", C, R);

  switch (cfg.variant) {
    case Variant::kBaseline:
      mat("Winit", R, C);
      break;
    case Variant::kFusionConv:
      mat("Winit", R, C);
      att("vatt", cfg.D_s, R);
      break;
    case Variant::kDecInit:
    case Variant::kEncDecInit:
      mat("Wimg", R, cfg.D_g);
      break;
    case Variant::kCtxMul:
      mat("Wimg_ctx", C, cfg.D_g);
      break;
    case Variant::kTrgMul:
      mat("Wimg_trg", E, cfg.D_g);
      break;
    case Variant::kDecInitCtxTrgMul:
      mat("Wimg", R, cfg.D_g);
      mat("Wimg_ctx", C, cfg.D_g);
      mat("Wimg_trg", E, cfg.D_g);
      break;
  }

  mat("Wdec", E, R);
  mat("Wctx", E, C + (cfg.uses_spatial() ? cfg.D_s : 0));
  mat("Wo", cfg.trg_vocab_size, E);
}

// --- Model file: "MMTM", version u32, config-JSON length u32 + bytes,
// then a standard MMTL checkpoint stream -----------------------------------

inline constexpr std::uint32_t kModelFileVersion = 1;

template <class Real>
void save_model(const ModelConfig& cfg, const ParamStore<Real>& ps,
                const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("model: cannot open " + path);
  const std::string js = nlohmann::json(cfg).dump();
  os.write("MMTM", 4);
  detail::write_u32(os, kModelFileVersion);
  detail::write_u32(os, static_cast<std::uint32_t>(js.size()));
  os.write(js.data(), static_cast<std::streamsize>(js.size()));
  save_checkpoint(ps, os);
  if (!os) throw std::runtime_error("model: write failed for " + path);
}

template <class Real>
std::pair<ModelConfig, ParamStore<Real>> load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("model: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "MMTM", 4) != 0)
    throw std::runtime_error("model: bad magic in " + path);
  if (detail::read_u32(is) != kModelFileVersion)
    throw std::runtime_error("model: unsupported version in " + path);
  const std::uint32_t jlen = detail::read_u32(is);
  std::string js(jlen, '\0');
  if (!is.read(js.data(), jlen))
    throw std::runtime_error("model: truncated config header in " + path);
  ModelConfig cfg = nlohmann::json::parse(js).get<ModelConfig>();
  return {cfg, load_checkpoint<Real>(is)};
}

struct ParamCount {
  std::size_t total = 0;
  std::map<std::string, std::size_t> breakdown;  // per tensor
};

/// Exact number of scalars per variant, with a per-tensor breakdown.
inline ParamCount count_params(const ModelConfig& cfg) {
  ParamStore<float> ps;
  Rng rng(0);
  register_params(cfg, ps, rng);
  ParamCount pc;
  for (const auto& [name, t] : ps.entries()) {
    pc.breakdown[name] = t.v.size();
    pc.total += t.v.size();
  }
  return pc;
}

/// Decoder state after one step; alpha (and beta, when present) are on
/// the probability simplex.
template <class Real>
struct DecoderState {
  std::vector<Real> h;        // first GRU hidden
  std::vector<Real> h_tilde;  // second GRU hidden (the recurrent state)
  std::vector<Real> c;        // textual context
  std::vector<Real> v;        // visual context (fusion-conv)
  std::vector<Real> alpha;    // textual attention weights
  std::vector<Real> beta;     // visual attention weights
};

/// Frozen per-sentence values for step-by-step decoding.
template <class Real>
struct DecodeSession {
  int M = 0;
  std::vector<Real> S;          // M x C (already modulated for ctx-mul)
  std::vector<Real> SWsT;       // M x C: rows of S through att.Ws
  std::vector<Real> Sp;         // P x D_s (fusion-conv)
  std::vector<Real> SpWsT;      // P x D_s
  std::vector<Real> trg_factor; // E (trg-mul family), empty otherwise
  std::vector<Real> h0;         // R
};

template <class Real>
class Model {
public:
  using Ref = typename Tape<Real>::Ref;

  Model(ModelConfig cfg, ParamStore<Real>& ps) : cfg_(std::move(cfg)), ps_(&ps) {
    cfg_.validate();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<Real>& params() { return *ps_; }
  const ParamStore<Real>& params() const { return *ps_; }

  // ---- graph building -------------------------------------------------

  struct SentenceGraph {
    Ref S = nullptr;      // M x C, after modulation and annotation dropout
    Ref SWsT = nullptr;   // M x C
    Ref Sp = nullptr;     // P x D_s (constant), fusion-conv only
    Ref SpWsT = nullptr;  // P x D_s
    Ref trg_factor = nullptr;
    Ref h0 = nullptr;
    Ref e0 = nullptr;
  };

  /// Bidirectional encoder over source ids. V is required iff the
  /// variant is encdec-init (it seeds e0 for both directions).
  std::pair<Ref, Ref> encode(Tape<Real>& tp, const std::vector<int>& src_ids,
                             Ref V, bool train = false, Rng* rng = nullptr) const {
    if (src_ids.empty()) throw std::invalid_argument("encode: empty source");
    Ref e0;
    if (cfg_.variant == Variant::kEncDecInit) {
      if (!V) throw std::invalid_argument("encode: encdec-init requires V");
      e0 = ops::tanh_t(tp, ops::matvec(tp, tp.leaf(ps_->at("Wimg")), V));
    } else {
      e0 = tp.alloc({cfg_.R});  // all-zero initial state
    }
    Ref emb = tp.leaf(ps_->at("src_emb"));
    const std::size_t m = src_ids.size();
    std::vector<Ref> xs(m);
    for (std::size_t i = 0; i < m; ++i) {
      xs[i] = ops::row_lookup(tp, emb, src_ids[i]);
      if (train && cfg_.dropout[0] > 0.0)
        xs[i] = apply_dropout_op(tp, xs[i], cfg_.dropout[0], *rng);
    }
    const auto fwd_gru = bind_gru(tp, "enc_fwd");
    const auto bwd_gru = bind_gru(tp, "enc_bwd");
    std::vector<Ref> hf(m), hb(m);
    Ref h = e0;
    for (std::size_t i = 0; i < m; ++i) h = hf[i] = gru_step(tp, fwd_gru, xs[i], h);
    h = e0;
    for (std::size_t i = m; i-- > 0;) h = hb[i] = gru_step(tp, bwd_gru, xs[i], h);
    std::vector<Ref> rows(m);
    for (std::size_t i = 0; i < m; ++i) rows[i] = ops::concat2(tp, hf[i], hb[i]);
    return {ops::stack_rows(tp, rows), e0};
  }

  /// h0 per variant: Eq.-1 mean-annotation init for baseline/fusion-conv,
  /// tanh(Wimg V) for the dec-init family, all-zero for ctx-mul/trg-mul.
  Ref init_decoder(Tape<Real>& tp, Ref S, Ref V) const {
    switch (cfg_.variant) {
      case Variant::kBaseline:
      case Variant::kFusionConv:
        return ops::tanh_t(
            tp, ops::matvec(tp, tp.leaf(ps_->at("Winit")), ops::mean_rows(tp, S)));
      case Variant::kDecInit:
      case Variant::kEncDecInit:
      case Variant::kDecInitCtxTrgMul:
        if (!V) throw std::invalid_argument("init_decoder: variant requires V");
        return ops::tanh_t(tp, ops::matvec(tp, tp.leaf(ps_->at("Wimg")), V));
      case Variant::kCtxMul:
      case Variant::kTrgMul:
        return tp.alloc({cfg_.R});
    }
    throw std::logic_error("unreachable");
  }

  /// g_i = Wa^T tanh(Ws s_i + bs + Wh h) + ba; alpha = softmax(g);
  /// c = S^T alpha. SWsT rows are the precomputed Ws s_i.
  std::pair<Ref, Ref> text_attention(Tape<Real>& tp, Ref h, Ref S, Ref SWsT) const {
    return attention_impl(tp, "att", h, S, SWsT);
  }

  /// Visual twin of text_attention with its own weights (fusion-conv).
  std::pair<Ref, Ref> visual_attention(Tape<Real>& tp, Ref h, Ref Sp, Ref SpWsT) const {
    if (cfg_.variant != Variant::kFusionConv)
      throw std::logic_error("visual_attention: variant is not fusion-conv");
    return attention_impl(tp, "vatt", h, Sp, SpWsT);
  }

  /// Build all per-sentence state: encoder, modulations, precomputed
  /// attention projections and h0.
  SentenceGraph build_sentence(Tape<Real>& tp, const Sample& sample,
                               bool train = false, Rng* rng = nullptr) const {
    check_modalities(sample);
    SentenceGraph sg;
    Ref V = nullptr;
    if (cfg_.uses_global())
      V = tp.constant(to_real(sample.global_feat), {cfg_.D_g});
    auto [S, e0] = encode(tp, sample.src_ids, V, train, rng);
    sg.e0 = e0;
    if (cfg_.variant == Variant::kCtxMul || cfg_.variant == Variant::kDecInitCtxTrgMul) {
      Ref factor =
          ops::tanh_t(tp, ops::matvec(tp, tp.leaf(ps_->at("Wimg_ctx")), V));
      S = ops::rowwise_mul(tp, S, factor);
    }
    if (train && cfg_.dropout[1] > 0.0)
      S = apply_dropout_op(tp, S, cfg_.dropout[1], *rng);
    sg.S = S;
    sg.SWsT = ops::linear_rows(tp, S, tp.leaf(ps_->at("att.Ws")));
    if (cfg_.variant == Variant::kTrgMul || cfg_.variant == Variant::kDecInitCtxTrgMul)
      sg.trg_factor =
          ops::tanh_t(tp, ops::matvec(tp, tp.leaf(ps_->at("Wimg_trg")), V));
    if (cfg_.uses_spatial()) {
      sg.Sp = tp.constant(to_real(sample.spatial_feat), {cfg_.P, cfg_.D_s});
      sg.SpWsT = ops::linear_rows(tp, sg.Sp, tp.leaf(ps_->at("vatt.Ws")));
    }
    sg.h0 = init_decoder(tp, S, V);
    return sg;
  }

  struct StepRefs {
    Ref logits = nullptr;
    Ref h1 = nullptr;       // first GRU hidden
    Ref h2 = nullptr;       // second GRU hidden (next recurrent state)
    Ref alpha = nullptr;
    Ref beta = nullptr;
    Ref c = nullptr;
    Ref v = nullptr;
  };

  /// One decoder step. y_prev_id is embedded (and modulated for the
  /// trg-mul family); GRU1 output drives both attentions; GRU2 consumes
  /// c_t; the output layer sees [c_t; v_t] for fusion-conv.
  StepRefs decode_step_graph(Tape<Real>& tp, const SentenceGraph& sg, int y_prev_id,
                             Ref h_prev, bool train = false, Rng* rng = nullptr) const {
    if (y_prev_id < 0 || y_prev_id >= cfg_.trg_vocab_size)
      throw std::invalid_argument("decode_step: target id out of range");
    StepRefs out;
    Ref y = ops::row_lookup(tp, tp.leaf(ps_->at("trg_emb")), y_prev_id);
    if (sg.trg_factor) y = ops::mul(tp, y, sg.trg_factor);
    out.h1 = gru_step(tp, bind_gru(tp, "dec_gru1"), y, h_prev);
    auto [alpha, c] = text_attention(tp, out.h1, sg.S, sg.SWsT);
    out.alpha = alpha;
    out.c = c;
    Ref ctx_for_out = c;
    if (cfg_.uses_spatial()) {
      auto [beta, v] = visual_attention(tp, out.h1, sg.Sp, sg.SpWsT);
      out.beta = beta;
      out.v = v;
      ctx_for_out = ops::concat2(tp, c, v);
    }
    out.h2 = gru_step(tp, bind_gru(tp, "dec_gru2"), c, out.h1);
    Ref o = ops::tanh_t(
        tp, ops::add(tp, ops::add(tp, y, ops::matvec(tp, tp.leaf(ps_->at("Wdec")), out.h2)),
                     ops::matvec(tp, tp.leaf(ps_->at("Wctx")), ctx_for_out)));
    if (train && cfg_.dropout[2] > 0.0) o = apply_dropout_op(tp, o, cfg_.dropout[2], *rng);
    out.logits = ops::matvec(tp, tp.leaf(ps_->at("Wo")), o);
    return out;
  }

  /// Teacher-forced negative log-likelihood of one sample (sum over
  /// target positions). Returns the scalar loss ref and the token count.
  std::pair<Ref, int> sentence_nll(Tape<Real>& tp, const Sample& sample,
                                   bool train = false, Rng* rng = nullptr) const {
    if (sample.trg_ids.size() < 2)
      throw std::invalid_argument("sentence_nll: target too short");
    SentenceGraph sg = build_sentence(tp, sample, train, rng);
    Ref h = sg.h0;
    std::vector<Ref> losses;
    for (std::size_t t = 1; t < sample.trg_ids.size(); ++t) {
      StepRefs step = decode_step_graph(tp, sg, sample.trg_ids[t - 1], h, train, rng);
      losses.push_back(ops::cross_entropy_logits(tp, step.logits, sample.trg_ids[t]));
      h = step.h2;
    }
    return {ops::sum_scalars(tp, losses), static_cast<int>(losses.size())};
  }

  // ---- inference (no tape kept across steps) ---------------------------

  DecodeSession<Real> start_session(const Sample& sample) const {
    Tape<Real> tp(false);
    SentenceGraph sg = build_sentence(tp, sample);
    DecodeSession<Real> s;
    s.M = sg.S->rows();
    s.S.assign(sg.S->v, sg.S->v + sg.S->n);
    s.SWsT.assign(sg.SWsT->v, sg.SWsT->v + sg.SWsT->n);
    if (sg.Sp) {
      s.Sp.assign(sg.Sp->v, sg.Sp->v + sg.Sp->n);
      s.SpWsT.assign(sg.SpWsT->v, sg.SpWsT->v + sg.SpWsT->n);
    }
    if (sg.trg_factor)
      s.trg_factor.assign(sg.trg_factor->v, sg.trg_factor->v + sg.trg_factor->n);
    s.h0.assign(sg.h0->v, sg.h0->v + sg.h0->n);
    return s;
  }

  /// One inference step: probability distribution over the target
  /// vocabulary plus the next decoder state.
  std::pair<std::vector<Real>, DecoderState<Real>> decode_step(
      const DecodeSession<Real>& s, int y_prev_id,
      const std::vector<Real>& h_prev) const {
    Tape<Real> tp(false);
    SentenceGraph sg;
    sg.S = tp.constant(s.S, {s.M, cfg_.C()});
    sg.SWsT = tp.constant(s.SWsT, {s.M, cfg_.C()});
    if (!s.Sp.empty()) {
      sg.Sp = tp.constant(s.Sp, {cfg_.P, cfg_.D_s});
      sg.SpWsT = tp.constant(s.SpWsT, {cfg_.P, cfg_.D_s});
    }
    if (!s.trg_factor.empty()) sg.trg_factor = tp.constant(s.trg_factor, {cfg_.E});
    Ref h = tp.constant(h_prev, {cfg_.R});
    StepRefs step = decode_step_graph(tp, sg, y_prev_id, h);
    std::vector<Real> logits(step.logits->v, step.logits->v + step.logits->n);
    DecoderState<Real> st;
    st.h.assign(step.h1->v, step.h1->v + step.h1->n);
    st.h_tilde.assign(step.h2->v, step.h2->v + step.h2->n);
    st.c.assign(step.c->v, step.c->v + step.c->n);
    st.alpha.assign(step.alpha->v, step.alpha->v + step.alpha->n);
    if (step.beta) {
      st.beta.assign(step.beta->v, step.beta->v + step.beta->n);
      st.v.assign(step.v->v, step.v->v + step.v->n);
    }
    return {softmax(logits), std::move(st)};
  }

  void check_modalities(const Sample& sample) const {
    if (cfg_.uses_global() &&
        sample.global_feat.size() != static_cast<std::size_t>(cfg_.D_g))
      throw std::invalid_argument(
          std::string("sample is missing the global feature required by ") +
          variant_name(cfg_.variant));
    if (cfg_.uses_spatial() &&
        (sample.spatial_rows != cfg_.P || sample.spatial_cols != cfg_.D_s))
      throw std::invalid_argument(
          "sample is missing the spatial feature map required by fusion-conv");
  }

private:
  struct BoundGru {
    Ref Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh;
    Ref ln_gain[3] = {nullptr, nullptr, nullptr};
    Ref ln_bias[3] = {nullptr, nullptr, nullptr};
    bool ln = false;
  };

  BoundGru bind_gru(Tape<Real>& tp, const std::string& p) const {
    BoundGru g;
    g.Wz = tp.leaf(ps_->at(p + ".Wz"));
    g.Uz = tp.leaf(ps_->at(p + ".Uz"));
    g.bz = tp.leaf(ps_->at(p + ".bz"));
    g.Wr = tp.leaf(ps_->at(p + ".Wr"));
    g.Ur = tp.leaf(ps_->at(p + ".Ur"));
    g.br = tp.leaf(ps_->at(p + ".br"));
    g.Wh = tp.leaf(ps_->at(p + ".Wh"));
    g.Uh = tp.leaf(ps_->at(p + ".Uh"));
    g.bh = tp.leaf(ps_->at(p + ".bh"));
    g.ln = ps_->contains(p + ".ln_z.gain");
    if (g.ln) {
      const char* gates[3] = {"z", "r", "h"};
      for (int i = 0; i < 3; ++i) {
        g.ln_gain[i] = tp.leaf(ps_->at(p + ".ln_" + gates[i] + ".gain"));
        g.ln_bias[i] = tp.leaf(ps_->at(p + ".ln_" + gates[i] + ".bias"));
      }
    }
    return g;
  }

  /// Standard GRU step; when layer norm is on, each gate's pre-activation
  /// sum W x + U h + b is normalized before the nonlinearity.
  Ref gru_step(Tape<Real>& tp, const BoundGru& g, Ref x, Ref h) const {
    const auto pre = [&](Ref W, Ref U, Ref b, Ref hin, int gate) {
      Ref s = ops::add(tp, ops::add(tp, ops::matvec(tp, W, x), ops::matvec(tp, U, hin)), b);
      if (g.ln)
        s = ops::layer_norm_t(tp, s, g.ln_gain[gate], g.ln_bias[gate],
                              static_cast<Real>(cfg_.ln_eps));
      return s;
    };
    Ref z = ops::sigmoid_t(tp, pre(g.Wz, g.Uz, g.bz, h, 0));
    Ref r = ops::sigmoid_t(tp, pre(g.Wr, g.Ur, g.br, h, 1));
    Ref rh = ops::mul(tp, r, h);
    Ref hc = ops::tanh_t(tp, pre(g.Wh, g.Uh, g.bh, rh, 2));
    // h' = (1 - z) * h + z * hc
    return ops::add(tp, h, ops::mul(tp, z, ops::sub(tp, hc, h)));
  }

  std::pair<Ref, Ref> attention_impl(Tape<Real>& tp, const std::string& p, Ref h,
                                     Ref S, Ref SWsT) const {
    Ref T = ops::add_rowvec(tp, SWsT, tp.leaf(ps_->at(p + ".bs")));
    T = ops::add_rowvec(tp, T, ops::matvec(tp, tp.leaf(ps_->at(p + ".Wh")), h));
    T = ops::tanh_t(tp, T);
    Ref Wa = tp.leaf(ps_->at(p + ".Wa"));  // 1 x dim, consumed as a vector
    Ref g = ops::matvec(tp, T, Wa);
    g = ops::add_scalar_bias(tp, g, tp.leaf(ps_->at(p + ".ba")));
    Ref alpha = ops::softmax_t(tp, g);
    Ref c = ops::matTvec(tp, S, alpha);
    return {alpha, c};
  }

  static std::vector<Real> to_real(const std::vector<float>& v) {
    return std::vector<Real>(v.begin(), v.end());
  }

  static Ref apply_dropout_op(Tape<Real>& tp, Ref x, double p, Rng& rng) {
    std::vector<Real> mask(x->n);
    const Real keep = static_cast<Real>(1.0 / (1.0 - p));
    for (auto& m : mask) m = rng.uniform() < p ? Real(0) : keep;
    return ops::mul_mask(tp, x, mask);
  }

  ModelConfig cfg_;
  ParamStore<Real>* ps_;
};

}  // namespace mmtl
