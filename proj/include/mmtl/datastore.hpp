#pragma once

// Parallel-corpus and visual-feature ingestion, batching, and the
// synthetic grounded-disambiguation corpus generator.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <cmath>

#include <json.hpp>

#include "mmtl/numerics.hpp"
#include "mmtl/rng.hpp"
#include "mmtl/textpipe.hpp"

namespace mmtl {

/// One sentence pair, ids already assigned. src ends with <eos>; trg is
/// <bos>-prefixed and <eos>-terminated. Features are optional and stored
/// as 32-bit floats (the on-disk precision).
struct Sample {
  std::vector<int> src_ids;
  std::vector<int> trg_ids;
  std::vector<float> global_feat;   // D_g, empty if absent
  std::vector<float> spatial_feat;  // P x D_s row-major, empty if absent
  int spatial_rows = 0;
  int spatial_cols = 0;
};

/// Padded batch; padding id is <pad> = 0.
struct Batch {
  std::vector<std::vector<int>> src;  // batch x max_src_len
  std::vector<std::vector<int>> trg;  // batch x max_trg_len
  std::vector<int> src_len;
  std::vector<int> trg_len;
  std::vector<const Sample*> samples;
  std::size_t size() const { return samples.size(); }
};

inline std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) out.push_back(tok);
  return out;
}

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

/// Pair line i of each file; ids via the vocabularies with <unk> fallback.
inline std::vector<Sample> load_parallel(const std::string& src_path,
                                         const std::string& trg_path,
                                         const Vocabulary& src_vocab,
                                         const Vocabulary& trg_vocab) {
  const auto src_lines = read_lines(src_path);
  const auto trg_lines = read_lines(trg_path);
  if (src_lines.size() != trg_lines.size())
    throw std::runtime_error("line-count mismatch: " + src_path + " has " +
                             std::to_string(src_lines.size()) + " lines, " +
                             trg_path + " has " + std::to_string(trg_lines.size()));
  std::vector<Sample> samples;
  samples.reserve(src_lines.size());
  for (std::size_t i = 0; i < src_lines.size(); ++i) {
    const auto src_toks = split_ws(src_lines[i]);
    const auto trg_toks = split_ws(trg_lines[i]);
    if (src_toks.empty() || trg_toks.empty())
      throw std::runtime_error("empty line " + std::to_string(i + 1) + " in " +
                               (src_toks.empty() ? src_path : trg_path));
    Sample s;
    s.src_ids = src_vocab.encode(src_toks);
    s.src_ids.push_back(kEosId);
    s.trg_ids.push_back(kBosId);
    for (const auto& t : trg_toks) s.trg_ids.push_back(trg_vocab.encode(t));
    s.trg_ids.push_back(kEosId);
    samples.push_back(std::move(s));
  }
  return samples;
}

// --- MMTF feature file -------------------------------------------------------
// magic "MMTF", version u32, rank u32 (1 = global vectors, 2 = spatial
// maps), dims (rank x u32), count u32, then count records of f32
// little-endian row-major payload.

inline constexpr std::uint32_t kFeatureVersion = 1;

struct FeatureStore {
  int rank = 1;
  std::vector<int> dims;       // {D} or {P, D}
  std::vector<float> data;     // count x prod(dims)
  std::size_t count = 0;

  std::size_t record_size() const {
    std::size_t n = 1;
    for (int d : dims) n *= static_cast<std::size_t>(d);
    return n;
  }
  const float* record(std::size_t i) const { return data.data() + i * record_size(); }
};

inline void save_features(const FeatureStore& fs, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("features: cannot open " + path);
  os.write("MMTF", 4);
  detail::write_u32(os, kFeatureVersion);
  detail::write_u32(os, static_cast<std::uint32_t>(fs.rank));
  for (int d : fs.dims) detail::write_u32(os, static_cast<std::uint32_t>(d));
  detail::write_u32(os, static_cast<std::uint32_t>(fs.count));
  os.write(reinterpret_cast<const char*>(fs.data.data()),
           static_cast<std::streamsize>(fs.data.size() * sizeof(float)));
  if (!os) throw std::runtime_error("features: write failed for " + path);
}

inline FeatureStore load_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("features: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "MMTF", 4) != 0)
    throw std::runtime_error("features: bad magic in " + path);
  if (detail::read_u32(is) != kFeatureVersion)
    throw std::runtime_error("features: unsupported version in " + path);
  FeatureStore fs;
  fs.rank = static_cast<int>(detail::read_u32(is));
  if (fs.rank != 1 && fs.rank != 2)
    throw std::runtime_error("features: rank must be 1 or 2 in " + path);
  fs.dims.resize(static_cast<std::size_t>(fs.rank));
  for (auto& d : fs.dims) {
    d = static_cast<int>(detail::read_u32(is));
    if (d <= 0) throw std::runtime_error("features: bad dim in " + path);
  }
  fs.count = detail::read_u32(is);
  fs.data.resize(fs.count * fs.record_size());
  const std::streamsize want =
      static_cast<std::streamsize>(fs.data.size() * sizeof(float));
  is.read(reinterpret_cast<char*>(fs.data.data()), want);
  if (is.gcount() != want) {
    const std::size_t header = 4 + 4 + 4 + 4u * fs.dims.size() + 4;
    throw std::runtime_error(
        "features: truncated payload in " + path + " at byte offset " +
        std::to_string(header + static_cast<std::size_t>(std::max<std::streamsize>(
                                    is.gcount(), 0))));
  }
  return fs;
}

/// Attach rows of a feature store to samples, row i to sample i.
/// Misalignment is a load-time error, never silent.
inline void attach_features(std::vector<Sample>& samples, const FeatureStore& fs,
                            bool spatial) {
  if (fs.count != samples.size())
    throw std::runtime_error("feature/corpus misalignment: " +
                             std::to_string(fs.count) + " feature rows vs " +
                             std::to_string(samples.size()) + " samples");
  if (spatial && fs.rank != 2)
    throw std::runtime_error("rank mismatch: spatial features expected (rank 2), "
                             "file has rank " + std::to_string(fs.rank));
  if (!spatial && fs.rank != 1)
    throw std::runtime_error("rank mismatch: global features expected (rank 1), "
                             "file has rank " + std::to_string(fs.rank));
  const std::size_t rec = fs.record_size();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const float* r = fs.record(i);
    if (spatial) {
      samples[i].spatial_feat.assign(r, r + rec);
      samples[i].spatial_rows = fs.dims[0];
      samples[i].spatial_cols = fs.dims[1];
    } else {
      samples[i].global_feat.assign(r, r + rec);
    }
  }
}

/// Optional L2 normalization of attached features (off by default; the
/// `normalize_features` config flag toggles it).
inline void l2_normalize_features(std::vector<Sample>& samples) {
  const auto norm1 = [](std::vector<float>& v, std::size_t off, std::size_t n) {
    double sq = 0;
    for (std::size_t i = 0; i < n; ++i) sq += double(v[off + i]) * v[off + i];
    const float s = sq > 0 ? static_cast<float>(1.0 / std::sqrt(sq)) : 1.0f;
    for (std::size_t i = 0; i < n; ++i) v[off + i] *= s;
  };
  for (auto& s : samples) {
    if (!s.global_feat.empty()) norm1(s.global_feat, 0, s.global_feat.size());
    for (int r = 0; r < s.spatial_rows; ++r)
      norm1(s.spatial_feat, static_cast<std::size_t>(r) * s.spatial_cols,
            static_cast<std::size_t>(s.spatial_cols));
  }
}

/// Group samples into padded batches. Every sample appears exactly once.
inline std::vector<Batch> make_batches(const std::vector<Sample>& samples,
                                       int batch_size, Rng& rng, bool shuffle) {
  if (batch_size < 1) throw std::invalid_argument("make_batches: batch_size < 1");
  std::vector<const Sample*> order;
  order.reserve(samples.size());
  for (const auto& s : samples) order.push_back(&s);
  if (shuffle) rng.shuffle(order);

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end =
        std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    Batch b;
    std::size_t max_src = 0, max_trg = 0;
    for (std::size_t i = start; i < end; ++i) {
      b.samples.push_back(order[i]);
      max_src = std::max(max_src, order[i]->src_ids.size());
      max_trg = std::max(max_trg, order[i]->trg_ids.size());
    }
    for (const Sample* s : b.samples) {
      std::vector<int> sr(max_src, kPadId), tr(max_trg, kPadId);
      std::copy(s->src_ids.begin(), s->src_ids.end(), sr.begin());
      std::copy(s->trg_ids.begin(), s->trg_ids.end(), tr.begin());
      b.src.push_back(std::move(sr));
      b.trg.push_back(std::move(tr));
      b.src_len.push_back(static_cast<int>(s->src_ids.size()));
      b.trg_len.push_back(static_cast<int>(s->trg_ids.size()));
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

// --- Synthetic grounded-disambiguation corpus --------------------------------

struct SynthConfig {
  int n_train = 1000;
  int n_test = 200;
  int n_ambiguous_words = 5;
  int senses_per_word = 2;
  int n_filler_words = 10;
  int min_fillers = 3;
  int max_fillers = 6;
  int D_g = 32;
  int P = 16;
  int D_s = 16;
  double noise_sigma = 0.1;
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"n_train", c.n_train},
       {"n_test", c.n_test},
       {"n_ambiguous_words", c.n_ambiguous_words},
       {"senses_per_word", c.senses_per_word},
       {"n_filler_words", c.n_filler_words},
       {"min_fillers", c.min_fillers},
       {"max_fillers", c.max_fillers},
       {"D_g", c.D_g},
       {"P", c.P},
       {"D_s", c.D_s},
       {"noise_sigma", c.noise_sigma}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  SynthConfig d;
  c.n_train = j.value("n_train", d.n_train);
  c.n_test = j.value("n_test", d.n_test);
  c.n_ambiguous_words = j.value("n_ambiguous_words", d.n_ambiguous_words);
  c.senses_per_word = j.value("senses_per_word", d.senses_per_word);
  c.n_filler_words = j.value("n_filler_words", d.n_filler_words);
  c.min_fillers = j.value("min_fillers", d.min_fillers);
  c.max_fillers = j.value("max_fillers", d.max_fillers);
  c.D_g = j.value("D_g", d.D_g);
  c.P = j.value("P", d.P);
  c.D_s = j.value("D_s", d.D_s);
  c.noise_sigma = j.value("noise_sigma", d.noise_sigma);
}

/// A deterministic toy language. Every source sentence contains exactly
/// one ambiguous token whose correct translation is one of
/// senses_per_word alternatives, sampled uniformly and never inferable
/// from the text; only the visual features carry the sense. Fillers
/// translate deterministically.
///
/// The global feature is the unit basis vector of the (word, sense)
/// combination plus N(0, sigma^2) noise. The spatial map carries the
/// same signal in one random cell of the P cells; all other cells are
/// pure noise.
///
/// Target sense tokens are named "amb<k>x<s>" so that downstream
/// accuracy measurement can identify them by prefix.
inline void synth_generate(const SynthConfig& cfg, std::uint64_t seed,
                           const std::string& out_dir) {
  if (cfg.senses_per_word < 2)
    throw std::invalid_argument("synth: senses_per_word must be >= 2");
  const int combos = cfg.n_ambiguous_words * cfg.senses_per_word;
  if (cfg.D_g < combos || cfg.D_s < combos)
    throw std::invalid_argument(
        "synth: feature dims must be >= n_ambiguous_words * senses_per_word");
  if (cfg.min_fillers < 1 || cfg.max_fillers < cfg.min_fillers)
    throw std::invalid_argument("synth: bad filler length range");

  std::filesystem::create_directories(out_dir);
  Rng rng(seed);

  const auto gen_split = [&](int n, const std::string& stem) {
    std::ofstream src(out_dir + "/" + stem + ".src");
    std::ofstream trg(out_dir + "/" + stem + ".trg");
    if (!src || !trg) throw std::runtime_error("synth: cannot write corpus files");
    FeatureStore gfs, sfs;
    gfs.rank = 1;
    gfs.dims = {cfg.D_g};
    gfs.count = static_cast<std::size_t>(n);
    sfs.rank = 2;
    sfs.dims = {cfg.P, cfg.D_s};
    sfs.count = static_cast<std::size_t>(n);
    gfs.data.reserve(gfs.count * gfs.record_size());
    sfs.data.reserve(sfs.count * sfs.record_size());

    for (int i = 0; i < n; ++i) {
      const int len = cfg.min_fillers +
                      static_cast<int>(rng.below(
                          static_cast<std::uint64_t>(cfg.max_fillers - cfg.min_fillers + 1)));
      const int amb_word = static_cast<int>(rng.below(cfg.n_ambiguous_words));
      const int sense = static_cast<int>(rng.below(cfg.senses_per_word));
      const int amb_pos = static_cast<int>(rng.below(len + 1));
      std::vector<std::string> src_toks, trg_toks;
      for (int p = 0; p <= len; ++p) {
        if (p == amb_pos) {
          src_toks.push_back("amb" + std::to_string(amb_word));
          trg_toks.push_back("amb" + std::to_string(amb_word) + "x" +
                             std::to_string(sense));
        } else {
          const int f = static_cast<int>(rng.below(cfg.n_filler_words));
          src_toks.push_back("wsrc" + std::to_string(f));
          trg_toks.push_back("wtrg" + std::to_string(f));
        }
      }
      for (std::size_t t = 0; t < src_toks.size(); ++t)
        src << src_toks[t] << (t + 1 < src_toks.size() ? " " : "\n");
      for (std::size_t t = 0; t < trg_toks.size(); ++t)
        trg << trg_toks[t] << (t + 1 < trg_toks.size() ? " " : "\n");

      const int combo = amb_word * cfg.senses_per_word + sense;
      for (int d = 0; d < cfg.D_g; ++d)
        gfs.data.push_back(static_cast<float>((d == combo ? 1.0 : 0.0) +
                                              cfg.noise_sigma * rng.normal()));
      const int cell = static_cast<int>(rng.below(cfg.P));
      for (int p = 0; p < cfg.P; ++p)
        for (int d = 0; d < cfg.D_s; ++d)
          sfs.data.push_back(static_cast<float>(
              (p == cell && d == combo ? 1.0 : 0.0) + cfg.noise_sigma * rng.normal()));
    }
    save_features(gfs, out_dir + "/" + stem + ".global.mmtf");
    save_features(sfs, out_dir + "/" + stem + ".spatial.mmtf");
  };

  gen_split(cfg.n_train, "train");
  gen_split(cfg.n_test, "test");

  nlohmann::json manifest = {
      {"seed", seed},
      {"config", cfg},
      {"files",
       {"train.src", "train.trg", "train.global.mmtf", "train.spatial.mmtf",
        "test.src", "test.trg", "test.global.mmtf", "test.spatial.mmtf"}}};
  std::ofstream mf(out_dir + "/manifest.json");
  if (!mf) throw std::runtime_error("synth: cannot write manifest");
  mf << manifest.dump(2) << '\n';
}

}  // namespace mmtl
