#pragma once

// Text normalization, BPE subword learning/application and vocabulary
// construction. The tokenizer is a self-contained rule set (version 1,
// documented at normalize_line); it approximates the usual
// normalize+tokenize+lowercase pipeline without external scripts.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mmtl {

inline constexpr const char* kBpeMarker = "@@";
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;

/// Split a UTF-8 string into code points (each kept as a string).
/// Invalid bytes pass through as single-byte units.
inline std::vector<std::string> utf8_codepoints(const std::string& s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    if ((c & 0x80u) == 0x00u) len = 1;
    else if ((c & 0xE0u) == 0xC0u) len = 2;
    else if ((c & 0xF0u) == 0xE0u) len = 3;
    else if ((c & 0xF8u) == 0xF0u) len = 4;
    if (i + len > s.size()) len = 1;
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

/// Tokenizer rule table v1:
///  1. punctuation normalization: curly/angle quotes -> '"' or '\'',
///     unicode dashes -> '-', ellipsis -> "...", NBSP -> space
///  2. ASCII lowercasing (non-ASCII letters pass through unchanged)
///  3. ASCII punctuation split from words; runs of the same punctuation
///     character stay one token ("..." is a single token)
///  4. whitespace collapsed; empty line -> empty token list
inline std::vector<std::string> normalize_line(const std::string& raw) {
  static const std::vector<std::pair<std::string, std::string>> kSubst = {
      {"\xE2\x80\x9C", "\""}, {"\xE2\x80\x9D", "\""}, {"\xE2\x80\x9E", "\""},
      {"\xC2\xAB", "\""},     {"\xC2\xBB", "\""},     {"\xE2\x80\x98", "'"},
      {"\xE2\x80\x99", "'"},  {"\xE2\x80\x9A", "'"},  {"\xE2\x80\x93", "-"},
      {"\xE2\x80\x94", "-"},  {"\xE2\x80\x95", "-"},  {"\xE2\x80\x90", "-"},
      {"\xE2\x80\x91", "-"},  {"\xE2\x80\xA6", "..."}, {"\xC2\xA0", " "},
  };
  std::string text;
  text.reserve(raw.size());
  std::size_t i = 0;
  while (i < raw.size()) {
    bool replaced = false;
    for (const auto& [from, to] : kSubst) {
      if (raw.compare(i, from.size(), from) == 0) {
        text += to;
        i += from.size();
        replaced = true;
        break;
      }
    }
    if (!replaced) {
      char c = raw[i++];
      if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
      text += c;
    }
  }

  const auto is_punct = [](char c) {
    return (c >= '!' && c <= '/') || (c >= ':' && c <= '@') ||
           (c >= '[' && c <= '`') || (c >= '{' && c <= '~');
  };
  std::vector<std::string> tokens;
  std::string cur;
  const auto flush = [&] {
    if (!cur.empty()) {
      tokens.push_back(cur);
      cur.clear();
    }
  };
  for (std::size_t k = 0; k < text.size(); ++k) {
    const char c = text[k];
    if (c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\v' || c == '\f') {
      flush();
    } else if (is_punct(c)) {
      flush();
      std::string run(1, c);
      while (k + 1 < text.size() && text[k + 1] == c) run += text[++k];
      tokens.push_back(run);
    } else {
      cur += c;
    }
  }
  flush();
  return tokens;
}

/// Ordered BPE merge list with a continuation marker on non-final
/// subwords.
struct BpeModel {
  std::vector<std::pair<std::string, std::string>> merges;
  std::string marker = kBpeMarker;
};

namespace bpe_detail {

inline void apply_merge(std::vector<std::string>& symbols,
                        const std::pair<std::string, std::string>& m) {
  std::size_t w = 0;
  for (std::size_t r = 0; r < symbols.size();) {
    if (r + 1 < symbols.size() && symbols[r] == m.first && symbols[r + 1] == m.second) {
      symbols[w++] = m.first + m.second;
      r += 2;
    } else {
      if (w != r) symbols[w] = std::move(symbols[r]);
      ++w;
      ++r;
    }
  }
  symbols.resize(w);
}

}  // namespace bpe_detail

/// Greedy most-frequent-pair merging over word types weighted by
/// frequency. Stops after n_merges iterations or when no pair occurs at
/// least twice. Ties broken by lexicographic order of (left, right).
inline BpeModel bpe_learn(const std::vector<std::vector<std::string>>& corpus,
                          int n_merges) {
  if (corpus.empty()) throw std::invalid_argument("bpe_learn: empty corpus");
  if (n_merges < 0) throw std::invalid_argument("bpe_learn: n_merges < 0");

  // word type -> frequency, word type -> current symbol sequence
  std::map<std::string, long long> freq;
  for (const auto& line : corpus)
    for (const auto& tok : line) ++freq[tok];
  std::vector<std::pair<std::vector<std::string>, long long>> words;
  words.reserve(freq.size());
  for (const auto& [word, f] : freq) words.emplace_back(utf8_codepoints(word), f);

  BpeModel model;
  for (int it = 0; it < n_merges; ++it) {
    std::map<std::pair<std::string, std::string>, long long> counts;
    for (const auto& [symbols, f] : words)
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i)
        counts[{symbols[i], symbols[i + 1]}] += f;
    std::pair<std::string, std::string> best;
    long long best_count = 0;
    for (const auto& [pair, c] : counts) {
      // map iterates in lexicographic pair order, so '>' keeps the
      // lexicographically smallest pair on ties
      if (c > best_count) {
        best_count = c;
        best = pair;
      }
    }
    if (best_count < 2) break;
    model.merges.push_back(best);
    for (auto& [symbols, f] : words) bpe_detail::apply_merge(symbols, best);
  }
  return model;
}

/// Split one word to characters, replay the merges in learned order,
/// and mark every non-final subword with the continuation marker.
inline std::vector<std::string> bpe_apply_word(const BpeModel& model,
                                               const std::string& word) {
  std::vector<std::string> symbols = utf8_codepoints(word);
  if (symbols.empty()) return {};
  for (const auto& m : model.merges) {
    if (symbols.size() < 2) break;
    bpe_detail::apply_merge(symbols, m);
  }
  for (std::size_t i = 0; i + 1 < symbols.size(); ++i) symbols[i] += model.marker;
  return symbols;
}

inline std::vector<std::string> bpe_apply(const BpeModel& model,
                                          const std::vector<std::string>& tokens) {
  std::vector<std::string> out;
  for (const auto& tok : tokens) {
    auto sub = bpe_apply_word(model, tok);
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

/// Inverse of bpe_apply: joins marker-carrying subwords with their
/// successors. A dangling marker at sequence end is stripped and
/// reported through *dangling_marker when given.
inline std::vector<std::string> bpe_undo(const std::vector<std::string>& subwords,
                                         const std::string& marker = kBpeMarker,
                                         bool* dangling_marker = nullptr) {
  if (dangling_marker) *dangling_marker = false;
  std::vector<std::string> out;
  std::string cur;
  bool open = false;
  for (const auto& sw : subwords) {
    const bool cont = sw.size() >= marker.size() &&
                      sw.compare(sw.size() - marker.size(), marker.size(), marker) == 0;
    cur += cont ? sw.substr(0, sw.size() - marker.size()) : sw;
    if (cont) {
      open = true;
    } else {
      out.push_back(cur);
      cur.clear();
      open = false;
    }
  }
  if (open) {
    if (dangling_marker) *dangling_marker = true;
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

/// token <-> id bijection with reserved specials at ids 0..3.
class Vocabulary {
public:
  Vocabulary() {
    for (const char* s : {"<pad>", "<bos>", "<eos>", "<unk>"}) push(s);
  }

  /// Distinct subwords ordered by descending frequency, ties broken
  /// lexicographically, appended after the reserved ids.
  static Vocabulary build(const std::vector<std::vector<std::string>>& corpus) {
    if (corpus.empty()) throw std::invalid_argument("vocab_build: empty corpus");
    std::map<std::string, long long> freq;
    for (const auto& line : corpus)
      for (const auto& tok : line) ++freq[tok];
    std::vector<std::pair<std::string, long long>> items(freq.begin(), freq.end());
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocabulary v;
    for (const auto& [tok, f] : items) v.push(tok);
    return v;
  }

  int encode(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnkId : it->second;
  }
  std::vector<int> encode(const std::vector<std::string>& tokens) const {
    std::vector<int> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(encode(t));
    return out;
  }
  const std::string& decode(int id) const {
    if (id < 0 || id >= static_cast<int>(tokens_.size()))
      throw std::out_of_range("vocab: id out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }
  int size() const { return static_cast<int>(tokens_.size()); }
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }

  void save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("vocab: cannot open " + path);
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      os << tokens_[i] << '\t' << i << '\n';
  }
  static Vocabulary load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("vocab: cannot open " + path);
    Vocabulary v;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos)
        throw std::runtime_error("vocab: malformed line " + std::to_string(lineno));
      const std::string tok = line.substr(0, tab);
      const int id = std::stoi(line.substr(tab + 1));
      if (id < 4) {
        if (id != v.encode_strict(tok))
          throw std::runtime_error("vocab: reserved id reassigned at line " +
                                   std::to_string(lineno));
        continue;
      }
      if (id != v.size())
        throw std::runtime_error("vocab: non-contiguous id at line " +
                                 std::to_string(lineno));
      v.push(tok);
    }
    return v;
  }

private:
  int encode_strict(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? -1 : it->second;
  }
  void push(const std::string& token) {
    ids_.emplace(token, static_cast<int>(tokens_.size()));
    tokens_.push_back(token);
  }
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// --- BPE model file: line 1 "mmtl-bpe v1", then one merge per line ---------

inline void bpe_save(const BpeModel& model, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("bpe: cannot open " + path);
  os << "mmtl-bpe v1\n";
  for (const auto& [l, r] : model.merges) os << l << ' ' << r << '\n';
}

inline BpeModel bpe_load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("bpe: cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line != "mmtl-bpe v1")
    throw std::runtime_error("bpe: bad header in " + path);
  BpeModel model;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size())
      throw std::runtime_error("bpe: malformed merge line in " + path);
    model.merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  return model;
}

}  // namespace mmtl
