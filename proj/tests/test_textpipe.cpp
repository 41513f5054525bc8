#include <catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "mmtl/rng.hpp"
#include "mmtl/textpipe.hpp"

using namespace mmtl;
using Toks = std::vector<std::string>;

TEST_CASE("normalize_line examples") {
  CHECK(normalize_line("Hello, World!") == Toks{"hello", ",", "world", "!"});
  CHECK(normalize_line("") == Toks{});
  CHECK(normalize_line("   \t ") == Toks{});
  CHECK(normalize_line("a  b\tc") == Toks{"a", "b", "c"});
  // curly quotes, em dash, ellipsis
  CHECK(normalize_line("\xE2\x80\x9CYes\xE2\x80\x9D \xE2\x80\x94 no\xE2\x80\xA6") ==
        Toks{"\"", "yes", "\"", "-", "no", "..."});
  // apostrophe splits, same-char runs stay together
  CHECK(normalize_line("don't stop!!") == Toks{"don", "'", "t", "stop", "!!"});
  CHECK(normalize_line("x...y") == Toks{"x", "...", "y"});
  // NBSP acts as whitespace; non-ASCII letters pass through
  CHECK(normalize_line("caf\xC3\xA9\xC2\xA0ol\xC3\xA9") ==
        Toks{"caf\xC3\xA9", "ol\xC3\xA9"});
  CHECK(normalize_line("3.14 is pi") == Toks{"3", ".", "14", "is", "pi"});
}

TEST_CASE("normalize_line is idempotent on its own output") {
  Rng rng(21);
  const std::string alphabet = "aZ.!? ,'-09\t\"";
  for (int trial = 0; trial < 300; ++trial) {
    std::string s;
    const int len = static_cast<int>(rng.below(40));
    for (int i = 0; i < len; ++i) s += alphabet[rng.below(alphabet.size())];
    const auto once = normalize_line(s);
    std::string joined;
    for (const auto& t : once) joined += (joined.empty() ? "" : " ") + t;
    CHECK(normalize_line(joined) == once);
  }
}

TEST_CASE("utf8_codepoints splits multibyte sequences") {
  CHECK(utf8_codepoints("abc") == Toks{"a", "b", "c"});
  CHECK(utf8_codepoints("caf\xC3\xA9") == Toks{"c", "a", "f", "\xC3\xA9"});
  CHECK(utf8_codepoints("") == Toks{});
}

TEST_CASE("bpe_learn hand oracle") {
  // Corpus word frequencies: "low" x5, "lower" x2, "newest" x6, "widest" x3.
  // Classic example: pair counts over characters give
  //   (e,s): 6+3=9  -> merge 1 "e s"
  //   (es,t): 9     -> merge 2 "es t"
  //   ... third best is (l,o): 5+2=7 vs (n,e)=6, (w,est)=6, (w,i)=3 ...
  std::vector<Toks> corpus;
  for (int i = 0; i < 5; ++i) corpus.push_back({"low"});
  for (int i = 0; i < 2; ++i) corpus.push_back({"lower"});
  for (int i = 0; i < 6; ++i) corpus.push_back({"newest"});
  for (int i = 0; i < 3; ++i) corpus.push_back({"widest"});

  auto model = bpe_learn(corpus, 3);
  REQUIRE(model.merges.size() == 3);
  CHECK(model.merges[0] == std::make_pair(std::string("e"), std::string("s")));
  CHECK(model.merges[1] == std::make_pair(std::string("es"), std::string("t")));
  CHECK(model.merges[2] == std::make_pair(std::string("l"), std::string("o")));

  CHECK(bpe_apply_word(model, "newest") == Toks{"n@@", "e@@", "w@@", "est"});
  CHECK(bpe_apply_word(model, "lowest") == Toks{"lo@@", "w@@", "est"});
  CHECK(bpe_apply_word(model, "xyz") == Toks{"x@@", "y@@", "z"});
}

TEST_CASE("bpe_learn ties break lexicographically") {
  // "ab" and "cd" both occur 3 times; (a,b) < (c,d) lexicographically.
  std::vector<Toks> corpus{{"ab", "cd"}, {"ab", "cd"}, {"ab", "cd"}};
  auto model = bpe_learn(corpus, 1);
  REQUIRE(model.merges.size() == 1);
  CHECK(model.merges[0] == std::make_pair(std::string("a"), std::string("b")));
}

TEST_CASE("bpe_learn stops when best pair count drops below 2") {
  std::vector<Toks> corpus{{"abc"}, {"def"}};
  auto model = bpe_learn(corpus, 100);
  CHECK(model.merges.empty());
}

TEST_CASE("bpe apply/undo round-trip on random token lists") {
  // Learn from a small corpus, then verify undo(apply(x)) == x for
  // arbitrary token sequences over a wider alphabet.
  Rng rng(31);
  std::vector<Toks> corpus;
  const Toks words{"the", "there", "then", "other", "tether", "he", "she"};
  for (int i = 0; i < 50; ++i) {
    Toks line;
    for (int k = 0; k < 6; ++k) line.push_back(words[rng.below(words.size())]);
    corpus.push_back(line);
  }
  auto model = bpe_learn(corpus, 20);
  CHECK(!model.merges.empty());

  const Toks pool{"the", "there", "zebra", "he", "q", "tether", "banana", "x1"};
  for (int trial = 0; trial < 1000; ++trial) {
    Toks line;
    const int len = 1 + static_cast<int>(rng.below(12));
    for (int k = 0; k < len; ++k) line.push_back(pool[rng.below(pool.size())]);
    const auto sub = bpe_apply(model, line);
    // no subword may be empty, only non-final pieces carry the marker
    for (const auto& s : sub) CHECK(!s.empty());
    bool dangling = true;
    CHECK(bpe_undo(sub, model.marker, &dangling) == line);
    CHECK_FALSE(dangling);
  }
}

TEST_CASE("bpe_undo reports a dangling marker") {
  bool dangling = false;
  CHECK(bpe_undo({"ab@@", "cd@@"}, "@@", &dangling) == Toks{"abcd"});
  CHECK(dangling);
}

TEST_CASE("more merges never increase the subword count of a word") {
  std::vector<Toks> corpus;
  Rng rng(41);
  const Toks words{"alpha", "alps", "albert", "beta", "betray", "bet"};
  for (int i = 0; i < 40; ++i) {
    Toks line;
    for (int k = 0; k < 4; ++k) line.push_back(words[rng.below(words.size())]);
    corpus.push_back(line);
  }
  auto full = bpe_learn(corpus, 30);
  for (const auto& w : {"alpha", "albatross", "betrayal", "zzz"}) {
    std::size_t prev = std::string(w).size() + 1;
    for (std::size_t k = 0; k <= full.merges.size(); ++k) {
      BpeModel m;
      m.merges.assign(full.merges.begin(), full.merges.begin() + k);
      const auto n = bpe_apply_word(m, w).size();
      CHECK(n <= prev);
      prev = n;
    }
  }
}

TEST_CASE("bpe learn/apply are deterministic") {
  std::vector<Toks> corpus{{"aab", "aac"}, {"aab", "abc"}, {"aac", "aab"}};
  auto m1 = bpe_learn(corpus, 10);
  auto m2 = bpe_learn(corpus, 10);
  CHECK(m1.merges == m2.merges);
  CHECK(bpe_apply(m1, {"aabc", "caa"}) == bpe_apply(m2, {"aabc", "caa"}));
}

TEST_CASE("bpe model file round-trip") {
  std::vector<Toks> corpus{{"abab", "abab"}, {"abab"}};
  auto model = bpe_learn(corpus, 5);
  REQUIRE(!model.merges.empty());
  const std::string path = "bpe_roundtrip.txt";
  bpe_save(model, path);
  auto loaded = bpe_load(path);
  CHECK(loaded.merges == model.merges);
  CHECK_THROWS(bpe_load("no_such_file.bpe"));
}

TEST_CASE("vocabulary reserved ids and ordering") {
  std::vector<Toks> corpus{{"b", "a", "a"}, {"c", "a", "b"}};
  auto v = Vocabulary::build(corpus);
  CHECK(v.decode(kPadId) == "<pad>");
  CHECK(v.decode(kBosId) == "<bos>");
  CHECK(v.decode(kEosId) == "<eos>");
  CHECK(v.decode(kUnkId) == "<unk>");
  // a (freq 3) then b (freq 2) then c (freq 1)
  CHECK(v.encode("a") == 4);
  CHECK(v.encode("b") == 5);
  CHECK(v.encode("c") == 6);
  CHECK(v.encode("zzz") == kUnkId);
  CHECK(v.size() == 7);
  CHECK(v.encode(Toks{"c", "a", "nope"}) == std::vector<int>{6, 4, kUnkId});
}

TEST_CASE("vocabulary ties are lexicographic") {
  std::vector<Toks> corpus{{"pear", "apple"}};
  auto v = Vocabulary::build(corpus);
  CHECK(v.encode("apple") == 4);
  CHECK(v.encode("pear") == 5);
}

TEST_CASE("vocabulary save/load round-trip") {
  std::vector<Toks> corpus{{"x", "y", "y", "z"}};
  auto v = Vocabulary::build(corpus);
  const std::string path = "vocab_roundtrip.tsv";
  v.save(path);
  auto w = Vocabulary::load(path);
  CHECK(w.size() == v.size());
  for (int id = 0; id < v.size(); ++id) CHECK(w.decode(id) == v.decode(id));
  CHECK_THROWS(Vocabulary::load("no_such_vocab.tsv"));
}

TEST_CASE("empty corpora are rejected") {
  CHECK_THROWS(bpe_learn({}, 10));
  CHECK_THROWS(Vocabulary::build({}));
}
