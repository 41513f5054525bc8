#include <catch_amalgamated.hpp>

#include <cmath>
#include <string>
#include <vector>

#include "mmtl/evalkit.hpp"
#include "mmtl/rng.hpp"

using namespace mmtl;

namespace {

TokenLine toks(const std::string& s) {
  TokenLine out;
  std::string cur;
  for (char c : s) {
    if (c == ' ') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

TEST_CASE("BLEU of identical corpora is 100") {
  const TokenCorpus c{toks("the cat sat"), toks("a b c d")};
  CHECK(bleu(c, c) == Catch::Approx(100.0).margin(1e-9));
}

TEST_CASE("the classic clipping example scores zero BLEU-4") {
  // hyp "the the the the the the the" vs "the cat is on the mat":
  // clipped unigram precision 2/7, all higher orders zero.
  const auto st = bleu_sentence_stats(toks("the the the the the the the"),
                                      toks("the cat is on the mat"));
  CHECK(st.match[0] == 2);
  CHECK(st.total[0] == 7);
  CHECK(st.match[1] == 0);
  CHECK(bleu_from_stats(st) == 0.0);
}

TEST_CASE("BLEU hand oracle with every n-gram order populated") {
  // hyp "the cat is on a mat" vs ref "the cat is on the mat":
  // p1 = 5/6, p2 = 3/5, p3 = 2/4, p4 = 1/3, BP = 1
  const auto st = bleu_sentence_stats(toks("the cat is on a mat"),
                                      toks("the cat is on the mat"));
  CHECK(st.match == std::array<long long, 4>{5, 3, 2, 1});
  CHECK(st.total == std::array<long long, 4>{6, 5, 4, 3});
  const double expected =
      100.0 * std::pow(5.0 / 6 * 3.0 / 5 * 2.0 / 4 * 1.0 / 3, 0.25);
  CHECK(bleu_from_stats(st) == Catch::Approx(expected).margin(1e-9));
}

TEST_CASE("brevity penalty oracle") {
  // perfect prefix of length 5 against a 6-token reference:
  // all precisions 1, BP = exp(1 - 6/5)
  const auto st = bleu_sentence_stats(toks("the cat is on the"),
                                      toks("the cat is on the mat"));
  CHECK(bleu_from_stats(st) ==
        Catch::Approx(100.0 * std::exp(1.0 - 6.0 / 5.0)).margin(1e-9));
}

TEST_CASE("corpus BLEU pools statistics instead of averaging") {
  const TokenCorpus hyps{toks("a b c d"), toks("x y z w")};
  const TokenCorpus refs{toks("a b c d"), toks("q r s t")};
  BleuStats pooled;
  pooled += bleu_sentence_stats(hyps[0], refs[0]);
  pooled += bleu_sentence_stats(hyps[1], refs[1]);
  CHECK(bleu(hyps, refs) == Catch::Approx(bleu_from_stats(pooled)));
  CHECK_THROWS(bleu(hyps, TokenCorpus{refs[0]}));
  CHECK_THROWS(bleu({}, {}));
}

TEST_CASE("METEOR surrogate identity: 1 - 0.5/m^3") {
  const auto m3 = meteor_sentence(toks("a b c"), toks("a b c"));
  CHECK(m3.matches == 3);
  CHECK(m3.chunks == 1);
  CHECK(m3.score == Catch::Approx(1.0 - 0.5 / 27.0).margin(1e-12));

  const auto m1 = meteor_sentence(toks("a"), toks("a"));
  CHECK(m1.score == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("METEOR surrogate reversal: 'b a' vs 'a b' scores 0.5") {
  const auto m = meteor_sentence(toks("b a"), toks("a b"));
  CHECK(m.matches == 2);
  CHECK(m.chunks == 2);
  // P = R = 1, Fmean = 1, penalty = 0.5 * (2/2)^3 = 0.5
  CHECK(m.score == Catch::Approx(0.5).margin(1e-12));
}

TEST_CASE("METEOR zero cases") {
  CHECK(meteor_sentence(toks("x y"), toks("a b")).score == 0.0);
  CHECK(meteor_sentence({}, toks("a")).score == 0.0);
  CHECK(meteor_sentence(toks("a"), {}).score == 0.0);
}

TEST_CASE("METEOR precision/recall asymmetry oracle") {
  // hyp "a b x" vs ref "a b": m=2, P=2/3, R=1, Fmean=10PR/(R+9P)=20/21,
  // chunks=1, penalty=0.5/8
  const auto m = meteor_sentence(toks("a b x"), toks("a b"));
  CHECK(m.matches == 2);
  CHECK(m.chunks == 1);
  CHECK(m.score ==
        Catch::Approx((20.0 / 21.0) * (1.0 - 0.5 / 8.0)).margin(1e-12));
}

TEST_CASE("chunk count is minimal, not greedy") {
  // "a b c d" vs "c d a b": two blocks
  CHECK(meteor_sentence(toks("a b c d"), toks("c d a b")).chunks == 2);
  // greedy left-most matching would align hyp 'a' to ref[0] and get two
  // chunks; the optimal alignment uses ref[2..3] for one chunk
  const auto m = meteor_sentence(toks("a b"), toks("a x a b"));
  CHECK(m.matches == 2);
  CHECK(m.chunks == 1);
}

TEST_CASE("corpus METEOR is the mean of sentence scores") {
  const TokenCorpus hyps{toks("a b c"), toks("x y")};
  const TokenCorpus refs{toks("a b c"), toks("p q")};
  const double expect = (meteor_sentence(hyps[0], refs[0]).score +
                         meteor_sentence(hyps[1], refs[1]).score) /
                        2.0;
  CHECK(meteor_surrogate(hyps, refs) == Catch::Approx(expect).margin(1e-12));
  CHECK_THROWS(meteor_surrogate(hyps, TokenCorpus{refs[0]}));
}

TEST_CASE("AR test: a system against itself gives p = 1") {
  const TokenCorpus hyps{toks("a b"), toks("c d"), toks("e f")};
  const TokenCorpus refs{toks("a b"), toks("c x"), toks("y f")};
  for (Metric m : {Metric::kBleu, Metric::kMeteor}) {
    Rng rng(5);
    CHECK(ar_test(m, hyps, hyps, refs, 100, rng) == 1.0);
  }
}

TEST_CASE("AR test detects a clearly better system") {
  TokenCorpus refs, good, bad;
  for (int i = 0; i < 30; ++i) {
    refs.push_back(toks("tok" + std::to_string(i) + " alpha beta gamma delta"));
    good.push_back(refs.back());
    bad.push_back(toks("zzz qqq www vvv uuu"));
  }
  Rng rng(7);
  const double p = ar_test(Metric::kMeteor, good, bad, refs, 200, rng);
  CHECK(p < 0.01);
  Rng rng2(7);
  const double pb = ar_test(Metric::kBleu, good, bad, refs, 200, rng2);
  CHECK(pb < 0.01);
}

TEST_CASE("AR test is symmetric in its two systems") {
  TokenCorpus refs, a, b;
  Rng gen(13);
  const std::vector<std::string> pool{"u", "v", "w", "x", "y"};
  for (int i = 0; i < 12; ++i) {
    TokenLine r, ha, hb;
    for (int k = 0; k < 5; ++k) {
      r.push_back(pool[gen.below(pool.size())]);
      ha.push_back(pool[gen.below(pool.size())]);
      hb.push_back(pool[gen.below(pool.size())]);
    }
    refs.push_back(r);
    a.push_back(ha);
    b.push_back(hb);
  }
  Rng r1(99), r2(99);
  CHECK(ar_test(Metric::kMeteor, a, b, refs, 300, r1) ==
        ar_test(Metric::kMeteor, b, a, refs, 300, r2));
}

TEST_CASE("AR test p-values stay in (0, 1] and validate inputs") {
  const TokenCorpus hyps{toks("a b")}, refs{toks("a b")};
  Rng rng(1);
  const double p = ar_test(Metric::kBleu, hyps, hyps, refs, 10, rng);
  CHECK(p > 0.0);
  CHECK(p <= 1.0);
  CHECK_THROWS(ar_test(Metric::kBleu, hyps, {}, refs, 10, rng));
  CHECK_THROWS(ar_test(Metric::kBleu, hyps, hyps, refs, 0, rng));
}

TEST_CASE("aggregate_runs mean, sample std and ensemble column") {
  const TokenCorpus refs{toks("a b c d")};
  const TokenCorpus run1{toks("a b c d")};   // BLEU 100
  const TokenCorpus run2{toks("a b c x")};   // BLEU < 100
  const TokenCorpus ens{toks("a b c d")};

  auto r = aggregate_runs({run1, run2}, &ens, refs);
  REQUIRE(r.bleu_runs.size() == 2);
  const double mean = (r.bleu_runs[0] + r.bleu_runs[1]) / 2.0;
  CHECK(r.bleu_mean == Catch::Approx(mean));
  const double sd = std::sqrt((std::pow(r.bleu_runs[0] - mean, 2) +
                               std::pow(r.bleu_runs[1] - mean, 2)) /
                              1.0);  // n - 1 = 1
  CHECK(r.bleu_std == Catch::Approx(sd));
  CHECK(r.has_ensemble);
  CHECK(r.bleu_ensemble == Catch::Approx(100.0).margin(1e-9));

  auto single = aggregate_runs({run1}, nullptr, refs);
  CHECK_FALSE(single.has_std);
  CHECK_FALSE(single.has_ensemble);
  CHECK_THROWS(aggregate_runs({}, nullptr, refs));
}

TEST_CASE("reports label the METEOR surrogate honestly") {
  const TokenCorpus refs{toks("a b")};
  auto r = aggregate_runs({refs, refs}, &refs, refs);
  const std::string row = render_report_row("baseline", r);
  CHECK(row.find("METEOR-x (exact-match surrogate)") != std::string::npos);
  CHECK(row.find("+-") != std::string::npos);
  CHECK(row.find("/") != std::string::npos);

  nlohmann::json j = r;
  CHECK(j.at("metric_note").get<std::string>().find("surrogate") !=
        std::string::npos);
  CHECK(j.at("bleu").contains("ensemble"));
  CHECK(j.at("meteor_x").contains("std"));
}
