#include "doctest.h"

#include "lowsup/decode.hpp"
#include "lowsup/wav.hpp"
#include "oracles.hpp"

#include <cmath>
#include <filesystem>
#include <functional>
#include <numbers>
#include <random>

using namespace lowsup;

namespace {

Mat one_hot_log(const std::vector<int>& path, int v) {
  Mat m = Mat::Constant(static_cast<Eigen::Index>(path.size()), v, std::log(1e-3));
  for (std::size_t t = 0; t < path.size(); ++t) m(static_cast<Eigen::Index>(t), path[t]) = std::log(1.0 - 1e-3 * (v - 1));
  return m;
}

ModelConfig micro() {
  ModelConfig c;
  c.input_dim = 6;
  c.enc_layers = 1;
  c.enc_heads = 2;
  c.enc_dim = 8;
  c.enc_ffn = 12;
  c.conv_kernel = 3;
  c.dec_layers = 1;
  c.dropout = 0.0;
  return c;
}

Mat randn(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Scales every parameter so the micro model produces peaky, varied distributions.
void sharpen(AsrModel& m, double s) {
  for (auto& p : m.params())
    if (p.name.find(".out.") != std::string::npos || p.name.rfind("ctc.", 0) == 0) p.value *= s;
}

// All word sequences over `words` joined by single spaces with at most `max_chars` characters.
void word_sequences(const std::vector<std::string>& words, std::size_t max_chars, std::vector<std::string> cur,
                    std::size_t used, std::vector<std::vector<std::string>>& out) {
  out.push_back(cur);
  for (const auto& w : words) {
    std::size_t need = used + (cur.empty() ? 0 : 1) + w.size();
    if (need > max_chars) continue;
    auto next = cur;
    next.push_back(w);
    word_sequences(words, max_chars, next, need, out);
  }
}

std::vector<int> ids_of(const Vocabulary& v, const std::string& s) { return v.encode(s); }

}  // namespace

TEST_CASE("greedy collapse rule") {
  Vocabulary v({"a", "b"});
  const int a = 3, b = 4, blank = 0;
  CHECK(ctc_greedy(one_hot_log({blank, blank, blank}, 5), v).text.empty());
  CHECK(ctc_greedy(one_hot_log({a, a, blank, a, b}, 5), v).text == "aab");
  CHECK(ctc_greedy(one_hot_log({a, blank, a}, 5), v).text == "aa");
}

TEST_CASE("greedy inverts every alignment of a target") {
  Vocabulary v({"a", "b"});
  for (int t = 1; t <= 5; ++t) {
    oracle::for_each_path(t, 3, [&](const std::vector<int>& raw) {
      std::vector<int> path;
      for (int s : raw) path.push_back(s == 0 ? 0 : s + 2);  // {blank, a, b}
      auto y = oracle::ctc_collapse(path);
      CHECK(ctc_greedy(one_hot_log(path, 5), v).labels == y);
    });
  }
}

TEST_CASE("prefix beam with lexicon and LM matches exhaustive search") {
  Vocabulary v({" ", "a", "b"});  // ids: space 3, a 4, b 5
  std::mt19937_64 rng(3);
  int instances = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const int t_len = 3 + trial % 3;
    Mat lp = oracle::random_log_probs(t_len, 6, rng, 1.5);
    // Only blank, space and the two letters are valid outputs.
    for (int t = 0; t < t_len; ++t) {
      lp(t, 1) = lp(t, 2) = -50.0;
      double lse = std::log(lp.row(t).array().exp().sum());
      lp.row(t).array() -= lse;
    }
    std::vector<std::string> words = trial % 2 ? std::vector<std::string>{"a", "ab"}
                                               : std::vector<std::string>{"b", "ab", "ba"};
    Lexicon lex;
    for (auto& w : words) lex.entries[w] = utf8_chars(w);
    NgramOptions lo;
    lo.order = 2;
    std::vector<std::vector<std::string>> text{{words[0], words[1]}, {words[1]}, {words.back(), words[0], words[0]}};
    NgramLm lm = train_ngram(text, lo);
    DecodeConfig cfg;
    cfg.mode = DecodeMode::ctc_beam_lm;
    cfg.beam_size = 10000;
    cfg.lm_weight = 0.3 * (trial % 4);
    cfg.length_penalty = trial % 3 == 0 ? 0.5 : 0.0;

    std::vector<std::vector<std::string>> seqs;
    word_sequences(words, static_cast<std::size_t>(t_len), {}, 0, seqs);
    REQUIRE(seqs.size() <= 200);
    double best = -1e300;
    std::string best_text;
    for (auto& s : seqs) {
      std::string t = join(s, " ");
      double ac = -oracle::ctc_brute_force(lp, ids_of(v, t));
      if (!std::isfinite(ac)) continue;
      double lmv = std::numbers::ln10 * lm.score(s).log10_prob;
      double tot = ac + cfg.lm_weight * lmv + cfg.length_penalty * static_cast<double>(s.size());
      if (tot > best) {
        best = tot;
        best_text = t;
      }
    }
    auto hyps = ctc_beam_lm(lp, v, lex, &lm, cfg);
    REQUIRE_FALSE(hyps.empty());
    CHECK(hyps[0].text == best_text);
    CHECK(hyps[0].score_total == doctest::Approx(best).epsilon(1e-9));
    for (const auto& h : hyps) {
      CHECK(std::abs(h.score_total - (h.score_acoustic + cfg.lm_weight * h.score_lm + cfg.length_penalty * h.words)) <
            1e-9);
      CHECK(h.confidence >= 0.0);
      CHECK(h.confidence <= 1.0);
    }
    ++instances;
  }
  CHECK(instances == 60);
}

TEST_CASE("zero LM weight ranks like the acoustic-only prefix beam") {
  Vocabulary v({" ", "a", "b"});
  std::mt19937_64 rng(5);
  Mat lp = oracle::random_log_probs(4, 6, rng, 1.0);
  Lexicon lex;
  for (std::string w : {"a", "b", "aa", "ab", "ba", "bb"}) lex.entries[w] = utf8_chars(w);
  NgramLm lm = train_ngram({{"a", "b"}, {"ab"}}, NgramOptions{});
  DecodeConfig cfg;
  cfg.mode = DecodeMode::ctc_beam_lm;
  cfg.beam_size = 10000;
  cfg.lm_weight = 0.0;
  auto with_lex = ctc_beam_lm(lp, v, lex, &lm, cfg);
  auto plain = ctc_prefix_beam(lp, v, 10000);
  std::vector<std::string> expect;
  for (const auto& h : plain) {
    // Lexicon-composable: no leading, trailing or doubled spaces, words of at most 2 letters.
    bool ok = true;
    if (!h.labels.empty() && (h.labels.front() == 3 || h.labels.back() == 3)) ok = false;
    int run = 0;
    for (std::size_t i = 0; i < h.labels.size(); ++i) {
      if (h.labels[i] == 3) {
        if (i && h.labels[i - 1] == 3) ok = false;
        run = 0;
      } else if (++run > 2) {
        ok = false;
      }
    }
    if (ok && (h.labels.empty() || lex.entries.count(split_ws(h.text).back()))) expect.push_back(h.text);
  }
  std::vector<std::string> got;
  for (const auto& h : with_lex) got.push_back(h.text);
  CHECK(got == expect);
}

TEST_CASE("LM dominates under uniform acoustics") {
  Vocabulary v({" ", "a", "b"});
  Mat lp = Mat::Constant(4, 6, std::log(1.0 / 6.0));
  Lexicon lex;
  for (std::string w : {"a", "b", "ab", "ba"}) lex.entries[w] = utf8_chars(w);
  std::vector<std::vector<std::string>> text(20, {"ab"});
  text.push_back({"a"});
  text.push_back({"b", "a"});
  NgramLm lm = train_ngram(text, NgramOptions{});
  DecodeConfig cfg;
  cfg.mode = DecodeMode::ctc_beam_lm;
  cfg.lm_weight = 5.0;
  CHECK(ctc_beam_lm(lp, v, lex, &lm, cfg).front().text == "ab");
}

TEST_CASE("raising the LM weight never promotes the lowest-LM hypothesis") {
  Vocabulary v({" ", "a", "b"});
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    Mat lp = oracle::random_log_probs(5, 6, rng, 1.5);
    Lexicon lex;
    for (std::string w : {"a", "b", "ab"}) lex.entries[w] = utf8_chars(w);
    NgramLm lm = train_ngram({{"a", "b"}, {"ab", "ab"}, {"b"}}, NgramOptions{});
    DecodeConfig cfg;
    cfg.mode = DecodeMode::ctc_beam_lm;
    cfg.beam_size = 10000;
    cfg.lm_weight = 0.2;
    auto lo = ctc_beam_lm(lp, v, lex, &lm, cfg);
    cfg.lm_weight = 1.5;
    auto hi = ctc_beam_lm(lp, v, lex, &lm, cfg);
    std::size_t worst = 0;
    for (std::size_t i = 1; i < lo.size(); ++i)
      if (lo[i].score_lm < lo[worst].score_lm) worst = i;
    bool unique = true;
    for (std::size_t i = 0; i < lo.size(); ++i)
      if (i != worst && lo[i].score_lm == lo[worst].score_lm) unique = false;
    if (!unique) continue;
    std::size_t rank_hi = 0;
    for (std::size_t i = 0; i < hi.size(); ++i)
      if (hi[i].text == lo[worst].text) rank_hi = i;
    CHECK(rank_hi >= worst);
  }
}

TEST_CASE("prefix beam errors and collapse") {
  Vocabulary v({" ", "a", "b"});
  Mat lp = Mat::Constant(2, 6, std::log(1.0 / 6.0));
  DecodeConfig cfg;
  cfg.mode = DecodeMode::ctc_beam_lm;
  CHECK_THROWS_AS(ctc_beam_lm(lp, v, Lexicon{}, nullptr, cfg), ValidationError);
  Lexicon bad;
  bad.entries["z"] = {"z"};
  CHECK_THROWS_AS(ctc_beam_lm(lp, v, bad, nullptr, cfg), ValidationError);
  // A 3-letter word cannot be finished in 2 frames and the beam of 1 holds only a partial word.
  Lexicon lex;
  lex.entries["aba"] = {"a", "b", "a"};
  Mat peaky = one_hot_log({4, 5}, 6);
  cfg.beam_size = 1;
  auto h = ctc_beam_lm(peaky, v, lex, nullptr, cfg);
  CHECK(h.size() == 1);
  CHECK(h[0].search_failed);
  CHECK(h[0].text.empty());
}

TEST_CASE("CTC prefix probability sums continuations") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const int t_len = 3 + trial % 2;
    Mat lp = oracle::random_log_probs(t_len, 4, rng);
    std::vector<int> prefix{1 + trial % 3};
    // Brute force: probability mass of all paths whose collapse starts with the prefix.
    double mass = 0.0;
    oracle::for_each_path(t_len, 4, [&](const std::vector<int>& p) {
      auto y = oracle::ctc_collapse(p);
      if (y.size() < prefix.size() || !std::equal(prefix.begin(), prefix.end(), y.begin())) return;
      double pr = 1.0;
      for (int t = 0; t < t_len; ++t) pr *= std::exp(lp(t, p[static_cast<std::size_t>(t)]));
      mass += pr;
    });
    CHECK(ctc_prefix_log_prob(lp, prefix) == doctest::Approx(std::log(mass)).epsilon(1e-10));
  }
}

TEST_CASE("joint decoding matches exhaustive scoring on micro models") {
  std::mt19937_64 rng(9);
  int instances = 0;
  for (int trial = 0; trial < 12; ++trial) {
    AsrModel m(micro(), Vocabulary({"a", "b", "c"}), 100 + static_cast<std::uint64_t>(trial));
    sharpen(m, 3.0);
    Mat x = randn(13 + trial % 4, 6, rng);  // T' = 4
    DecodeConfig cfg;
    cfg.mode = DecodeMode::joint_attention;
    cfg.beam_size = 200;
    cfg.max_length = 3;
    cfg.ctc_weight_decode = (trial % 3) * 0.4;
    NgramLm lm = train_ngram({{"a", "b"}, {"c", "a", "a"}}, NgramOptions{});
    const NgramLm* lmp = trial % 2 ? &lm : nullptr;
    cfg.lm_weight = 0.5;

    Mat enc = forward_encoder(m, x);
    Mat lp = ctc_log_posteriors(m, enc);
    std::vector<std::vector<int>> space{{}};
    for (std::size_t i = 0; i < space.size(); ++i)
      if (space[i].size() < 3)
        for (int c = 3; c < 6; ++c) {
          auto y = space[i];
          y.push_back(c);
          space.push_back(y);
        }
    REQUIRE(space.size() == 40);
    double best = -1e300, best_raw = 0;
    std::vector<int> arg;
    for (const auto& y : space) {
      std::vector<int> in{Vocabulary::kSosEos};
      in.insert(in.end(), y.begin(), y.end());
      Mat dl = decoder_log_probs(m, enc, in);
      double att = 0;
      for (std::size_t k = 0; k <= y.size(); ++k) att += dl(static_cast<Eigen::Index>(k), k < y.size() ? y[k] : 1);
      double tot = (1 - cfg.ctc_weight_decode) * att;
      if (cfg.ctc_weight_decode > 0) tot += cfg.ctc_weight_decode * -oracle::ctc_brute_force(lp, y);
      if (lmp) {
        std::vector<std::string> toks;
        for (int c : y) toks.push_back(m.vocab().symbol(c));
        tot += cfg.lm_weight * std::numbers::ln10 * lm.score(toks).log10_prob;
      }
      if (!std::isfinite(tot)) continue;
      double norm = tot / static_cast<double>(y.size() + 1);
      if (norm > best) {
        best = norm;
        best_raw = tot;
        arg = y;
      }
    }
    auto hyps = joint_attention_decode(m, x, cfg, lmp);
    CHECK(hyps[0].labels == arg);
    CHECK(hyps[0].score_total == doctest::Approx(best_raw).epsilon(1e-9));
    for (const auto& h : hyps) {
      double parts = (1 - cfg.ctc_weight_decode) * h.score_attention + (lmp ? cfg.lm_weight * h.score_lm : 0.0);
      if (cfg.ctc_weight_decode > 0) parts += cfg.ctc_weight_decode * h.score_acoustic;
      CHECK(std::abs(h.score_total - parts) < 1e-9);
    }
    ++instances;
  }
  CHECK(instances == 12);
}

TEST_CASE("attention-only beam of one is the greedy decoder rollout") {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    AsrModel m(micro(), Vocabulary({"a", "b", "c"}), 200 + static_cast<std::uint64_t>(trial));
    sharpen(m, 2.0);
    Mat x = randn(30, 6, rng);
    DecodeConfig cfg;
    cfg.ctc_weight_decode = 0.0;
    cfg.beam_size = 1;
    cfg.max_length = 6;
    auto h = joint_attention_decode(m, x, cfg);
    Mat enc = forward_encoder(m, x);
    std::vector<int> y;
    while (true) {
      std::vector<int> in{Vocabulary::kSosEos};
      in.insert(in.end(), y.begin(), y.end());
      Mat dl = decoder_log_probs(m, enc, in);
      auto row = dl.row(static_cast<Eigen::Index>(y.size()));
      int bestc = -1;
      for (int c = 1; c < 6; ++c) {
        if (c == Vocabulary::kUnk || (c != 1 && y.size() == 6)) continue;
        if (bestc < 0 || row(c) > row(bestc)) bestc = c;
      }
      if (bestc == Vocabulary::kSosEos) break;
      y.push_back(bestc);
    }
    CHECK(h[0].labels == y);
  }
}

TEST_CASE("wider beams never lose the best raw score") {
  std::mt19937_64 rng(11);
  int violations = 0, checks = 0;
  for (int trial = 0; trial < 10; ++trial) {
    AsrModel m(micro(), Vocabulary({"a", "b", "c", "d"}), 300 + static_cast<std::uint64_t>(trial));
    sharpen(m, 2.0);
    Mat x = randn(24, 6, rng);
    double prev = -1e300;
    for (int b = 1; b <= 6; ++b) {
      DecodeConfig cfg;
      cfg.beam_size = b;
      cfg.max_length = 5;
      auto hyps = joint_attention_decode(m, x, cfg);
      double top = -1e300;
      for (const auto& h : hyps) top = std::max(top, h.score_total);
      if (top < prev - 1e-12) ++violations;
      ++checks;
      prev = top;
    }
  }
  MESSAGE(violations << " of " << checks << " beam increments lowered the best raw score");
  CHECK(violations == 0);
}

TEST_CASE("hypothesis files") {
  std::vector<HypothesisRow> rows{{"u1", "a b", 0.5, -1.25}, {"u2", "", 1.0, 0.0}};
  auto tsv = hypotheses_tsv(rows);
  CHECK(tsv.rfind("utt_id\ttext\tconfidence\tscore_total\n", 0) == 0);
  auto back = parse_hypotheses_tsv(tsv);
  REQUIRE(back.size() == 2);
  CHECK(back[0].text == "a b");
  CHECK(back[1].text.empty());
  try {
    parse_hypotheses_tsv("u1\ta\t0.5\t-1\nu2\tb\tnot-a-number\t0\n");
    FAIL("expected an error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_hypotheses_tsv("u1\ta\t1.5\t0\n"), ValidationError);
  CHECK(hypotheses_tsv({}) == "utt_id\ttext\tconfidence\tscore_total\n");
}

TEST_CASE("transcribe a manifest with a bad file") {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "lowsup_decode_test";
  fs::create_directories(dir);
  AsrModel m(micro(), Vocabulary({"a", "b"}), 5);
  Manifest man;
  man.role = Role::untranscribed_cs;
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(0.0, 0.1);
  for (int i = 0; i < 3; ++i) {
    Audio a;
    a.samples.resize(4000);
    for (auto& s : a.samples) s = n(rng);
    auto p = (dir / ("u" + std::to_string(i) + ".wav")).string();
    write_wav(p, a);
    man.utterances.push_back({"u" + std::to_string(i), p, 0.25, "s", Domain::cs, std::nullopt, 16000});
  }
  man.utterances[1].audio_path = (dir / "missing.wav").string();
  DecodeConfig cfg;
  cfg.max_length = 4;
  auto r = transcribe_manifest(m, man, cfg, {});
  CHECK(r.rows.size() == 2);
  REQUIRE(r.errors.size() == 1);
  CHECK(r.errors[0].utt_id == "u1");
  CHECK(r.errors[0].error_class == "audio");
  auto r2 = transcribe_manifest(m, man, cfg, {});
  CHECK(hypotheses_tsv(r.rows) == hypotheses_tsv(r2.rows));
  CHECK(transcribe_manifest(m, Manifest{}, cfg, {}).rows.empty());
  fs::remove_all(dir);
}
