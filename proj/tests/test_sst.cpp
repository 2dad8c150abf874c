#include "doctest.h"

#include "lowsup/eval.hpp"
#include "lowsup/sst.hpp"
#include "lowsup/wav.hpp"

#include <filesystem>
#include <random>

using namespace lowsup;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

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

// Noise waveforms with transcripts drawn from {a, b}.
Manifest noise_manifest(const TempDir& dir, const std::string& prefix, int n, Role role, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, 0.1);
  Manifest m;
  m.role = role;
  const char* texts[] = {"a", "ab", "b a", "ba"};
  for (int i = 0; i < n; ++i) {
    Audio a;
    a.samples.resize(3200 + 800 * static_cast<std::size_t>(i % 3));
    for (auto& s : a.samples) s = noise(rng);
    std::string id = prefix + std::to_string(i);
    write_wav(dir / (id + ".wav"), a);
    Utterance u{id, dir / (id + ".wav"), a.duration(), prefix + "spk", Domain::cs, std::string(texts[i % 4]), 16000};
    if (role == Role::untranscribed_cs) u.text.reset();
    m.utterances.push_back(u);
  }
  return m;
}

PseudoLabelSet synthetic_set(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> conf(0.0, 1.0);
  PseudoLabelSet s;
  s.report.input = static_cast<std::size_t>(n);
  for (int i = 0; i < n; ++i) {
    std::string id = "p" + std::to_string(i);
    s.entries.push_back({id, i % 7 == 0 ? "" : "a b", conf(rng), -1.0});
    s.source.utterances.push_back({id, id + ".wav", 1.0, "s", Domain::cs, std::nullopt, 16000});
  }
  s.report.kept = s.entries.size();
  return s;
}

std::size_t dropped_total(const FilterReport& r) {
  std::size_t n = 0;
  for (const auto& [k, v] : r.dropped) n += v;
  return n;
}

}  // namespace

TEST_CASE("vacuous filter is the identity") {
  std::mt19937_64 rng(1);
  auto s = synthetic_set(30, rng);
  FilterPolicy p;
  p.drop_empty = false;
  p.min_confidence = 0.0;
  p.max_char_per_second = 0.0;
  auto f = filter_pseudolabels(s, p);
  REQUIRE(f.entries.size() == s.entries.size());
  for (std::size_t i = 0; i < s.entries.size(); ++i) CHECK(f.entries[i].utt_id == s.entries[i].utt_id);
  CHECK(f.source.size() == s.source.size());
}

TEST_CASE("empty hypotheses are dropped with a reason") {
  PseudoLabelSet s;
  s.entries = {{"x", "", 0.9, 0.0}, {"y", "a", 0.9, 0.0}};
  s.source.utterances = {{"x", "x.wav", 1.0, "s", Domain::cs, std::nullopt, 16000},
                         {"y", "y.wav", 1.0, "s", Domain::cs, std::nullopt, 16000}};
  s.report.input = s.report.kept = 2;
  auto f = filter_pseudolabels(s, FilterPolicy{});
  REQUIRE(f.entries.size() == 1);
  CHECK(f.entries[0].utt_id == "y");
  CHECK(f.report.dropped.at("empty") == 1);
}

TEST_CASE("confidence threshold matches a direct recount") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    auto s = synthetic_set(100, rng);
    FilterPolicy p;
    p.drop_empty = false;
    p.min_confidence = 0.5;
    std::size_t expect = 0;
    for (const auto& e : s.entries) expect += e.confidence >= 0.5;
    auto f = filter_pseudolabels(s, p);
    CHECK(f.entries.size() == expect);
    CHECK(f.report.kept + dropped_total(f.report) == f.report.input);
    // Output is a subset of the input and keeps its order.
    std::size_t j = 0;
    for (const auto& e : f.entries) {
      while (j < s.entries.size() && s.entries[j].utt_id != e.utt_id) ++j;
      CHECK(j < s.entries.size());
    }
  }
}

TEST_CASE("speaking-rate cap") {
  PseudoLabelSet s;
  s.entries = {{"x", std::string(50, 'a'), 0.9, 0.0}, {"y", "aaaa", 0.9, 0.0}};
  s.source.utterances = {{"x", "x.wav", 1.0, "s", Domain::cs, std::nullopt, 16000},
                         {"y", "y.wav", 1.0, "s", Domain::cs, std::nullopt, 16000}};
  s.report.input = s.report.kept = 2;
  auto f = filter_pseudolabels(s, FilterPolicy{});
  REQUIRE(f.entries.size() == 1);
  CHECK(f.report.dropped.at("too_fast") == 1);
  FilterPolicy bad;
  bad.min_confidence = 1.5;
  CHECK_THROWS_AS(filter_pseudolabels(s, bad), ValidationError);
}

TEST_CASE("external transcriber contract") {
  TempDir dir("lowsup_sst_ext");
  Manifest un = noise_manifest(dir, "u", 4, Role::untranscribed_cs, 3);
  std::map<std::string, std::string> gold;
  std::vector<HypothesisRow> rows;
  for (int i = 0; i < 4; ++i) {
    std::string t = i % 2 ? "a b" : "b";
    gold["u" + std::to_string(i)] = t;
    rows.push_back({"u" + std::to_string(i), t, 1.0, 0.0});
  }
  write_file(dir / "answers.tsv", hypotheses_tsv(rows));

  Transcriber tr;
  tr.kind = TranscriberKind::external_command;
  tr.work_dir = dir / "work";
  tr.command = "test -s {manifest} && cp " + (dir / "answers.tsv") + " {out}";
  auto set = pseudotranscribe(un, tr, "h1");
  CHECK(set.entries.size() == 4);
  CHECK(word_error_rate(gold, set.texts()).error_rate == 0.0);
  CHECK(set.provenance.config_hash == "h1");
  CHECK(set.provenance.transcriber.find("external_command") == 0);

  SUBCASE("stdout contract") {
    tr.command = "cat " + (dir / "answers.tsv");
    CHECK(pseudotranscribe(un, tr).entries.size() == 4);
  }
  SUBCASE("nonzero exit carries stderr") {
    tr.command = "echo model exploded >&2; exit 4";
    try {
      pseudotranscribe(un, tr);
      FAIL("expected a stage error");
    } catch (const StageError& e) {
      CHECK(std::string(e.what()).find("model exploded") != std::string::npos);
      CHECK(std::string(e.what()).find("status 4") != std::string::npos);
    }
  }
  SUBCASE("malformed output names its line") {
    write_file(dir / "bad.tsv", "utt_id\ttext\tconfidence\tscore_total\nu0\tb\t1\t0\nu1\tb\n");
    tr.command = "cp " + (dir / "bad.tsv") + " {out}";
    try {
      pseudotranscribe(un, tr);
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("line 3") != std::string::npos);
    }
  }
  SUBCASE("missing hypotheses are counted") {
    write_file(dir / "part.tsv", hypotheses_tsv({rows[0], rows[2]}));
    tr.command = "cp " + (dir / "part.tsv") + " {out}";
    auto p = pseudotranscribe(un, tr);
    CHECK(p.entries.size() == 2);
    CHECK(p.report.dropped.at("missing") == 2);
    CHECK(p.report.kept + dropped_total(p.report) == p.report.input);
  }
  SUBCASE("transcribed manifests are refused") {
    Manifest t = un;
    t.role = Role::transcribed_cs;
    CHECK_THROWS_AS(pseudotranscribe(t, tr), ValidationError);
  }
}

TEST_CASE("internal transcriber and persistence") {
  TempDir dir("lowsup_sst_int");
  Manifest un = noise_manifest(dir, "u", 5, Role::untranscribed_cs, 4);
  AsrModel m(micro(), Vocabulary({" ", "a", "b"}), 7);
  Lexicon lex;
  lex.entries = {{"a", {"a"}}, {"b", {"b"}}, {"ab", {"a", "b"}}};
  NgramLm lm = train_ngram({{"a", "b"}, {"ab"}}, NgramOptions{});
  Transcriber tr;
  tr.model = &m;
  tr.resources.lexicon = &lex;
  tr.resources.word_lm = &lm;
  auto s1 = pseudotranscribe(un, tr, "x");
  auto s2 = pseudotranscribe(un, tr, "x");
  CHECK(hypotheses_tsv(s1.entries) == hypotheses_tsv(s2.entries));
  CHECK(s1.report.kept + dropped_total(s1.report) == 5);
  for (const auto& e : s1.entries) {
    CHECK(e.confidence >= 0.0);
    CHECK(e.confidence <= 1.0);
  }
  tr.kind = TranscriberKind::internal_joint;
  tr.decode.max_length = 4;
  auto s3 = pseudotranscribe(un, tr);
  CHECK(s3.entries.size() == 5);

  auto f = filter_pseudolabels(s3, FilterPolicy{});
  save_pseudolabels(f, dir / "pseudo.tsv");
  auto back = load_pseudolabels(dir / "pseudo.tsv");
  CHECK(hypotheses_tsv(back.entries) == hypotheses_tsv(f.entries));
  CHECK(back.report.kept == f.report.kept);
  CHECK(back.report.dropped == f.report.dropped);
  CHECK(serialize_manifest(back.source) == serialize_manifest(f.source));
  CHECK(back.provenance.transcriber == f.provenance.transcriber);
}

TEST_CASE("SST training degenerate cases and leakage guard") {
  TempDir dir("lowsup_sst_train");
  Manifest gold = noise_manifest(dir, "g", 6, Role::transcribed_cs, 5);
  Manifest un = noise_manifest(dir, "u", 6, Role::untranscribed_cs, 6);
  AsrModel m(micro(), Vocabulary({" ", "a", "b"}), 8);
  FeatureCache cache(m.fbank());
  Schedule s;
  s.epochs = 2;
  s.batch_utterances = 3;
  s.seed = 11;
  s.warmup_steps = 2;

  auto gold_ex = manifest_examples(m, gold, cache).examples;
  REQUIRE(gold_ex.size() == 6);
  auto plain = train_supervised(m, gold_ex, {}, s);

  PseudoLabelSet empty;
  auto r0 = train_sst(m, gold, empty, {}, s, SstOptions{}, cache);
  CHECK(to_jsonl(r0.log) == to_jsonl(plain.log));
  CHECK(r0.model.hash() == plain.model.hash());
  REQUIRE_FALSE(r0.model.provenance().empty());
  CHECK(r0.model.provenance().back().stage == "sst");
  CHECK(r0.model.provenance().back().parent_hash == m.hash());

  PseudoLabelSet pseudo;
  for (const auto& u : un.utterances) {
    pseudo.entries.push_back({u.utt_id, "a", 1.0, 0.0});
    pseudo.source.utterances.push_back(u);
  }
  SstOptions zero;
  zero.pseudo_weight = 0.0;
  CHECK(train_sst(m, gold, pseudo, {}, s, zero, cache).model.hash() == plain.model.hash());

  auto mixed = train_sst(m, gold, pseudo, {}, s, SstOptions{}, cache);
  CHECK(mixed.model.hash() != plain.model.hash());
  bool saw_pseudo = false;
  for (const auto& e : mixed.log) saw_pseudo = saw_pseudo || std::isfinite(e.joint_pseudo);
  CHECK(saw_pseudo);

  PseudoLabelSet leak = pseudo;
  leak.entries.push_back({"g0", "a", 1.0, 0.0});
  leak.source.utterances.push_back(gold.utterances[0]);
  CHECK_THROWS_AS(train_sst(m, gold, leak, {}, s, SstOptions{}, cache), ValidationError);

  auto skipped = final_finetune(mixed.model, Manifest{}, {}, s, cache);
  CHECK(skipped.skipped);
  CHECK(skipped.train.model.hash() == mixed.model.hash());
  auto ff = final_finetune(mixed.model, gold, {}, s, cache, "ffh");
  CHECK_FALSE(ff.skipped);
  REQUIRE(ff.train.model.provenance().size() == 2);
  CHECK(ff.train.model.provenance()[0].stage == "sst");
  CHECK(ff.train.model.provenance()[1].stage == "final_finetune");
  CHECK(ff.train.model.provenance()[1].config_hash == "ffh");
}
