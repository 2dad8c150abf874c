#include "doctest.h"

#include "lowsup/corpus.hpp"

#include <filesystem>
#include <map>
#include <set>

using namespace lowsup;

namespace {

Utterance utt(const std::string& id, double dur, const std::string& spk, Domain d = Domain::read,
              std::optional<std::string> text = std::string("a b")) {
  Utterance u;
  u.utt_id = id;
  u.audio_path = id + ".wav";
  u.duration = dur;
  u.speaker_id = spk;
  u.domain = d;
  u.text = std::move(text);
  return u;
}

Manifest uniform(int n, double dur, Domain d = Domain::read, const std::string& prefix = "u") {
  Manifest m;
  m.role = Role::mixed;
  for (int i = 0; i < n; ++i) m.utterances.push_back(utt(prefix + std::to_string(i), dur, "s" + std::to_string(i % 3), d));
  return m;
}

std::string line(const std::string& id, const std::string& extra = "") {
  return R"({"utt_id":")" + id + R"(","audio":"x.wav","duration_s":1.5,"speaker":"s","domain":"cs","sample_rate":16000)" +
         extra + "}\n";
}

}  // namespace

TEST_CASE("load_manifest preserves file order") {
  auto m = parse_manifest(line("u1") + line("u2") + line("u3"));
  REQUIRE(m.size() == 3);
  CHECK(m.utterances[0].utt_id == "u1");
  CHECK(m.utterances[2].utt_id == "u3");
  CHECK_FALSE(m.utterances[0].text.has_value());
}

TEST_CASE("load_manifest validation errors name the offending line") {
  SUBCASE("duplicate id") {
    try {
      parse_manifest(line("u1") + line("u1"));
      FAIL("expected error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
      CHECK(std::string(e.what()).find("duplicate") != std::string::npos);
    }
  }
  SUBCASE("negative duration") {
    std::string bad = R"({"utt_id":"u1","audio":"x.wav","duration_s":-1.0,"speaker":"s","domain":"cs","sample_rate":16000})";
    CHECK_THROWS_AS(parse_manifest(bad), ValidationError);
  }
  SUBCASE("malformed json") { CHECK_THROWS_AS(parse_manifest("{not json"), ValidationError); }
  SUBCASE("transcript on untranscribed role") {
    try {
      parse_manifest(line("u1") + line("u2", R"(,"text":"hi")"), Role::untranscribed_cs);
      FAIL("expected error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
  }
  SUBCASE("missing transcript on transcribed role") {
    CHECK_THROWS_AS(parse_manifest(line("u1"), Role::transcribed_cs), ValidationError);
  }
}

TEST_CASE("text normalization lowercases and strips punctuation except apostrophes") {
  CHECK(normalize_text("Hello, World! It's  me.") == "hello world it's me");
  NormalizerConfig keep;
  keep.lowercase = false;
  keep.strip_punctuation = false;
  CHECK(normalize_text("A,b", keep) == "A,b");
  NormalizerConfig closed;
  closed.charset = {"a", "b"};
  CHECK_THROWS_AS(parse_manifest(line("u1", R"(,"text":"abc")"), Role::mixed, closed), ValidationError);
  CHECK_NOTHROW(parse_manifest(line("u1", R"(,"text":"ab ba")"), Role::mixed, closed));
}

TEST_CASE("write/load round trip") {
  Manifest m = uniform(4, 2.5);
  m.utterances[1].text.reset();
  m.utterances[2].weight = 2.0;
  auto back = parse_manifest(serialize_manifest(m));
  REQUIRE(back.size() == m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    CHECK(back.utterances[i].utt_id == m.utterances[i].utt_id);
    CHECK(back.utterances[i].duration == m.utterances[i].duration);
    CHECK(back.utterances[i].text == m.utterances[i].text);
    CHECK(back.utterances[i].weight == m.utterances[i].weight);
    CHECK(back.utterances[i].speaker_id == m.utterances[i].speaker_id);
  }
  CHECK(serialize_manifest(back) == serialize_manifest(m));
}

TEST_CASE("summarize") {
  CHECK(summarize(Manifest{}).get("read") == 0.0);
  CHECK(summarize(Manifest{}).to_tsv().find("read\t0.0") != std::string::npos);
  auto s = summarize(uniform(6, 600.0));
  CHECK(s.get("read") == doctest::Approx(1.0));
  CHECK(s.to_tsv().rfind("read\t1.0\n", 0) == 0);
  Manifest cs;
  cs.utterances.push_back(utt("c1", 1800, "x", Domain::cs));
  cs.utterances.push_back(utt("c2", 1800, "x", Domain::cs, std::nullopt));
  cs.utterances.push_back(utt("b1", 360, "x", Domain::bn, std::nullopt));
  auto t = summarize(cs);
  CHECK(t.get("transcribed_cs") == doctest::Approx(0.5));
  CHECK(t.get("untranscribed_cs") == doctest::Approx(0.5));
  CHECK(t.get("untranscribed_bn") == doctest::Approx(0.1));
}

TEST_CASE("summaries add under mixing") {
  Manifest a = uniform(5, 700.0, Domain::read, "a");
  Manifest b = uniform(3, 1234.5, Domain::cs, "b");
  auto sa = summarize(a), sb = summarize(b), sm = summarize(mix_manifests({{a, 1.0}, {b, 1.0}}));
  for (auto role : DurationSummary::kRoles) CHECK(std::abs(sm.get(role) - sa.get(role) - sb.get(role)) < 1e-9);
}

TEST_CASE("select_subset random_utterance with uniform durations") {
  auto m = uniform(6, 600.0);
  auto s = select_subset(m, {1800.0, SubsetStrategy::random_utterance, 7});
  CHECK(s.size() == 3);
  auto again = select_subset(m, {1800.0, SubsetStrategy::random_utterance, 7});
  CHECK(serialize_manifest(s) == serialize_manifest(again));
}

TEST_CASE("select_subset by_speaker keeps whole speakers") {
  Manifest m;
  for (int i = 0; i < 3; ++i) m.utterances.push_back(utt("a" + std::to_string(i), 600, "A"));
  for (int i = 0; i < 3; ++i) m.utterances.push_back(utt("b" + std::to_string(i), 600, "B"));
  auto s = select_subset(m, {1800.0, SubsetStrategy::by_speaker, 3});
  CHECK(s.size() == 3);
  CHECK(s.speakers().size() == 1);
}

TEST_CASE("select_subset properties over seeds") {
  Manifest m;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> dur(1.0, 9.0);
  for (int i = 0; i < 60; ++i) m.utterances.push_back(utt("u" + std::to_string(i), dur(rng), "s" + std::to_string(i % 12)));
  double max_utt = 0;
  for (auto& u : m.utterances) max_utt = std::max(max_utt, u.duration);
  std::map<std::string, double> spk_total;
  for (auto& u : m.utterances) spk_total[u.speaker_id] += u.duration;
  double max_spk = 0;
  for (auto& [k, v] : spk_total) max_spk = std::max(max_spk, v);

  std::set<std::string> distinct;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto r = select_subset(m, {100.0, SubsetStrategy::random_utterance, seed});
    CHECK(r.total_duration() >= 100.0);
    CHECK(r.total_duration() < 100.0 + max_utt);
    distinct.insert(serialize_manifest(r));

    auto b = select_subset(m, {100.0, SubsetStrategy::by_speaker, seed});
    CHECK(b.total_duration() >= 100.0);
    CHECK(b.total_duration() < 100.0 + max_spk);
    std::map<std::string, int> count;
    for (auto& u : b.utterances) ++count[u.speaker_id];
    for (auto& [spk, n] : count) {
      int full = 0;
      for (auto& u : m.utterances) full += u.speaker_id == spk;
      CHECK(n == full);
    }
  }
  CHECK(distinct.size() > 15);
}

TEST_CASE("select_subset rejects insufficient data") {
  auto m = uniform(2, 10.0);
  CHECK_THROWS_AS(select_subset(m, {21.0, SubsetStrategy::random_utterance, 0}), InsufficientDataError);
}

TEST_CASE("mix_manifests") {
  auto a = uniform(3, 1.0, Domain::read, "a");
  auto b = uniform(4, 1.0, Domain::cs, "b");
  auto single = mix_manifests({{a, 1.0}});
  CHECK(serialize_manifest(single) == serialize_manifest(a));
  auto both = mix_manifests({{a, 1.0}, {b, 1.0}});
  CHECK(both.size() == 7);
  CHECK_THROWS_AS(mix_manifests({{a, 1.0}, {a, 1.0}}), ValidationError);
}

TEST_CASE("weight 2 doubles presentations per epoch") {
  auto part = uniform(10, 1.0);
  auto m = mix_manifests({{part, 2.0}});
  long total = 0;
  for (std::uint64_t e = 0; e < 1000; ++e) total += static_cast<long>(epoch_indices(m, e).size());
  double per_epoch = total / 1000.0;
  CHECK(per_epoch >= 20.0 * 0.95);
  CHECK(per_epoch <= 20.0 * 1.05);

  auto frac = mix_manifests({{part, 0.5}});
  total = 0;
  for (std::uint64_t e = 0; e < 1000; ++e) total += static_cast<long>(epoch_indices(frac, e).size());
  CHECK(total / 1000.0 == doctest::Approx(5.0).epsilon(0.05));
}
