#include "doctest.h"

#include "lowsup/decode.hpp"
#include "lowsup/eval.hpp"
#include "lowsup/toy_corpus.hpp"

#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

using namespace lowsup;
namespace fs = std::filesystem;
using nlohmann::json;

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

ToyCorpusSpec small_spec() {
  ToyCorpusSpec s;
  s.read_utterances = 6;
  s.transcribed_cs_utterances = 4;
  s.untranscribed_cs_utterances = 5;
  s.test_cs_utterances = 3;
  s.read_speakers = 2;
  s.transcribed_cs_speakers = 2;
  s.untranscribed_cs_speakers = 2;
  s.test_cs_speakers = 1;
  s.seed = 11;
  return s;
}

// Goertzel power of x[begin, end) at frequency f.
double tone_power(const std::vector<double>& x, std::size_t begin, std::size_t end, double f, double sr) {
  const double w = 2.0 * std::numbers::pi * f / sr, c = 2.0 * std::cos(w);
  double s1 = 0.0, s2 = 0.0;
  for (std::size_t i = begin; i < end; ++i) {
    double s0 = x[i] + c * s1 - s2;
    s2 = s1;
    s1 = s0;
  }
  return s1 * s1 + s2 * s2 - c * s1 * s2;
}

// Reads letters back from a clean nominal rendering using the known segment layout.
std::string invert_clean(const ToyCorpusSpec& spec, const Audio& a, const std::string& text) {
  const auto letters = spec.letters();
  const double sr = spec.sample_rate;
  auto n = [&](double s) { return static_cast<std::size_t>(std::lround(s * sr)); };
  std::size_t pos = n(spec.edge_seconds);
  std::string out;
  for (char ch : text) {
    if (ch == ' ') {
      pos += n(spec.space_seconds);
      out += ' ';
      continue;
    }
    const std::size_t len = n(spec.letter_seconds);
    std::size_t best = 0;
    double best_p = -1.0;
    for (std::size_t k = 0; k < letters.size(); ++k) {
      double f = spec.base_hz * std::pow(spec.letter_ratio, static_cast<double>(k));
      double p = tone_power(a.samples, pos, pos + len, f, sr);
      if (p > best_p) {
        best_p = p;
        best = k;
      }
    }
    out += letters[best];
    pos += len;
  }
  return out;
}

std::string dir_digest(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root));
  std::sort(files.begin(), files.end());
  std::string acc;
  for (const auto& f : files) acc += f.string() + ":" + hex64(fnv1a64(read_file((root / f).string()))) + "\n";
  return acc;
}

}  // namespace

TEST_CASE("zero-noise spec with 10 utterances gives clean tones and a 10-row manifest") {
  TempDir dir("lowsup_toy_clean");
  ToyCorpusSpec s;
  s.read_utterances = 10;
  s.read_speakers = 3;
  s.transcribed_cs_utterances = s.untranscribed_cs_utterances = s.test_cs_utterances = 0;
  s.speaker_pitch_spread = s.speaker_rate_spread = 0.0;
  auto c = make_toy_corpus(s, dir.path.string());
  REQUIRE(c.read.size() == 10);
  CHECK(c.transcribed_cs.empty());
  for (const auto& u : c.read.utterances) {
    REQUIRE(u.text);
    Audio a = read_wav((dir.path / u.audio_path).string());
    CHECK(std::abs(a.duration() - u.duration) < 1e-9);
    // Edges are exact silence when no noise is added.
    CHECK(a.samples.front() == 0.0);
    CHECK(a.samples.back() == 0.0);
    CHECK(invert_clean(s, a, *u.text) == *u.text);
  }
}

TEST_CASE("every letter of the vocabulary has a distinct signature at clean SNR") {
  ToyCorpusSpec s;
  std::string all;
  for (const auto& l : s.letters()) all += l;
  Audio a = render_toy_utterance(s, all, 1.0, 1.0, std::nullopt, 0);
  CHECK(invert_clean(s, a, all) == all);
}

TEST_CASE("same spec and seed twice gives a byte-identical corpus") {
  TempDir a("lowsup_toy_a"), b("lowsup_toy_b");
  make_toy_corpus(small_spec(), a.path.string());
  make_toy_corpus(small_spec(), b.path.string());
  CHECK(dir_digest(a.path) == dir_digest(b.path));
  ToyCorpusSpec other = small_spec();
  other.seed = 12;
  TempDir c("lowsup_toy_c");
  make_toy_corpus(other, c.path.string());
  CHECK(dir_digest(a.path) != dir_digest(c.path));
}

TEST_CASE("splits, speakers and the sealed answers are consistent") {
  TempDir dir("lowsup_toy_splits");
  auto c = make_toy_corpus(small_spec(), dir.path.string());
  CHECK(c.read.size() == 6);
  CHECK(c.transcribed_cs.size() == 4);
  CHECK(c.untranscribed_cs.size() == 5);
  CHECK(c.test_cs.size() == 3);
  for (const auto& u : c.untranscribed_cs.utterances) CHECK_FALSE(u.text.has_value());
  for (const auto& u : c.read.utterances) CHECK(u.domain == Domain::read);
  for (const auto& u : c.transcribed_cs.utterances) CHECK(u.domain == Domain::cs);

  std::set<std::string> read_spk, cs_spk;
  for (const auto& u : c.read.utterances) read_spk.insert(u.speaker_id);
  for (const Manifest* m : {&c.transcribed_cs, &c.untranscribed_cs, &c.test_cs})
    for (const auto& u : m->utterances) cs_spk.insert(u.speaker_id);
  for (const auto& s : read_spk) CHECK_FALSE(cs_spk.count(s));

  auto answers = load_answers(dir / ToyCorpus::kAnswers);
  CHECK(answers.size() == 18);
  std::map<std::string, std::string> refs, hyps;
  for (const auto& u : c.transcribed_cs.utterances) {
    refs[u.utt_id] = *u.text;
    hyps[u.utt_id] = answers.at(u.utt_id);
  }
  CHECK(word_error_rate(refs, hyps).error_rate == 0.0);

  // The oracle hypotheses cover exactly the untranscribed split.
  auto oracle = parse_hypotheses_tsv(read_file(dir / ToyCorpus::kOracleHypotheses));
  REQUIRE(oracle.size() == c.untranscribed_cs.size());
  for (std::size_t i = 0; i < oracle.size(); ++i) {
    CHECK(oracle[i].utt_id == c.untranscribed_cs.utterances[i].utt_id);
    CHECK(oracle[i].text == answers.at(oracle[i].utt_id));
  }
}

TEST_CASE("cs renderings are noisy and speed perturbed") {
  ToyCorpusSpec s;
  Audio clean = render_toy_utterance(s, "ka lo", 1.0, 1.0, std::nullopt, 1);
  Audio slow = render_toy_utterance(s, "ka lo", 1.0, 1.25, std::nullopt, 1);
  CHECK(std::abs(slow.duration() - 1.25 * clean.duration()) < 2.0 / s.sample_rate * 5);
  Audio noisy = render_toy_utterance(s, "ka lo", 1.0, 1.0, 0.0, 1);
  CHECK(noisy.samples.front() != 0.0);
  double peak = 0.0;
  for (double v : noisy.samples) peak = std::max(peak, std::abs(v));
  CHECK(peak == doctest::Approx(0.5));
}

TEST_CASE("spec validation and JSON round trip") {
  ToyCorpusSpec s = small_spec();
  s.cs_snr_db.reset();
  auto back = ToyCorpusSpec::from_json(s.to_json());
  CHECK(back.to_json() == s.to_json());
  CHECK_THROWS_AS(ToyCorpusSpec::from_json(json{{"wrods", json::array()}}), ValidationError);
  CHECK_THROWS_AS(ToyCorpusSpec::from_json(json{{"words", {"a b"}}}), ValidationError);
  CHECK_THROWS_AS(ToyCorpusSpec::from_json(json{{"base_hz", 4000.0}}), ValidationError);
  CHECK_THROWS_AS(ToyCorpusSpec::from_json(json{{"min_words", 3}, {"max_words", 2}}), ValidationError);
  CHECK_THROWS_AS(render_toy_utterance(s, "xyz", 1.0, 1.0, std::nullopt, 0), ValidationError);
}
