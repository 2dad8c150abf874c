#include "lowsup/toy_corpus.hpp"

#include "lowsup/decode.hpp"
#include "lowsup/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

namespace lowsup {

namespace fs = std::filesystem;
using nlohmann::json;

void ToyCorpusSpec::validate() const {
  if (words.empty()) throw ValidationError("toy corpus needs at least one word");
  for (const auto& w : words) {
    if (w.empty()) throw ValidationError("toy corpus word is empty");
    for (const auto& c : utf8_chars(w))
      if (c == " " || c == "\t") throw ValidationError("toy corpus word '" + w + "' contains whitespace");
  }
  if (min_words < 1 || max_words < min_words) throw ValidationError("toy corpus needs 1 <= min_words <= max_words");
  if (grammar_strength < 0.0 || grammar_strength > 1.0) throw ValidationError("grammar_strength must lie in [0, 1]");
  auto split_ok = [](int utts, int spk, const char* name) {
    if (utts < 0) throw ValidationError(std::string(name) + " utterance count is negative");
    if (utts > 0 && spk < 1) throw ValidationError(std::string(name) + " needs at least one speaker");
  };
  split_ok(read_utterances, read_speakers, "read");
  split_ok(transcribed_cs_utterances, transcribed_cs_speakers, "transcribed_cs");
  split_ok(untranscribed_cs_utterances, untranscribed_cs_speakers, "untranscribed_cs");
  split_ok(test_cs_utterances, test_cs_speakers, "test_cs");
  if (!(cs_speed_min > 0.0) || cs_speed_max < cs_speed_min) throw ValidationError("bad cs speed range");
  if (speaker_pitch_spread < 0.0 || speaker_pitch_spread >= 0.5 || speaker_rate_spread < 0.0 ||
      speaker_rate_spread >= 0.5)
    throw ValidationError("speaker spreads must lie in [0, 0.5)");
  if (!(letter_seconds > 0.0) || space_seconds < 0.0 || edge_seconds < 0.0)
    throw ValidationError("toy corpus durations must be positive");
  if (!(base_hz > 0.0) || !(letter_ratio > 1.0)) throw ValidationError("base_hz must be positive and letter_ratio > 1");
  if (sample_rate < 8000) throw ValidationError("toy corpus sample rate below 8 kHz");
  const double top = base_hz * std::pow(letter_ratio, static_cast<double>(letters().size()) - 1.0) * 1.08 *
                     (1.0 + speaker_pitch_spread) * cs_speed_max;
  if (top >= 0.5 * sample_rate) throw ValidationError("highest letter frequency exceeds the Nyquist limit");
}

std::vector<std::string> ToyCorpusSpec::letters() const {
  std::set<std::string> s;
  for (const auto& w : words)
    for (const auto& c : utf8_chars(w)) s.insert(c);
  return {s.begin(), s.end()};
}

json ToyCorpusSpec::to_json() const {
  auto snr = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"words", words},
          {"min_words", min_words},
          {"max_words", max_words},
          {"grammar_strength", grammar_strength},
          {"read_utterances", read_utterances},
          {"transcribed_cs_utterances", transcribed_cs_utterances},
          {"untranscribed_cs_utterances", untranscribed_cs_utterances},
          {"test_cs_utterances", test_cs_utterances},
          {"read_speakers", read_speakers},
          {"transcribed_cs_speakers", transcribed_cs_speakers},
          {"untranscribed_cs_speakers", untranscribed_cs_speakers},
          {"test_cs_speakers", test_cs_speakers},
          {"read_snr_db", snr(read_snr_db)},
          {"cs_snr_db", snr(cs_snr_db)},
          {"cs_speed_min", cs_speed_min},
          {"cs_speed_max", cs_speed_max},
          {"speaker_pitch_spread", speaker_pitch_spread},
          {"speaker_rate_spread", speaker_rate_spread},
          {"letter_seconds", letter_seconds},
          {"space_seconds", space_seconds},
          {"edge_seconds", edge_seconds},
          {"base_hz", base_hz},
          {"letter_ratio", letter_ratio},
          {"sample_rate", sample_rate},
          {"seed", seed}};
}

ToyCorpusSpec ToyCorpusSpec::from_json(const json& j) {
  ToyCorpusSpec s;
  static const std::set<std::string> known = {
      "words", "min_words", "max_words", "grammar_strength", "read_utterances", "transcribed_cs_utterances",
      "untranscribed_cs_utterances", "test_cs_utterances", "read_speakers", "transcribed_cs_speakers",
      "untranscribed_cs_speakers", "test_cs_speakers", "read_snr_db", "cs_snr_db", "cs_speed_min", "cs_speed_max",
      "speaker_pitch_spread", "speaker_rate_spread", "letter_seconds", "space_seconds", "edge_seconds", "base_hz",
      "letter_ratio", "sample_rate", "seed"};
  if (!j.is_object()) throw ValidationError("toy corpus spec must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ValidationError("unknown toy corpus field '" + k + "'");
  try {
    auto get = [&](const char* k, auto& dst) {
      if (j.contains(k)) dst = j.at(k).get<std::decay_t<decltype(dst)>>();
    };
    auto snr = [&](const char* k, std::optional<double>& dst) {
      if (!j.contains(k)) return;
      if (j.at(k).is_null()) dst.reset();
      else dst = j.at(k).get<double>();
    };
    get("words", s.words);
    get("min_words", s.min_words);
    get("max_words", s.max_words);
    get("grammar_strength", s.grammar_strength);
    get("read_utterances", s.read_utterances);
    get("transcribed_cs_utterances", s.transcribed_cs_utterances);
    get("untranscribed_cs_utterances", s.untranscribed_cs_utterances);
    get("test_cs_utterances", s.test_cs_utterances);
    get("read_speakers", s.read_speakers);
    get("transcribed_cs_speakers", s.transcribed_cs_speakers);
    get("untranscribed_cs_speakers", s.untranscribed_cs_speakers);
    get("test_cs_speakers", s.test_cs_speakers);
    snr("read_snr_db", s.read_snr_db);
    snr("cs_snr_db", s.cs_snr_db);
    get("cs_speed_min", s.cs_speed_min);
    get("cs_speed_max", s.cs_speed_max);
    get("speaker_pitch_spread", s.speaker_pitch_spread);
    get("speaker_rate_spread", s.speaker_rate_spread);
    get("letter_seconds", s.letter_seconds);
    get("space_seconds", s.space_seconds);
    get("edge_seconds", s.edge_seconds);
    get("base_hz", s.base_hz);
    get("letter_ratio", s.letter_ratio);
    get("sample_rate", s.sample_rate);
    get("seed", s.seed);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad toy corpus spec: ") + e.what());
  }
  s.validate();
  return s;
}

Audio render_toy_utterance(const ToyCorpusSpec& spec, const std::string& text, double pitch, double tempo,
                           std::optional<double> snr_db, std::uint64_t noise_seed) {
  const auto letters = spec.letters();
  const double sr = spec.sample_rate;
  auto samples_for = [&](double seconds) { return static_cast<std::size_t>(std::lround(seconds * tempo * sr)); };
  Audio a;
  a.sample_rate = spec.sample_rate;
  auto& x = a.samples;
  x.assign(samples_for(spec.edge_seconds), 0.0);
  const std::size_t ramp = std::max<std::size_t>(1, static_cast<std::size_t>(0.008 * sr));
  for (const auto& c : utf8_chars(text)) {
    if (c == " ") {
      x.resize(x.size() + samples_for(spec.space_seconds), 0.0);
      continue;
    }
    auto it = std::lower_bound(letters.begin(), letters.end(), c);
    if (it == letters.end() || *it != c) throw ValidationError("toy text uses unknown letter '" + c + "'");
    const auto idx = static_cast<double>(it - letters.begin());
    const double fc = spec.base_hz * std::pow(spec.letter_ratio, idx) * pitch;
    // Alternate chirp direction between neighbouring letters.
    const double dir = (static_cast<int>(idx) % 2) ? -1.0 : 1.0;
    const double f0 = fc * (1.0 - 0.07 * dir), f1 = fc * (1.0 + 0.07 * dir);
    const std::size_t n = samples_for(spec.letter_seconds);
    double phase = 0.0, phase2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double u = n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
      const double f = f0 + (f1 - f0) * u;
      phase += 2.0 * std::numbers::pi * f / sr;
      phase2 += 2.0 * std::numbers::pi * 2.0 * f / sr;
      double env = 1.0;
      if (i < ramp) env = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(i) / ramp);
      if (n - 1 - i < ramp) env = std::min(env, 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(n - 1 - i) / ramp));
      x.push_back(env * (std::sin(phase) + 0.3 * std::sin(phase2)));
    }
  }
  x.resize(x.size() + samples_for(spec.edge_seconds), 0.0);
  if (snr_db) {
    double power = 0.0;
    for (double v : x) power += v * v;
    power /= static_cast<double>(std::max<std::size_t>(1, x.size()));
    const double sd = std::sqrt(power / std::pow(10.0, *snr_db / 10.0));
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (double& v : x) v += sd * noise(rng);
  }
  double peak = 0.0;
  for (double v : x) peak = std::max(peak, std::abs(v));
  if (peak > 0.0)
    for (double& v : x) v *= 0.5 / peak;
  return a;
}

namespace {

struct SplitPlan {
  const char* name;
  Role role;
  Domain domain;
  int utterances;
  int speakers;
  bool noisy;
};

std::string padded(int v, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%0*d", width, v);
  return buf;
}

std::string sample_text(const ToyCorpusSpec& spec, std::mt19937_64& rng) {
  const int nw = static_cast<int>(spec.words.size());
  std::uniform_int_distribution<int> count(spec.min_words, spec.max_words), any(0, nw - 1), pick(0, 2);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  static constexpr int kSuccessor[3] = {1, 5, 11};
  int n = count(rng);
  std::vector<std::string> out;
  int w = any(rng);
  for (int i = 0; i < n; ++i) {
    if (i) w = unif(rng) < spec.grammar_strength ? (w + kSuccessor[pick(rng)]) % nw : any(rng);
    out.push_back(spec.words[static_cast<std::size_t>(w)]);
  }
  return join(out, " ");
}

}  // namespace

ToyCorpus make_toy_corpus(const ToyCorpusSpec& spec, const std::string& out_dir) {
  spec.validate();
  fs::create_directories(fs::path(out_dir) / "wav");
  const SplitPlan plans[] = {
      {"read", Role::read, Domain::read, spec.read_utterances, spec.read_speakers, false},
      {"transcribed_cs", Role::transcribed_cs, Domain::cs, spec.transcribed_cs_utterances,
       spec.transcribed_cs_speakers, true},
      {"untranscribed_cs", Role::untranscribed_cs, Domain::cs, spec.untranscribed_cs_utterances,
       spec.untranscribed_cs_speakers, true},
      {"test_cs", Role::transcribed_cs, Domain::cs, spec.test_cs_utterances, spec.test_cs_speakers, true},
  };
  std::string answers;
  std::vector<HypothesisRow> oracle;
  Manifest written[4];
  for (int s = 0; s < 4; ++s) {
    const auto& p = plans[s];
    std::mt19937_64 rng(mix_seed(spec.seed, static_cast<std::uint64_t>(s) + 1));
    std::uniform_real_distribution<double> unif(-1.0, 1.0), speed(spec.cs_speed_min, spec.cs_speed_max);
    std::vector<std::pair<double, double>> voices;  // pitch, tempo per speaker
    for (int k = 0; k < p.speakers; ++k)
      voices.emplace_back(1.0 + spec.speaker_pitch_spread * unif(rng), 1.0 + spec.speaker_rate_spread * unif(rng));
    Manifest& m = written[s];
    m.role = p.role;
    for (int i = 0; i < p.utterances; ++i) {
      const int spk = i % p.speakers;
      std::string text = sample_text(spec, rng);
      double pitch = voices[static_cast<std::size_t>(spk)].first;
      double tempo = voices[static_cast<std::size_t>(spk)].second;
      if (p.noisy) {
        // Speed perturbation shifts pitch and compresses time by the same factor.
        double f = speed(rng);
        pitch *= f;
        tempo /= f;
      }
      std::uint64_t noise_seed = rng();
      Audio a = render_toy_utterance(spec, text, pitch, tempo, p.noisy ? spec.cs_snr_db : spec.read_snr_db,
                                     noise_seed);
      const std::string id = std::string(p.name) + "_" + padded(i, 4);
      const std::string rel = "wav/" + id + ".wav";
      write_wav((fs::path(out_dir) / rel).string(), a);
      Utterance u{id, rel, a.duration(), std::string(p.name) + "_spk" + padded(spk, 2), p.domain, text,
                  spec.sample_rate};
      json rec = {{"utt_id", id}, {"split", p.name}, {"text", text}};
      answers += rec.dump() + "\n";
      if (p.role == Role::untranscribed_cs) {
        oracle.push_back({id, text, 1.0, 0.0});
        u.text.reset();
      }
      m.utterances.push_back(std::move(u));
    }
  }
  const fs::path d(out_dir);
  write_manifest(written[0], (d / ToyCorpus::kRead).string());
  write_manifest(written[1], (d / ToyCorpus::kTranscribedCs).string());
  write_manifest(written[2], (d / ToyCorpus::kUntranscribedCs).string());
  write_manifest(written[3], (d / ToyCorpus::kTestCs).string());
  write_file((d / ToyCorpus::kAnswers).string(), answers);
  write_file((d / ToyCorpus::kOracleHypotheses).string(), hypotheses_tsv(oracle));
  write_file((d / "spec.json").string(), spec.to_json().dump(2) + "\n");
  return load_toy_corpus(out_dir);
}

ToyCorpus load_toy_corpus(const std::string& dir) {
  const fs::path d(dir);
  ToyCorpus c;
  c.dir = dir;
  c.read = load_manifest((d / ToyCorpus::kRead).string(), Role::read);
  c.transcribed_cs = load_manifest((d / ToyCorpus::kTranscribedCs).string(), Role::transcribed_cs);
  c.untranscribed_cs = load_manifest((d / ToyCorpus::kUntranscribedCs).string(), Role::untranscribed_cs);
  c.test_cs = load_manifest((d / ToyCorpus::kTestCs).string(), Role::transcribed_cs);
  return c;
}

std::map<std::string, std::string> load_answers(const std::string& path) {
  std::map<std::string, std::string> out;
  int line_no = 0;
  std::istringstream in(read_file(path));
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      auto j = json::parse(line);
      out[j.at("utt_id").get<std::string>()] = j.at("text").get<std::string>();
    } catch (const json::exception& e) {
      throw ValidationError(path + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace lowsup
