#include "lowsup/corpus.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace lowsup {

using nlohmann::json;

std::string to_string(Domain d) {
  switch (d) {
    case Domain::read: return "read";
    case Domain::cs: return "cs";
    case Domain::bn: return "bn";
  }
  return "read";
}

std::string to_string(Role r) {
  switch (r) {
    case Role::read: return "read";
    case Role::transcribed_cs: return "transcribed_cs";
    case Role::untranscribed_cs: return "untranscribed_cs";
    case Role::untranscribed_bn: return "untranscribed_bn";
    case Role::mixed: return "mixed";
  }
  return "mixed";
}

Domain parse_domain(std::string_view s) {
  if (s == "read") return Domain::read;
  if (s == "cs") return Domain::cs;
  if (s == "bn") return Domain::bn;
  throw ValidationError("unknown domain '" + std::string(s) + "'");
}

Role parse_role(std::string_view s) {
  if (s == "read") return Role::read;
  if (s == "transcribed_cs") return Role::transcribed_cs;
  if (s == "untranscribed_cs") return Role::untranscribed_cs;
  if (s == "untranscribed_bn") return Role::untranscribed_bn;
  if (s == "mixed") return Role::mixed;
  throw ValidationError("unknown manifest role '" + std::string(s) + "'");
}

double Manifest::total_duration() const {
  double s = 0.0;
  for (const auto& u : utterances) s += u.duration;
  return s;
}

std::vector<std::string> Manifest::speakers() const {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const auto& u : utterances)
    if (seen.insert(u.speaker_id).second) out.push_back(u.speaker_id);
  return out;
}

std::string normalize_text(std::string_view text, const NormalizerConfig& cfg) {
  std::string out;
  bool pending_space = false;
  for (const auto& ch : utf8_chars(text)) {
    unsigned char c = static_cast<unsigned char>(ch[0]);
    if (ch.size() == 1 && std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    std::string piece = ch;
    if (ch.size() == 1) {
      if (cfg.strip_punctuation && std::ispunct(c) && c != '\'') {
        // Punctuation acts as a separator so "a,b" does not fuse into "ab".
        pending_space = !out.empty();
        continue;
      }
      if (cfg.lowercase) piece[0] = static_cast<char>(std::tolower(c));
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out += piece;
  }
  return out;
}

namespace {

bool role_requires_text(Role r) { return r == Role::transcribed_cs || r == Role::read; }
bool role_forbids_text(Role r) {
  return r == Role::untranscribed_cs || r == Role::untranscribed_bn;
}

void check_charset(const std::string& text, const NormalizerConfig& norm, const std::string& where) {
  if (norm.charset.empty()) return;
  std::set<std::string> allowed(norm.charset.begin(), norm.charset.end());
  for (const auto& ch : utf8_chars(text)) {
    if (ch == " ") continue;
    if (!allowed.count(ch))
      throw ValidationError(where + ": character '" + ch + "' outside the configured character set");
  }
}

}  // namespace

void validate_manifest(const Manifest& m) {
  std::unordered_set<std::string> ids;
  for (std::size_t i = 0; i < m.utterances.size(); ++i) {
    const auto& u = m.utterances[i];
    std::string where = "utterance " + std::to_string(i + 1) + " (" + u.utt_id + ")";
    if (u.utt_id.empty()) throw ValidationError(where + ": empty utt_id");
    if (!ids.insert(u.utt_id).second) throw ValidationError(where + ": duplicate utt_id");
    if (!(u.duration > 0.0) || !std::isfinite(u.duration))
      throw ValidationError(where + ": duration must be positive");
    if (u.sample_rate <= 0) throw ValidationError(where + ": sample_rate must be positive");
    if (!(u.weight >= 0.0)) throw ValidationError(where + ": negative weight");
    if (role_requires_text(m.role) && !u.text)
      throw ValidationError(where + ": transcript required for role " + to_string(m.role));
    if (role_forbids_text(m.role) && u.text)
      throw ValidationError(where + ": transcript present on untranscribed role");
  }
}

Manifest parse_manifest(std::string_view contents, Role role, const NormalizerConfig& norm) {
  Manifest m;
  m.role = role;
  std::unordered_set<std::string> ids;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= contents.size()) {
    std::size_t nl = contents.find('\n', pos);
    if (nl == std::string_view::npos) nl = contents.size();
    std::string line = trim(contents.substr(pos, nl - pos));
    pos = nl + 1;
    ++line_no;
    if (line.empty()) {
      if (nl == contents.size()) break;
      continue;
    }
    std::string where = "line " + std::to_string(line_no);
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError(where + ": malformed record: " + e.what());
    }
    Utterance u;
    try {
      if (!rec.is_object()) throw ValidationError(where + ": record is not an object");
      u.utt_id = rec.at("utt_id").get<std::string>();
      u.audio_path = rec.at("audio").get<std::string>();
      u.duration = rec.at("duration_s").get<double>();
      u.speaker_id = rec.at("speaker").get<std::string>();
      u.domain = parse_domain(rec.at("domain").get<std::string>());
      u.sample_rate = rec.at("sample_rate").get<int>();
      if (rec.contains("text") && !rec["text"].is_null())
        u.text = normalize_text(rec["text"].get<std::string>(), norm);
      if (rec.contains("weight")) u.weight = rec["weight"].get<double>();
    } catch (const json::exception& e) {
      throw ValidationError(where + ": malformed record: " + e.what());
    }
    if (!ids.insert(u.utt_id).second)
      throw ValidationError(where + ": duplicate utt_id '" + u.utt_id + "'");
    if (!(u.duration > 0.0) || !std::isfinite(u.duration))
      throw ValidationError(where + ": duration must be positive");
    if (u.sample_rate <= 0) throw ValidationError(where + ": sample_rate must be positive");
    if (role_forbids_text(role) && u.text)
      throw ValidationError(where + ": transcript present on untranscribed role " + to_string(role));
    if (role_requires_text(role) && !u.text)
      throw ValidationError(where + ": transcript missing for role " + to_string(role));
    if (u.text) check_charset(*u.text, norm, where);
    m.utterances.push_back(std::move(u));
    if (nl == contents.size()) break;
  }
  return m;
}

Manifest load_manifest(const std::string& path, Role role, const NormalizerConfig& norm) {
  Manifest m = parse_manifest(read_file(path), role, norm);
  // Relative audio paths are relative to the manifest's directory.
  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  for (auto& u : m.utterances)
    if (!u.audio_path.empty() && std::filesystem::path(u.audio_path).is_relative())
      u.audio_path = (base / u.audio_path).lexically_normal().string();
  return m;
}

std::string serialize_manifest(const Manifest& m) {
  std::string out;
  for (const auto& u : m.utterances) {
    json rec;
    rec["utt_id"] = u.utt_id;
    rec["audio"] = u.audio_path;
    rec["duration_s"] = u.duration;
    rec["speaker"] = u.speaker_id;
    rec["domain"] = to_string(u.domain);
    if (u.text) rec["text"] = *u.text;
    rec["sample_rate"] = u.sample_rate;
    if (u.weight != 1.0) rec["weight"] = u.weight;
    out += rec.dump();
    out += '\n';
  }
  return out;
}

void write_manifest(const Manifest& m, const std::string& path) {
  write_file(path, serialize_manifest(m));
}

std::string utterance_role(const Utterance& u) {
  switch (u.domain) {
    case Domain::read: return "read";
    case Domain::cs: return u.text ? "transcribed_cs" : "untranscribed_cs";
    case Domain::bn: return u.text ? "transcribed_bn" : "untranscribed_bn";
  }
  return "read";
}

double DurationSummary::get(std::string_view role) const {
  for (std::size_t i = 0; i < kRoles.size(); ++i)
    if (role == kRoles[i]) return hours[i];
  throw ValidationError("unknown summary role '" + std::string(role) + "'");
}

std::string DurationSummary::to_tsv() const {
  std::string out;
  char buf[64];
  for (std::size_t i = 0; i < kRoles.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%s\t%.1f\n", kRoles[i], hours[i]);
    out += buf;
  }
  return out;
}

DurationSummary summarize(const Manifest& m) {
  std::array<double, 5> seconds{};
  for (const auto& u : m.utterances) {
    auto role = utterance_role(u);
    for (std::size_t i = 0; i < DurationSummary::kRoles.size(); ++i)
      if (role == DurationSummary::kRoles[i]) seconds[i] += u.duration;
  }
  DurationSummary s;
  for (std::size_t i = 0; i < seconds.size(); ++i) s.hours[i] = seconds[i] / 3600.0;
  return s;
}

Manifest select_subset(const Manifest& m, const SubsetSpec& spec) {
  if (!(spec.target_duration > 0.0)) throw ValidationError("subset target_duration must be positive");
  double total = m.total_duration();
  if (total < spec.target_duration) {
    throw InsufficientDataError("manifest holds " + std::to_string(total) +
                                " s, below the requested " + std::to_string(spec.target_duration) + " s");
  }
  std::mt19937_64 rng(spec.seed);
  std::vector<char> keep(m.size(), 0);
  double acc = 0.0;
  if (spec.strategy == SubsetStrategy::random_utterance) {
    std::vector<std::size_t> order(m.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i : order) {
      if (acc >= spec.target_duration) break;
      keep[i] = 1;
      acc += m.utterances[i].duration;
    }
  } else {
    auto speakers = m.speakers();
    std::shuffle(speakers.begin(), speakers.end(), rng);
    std::unordered_map<std::string, std::vector<std::size_t>> by_spk;
    for (std::size_t i = 0; i < m.size(); ++i) by_spk[m.utterances[i].speaker_id].push_back(i);
    for (const auto& s : speakers) {
      if (acc >= spec.target_duration) break;
      for (std::size_t i : by_spk[s]) {
        keep[i] = 1;
        acc += m.utterances[i].duration;
      }
    }
  }
  Manifest out;
  out.role = m.role;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (keep[i]) out.utterances.push_back(m.utterances[i]);
  return out;
}

Manifest mix_manifests(const std::vector<std::pair<Manifest, double>>& parts) {
  Manifest out;
  std::unordered_set<std::string> ids;
  std::optional<Role> common;
  bool uniform = true;
  for (const auto& [m, w] : parts) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("mixing weight must be non-negative");
    if (!common) common = m.role;
    else if (*common != m.role) uniform = false;
    for (const auto& u : m.utterances) {
      if (!ids.insert(u.utt_id).second)
        throw ValidationError("utt_id collision while mixing: '" + u.utt_id + "'");
      Utterance c = u;
      c.weight = u.weight * w;
      out.utterances.push_back(std::move(c));
    }
  }
  out.role = (common && uniform) ? *common : Role::mixed;
  return out;
}

std::vector<std::size_t> epoch_indices(const Manifest& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m.size(); ++i) {
    double w = m.utterances[i].weight;
    auto whole = static_cast<std::size_t>(std::floor(w));
    double frac = w - std::floor(w);
    for (std::size_t k = 0; k < whole; ++k) out.push_back(i);
    if (frac > 0.0 && unif(rng) < frac) out.push_back(i);
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

std::pair<Manifest, Manifest> holdout_split(const Manifest& m, double fraction, std::uint64_t seed) {
  Manifest train, held;
  train.role = held.role = m.role;
  if (m.size() < 2 || fraction <= 0.0) {
    train.utterances = m.utterances;
    return {train, held};
  }
  std::size_t n_held = std::max<std::size_t>(1, static_cast<std::size_t>(std::round(fraction * m.size())));
  n_held = std::min(n_held, m.size() - 1);
  std::vector<std::size_t> order(m.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<char> is_held(m.size(), 0);
  for (std::size_t i = 0; i < n_held; ++i) is_held[order[i]] = 1;
  for (std::size_t i = 0; i < m.size(); ++i)
    (is_held[i] ? held : train).utterances.push_back(m.utterances[i]);
  return {train, held};
}

}  // namespace lowsup
