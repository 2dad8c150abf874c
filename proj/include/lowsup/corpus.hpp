#pragma once

#include "lowsup/common.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace lowsup {

enum class Domain { read, cs, bn };
enum class Role { read, transcribed_cs, untranscribed_cs, untranscribed_bn, mixed };

std::string to_string(Domain d);
std::string to_string(Role r);
Domain parse_domain(std::string_view s);
Role parse_role(std::string_view s);

struct Utterance {
  std::string utt_id;
  std::string audio_path;
  double duration = 0.0;
  std::string speaker_id;
  Domain domain = Domain::read;
  std::optional<std::string> text;
  int sample_rate = 16000;
  // Expected presentations per epoch; set by mix_manifests.
  double weight = 1.0;
};

struct Manifest {
  std::vector<Utterance> utterances;
  Role role = Role::mixed;

  std::size_t size() const { return utterances.size(); }
  bool empty() const { return utterances.empty(); }
  double total_duration() const;
  std::vector<std::string> speakers() const;  // in order of first appearance
};

struct NormalizerConfig {
  bool lowercase = true;
  bool strip_punctuation = true;  // keeps apostrophes
  // Allowed characters after normalization; empty means unrestricted.
  std::vector<std::string> charset;
};

std::string normalize_text(std::string_view text, const NormalizerConfig& cfg = {});

/// Checks the Manifest invariants; throws ValidationError naming the first offender.
void validate_manifest(const Manifest& m);

/// Relative audio paths resolve against the manifest's directory.
Manifest load_manifest(const std::string& path, Role role = Role::mixed,
                       const NormalizerConfig& norm = {});
Manifest parse_manifest(std::string_view contents, Role role = Role::mixed,
                        const NormalizerConfig& norm = {});
std::string serialize_manifest(const Manifest& m);
void write_manifest(const Manifest& m, const std::string& path);

/// Durations per role, in hours. Rows follow the order of kRoles.
struct DurationSummary {
  static constexpr std::array<const char*, 5> kRoles = {
      "read", "transcribed_cs", "untranscribed_cs", "transcribed_bn", "untranscribed_bn"};
  std::array<double, 5> hours{};

  double get(std::string_view role) const;
  std::string to_tsv() const;  // role TAB hours, one decimal
};

std::string utterance_role(const Utterance& u);
DurationSummary summarize(const Manifest& m);

enum class SubsetStrategy { random_utterance, by_speaker };

struct SubsetSpec {
  double target_duration = 0.0;  // seconds
  SubsetStrategy strategy = SubsetStrategy::random_utterance;
  std::uint64_t seed = 0;
};

Manifest select_subset(const Manifest& m, const SubsetSpec& spec);

Manifest mix_manifests(const std::vector<std::pair<Manifest, double>>& parts);

/// Indices of one epoch: floor(w) copies of each utterance plus one more with
/// probability frac(w), then shuffled. Deterministic in (manifest, seed).
std::vector<std::size_t> epoch_indices(const Manifest& m, std::uint64_t seed);

/// Random split holding out `fraction` of utterances (at least one when size > 1).
std::pair<Manifest, Manifest> holdout_split(const Manifest& m, double fraction, std::uint64_t seed);

}  // namespace lowsup
