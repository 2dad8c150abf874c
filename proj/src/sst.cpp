#include "lowsup/sst.hpp"

#include "lowsup/eval.hpp"

#include <json.hpp>
#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <set>
#include <sstream>

namespace lowsup {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string to_string(TranscriberKind k) {
  switch (k) {
    case TranscriberKind::internal_ctc_lex_lm: return "internal_ctc_lex_lm";
    case TranscriberKind::internal_joint: return "internal_joint";
    case TranscriberKind::external_command: return "external_command";
  }
  return "internal_ctc_lex_lm";
}

TranscriberKind parse_transcriber_kind(const std::string& s) {
  for (auto k : {TranscriberKind::internal_ctc_lex_lm, TranscriberKind::internal_joint,
                 TranscriberKind::external_command})
    if (to_string(k) == s) return k;
  throw ValidationError("unknown transcriber kind '" + s + "'");
}

std::string Transcriber::description() const {
  std::string d = to_string(kind);
  if (kind == TranscriberKind::external_command) return d + ": " + command;
  if (model) d += " model " + model->hash();
  d += " mode " + to_string(decode.mode);
  char buf[96];
  std::snprintf(buf, sizeof buf, " beam %d lm_weight %g ctc_weight %g", decode.effective_beam(), decode.lm_weight,
                decode.ctc_weight_decode);
  return d + buf;
}

std::map<std::string, std::string> PseudoLabelSet::texts() const {
  std::map<std::string, std::string> out;
  for (const auto& e : entries) out[e.utt_id] = e.text;
  return out;
}

std::string utc_timestamp() {
  std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

namespace {

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (std::size_t p = s.find(from); p != std::string::npos; p = s.find(from, p + to.size())) s.replace(p, from.size(), to);
  return s;
}

std::string shell_quote(const std::string& s) { return "'" + replace_all(s, "'", "'\\''") + "'"; }

std::vector<HypothesisRow> run_external(const Manifest& m, const Transcriber& tr) {
  if (tr.command.empty()) throw ValidationError("external transcriber has no command");
  fs::path dir = tr.work_dir.empty() ? fs::temp_directory_path() / ("lowsup_ext_" + hex64(fnv1a64(tr.command)))
                                     : fs::path(tr.work_dir);
  fs::create_directories(dir);
  const std::string manifest = (dir / "input_manifest.jsonl").string();
  const std::string out = (dir / "hypotheses.tsv").string();
  const std::string out_stdout = (dir / "stdout.txt").string();
  const std::string err = (dir / "stderr.txt").string();
  Manifest blind = m;
  for (auto& u : blind.utterances) u.text.reset();
  write_manifest(blind, manifest);
  fs::remove(out);
  const bool to_file = tr.command.find("{out}") != std::string::npos;
  std::string cmd = replace_all(replace_all(tr.command, "{manifest}", shell_quote(manifest)), "{out}", shell_quote(out));
  cmd = "(" + cmd + ") > " + shell_quote(out_stdout) + " 2> " + shell_quote(err);
  int rc = std::system(cmd.c_str());
  if (rc != 0) {
    std::string stderr_text = fs::exists(err) ? read_file(err) : "";
    int code = WIFEXITED(rc) ? WEXITSTATUS(rc) : rc;
    throw StageError("external transcriber exited with status " + std::to_string(code) + ": " + trim(stderr_text));
  }
  const std::string result = to_file ? out : out_stdout;
  if (!fs::exists(result)) throw StageError("external transcriber wrote no hypothesis file " + result);
  return parse_hypotheses_tsv(read_file(result));
}

}  // namespace

PseudoLabelSet pseudotranscribe(const Manifest& untranscribed, const Transcriber& tr, const std::string& config_hash) {
  if (untranscribed.role != Role::untranscribed_cs && untranscribed.role != Role::untranscribed_bn)
    throw ValidationError("pseudotranscription needs an untranscribed manifest, got role " +
                          to_string(untranscribed.role));
  PseudoLabelSet set;
  set.provenance = {tr.description(), utc_timestamp(), config_hash};
  set.report.input = untranscribed.size();
  std::vector<HypothesisRow> rows;
  if (tr.kind == TranscriberKind::external_command) {
    rows = run_external(untranscribed, tr);
    std::set<std::string> known;
    for (const auto& u : untranscribed.utterances) known.insert(u.utt_id);
    std::set<std::string> seen;
    for (const auto& r : rows) {
      if (!known.count(r.utt_id)) throw StageError("external transcriber returned unknown utt_id " + r.utt_id);
      if (!seen.insert(r.utt_id).second) throw StageError("external transcriber returned " + r.utt_id + " twice");
    }
  } else {
    if (!tr.model) throw ValidationError("internal transcriber has no model");
    DecodeConfig cfg = tr.decode;
    cfg.mode = tr.kind == TranscriberKind::internal_joint ? DecodeMode::joint_attention : DecodeMode::ctc_beam_lm;
    auto res = transcribe_manifest(*tr.model, untranscribed, cfg, tr.resources);
    rows = std::move(res.rows);
    for (const auto& e : res.errors) ++set.report.dropped[e.error_class];
  }
  std::map<std::string, const HypothesisRow*> by_id;
  for (const auto& r : rows) by_id[r.utt_id] = &r;
  for (const auto& u : untranscribed.utterances) {
    auto it = by_id.find(u.utt_id);
    if (it == by_id.end()) {
      if (tr.kind == TranscriberKind::external_command) ++set.report.dropped["missing"];
      continue;
    }
    set.entries.push_back(*it->second);
    Utterance s = u;
    s.text.reset();
    set.source.utterances.push_back(std::move(s));
  }
  set.source.role = untranscribed.role;
  set.report.kept = set.entries.size();
  return set;
}

void FilterPolicy::validate() const {
  if (!(min_confidence >= 0.0 && min_confidence <= 1.0)) throw ValidationError("min_confidence must lie in [0, 1]");
  if (!std::isfinite(max_char_per_second) && max_char_per_second > 0)
    throw ValidationError("max_char_per_second must be finite");
}

PseudoLabelSet filter_pseudolabels(const PseudoLabelSet& set, const FilterPolicy& policy) {
  policy.validate();
  PseudoLabelSet out;
  out.provenance = set.provenance;
  out.source.role = set.source.role;
  out.report = set.report;
  std::map<std::string, const Utterance*> audio;
  for (const auto& u : set.source.utterances) audio[u.utt_id] = &u;
  for (const auto& e : set.entries) {
    const Utterance* u = audio.count(e.utt_id) ? audio[e.utt_id] : nullptr;
    std::string reason;
    const double chars = static_cast<double>(char_units(e.text, true).size());
    if (policy.drop_empty && trim(e.text).empty())
      reason = "empty";
    else if (e.confidence < policy.min_confidence)
      reason = "low_confidence";
    else if (policy.max_char_per_second > 0 && u && u->duration > 0 && chars / u->duration > policy.max_char_per_second)
      reason = "too_fast";
    if (!reason.empty()) {
      ++out.report.dropped[reason];
      continue;
    }
    out.entries.push_back(e);
    if (u) out.source.utterances.push_back(*u);
  }
  out.report.kept = out.entries.size();
  return out;
}

void save_pseudolabels(const PseudoLabelSet& set, const std::string& path) {
  write_file(path, hypotheses_tsv(set.entries));
  json j;
  j["transcriber"] = set.provenance.transcriber;
  j["created"] = set.provenance.created;
  j["config_hash"] = set.provenance.config_hash;
  json rep;
  rep["input"] = set.report.input;
  rep["kept"] = set.report.kept;
  json dropped = json::object();
  for (const auto& [k, v] : set.report.dropped) dropped[k] = v;
  rep["dropped"] = dropped;
  j["filter_report"] = rep;
  j["source_role"] = to_string(set.source.role);
  json src = json::array();
  std::istringstream lines(serialize_manifest(set.source));
  for (std::string line; std::getline(lines, line);)
    if (!line.empty()) src.push_back(json::parse(line));
  j["source"] = src;
  write_file(path + ".json", j.dump(2) + "\n");
}

PseudoLabelSet load_pseudolabels(const std::string& path) {
  PseudoLabelSet set;
  set.entries = parse_hypotheses_tsv(read_file(path));
  json j;
  try {
    j = json::parse(read_file(path + ".json"));
    set.provenance = {j.at("transcriber").get<std::string>(), j.at("created").get<std::string>(),
                      j.at("config_hash").get<std::string>()};
    const auto& rep = j.at("filter_report");
    set.report.input = rep.at("input").get<std::size_t>();
    set.report.kept = rep.at("kept").get<std::size_t>();
    for (const auto& [k, v] : rep.at("dropped").items()) set.report.dropped[k] = v.get<std::size_t>();
    std::string src;
    for (const auto& rec : j.at("source")) src += rec.dump() + "\n";
    set.source = parse_manifest(src, parse_role(j.at("source_role").get<std::string>()));
  } catch (const json::exception& e) {
    throw ValidationError("bad pseudo-label sidecar " + path + ".json: " + e.what());
  }
  if (set.entries.size() != set.source.size()) throw ValidationError("pseudo-label sidecar does not match " + path);
  return set;
}

void record_stage(AsrModel& model, const std::string& stage, const std::string& config_hash, std::uint64_t seed,
                  const std::string& parent_hash) {
  model.provenance().push_back(StageRecord{stage, config_hash, parent_hash, seed});
}

TrainResult train_sst(const AsrModel& start, const Manifest& gold, const PseudoLabelSet& pseudo,
                      const std::vector<Example>& valid, const Schedule& schedule, const SstOptions& opt,
                      FeatureCache& cache) {
  if (!(opt.gold_weight > 0.0) || !(opt.pseudo_weight >= 0.0))
    throw ValidationError("gold weight must be positive and pseudo weight non-negative");
  std::set<std::string> gold_ids;
  for (const auto& u : gold.utterances) gold_ids.insert(u.utt_id);
  for (const auto& e : pseudo.entries)
    if (gold_ids.count(e.utt_id)) throw ValidationError("utterance " + e.utt_id + " is both gold and pseudo-labelled");

  Manifest pm;
  pm.role = Role::mixed;
  auto texts = pseudo.texts();
  for (const auto& u : pseudo.source.utterances) {
    auto it = texts.find(u.utt_id);
    if (it == texts.end()) continue;
    Utterance p = u;
    p.text = it->second;
    pm.utterances.push_back(std::move(p));
  }
  std::vector<std::pair<Manifest, double>> parts{{gold, opt.gold_weight}};
  if (opt.pseudo_weight > 0.0 && !pm.empty()) parts.emplace_back(pm, opt.pseudo_weight);
  Manifest mixed = mix_manifests(parts);

  std::set<std::string> pseudo_ids;
  for (const auto& u : pm.utterances) pseudo_ids.insert(u.utt_id);
  auto ex = manifest_examples(start, mixed, cache).examples;
  for (auto& x : ex)
    if (pseudo_ids.count(x.utt_id)) x.tag = "pseudo";
  const std::string parent = start.hash();
  TrainResult r = train_supervised(start, ex, valid, schedule);
  record_stage(r.model, "sst", opt.config_hash, schedule.seed, parent);
  return r;
}

FinalFinetuneResult final_finetune(const AsrModel& model, const Manifest& in_domain_gold,
                                   const std::vector<Example>& valid, const Schedule& schedule, FeatureCache& cache,
                                   const std::string& config_hash) {
  FinalFinetuneResult out;
  if (in_domain_gold.empty()) {
    out.skipped = true;
    out.train.model = model;
    return out;
  }
  auto ex = manifest_examples(model, in_domain_gold, cache).examples;
  const std::string parent = model.hash();
  out.train = train_supervised(model, ex, valid, schedule);
  record_stage(out.train.model, "final_finetune", config_hash, schedule.seed, parent);
  return out;
}

}  // namespace lowsup
