#include "lowsup/pipeline.hpp"

#include "lowsup/lm.hpp"
#include "lowsup/ssl.hpp"
#include "lowsup/toy_corpus.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>

namespace lowsup {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names = {"baseline_supervised", "dump_features", "kmeans",
                                                 "ssl_pretrain",        "finetune",      "pseudotranscribe",
                                                 "sst_train",           "final_finetune", "evaluate"};
  return names;
}

bool is_stage_name(const std::string& s) {
  const auto& n = stage_names();
  return std::find(n.begin(), n.end(), s) != n.end();
}

std::string to_string(SubsetStrategy s) {
  return s == SubsetStrategy::by_speaker ? "by_speaker" : "random_utterance";
}

SubsetStrategy parse_subset_strategy(const std::string& s) {
  if (s == "random_utterance") return SubsetStrategy::random_utterance;
  if (s == "by_speaker") return SubsetStrategy::by_speaker;
  throw ValidationError("unknown subset strategy '" + s + "'");
}

std::string to_string(StageStatus s) {
  switch (s) {
    case StageStatus::ran: return "ran";
    case StageStatus::skipped_complete: return "skipped_complete";
    case StageStatus::skipped_condition: return "skipped_condition";
    case StageStatus::reused: return "reused";
  }
  return "ran";
}

// ------------------------------------------------------------------ Config

json default_config() {
  const ModelConfig m;
  const Schedule s;
  const DecodeConfig d;
  json schedule = {{"epochs", s.epochs},
                   {"batch_utterances", s.batch_utterances},
                   {"max_batch_seconds", s.max_batch_seconds},
                   {"peak_lr", s.peak_lr},
                   {"warmup_steps", s.warmup_steps},
                   {"grad_clip", s.grad_clip},
                   {"adam_beta1", s.adam_beta1},
                   {"adam_beta2", s.adam_beta2},
                   {"adam_eps", s.adam_eps},
                   {"spec_augment", s.spec_augment},
                   {"freq_masks", s.policy.num_freq_masks},
                   {"freq_width", s.policy.max_freq_width},
                   {"time_masks", s.policy.num_time_masks},
                   {"time_width", s.policy.max_time_width},
                   {"save_epoch_checkpoints", false}};
  auto decode = [&](const std::string& mode) {
    return json{{"mode", mode},
                {"beam_size", d.beam_size},
                {"lm_weight", d.lm_weight},
                {"ctc_weight_decode", d.ctc_weight_decode},
                {"length_penalty", d.length_penalty},
                {"max_length", d.max_length},
                {"char_lm", false}};
  };
  json stages = json::array();
  for (const auto& n : stage_names()) stages.push_back(n);
  return {
      {"stages", stages},
      {"seed", 0},
      {"seeds", json::object()},
      {"corpus",
       {{"dir", ""},
        {"toy", nullptr},
        {"read", ToyCorpus::kRead},
        {"transcribed_cs", ToyCorpus::kTranscribedCs},
        {"untranscribed_cs", ToyCorpus::kUntranscribedCs},
        {"test", ToyCorpus::kTestCs},
        {"answers", ToyCorpus::kAnswers}}},
      {"data",
       {{"use_read", true},
        {"read_weight", 1.0},
        {"cs_weight", 1.0},
        {"cs_hours", nullptr},
        {"subset_strategy", "random_utterance"},
        {"holdout_fraction", 0.05}}},
      {"features", {{"num_mel_bins", 80}, {"frame_length", 0.025}, {"frame_shift", 0.01}}},
      {"model",
       {{"enc_layers", m.enc_layers},
        {"enc_heads", m.enc_heads},
        {"enc_dim", m.enc_dim},
        {"enc_ffn", m.enc_ffn},
        {"conv_kernel", m.conv_kernel},
        {"dec_layers", m.dec_layers},
        {"ctc_weight", m.ctc_weight},
        {"dropout", m.dropout},
        {"label_smoothing", m.label_smoothing}}},
      {"schedule", schedule},
      {"lm", {{"order", 3}, {"smoothing", "witten_bell"}}},
      {"inputs", {{"model", ""}, {"pseudo", ""}}},
      {"baseline_supervised", {{"schedule", json::object()}}},
      {"dump_features", {{"layer", nullptr}}},
      {"kmeans", {{"k", 100}, {"max_iters", 100}, {"max_frames", 1000000}}},
      {"ssl_pretrain",
       {{"schedule", json::object()},
        {"init", "latest"},
        {"span_mask", false},
        {"mask_prob", 0.08},
        {"mask_span", 10}}},
      {"finetune", {{"schedule", json::object()}}},
      {"pseudotranscribe",
       {{"transcriber", "internal_ctc_lex_lm"},
        {"command", ""},
        {"decode", decode("ctc_beam_lm")},
        {"filter", {{"min_confidence", 0.0}, {"drop_empty", true}, {"max_char_per_second", 40.0}}}}},
      {"sst_train", {{"schedule", json::object()}, {"gold_weight", 1.0}, {"pseudo_weight", 1.0}}},
      {"final_finetune", {{"schedule", json::object()}}},
      {"evaluate", {{"decode", decode("joint_attention")}}},
  };
}

namespace {

// Sections whose members are free-form.
bool open_section(const std::string& path) {
  return path == "seeds" || path == "corpus.toy" || path.ends_with(".schedule");
}

void merge_into(json& base, const json& user, const std::string& path) {
  if (!user.is_object()) throw ValidationError("config section '" + path + "' must be an object");
  for (const auto& [k, v] : user.items()) {
    const std::string p = path.empty() ? k : path + "." + k;
    if (!base.contains(k)) {
      if (open_section(path)) {
        base[k] = v;
        continue;
      }
      throw ValidationError("unknown config key '" + p + "'");
    }
    json& b = base[k];
    if (b.is_object() && !open_section(p))
      merge_into(b, v, p);
    else if (b.is_object() && v.is_object())
      for (const auto& [kk, vv] : v.items()) b[kk] = vv;
    else
      b = v;
  }
}

const json& at(const json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key)) throw ValidationError("missing config key '" + where + "." + key + "'");
  return j.at(key);
}

template <typename T>
T get(const json& j, const std::string& key, const std::string& where) {
  try {
    return at(j, key, where).get<T>();
  } catch (const json::exception&) {
    throw ValidationError("config key '" + where + "." + key + "' has the wrong type");
  }
}

}  // namespace

json merge_config(const json& user) {
  json cfg = default_config();
  merge_into(cfg, user, "");
  validate_config(cfg);
  return cfg;
}

json load_config(const std::string& path) {
  json user;
  try {
    user = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError("config " + path + ": " + e.what());
  }
  return merge_config(user);
}

void apply_override(json& cfg, const std::string& assignment, bool validate) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &cfg;
  std::string path;
  std::size_t start = 0;
  while (true) {
    auto dot = key.find('.', start);
    std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ValidationError("override key '" + key + "' has an empty component");
    const bool last = dot == std::string::npos;
    if (!node->is_object() || (!node->contains(part) && !open_section(path)))
      throw ValidationError("unknown config key '" + key + "'");
    if (last) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    path = path.empty() ? part : path + "." + part;
    start = dot + 1;
  }
  if (validate) validate_config(cfg);
}

Schedule schedule_from_json(const json& j, std::uint64_t seed) {
  const std::string w = "schedule";
  static const std::set<std::string> known = {"epochs",       "batch_utterances", "max_batch_seconds", "peak_lr",
                                              "warmup_steps", "grad_clip",        "adam_beta1",        "adam_beta2",
                                              "adam_eps",     "spec_augment",     "freq_masks",        "freq_width",
                                              "time_masks",   "time_width",       "save_epoch_checkpoints"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ValidationError("unknown schedule key '" + k + "'");
  Schedule s;
  s.epochs = get<int>(j, "epochs", w);
  s.batch_utterances = get<int>(j, "batch_utterances", w);
  s.max_batch_seconds = get<double>(j, "max_batch_seconds", w);
  s.peak_lr = get<double>(j, "peak_lr", w);
  s.warmup_steps = get<int>(j, "warmup_steps", w);
  s.grad_clip = get<double>(j, "grad_clip", w);
  s.adam_beta1 = get<double>(j, "adam_beta1", w);
  s.adam_beta2 = get<double>(j, "adam_beta2", w);
  s.adam_eps = get<double>(j, "adam_eps", w);
  s.spec_augment = get<bool>(j, "spec_augment", w);
  s.policy.num_freq_masks = get<int>(j, "freq_masks", w);
  s.policy.max_freq_width = get<int>(j, "freq_width", w);
  s.policy.num_time_masks = get<int>(j, "time_masks", w);
  s.policy.max_time_width = get<int>(j, "time_width", w);
  s.seed = seed;
  if (s.epochs < 0 || s.batch_utterances < 1 || !(s.max_batch_seconds > 0) || !(s.peak_lr > 0) ||
      s.warmup_steps < 0 || s.grad_clip < 0)
    throw ValidationError("schedule values out of range");
  return s;
}

DecodeConfig decode_config_from_json(const json& j) {
  const std::string w = "decode";
  DecodeConfig d;
  d.mode = parse_decode_mode(get<std::string>(j, "mode", w));
  d.beam_size = get<int>(j, "beam_size", w);
  d.lm_weight = get<double>(j, "lm_weight", w);
  d.ctc_weight_decode = get<double>(j, "ctc_weight_decode", w);
  d.length_penalty = get<double>(j, "length_penalty", w);
  d.max_length = get<int>(j, "max_length", w);
  d.validate();
  return d;
}

ModelConfig model_config_from_json(const json& j, int input_dim) {
  const std::string w = "model";
  ModelConfig c;
  c.input_dim = input_dim;
  c.enc_layers = get<int>(j, "enc_layers", w);
  c.enc_heads = get<int>(j, "enc_heads", w);
  c.enc_dim = get<int>(j, "enc_dim", w);
  c.enc_ffn = get<int>(j, "enc_ffn", w);
  c.conv_kernel = get<int>(j, "conv_kernel", w);
  c.dec_layers = get<int>(j, "dec_layers", w);
  c.ctc_weight = get<double>(j, "ctc_weight", w);
  c.dropout = get<double>(j, "dropout", w);
  c.label_smoothing = get<double>(j, "label_smoothing", w);
  c.validate();
  return c;
}

FbankConfig fbank_from_features_json(const json& j) {
  FbankConfig f;
  f.num_mel_bins = get<int>(j, "num_mel_bins", "features");
  f.frame_length = get<double>(j, "frame_length", "features");
  f.frame_shift = get<double>(j, "frame_shift", "features");
  if (f.num_mel_bins < 1 || !(f.frame_length > 0) || !(f.frame_shift > 0))
    throw ValidationError("features values out of range");
  return f;
}

namespace {

json stage_schedule_json(const json& cfg, const std::string& stage) {
  json s = cfg.at("schedule");
  for (const auto& [k, v] : cfg.at(stage).at("schedule").items()) {
    if (!s.contains(k)) throw ValidationError("unknown schedule key '" + stage + ".schedule." + k + "'");
    s[k] = v;
  }
  return s;
}

std::optional<double> cs_hours(const json& data) {
  const json& h = data.at("cs_hours");
  if (h.is_null() || (h.is_string() && h.get<std::string>() == "full")) return std::nullopt;
  if (!h.is_number()) throw ValidationError("data.cs_hours must be a number, \"full\" or null");
  double v = h.get<double>();
  if (!(v >= 0.0)) throw ValidationError("data.cs_hours must be non-negative");
  return v;
}

bool non_negative_int(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
}

}  // namespace

void validate_config(const json& cfg) {
  if (!cfg.is_object()) throw ValidationError("config must be an object");
  for (const auto& s : cfg.at("stages")) {
    if (!s.is_string() || !is_stage_name(s.get<std::string>()))
      throw ValidationError("unknown stage '" + s.dump() + "'");
  }
  for (const auto& [k, v] : cfg.at("seeds").items()) {
    if (!is_stage_name(k)) throw ValidationError("seeds names unknown stage '" + k + "'");
    if (!non_negative_int(v)) throw ValidationError("seeds." + k + " must be an unsigned integer");
  }
  if (!non_negative_int(cfg.at("seed"))) throw ValidationError("seed must be an unsigned integer");
  const FbankConfig fb = fbank_from_features_json(cfg.at("features"));
  model_config_from_json(cfg.at("model"), fb.num_mel_bins);
  for (const char* st : {"baseline_supervised", "ssl_pretrain", "finetune", "sst_train", "final_finetune"})
    schedule_from_json(stage_schedule_json(cfg, st), 0);
  decode_config_from_json(cfg.at("pseudotranscribe").at("decode"));
  decode_config_from_json(cfg.at("evaluate").at("decode"));
  parse_transcriber_kind(get<std::string>(cfg.at("pseudotranscribe"), "transcriber", "pseudotranscribe"));
  FilterPolicy fp;
  fp.min_confidence = get<double>(cfg.at("pseudotranscribe").at("filter"), "min_confidence", "filter");
  fp.validate();
  const json& data = cfg.at("data");
  cs_hours(data);
  parse_subset_strategy(get<std::string>(data, "subset_strategy", "data"));
  double hf = get<double>(data, "holdout_fraction", "data");
  if (!(hf >= 0.0 && hf < 1.0)) throw ValidationError("data.holdout_fraction must lie in [0, 1)");
  if (!(get<double>(data, "read_weight", "data") >= 0.0) || !(get<double>(data, "cs_weight", "data") >= 0.0))
    throw ValidationError("data weights must be non-negative");
  const json& km = cfg.at("kmeans");
  if (get<int>(km, "k", "kmeans") < 1 || get<int>(km, "max_iters", "kmeans") < 1)
    throw ValidationError("kmeans.k and kmeans.max_iters must be positive");
  const std::string init = get<std::string>(cfg.at("ssl_pretrain"), "init", "ssl_pretrain");
  if (init != "latest" && init != "random") throw ValidationError("ssl_pretrain.init must be 'latest' or 'random'");
  const int order = get<int>(cfg.at("lm"), "order", "lm");
  if (order < 1) throw ValidationError("lm.order must be positive");
  const std::string sm = get<std::string>(cfg.at("lm"), "smoothing", "lm");
  if (sm != "witten_bell" && sm != "none") throw ValidationError("lm.smoothing must be 'witten_bell' or 'none'");
  if (!cfg.at("corpus").at("toy").is_null()) ToyCorpusSpec::from_json(cfg.at("corpus").at("toy"));
  if (!cfg.at("dump_features").at("layer").is_null()) {
    int layer = get<int>(cfg.at("dump_features"), "layer", "dump_features");
    if (layer < 0 || layer > cfg.at("model").at("enc_layers").get<int>())
      throw ValidationError("dump_features.layer out of range");
  }
}

// ------------------------------------------------------------------ Plan

namespace {

// Artifacts each stage needs, and the stages producing them.
struct StageIo {
  std::vector<std::string> needs;
  std::vector<std::string> makes;
};

StageIo stage_io(const std::string& stage, const json& cfg) {
  if (stage == "baseline_supervised") return {{}, {"model"}};
  if (stage == "dump_features") return {{"model"}, {"features"}};
  if (stage == "kmeans") return {{"features"}, {"targets"}};
  if (stage == "ssl_pretrain") {
    StageIo io{{"targets"}, {"ssl_model"}};
    if (cfg.at("ssl_pretrain").at("init").get<std::string>() == "latest") io.needs.push_back("model");
    return io;
  }
  if (stage == "finetune") return {{"ssl_model"}, {"model"}};
  if (stage == "pseudotranscribe") {
    StageIo io{{}, {"pseudo"}};
    if (cfg.at("pseudotranscribe").at("transcriber").get<std::string>() != "external_command")
      io.needs.push_back("model");
    return io;
  }
  if (stage == "sst_train") return {{"pseudo", "model"}, {"model"}};
  if (stage == "final_finetune") return {{"model"}, {"model"}};
  if (stage == "evaluate") return {{"model"}, {"report"}};
  throw ValidationError("unknown stage '" + stage + "'");
}

bool external_input(const json& cfg, const std::string& artifact) {
  const json& in = cfg.at("inputs");
  return in.contains(artifact) && in.at(artifact).is_string() && !in.at(artifact).get<std::string>().empty();
}

}  // namespace

StagePlan StagePlan::from_config(const json& cfg, const std::string& experiment_dir) {
  StagePlan p;
  p.config = cfg;
  p.experiment_dir = experiment_dir;
  for (const auto& s : cfg.at("stages")) p.stages.push_back(s.get<std::string>());
  p.validate();
  return p;
}

std::string StagePlan::provider(const std::string& stage, const std::string& artifact) const {
  auto it = std::find(stages.begin(), stages.end(), stage);
  if (it == stages.end()) throw ValidationError("stage '" + stage + "' is not in the plan");
  for (auto p = std::make_reverse_iterator(it); p != stages.rend(); ++p) {
    auto io = stage_io(*p, config);
    if (std::find(io.makes.begin(), io.makes.end(), artifact) != io.makes.end()) return *p;
  }
  return "";
}

void StagePlan::validate() const {
  validate_config(config);
  if (experiment_dir.empty()) throw ValidationError("experiment directory not set");
  std::set<std::string> seen;
  for (const auto& s : stages) {
    if (!is_stage_name(s)) throw ValidationError("unknown stage '" + s + "'");
    if (!seen.insert(s).second) throw ValidationError("stage '" + s + "' appears twice in the plan");
  }
  for (const auto& s : stages) {
    for (const auto& need : stage_io(s, config).needs) {
      if (!provider(s, need).empty()) continue;
      if ((need == "model" || need == "pseudo") && external_input(config, need)) continue;
      std::string from;
      for (const auto& cand : stage_names())
        for (const auto& m : stage_io(cand, config).makes)
          if (m == need && from.empty()) from = cand;
      throw ValidationError("stage '" + s + "' needs '" + need + "', which no earlier stage produces (add '" + from +
                            "' before it)");
    }
  }
}

std::uint64_t StagePlan::seed_for(const std::string& stage) const {
  const json& seeds = config.at("seeds");
  if (seeds.contains(stage)) return seeds.at(stage).get<std::uint64_t>();
  return mix_seed(config.at("seed").get<std::uint64_t>(), fnv1a64(stage));
}

std::string StagePlan::config_hash(const std::string& stage) const {
  json h;
  h["stage"] = stage;
  h["seed"] = seed_for(stage);
  for (const char* k : {"corpus", "data", "features", "model", "lm", "inputs"}) h[k] = config.at(k);
  h["section"] = config.at(stage);
  if (config.at(stage).contains("schedule")) h["schedule"] = stage_schedule_json(config, stage);
  json up = json::object();
  for (const auto& need : stage_io(stage, config).needs) {
    std::string p = provider(stage, need);
    up[need] = p.empty() ? json(config.at("inputs").value(need, "")) : json(config_hash(p));
  }
  h["upstream"] = up;
  return hex64(fnv1a64(h.dump()));
}

std::string stage_dir(const StagePlan& plan, const std::string& stage) {
  return (fs::path(plan.experiment_dir) / "stages" / stage).string();
}

std::string stage_outputs(const StagePlan& plan, const std::string& stage) {
  return (fs::path(stage_dir(plan, stage)) / "outputs").string();
}

json read_marker(const StagePlan& plan, const std::string& stage) {
  const fs::path m = fs::path(stage_dir(plan, stage)) / "marker.json";
  if (!fs::exists(m)) return nullptr;
  try {
    return json::parse(read_file(m.string()));
  } catch (const json::exception& e) {
    throw ValidationError("unreadable marker " + m.string() + ": " + e.what());
  }
}

Manifest select_transcribed_cs(const Manifest& tcs, const json& data, std::uint64_t seed) {
  auto hours = cs_hours(data);
  if (!hours) return tcs;
  Manifest out;
  out.role = tcs.role;
  if (*hours == 0.0) return out;
  SubsetSpec spec;
  spec.target_duration = *hours * 3600.0;
  spec.strategy = parse_subset_strategy(data.at("subset_strategy").get<std::string>());
  spec.seed = seed;
  return select_subset(tcs, spec);
}

// ------------------------------------------------------------------ Running

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct Context {
  const StagePlan& plan;
  const RunOptions& opt;
  const json& cfg;
  fs::path root;
  fs::path corpus_dir;
  Manifest read, tcs, ucs, test;
  std::map<std::string, std::string> answers;
  // Training data after subset selection and holdout.
  Manifest gold_train, cs_train, cs_selected;
  Manifest valid_read, valid_cs;
  FeatureCache cache;
  std::optional<Lexicon> lexicon;
  std::optional<NgramLm> word_lm, char_lm;

  Context(const StagePlan& p, const RunOptions& o)
      : plan(p), opt(o), cfg(p.config), root(p.experiment_dir), cache(fbank_from_features_json(p.config.at("features"))) {}

  void log(const std::string& msg) const {
    if (opt.log) opt.log(msg);
  }

  void load_corpus() {
    const json& c = cfg.at("corpus");
    std::string dir = c.at("dir").get<std::string>();
    corpus_dir = dir.empty() ? root / "corpus" : fs::path(dir);
    const fs::path read_path = corpus_dir / c.at("read").get<std::string>();
    if (!fs::exists(read_path) && !c.at("toy").is_null()) {
      log("generating toy corpus in " + corpus_dir.string());
      make_toy_corpus(ToyCorpusSpec::from_json(c.at("toy")), corpus_dir.string());
    }
    auto load = [&](const char* key, Role role, bool required) {
      fs::path p = corpus_dir / c.at(key).get<std::string>();
      if (!fs::exists(p)) {
        if (required) throw ValidationError("corpus manifest missing: " + p.string());
        Manifest m;
        m.role = role;
        return m;
      }
      return load_manifest(p.string(), role);
    };
    read = load("read", Role::read, false);
    tcs = load("transcribed_cs", Role::transcribed_cs, false);
    ucs = load("untranscribed_cs", Role::untranscribed_cs, false);
    test = load("test", Role::transcribed_cs, true);
    const fs::path ans = corpus_dir / c.at("answers").get<std::string>();
    if (fs::exists(ans)) answers = load_answers(ans.string());

    const json& data = cfg.at("data");
    const std::uint64_t dseed = mix_seed(cfg.at("seed").get<std::uint64_t>(), fnv1a64("data"));
    cs_selected = select_transcribed_cs(tcs, data, dseed);
    const double hf = data.at("holdout_fraction").get<double>();
    auto [cs_tr, cs_va] = holdout_split(cs_selected, hf, mix_seed(dseed, 1));
    cs_train = cs_tr;
    valid_cs = cs_va;
    Manifest rd;
    rd.role = Role::read;
    if (data.at("use_read").get<bool>()) rd = read;
    auto [rd_tr, rd_va] = holdout_split(rd, hf, mix_seed(dseed, 2));
    valid_read = rd_va;
    std::vector<std::pair<Manifest, double>> parts;
    if (!rd_tr.empty()) parts.emplace_back(rd_tr, data.at("read_weight").get<double>());
    if (!cs_train.empty()) parts.emplace_back(cs_train, data.at("cs_weight").get<double>());
    gold_train = mix_manifests(parts);
  }

  std::vector<std::vector<std::string>> gold_texts(bool chars) const {
    std::vector<std::vector<std::string>> out;
    for (const auto& u : gold_train.utterances)
      if (u.text) out.push_back(chars ? char_tokens(*u.text) : word_tokens(*u.text));
    return out;
  }

  void build_language_resources() {
    if (lexicon) return;
    std::vector<std::string> texts;
    for (const auto& u : gold_train.utterances)
      if (u.text) texts.push_back(*u.text);
    lexicon = lexicon_from_texts(texts);
    NgramOptions o;
    o.order = cfg.at("lm").at("order").get<int>();
    o.smoothing = cfg.at("lm").at("smoothing").get<std::string>() == "none" ? Smoothing::none : Smoothing::witten_bell;
    word_lm = train_ngram(gold_texts(false), o);
    char_lm = train_ngram(gold_texts(true), o);
  }

  std::vector<Example> valid_examples(const AsrModel& m, bool cs_only) {
    Manifest v = valid_cs;
    if (!cs_only || v.empty())
      for (const auto& u : valid_read.utterances)
        if (!cs_only || valid_cs.empty()) v.utterances.push_back(u);
    return manifest_examples(m, v, cache).examples;
  }

  ExampleSet train_examples(const AsrModel& m, const Manifest& man) {
    ExampleSet s = manifest_examples(m, man, cache);
    if (s.skipped_short) log("skipped " + std::to_string(s.skipped_short) + " utterances shorter than 7 frames");
    if (s.unk_chars) log(std::to_string(s.unk_chars) + " transcript characters mapped to <unk>");
    return s;
  }

  std::string model_path(const std::string& stage) const {
    return (fs::path(stage_outputs(plan, stage)) / "model").string();
  }

  AsrModel input_model(const std::string& stage) const {
    std::string p = plan.provider(stage, "model");
    if (p.empty()) return load_checkpoint(cfg.at("inputs").at("model").get<std::string>());
    return load_checkpoint(model_path(p));
  }
};

Schedule stage_schedule(const Context& c, const std::string& stage) {
  Schedule s = schedule_from_json(stage_schedule_json(c.cfg, stage), c.plan.seed_for(stage));
  return s;
}

void write_log(const std::string& path, const TrainResult& r) {
  write_file(path, to_jsonl(r.log));
}

json train_summary(const TrainResult& r) {
  json v = json::array();
  for (double x : r.valid_losses) v.push_back(std::isfinite(x) ? json(x) : json(nullptr));
  return {{"best_epoch", r.best_epoch}, {"diverged", r.diverged}, {"valid_losses", v}, {"steps", r.log.size()}};
}

void check_diverged(const TrainResult& r, const std::string& stage) {
  if (r.diverged && r.best_epoch < 0) throw StageError(stage + ": training diverged before completing an epoch");
}

// Each stage writes into `out` and returns extra marker fields.
json run_baseline(Context& c, const std::string& st, const fs::path& out) {
  Vocabulary vocab = Vocabulary::from_manifests({&c.gold_train});
  const FbankConfig fb = c.cache.config();
  AsrModel model(model_config_from_json(c.cfg.at("model"), fb.num_mel_bins), vocab,
                 mix_seed(c.plan.seed_for(st), 0x1417));
  model.set_fbank(fb);
  if (c.gold_train.empty()) throw ValidationError(st + ": no transcribed training data");
  model.set_cmvn(manifest_cmvn({&c.gold_train}, c.cache));
  auto train = c.train_examples(model, c.gold_train);
  auto valid = c.valid_examples(model, false);
  Schedule s = stage_schedule(c, st);
  if (c.cfg.at("schedule").at("save_epoch_checkpoints").get<bool>()) s.checkpoint_dir = (out / "epochs").string();
  c.log(st + ": " + std::to_string(train.examples.size()) + " training utterances, " +
        std::to_string(valid.size()) + " validation");
  TrainResult r = train_supervised(model, train.examples, valid, s);
  check_diverged(r, st);
  record_stage(r.model, st, c.plan.config_hash(st), s.seed, "");
  save_checkpoint(r.model, (out / "model").string());
  write_log((out / "train_log.jsonl").string(), r);
  json j = train_summary(r);
  j["train_utterances"] = train.examples.size();
  j["cs_utterances"] = c.cs_train.size();
  j["cs_speakers"] = c.cs_selected.speakers().size();
  j["model_hash"] = r.model.hash();
  return j;
}

Manifest all_audio(const Context& c) {
  Manifest all;
  all.role = Role::mixed;
  std::set<std::string> ids;
  for (const Manifest* m : {&c.gold_train, &c.tcs, &c.ucs})
    for (const auto& u : m->utterances)
      if (ids.insert(u.utt_id).second) all.utterances.push_back(u);
  return all;
}

json run_dump_features(Context& c, const std::string& st, const fs::path& out) {
  AsrModel model = c.input_model(st);
  const json& layer_cfg = c.cfg.at("dump_features").at("layer");
  const int layer = layer_cfg.is_null() ? model.config().enc_layers / 2 : layer_cfg.get<int>();
  Manifest all = all_audio(c);
  auto feats = manifest_features(model, all, c.cache);
  std::vector<FeatureMatrix> keep;
  for (auto& f : feats)
    if (f.frames.rows() >= kMinInputFrames) keep.push_back(std::move(f));
  auto layer_feats = extract_layer_features(model, keep, layer);
  write_feature_archive((out / "features.ark").string(), layer_feats);
  write_manifest(all, (out / "audio.jsonl").string());
  return {{"layer", layer}, {"utterances", layer_feats.size()}};
}

json run_kmeans(Context& c, const std::string& st, const fs::path& out) {
  const std::string fs_stage = c.plan.provider(st, "features");
  const fs::path fdir = stage_outputs(c.plan, fs_stage);
  auto feats = read_feature_archive((fdir / "features.ark").string());
  int layer = read_marker(c.plan, fs_stage).at("layer").get<int>();
  ClusterFitOptions o;
  const json& k = c.cfg.at("kmeans");
  o.k = k.at("k").get<int>();
  o.max_iters = k.at("max_iters").get<int>();
  o.max_frames = k.at("max_frames").get<std::size_t>();
  o.seed = c.plan.seed_for(st);
  auto fit = fit_cluster_model(feats, layer, o);
  save_cluster_model(fit.model, (out / "clusters.bin").string());
  write_file((out / "targets.jsonl").string(), targets_to_jsonl(kmeans_assign(fit.model, feats)));
  json dist = json::array();
  for (double d : fit.fit.distortion) dist.push_back(d);
  return {{"k", o.k},           {"iterations", fit.fit.iterations}, {"converged", fit.fit.converged},
          {"frames_total", fit.frames_total}, {"frames_used", fit.frames_used}, {"distortion", dist}};
}

json run_ssl(Context& c, const std::string& st, const fs::path& out) {
  const std::string km = c.plan.provider(st, "targets");
  const fs::path kdir = stage_outputs(c.plan, km);
  auto targets = targets_from_jsonl(read_file((kdir / "targets.jsonl").string()));
  const int k = load_cluster_model((kdir / "clusters.bin").string()).k();
  AsrModel model;
  const json& sc = c.cfg.at(st);
  if (sc.at("init").get<std::string>() == "latest") {
    model = c.input_model(st);
  } else {
    // Random encoder with the baseline's vocabulary and normalization.
    AsrModel ref = load_checkpoint(
        (fs::path(stage_outputs(c.plan, c.plan.provider(c.plan.provider(km, "features"), "model"))) / "model").string());
    model = AsrModel(ref.config(), ref.vocab(), mix_seed(c.plan.seed_for(st), 0x55));
    model.set_fbank(ref.fbank());
    if (ref.cmvn()) model.set_cmvn(*ref.cmvn());
  }
  std::set<std::string> have;
  for (const auto& t : targets) have.insert(t.utt_id);
  Manifest audio;
  for (const auto& u : all_audio(c).utterances)
    if (have.count(u.utt_id)) audio.utterances.push_back(u);
  auto inputs = manifest_features(model, audio, c.cache);
  PretrainOptions po;
  po.span_mask = sc.at("span_mask").get<bool>();
  po.mask_prob = sc.at("mask_prob").get<double>();
  po.mask_span = sc.at("mask_span").get<int>();
  Schedule s = stage_schedule(c, st);
  const std::string parent = model.hash();
  auto r = pretrain_encoder(model, inputs, targets, k, s, po);
  if (r.diverged && r.epoch_ce.empty()) throw StageError(st + ": pretraining diverged");
  record_stage(r.model, st, c.plan.config_hash(st), s.seed, parent);
  save_checkpoint(r.model, (out / "model").string());
  json ce = json::array(), acc = json::array();
  for (double x : r.epoch_ce) ce.push_back(x);
  for (double x : r.epoch_accuracy) acc.push_back(x);
  write_file((out / "pretrain_log.json").string(), json{{"epoch_ce", ce}, {"epoch_accuracy", acc}}.dump(2) + "\n");
  return {{"utterances", inputs.size()}, {"final_accuracy", acc.empty() ? json(nullptr) : acc.back()},
          {"diverged", r.diverged}};
}

json run_finetune(Context& c, const std::string& st, const fs::path& out) {
  const std::string ssl = c.plan.provider(st, "ssl_model");
  AsrModel pre = load_checkpoint((fs::path(stage_outputs(c.plan, ssl)) / "model").string());
  auto train = c.train_examples(pre, c.gold_train);
  auto valid = c.valid_examples(pre, false);
  Schedule s = stage_schedule(c, st);
  const std::string parent = pre.hash();
  TrainResult r = finetune_from_pretrained(pre, train.examples, valid, s, mix_seed(s.seed, 0xF1));
  check_diverged(r, st);
  record_stage(r.model, st, c.plan.config_hash(st), s.seed, parent);
  save_checkpoint(r.model, (out / "model").string());
  write_log((out / "train_log.jsonl").string(), r);
  json j = train_summary(r);
  j["model_hash"] = r.model.hash();
  return j;
}

std::string substitute(std::string s, const std::string& key, const std::string& value) {
  for (auto p = s.find(key); p != std::string::npos; p = s.find(key, p + value.size())) s.replace(p, key.size(), value);
  return s;
}

json run_pseudo(Context& c, const std::string& st, const fs::path& out) {
  const json& pc = c.cfg.at(st);
  if (c.ucs.empty()) throw ValidationError(st + ": the untranscribed_cs manifest is empty");
  Transcriber tr;
  tr.kind = parse_transcriber_kind(pc.at("transcriber").get<std::string>());
  std::optional<AsrModel> model;
  c.build_language_resources();
  if (tr.kind == TranscriberKind::external_command) {
    tr.command = substitute(pc.at("command").get<std::string>(), "{corpus}", fs::absolute(c.corpus_dir).string());
    tr.work_dir = (out / "external").string();
  } else {
    model = c.input_model(st);
    tr.model = &*model;
    tr.decode = decode_config_from_json(pc.at("decode"));
    tr.resources.lexicon = &*c.lexicon;
    tr.resources.word_lm = &*c.word_lm;
    if (pc.at("decode").at("char_lm").get<bool>()) tr.resources.char_lm = &*c.char_lm;
  }
  PseudoLabelSet raw = pseudotranscribe(c.ucs, tr, c.plan.config_hash(st));
  // The command path may name the corpus location; keep provenance independent of it.
  if (tr.kind == TranscriberKind::external_command) raw.provenance.transcriber = "external_command: " + pc.at("command").get<std::string>();
  raw.provenance.created.clear();
  FilterPolicy fp;
  fp.min_confidence = pc.at("filter").at("min_confidence").get<double>();
  fp.drop_empty = pc.at("filter").at("drop_empty").get<bool>();
  fp.max_char_per_second = pc.at("filter").at("max_char_per_second").get<double>();
  PseudoLabelSet kept = filter_pseudolabels(raw, fp);
  // Relative audio paths keep the sidecar independent of the experiment location.
  save_pseudolabels(kept, (out / "pseudo.tsv").string());
  json j = {{"input", kept.report.input}, {"kept", kept.report.kept}};
  json dropped = json::object();
  for (const auto& [k, v] : kept.report.dropped) dropped[k] = v;
  j["dropped"] = dropped;
  // Quality of the pseudo labels against the sealed answers, when available.
  std::map<std::string, std::string> refs, hyps;
  for (const auto& e : raw.entries)
    if (c.answers.count(e.utt_id)) {
      refs[e.utt_id] = c.answers.at(e.utt_id);
      hyps[e.utt_id] = e.text;
    }
  if (!refs.empty()) {
    auto rep = word_error_rate(refs, hyps);
    auto cer = character_error_rate(refs, hyps);
    write_file((out / "pseudo_report.json").string(), report_json(rep, &cer));
    j["pseudo_wer"] = rep.error_rate;
  }
  return j;
}

PseudoLabelSet load_pseudo(const Context& c, const std::string& st) {
  std::string p = c.plan.provider(st, "pseudo");
  std::string path = p.empty() ? c.cfg.at("inputs").at("pseudo").get<std::string>()
                               : (fs::path(stage_outputs(c.plan, p)) / "pseudo.tsv").string();
  return load_pseudolabels(path);
}

json run_sst(Context& c, const std::string& st, const fs::path& out) {
  AsrModel start = c.input_model(st);
  PseudoLabelSet pseudo = load_pseudo(c, st);
  auto valid = c.valid_examples(start, false);
  Schedule s = stage_schedule(c, st);
  SstOptions so;
  so.gold_weight = c.cfg.at(st).at("gold_weight").get<double>();
  so.pseudo_weight = c.cfg.at(st).at("pseudo_weight").get<double>();
  so.config_hash = c.plan.config_hash(st);
  TrainResult r = train_sst(start, c.gold_train, pseudo, valid, s, so, c.cache);
  check_diverged(r, st);
  save_checkpoint(r.model, (out / "model").string());
  write_log((out / "train_log.jsonl").string(), r);
  json j = train_summary(r);
  j["pseudo_utterances"] = pseudo.entries.size();
  j["model_hash"] = r.model.hash();
  return j;
}

json run_final(Context& c, const std::string& st, const fs::path& out) {
  AsrModel model = c.input_model(st);
  Schedule s = stage_schedule(c, st);
  auto valid = c.valid_examples(model, true);
  auto r = final_finetune(model, c.cs_train, valid, s, c.cache, c.plan.config_hash(st));
  if (r.skipped) {
    c.log(st + ": no in-domain transcribed data; passing the model through");
    record_stage(r.train.model, st + "(skipped)", c.plan.config_hash(st), s.seed, model.hash());
  } else {
    check_diverged(r.train, st);
    write_log((out / "train_log.jsonl").string(), r.train);
  }
  save_checkpoint(r.train.model, (out / "model").string());
  json j = r.skipped ? json{{"skipped", true}} : train_summary(r.train);
  j["model_hash"] = r.train.model.hash();
  return j;
}

json run_evaluate(Context& c, const std::string& st, const fs::path& out) {
  AsrModel model = c.input_model(st);
  const json& ec = c.cfg.at(st);
  DecodeConfig dc = decode_config_from_json(ec.at("decode"));
  c.build_language_resources();
  DecodeResources res{&*c.lexicon, &*c.word_lm, ec.at("decode").at("char_lm").get<bool>() ? &*c.char_lm : nullptr};
  Manifest test = c.test;
  auto tr = transcribe_manifest(model, test, dc, res);
  std::map<std::string, std::string> refs, hyps;
  for (const auto& u : test.utterances) {
    refs[u.utt_id] = u.text.value_or("");
    hyps[u.utt_id] = "";
  }
  for (const auto& r : tr.rows) hyps[r.utt_id] = r.text;
  ScoreReport wer = word_error_rate(refs, hyps);
  ScoreReport cer = character_error_rate(refs, hyps);
  auto hours = cs_hours(c.cfg.at("data"));
  wer.metadata["cs_hours"] = hours ? std::to_string(*hours) : "full";
  wer.metadata["subset_strategy"] = c.cfg.at("data").at("subset_strategy").get<std::string>();
  wer.metadata["cs_speakers"] = std::to_string(c.cs_selected.speakers().size());
  wer.metadata["cs_utterances"] = std::to_string(c.cs_selected.size());
  wer.metadata["use_read"] = c.cfg.at("data").at("use_read").get<bool>() ? "true" : "false";
  std::string chain;
  for (const auto& rec : model.provenance()) chain += (chain.empty() ? "" : ",") + rec.stage;
  wer.metadata["provenance"] = chain;
  wer.metadata["decode_mode"] = to_string(dc.mode);
  if (c.plan.provider(st, "model").empty()) wer.metadata["model"] = "external";
  const std::string report = report_json(wer, &cer);
  write_file((out / "hypotheses.tsv").string(), hypotheses_tsv(tr.rows));
  write_file((out / "errors.tsv").string(), errors_tsv(tr.errors));
  write_file((out / "report.json").string(), report);
  write_file((out / "alignments.txt").string(), alignment_text(wer));
  fs::path reports = c.root / "reports";
  fs::create_directories(reports);
  fs::copy_file(out / "hypotheses.tsv", reports / "hypotheses.tsv", fs::copy_options::overwrite_existing);
  fs::copy_file(out / "report.json", reports / "report.json", fs::copy_options::overwrite_existing);
  fs::copy_file(out / "alignments.txt", reports / "alignments.txt", fs::copy_options::overwrite_existing);
  return {{"wer", wer.error_rate}, {"cer", cer.error_rate}, {"decode_errors", tr.errors.size()}};
}

json run_stage_body(Context& c, const std::string& st, const fs::path& out) {
  if (st == "baseline_supervised") return run_baseline(c, st, out);
  if (st == "dump_features") return run_dump_features(c, st, out);
  if (st == "kmeans") return run_kmeans(c, st, out);
  if (st == "ssl_pretrain") return run_ssl(c, st, out);
  if (st == "finetune") return run_finetune(c, st, out);
  if (st == "pseudotranscribe") return run_pseudo(c, st, out);
  if (st == "sst_train") return run_sst(c, st, out);
  if (st == "final_finetune") return run_final(c, st, out);
  if (st == "evaluate") return run_evaluate(c, st, out);
  throw ValidationError("unknown stage '" + st + "'");
}

bool try_reuse(const Context& c, const std::string& st, const std::string& hash) {
  for (const auto& root : c.opt.reuse_roots) {
    const fs::path src = fs::path(root) / "stages" / st;
    if (fs::weakly_canonical(src) == fs::weakly_canonical(fs::path(stage_dir(c.plan, st)))) continue;
    const fs::path marker = src / "marker.json";
    if (!fs::exists(marker)) continue;
    json m = json::parse(read_file(marker.string()));
    if (m.value("config_hash", "") != hash) continue;
    const fs::path dst = stage_dir(c.plan, st);
    fs::remove_all(dst);
    fs::create_directories(dst.parent_path());
    fs::copy(src, dst, fs::copy_options::recursive);
    c.log(st + ": reused from " + src.string());
    return true;
  }
  return false;
}

}  // namespace

RunResult run_pipeline(const StagePlan& plan, const RunOptions& opt) {
  plan.validate();
  for (const auto& s : opt.only)
    if (std::find(plan.stages.begin(), plan.stages.end(), s) == plan.stages.end())
      throw ValidationError("stage '" + s + "' is not in the plan");
  fs::create_directories(plan.experiment_dir);
  const fs::path cfg_path = fs::path(plan.experiment_dir) / "config.json";
  write_file(cfg_path.string(), plan.config.dump(2) + "\n");

  Context c(plan, opt);
  bool corpus_loaded = false;
  RunResult result;
  for (const auto& st : plan.stages) {
    const bool selected = opt.only.empty() || std::find(opt.only.begin(), opt.only.end(), st) != opt.only.end();
    const std::string hash = plan.config_hash(st);
    json marker = read_marker(plan, st);
    const bool complete = !marker.is_null();
    if (!selected) {
      // Stages outside the selection must already be complete under the current config when a
      // selected stage downstream consumes them.
      result.stages.push_back({st, StageStatus::skipped_complete, hash, 0.0});
      continue;
    }
    if (complete && !opt.force) {
      if (marker.value("config_hash", "") != hash)
        throw ValidationError("stage '" + st + "' completed under config hash " + marker.value("config_hash", "") +
                              " but the current config hashes to " + hash + "; pass --force to rerun it");
      c.log(st + ": complete, skipping");
      result.stages.push_back({st, StageStatus::skipped_complete, hash, 0.0});
      continue;
    }
    for (const auto& need : stage_io(st, plan.config).needs) {
      std::string p = plan.provider(st, need);
      if (p.empty()) continue;
      json pm = read_marker(plan, p);
      if (pm.is_null())
        throw ValidationError("stage '" + st + "' needs '" + need + "' from stage '" + p + "', which has not completed");
      if (pm.value("config_hash", "") != plan.config_hash(p))
        throw ValidationError("stage '" + st + "' needs '" + need + "' from stage '" + p +
                              "', which completed under a different config; rerun it with --force");
    }
    if (!opt.force && try_reuse(c, st, hash)) {
      result.stages.push_back({st, StageStatus::reused, hash, 0.0});
      continue;
    }
    if (!corpus_loaded) {
      c.load_corpus();
      corpus_loaded = true;
    }
    const fs::path dir = stage_dir(plan, st);
    fs::remove_all(dir);
    const fs::path out = fs::path(dir) / "outputs";
    fs::create_directories(out);
    c.log(st + ": running");
    auto t0 = std::chrono::steady_clock::now();
    json extra;
    try {
      extra = run_stage_body(c, st, out);
    } catch (const ValidationError&) {
      throw;
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(st + ": " + e.what());
    }
    const double secs = seconds_since(t0);
    json m = {{"stage", st}, {"config_hash", hash}, {"seed", plan.seed_for(st)}, {"status", "complete"}};
    json up = json::object();
    for (const auto& need : stage_io(st, plan.config).needs) {
      std::string p = plan.provider(st, need);
      up[need] = p.empty() ? json{{"external", plan.config.at("inputs").value(need, "")}}
                           : json{{"stage", p}, {"config_hash", plan.config_hash(p)}};
    }
    m["inputs"] = up;
    for (const auto& [k, v] : extra.items()) m[k] = v;
    m["seconds"] = secs;
    write_file((dir / "marker.json.tmp").string(), m.dump(2) + "\n");
    fs::rename(dir / "marker.json.tmp", dir / "marker.json");
    c.log(st + ": done in " + std::to_string(static_cast<int>(secs)) + " s");
    result.stages.push_back({st, StageStatus::ran, hash, secs});
  }
  if (std::find(plan.stages.begin(), plan.stages.end(), "evaluate") != plan.stages.end()) {
    json m = read_marker(plan, "evaluate");
    if (!m.is_null() && m.contains("wer")) result.wer = m.at("wer").get<double>();
  }
  return result;
}

// ------------------------------------------------------------------ Sweep

std::string SweepCondition::label() const {
  char buf[64];
  if (hours)
    std::snprintf(buf, sizeof buf, "h%g_%s", *hours, to_string(strategy).c_str());
  else
    std::snprintf(buf, sizeof buf, "full_%s", to_string(strategy).c_str());
  return buf;
}

SweepResult sweep_supervision(const json& config, const std::vector<std::optional<double>>& hours,
                              const std::vector<SubsetStrategy>& strategies, const std::string& dir,
                              const RunOptions& opt) {
  if (hours.empty() || strategies.empty()) throw ValidationError("sweep needs at least one hours value and strategy");
  SweepResult out;
  RunOptions ro = opt;
  std::vector<std::string> done;
  // Generate a shared toy corpus once so every condition reads the same audio.
  json base = config;
  if (base.at("corpus").at("dir").get<std::string>().empty())
    base["corpus"]["dir"] = (fs::path(dir) / "corpus").string();
  for (const auto& h : hours) {
    for (auto strat : strategies) {
      SweepRow row;
      row.condition = {h, strat};
      row.dir = (fs::path(dir) / "conditions" / row.condition.label()).string();
      try {
        json cfg = base;
        cfg["data"]["cs_hours"] = h ? json(*h) : json(nullptr);
        cfg["data"]["subset_strategy"] = to_string(strat);
        validate_config(cfg);
        StagePlan plan = StagePlan::from_config(cfg, row.dir);
        ro.reuse_roots = done;
        auto r = run_pipeline(plan, ro);
        row.wer = r.wer;
        json bm = read_marker(plan, plan.stages.front());
        // Selection bookkeeping straight from the data section.
        Context c(plan, ro);
        c.load_corpus();
        row.speakers = static_cast<int>(c.cs_selected.speakers().size());
        row.utterances = static_cast<int>(c.cs_selected.size());
        row.selected_hours = c.cs_selected.total_duration() / 3600.0;
        done.push_back(row.dir);
      } catch (const std::exception& e) {
        row.error = e.what();
        if (opt.log) opt.log("condition " + row.condition.label() + " failed: " + row.error);
      }
      out.rows.push_back(row);
    }
  }
  std::string t = "condition\tcs_hours\tstrategy\tspeakers\tutterances\tselected_hours\twer\terror\n";
  std::vector<std::string> row_labels, col_labels;
  std::map<std::pair<std::string, std::string>, double> cells;
  char buf[256];
  for (const auto& r : out.rows) {
    std::string hl = r.condition.hours ? ([&] {
      std::snprintf(buf, sizeof buf, "%g", *r.condition.hours);
      return std::string(buf);
    })()
                                       : std::string("full");
    std::string wer = "";
    if (r.wer) {
      std::snprintf(buf, sizeof buf, "%.2f", *r.wer);
      wer = buf;
    }
    std::snprintf(buf, sizeof buf, "%.4f", r.selected_hours);
    std::string err = r.error;
    std::replace(err.begin(), err.end(), '\t', ' ');
    std::replace(err.begin(), err.end(), '\n', ' ');
    t += r.condition.label() + "\t" + hl + "\t" + to_string(r.condition.strategy) + "\t" + std::to_string(r.speakers) +
         "\t" + std::to_string(r.utterances) + "\t" + buf + "\t" + wer + "\t" + err + "\n";
    const std::string rl = "cs_hours " + hl, cl = to_string(r.condition.strategy);
    if (std::find(row_labels.begin(), row_labels.end(), rl) == row_labels.end()) row_labels.push_back(rl);
    if (std::find(col_labels.begin(), col_labels.end(), cl) == col_labels.end()) col_labels.push_back(cl);
    if (r.wer) cells[{rl, cl}] = *r.wer;
  }
  out.table_tsv = t;
  out.grid_tsv = render_grid(row_labels, col_labels, cells);
  fs::create_directories(dir);
  write_file((fs::path(dir) / "sweep.tsv").string(), out.table_tsv);
  write_file((fs::path(dir) / "grid.tsv").string(), out.grid_tsv);
  return out;
}

}  // namespace lowsup
