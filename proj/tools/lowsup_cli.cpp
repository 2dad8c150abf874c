// lowsup: command-line driver for the low-supervision ASR pipeline.

#include "lowsup/pipeline.hpp"
#include "lowsup/toy_corpus.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace lowsup;

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 2;
constexpr int kStageFailure = 3;

struct Common {
  std::string config;
  std::string experiment_dir;
  std::optional<std::uint64_t> seed;
  bool force = false;
  std::vector<std::string> overrides;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c, bool needs_dir = true) {
  app->add_option("--config", c.config, "JSON config file (defaults are used for missing keys)");
  auto* d = app->add_option("--experiment-dir", c.experiment_dir, "Experiment directory");
  if (needs_dir) d->required();
  app->add_option("--seed", c.seed, "Global seed");
  app->add_flag("--force", c.force, "Rerun stages even if complete");
  app->add_option("--override", c.overrides, "Config override key=value (repeatable)")->allow_extra_args(false);
  app->add_flag("-q,--quiet", c.quiet, "Suppress progress messages");
}

json build_config(const Common& c) {
  json cfg = c.config.empty() ? default_config() : load_config(c.config);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  if (c.seed) cfg["seed"] = *c.seed;
  validate_config(cfg);
  return cfg;
}

RunOptions run_options(const Common& c) {
  RunOptions o;
  o.force = c.force;
  if (!c.quiet) o.log = [](const std::string& m) { std::cerr << "[lowsup] " << m << "\n"; };
  return o;
}

void print_result(const RunResult& r) {
  for (const auto& s : r.stages)
    std::cout << s.stage << "\t" << to_string(s.status) << "\t" << s.config_hash << "\n";
  if (r.wer) std::cout << "WER\t" << *r.wer << "\n";
}

std::optional<double> parse_hours(const std::string& s) {
  if (s == "full") return std::nullopt;
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size() || v < 0) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError("hours value '" + s + "' is neither a non-negative number nor 'full'");
  }
}

int score_command(const std::string& refs_path, const std::string& hyps_path, const std::string& out_dir,
                  bool relaxed) {
  std::map<std::string, std::string> refs;
  if (refs_path.ends_with(".tsv")) {
    for (const auto& r : parse_hypotheses_tsv(read_file(refs_path))) refs[r.utt_id] = r.text;
  } else {
    // A manifest with text, or an answers file.
    std::string contents = read_file(refs_path);
    bool answers = contents.find("\"split\"") != std::string::npos;
    if (answers) {
      refs = load_answers(refs_path);
    } else {
      for (const auto& u : load_manifest(refs_path).utterances) {
        if (!u.text) throw ValidationError("reference utterance " + u.utt_id + " has no text");
        refs[u.utt_id] = *u.text;
      }
    }
  }
  std::map<std::string, std::string> hyps;
  for (const auto& r : parse_hypotheses_tsv(read_file(hyps_path))) hyps[r.utt_id] = r.text;
  if (relaxed) {
    for (auto it = refs.begin(); it != refs.end();) it = hyps.count(it->first) ? std::next(it) : refs.erase(it);
  }
  for (const auto& [id, t] : refs)
    if (!hyps.count(id)) hyps[id] = "";
  for (const auto& [id, t] : hyps)
    if (!refs.count(id)) throw ValidationError("hypothesis " + id + " has no reference");
  auto wer = word_error_rate(refs, hyps);
  auto cer = character_error_rate(refs, hyps);
  std::cout << "WER\t" << wer.error_rate << "\nCER\t" << cer.error_rate << "\n";
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_file((fs::path(out_dir) / "report.json").string(), report_json(wer, &cer));
    write_file((fs::path(out_dir) / "alignments.txt").string(), alignment_text(wer));
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-supervision conversational ASR pipeline"};
  app.require_subcommand(1);
  std::function<int()> action;

  Common run_c;
  auto* run = app.add_subcommand("run", "Run every stage of the plan, skipping completed ones");
  add_common(run, run_c);
  run->callback([&] {
    action = [&] {
      auto cfg = build_config(run_c);
      auto r = run_pipeline(StagePlan::from_config(cfg, run_c.experiment_dir), run_options(run_c));
      print_result(r);
      return kOk;
    };
  });

  std::map<std::string, Common> stage_c;
  for (const auto& name : stage_names()) stage_c[name];
  for (const auto& name : stage_names()) {
    auto* sub = app.add_subcommand(name, "Run only the " + name + " stage; its inputs must be complete");
    Common& c = stage_c[name];
    add_common(sub, c);
    sub->callback([&, name] {
      action = [&, name] {
        auto cfg = build_config(c);
        RunOptions o = run_options(c);
        o.only = {name};
        print_result(run_pipeline(StagePlan::from_config(cfg, c.experiment_dir), o));
        return kOk;
      };
    });
  }

  Common sweep_c;
  std::vector<std::string> hours{"full"};
  std::vector<std::string> strategies{"random_utterance"};
  auto* sweep = app.add_subcommand("sweep", "Run the plan per supervision amount and selection strategy");
  add_common(sweep, sweep_c);
  sweep->add_option("--hours", hours, "Transcribed cs hours per condition, or 'full'")->delimiter(',');
  sweep->add_option("--strategies", strategies, "random_utterance and/or by_speaker")->delimiter(',');
  sweep->callback([&] {
    action = [&] {
      auto cfg = build_config(sweep_c);
      std::vector<std::optional<double>> hs;
      for (const auto& h : hours) hs.push_back(parse_hours(h));
      std::vector<SubsetStrategy> ss;
      for (const auto& s : strategies) ss.push_back(parse_subset_strategy(s));
      auto r = sweep_supervision(cfg, hs, ss, sweep_c.experiment_dir, run_options(sweep_c));
      std::cout << r.table_tsv << "\n" << r.grid_tsv;
      for (const auto& row : r.rows)
        if (!row.error.empty()) return kStageFailure;
      return kOk;
    };
  });

  Common toy_c;
  std::string toy_out;
  auto* toy = app.add_subcommand("make-toy-corpus", "Generate the synthetic toy corpus");
  add_common(toy, toy_c, false);
  toy->add_option("--out", toy_out, "Output directory (default <experiment-dir>/corpus)");
  toy->callback([&] {
    action = [&] {
      ToyCorpusSpec spec;
      if (!toy_c.config.empty()) {
        json j = json::parse(read_file(toy_c.config));
        // Either a bare toy spec or a pipeline config carrying one.
        if (j.contains("corpus")) j = j.at("corpus").value("toy", json::object());
        if (j.is_null()) j = json::object();
        spec = ToyCorpusSpec::from_json(j);
      }
      json sj = spec.to_json();
      for (const auto& o : toy_c.overrides) apply_override(sj, o, false);
      if (toy_c.seed) sj["seed"] = *toy_c.seed;
      spec = ToyCorpusSpec::from_json(sj);
      std::string out = toy_out;
      if (out.empty()) {
        if (toy_c.experiment_dir.empty()) throw ValidationError("pass --out or --experiment-dir");
        out = (fs::path(toy_c.experiment_dir) / "corpus").string();
      }
      if (fs::exists(fs::path(out) / ToyCorpus::kRead) && !toy_c.force)
        throw ValidationError("corpus already exists in " + out + "; pass --force to regenerate");
      auto c = make_toy_corpus(spec, out);
      std::cout << "read\t" << c.read.size() << "\ntranscribed_cs\t" << c.transcribed_cs.size()
                << "\nuntranscribed_cs\t" << c.untranscribed_cs.size() << "\ntest_cs\t" << c.test_cs.size() << "\n";
      return kOk;
    };
  });

  std::string refs, hyps, score_out;
  bool relaxed = false;
  auto* score = app.add_subcommand("score", "Score a hypothesis TSV against references");
  score->add_option("--refs", refs, "Reference manifest (.jsonl with text), answers file, or TSV")->required();
  score->add_option("--hyps", hyps, "Hypothesis TSV")->required();
  score->add_option("--out", score_out, "Directory for report.json and alignments.txt");
  score->add_flag("--subset", relaxed, "Score only references that have a hypothesis");
  score->callback([&] { action = [&] { return score_command(refs, hyps, score_out, relaxed); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kOk : kValidation;
  }
  try {
    return action ? action() : kOk;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const StageError& e) {
    std::cerr << "stage failed: " << e.what() << "\n";
    return kStageFailure;
  } catch (const std::exception& e) {
    std::cerr << "stage failed: " << e.what() << "\n";
    return kStageFailure;
  }
}
