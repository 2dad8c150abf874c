#include "lowsup/ctc.hpp"
#include "lowsup/decode.hpp"
#include "lowsup/eval.hpp"
#include "lowsup/features.hpp"
#include "lowsup/lm.hpp"
#include "lowsup/pipeline.hpp"
#include "lowsup/ssl.hpp"
#include "lowsup/toy_corpus.hpp"

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <iostream>

namespace py = pybind11;
using nlohmann::json;
using namespace lowsup;

namespace {

json score_dict(const ScoreReport& r) {
  return {{"unit", r.unit},
          {"error_rate", r.error_rate},
          {"substitutions", r.totals.substitutions},
          {"deletions", r.totals.deletions},
          {"insertions", r.totals.insertions},
          {"correct", r.totals.correct},
          {"ref_tokens", r.totals.ref_tokens}};
}

RunOptions options(bool force, std::vector<std::string> only, bool verbose) {
  RunOptions o;
  o.force = force;
  o.only = std::move(only);
  if (verbose) o.log = [](const std::string& m) { std::cerr << "[lowsup] " << m << "\n"; };
  return o;
}

json run_result(const RunResult& r) {
  json stages = json::array();
  for (const auto& s : r.stages)
    stages.push_back({{"stage", s.stage}, {"status", to_string(s.status)}, {"config_hash", s.config_hash},
                      {"seconds", s.seconds}});
  return {{"stages", stages}, {"wer", r.wer ? json(*r.wer) : json(nullptr)}};
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Low-supervision ASR pipeline core";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  auto val = py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<InsufficientDataError>(m, "InsufficientDataError", val.ptr());
  py::register_exception<StageError>(m, "StageError", base.ptr());

  // Configuration and orchestration exchange JSON text; the Python package wraps dicts.
  m.def("stage_names", &stage_names);
  m.def("default_config", [] { return default_config().dump(); });
  m.def("merge_config", [](const std::string& user) { return merge_config(json::parse(user)).dump(); });
  m.def("apply_override", [](const std::string& cfg, const std::string& assignment) {
    json j = json::parse(cfg);
    apply_override(j, assignment);
    return j.dump();
  });
  m.def(
      "run_pipeline",
      [](const std::string& cfg, const std::string& dir, bool force, std::vector<std::string> only, bool verbose) {
        auto plan = StagePlan::from_config(json::parse(cfg), dir);
        RunResult r;
        {
          py::gil_scoped_release release;
          r = run_pipeline(plan, options(force, std::move(only), verbose));
        }
        return run_result(r).dump();
      },
      py::arg("config"), py::arg("experiment_dir"), py::arg("force") = false,
      py::arg("only") = std::vector<std::string>{}, py::arg("verbose") = false);
  m.def(
      "sweep_supervision",
      [](const std::string& cfg, const std::vector<std::optional<double>>& hours,
         const std::vector<std::string>& strategies, const std::string& dir, bool verbose) {
        std::vector<SubsetStrategy> ss;
        for (const auto& s : strategies) ss.push_back(parse_subset_strategy(s));
        SweepResult r;
        {
          py::gil_scoped_release release;
          r = sweep_supervision(json::parse(cfg), hours, ss, dir, options(false, {}, verbose));
        }
        json rows = json::array();
        for (const auto& row : r.rows)
          rows.push_back({{"label", row.condition.label()},
                          {"hours", row.condition.hours ? json(*row.condition.hours) : json(nullptr)},
                          {"strategy", to_string(row.condition.strategy)},
                          {"dir", row.dir},
                          {"speakers", row.speakers},
                          {"utterances", row.utterances},
                          {"selected_hours", row.selected_hours},
                          {"wer", row.wer ? json(*row.wer) : json(nullptr)},
                          {"error", row.error}});
        return json{{"rows", rows}, {"table_tsv", r.table_tsv}, {"grid_tsv", r.grid_tsv}}.dump();
      },
      py::arg("config"), py::arg("hours"), py::arg("strategies"), py::arg("experiment_dir"),
      py::arg("verbose") = false);
  m.def("make_toy_corpus", [](const std::string& spec, const std::string& out_dir) {
    auto c = make_toy_corpus(ToyCorpusSpec::from_json(json::parse(spec)), out_dir);
    return json{{"read", c.read.size()},
                {"transcribed_cs", c.transcribed_cs.size()},
                {"untranscribed_cs", c.untranscribed_cs.size()},
                {"test_cs", c.test_cs.size()}}
        .dump();
  });
  m.def("default_toy_spec", [] { return ToyCorpusSpec{}.to_json().dump(); });

  m.def(
      "word_error_rate",
      [](const std::map<std::string, std::string>& refs, const std::map<std::string, std::string>& hyps) {
        return score_dict(word_error_rate(refs, hyps)).dump();
      },
      py::arg("refs"), py::arg("hyps"));
  m.def(
      "character_error_rate",
      [](const std::map<std::string, std::string>& refs, const std::map<std::string, std::string>& hyps,
         bool include_spaces) { return score_dict(character_error_rate(refs, hyps, include_spaces)).dump(); },
      py::arg("refs"), py::arg("hyps"), py::arg("include_spaces") = true);
  m.def("edit_distance", &edit_distance);

  m.def(
      "ctc_loss",
      [](const Mat& log_probs, const std::vector<int>& target, int blank) { return ctc_loss(log_probs, target, blank); },
      py::arg("log_probs"), py::arg("target"), py::arg("blank") = 0);
  m.def(
      "fbank",
      [](const std::vector<double>& samples, int sample_rate, int num_mel_bins) {
        Audio a;
        a.samples = samples;
        a.sample_rate = sample_rate;
        FbankConfig cfg;
        cfg.sample_rate = sample_rate;
        cfg.num_mel_bins = num_mel_bins;
        return compute_fbank(a, cfg).frames;
      },
      py::arg("samples"), py::arg("sample_rate") = 16000, py::arg("num_mel_bins") = 80);
  m.def(
      "kmeans_fit",
      [](const Mat& points, int k, std::uint64_t seed, int max_iters) {
        auto f = kmeans_fit(points, k, seed, max_iters);
        return py::make_tuple(f.centroids, f.assignment, f.distortion, f.converged);
      },
      py::arg("points"), py::arg("k"), py::arg("seed") = 0, py::arg("max_iters") = 100);

  py::class_<NgramLm>(m, "NgramLm")
      .def_static(
          "train",
          [](const std::vector<std::string>& sentences, int order, const std::string& smoothing) {
            NgramOptions o;
            o.order = order;
            if (smoothing == "none")
              o.smoothing = Smoothing::none;
            else if (smoothing != "witten_bell")
              throw ValidationError("unknown smoothing '" + smoothing + "'");
            std::vector<std::vector<std::string>> toks;
            for (const auto& s : sentences) toks.push_back(word_tokens(s));
            return train_ngram(toks, o);
          },
          py::arg("sentences"), py::arg("order") = 3, py::arg("smoothing") = "witten_bell")
      .def_static("from_arpa", &NgramLm::from_arpa)
      .def("to_arpa", &NgramLm::to_arpa)
      .def_property_readonly("order", &NgramLm::order)
      .def("score", [](const NgramLm& lm, const std::string& sentence) { return lm.score(word_tokens(sentence)).log10_prob; })
      .def("max_normalization_error", &NgramLm::max_normalization_error);

  m.def("hypotheses_from_tsv", [](const std::string& text) {
    std::vector<std::tuple<std::string, std::string, double>> out;
    for (const auto& r : parse_hypotheses_tsv(text)) out.emplace_back(r.utt_id, r.text, r.confidence);
    return out;
  });
}
