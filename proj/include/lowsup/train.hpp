#pragma once

#include "lowsup/autograd.hpp"
#include "lowsup/corpus.hpp"
#include "lowsup/features.hpp"
#include "lowsup/model.hpp"

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

namespace lowsup {

struct Schedule {
  int epochs = 30;
  int batch_utterances = 16;
  double max_batch_seconds = 1000.0;
  double peak_lr = 2e-3;
  int warmup_steps = 100;
  double grad_clip = 5.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  bool spec_augment = true;
  SpecAugmentPolicy policy;
  std::uint64_t seed = 0;
  std::string checkpoint_dir;  // per-epoch checkpoints when non-empty
};

/// Linear warmup to peak_lr, then inverse square-root decay.
double learning_rate(const Schedule& s, long step);

class Adam {
 public:
  Adam(std::vector<ag::Parameter*> params, const Schedule& s);
  /// Clips the global gradient norm, applies one update and returns the pre-clip norm.
  double step(double lr);
  void zero_grad();

 private:
  std::vector<ag::Parameter*> params_;
  std::vector<Mat> m_, v_;
  double b1_, b2_, eps_, clip_;
  long t_ = 0;
};

/// Consecutive batches over `order` capped by count and total seconds.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                   const std::vector<double>& seconds, const Schedule& s);

/// Indices of one epoch under per-item weights (integer part replicated, fraction Bernoulli).
std::vector<std::size_t> weighted_epoch(const std::vector<double>& weights, std::uint64_t seed);

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

struct TrainLogEntry {
  long step = 0;
  int epoch = 0;
  double ctc = 0.0;
  double ce = 0.0;
  double joint = 0.0;
  double lr = 0.0;
  // Joint loss restricted to gold / pseudo-labelled items; NaN when absent from the batch.
  double joint_gold = std::numeric_limits<double>::quiet_NaN();
  double joint_pseudo = std::numeric_limits<double>::quiet_NaN();
};

std::string to_jsonl(const std::vector<TrainLogEntry>& log);

struct TrainResult {
  AsrModel model;
  std::vector<TrainLogEntry> log;
  std::vector<double> valid_losses;  // per epoch
  int best_epoch = -1;               // -1 when no epoch ran
  bool diverged = false;
};

/// Joint CTC + attention training. The best epoch by validation joint loss is
/// returned (the last epoch when `valid` is empty).
/// `trainable` restricts which parameters are updated (null: all).
TrainResult train_supervised(AsrModel model, const std::vector<Example>& train, const std::vector<Example>& valid,
                             const Schedule& schedule,
                             std::function<bool(const std::string&)> trainable = nullptr);

std::vector<double> example_seconds(const std::vector<Example>& xs, double frame_shift);

/// Raw filterbank frames per audio path, computed on first use.
class FeatureCache {
 public:
  explicit FeatureCache(FbankConfig cfg = {}) : cfg_(cfg) {}
  const FbankConfig& config() const { return cfg_; }
  const Mat& fbank(const std::string& audio_path);
  std::size_t size() const { return cache_.size(); }

 private:
  FbankConfig cfg_;
  std::map<std::string, Mat> cache_;
};

/// Normalized features and encoded transcripts for every utterance of `m`.
/// Transcripts are required; utterances too short for the encoder are skipped and counted.
struct ExampleSet {
  std::vector<Example> examples;
  int skipped_short = 0;
  int unk_chars = 0;
};
ExampleSet manifest_examples(const AsrModel& model, const Manifest& m, FeatureCache& cache,
                             const std::string& tag = "gold");

/// Normalized features only, in manifest order; short utterances are kept.
std::vector<FeatureMatrix> manifest_features(const AsrModel& model, const Manifest& m, FeatureCache& cache);

/// CMVN statistics of the raw filterbank frames of every utterance in `ms`.
CmvnStats manifest_cmvn(const std::vector<const Manifest*>& ms, FeatureCache& cache);

}  // namespace lowsup
