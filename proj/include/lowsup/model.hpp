#pragma once

#include "lowsup/autograd.hpp"
#include "lowsup/common.hpp"
#include "lowsup/corpus.hpp"
#include "lowsup/features.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace lowsup {

/// Output units: blank, a shared sos/eos, unk, then characters.
class Vocabulary {
 public:
  static constexpr int kBlank = 0;
  static constexpr int kSosEos = 1;
  static constexpr int kUnk = 2;
  static constexpr int kNumSpecial = 3;

  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& characters);

  /// Sorted set of characters appearing in the transcripts of `manifests`.
  static Vocabulary from_manifests(const std::vector<const Manifest*>& manifests);

  int size() const { return static_cast<int>(symbols_.size()); }
  const std::vector<std::string>& symbols() const { return symbols_; }
  std::vector<std::string> characters() const;
  std::optional<int> find(const std::string& ch) const;
  const std::string& symbol(int id) const { return symbols_.at(static_cast<std::size_t>(id)); }

  /// Unknown characters become kUnk and are counted in *unk_count.
  std::vector<int> encode(std::string_view text, int* unk_count = nullptr) const;
  std::string decode(std::span<const int> ids) const;

  bool operator==(const Vocabulary& o) const { return symbols_ == o.symbols_; }

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> index_;
};

struct ModelConfig {
  int input_dim = 80;
  int enc_layers = 4;
  int enc_heads = 4;
  int enc_dim = 64;
  int enc_ffn = 256;
  int conv_kernel = 15;
  int dec_layers = 2;
  int subsample_factor = 4;
  double ctc_weight = 0.3;
  double dropout = 0.1;
  double label_smoothing = 0.1;

  static ModelConfig desk();
  /// 12 encoder layers, 4 heads, 256-dim, 2048 FFN, 6 decoder layers.
  static ModelConfig paper();

  void validate() const;
};

struct StageRecord {
  std::string stage;
  std::string config_hash;
  std::string parent_hash;
  std::uint64_t seed = 0;
};

/// Parameters are named "encoder.*", "ctc.*" and "decoder.*".
class AsrModel {
 public:
  AsrModel() = default;
  AsrModel(ModelConfig config, Vocabulary vocab, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  const FbankConfig& fbank() const { return fbank_; }
  void set_fbank(const FbankConfig& f) { fbank_ = f; }
  const std::optional<CmvnStats>& cmvn() const { return cmvn_; }
  void set_cmvn(CmvnStats s) { cmvn_ = std::move(s); }

  std::vector<ag::Parameter>& params() { return params_; }
  const std::vector<ag::Parameter>& params() const { return params_; }
  ag::Parameter& param(const std::string& name);
  const ag::Parameter& param(const std::string& name) const;
  std::size_t num_scalars() const;

  /// Re-draws every parameter whose name starts with `prefix`.
  void reinitialize(const std::string& prefix, std::uint64_t seed);

  std::vector<StageRecord>& provenance() { return provenance_; }
  const std::vector<StageRecord>& provenance() const { return provenance_; }

  /// Hash over config, vocabulary, normalization stats and parameter bytes.
  std::string hash() const;

  /// Fbank then CMVN (when present) for one waveform.
  FeatureMatrix featurize(const Audio& audio) const;
  Mat normalize(const Mat& fbank_frames) const;

 private:
  void add_param(const std::string& name, Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng,
                 char init);
  void build(std::uint64_t seed);

  ModelConfig config_;
  Vocabulary vocab_;
  FbankConfig fbank_;
  std::optional<CmvnStats> cmvn_;
  std::vector<ag::Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<StageRecord> provenance_;
};

/// Encoder output length for T input frames: two stride-2 convolutions
/// with kernel 3 and padding 1, i.e. ceil(ceil(T / 2) / 2) = ceil(T / 4).
Eigen::Index subsampled_length(Eigen::Index t);
/// Smallest accepted input: the receptive field of the two convolutions.
constexpr Eigen::Index kMinInputFrames = 7;

Mat sinusoidal_positions(Eigen::Index length, Eigen::Index dim);

/// Per-forward options; eval mode is the default.
struct ForwardOptions {
  bool train = false;
  std::mt19937_64* rng = nullptr;  // dropout source in train mode
  std::function<bool(const std::string&)> trainable;  // null: all parameters trainable
};

/// Builds encoder graph; returns activations after each layer (index 0 = front-end).
std::vector<ag::Var> encoder_graph(ag::Graph& g, AsrModel& model, const Mat& features,
                                   const ForwardOptions& opt, int stop_after_layer = -1);
ag::Var ctc_logits_graph(ag::Graph& g, AsrModel& model, ag::Var encoded, const ForwardOptions& opt);
ag::Var decoder_graph(ag::Graph& g, AsrModel& model, ag::Var memory, std::span<const int> input_ids,
                      const ForwardOptions& opt);

/// Eval-mode encoder output (T' x enc_dim) for normalized features.
Mat forward_encoder(const AsrModel& model, const Mat& features);
/// Eval-mode activations after `layer` (0 = subsampling front-end, enc_layers = final).
Mat encoder_layer_output(const AsrModel& model, const Mat& features, int layer);

struct EncodedBatch {
  std::vector<Mat> encodings;  // each valid-length x enc_dim
  std::vector<Eigen::Index> lengths;
};
/// Padded batch: rows beyond lengths[i] of padded[i] are ignored.
EncodedBatch forward_encoder_batch(const AsrModel& model, const std::vector<Mat>& padded,
                                   const std::vector<Eigen::Index>& lengths);

/// CTC log-posteriors (T' x V) from encodings.
Mat ctc_log_posteriors(const AsrModel& model, const Mat& encodings);
/// Decoder log-probabilities (L x V) for teacher-forced input ids.
Mat decoder_log_probs(const AsrModel& model, const Mat& encodings, std::span<const int> input_ids);

/// Mean per-token label-smoothed CE of the decoder for `target` (no sos/eos).
double decoder_ce_loss(const AsrModel& model, const Mat& encodings, std::span<const int> target,
                       std::optional<double> label_smoothing = std::nullopt);

struct Example {
  std::string utt_id;
  Mat features;             // normalized, T x input_dim
  std::vector<int> target;  // character ids, no sos/eos
  double weight = 1.0;
  std::string tag = "gold";
};

struct LossParts {
  double ctc = 0.0;    // CTC summed over the batch / CTC token count
  double ce = 0.0;     // CE summed over the batch / decoder token count
  double joint = 0.0;  // lambda * ctc + (1 - lambda) * ce
  double ctc_tokens = 0.0;
  double ce_tokens = 0.0;
  int infeasible_ctc = 0;
  std::vector<double> item_ctc;     // per example; NaN when not computed or infeasible
  std::vector<double> item_ce_sum;  // per example, summed over its tokens
};

/// Joint loss of a batch. With `opt.train` dropout is active; with `backward`
/// gradients of the joint loss are added into the parameters' grad fields.
LossParts joint_loss(AsrModel& model, std::span<const Example* const> batch, double lambda,
                     const ForwardOptions& opt = {}, bool backward = false);
LossParts joint_loss(const AsrModel& model, std::span<const Example* const> batch, double lambda);

/// Checkpoint directory: config.json, params.json + params.bin, provenance.json.
void save_checkpoint(const AsrModel& model, const std::string& dir);
AsrModel load_checkpoint(const std::string& dir);

}  // namespace lowsup
