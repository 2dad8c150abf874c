#pragma once

#include "lowsup/common.hpp"
#include "lowsup/wav.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace lowsup {

struct FeatureMatrix {
  std::string utt_id;
  Mat frames;  // T x D
  double frame_shift = 0.01;
  double frame_length = 0.025;

  Eigen::Index num_frames() const { return frames.rows(); }
  Eigen::Index dim() const { return frames.cols(); }
};

struct FbankConfig {
  int sample_rate = 16000;
  double frame_length = 0.025;
  double frame_shift = 0.01;
  int num_mel_bins = 80;
  double low_freq = 20.0;
  double high_freq = 0.0;  // <= 0 means Nyquist
  double preemphasis = 0.97;
  bool remove_dc = true;
  double energy_floor = 1e-10;

  int window_samples() const;
  int shift_samples() const;
  int fft_size() const;
  double upper_freq() const;
};

double mel_scale(double hz);
double inverse_mel_scale(double mel);

/// Mel filter weights, num_mel_bins x (fft_size/2 + 1); triangles on the mel axis.
Mat mel_filterbank(const FbankConfig& cfg);

/// Frames produced for a given sample count: floor((n - window) / shift) + 1.
int num_frames_for(std::size_t num_samples, const FbankConfig& cfg);

FeatureMatrix compute_fbank(const Audio& audio, const FbankConfig& cfg = {});

struct CmvnStats {
  RowVec mean;
  RowVec var;
  int floored_dims = 0;
};

/// Streaming, mergeable per-dimension moments (Chan et al. pairwise update).
class CmvnAccumulator {
 public:
  void add(const Mat& frames);
  void merge(const CmvnAccumulator& other);
  CmvnStats finish(double var_floor = 1e-10) const;
  double count() const { return count_; }

 private:
  double count_ = 0.0;
  RowVec mean_;
  RowVec m2_;
};

CmvnStats estimate_cmvn(const std::vector<FeatureMatrix>& feats, double var_floor = 1e-10);
FeatureMatrix apply_cmvn(const FeatureMatrix& f, const CmvnStats& stats);
FeatureMatrix invert_cmvn(const FeatureMatrix& f, const CmvnStats& stats);

struct SpecAugmentPolicy {
  int num_freq_masks = 2;
  int max_freq_width = 27;
  int num_time_masks = 2;
  int max_time_width = 40;
  double fill_value = 0.0;
};

struct MaskRect {
  bool along_freq;  // true: feature dims [start, start+width); false: frames
  int start;
  int width;
};

/// Draws the masks spec_augment would apply for this (shape, policy, seed).
std::vector<MaskRect> draw_masks(Eigen::Index frames, Eigen::Index dim, const SpecAugmentPolicy& policy,
                                 std::uint64_t seed);
void apply_mask(Mat& frames, const MaskRect& mask, double fill_value);
FeatureMatrix spec_augment(const FeatureMatrix& f, const SpecAugmentPolicy& policy, std::uint64_t seed);

/// Binary feature archive plus a text index (utt_id TAB byte offset).
void write_feature_archive(const std::string& path, const std::vector<FeatureMatrix>& feats);
std::map<std::string, std::uint64_t> read_feature_index(const std::string& path);
std::vector<FeatureMatrix> read_feature_archive(const std::string& path);
FeatureMatrix read_feature_at(const std::string& path, std::uint64_t offset);

}  // namespace lowsup
