#pragma once

#include "lowsup/common.hpp"
#include "lowsup/features.hpp"
#include "lowsup/model.hpp"
#include "lowsup/train.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace lowsup {

/// Activations after encoder layer `layer` for each input (features already normalized).
std::vector<FeatureMatrix> extract_layer_features(const AsrModel& model, const std::vector<FeatureMatrix>& inputs,
                                                  int layer);

struct KmeansFit {
  Mat centroids;                    // k x d
  std::vector<int> assignment;      // final assignment of the fitted points
  std::vector<double> distortion;   // mean squared distance after each assignment step
  int iterations = 0;
  bool converged = false;           // stopped on an assignment fixpoint
  int reseeded = 0;                 // empty clusters moved to a far point
};

/// Lloyd iterations from k-means++ seeding.
KmeansFit kmeans_fit(const Mat& points, int k, std::uint64_t seed, int max_iters = 100);

/// Nearest centroid by squared Euclidean distance; ties go to the lowest index.
std::vector<int> nearest_centroid(const Mat& centroids, const Mat& points);

struct ClusterModel {
  Mat centroids;  // in standardized space
  int source_layer = 0;
  RowVec mean;    // applied as (x - mean) / stdev before distances
  RowVec stdev;

  int k() const { return static_cast<int>(centroids.rows()); }
  int dim() const { return static_cast<int>(centroids.cols()); }
};

struct ClusterFitOptions {
  int k = 100;
  int max_iters = 100;
  std::size_t max_frames = 1000000;  // uniform subsample above this many frames
  std::uint64_t seed = 0;
};

struct ClusterFitResult {
  ClusterModel model;
  KmeansFit fit;
  std::size_t frames_total = 0;
  std::size_t frames_used = 0;
};

ClusterFitResult fit_cluster_model(const std::vector<FeatureMatrix>& layer_features, int source_layer,
                                   const ClusterFitOptions& opt);

struct ClusterTargets {
  std::string utt_id;
  std::vector<int> labels;
};

std::vector<int> kmeans_assign(const ClusterModel& cm, const Mat& features);
std::vector<ClusterTargets> kmeans_assign(const ClusterModel& cm, const std::vector<FeatureMatrix>& features);

/// Binary little-endian float64 centroids plus `path + ".json"` with k, d, layer and stats.
void save_cluster_model(const ClusterModel& cm, const std::string& path);
ClusterModel load_cluster_model(const std::string& path);

std::string targets_to_jsonl(const std::vector<ClusterTargets>& t);
std::vector<ClusterTargets> targets_from_jsonl(const std::string& text);

struct PretrainOptions {
  bool span_mask = false;  // HuBERT-style masked prediction; loss on masked frames only
  double mask_prob = 0.08;
  int mask_span = 10;      // input frames
};

struct PretrainResult {
  AsrModel model;
  std::vector<double> epoch_ce;        // mean frame CE per epoch (training mode)
  std::vector<double> epoch_accuracy;  // eval-mode frame accuracy after each epoch
  ag::Parameter head_w, head_b;        // discarded classifier, kept for inspection
  bool diverged = false;
};

/// Frame-level CE of a linear head of width k over encoder outputs. Only encoder
/// parameters (and the temporary head) are optimized.
PretrainResult pretrain_encoder(AsrModel model, const std::vector<FeatureMatrix>& inputs,
                                const std::vector<ClusterTargets>& targets, int k, const Schedule& schedule,
                                const PretrainOptions& popt = {});

/// Eval-mode frame accuracy of `head` on the targets.
double frame_accuracy(const AsrModel& model, const ag::Parameter& head_w, const ag::Parameter& head_b,
                      const std::vector<FeatureMatrix>& inputs, const std::vector<ClusterTargets>& targets);

/// Fresh decoder and CTC head from `seed`, then joint training.
TrainResult finetune_from_pretrained(AsrModel pretrained, const std::vector<Example>& train,
                                     const std::vector<Example>& valid, const Schedule& schedule, std::uint64_t seed);

/// Aligns target length to the encoder length: equal or off by one (truncated), otherwise an error.
std::vector<int> align_targets(const std::vector<int>& labels, Eigen::Index frames, const std::string& utt_id);

}  // namespace lowsup
