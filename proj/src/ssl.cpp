#include "lowsup/ssl.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace lowsup {

using nlohmann::json;

std::vector<FeatureMatrix> extract_layer_features(const AsrModel& model, const std::vector<FeatureMatrix>& inputs,
                                                  int layer) {
  if (layer < 0 || layer > model.config().enc_layers)
    throw ValidationError("layer index " + std::to_string(layer) + " outside [0, " +
                          std::to_string(model.config().enc_layers) + "]");
  std::vector<FeatureMatrix> out;
  out.reserve(inputs.size());
  for (const auto& f : inputs) {
    FeatureMatrix o;
    o.utt_id = f.utt_id;
    o.frames = encoder_layer_output(model, f.frames, layer);
    o.frame_shift = f.frame_shift * model.config().subsample_factor;
    o.frame_length = f.frame_length;
    out.push_back(std::move(o));
  }
  return out;
}

namespace {

double sqdist(const Mat& a, Eigen::Index i, const Mat& b, Eigen::Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

// Returns nearest index per point and fills the distances.
std::vector<int> assign(const Mat& c, const Mat& x, std::vector<double>* dist) {
  std::vector<int> lab(static_cast<std::size_t>(x.rows()));
  if (dist) dist->assign(lab.size(), 0.0);
  // ||x||^2 - 2 x.c + ||c||^2, but ties must be exact, so use direct differences.
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < c.rows(); ++j) {
      double d = sqdist(x, i, c, j);
      if (d < bd) {
        bd = d;
        best = static_cast<int>(j);
      }
    }
    lab[static_cast<std::size_t>(i)] = best;
    if (dist) (*dist)[static_cast<std::size_t>(i)] = bd;
  }
  return lab;
}

}  // namespace

std::vector<int> nearest_centroid(const Mat& centroids, const Mat& points) {
  if (centroids.cols() != points.cols())
    throw ValidationError("dimension mismatch: centroids have " + std::to_string(centroids.cols()) +
                          " dims, features " + std::to_string(points.cols()));
  return assign(centroids, points, nullptr);
}

KmeansFit kmeans_fit(const Mat& x, int k, std::uint64_t seed, int max_iters) {
  const Eigen::Index n = x.rows();
  if (k < 1) throw ValidationError("k must be at least 1");
  if (n < k) throw ValidationError("k-means needs at least k points (N=" + std::to_string(n) + ", k=" +
                                   std::to_string(k) + ")");
  if (!x.allFinite()) throw ValidationError("k-means input contains non-finite values");
  std::mt19937_64 rng(seed);
  KmeansFit fit;
  Mat c(k, x.cols());

  // k-means++ seeding.
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  c.row(0) = x.row(first(rng));
  std::vector<double> d2(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) d2[i] = sqdist(x, i, c, 0);
  for (int j = 1; j < k; ++j) {
    double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    Eigen::Index pick = 0;
    if (total > 0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng), acc = 0.0;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        acc += d2[i];
        if (d2[i] > 0 && acc >= r) {
          pick = i;
          break;
        }
      }
      while (d2[pick] == 0 && pick > 0) --pick;
    } else {
      pick = first(rng);
    }
    c.row(j) = x.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) d2[i] = std::min(d2[i], sqdist(x, i, c, j));
  }

  std::vector<double> dist;
  std::vector<int> lab = assign(c, x, &dist);
  auto mean_dist = [&] { return std::accumulate(dist.begin(), dist.end(), 0.0) / static_cast<double>(n); };
  fit.distortion.push_back(mean_dist());
  for (int it = 0; it < max_iters; ++it) {
    // Update step.
    Mat sum = Mat::Zero(k, x.cols());
    std::vector<long> cnt(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sum.row(lab[i]) += x.row(i);
      ++cnt[static_cast<std::size_t>(lab[i])];
    }
    std::vector<char> taken(static_cast<std::size_t>(n), 0);
    for (int j = 0; j < k; ++j) {
      if (cnt[static_cast<std::size_t>(j)] > 0) {
        c.row(j) = sum.row(j) / static_cast<double>(cnt[static_cast<std::size_t>(j)]);
        continue;
      }
      // Empty cluster: move it onto the point farthest from its current centroid.
      Eigen::Index far = -1;
      double fd = -1;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (taken[i]) continue;
        double d = sqdist(x, i, c, lab[i]);
        if (d > fd) {
          fd = d;
          far = i;
        }
      }
      if (far >= 0) {
        c.row(j) = x.row(far);
        taken[far] = 1;
        ++fit.reseeded;
      }
    }
    std::vector<int> next = assign(c, x, &dist);
    ++fit.iterations;
    fit.distortion.push_back(mean_dist());
    bool same = next == lab;
    lab = std::move(next);
    if (same) {
      fit.converged = true;
      break;
    }
  }
  fit.centroids = std::move(c);
  fit.assignment = std::move(lab);
  return fit;
}

ClusterFitResult fit_cluster_model(const std::vector<FeatureMatrix>& layer_features, int source_layer,
                                   const ClusterFitOptions& opt) {
  ClusterFitResult r;
  CmvnAccumulator acc;
  for (const auto& f : layer_features) {
    acc.add(f.frames);
    r.frames_total += static_cast<std::size_t>(f.frames.rows());
  }
  if (r.frames_total == 0) throw ValidationError("no frames to cluster");
  Eigen::Index d = layer_features.front().frames.cols();
  if (r.frames_total >= 2) {
    CmvnStats s = acc.finish();
    r.model.mean = s.mean;
    r.model.stdev = s.var.cwiseSqrt();
  } else {
    r.model.mean = RowVec::Zero(d);
    r.model.stdev = RowVec::Ones(d);
  }
  r.model.source_layer = source_layer;

  std::vector<std::pair<std::size_t, Eigen::Index>> rows;
  rows.reserve(r.frames_total);
  for (std::size_t u = 0; u < layer_features.size(); ++u)
    for (Eigen::Index t = 0; t < layer_features[u].frames.rows(); ++t) rows.emplace_back(u, t);
  std::mt19937_64 rng(mix_seed(opt.seed, 0x5A3B));
  if (rows.size() > opt.max_frames) {
    std::shuffle(rows.begin(), rows.end(), rng);
    rows.resize(opt.max_frames);
    std::sort(rows.begin(), rows.end());
  }
  r.frames_used = rows.size();
  Mat x(static_cast<Eigen::Index>(rows.size()), d);
  for (std::size_t i = 0; i < rows.size(); ++i)
    x.row(static_cast<Eigen::Index>(i)) =
        (layer_features[rows[i].first].frames.row(rows[i].second) - r.model.mean).cwiseQuotient(r.model.stdev);
  r.fit = kmeans_fit(x, opt.k, opt.seed, opt.max_iters);
  r.model.centroids = r.fit.centroids;
  return r;
}

std::vector<int> kmeans_assign(const ClusterModel& cm, const Mat& features) {
  if (features.cols() != cm.dim())
    throw ValidationError("dimension mismatch: cluster model has " + std::to_string(cm.dim()) + " dims, features " +
                          std::to_string(features.cols()));
  Mat z = (features.rowwise() - cm.mean).array().rowwise() / cm.stdev.array();
  return nearest_centroid(cm.centroids, z);
}

std::vector<ClusterTargets> kmeans_assign(const ClusterModel& cm, const std::vector<FeatureMatrix>& features) {
  std::vector<ClusterTargets> out;
  out.reserve(features.size());
  for (const auto& f : features) out.push_back({f.utt_id, kmeans_assign(cm, f.frames)});
  return out;
}

std::vector<int> align_targets(const std::vector<int>& labels, Eigen::Index frames, const std::string& utt_id) {
  auto n = static_cast<Eigen::Index>(labels.size());
  if (std::abs(n - frames) > 1)
    throw ValidationError("target length " + std::to_string(n) + " does not match " + std::to_string(frames) +
                          " encoder frames for " + utt_id);
  return {labels.begin(), labels.begin() + std::min(n, frames)};
}

void save_cluster_model(const ClusterModel& cm, const std::string& path) {
  std::string blob;
  blob.reserve(static_cast<std::size_t>(cm.centroids.size()) * 8);
  for (Eigen::Index i = 0; i < cm.centroids.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, cm.centroids.data() + i, 8);
    for (int b = 0; b < 8; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
  }
  write_file(path, blob);
  json j{{"k", cm.k()},
         {"d", cm.dim()},
         {"layer", cm.source_layer},
         {"mean", std::vector<double>(cm.mean.data(), cm.mean.data() + cm.mean.size())},
         {"stdev", std::vector<double>(cm.stdev.data(), cm.stdev.data() + cm.stdev.size())}};
  write_file(path + ".json", j.dump() + "\n");
}

ClusterModel load_cluster_model(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path + ".json"));
  } catch (const json::exception& e) {
    throw ValidationError("bad cluster sidecar " + path + ".json: " + e.what());
  }
  ClusterModel cm;
  int k = j.at("k"), d = j.at("d");
  cm.source_layer = j.at("layer");
  std::string blob = read_file(path);
  if (blob.size() != static_cast<std::size_t>(k) * static_cast<std::size_t>(d) * 8)
    throw ValidationError("centroid file " + path + " has the wrong size");
  cm.centroids.resize(k, d);
  for (Eigen::Index i = 0; i < cm.centroids.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b)
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[static_cast<std::size_t>(i) * 8 + b])) << (8 * b);
    std::memcpy(cm.centroids.data() + i, &bits, 8);
  }
  auto mean = j.at("mean").get<std::vector<double>>();
  auto sd = j.at("stdev").get<std::vector<double>>();
  if (static_cast<int>(mean.size()) != d || static_cast<int>(sd.size()) != d)
    throw ValidationError("cluster stats dimension mismatch in " + path + ".json");
  cm.mean = Eigen::Map<RowVec>(mean.data(), d);
  cm.stdev = Eigen::Map<RowVec>(sd.data(), d);
  return cm;
}

std::string targets_to_jsonl(const std::vector<ClusterTargets>& t) {
  std::string out;
  for (const auto& x : t) out += nlohmann::ordered_json{{"utt_id", x.utt_id}, {"labels", x.labels}}.dump() + "\n";
  return out;
}

std::vector<ClusterTargets> targets_from_jsonl(const std::string& text) {
  std::vector<ClusterTargets> out;
  std::istringstream is(text);
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (trim(line).empty()) continue;
    try {
      auto j = json::parse(line);
      out.push_back({j.at("utt_id").get<std::string>(), j.at("labels").get<std::vector<int>>()});
    } catch (const json::exception& e) {
      throw ValidationError("targets line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

namespace {

bool is_encoder(const std::string& name) { return name.rfind("encoder.", 0) == 0; }

ag::Parameter make_head(const std::string& name, Eigen::Index r, Eigen::Index c, std::mt19937_64* rng) {
  ag::Parameter p;
  p.name = name;
  p.value = Mat::Zero(r, c);
  if (rng) {
    double a = std::sqrt(6.0 / static_cast<double>(r + c));
    std::uniform_real_distribution<double> u(-a, a);
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = u(*rng);
  }
  p.zero_grad();
  return p;
}

}  // namespace

double frame_accuracy(const AsrModel& model, const ag::Parameter& head_w, const ag::Parameter& head_b,
                      const std::vector<FeatureMatrix>& inputs, const std::vector<ClusterTargets>& targets) {
  std::map<std::string, const ClusterTargets*> by_id;
  for (const auto& t : targets) by_id[t.utt_id] = &t;
  long hit = 0, total = 0;
  for (const auto& f : inputs) {
    auto it = by_id.find(f.utt_id);
    if (it == by_id.end()) throw ValidationError("missing cluster targets for " + f.utt_id);
    Mat enc = forward_encoder(model, f.frames);
    auto lab = align_targets(it->second->labels, enc.rows(), f.utt_id);
    Mat logits = (enc.topRows(static_cast<Eigen::Index>(lab.size())) * head_w.value).rowwise() + RowVec(head_b.value);
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
      Eigen::Index arg;
      logits.row(t).maxCoeff(&arg);
      hit += arg == lab[static_cast<std::size_t>(t)];
      ++total;
    }
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

PretrainResult pretrain_encoder(AsrModel model, const std::vector<FeatureMatrix>& inputs,
                                const std::vector<ClusterTargets>& targets, int k, const Schedule& s,
                                const PretrainOptions& popt) {
  PretrainResult r;
  std::map<std::string, const ClusterTargets*> by_id;
  for (const auto& t : targets) by_id[t.utt_id] = &t;
  std::vector<const ClusterTargets*> tgt;
  for (const auto& f : inputs) {
    auto it = by_id.find(f.utt_id);
    if (it == by_id.end()) throw ValidationError("missing cluster targets for " + f.utt_id);
    for (int l : it->second->labels)
      if (l < 0 || l >= k) throw ValidationError("cluster label out of range for " + f.utt_id);
    align_targets(it->second->labels, subsampled_length(f.frames.rows()), f.utt_id);
    tgt.push_back(it->second);
  }
  std::mt19937_64 init_rng(mix_seed(s.seed, 0x4EAD));
  const Eigen::Index d = model.config().enc_dim;
  r.head_w = make_head("ssl_head.w", d, k, &init_rng);
  r.head_b = make_head("ssl_head.b", 1, k, nullptr);
  if (s.epochs <= 0 || inputs.empty()) {
    r.model = std::move(model);
    return r;
  }

  std::vector<ag::Parameter*> opt_params{&r.head_w, &r.head_b};
  for (auto& p : model.params())
    if (is_encoder(p.name)) opt_params.push_back(&p);
  Adam adam(opt_params, s);
  std::vector<double> seconds, weights(inputs.size(), 1.0);
  for (const auto& f : inputs) seconds.push_back(static_cast<double>(f.frames.rows()) * model.fbank().frame_shift);

  ForwardOptions opt;
  opt.train = true;
  opt.trainable = is_encoder;
  long step = 0;
  const int sub = model.config().subsample_factor;
  for (int epoch = 0; epoch < s.epochs && !r.diverged; ++epoch) {
    auto order = weighted_epoch(weights, mix_seed(s.seed, static_cast<std::uint64_t>(epoch)));
    double ce_sum = 0.0;
    long ce_frames = 0;
    for (const auto& bidx : make_batches(order, seconds, s)) {
      struct Item {
        Mat x;
        std::vector<int> labels;
        std::vector<char> use;
      };
      std::vector<Item> items;
      long frames = 0;
      for (std::size_t j = 0; j < bidx.size(); ++j) {
        const auto& f = inputs[bidx[j]];
        Item it;
        it.x = f.frames;
        std::uint64_t seed = mix_seed(mix_seed(s.seed, static_cast<std::uint64_t>(step)), j);
        if (s.spec_augment) {
          FeatureMatrix fm;
          fm.frames = it.x;
          it.x = spec_augment(fm, s.policy, seed).frames;
        }
        it.labels = align_targets(tgt[bidx[j]]->labels, subsampled_length(it.x.rows()), f.utt_id);
        it.use.assign(it.labels.size(), popt.span_mask ? 0 : 1);
        if (popt.span_mask) {
          std::mt19937_64 mrng(mix_seed(seed, 0x3A5C));
          std::bernoulli_distribution start(popt.mask_prob);
          for (Eigen::Index t = 0; t < it.x.rows(); ++t) {
            if (!start(mrng)) continue;
            Eigen::Index end = std::min<Eigen::Index>(it.x.rows(), t + popt.mask_span);
            it.x.middleRows(t, end - t).setZero();
            for (Eigen::Index u = t; u < end; ++u) {
              auto o = static_cast<std::size_t>(u / sub);
              if (o < it.use.size()) it.use[o] = 1;
            }
          }
        }
        for (std::size_t t = 0; t < it.labels.size(); ++t) frames += it.use[t];
        items.push_back(std::move(it));
      }
      if (frames == 0) continue;
      adam.zero_grad();
      std::mt19937_64 drop_rng(mix_seed(s.seed ^ 0xD50Full, static_cast<std::uint64_t>(step)));
      opt.rng = &drop_rng;
      for (auto& it : items) {
        ag::Graph g(true);
        ag::Var enc = encoder_graph(g, model, it.x, opt).back();
        ag::Var logits = ag::linear(enc, g.param(r.head_w), g.param(r.head_b));
        ag::Var lp = ag::log_softmax_rows(logits);
        std::vector<int> lab;
        for (std::size_t t = 0; t < it.labels.size(); ++t) {
          if (!it.use[t]) continue;
          lab.push_back(it.labels[t]);
        }
        if (lab.empty()) continue;
        ag::Var sel = lp;
        if (lab.size() != static_cast<std::size_t>(lp->val().rows())) {
          // Build the selection as a constant 0/1 matrix product.
          Mat pick = Mat::Zero(static_cast<Eigen::Index>(lab.size()), lp->val().rows());
          Eigen::Index row = 0;
          for (std::size_t t = 0; t < it.labels.size(); ++t)
            if (it.use[t]) pick(row++, static_cast<Eigen::Index>(t)) = 1.0;
          sel = ag::matmul(g.constant(std::move(pick)), lp);
        }
        ag::Var l = ag::smoothed_nll(sel, lab, 0.0);
        double n = static_cast<double>(lab.size());
        ce_sum += ag::scalar(l) * n;
        ce_frames += static_cast<long>(lab.size());
        g.backward(ag::scale(l, n / static_cast<double>(frames)));
      }
      double norm = adam.step(learning_rate(s, step));
      ++step;
      if (!std::isfinite(norm) || !std::isfinite(ce_sum)) {
        r.diverged = true;
        break;
      }
    }
    r.epoch_ce.push_back(ce_frames ? ce_sum / static_cast<double>(ce_frames) : 0.0);
    r.epoch_accuracy.push_back(frame_accuracy(model, r.head_w, r.head_b, inputs, targets));
  }
  for (auto& p : model.params()) p.zero_grad();
  r.model = std::move(model);
  return r;
}

TrainResult finetune_from_pretrained(AsrModel pretrained, const std::vector<Example>& train,
                                     const std::vector<Example>& valid, const Schedule& schedule,
                                     std::uint64_t seed) {
  pretrained.reinitialize("decoder.", mix_seed(seed, 1));
  pretrained.reinitialize("ctc.", mix_seed(seed, 2));
  return train_supervised(std::move(pretrained), train, valid, schedule);
}

}  // namespace lowsup
