#include "lowsup/train.hpp"

#include "lowsup/wav.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

namespace lowsup {

double learning_rate(const Schedule& s, long step) {
  const double w = std::max(1, s.warmup_steps);
  const double n = static_cast<double>(step + 1);
  if (n <= w) return s.peak_lr * n / w;
  return s.peak_lr * std::sqrt(w / n);
}

Adam::Adam(std::vector<ag::Parameter*> params, const Schedule& s)
    : params_(std::move(params)), b1_(s.adam_beta1), b2_(s.adam_beta2), eps_(s.adam_eps), clip_(s.grad_clip) {
  for (auto* p : params_) {
    m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
  }
}

double Adam::step(double lr) {
  double sq = 0.0;
  for (auto* p : params_) sq += p->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) return norm;
  const double scale = (clip_ > 0 && norm > clip_) ? clip_ / norm : 1.0;
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    Mat g = p.grad * scale;
    m_[i] = b1_ * m_[i] + (1.0 - b1_) * g;
    v_[i] = b2_ * v_[i] + (1.0 - b2_) * g.cwiseProduct(g);
    p.value.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
  return norm;
}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                   const std::vector<double>& seconds, const Schedule& s) {
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> cur;
  double cur_s = 0.0;
  for (auto i : order) {
    if (!cur.empty() && (static_cast<int>(cur.size()) >= s.batch_utterances || cur_s + seconds[i] > s.max_batch_seconds)) {
      out.push_back(std::move(cur));
      cur.clear();
      cur_s = 0.0;
    }
    cur.push_back(i);
    cur_s += seconds[i];
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<std::size_t> weighted_epoch(const std::vector<double>& weights, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    double w = weights[i];
    auto whole = static_cast<long>(std::floor(w));
    for (long k = 0; k < whole; ++k) idx.push_back(i);
    if (u(rng) < w - static_cast<double>(whole)) idx.push_back(i);
  }
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over the combined words.
  std::uint64_t z = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::string to_jsonl(const std::vector<TrainLogEntry>& log) {
  std::string out;
  for (const auto& e : log) {
    nlohmann::ordered_json j{{"step", e.step}, {"epoch", e.epoch}, {"ctc", e.ctc},
                             {"ce", e.ce},     {"joint", e.joint}, {"lr", e.lr}};
    if (std::isfinite(e.joint_gold)) j["joint_gold"] = e.joint_gold;
    if (std::isfinite(e.joint_pseudo)) j["joint_pseudo"] = e.joint_pseudo;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<double> example_seconds(const std::vector<Example>& xs, double frame_shift) {
  std::vector<double> s;
  s.reserve(xs.size());
  for (const auto& x : xs) s.push_back(static_cast<double>(x.features.rows()) * frame_shift);
  return s;
}

const Mat& FeatureCache::fbank(const std::string& audio_path) {
  auto it = cache_.find(audio_path);
  if (it != cache_.end()) return it->second;
  Audio a = read_wav(audio_path);
  return cache_.emplace(audio_path, compute_fbank(a, cfg_).frames).first->second;
}

namespace {

void check_cache(const AsrModel& model, const FeatureCache& cache) {
  const auto &a = model.fbank(), &b = cache.config();
  if (a.num_mel_bins != b.num_mel_bins || a.sample_rate != b.sample_rate || a.frame_shift != b.frame_shift ||
      a.frame_length != b.frame_length || a.low_freq != b.low_freq || a.high_freq != b.high_freq ||
      a.preemphasis != b.preemphasis || a.remove_dc != b.remove_dc)
    throw ValidationError("feature cache configuration differs from the model front-end");
}

}  // namespace

ExampleSet manifest_examples(const AsrModel& model, const Manifest& m, FeatureCache& cache, const std::string& tag) {
  check_cache(model, cache);
  ExampleSet out;
  for (const auto& u : m.utterances) {
    if (!u.text) throw ValidationError("utterance " + u.utt_id + " has no transcript");
    const Mat& raw = cache.fbank(u.audio_path);
    if (raw.rows() < kMinInputFrames) {
      ++out.skipped_short;
      continue;
    }
    Example x;
    x.utt_id = u.utt_id;
    x.features = model.normalize(raw);
    int unk = 0;
    x.target = model.vocab().encode(*u.text, &unk);
    out.unk_chars += unk;
    x.weight = u.weight;
    x.tag = tag;
    out.examples.push_back(std::move(x));
  }
  return out;
}

std::vector<FeatureMatrix> manifest_features(const AsrModel& model, const Manifest& m, FeatureCache& cache) {
  check_cache(model, cache);
  std::vector<FeatureMatrix> out;
  for (const auto& u : m.utterances) {
    FeatureMatrix f;
    f.utt_id = u.utt_id;
    f.frames = model.normalize(cache.fbank(u.audio_path));
    f.frame_shift = model.fbank().frame_shift;
    f.frame_length = model.fbank().frame_length;
    out.push_back(std::move(f));
  }
  return out;
}

CmvnStats manifest_cmvn(const std::vector<const Manifest*>& ms, FeatureCache& cache) {
  CmvnAccumulator acc;
  for (const auto* m : ms)
    for (const auto& u : m->utterances) acc.add(cache.fbank(u.audio_path));
  return acc.finish();
}

namespace {

// Joint loss over the subset of a batch whose tag matches.
double tagged_joint(const LossParts& p, const std::vector<const Example*>& batch, const std::string& tag,
                    bool want, double lambda) {
  double ctc = 0, ctc_n = 0, ce = 0, ce_n = 0;
  bool any = false;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if ((batch[i]->tag == tag) != want) continue;
    any = true;
    if (std::isfinite(p.item_ctc[i])) {
      ctc += p.item_ctc[i];
      ctc_n += static_cast<double>(std::max<std::size_t>(1, batch[i]->target.size()));
    }
    ce += p.item_ce_sum[i];
    ce_n += static_cast<double>(batch[i]->target.size() + 1);
  }
  if (!any) return std::numeric_limits<double>::quiet_NaN();
  double j = 0;
  if (lambda > 0) j += lambda * (ctc_n > 0 ? ctc / ctc_n : 0.0);
  if (lambda < 1) j += (1 - lambda) * ce / ce_n;
  return j;
}

double batched_loss(const AsrModel& model, const std::vector<Example>& xs, double lambda) {
  if (xs.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::vector<const Example*> ptrs;
  for (const auto& x : xs) ptrs.push_back(&x);
  return joint_loss(model, ptrs, lambda).joint;
}

}  // namespace

TrainResult train_supervised(AsrModel model, const std::vector<Example>& train, const std::vector<Example>& valid,
                             const Schedule& s, std::function<bool(const std::string&)> trainable) {
  TrainResult r;
  const double lambda = model.config().ctc_weight;
  if (s.epochs <= 0 || train.empty()) {
    r.model = std::move(model);
    return r;
  }
  for (const auto& x : train) {
    if (x.features.rows() < kMinInputFrames)
      throw ValidationError("training utterance " + x.utt_id + " is shorter than the encoder receptive field");
  }
  std::vector<ag::Parameter*> opt_params;
  for (auto& p : model.params())
    if (!trainable || trainable(p.name)) opt_params.push_back(&p);
  Adam adam(opt_params, s);
  std::vector<double> weights, seconds = example_seconds(train, model.fbank().frame_shift);
  for (const auto& x : train) weights.push_back(x.weight);

  std::vector<Mat> best;
  auto snapshot = [&] {
    best.clear();
    for (const auto& p : model.params()) best.push_back(p.value);
  };
  auto restore = [&] {
    for (std::size_t i = 0; i < best.size(); ++i) model.params()[i].value = best[i];
  };
  snapshot();
  double best_loss = std::numeric_limits<double>::infinity();

  ForwardOptions opt;
  opt.train = true;
  opt.trainable = trainable;
  long step = 0;
  for (int epoch = 0; epoch < s.epochs; ++epoch) {
    auto order = weighted_epoch(weights, mix_seed(s.seed, static_cast<std::uint64_t>(epoch)));
    bool nan = false;
    for (const auto& bidx : make_batches(order, seconds, s)) {
      std::vector<Example> augmented;
      augmented.reserve(bidx.size());
      for (std::size_t j = 0; j < bidx.size(); ++j) {
        const Example& src = train[bidx[j]];
        Example e = src;
        if (s.spec_augment) {
          std::uint64_t seed = mix_seed(mix_seed(s.seed, static_cast<std::uint64_t>(step)), j);
          FeatureMatrix fm;
          fm.frames = src.features;
          e.features = spec_augment(fm, s.policy, seed).frames;
        }
        augmented.push_back(std::move(e));
      }
      std::vector<const Example*> batch;
      for (const auto& e : augmented) batch.push_back(&e);
      std::mt19937_64 drop_rng(mix_seed(s.seed ^ 0xD50Full, static_cast<std::uint64_t>(step)));
      opt.rng = &drop_rng;
      adam.zero_grad();
      LossParts parts = joint_loss(model, batch, lambda, opt, true);
      const double lr = learning_rate(s, step);
      if (!std::isfinite(parts.joint)) {
        if (parts.infeasible_ctc == static_cast<int>(batch.size()) && std::isinf(parts.joint) && lambda < 1.0) {
          // Every CTC target infeasible: the gradient still carries the CE part.
        } else {
          nan = true;
          break;
        }
      }
      double norm = adam.step(lr);
      if (!std::isfinite(norm)) {
        nan = true;
        break;
      }
      TrainLogEntry e{step, epoch, parts.ctc, parts.ce, parts.joint, lr};
      e.joint_gold = tagged_joint(parts, batch, "gold", true, lambda);
      e.joint_pseudo = tagged_joint(parts, batch, "gold", false, lambda);
      r.log.push_back(e);
      ++step;
    }
    if (nan) {
      restore();
      r.diverged = true;
      break;
    }
    double vl = valid.empty() ? 0.0 : batched_loss(model, valid, lambda);
    r.valid_losses.push_back(vl);
    if (valid.empty() || vl <= best_loss) {
      best_loss = vl;
      r.best_epoch = epoch;
      snapshot();
    }
    if (!s.checkpoint_dir.empty())
      save_checkpoint(model, (std::filesystem::path(s.checkpoint_dir) / ("epoch" + std::to_string(epoch))).string());
  }
  restore();
  for (auto& p : model.params()) p.zero_grad();
  r.model = std::move(model);
  return r;
}

}  // namespace lowsup
