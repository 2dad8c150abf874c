#include "lowsup/model.hpp"

#include "lowsup/ctc.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>

namespace lowsup {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- Vocabulary

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& characters) {
  symbols_ = {"<blank>", "<sos/eos>", "<unk>"};
  for (const auto& c : characters) {
    if (c.empty()) throw ValidationError("empty vocabulary symbol");
    if (std::find(symbols_.begin(), symbols_.end(), c) != symbols_.end())
      throw ValidationError("duplicate vocabulary symbol '" + c + "'");
    symbols_.push_back(c);
  }
  for (std::size_t i = 0; i < symbols_.size(); ++i) index_[symbols_[i]] = static_cast<int>(i);
}

Vocabulary Vocabulary::from_manifests(const std::vector<const Manifest*>& manifests) {
  std::set<std::string> chars;
  for (const auto* m : manifests)
    for (const auto& u : m->utterances)
      if (u.text)
        for (auto& c : utf8_chars(*u.text)) chars.insert(c);
  return Vocabulary(std::vector<std::string>(chars.begin(), chars.end()));
}

std::vector<std::string> Vocabulary::characters() const {
  return {symbols_.begin() + kNumSpecial, symbols_.end()};
}

std::optional<int> Vocabulary::find(const std::string& ch) const {
  auto it = index_.find(ch);
  if (it == index_.end() || it->second < kNumSpecial) return std::nullopt;
  return it->second;
}

std::vector<int> Vocabulary::encode(std::string_view text, int* unk_count) const {
  std::vector<int> out;
  for (const auto& c : utf8_chars(text)) {
    auto id = find(c);
    if (!id) {
      if (unk_count) ++*unk_count;
      out.push_back(kUnk);
    } else {
      out.push_back(*id);
    }
  }
  return out;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id < kNumSpecial) continue;
    out += symbols_.at(static_cast<std::size_t>(id));
  }
  return out;
}

// --------------------------------------------------------------- ModelConfig

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.enc_layers = 12;
  c.enc_heads = 4;
  c.enc_dim = 256;
  c.enc_ffn = 2048;
  c.dec_layers = 6;
  c.conv_kernel = 31;
  return c;
}

void ModelConfig::validate() const {
  if (input_dim <= 0) throw ValidationError("input_dim must be positive");
  if (enc_layers < 0 || dec_layers < 0) throw ValidationError("layer counts must be non-negative");
  if (enc_heads <= 0 || enc_dim <= 0 || enc_ffn <= 0) throw ValidationError("encoder sizes must be positive");
  if (enc_dim % enc_heads != 0) throw ValidationError("enc_dim must be divisible by enc_heads");
  if (conv_kernel <= 0 || conv_kernel % 2 == 0) throw ValidationError("conv_kernel must be odd");
  if (subsample_factor != 4) throw ValidationError("only subsample_factor 4 is supported");
  if (!(ctc_weight >= 0.0 && ctc_weight <= 1.0)) throw ValidationError("ctc_weight must lie in [0, 1]");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must lie in [0, 1)");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0))
    throw ValidationError("label_smoothing must lie in [0, 1)");
}

// ------------------------------------------------------------------ AsrModel

AsrModel::AsrModel(ModelConfig config, Vocabulary vocab, std::uint64_t seed)
    : config_(config), vocab_(std::move(vocab)) {
  config_.validate();
  fbank_.num_mel_bins = config_.input_dim;
  build(seed);
}

void AsrModel::add_param(const std::string& name, Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng,
                         char init) {
  ag::Parameter p;
  p.name = name;
  p.value = Mat::Zero(rows, cols);
  switch (init) {
    case 'x': {  // Xavier uniform
      double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
      std::uniform_real_distribution<double> u(-a, a);
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = u(rng);
      break;
    }
    case 'k': {  // depthwise kernel: fan-in is the kernel width
      double a = 1.0 / std::sqrt(static_cast<double>(rows));
      std::uniform_real_distribution<double> u(-a, a);
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = u(rng);
      break;
    }
    case 'e': {
      std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(cols)));
      for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = n(rng);
      break;
    }
    case 'o': p.value.setOnes(); break;
    default: break;  // zeros
  }
  p.zero_grad();
  index_[name] = params_.size();
  params_.push_back(std::move(p));
}

namespace {

void reinit_value(ag::Parameter& p, std::mt19937_64& rng) {
  const auto& n = p.name;
  auto ends_with = [&](std::string_view s) { return n.size() >= s.size() && n.compare(n.size() - s.size(), s.size(), s) == 0; };
  if (ends_with(".g")) {
    p.value.setOnes();
  } else if (ends_with(".b") || ends_with(".bq") || ends_with(".bk") || ends_with(".bv") || ends_with(".bo") ||
             ends_with(".b1") || ends_with(".b2")) {
    p.value.setZero();
  } else if (ends_with("dw.w")) {
    double a = 1.0 / std::sqrt(static_cast<double>(p.value.rows()));
    std::uniform_real_distribution<double> u(-a, a);
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = u(rng);
  } else if (ends_with("embed")) {
    std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(p.value.cols())));
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = nd(rng);
  } else {
    double a = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
    std::uniform_real_distribution<double> u(-a, a);
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = u(rng);
  }
  p.zero_grad();
}

}  // namespace

void AsrModel::build(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto& c = config_;
  const Eigen::Index d = c.enc_dim, f = c.enc_ffn, v = vocab_.size();
  add_param("encoder.sub.conv1.w", 3 * c.input_dim, d, rng, 'x');
  add_param("encoder.sub.conv1.b", 1, d, rng, 'z');
  add_param("encoder.sub.conv2.w", 3 * d, d, rng, 'x');
  add_param("encoder.sub.conv2.b", 1, d, rng, 'z');
  add_param("encoder.sub.proj.w", d, d, rng, 'x');
  add_param("encoder.sub.proj.b", 1, d, rng, 'z');
  auto ln = [&](const std::string& p) {
    add_param(p + ".g", 1, d, rng, 'o');
    add_param(p + ".b", 1, d, rng, 'z');
  };
  auto ffn = [&](const std::string& p) {
    ln(p + ".ln");
    add_param(p + ".w1", d, f, rng, 'x');
    add_param(p + ".b1", 1, f, rng, 'z');
    add_param(p + ".w2", f, d, rng, 'x');
    add_param(p + ".b2", 1, d, rng, 'z');
  };
  auto att = [&](const std::string& p) {
    ln(p + ".ln");
    for (const char* m : {"q", "k", "v", "o"}) {
      add_param(p + ".w" + m, d, d, rng, 'x');
      add_param(p + ".b" + m, 1, d, rng, 'z');
    }
  };
  for (int i = 0; i < c.enc_layers; ++i) {
    std::string p = "encoder.layers." + std::to_string(i);
    ffn(p + ".ff1");
    att(p + ".mhsa");
    ln(p + ".conv.ln");
    add_param(p + ".conv.pw1.w", d, 2 * d, rng, 'x');
    add_param(p + ".conv.pw1.b", 1, 2 * d, rng, 'z');
    add_param(p + ".conv.dw.w", c.conv_kernel, d, rng, 'k');
    add_param(p + ".conv.dw.b", 1, d, rng, 'z');
    ln(p + ".conv.norm");
    add_param(p + ".conv.pw2.w", d, d, rng, 'x');
    add_param(p + ".conv.pw2.b", 1, d, rng, 'z');
    ffn(p + ".ff2");
    ln(p + ".out_ln");
  }
  add_param("ctc.w", d, v, rng, 'x');
  add_param("ctc.b", 1, v, rng, 'z');
  add_param("decoder.embed", v, d, rng, 'e');
  for (int i = 0; i < c.dec_layers; ++i) {
    std::string p = "decoder.layers." + std::to_string(i);
    att(p + ".self");
    att(p + ".src");
    ffn(p + ".ff");
  }
  ln("decoder.out_ln");
  add_param("decoder.out.w", d, v, rng, 'x');
  add_param("decoder.out.b", 1, v, rng, 'z');
}

ag::Parameter& AsrModel::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter " + name);
  return params_[it->second];
}

const ag::Parameter& AsrModel::param(const std::string& name) const {
  return const_cast<AsrModel*>(this)->param(name);
}

std::size_t AsrModel::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

void AsrModel::reinitialize(const std::string& prefix, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : params_)
    if (p.name.rfind(prefix, 0) == 0) reinit_value(p, rng);
}

namespace {

json config_json(const ModelConfig& c) {
  return json{{"input_dim", c.input_dim},       {"enc_layers", c.enc_layers}, {"enc_heads", c.enc_heads},
              {"enc_dim", c.enc_dim},           {"enc_ffn", c.enc_ffn},       {"conv_kernel", c.conv_kernel},
              {"dec_layers", c.dec_layers},     {"subsample_factor", c.subsample_factor},
              {"ctc_weight", c.ctc_weight},     {"dropout", c.dropout},
              {"label_smoothing", c.label_smoothing}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.input_dim = j.at("input_dim").get<int>();
  c.enc_layers = j.at("enc_layers").get<int>();
  c.enc_heads = j.at("enc_heads").get<int>();
  c.enc_dim = j.at("enc_dim").get<int>();
  c.enc_ffn = j.at("enc_ffn").get<int>();
  c.conv_kernel = j.at("conv_kernel").get<int>();
  c.dec_layers = j.at("dec_layers").get<int>();
  c.subsample_factor = j.at("subsample_factor").get<int>();
  c.ctc_weight = j.at("ctc_weight").get<double>();
  c.dropout = j.at("dropout").get<double>();
  c.label_smoothing = j.at("label_smoothing").get<double>();
  c.validate();
  return c;
}

json fbank_json(const FbankConfig& f) {
  return json{{"sample_rate", f.sample_rate},   {"frame_length", f.frame_length}, {"frame_shift", f.frame_shift},
              {"num_mel_bins", f.num_mel_bins}, {"low_freq", f.low_freq},         {"high_freq", f.high_freq},
              {"preemphasis", f.preemphasis},   {"remove_dc", f.remove_dc},       {"energy_floor", f.energy_floor}};
}

FbankConfig fbank_from_json(const json& j) {
  FbankConfig f;
  f.sample_rate = j.at("sample_rate").get<int>();
  f.frame_length = j.at("frame_length").get<double>();
  f.frame_shift = j.at("frame_shift").get<double>();
  f.num_mel_bins = j.at("num_mel_bins").get<int>();
  f.low_freq = j.at("low_freq").get<double>();
  f.high_freq = j.at("high_freq").get<double>();
  f.preemphasis = j.at("preemphasis").get<double>();
  f.remove_dc = j.at("remove_dc").get<bool>();
  f.energy_floor = j.at("energy_floor").get<double>();
  return f;
}

json row_json(const RowVec& r) {
  json a = json::array();
  for (Eigen::Index i = 0; i < r.size(); ++i) a.push_back(r[i]);
  return a;
}

RowVec row_from_json(const json& a) {
  RowVec r(static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) r[static_cast<Eigen::Index>(i)] = a[i].get<double>();
  return r;
}

json model_header(const ModelConfig& config, const Vocabulary& vocab, const FbankConfig& fbank,
                  const std::optional<CmvnStats>& cmvn) {
  json j;
  j["model"] = config_json(config);
  j["vocabulary"] = vocab.symbols();
  j["fbank"] = fbank_json(fbank);
  if (cmvn) j["cmvn"] = json{{"mean", row_json(cmvn->mean)}, {"var", row_json(cmvn->var)}};
  return j;
}

}  // namespace

std::string AsrModel::hash() const {
  std::uint64_t h = fnv1a64(model_header(config_, vocab_, fbank_, cmvn_).dump());
  for (const auto& p : params_) {
    h = fnv1a64(p.name, h);
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(p.value.data()),
                                 static_cast<std::size_t>(p.value.size()) * sizeof(double)),
                h);
  }
  return hex64(h);
}

Mat AsrModel::normalize(const Mat& frames) const {
  if (!cmvn_) return frames;
  if (frames.cols() != cmvn_->mean.size()) throw ValidationError("feature dimension does not match CMVN stats");
  RowVec inv = cmvn_->var.array().sqrt().inverse().matrix();
  return ((frames.rowwise() - cmvn_->mean).array().rowwise() * inv.array()).matrix();
}

FeatureMatrix AsrModel::featurize(const Audio& audio) const {
  FeatureMatrix f = compute_fbank(audio, fbank_);
  f.frames = normalize(f.frames);
  return f;
}

// ------------------------------------------------------------------- Forward

Eigen::Index subsampled_length(Eigen::Index t) {
  Eigen::Index h = (t + 1) / 2;
  return (h + 1) / 2;
}

Mat sinusoidal_positions(Eigen::Index length, Eigen::Index dim) {
  Mat pe(length, dim);
  for (Eigen::Index t = 0; t < length; ++t) {
    for (Eigen::Index i = 0; i < dim; i += 2) {
      double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(dim));
      pe(t, i) = std::sin(static_cast<double>(t) * freq);
      if (i + 1 < dim) pe(t, i + 1) = std::cos(static_cast<double>(t) * freq);
    }
  }
  return pe;
}

namespace {

struct Ctx {
  ag::Graph& g;
  AsrModel& m;
  const ForwardOptions& opt;

  ag::Var p(const std::string& name) const {
    bool train = !opt.trainable || opt.trainable(name);
    return g.param(m.param(name), train);
  }
  ag::Var drop(ag::Var x) const {
    if (!opt.train || !opt.rng) return x;
    return ag::dropout(x, m.config().dropout, *opt.rng);
  }
  ag::Var ln(ag::Var x, const std::string& n) const { return ag::layer_norm(x, p(n + ".g"), p(n + ".b")); }
  ag::Var lin(ag::Var x, const std::string& w, const std::string& b) const { return ag::linear(x, p(w), p(b)); }

  ag::Var ffn(ag::Var x, const std::string& n) const {
    ag::Var h = ln(x, n + ".ln");
    h = ag::swish(lin(h, n + ".w1", n + ".b1"));
    h = drop(h);
    return drop(lin(h, n + ".w2", n + ".b2"));
  }

  ag::Var mha(ag::Var query_in, ag::Var kv_in, const std::string& n, bool causal, bool norm_kv) const {
    ag::Var q_src = ln(query_in, n + ".ln");
    ag::Var kv_src = norm_kv ? q_src : kv_in;
    ag::Var q = lin(q_src, n + ".wq", n + ".bq");
    ag::Var k = lin(kv_src, n + ".wk", n + ".bk");
    ag::Var v = lin(kv_src, n + ".wv", n + ".bv");
    ag::Var a = ag::attention(q, k, v, m.config().enc_heads, causal);
    return drop(lin(a, n + ".wo", n + ".bo"));
  }
};

}  // namespace

std::vector<ag::Var> encoder_graph(ag::Graph& g, AsrModel& model, const Mat& features, const ForwardOptions& opt,
                                   int stop_after_layer) {
  const auto& c = model.config();
  if (features.cols() != c.input_dim)
    throw ValidationError("feature dim " + std::to_string(features.cols()) + " != model input_dim " +
                          std::to_string(c.input_dim));
  if (features.rows() < kMinInputFrames)
    throw ValidationError("input of " + std::to_string(features.rows()) + " frames is shorter than the " +
                          std::to_string(kMinInputFrames) + "-frame subsampling receptive field");
  Ctx x{g, model, opt};
  std::vector<ag::Var> outs;
  ag::Var h = g.constant(features);
  h = ag::relu(x.lin(ag::stack_frames(h, 3, 2, 1), "encoder.sub.conv1.w", "encoder.sub.conv1.b"));
  h = ag::relu(x.lin(ag::stack_frames(h, 3, 2, 1), "encoder.sub.conv2.w", "encoder.sub.conv2.b"));
  h = x.lin(h, "encoder.sub.proj.w", "encoder.sub.proj.b");
  h = ag::add_const(h, sinusoidal_positions(h->val().rows(), c.enc_dim));
  h = x.drop(h);
  outs.push_back(h);
  int last = stop_after_layer < 0 ? c.enc_layers : std::min(stop_after_layer, c.enc_layers);
  for (int i = 0; i < last; ++i) {
    std::string p = "encoder.layers." + std::to_string(i);
    h = ag::add(h, ag::scale(x.ffn(h, p + ".ff1"), 0.5));
    h = ag::add(h, x.mha(h, nullptr, p + ".mhsa", false, true));
    ag::Var cv = x.ln(h, p + ".conv.ln");
    cv = ag::glu(x.lin(cv, p + ".conv.pw1.w", p + ".conv.pw1.b"));
    cv = ag::depthwise_conv(cv, x.p(p + ".conv.dw.w"), x.p(p + ".conv.dw.b"));
    cv = ag::swish(x.ln(cv, p + ".conv.norm"));
    cv = x.drop(x.lin(cv, p + ".conv.pw2.w", p + ".conv.pw2.b"));
    h = ag::add(h, cv);
    h = ag::add(h, ag::scale(x.ffn(h, p + ".ff2"), 0.5));
    h = x.ln(h, p + ".out_ln");
    outs.push_back(h);
  }
  return outs;
}

ag::Var ctc_logits_graph(ag::Graph& g, AsrModel& model, ag::Var encoded, const ForwardOptions& opt) {
  Ctx x{g, model, opt};
  return x.lin(encoded, "ctc.w", "ctc.b");
}

ag::Var decoder_graph(ag::Graph& g, AsrModel& model, ag::Var memory, std::span<const int> input_ids,
                      const ForwardOptions& opt) {
  const auto& c = model.config();
  Ctx x{g, model, opt};
  ag::Var h = ag::embedding(x.p("decoder.embed"), input_ids);
  h = ag::add_const(h, sinusoidal_positions(static_cast<Eigen::Index>(input_ids.size()), c.enc_dim));
  h = x.drop(h);
  for (int i = 0; i < c.dec_layers; ++i) {
    std::string p = "decoder.layers." + std::to_string(i);
    h = ag::add(h, x.mha(h, nullptr, p + ".self", true, true));
    h = ag::add(h, x.mha(h, memory, p + ".src", false, false));
    h = ag::add(h, x.ffn(h, p + ".ff"));
  }
  h = x.ln(h, "decoder.out_ln");
  return x.lin(h, "decoder.out.w", "decoder.out.b");
}

Mat forward_encoder(const AsrModel& model, const Mat& features) {
  return encoder_layer_output(model, features, model.config().enc_layers);
}

Mat encoder_layer_output(const AsrModel& model, const Mat& features, int layer) {
  if (layer < 0 || layer > model.config().enc_layers)
    throw ValidationError("encoder layer index " + std::to_string(layer) + " outside [0, " +
                          std::to_string(model.config().enc_layers) + "]");
  ag::Graph g(false);
  auto outs = encoder_graph(g, const_cast<AsrModel&>(model), features, {}, layer);
  return outs.back()->val();
}

EncodedBatch forward_encoder_batch(const AsrModel& model, const std::vector<Mat>& padded,
                                   const std::vector<Eigen::Index>& lengths) {
  if (padded.size() != lengths.size()) throw ValidationError("batch/length count mismatch");
  EncodedBatch out;
  for (std::size_t i = 0; i < padded.size(); ++i) {
    if (lengths[i] > padded[i].rows()) throw ValidationError("length exceeds padded rows");
    out.encodings.push_back(forward_encoder(model, padded[i].topRows(lengths[i])));
    out.lengths.push_back(out.encodings.back().rows());
  }
  return out;
}

Mat ctc_log_posteriors(const AsrModel& model, const Mat& encodings) {
  ag::Graph g(false);
  auto& m = const_cast<AsrModel&>(model);
  ag::Var logits = ctc_logits_graph(g, m, g.constant(encodings), {});
  return ag::log_softmax_rows(logits)->val();
}

Mat decoder_log_probs(const AsrModel& model, const Mat& encodings, std::span<const int> input_ids) {
  ag::Graph g(false);
  auto& m = const_cast<AsrModel&>(model);
  ag::Var logits = decoder_graph(g, m, g.constant(encodings), input_ids, {});
  return ag::log_softmax_rows(logits)->val();
}

double decoder_ce_loss(const AsrModel& model, const Mat& encodings, std::span<const int> target,
                       std::optional<double> label_smoothing) {
  std::vector<int> in{Vocabulary::kSosEos};
  in.insert(in.end(), target.begin(), target.end());
  std::vector<int> out(target.begin(), target.end());
  out.push_back(Vocabulary::kSosEos);
  ag::Graph g(false);
  Mat lp = decoder_log_probs(model, encodings, in);
  ag::Var v = ag::smoothed_nll(g.constant(lp), out, label_smoothing.value_or(model.config().label_smoothing));
  return ag::scalar(v);
}

LossParts joint_loss(AsrModel& model, std::span<const Example* const> batch, double lambda,
                     const ForwardOptions& opt, bool backward) {
  LossParts parts;
  const bool need_ctc = lambda > 0.0;
  const bool need_ce = lambda < 1.0;
  for (const auto* ex : batch) {
    parts.ctc_tokens += static_cast<double>(std::max<std::size_t>(1, ex->target.size()));
    parts.ce_tokens += static_cast<double>(ex->target.size() + 1);
  }
  double ctc_sum = 0.0, ce_sum = 0.0, ctc_tokens_feasible = 0.0;
  // First pass decides the CTC normalizer, which must exclude infeasible targets.
  std::vector<char> feasible(batch.size(), 1);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Eigen::Index tp = subsampled_length(batch[i]->features.rows());
    feasible[i] = ctc_min_frames(batch[i]->target) <= tp;
    if (feasible[i]) ctc_tokens_feasible += static_cast<double>(std::max<std::size_t>(1, batch[i]->target.size()));
    else ++parts.infeasible_ctc;
  }
  const double label_smoothing = model.config().label_smoothing;
  parts.item_ctc.assign(batch.size(), std::numeric_limits<double>::quiet_NaN());
  parts.item_ce_sum.assign(batch.size(), 0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Example& ex = *batch[i];
    ag::Graph g(backward);
    ag::Var enc = encoder_graph(g, model, ex.features, opt).back();
    ag::Var objective = nullptr;
    if (need_ctc && feasible[i]) {
      ag::Var lp = ag::log_softmax_rows(ctc_logits_graph(g, model, enc, opt));
      ag::Var l = ag::ctc_loss(lp, ex.target, Vocabulary::kBlank);
      ctc_sum += ag::scalar(l);
      parts.item_ctc[i] = ag::scalar(l);
      objective = ag::scale(l, lambda / ctc_tokens_feasible);
    }
    if (need_ce) {
      std::vector<int> in{Vocabulary::kSosEos};
      in.insert(in.end(), ex.target.begin(), ex.target.end());
      std::vector<int> out(ex.target.begin(), ex.target.end());
      out.push_back(Vocabulary::kSosEos);
      ag::Var lp = ag::log_softmax_rows(decoder_graph(g, model, enc, in, opt));
      ag::Var l = ag::smoothed_nll(lp, out, label_smoothing);
      double n = static_cast<double>(out.size());
      ce_sum += ag::scalar(l) * n;
      parts.item_ce_sum[i] = ag::scalar(l) * n;
      ag::Var term = ag::scale(l, (1.0 - lambda) * n / parts.ce_tokens);
      objective = objective ? ag::add(objective, term) : term;
    }
    if (backward && objective) g.backward(objective);
  }
  parts.ctc = need_ctc ? (ctc_tokens_feasible > 0 ? ctc_sum / ctc_tokens_feasible
                                                   : std::numeric_limits<double>::infinity())
                       : 0.0;
  parts.ce = need_ce ? ce_sum / parts.ce_tokens : 0.0;
  parts.joint = (need_ctc ? lambda * parts.ctc : 0.0) + (need_ce ? (1.0 - lambda) * parts.ce : 0.0);
  return parts;
}

LossParts joint_loss(const AsrModel& model, std::span<const Example* const> batch, double lambda) {
  return joint_loss(const_cast<AsrModel&>(model), batch, lambda, {}, false);
}

// --------------------------------------------------------------- Checkpoints

void save_checkpoint(const AsrModel& model, const std::string& dir) {
  fs::create_directories(dir);
  write_file((fs::path(dir) / "config.json").string(),
             model_header(model.config(), model.vocab(), model.fbank(), model.cmvn()).dump() + "\n");
  json manifest = json::array();
  std::string blob;
  for (const auto& p : model.params()) {
    manifest.push_back(json{{"name", p.name},
                            {"shape", {p.value.rows(), p.value.cols()}},
                            {"dtype", "float64"},
                            {"offset", blob.size()}});
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, p.value.data() + i, 8);
      for (int b = 0; b < 8; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
  }
  write_file((fs::path(dir) / "params.json").string(), manifest.dump() + "\n");
  write_file((fs::path(dir) / "params.bin").string(), blob);
  json prov = json::array();
  for (const auto& r : model.provenance())
    prov.push_back(json{{"stage", r.stage}, {"config_hash", r.config_hash}, {"parent", r.parent_hash}, {"seed", r.seed}});
  write_file((fs::path(dir) / "provenance.json").string(),
             json{{"chain", prov}, {"hash", model.hash()}}.dump() + "\n");
}

AsrModel load_checkpoint(const std::string& dir) {
  json header;
  json manifest;
  json prov;
  try {
    header = json::parse(read_file((fs::path(dir) / "config.json").string()));
    manifest = json::parse(read_file((fs::path(dir) / "params.json").string()));
    prov = json::parse(read_file((fs::path(dir) / "provenance.json").string()));
  } catch (const json::exception& e) {
    throw ValidationError("malformed checkpoint in " + dir + ": " + e.what());
  }
  auto symbols = header.at("vocabulary").get<std::vector<std::string>>();
  if (symbols.size() < Vocabulary::kNumSpecial) throw ValidationError("checkpoint vocabulary too small");
  Vocabulary vocab(std::vector<std::string>(symbols.begin() + Vocabulary::kNumSpecial, symbols.end()));
  AsrModel model(config_from_json(header.at("model")), vocab, 0);
  model.set_fbank(fbank_from_json(header.at("fbank")));
  if (header.contains("cmvn")) {
    CmvnStats s;
    s.mean = row_from_json(header["cmvn"]["mean"]);
    s.var = row_from_json(header["cmvn"]["var"]);
    model.set_cmvn(s);
  }
  std::string blob = read_file((fs::path(dir) / "params.bin").string());
  if (manifest.size() != model.params().size()) throw ValidationError("checkpoint parameter count mismatch");
  for (const auto& e : manifest) {
    auto& p = model.param(e.at("name").get<std::string>());
    auto shape = e.at("shape").get<std::vector<Eigen::Index>>();
    if (shape.size() != 2 || shape[0] != p.value.rows() || shape[1] != p.value.cols())
      throw ValidationError("checkpoint shape mismatch for " + p.name);
    if (e.at("dtype").get<std::string>() != "float64") throw ValidationError("unsupported dtype for " + p.name);
    auto off = e.at("offset").get<std::size_t>();
    if (off + static_cast<std::size_t>(p.value.size()) * 8 > blob.size())
      throw ValidationError("checkpoint blob truncated at " + p.name);
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[off + 8 * i + b])) << (8 * b);
      std::memcpy(p.value.data() + i, &bits, 8);
    }
  }
  for (const auto& r : prov.at("chain")) {
    model.provenance().push_back(StageRecord{r.at("stage").get<std::string>(), r.at("config_hash").get<std::string>(),
                                             r.at("parent").get<std::string>(), r.at("seed").get<std::uint64_t>()});
  }
  return model;
}

}  // namespace lowsup
