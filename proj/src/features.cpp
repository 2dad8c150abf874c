#include "lowsup/features.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>

namespace lowsup {

int FbankConfig::window_samples() const {
  return static_cast<int>(std::lround(frame_length * sample_rate));
}

int FbankConfig::shift_samples() const {
  return static_cast<int>(std::lround(frame_shift * sample_rate));
}

int FbankConfig::fft_size() const {
  int n = 1;
  while (n < window_samples()) n <<= 1;
  return n;
}

double FbankConfig::upper_freq() const {
  return high_freq > 0.0 ? high_freq : 0.5 * sample_rate;
}

double mel_scale(double hz) { return 1127.0 * std::log(1.0 + hz / 700.0); }
double inverse_mel_scale(double mel) { return 700.0 * (std::exp(mel / 1127.0) - 1.0); }

Mat mel_filterbank(const FbankConfig& cfg) {
  const int nfft = cfg.fft_size();
  const int nbins = nfft / 2 + 1;
  const int nmel = cfg.num_mel_bins;
  const double lo = mel_scale(cfg.low_freq);
  const double hi = mel_scale(cfg.upper_freq());
  const double delta = (hi - lo) / (nmel + 1);
  Mat w = Mat::Zero(nmel, nbins);
  for (int m = 0; m < nmel; ++m) {
    double left = lo + m * delta, center = lo + (m + 1) * delta, right = lo + (m + 2) * delta;
    for (int k = 0; k < nbins; ++k) {
      double mel = mel_scale(static_cast<double>(k) * cfg.sample_rate / nfft);
      if (mel > left && mel < right) {
        w(m, k) = mel <= center ? (mel - left) / (center - left) : (right - mel) / (right - center);
      }
    }
  }
  return w;
}

int num_frames_for(std::size_t num_samples, const FbankConfig& cfg) {
  auto win = static_cast<std::size_t>(cfg.window_samples());
  if (num_samples < win) return 0;
  return static_cast<int>((num_samples - win) / static_cast<std::size_t>(cfg.shift_samples())) + 1;
}

namespace {

// In-place iterative radix-2 FFT; size must be a power of two.
void fft(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        auto u = a[i + j];
        auto v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

}  // namespace

FeatureMatrix compute_fbank(const Audio& audio, const FbankConfig& cfg) {
  if (audio.sample_rate != cfg.sample_rate) {
    throw ValidationError("sample rate mismatch: audio " + std::to_string(audio.sample_rate) +
                          " Hz, front-end configured for " + std::to_string(cfg.sample_rate) + " Hz");
  }
  const int win = cfg.window_samples();
  const int shift = cfg.shift_samples();
  const int frames = num_frames_for(audio.samples.size(), cfg);
  if (audio.samples.empty() || frames <= 0)
    throw ValidationError("audio shorter than one analysis window");

  const int nfft = cfg.fft_size();
  const int nbins = nfft / 2 + 1;
  thread_local Mat bank;
  thread_local FbankConfig bank_cfg;
  thread_local bool bank_ready = false;
  auto same_bank = [&](const FbankConfig& a) {
    return a.sample_rate == cfg.sample_rate && a.frame_length == cfg.frame_length &&
           a.num_mel_bins == cfg.num_mel_bins && a.low_freq == cfg.low_freq && a.high_freq == cfg.high_freq;
  };
  if (!bank_ready || !same_bank(bank_cfg)) {
    bank = mel_filterbank(cfg);
    bank_cfg = cfg;
    bank_ready = true;
  }

  std::vector<double> window(win);
  for (int i = 0; i < win; ++i)
    window[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * i / (win - 1));

  FeatureMatrix out;
  out.frame_shift = cfg.frame_shift;
  out.frame_length = cfg.frame_length;
  out.frames.resize(frames, cfg.num_mel_bins);

  std::vector<double> frame(win);
  std::vector<std::complex<double>> spec(nfft);
  Vec power(nbins);
  for (int t = 0; t < frames; ++t) {
    const double* src = audio.samples.data() + static_cast<std::size_t>(t) * shift;
    std::copy(src, src + win, frame.begin());
    if (cfg.remove_dc) {
      double mean = 0.0;
      for (double v : frame) mean += v;
      mean /= win;
      for (double& v : frame) v -= mean;
    }
    if (cfg.preemphasis != 0.0) {
      for (int i = win - 1; i > 0; --i) frame[i] -= cfg.preemphasis * frame[i - 1];
      frame[0] -= cfg.preemphasis * frame[0];
    }
    std::fill(spec.begin(), spec.end(), std::complex<double>(0.0, 0.0));
    for (int i = 0; i < win; ++i) spec[i] = frame[i] * window[i];
    fft(spec);
    for (int k = 0; k < nbins; ++k) power[k] = std::norm(spec[k]);
    Vec mel = bank * power;
    for (int m = 0; m < cfg.num_mel_bins; ++m)
      out.frames(t, m) = std::log(std::max(mel[m], cfg.energy_floor));
  }
  return out;
}

void CmvnAccumulator::add(const Mat& frames) {
  if (frames.rows() == 0) return;
  CmvnAccumulator block;
  block.count_ = static_cast<double>(frames.rows());
  block.mean_ = frames.colwise().mean();
  block.m2_ = (frames.rowwise() - block.mean_).array().square().colwise().sum().matrix();
  merge(block);
}

void CmvnAccumulator::merge(const CmvnAccumulator& other) {
  if (other.count_ == 0.0) return;
  if (count_ == 0.0) {
    *this = other;
    return;
  }
  if (other.mean_.size() != mean_.size()) throw ValidationError("CMVN dimension mismatch");
  double n = count_ + other.count_;
  RowVec delta = other.mean_ - mean_;
  mean_ += delta * (other.count_ / n);
  m2_ += other.m2_ + delta.array().square().matrix() * (count_ * other.count_ / n);
  count_ = n;
}

CmvnStats CmvnAccumulator::finish(double var_floor) const {
  if (count_ < 2.0) throw ValidationError("CMVN needs at least two frames");
  CmvnStats s;
  s.mean = mean_;
  s.var = m2_ / count_;
  for (Eigen::Index d = 0; d < s.var.size(); ++d) {
    if (s.var[d] < var_floor) {
      s.var[d] = var_floor;
      ++s.floored_dims;
    }
  }
  if (s.floored_dims > 0)
    std::clog << "warning: " << s.floored_dims << " CMVN dimension(s) had zero variance; floored\n";
  return s;
}

CmvnStats estimate_cmvn(const std::vector<FeatureMatrix>& feats, double var_floor) {
  CmvnAccumulator acc;
  for (const auto& f : feats) acc.add(f.frames);
  return acc.finish(var_floor);
}

FeatureMatrix apply_cmvn(const FeatureMatrix& f, const CmvnStats& stats) {
  if (f.dim() != stats.mean.size()) throw ValidationError("CMVN dimension mismatch");
  FeatureMatrix out = f;
  RowVec inv_std = stats.var.array().sqrt().inverse().matrix();
  out.frames = ((f.frames.rowwise() - stats.mean).array().rowwise() * inv_std.array()).matrix();
  return out;
}

FeatureMatrix invert_cmvn(const FeatureMatrix& f, const CmvnStats& stats) {
  if (f.dim() != stats.mean.size()) throw ValidationError("CMVN dimension mismatch");
  FeatureMatrix out = f;
  RowVec sd = stats.var.array().sqrt().matrix();
  out.frames = ((f.frames.array().rowwise() * sd.array()).matrix().rowwise() + stats.mean);
  return out;
}

std::vector<MaskRect> draw_masks(Eigen::Index frames, Eigen::Index dim, const SpecAugmentPolicy& p,
                                 std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<MaskRect> masks;
  auto draw = [&](bool along_freq, int count, int max_width, Eigen::Index extent) {
    int cap = static_cast<int>(std::min<Eigen::Index>(std::max(0, max_width), extent));
    for (int i = 0; i < count; ++i) {
      int width = std::uniform_int_distribution<int>(0, cap)(rng);
      int start = std::uniform_int_distribution<int>(0, static_cast<int>(extent) - width)(rng);
      masks.push_back({along_freq, start, width});
    }
  };
  draw(true, p.num_freq_masks, p.max_freq_width, dim);
  draw(false, p.num_time_masks, p.max_time_width, frames);
  return masks;
}

void apply_mask(Mat& frames, const MaskRect& m, double fill_value) {
  if (m.width <= 0) return;
  if (m.along_freq)
    frames.middleCols(m.start, m.width).setConstant(fill_value);
  else
    frames.middleRows(m.start, m.width).setConstant(fill_value);
}

FeatureMatrix spec_augment(const FeatureMatrix& f, const SpecAugmentPolicy& policy, std::uint64_t seed) {
  FeatureMatrix out = f;
  for (const auto& m : draw_masks(f.num_frames(), f.dim(), policy, seed))
    apply_mask(out.frames, m, policy.fill_value);
  return out;
}

namespace {

void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::string index_path(const std::string& path) { return path + ".index"; }

FeatureMatrix parse_block(const std::string& bytes, std::uint64_t& offset) {
  auto need = [&](std::uint64_t n) {
    if (offset + n > bytes.size()) throw ValidationError("truncated feature archive block");
  };
  const auto* base = reinterpret_cast<const unsigned char*>(bytes.data());
  need(4);
  std::uint32_t id_len = get_u32(base + offset);
  offset += 4;
  need(id_len + 8);
  FeatureMatrix f;
  f.utt_id = bytes.substr(offset, id_len);
  offset += id_len;
  std::uint32_t rows = get_u32(base + offset);
  std::uint32_t cols = get_u32(base + offset + 4);
  offset += 8;
  std::uint64_t n = static_cast<std::uint64_t>(rows) * cols;
  need(n * 4);
  f.frames.resize(rows, cols);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::uint32_t bits = get_u32(base + offset + 4 * i);
    float v;
    std::memcpy(&v, &bits, 4);
    f.frames.data()[i] = v;
  }
  offset += n * 4;
  return f;
}

}  // namespace

void write_feature_archive(const std::string& path, const std::vector<FeatureMatrix>& feats) {
  std::string bytes;
  std::string index;
  for (const auto& f : feats) {
    index += f.utt_id + "\t" + std::to_string(bytes.size()) + "\n";
    put_u32(bytes, static_cast<std::uint32_t>(f.utt_id.size()));
    bytes += f.utt_id;
    put_u32(bytes, static_cast<std::uint32_t>(f.frames.rows()));
    put_u32(bytes, static_cast<std::uint32_t>(f.frames.cols()));
    for (Eigen::Index i = 0; i < f.frames.size(); ++i) {
      auto v = static_cast<float>(f.frames.data()[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(bytes, bits);
    }
  }
  write_file(path, bytes);
  write_file(index_path(path), index);
}

std::map<std::string, std::uint64_t> read_feature_index(const std::string& path) {
  std::map<std::string, std::uint64_t> out;
  std::istringstream in(read_file(index_path(path)));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw ValidationError("malformed feature index line: " + line);
    out[line.substr(0, tab)] = std::stoull(line.substr(tab + 1));
  }
  return out;
}

std::vector<FeatureMatrix> read_feature_archive(const std::string& path) {
  std::string bytes = read_file(path);
  std::vector<FeatureMatrix> out;
  std::uint64_t offset = 0;
  while (offset < bytes.size()) out.push_back(parse_block(bytes, offset));
  return out;
}

FeatureMatrix read_feature_at(const std::string& path, std::uint64_t offset) {
  std::string bytes = read_file(path);
  return parse_block(bytes, offset);
}

}  // namespace lowsup
