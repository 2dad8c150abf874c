#include "lowsup/ctc.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace lowsup {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  if (a < b) std::swap(a, b);
  return a + std::log1p(std::exp(b - a));
}

int ctc_min_frames(std::span<const int> target) {
  int n = static_cast<int>(target.size());
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

CtcResult ctc_loss_and_grad(const Mat& log_probs, std::span<const int> target, int blank) {
  const Eigen::Index t_len = log_probs.rows();
  const Eigen::Index vsz = log_probs.cols();
  for (int y : target) {
    if (y == blank) throw ValidationError("CTC target contains the blank symbol");
    if (y < 0 || y >= vsz) throw ValidationError("CTC target symbol out of range");
  }
  CtcResult r;
  r.grad = Mat::Zero(t_len, vsz);
  if (t_len == 0 || ctc_min_frames(target) > t_len) {
    r.loss = std::numeric_limits<double>::infinity();
    r.feasible = false;
    return r;
  }

  // Blank-augmented label sequence: blank y1 blank y2 ... yL blank.
  const int s_len = 2 * static_cast<int>(target.size()) + 1;
  std::vector<int> ext(static_cast<std::size_t>(s_len), blank);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  auto can_skip = [&](int s) { return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]; };

  // alpha includes the emission at t; beta covers frames after t only.
  Mat alpha = Mat::Constant(t_len, s_len, kNegInf);
  Mat beta = Mat::Constant(t_len, s_len, kNegInf);
  alpha(0, 0) = log_probs(0, ext[0]);
  if (s_len > 1) alpha(0, 1) = log_probs(0, ext[1]);
  for (Eigen::Index t = 1; t < t_len; ++t) {
    for (int s = 0; s < s_len; ++s) {
      double a = alpha(t - 1, s);
      if (s >= 1) a = log_add(a, alpha(t - 1, s - 1));
      if (can_skip(s)) a = log_add(a, alpha(t - 1, s - 2));
      if (a != kNegInf) alpha(t, s) = a + log_probs(t, ext[s]);
    }
  }
  beta(t_len - 1, s_len - 1) = 0.0;
  if (s_len > 1) beta(t_len - 1, s_len - 2) = 0.0;
  for (Eigen::Index t = t_len - 2; t >= 0; --t) {
    for (int s = 0; s < s_len; ++s) {
      double b = beta(t + 1, s) + log_probs(t + 1, ext[s]);
      if (s + 1 < s_len) b = log_add(b, beta(t + 1, s + 1) + log_probs(t + 1, ext[s + 1]));
      if (s + 2 < s_len && can_skip(s + 2)) b = log_add(b, beta(t + 1, s + 2) + log_probs(t + 1, ext[s + 2]));
      beta(t, s) = b;
    }
  }
  double log_z = alpha(t_len - 1, s_len - 1);
  if (s_len > 1) log_z = log_add(log_z, alpha(t_len - 1, s_len - 2));
  if (log_z == kNegInf) {
    r.loss = std::numeric_limits<double>::infinity();
    r.feasible = false;
    return r;
  }
  r.loss = -log_z;
  for (Eigen::Index t = 0; t < t_len; ++t) {
    for (int s = 0; s < s_len; ++s) {
      double occ = alpha(t, s) + beta(t, s);
      if (occ == kNegInf) continue;
      r.grad(t, ext[s]) -= std::exp(occ - log_z);
    }
  }
  return r;
}

double ctc_loss(const Mat& log_probs, std::span<const int> target, int blank) {
  return ctc_loss_and_grad(log_probs, target, blank).loss;
}

namespace ag {

Var ctc_loss(Var log_probs, std::span<const int> target, int blank) {
  CtcResult r = ctc_loss_and_grad(log_probs->val(), target, blank);
  Mat v(1, 1);
  v(0, 0) = r.loss;
  Var out = log_probs->graph->make(std::move(v), {log_probs});
  if (!r.feasible) {
    out->requires_grad = false;
    return out;
  }
  if (out->requires_grad) {
    out->backward = [log_probs, out, g = std::move(r.grad)] {
      log_probs->accumulate_expr(g * out->grad(0, 0));
    };
  }
  return out;
}

}  // namespace ag
}  // namespace lowsup
