#pragma once

#include "lowsup/autograd.hpp"
#include "lowsup/common.hpp"

#include <span>

namespace lowsup {

/// Minimum frames needed to emit `target`: its length plus one blank per adjacent repeat.
int ctc_min_frames(std::span<const int> target);

struct CtcResult {
  double loss = 0.0;  // -ln p(target | x); +inf when no alignment exists
  bool feasible = true;
  Mat grad;           // d loss / d log_probs, T x V (zero when infeasible)
};

/// Forward-backward over the blank-augmented target in log space.
/// `log_probs` is T x V with rows that are log-distributions.
CtcResult ctc_loss_and_grad(const Mat& log_probs, std::span<const int> target, int blank = 0);

double ctc_loss(const Mat& log_probs, std::span<const int> target, int blank = 0);

namespace ag {
/// Differentiable CTC loss. Infeasible targets yield +inf and no gradient.
Var ctc_loss(Var log_probs, std::span<const int> target, int blank = 0);
}  // namespace ag

double log_add(double a, double b);

}  // namespace lowsup
