#pragma once

// Tape-based reverse-mode differentiation over 2-D Eigen matrices.
//
// A Graph records one forward pass. Nodes are appended in evaluation order,
// so walking the tape backwards visits every node after all of its consumers.

#include "lowsup/common.hpp"

#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace lowsup::ag {

struct Parameter {
  std::string name;
  Mat value;
  Mat grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Graph;

struct Node {
  Graph* graph = nullptr;
  Mat value;
  const Mat* ext = nullptr;  // parameter leaves alias the parameter storage
  Mat grad;
  bool requires_grad = false;
  Mat* sink = nullptr;  // where a parameter leaf deposits its gradient
  std::function<void()> backward;

  const Mat& val() const { return ext ? *ext : value; }
  void accumulate(const Mat& g);
  template <typename Expr>
  void accumulate_expr(const Expr& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) grad = g;
    else grad += g;
  }
};

using Var = Node*;

class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Mat value);
  /// A leaf aliasing `p`; gradients land in p.grad when `trainable` and grads are enabled.
  Var param(Parameter& p, bool trainable = true);

  /// Creates an interior node; requires_grad is true if any input requires it.
  Var make(Mat value, std::initializer_list<Var> inputs);

  /// Seeds d(out)/d(out) = 1 for a 1x1 output and propagates to the leaves.
  void backward(Var out);

  std::size_t size() const { return nodes_.size(); }

 private:
  bool grad_enabled_;
  std::vector<std::unique_ptr<Node>> nodes_;
};

double scalar(Var v);

// Elementwise and linear algebra.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_const(Var a, const Mat& c);
Var matmul(Var a, Var b);
/// x * W + b with b a 1 x out row broadcast over rows.
Var linear(Var x, Var w, Var b);

Var relu(Var a);
Var sigmoid(Var a);
Var swish(Var a);
/// Gated linear unit over columns: first half * sigmoid(second half).
Var glu(Var a);

Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var softmax_rows(Var x);
Var log_softmax_rows(Var x);

Var slice_cols(Var x, Eigen::Index start, Eigen::Index count);
Var slice_rows(Var x, Eigen::Index start, Eigen::Index count);
Var concat_cols(std::span<const Var> parts);

/// Row t of the result concatenates input rows t*stride - pad + j for j < kernel
/// (zeros outside). Output has ceil-style length (T + 2*pad - kernel)/stride + 1.
Var stack_frames(Var x, int kernel, int stride, int pad);

/// Per-channel convolution over rows with "same" padding; w is kernel x C, b is 1 x C.
Var depthwise_conv(Var x, Var w, Var b);

Var dropout(Var x, double p, std::mt19937_64& rng);

/// Rows of `table` selected by `ids`.
Var embedding(Var table, std::span<const int> ids);

/// Scaled dot-product attention over `heads` column groups of q, k, v.
/// With `causal`, query i attends to keys 0..i only.
Var attention(Var q, Var k, Var v, int heads, bool causal);

Var sum_all(Var x);

/// Mean over rows of label-smoothed negative log-likelihood, given log-probabilities.
/// The smoothed target puts (1 - eps) on the label and eps / V uniformly.
Var smoothed_nll(Var log_probs, std::span<const int> targets, double eps);

}  // namespace lowsup::ag
