#include "doctest.h"

#include "lowsup/autograd.hpp"
#include "lowsup/ctc.hpp"
#include "oracles.hpp"

#include <functional>
#include <random>

using namespace lowsup;
using namespace lowsup::ag;

namespace {

Mat randn(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Builds a scalar from the parameters; compares analytic and central-difference gradients.
void check_grad(std::vector<Parameter>& ps, const std::function<Var(Graph&, std::vector<Var>&)>& f,
                double tol = 1e-6) {
  auto eval = [&](bool grad) {
    Graph g(grad);
    std::vector<Var> vs;
    for (auto& p : ps) vs.push_back(g.param(p));
    Var out = f(g, vs);
    if (grad) g.backward(out);
    return scalar(out);
  };
  for (auto& p : ps) p.zero_grad();
  eval(true);
  const double h = 1e-6;
  for (auto& p : ps) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      double orig = p.value.data()[i];
      p.value.data()[i] = orig + h;
      double up = eval(false);
      p.value.data()[i] = orig - h;
      double down = eval(false);
      p.value.data()[i] = orig;
      double fd = (up - down) / (2 * h);
      double an = p.grad.data()[i];
      CHECK(std::abs(fd - an) <= tol * std::max(1.0, std::abs(fd)));
    }
  }
}

Parameter make(const std::string& name, Mat v) {
  Parameter p;
  p.name = name;
  p.value = std::move(v);
  p.zero_grad();
  return p;
}

}  // namespace

TEST_CASE("elementwise and linear ops match finite differences") {
  std::mt19937_64 rng(1);
  std::vector<Parameter> ps{make("x", randn(4, 6, rng)), make("w", randn(6, 3, rng)), make("b", randn(1, 3, rng)),
                            make("y", randn(4, 6, rng))};
  check_grad(ps, [](Graph&, std::vector<Var>& v) {
    Var a = mul(swish(v[0]), sigmoid(v[3]));
    Var b = sub(a, scale(relu(v[3]), 0.3));
    Var c = linear(add(b, v[0]), v[1], v[2]);
    return sum_all(mul(c, c));
  });
}

TEST_CASE("layer norm, glu and softmax gradients") {
  std::mt19937_64 rng(2);
  std::vector<Parameter> ps{make("x", randn(5, 8, rng)), make("g", randn(1, 8, rng)), make("b", randn(1, 8, rng)),
                            make("r", randn(5, 4, rng))};
  check_grad(ps, [](Graph& g, std::vector<Var>& v) {
    Var h = layer_norm(v[0], v[1], v[2]);
    Var gl = glu(h);
    Var s = softmax_rows(gl);
    Var ls = log_softmax_rows(h);
    Var r = mul(s, v[3]);
    return add(sum_all(r), scale(sum_all(mul(ls, g.constant(Mat::Constant(5, 8, 0.1)))), 1.0));
  });
}

TEST_CASE("attention gradients, plain and causal") {
  std::mt19937_64 rng(3);
  for (bool causal : {false, true}) {
    std::vector<Parameter> ps{make("q", randn(4, 8, rng)), make("k", randn(4, 8, rng)), make("v", randn(4, 8, rng)),
                              make("r", randn(4, 8, rng))};
    check_grad(ps, [causal](Graph&, std::vector<Var>& v) {
      return sum_all(mul(attention(v[0], v[1], v[2], 2, causal), v[3]));
    });
  }
}

TEST_CASE("convolutional and indexing ops") {
  std::mt19937_64 rng(4);
  std::vector<Parameter> ps{make("x", randn(9, 3, rng)), make("w", randn(5, 6, rng)), make("b", randn(1, 6, rng)),
                            make("e", randn(5, 6, rng))};
  check_grad(ps, [](Graph&, std::vector<Var>& v) {
    Var st = stack_frames(v[0], 3, 2, 1);  // 5 x 9
    Var s2 = slice_cols(st, 1, 6);
    Var dc = depthwise_conv(s2, v[1], v[2]);
    std::vector<int> ids{0, 3, 3, 1, 4};
    Var emb = embedding(v[3], ids);
    std::vector<Var> parts{dc, emb};
    Var cat = concat_cols(parts);
    Var rows = slice_rows(cat, 1, 3);
    return sum_all(mul(rows, rows));
  });
}

TEST_CASE("stack_frames output length follows the ceil convention") {
  Graph g(false);
  for (int t : {1, 2, 3, 7, 8, 100}) {
    Var x = g.constant(Mat::Ones(t, 2));
    CHECK(stack_frames(x, 3, 2, 1)->val().rows() == (t + 1) / 2);
  }
}

TEST_CASE("smoothed nll and ctc op gradients") {
  std::mt19937_64 rng(5);
  std::vector<Parameter> ps{make("z", randn(6, 5, rng))};
  std::vector<int> targets{1, 2, 0, 4, 4, 3};
  check_grad(ps, [&](Graph&, std::vector<Var>& v) {
    return smoothed_nll(log_softmax_rows(v[0]), targets, 0.1);
  });
  std::vector<int> label{1, 3, 3};
  check_grad(ps, [&](Graph&, std::vector<Var>& v) {
    return lowsup::ag::ctc_loss(log_softmax_rows(v[0]), label, 0);
  });
}

TEST_CASE("parameter gradients accumulate across graphs") {
  Parameter p = make("p", Mat::Constant(1, 1, 2.0));
  for (int i = 0; i < 2; ++i) {
    Graph g;
    Var v = g.param(p);
    g.backward(mul(v, v));
  }
  CHECK(p.grad(0, 0) == doctest::Approx(8.0));
}

TEST_CASE("frozen parameters receive no gradient") {
  Parameter a = make("a", Mat::Constant(1, 1, 3.0));
  Parameter b = make("b", Mat::Constant(1, 1, 5.0));
  Graph g;
  Var va = g.param(a, true);
  Var vb = g.param(b, false);
  g.backward(mul(va, vb));
  CHECK(a.grad(0, 0) == doctest::Approx(5.0));
  CHECK(b.grad(0, 0) == 0.0);
}
