#include "lowsup/autograd.hpp"

#include <cmath>

namespace lowsup::ag {

void Node::accumulate(const Mat& g) {
  if (!requires_grad) return;
  if (grad.size() == 0) grad = g;
  else grad += g;
}

Var Graph::constant(Mat value) {
  auto n = std::make_unique<Node>();
  n->graph = this;
  n->value = std::move(value);
  nodes_.push_back(std::move(n));
  return nodes_.back().get();
}

Var Graph::param(Parameter& p, bool trainable) {
  auto n = std::make_unique<Node>();
  n->graph = this;
  n->ext = &p.value;
  n->requires_grad = grad_enabled_ && trainable;
  if (n->requires_grad) {
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
    n->sink = &p.grad;
  }
  nodes_.push_back(std::move(n));
  return nodes_.back().get();
}

Var Graph::make(Mat value, std::initializer_list<Var> inputs) {
  auto n = std::make_unique<Node>();
  n->graph = this;
  n->value = std::move(value);
  if (grad_enabled_)
    for (Var v : inputs) n->requires_grad = n->requires_grad || v->requires_grad;
  nodes_.push_back(std::move(n));
  return nodes_.back().get();
}

void Graph::backward(Var out) {
  if (!grad_enabled_) throw Error("backward on a graph recorded without gradients");
  if (out->val().size() != 1) throw Error("backward requires a scalar output");
  if (!out->requires_grad) return;
  out->grad = Mat::Ones(1, 1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.grad.size() == 0) continue;
    if (n.backward) n.backward();
    if (n.sink) *n.sink += n.grad;
  }
}

double scalar(Var v) { return v->val()(0, 0); }

namespace {

// Registers a backward closure only when some input needs gradients.
template <typename F>
Var finish(Var out, F&& fn) {
  if (out->requires_grad) out->backward = std::forward<F>(fn);
  return out;
}

void check_same_shape(Var a, Var b, const char* op) {
  if (a->val().rows() != b->val().rows() || a->val().cols() != b->val().cols())
    throw Error(std::string(op) + ": shape mismatch");
}

}  // namespace

Var add(Var a, Var b) {
  check_same_shape(a, b, "add");
  Var out = a->graph->make(a->val() + b->val(), {a, b});
  return finish(out, [a, b, out] {
    a->accumulate(out->grad);
    b->accumulate(out->grad);
  });
}

Var sub(Var a, Var b) {
  check_same_shape(a, b, "sub");
  Var out = a->graph->make(a->val() - b->val(), {a, b});
  return finish(out, [a, b, out] {
    a->accumulate(out->grad);
    b->accumulate_expr(-out->grad);
  });
}

Var mul(Var a, Var b) {
  check_same_shape(a, b, "mul");
  Var out = a->graph->make(a->val().cwiseProduct(b->val()), {a, b});
  return finish(out, [a, b, out] {
    a->accumulate_expr(out->grad.cwiseProduct(b->val()));
    b->accumulate_expr(out->grad.cwiseProduct(a->val()));
  });
}

Var scale(Var a, double s) {
  Var out = a->graph->make(a->val() * s, {a});
  return finish(out, [a, s, out] { a->accumulate_expr(out->grad * s); });
}

Var add_const(Var a, const Mat& c) {
  if (a->val().rows() != c.rows() || a->val().cols() != c.cols()) throw Error("add_const: shape mismatch");
  Var out = a->graph->make(a->val() + c, {a});
  return finish(out, [a, out] { a->accumulate(out->grad); });
}

Var matmul(Var a, Var b) {
  if (a->val().cols() != b->val().rows()) throw Error("matmul: inner dimension mismatch");
  Var out = a->graph->make(a->val() * b->val(), {a, b});
  return finish(out, [a, b, out] {
    if (a->requires_grad) a->accumulate_expr(out->grad * b->val().transpose());
    if (b->requires_grad) b->accumulate_expr(a->val().transpose() * out->grad);
  });
}

Var linear(Var x, Var w, Var b) {
  if (x->val().cols() != w->val().rows() || b->val().cols() != w->val().cols() || b->val().rows() != 1)
    throw Error("linear: shape mismatch");
  Mat y = x->val() * w->val();
  y.rowwise() += b->val().row(0);
  Var out = x->graph->make(std::move(y), {x, w, b});
  return finish(out, [x, w, b, out] {
    if (x->requires_grad) x->accumulate_expr(out->grad * w->val().transpose());
    if (w->requires_grad) w->accumulate_expr(x->val().transpose() * out->grad);
    if (b->requires_grad) b->accumulate_expr(out->grad.colwise().sum());
  });
}

Var relu(Var a) {
  Var out = a->graph->make(a->val().cwiseMax(0.0), {a});
  return finish(out, [a, out] {
    a->accumulate_expr((a->val().array() > 0.0).cast<double>().matrix().cwiseProduct(out->grad));
  });
}

Var sigmoid(Var a) {
  Mat s = (1.0 / (1.0 + (-a->val().array()).exp())).matrix();
  Var out = a->graph->make(std::move(s), {a});
  return finish(out, [a, out] {
    const auto& y = out->value.array();
    a->accumulate_expr((out->grad.array() * y * (1.0 - y)).matrix());
  });
}

Var swish(Var a) {
  Mat s = (1.0 / (1.0 + (-a->val().array()).exp())).matrix();
  Var out = a->graph->make(a->val().cwiseProduct(s), {a});
  return finish(out, [a, out, s = std::move(s)] {
    auto x = a->val().array();
    auto sa = s.array();
    a->accumulate_expr((out->grad.array() * (sa + x * sa * (1.0 - sa))).matrix());
  });
}

Var glu(Var a) {
  const auto& x = a->val();
  if (x.cols() % 2 != 0) throw Error("glu: odd column count");
  Eigen::Index h = x.cols() / 2;
  Mat gate = (1.0 / (1.0 + (-x.rightCols(h).array()).exp())).matrix();
  Mat lin = x.leftCols(h);
  Var out = a->graph->make(lin.cwiseProduct(gate), {a});
  return finish(out, [a, out, h, gate = std::move(gate), lin = std::move(lin)] {
    Mat g(out->grad.rows(), 2 * h);
    g.leftCols(h) = out->grad.cwiseProduct(gate);
    g.rightCols(h) = (out->grad.array() * lin.array() * gate.array() * (1.0 - gate.array())).matrix();
    a->accumulate(g);
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const auto& v = x->val();
  const Eigen::Index n = v.cols();
  if (gain->val().cols() != n || bias->val().cols() != n) throw Error("layer_norm: shape mismatch");
  Vec mean = v.rowwise().mean();
  Mat centered = v.colwise() - mean;
  Vec rstd = (centered.array().square().rowwise().mean() + eps).rsqrt().matrix();
  Mat xhat = centered.array().colwise() * rstd.array();
  Mat y = (xhat.array().rowwise() * gain->val().row(0).array()).matrix();
  y.rowwise() += bias->val().row(0);
  Var out = x->graph->make(std::move(y), {x, gain, bias});
  return finish(out, [x, gain, bias, out, n, xhat = std::move(xhat), rstd = std::move(rstd)] {
    const Mat& dy = out->grad;
    if (gain->requires_grad) gain->accumulate_expr(dy.cwiseProduct(xhat).colwise().sum());
    if (bias->requires_grad) bias->accumulate_expr(dy.colwise().sum());
    if (x->requires_grad) {
      Mat dxhat = (dy.array().rowwise() * gain->val().row(0).array()).matrix();
      Vec s1 = dxhat.rowwise().sum();
      Vec s2 = dxhat.cwiseProduct(xhat).rowwise().sum();
      Mat dx = (dxhat * static_cast<double>(n)).colwise() - s1;
      dx -= (xhat.array().colwise() * s2.array()).matrix();
      dx = (dx.array().colwise() * (rstd.array() / static_cast<double>(n))).matrix();
      x->accumulate(dx);
    }
  });
}

Var softmax_rows(Var x) {
  const auto& v = x->val();
  Vec mx = v.rowwise().maxCoeff();
  Mat e = (v.colwise() - mx).array().exp().matrix();
  Vec s = e.rowwise().sum();
  e = (e.array().colwise() / s.array()).matrix();
  Var out = x->graph->make(std::move(e), {x});
  return finish(out, [x, out] {
    const Mat& y = out->value;
    Vec dot = out->grad.cwiseProduct(y).rowwise().sum();
    x->accumulate_expr(((out->grad.colwise() - dot).array() * y.array()).matrix());
  });
}

Var log_softmax_rows(Var x) {
  const auto& v = x->val();
  Vec mx = v.rowwise().maxCoeff();
  Mat shifted = v.colwise() - mx;
  Vec lse = shifted.array().exp().rowwise().sum().log().matrix();
  Var out = x->graph->make(shifted.colwise() - lse, {x});
  return finish(out, [x, out] {
    Mat p = out->value.array().exp().matrix();
    Vec gs = out->grad.rowwise().sum();
    x->accumulate_expr(out->grad - (p.array().colwise() * gs.array()).matrix());
  });
}

Var slice_cols(Var x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > x->val().cols()) throw Error("slice_cols: out of range");
  Var out = x->graph->make(x->val().middleCols(start, count), {x});
  return finish(out, [x, out, start, count] {
    if (x->grad.size() == 0) x->grad = Mat::Zero(x->val().rows(), x->val().cols());
    x->grad.middleCols(start, count) += out->grad;
  });
}

Var slice_rows(Var x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > x->val().rows()) throw Error("slice_rows: out of range");
  Var out = x->graph->make(x->val().middleRows(start, count), {x});
  return finish(out, [x, out, start, count] {
    if (x->grad.size() == 0) x->grad = Mat::Zero(x->val().rows(), x->val().cols());
    x->grad.middleRows(start, count) += out->grad;
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw Error("concat_cols: no inputs");
  Eigen::Index rows = parts[0]->val().rows(), cols = 0;
  for (Var p : parts) {
    if (p->val().rows() != rows) throw Error("concat_cols: row mismatch");
    cols += p->val().cols();
  }
  Mat v(rows, cols);
  Eigen::Index c = 0;
  for (Var p : parts) {
    v.middleCols(c, p->val().cols()) = p->val();
    c += p->val().cols();
  }
  Graph* g = parts[0]->graph;
  Var out = g->make(std::move(v), {});
  if (g->grad_enabled())
    for (Var p : parts) out->requires_grad = out->requires_grad || p->requires_grad;
  std::vector<Var> keep(parts.begin(), parts.end());
  return finish(out, [keep = std::move(keep), out] {
    Eigen::Index c0 = 0;
    for (Var p : keep) {
      Eigen::Index w = p->val().cols();
      if (p->requires_grad) p->accumulate(out->grad.middleCols(c0, w));
      c0 += w;
    }
  });
}

Var stack_frames(Var x, int kernel, int stride, int pad) {
  const auto& v = x->val();
  const Eigen::Index t_in = v.rows(), d = v.cols();
  const Eigen::Index t_out = (t_in + 2 * pad - kernel) / stride + 1;
  if (t_out <= 0) throw Error("stack_frames: input too short");
  Mat out_v = Mat::Zero(t_out, kernel * d);
  for (Eigen::Index t = 0; t < t_out; ++t) {
    for (int j = 0; j < kernel; ++j) {
      Eigen::Index src = t * stride - pad + j;
      if (src >= 0 && src < t_in) out_v.block(t, j * d, 1, d) = v.row(src);
    }
  }
  Var out = x->graph->make(std::move(out_v), {x});
  return finish(out, [x, out, kernel, stride, pad, t_in, t_out, d] {
    Mat g = Mat::Zero(t_in, d);
    for (Eigen::Index t = 0; t < t_out; ++t) {
      for (int j = 0; j < kernel; ++j) {
        Eigen::Index src = t * stride - pad + j;
        if (src >= 0 && src < t_in) g.row(src) += out->grad.block(t, j * d, 1, d);
      }
    }
    x->accumulate(g);
  });
}

Var depthwise_conv(Var x, Var w, Var b) {
  const auto& v = x->val();
  const auto& k = w->val();
  const Eigen::Index t_len = v.rows(), c = v.cols();
  const int kernel = static_cast<int>(k.rows());
  const int pad = (kernel - 1) / 2;
  if (k.cols() != c || b->val().cols() != c) throw Error("depthwise_conv: shape mismatch");
  Mat y(t_len, c);
  y.rowwise() = b->val().row(0);
  for (int j = 0; j < kernel; ++j) {
    Eigen::Index shift = j - pad;
    Eigen::Index lo = std::max<Eigen::Index>(0, -shift);
    Eigen::Index hi = std::min<Eigen::Index>(t_len, t_len - shift);
    if (hi <= lo) continue;
    y.middleRows(lo, hi - lo) +=
        (v.middleRows(lo + shift, hi - lo).array().rowwise() * k.row(j).array()).matrix();
  }
  Var out = x->graph->make(std::move(y), {x, w, b});
  return finish(out, [x, w, b, out, kernel, pad, t_len, c] {
    const Mat& dy = out->grad;
    const auto& v = x->val();
    const auto& k = w->val();
    Mat dx = x->requires_grad ? Mat::Zero(t_len, c) : Mat();
    Mat dw = w->requires_grad ? Mat::Zero(kernel, c) : Mat();
    for (int j = 0; j < kernel; ++j) {
      Eigen::Index shift = j - pad;
      Eigen::Index lo = std::max<Eigen::Index>(0, -shift);
      Eigen::Index hi = std::min<Eigen::Index>(t_len, t_len - shift);
      if (hi <= lo) continue;
      if (x->requires_grad)
        dx.middleRows(lo + shift, hi - lo) +=
            (dy.middleRows(lo, hi - lo).array().rowwise() * k.row(j).array()).matrix();
      if (w->requires_grad)
        dw.row(j) += dy.middleRows(lo, hi - lo).cwiseProduct(v.middleRows(lo + shift, hi - lo)).colwise().sum();
    }
    if (x->requires_grad) x->accumulate(dx);
    if (w->requires_grad) w->accumulate(dw);
    if (b->requires_grad) b->accumulate_expr(dy.colwise().sum());
  });
}

Var dropout(Var x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  Mat mask(x->val().rows(), x->val().cols());
  const double s = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? s : 0.0;
  Var out = x->graph->make(x->val().cwiseProduct(mask), {x});
  return finish(out, [x, out, mask = std::move(mask)] { x->accumulate_expr(out->grad.cwiseProduct(mask)); });
}

Var embedding(Var table, std::span<const int> ids) {
  const auto& tv = table->val();
  Mat v(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) throw Error("embedding: id out of range");
    v.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  Var out = table->graph->make(std::move(v), {table});
  std::vector<int> idv(ids.begin(), ids.end());
  return finish(out, [table, out, idv = std::move(idv)] {
    Mat g = Mat::Zero(table->val().rows(), table->val().cols());
    for (std::size_t i = 0; i < idv.size(); ++i) g.row(idv[i]) += out->grad.row(static_cast<Eigen::Index>(i));
    table->accumulate(g);
  });
}

Var attention(Var q, Var k, Var v, int heads, bool causal) {
  const auto& qv = q->val();
  const auto& kv = k->val();
  const auto& vv = v->val();
  const Eigen::Index tq = qv.rows(), tk = kv.rows(), d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || vv.rows() != tk || d % heads != 0)
    throw Error("attention: shape mismatch");
  const Eigen::Index dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Mat> probs(static_cast<std::size_t>(heads));
  Mat o(tq, d);
  for (int h = 0; h < heads; ++h) {
    Mat s = (qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose()) * sc;
    if (causal) {
      for (Eigen::Index i = 0; i < tq; ++i)
        for (Eigen::Index j = i + 1; j < tk; ++j) s(i, j) = -std::numeric_limits<double>::infinity();
    }
    Vec mx = s.rowwise().maxCoeff();
    Mat e = (s.colwise() - mx).array().exp().matrix();
    Vec z = e.rowwise().sum();
    e = (e.array().colwise() / z.array()).matrix();
    o.middleCols(h * dh, dh) = e * vv.middleCols(h * dh, dh);
    probs[static_cast<std::size_t>(h)] = std::move(e);
  }
  Var out = q->graph->make(std::move(o), {q, k, v});
  return finish(out, [q, k, v, out, heads, dh, sc, probs = std::move(probs)] {
    const auto& qv = q->val();
    const auto& kv = k->val();
    const auto& vv = v->val();
    Mat dq = Mat::Zero(qv.rows(), qv.cols());
    Mat dk = Mat::Zero(kv.rows(), kv.cols());
    Mat dv = Mat::Zero(vv.rows(), vv.cols());
    for (int h = 0; h < heads; ++h) {
      const Mat& p = probs[static_cast<std::size_t>(h)];
      auto go = out->grad.middleCols(h * dh, dh);
      dv.middleCols(h * dh, dh) = p.transpose() * go;
      Mat dp = go * vv.middleCols(h * dh, dh).transpose();
      Vec dot = dp.cwiseProduct(p).rowwise().sum();
      Mat ds = ((dp.colwise() - dot).array() * p.array()).matrix() * sc;
      dq.middleCols(h * dh, dh) = ds * kv.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh) = ds.transpose() * qv.middleCols(h * dh, dh);
    }
    q->accumulate(dq);
    k->accumulate(dk);
    v->accumulate(dv);
  });
}

Var sum_all(Var x) {
  Mat s(1, 1);
  s(0, 0) = x->val().sum();
  Var out = x->graph->make(std::move(s), {x});
  return finish(out, [x, out] {
    x->accumulate(Mat::Constant(x->val().rows(), x->val().cols(), out->grad(0, 0)));
  });
}

Var smoothed_nll(Var log_probs, std::span<const int> targets, double eps) {
  const auto& lp = log_probs->val();
  const auto n = static_cast<Eigen::Index>(targets.size());
  if (lp.rows() != n) throw Error("smoothed_nll: row/target count mismatch");
  if (n == 0) throw Error("smoothed_nll: no targets");
  const Eigen::Index vsz = lp.cols();
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    int y = targets[static_cast<std::size_t>(i)];
    if (y < 0 || y >= vsz) throw Error("smoothed_nll: target out of range");
    total += -(1.0 - eps) * lp(i, y);
    if (eps > 0.0) total += -(eps / static_cast<double>(vsz)) * lp.row(i).sum();
  }
  Mat s(1, 1);
  s(0, 0) = total / static_cast<double>(n);
  Var out = log_probs->graph->make(std::move(s), {log_probs});
  std::vector<int> tv(targets.begin(), targets.end());
  return finish(out, [log_probs, out, eps, n, vsz, tv = std::move(tv)] {
    double g = out->grad(0, 0) / static_cast<double>(n);
    Mat d = Mat::Constant(n, vsz, -g * eps / static_cast<double>(vsz));
    for (Eigen::Index i = 0; i < n; ++i) d(i, tv[static_cast<std::size_t>(i)]) += -g * (1.0 - eps);
    log_probs->accumulate(d);
  });
}

}  // namespace lowsup::ag
