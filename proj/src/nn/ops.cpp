#include "mixar/nn/ops.hpp"

#include <cmath>
#include <memory>
#include <numbers>

namespace mixar::nn {
namespace {

void check_same_shape(Var a, Var b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), std::string(op) + ": shape mismatch");
}

bool wants(Var v) { return v.valid() && v.tape().needs_grad(v); }

}  // namespace

Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Tape& t = a.tape();
  return t.record(a.value() * b.value(), {a, b}, [a, b](const Matrix& g) {
    if (wants(a)) a.tape().grad(a).noalias() += g * b.value().transpose();
    if (wants(b)) b.tape().grad(b).noalias() += a.value().transpose() * g;
  });
}

Var linear(Var x, Var w, Var b) {
  require(x.cols() == w.rows(), "linear: input width does not match weight");
  Tape& t = x.tape();
  Matrix out = x.value() * w.value();
  if (b.valid()) {
    require(b.rows() == 1 && b.cols() == w.cols(), "linear: bias shape");
    out.rowwise() += b.value().row(0);
  }
  return t.record(std::move(out), {x, w, b}, [x, w, b](const Matrix& g) {
    if (wants(x)) x.tape().grad(x).noalias() += g * w.value().transpose();
    if (wants(w)) w.tape().grad(w).noalias() += x.value().transpose() * g;
    if (wants(b)) b.tape().grad(b) += g.colwise().sum();
  });
}

Var add(Var a, Var b) {
  check_same_shape(a, b, "add");
  return a.tape().record(a.value() + b.value(), {a, b}, [a, b](const Matrix& g) {
    if (wants(a)) a.tape().grad(a) += g;
    if (wants(b)) b.tape().grad(b) += g;
  });
}

Var sub(Var a, Var b) {
  check_same_shape(a, b, "sub");
  return a.tape().record(a.value() - b.value(), {a, b}, [a, b](const Matrix& g) {
    if (wants(a)) a.tape().grad(a) += g;
    if (wants(b)) b.tape().grad(b) -= g;
  });
}

Var mul(Var a, Var b) {
  check_same_shape(a, b, "mul");
  return a.tape().record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](const Matrix& g) {
    if (wants(a)) a.tape().grad(a) += g.cwiseProduct(b.value());
    if (wants(b)) b.tape().grad(b) += g.cwiseProduct(a.value());
  });
}

Var scale(Var a, double s) {
  return a.tape().record(a.value() * s, {a}, [a, s](const Matrix& g) { a.tape().grad(a) += g * s; });
}

Var add_scalar(Var a, double s) {
  Matrix out = a.value().array() + s;
  return a.tape().record(std::move(out), {a}, [a](const Matrix& g) { a.tape().grad(a) += g; });
}

Var add_row(Var x, Var row) {
  require(row.rows() == 1 && row.cols() == x.cols(), "add_row: shape mismatch");
  Matrix out = x.value();
  out.rowwise() += row.value().row(0);
  return x.tape().record(std::move(out), {x, row}, [x, row](const Matrix& g) {
    if (wants(x)) x.tape().grad(x) += g;
    if (wants(row)) row.tape().grad(row) += g.colwise().sum();
  });
}

Var add_tiled(Var x, Var pattern) {
  const Index period = pattern.rows();
  require(pattern.cols() == x.cols() && period > 0 && x.rows() % period == 0, "add_tiled: shape mismatch");
  Matrix out = x.value();
  const Index reps = x.rows() / period;
  for (Index r = 0; r < reps; ++r) out.middleRows(r * period, period) += pattern.value();
  return x.tape().record(std::move(out), {x, pattern}, [x, pattern, period, reps](const Matrix& g) {
    if (wants(x)) x.tape().grad(x) += g;
    if (wants(pattern)) {
      Matrix& gp = pattern.tape().grad(pattern);
      for (Index r = 0; r < reps; ++r) gp += g.middleRows(r * period, period);
    }
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
}

Var gelu(Var x) {
  // tanh approximation
  constexpr double c = kGeluC;
  const Matrix& v = x.value();
  Matrix inner = c * (v.array() + 0.044715 * v.array().cube()).matrix();
  Matrix th = inner.array().tanh().matrix();
  Matrix out = (0.5 * v.array() * (1.0 + th.array())).matrix();
  return x.tape().record(std::move(out), {x}, [x, th](const Matrix& g) {
    const auto& v = x.value().array();
    auto sech2 = 1.0 - th.array().square();
    auto d = 0.5 * (1.0 + th.array()) + 0.5 * v * sech2 * kGeluC * (1.0 + 3.0 * 0.044715 * v.square());
    x.tape().grad(x).array() += g.array() * d;
  });
}

Var silu(Var x) {
  Matrix sig = (1.0 / (1.0 + (-x.value().array()).exp())).matrix();
  Matrix out = x.value().cwiseProduct(sig);
  return x.tape().record(std::move(out), {x}, [x, sig](const Matrix& g) {
    auto s = sig.array();
    x.tape().grad(x).array() += g.array() * (s * (1.0 + x.value().array() * (1.0 - s)));
  });
}

Var exp(Var x) {
  Matrix out = x.value().array().exp().matrix();
  Matrix saved = out;
  return x.tape().record(std::move(out), {x}, [x, saved](const Matrix& g) {
    x.tape().grad(x) += g.cwiseProduct(saved);
  });
}

Var square(Var x) {
  return x.tape().record(x.value().cwiseAbs2(), {x}, [x](const Matrix& g) {
    x.tape().grad(x) += 2.0 * g.cwiseProduct(x.value());
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Index d = x.cols();
  require(gamma.rows() == 1 && gamma.cols() == d && beta.rows() == 1 && beta.cols() == d, "layer_norm: affine shape");
  const Matrix& v = x.value();
  Matrix xhat(v.rows(), d);
  Eigen::VectorXd inv_std(v.rows());
  for (Index r = 0; r < v.rows(); ++r) {
    const double mu = v.row(r).mean();
    const double var = (v.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (v.row(r).array() - mu) * inv_std(r);
  }
  Matrix out = xhat;
  out.array().rowwise() *= gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return x.tape().record(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std, d](const Matrix& g) {
    if (wants(gamma)) gamma.tape().grad(gamma) += g.cwiseProduct(xhat).colwise().sum();
    if (wants(beta)) beta.tape().grad(beta) += g.colwise().sum();
    if (wants(x)) {
      Matrix gx = g;
      gx.array().rowwise() *= gamma.value().row(0).array();
      Matrix& out = x.tape().grad(x);
      for (Index r = 0; r < gx.rows(); ++r) {
        const double m1 = gx.row(r).mean();
        const double m2 = gx.row(r).dot(xhat.row(r)) / static_cast<double>(d);
        out.row(r).array() += inv_std(r) * (gx.row(r).array() - m1 - xhat.row(r).array() * m2);
      }
    }
  });
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix p = logits;
  for (Index r = 0; r < p.rows(); ++r) {
    const double m = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

Var attention(Var q, Var k, Var v, Index batch, int heads, std::int64_t* pair_count) {
  const Index d = q.cols();
  require(batch > 0 && heads > 0 && d % heads == 0, "attention: heads must divide width");
  require(k.cols() == d && v.cols() == d && k.rows() == v.rows(), "attention: key/value shape");
  require(q.rows() % batch == 0 && k.rows() % batch == 0, "attention: rows not divisible by batch");
  const Index tq = q.rows() / batch;
  const Index tk = k.rows() / batch;
  const Index dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  if (pair_count != nullptr) *pair_count += static_cast<std::int64_t>(batch * tq * tk);

  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  Matrix out(q.rows(), d);
  // probs[b * heads + h] is tq×tk
  std::vector<Matrix> probs(static_cast<std::size_t>(batch * heads));
  for (Index b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      auto qb = Q.block(b * tq, h * dh, tq, dh);
      auto kb = K.block(b * tk, h * dh, tk, dh);
      auto vb = V.block(b * tk, h * dh, tk, dh);
      Matrix s = (qb * kb.transpose()) * sc;
      Matrix p = softmax_rows(s);
      out.block(b * tq, h * dh, tq, dh).noalias() = p * vb;
      probs[static_cast<std::size_t>(b * heads + h)] = std::move(p);
    }
  }
  Tape& t = q.tape();
  if (!t.grad_enabled()) probs.clear();
  auto saved = std::make_shared<const std::vector<Matrix>>(std::move(probs));
  return t.record(std::move(out), {q, k, v}, [q, k, v, saved, batch, heads, tq, tk, dh, sc](const Matrix& g) {
    const auto& probs = *saved;
    const Matrix& Q = q.value();
    const Matrix& K = k.value();
    const Matrix& V = v.value();
    const bool gq = wants(q), gk = wants(k), gv = wants(v);
    for (Index b = 0; b < batch; ++b) {
      for (int h = 0; h < heads; ++h) {
        const Matrix& p = probs[static_cast<std::size_t>(b * heads + h)];
        auto go = g.block(b * tq, h * dh, tq, dh);
        if (gv) v.tape().grad(v).block(b * tk, h * dh, tk, dh).noalias() += p.transpose() * go;
        if (!gq && !gk) continue;
        Matrix dp = go * V.block(b * tk, h * dh, tk, dh).transpose();
        Eigen::VectorXd rowdot = dp.cwiseProduct(p).rowwise().sum();
        Matrix ds = p.cwiseProduct(dp.colwise() - rowdot) * sc;
        if (gq) q.tape().grad(q).block(b * tq, h * dh, tq, dh).noalias() += ds * K.block(b * tk, h * dh, tk, dh);
        if (gk) k.tape().grad(k).block(b * tk, h * dh, tk, dh).noalias() += ds.transpose() * Q.block(b * tq, h * dh, tq, dh);
      }
    }
  });
}

Var gather_rows(Var x, std::span<const int> rows) {
  Matrix out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < x.rows(), "gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = x.value().row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return x.tape().record(std::move(out), {x}, [x, idx = std::move(idx)](const Matrix& g) {
    Matrix& gx = x.tape().grad(x);
    for (std::size_t i = 0; i < idx.size(); ++i) gx.row(idx[i]) += g.row(static_cast<Index>(i));
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const Index d = parts.front().cols();
  Index total = 0;
  for (const Var& p : parts) {
    require(p.cols() == d, "concat_rows: width mismatch");
    total += p.rows();
  }
  Matrix out(total, d);
  Index off = 0;
  for (const Var& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return parts.front().tape().record(std::move(out), parts, [parts](const Matrix& g) {
    Index off = 0;
    for (const Var& p : parts) {
      if (wants(p)) p.tape().grad(p) += g.middleRows(off, p.rows());
      off += p.rows();
    }
  });
}

Var slice_cols(Var x, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= x.cols(), "slice_cols: range");
  Matrix out = x.value().middleCols(start, count);
  return x.tape().record(std::move(out), {x}, [x, start, count](const Matrix& g) {
    x.tape().grad(x).middleCols(start, count) += g;
  });
}

Var stack_segments(const std::vector<Var>& parts, Index batch) {
  require(batch > 0, "stack_segments: batch must be positive");
  std::vector<Index> lens;
  Index seq_len = 0;
  for (const Var& p : parts) {
    require(p.rows() % batch == 0, "stack_segments: part rows not divisible by batch");
    lens.push_back(p.rows() / batch);
    seq_len += lens.back();
  }
  Var all = concat_rows(parts);
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(batch * seq_len));
  for (Index b = 0; b < batch; ++b) {
    Index base = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      for (Index r = 0; r < lens[i]; ++r) idx.push_back(static_cast<int>(base + b * lens[i] + r));
      base += batch * lens[i];
    }
  }
  return gather_rows(all, idx);
}

Var select_segment(Var x, Index batch, Index seq_len, Index offset, Index length) {
  require(x.rows() == batch * seq_len && offset + length <= seq_len, "select_segment: range");
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(batch * length));
  for (Index b = 0; b < batch; ++b) {
    for (Index r = 0; r < length; ++r) idx.push_back(static_cast<int>(b * seq_len + offset + r));
  }
  return gather_rows(x, idx);
}

Var sum(Var x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  return x.tape().record(std::move(out), {x}, [x](const Matrix& g) { x.tape().grad(x).array() += g(0, 0); });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  Matrix out(1, 1);
  out(0, 0) = x.value().sum() / n;
  return x.tape().record(std::move(out), {x}, [x, n](const Matrix& g) { x.tape().grad(x).array() += g(0, 0) / n; });
}

Var row_squared_error(Var pred, Var target) {
  check_same_shape(pred, target, "row_squared_error");
  const double n = static_cast<double>(pred.rows());
  Matrix diff = pred.value() - target.value();
  Matrix out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  return pred.tape().record(std::move(out), {pred, target}, [pred, target, diff, n](const Matrix& g) {
    const double s = 2.0 * g(0, 0) / n;
    if (wants(pred)) pred.tape().grad(pred) += s * diff;
    if (wants(target)) target.tape().grad(target) -= s * diff;
  });
}

Var mean_squared_error(Var pred, Var target) {
  check_same_shape(pred, target, "mean_squared_error");
  const double n = static_cast<double>(pred.value().size());
  Matrix diff = pred.value() - target.value();
  Matrix out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  return pred.tape().record(std::move(out), {pred, target}, [pred, target, diff, n](const Matrix& g) {
    const double s = 2.0 * g(0, 0) / n;
    if (wants(pred)) pred.tape().grad(pred) += s * diff;
    if (wants(target)) target.tape().grad(target) -= s * diff;
  });
}

Var cross_entropy(Var logits, std::span<const int> targets, std::span<const double> weights) {
  const Index rows = logits.rows();
  require(static_cast<Index>(targets.size()) == rows && static_cast<Index>(weights.size()) == rows,
          "cross_entropy: targets/weights length must equal row count");
  Matrix p = softmax_rows(logits.value());
  double total_w = 0.0, loss = 0.0;
  for (Index r = 0; r < rows; ++r) {
    const double w = weights[static_cast<std::size_t>(r)];
    if (w == 0.0) continue;
    const int y = targets[static_cast<std::size_t>(r)];
    require(y >= 0 && y < logits.cols(), "cross_entropy: target out of range");
    total_w += w;
    loss -= w * std::log(p(r, y));
  }
  require(total_w > 0.0, "cross_entropy: all weights are zero");
  Matrix out(1, 1);
  out(0, 0) = loss / total_w;
  std::vector<int> y(targets.begin(), targets.end());
  std::vector<double> w(weights.begin(), weights.end());
  return logits.tape().record(std::move(out), {logits}, [logits, p, y, w, total_w](const Matrix& g) {
    Matrix& gl = logits.tape().grad(logits);
    for (Index r = 0; r < p.rows(); ++r) {
      const double wr = w[static_cast<std::size_t>(r)];
      if (wr == 0.0) continue;
      const double s = g(0, 0) * wr / total_w;
      gl.row(r) += s * p.row(r);
      gl(r, y[static_cast<std::size_t>(r)]) -= s;
    }
  });
}

Var gaussian_kl(Var mu, Var logvar) {
  check_same_shape(mu, logvar, "gaussian_kl");
  const double n = static_cast<double>(mu.rows());
  Matrix ev = logvar.value().array().exp().matrix();
  Matrix out(1, 1);
  out(0, 0) = 0.5 * (mu.value().array().square() + ev.array() - 1.0 - logvar.value().array()).sum() / n;
  return mu.tape().record(std::move(out), {mu, logvar}, [mu, logvar, ev, n](const Matrix& g) {
    const double s = g(0, 0) / n;
    if (wants(mu)) mu.tape().grad(mu) += s * mu.value();
    if (wants(logvar)) logvar.tape().grad(logvar).array() += 0.5 * s * (ev.array() - 1.0);
  });
}

Var straight_through(Var encoded, Var quantized) {
  check_same_shape(encoded, quantized, "straight_through");
  return encoded.tape().record(quantized.value(), {encoded}, [encoded](const Matrix& g) {
    encoded.tape().grad(encoded) += g;
  });
}

Var stop_gradient(Var x) { return x.tape().constant(x.value()); }

}  // namespace mixar::nn
