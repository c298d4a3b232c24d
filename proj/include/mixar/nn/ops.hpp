#pragma once

#include "mixar/nn/tape.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace mixar::nn {

// Elementwise and linear-algebra ops. All inputs must live on the same tape.

Var matmul(Var a, Var b);
/// x·w + b with w of shape in×out and b of shape 1×out (b may be invalid).
Var linear(Var x, Var w, Var b);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);

/// x[r, :] += row[0, :]
Var add_row(Var x, Var row);
/// x is (batch·period)×d; adds pattern[r mod period, :] to each row.
Var add_tiled(Var x, Var pattern);

Var gelu(Var x);
Var silu(Var x);
Var exp(Var x);
Var square(Var x);

Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);

/// Multi-head scaled dot-product attention over `batch` independent
/// sequences laid out contiguously by rows. q is (batch·tq)×d, k and v are
/// (batch·tk)×d. When `pair_count` is non-null it is incremented by tq·tk
/// for each sequence (score entries per head).
Var attention(Var q, Var k, Var v, Index batch, int heads, std::int64_t* pair_count = nullptr);

Var gather_rows(Var x, std::span<const int> rows);
Var concat_rows(const std::vector<Var>& parts);
Var slice_cols(Var x, Index start, Index count);

/// Per-sequence concatenation: each part holds `batch` segments stacked by
/// rows; the result lays out, for every sequence, its segment from each part
/// in order.
Var stack_segments(const std::vector<Var>& parts, Index batch);
/// Rows [offset, offset+length) of every sequence of length `seq_len`.
Var select_segment(Var x, Index batch, Index seq_len, Index offset, Index length);

Var sum(Var x);
Var mean(Var x);
/// Mean over rows of the row-wise squared L2 distance.
Var row_squared_error(Var pred, Var target);
/// Mean over all entries of the squared difference.
Var mean_squared_error(Var pred, Var target);

/// Weighted mean of −log softmax(logits)[target] over rows. Rows with zero
/// weight contribute neither loss nor gradient.
Var cross_entropy(Var logits, std::span<const int> targets, std::span<const double> weights);

/// Mean over rows of KL(N(mu, exp(logvar)) || N(0, I)).
Var gaussian_kl(Var mu, Var logvar);

/// Forward value of `quantized`, gradient routed to `encoded` unchanged.
Var straight_through(Var encoded, Var quantized);
Var stop_gradient(Var x);

Matrix softmax_rows(const Matrix& logits);

}  // namespace mixar::nn
