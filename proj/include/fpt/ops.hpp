#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fpt/rng.hpp"
#include "fpt/tensor.hpp"

namespace fpt {

/// Boolean rows x cols mask; true marks a position that may be attended.
struct Mask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint8_t> allowed;

    static Mask causal(std::size_t length);
    bool operator()(std::size_t r, std::size_t c) const { return allowed[r * cols + c] != 0; }
};

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched product over the leading axis of two rank-3 tensors, with optional
/// transposition of the trailing matrices.
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_a = false, bool transpose_b = false);
/// x[..., in] * w[in, out] (+ bias[out]).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

// Elementwise.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// x[..., n] + v[n], broadcasting the trailing vector over leading axes.
Tensor add_bias(const Tensor& x, const Tensor& v);
Tensor scale(const Tensor& x, float s);
Tensor add_scalar(const Tensor& x, float s);
Tensor neg(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
/// GELU, tanh approximation.
Tensor gelu(const Tensor& x);

float gelu_value(float x);

/// Fused LSTM cell. gates [B, 4n] in order i, f, g, o (pre-activation),
/// c_prev [B, n]; returns [B, 2n] holding h then c.
Tensor lstm_cell(const Tensor& gates, const Tensor& c_prev);

// Normalization and attention.
/// Softmax over the last axis. The mask, when given, is rows x cols and is
/// broadcast over any leading axes; masked entries come out exactly 0.
Tensor softmax_rows(const Tensor& x, const Mask* mask = nullptr);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);

// Shape manipulation. All of these copy.
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
/// Treats x as rows of its last axis and gathers rows by index.
Tensor index_rows(const Tensor& x, std::span<const std::size_t> rows);
/// Rows of `table` selected by integer ids.
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Sum over the last axis.
Tensor sum_last(const Tensor& x);

// Losses (scalar outputs, averaged).
/// Mean softmax cross-entropy of logits[N, C] against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
/// Mean binary cross-entropy with logits against {0,1} targets of the same size.
Tensor bce_with_logits(const Tensor& logits, std::span<const float> targets);

/// Inverted dropout: in train mode zeroes entries with probability p and
/// scales survivors by 1/(1-p); identity otherwise.
Tensor dropout(const Tensor& x, float p, bool train, Rng& rng);

}  // namespace fpt
