#pragma once

#include <span>
#include <vector>

#include "roadforge/diff/tape.hpp"

namespace roadforge::diff {

// Differentiable operations. Matrices are rank-2 [rows, cols]; images are
// rank-4 [batch, channels, height, width]. Every op checks shapes and throws
// ShapeMismatch naming the offending dims.

Var matmul(Var a, Var b);
/// x [n, in] times w^T for w [out, in], plus bias [out] broadcast over rows.
Var linear(Var x, Var w, Var b);
Var linear(Var x, Var w);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var sum(Var a);
Var mean(Var a);

Var concat_cols(std::span<const Var> parts);
Var gather_rows(Var a, std::vector<int> rows);
/// out[:, k] = a[:, cols[k]]; repeated columns accumulate in backward.
Var gather_cols(Var a, std::vector<int> cols);
Var slice_cols(Var a, int start, int count);
Var reshape(Var a, std::vector<int> shape);

Var relu(Var a);
Var leaky_relu(Var a, double slope = 0.01);
Var tanh(Var a);
Var sigmoid(Var a);
Var softmax_rows(Var a);
Var layernorm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);

/// Stride-1 convolution with symmetric zero padding.
Var conv2d(Var x, Var weight, Var bias, int pad);
/// 2x2 max pooling with stride 2 (odd trailing rows/cols are dropped).
Var maxpool2d(Var x);

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(int channels = 0)
      : running_mean({channels}, 0.0), running_var({channels}, 1.0) {}
};

/// Training mode normalizes with batch statistics (biased variance) and
/// updates the running statistics; inference mode uses the running ones.
Var batchnorm2d(Var x, Var gamma, Var beta, BatchNormState& state, bool training);

struct AttentionLayout {
  int batch = 1;
  int steps = 1;
  int heads = 1;
  /// Attend strictly to earlier steps; the first step then outputs zeros.
  bool exclude_self = false;
};

/// Causal scaled dot-product attention over rows laid out as b * steps + t.
/// q, k, v are [batch * steps, d] with d split evenly across heads. Row t only
/// reads keys/values at steps <= t (< t with exclude_self).
Var causal_attention(Var q, Var k, Var v, AttentionLayout layout);

/// Weighted sum of binary cross-entropy terms on probabilities, clamped to
/// [1e-12, 1 - 1e-12].
Var bce(Var prob, const Tensor& target, const Tensor& weights);
/// Same quantity computed stably from logits.
Var bce_with_logits(Var logits, const Tensor& target, const Tensor& weights);
/// Mean of squared differences over all entries.
Var mse(Var a, Var b);
/// Sum over rows of w_i * ||pred_i - target_i||^2.
Var weighted_sq_error(Var pred, const Tensor& target, const Tensor& row_weights);

}  // namespace roadforge::diff
