#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "r2t/tensor.hpp"

// Differentiable primitives. Every op validates shapes (ContractViolation
// naming the op and shapes), rejects non-finite inputs and outputs
// (NumericDomainError), and records an adjoint on the active tape when any
// input requires grad. Feature maps are channels-last: [H, W, C].
namespace r2t::ops {

// a: [..., k] (leading axes flattened), b: [k, n] -> [..., n]
Tensor matmul(const Tensor& a, const Tensor& b);
// a: [B, m, k], b: [B, k, n] -> [B, m, n]
Tensor bmm(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);

// Same shape, or b's shape is a suffix of a's shape (broadcast over leading axes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);  // same shape only
Tensor scale(const Tensor& x, double factor);

// Softmax over the last axis, max-subtracted.
Tensor softmax(const Tensor& x);
// mask: row-major [L_q, L_k] matching the last two axes of x; false entries
// get probability 0. Every row must allow at least one column.
Tensor masked_softmax(const Tensor& x, const std::vector<std::uint8_t>& mask);

// Normalizes over the last axis; gamma and beta have the last axis' length.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

Tensor gelu(const Tensor& x);  // exact erf form
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor abs(const Tensor& x);
// 0.5 x^2 / beta for |x| < beta, |x| - 0.5 beta otherwise; elementwise.
Tensor smooth_l1(const Tensor& x, double beta);

// table: [V, d] -> [ids.size(), d]
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);
// Rows along axis 0.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

Tensor sum(const Tensor& x);   // -> [1]
Tensor mean(const Tensor& x);  // -> [1]

// [H, W, C] spatial kernels.
Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);
Tensor avg_pool2(const Tensor& x);
Tensor upsample2_nearest(const Tensor& x);

// Box in feature-map coordinates (x1, y1, x2, y2), continuous pixel-edge
// convention: feature cell (i, j) covers [j, j+1) x [i, i+1).
using FeatBox = std::array<double, 4>;
// Bilinear samples at out x out regularly spaced bin centers of each box.
// feat: [H, W, C] -> [R, out, out, C]. Samples outside the map are clamped
// to the border.
Tensor roi_align(const Tensor& feat, const std::vector<FeatBox>& boxes, std::size_t out);

// logits: [V] or [n, V]; targets: n ids. Label smoothing spreads eps
// uniformly over all V classes. Returns the mean over rows.
Tensor cross_entropy_label_smoothed(const Tensor& logits, std::span<const std::size_t> targets,
                                    double epsilon);
// Elementwise binary cross-entropy on logits; same shape as x.
Tensor bce_with_logits(const Tensor& x, std::span<const double> targets);
// Penalty-reduced pixel focal loss on heatmap logits (alpha = 2, beta = 4),
// summed over all entries. target == 1 marks a peak.
Tensor heatmap_focal_loss(const Tensor& logits, std::span<const double> target);

// Throws NumericDomainError naming `kind` if any entry is NaN/Inf.
void require_finite(const Tensor& t, const char* kind);

}  // namespace r2t::ops
