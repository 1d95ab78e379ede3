#pragma once

// Training-time relaxation operators for mask-transformer panoptic
// segmentation:
//
//   remask_*   — gates the panoptic mask logits with a semantic-branch
//                prediction mapped into query space, plus an identity
//                term so the whole branch can be dropped at inference.
//   reclass_*  — softens one-hot class targets by the normalized overlap
//                between predicted masks and ground-truth semantic masks.

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "remax/tensor.hpp"

namespace remax {

enum class MaskActivation { kSigmoid, kSoftmax };

struct RelaxConfig {
  double eta = 0.1;               // class-target smooth factor, in [0,1]
  int remask_stage_count = 4;     // decoder stages that receive the mask gate
  bool stop_grad_semantic = true; // treat the semantic factor as constant in backward
  MaskActivation activation = MaskActivation::kSigmoid;  // mask normalization
  bool gt_remask_mode = false;    // gate with binary GT semantic masks instead

  // Study toggles, both off by default.
  bool stop_grad_class_gate = false;  // also block gradients through the class factor
  bool reclass_on_relaxed = true;     // overlap weights from gated vs raw mask logits
};

// Binary ground-truth semantic masks, one column per class, over the
// mask grid (HW rows).
struct SemanticMaskGT {
  Tensor S;  // HW x N_C, entries in {0,1}, detached
  std::vector<std::size_t> class_pixel_count;

  static SemanticMaskGT from_labels(const std::vector<int>& labels, std::size_t n_classes) {
    SemanticMaskGT gt;
    gt.S = Tensor::zeros({labels.size(), n_classes});
    gt.class_pixel_count.assign(n_classes, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const int c = labels[i];
      if (c < 0 || static_cast<std::size_t>(c) >= n_classes) {
        throw TensorError("semantic label out of range");
      }
      gt.S.at(i, static_cast<std::size_t>(c)) = 1.0;
      ++gt.class_pixel_count[static_cast<std::size_t>(c)];
    }
    return gt;
  }
};

namespace detail {

inline Tensor mask_normalize(const Tensor& logits, MaskActivation act, int softmax_axis) {
  return act == MaskActivation::kSigmoid ? sigmoid(logits) : softmax(logits, softmax_axis);
}

}  // namespace detail

// Maps semantic logits (HW x N_C) into query space (HW x N_Q) through the
// per-query class logits p (N_Q x N_C, real classes only):
//   gate = act(m_sem) * act(p)^T
// Each entry lies in [0, N_C]. With stop_grad_semantic the semantic factor
// is a constant in the backward pass; the class factor keeps its gradient
// unless stop_grad_class_gate is also set.
inline Tensor remask_map(const Tensor& m_sem, const Tensor& p, const RelaxConfig& cfg) {
  if (m_sem.rank() != 2 || p.rank() != 2 || m_sem.shape[1] != p.shape[1]) {
    throw ShapeError("remask_map: class dimension of m_sem and p must agree");
  }
  Tensor sem = detail::mask_normalize(m_sem, cfg.activation, /*softmax_axis=*/1);
  if (cfg.stop_grad_semantic) sem = stop_gradient(sem);
  Tensor cls = detail::mask_normalize(p, cfg.activation, /*softmax_axis=*/1);
  if (cfg.stop_grad_class_gate) cls = stop_gradient(cls);
  return matmul(sem, transpose(cls));
}

// Gated identity map: out = m_pan + gate .* m_pan. A zero gate reproduces
// m_pan bit-exactly, which is what lets inference drop the branch.
inline Tensor remask_apply(const Tensor& m_pan, const Tensor& gate) {
  if (m_pan.shape != gate.shape) throw ShapeError("remask_apply: shape mismatch");
  return add(m_pan, mul(gate, m_pan));
}

// Variant used by the GT-gating ablation: the binary semantic masks S
// replace the normalized semantic prediction (no activation on S).
inline Tensor remask_map_gt(const SemanticMaskGT& gt, const Tensor& p, const RelaxConfig& cfg) {
  if (p.rank() != 2 || gt.S.shape[1] != p.shape[1]) {
    throw ShapeError("remask_map_gt: class dimension of S and p must agree");
  }
  Tensor cls = detail::mask_normalize(p, cfg.activation, /*softmax_axis=*/1);
  if (cfg.stop_grad_class_gate) cls = stop_gradient(cls);
  return matmul(gt.S, transpose(cls));
}

// Overlap weights for class-target softening:
//   y_m[q, c] = sum_i act(m)[i, q] * S[i, c] / count(c)
// Classes with no ground-truth pixels get weight 0 (no intersection
// evidence exists). Computed off-tape: the result is a training target.
inline Tensor reclass_weights(const Tensor& m_pan_final, const Tensor& S,
                              MaskActivation act = MaskActivation::kSigmoid) {
  if (m_pan_final.rank() != 2 || S.rank() != 2 || m_pan_final.shape[0] != S.shape[0]) {
    throw ShapeError("reclass_weights: mask and S must share the pixel dimension");
  }
  const std::size_t hw = m_pan_final.shape[0];
  const std::size_t n_q = m_pan_final.shape[1];
  const std::size_t n_c = S.shape[1];

  Tensor probs = detail::mask_normalize(m_pan_final.detached(), act, /*softmax_axis=*/1);
  Tensor y_m = Tensor::zeros({n_q, n_c});
  for (std::size_t c = 0; c < n_c; ++c) {
    double count = 0.0;
    for (std::size_t i = 0; i < hw; ++i) count += S.at(i, c);
    if (count == 0.0) continue;
    for (std::size_t q = 0; q < n_q; ++q) {
      double inter = 0.0;
      for (std::size_t i = 0; i < hw; ++i) inter += probs.at(i, q) * S.at(i, c);
      y_m.at(q, c) = inter / count;
    }
  }
  return y_m;
}

// Softened class target, elementwise:
//   y_hat = eta*y_m + (1 - eta*y_m) * y
// For y = 1 the two terms cancel to exactly 1 in f64; for y = 0 the
// target becomes eta*y_m. Inputs and output are detached targets.
inline Tensor reclass_apply(const Tensor& y, const Tensor& y_m, double eta) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw TensorError("reclass eta must lie in [0,1]");
  if (y.shape != y_m.shape) throw ShapeError("reclass_apply: shape mismatch");
  Tensor y_hat = Tensor::zeros(y.shape);
  for (std::size_t i = 0; i < y.numel(); ++i) {
    const double t = eta * y_m.data[i];
    y_hat.data[i] = t + (1.0 - t) * y.data[i];
  }
  return y_hat;
}

}  // namespace remax
