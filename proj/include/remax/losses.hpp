#pragma once

// Training losses for the matched set prediction:
//   - per-pair binary mask cross-entropy (logit-space, stable for any
//     finite logits) with its false-positive / false-negative split,
//     or a per-pixel mask-id cross-entropy across queries,
//   - dice loss per matched pair,
//   - soft-target classification cross-entropy with a down-weighted
//     no-object slot,
//   - per-stage auxiliary semantic cross-entropy.
//
// The bipartite assignment and the softened class targets are decisions,
// not differentiable quantities: they are computed once per step on
// detached values and can be frozen and reused, which also keeps
// finite-difference checks of the remaining graph exact.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "remax/matching.hpp"
#include "remax/model.hpp"
#include "remax/relax.hpp"
#include "remax/tensor.hpp"

namespace remax {

struct LossConfig {
  double w_mask_ce = 1.0;
  double w_dice = 1.0;
  double w_class = 1.0;
  double w_sem = 0.5;
  MaskActivation activation = MaskActivation::kSigmoid;
  double eta = 0.1;                // mirrors RelaxConfig::eta
  double no_object_weight = 0.1;   // down-weight for unmatched-query class CE
  bool per_stage_matching = false; // re-match every stage instead of reusing the final one
};

struct StageLossBreakdown {
  double mask_ce = 0.0;
  double dice = 0.0;  // dice *loss* (1 - coefficient), averaged over pairs
  double class_ce = 0.0;
  double semantic = 0.0;
  double fp = 0.0;
  double fn = 0.0;
};

// Raw (unweighted) component sums across stages; `total` applies the
// LossConfig weights. fp_mask + fn_mask partitions mask_ce exactly.
struct LossReport {
  double total = 0.0;
  double mask_ce = 0.0;
  double dice = 0.0;
  double class_ce = 0.0;
  double semantic = 0.0;
  double fp_mask = 0.0;
  double fn_mask = 0.0;
  double pq_style_mask = 0.0;  // w_mask_ce*mask_ce + w_dice*dice
  std::vector<StageLossBreakdown> per_stage;
};

struct FrozenTargets {
  std::vector<Assignment> assignments;  // one entry, or one per stage
  Tensor y_hat;                         // N_Q x (N_C+1), detached
  std::vector<char> matched;            // per query
};

struct TotalLoss {
  Tensor loss;  // attached scalar
  LossReport report;
  FrozenTargets targets;
};

// ---- per-pair sigmoid mask loss ---------------------------------------------

struct MaskLossTerms {
  Tensor ce;    // scalar, mean over pixels of logit-space BCE
  Tensor dice;  // scalar, dice coefficient (1 = perfect)
  double fp;    // ce restricted to gt=0 pixels (same normalization as ce)
  double fn;    // ce restricted to gt=1 pixels
};

inline MaskLossTerms mask_loss(const Tensor& mask_logits, const Tensor& gt_mask) {
  if (mask_logits.shape != gt_mask.shape || mask_logits.rank() != 1) {
    throw ShapeError("mask_loss: logits and mask must be equal-length vectors");
  }
  const std::size_t hw = mask_logits.numel();
  double gsum = 0.0;
  for (double g : gt_mask.data) gsum += g;
  if (gsum == 0.0) throw TensorError("mask_loss: empty ground-truth mask");

  // BCE(m, g) = -(g*log sigmoid(m) + (1-g)*log sigmoid(-m)), kept in logit
  // space so saturated wrong predictions stay finite.
  Tensor one_minus_g = Tensor::zeros(gt_mask.shape);
  for (std::size_t i = 0; i < hw; ++i) one_minus_g.data[i] = 1.0 - gt_mask.data[i];
  Tensor ce = scale(mean(add(mul(gt_mask, log_sigmoid(mask_logits)),
                             mul(one_minus_g, log_sigmoid(scale(mask_logits, -1.0))))),
                    -1.0);

  Tensor probs = sigmoid(mask_logits);
  Tensor dice = div(scale(sum(mul(probs, gt_mask)), 2.0),
                    add(sum(probs), Tensor::scalar(gsum)));

  double fp = 0.0, fn = 0.0;
  for (std::size_t i = 0; i < hw; ++i) {
    const double m = mask_logits.data[i];
    const double bce = -(gt_mask.data[i] * log_sigmoid_scalar(m) +
                         (1.0 - gt_mask.data[i]) * log_sigmoid_scalar(-m));
    (gt_mask.data[i] > 0.5 ? fn : fp) += bce;
  }
  const double inv = 1.0 / static_cast<double>(hw);
  return {std::move(ce), std::move(dice), fp * inv, fn * inv};
}

// ---- per-pixel mask-id loss (softmax activation) ----------------------------

struct MaskIdTerms {
  Tensor ce;  // scalar, mean over pixels of CE against the target query
  double fp;  // pixels whose argmax query disagrees with the target
  double fn;  // pixels whose argmax query agrees (residual under-confidence)
};

inline MaskIdTerms mask_id_loss(const Tensor& mask_logits,
                                const std::vector<int>& target_query) {
  if (mask_logits.rank() != 2 || target_query.size() != mask_logits.rows()) {
    throw ShapeError("mask_id_loss: one target query per pixel required");
  }
  const std::size_t hw = mask_logits.rows(), n_q = mask_logits.cols();
  Tensor onehot = Tensor::zeros({hw, n_q});
  for (std::size_t i = 0; i < hw; ++i) {
    const int t = target_query[i];
    if (t < 0 || static_cast<std::size_t>(t) >= n_q) {
      throw TensorError("mask_id_loss: target query out of range");
    }
    onehot.at(i, static_cast<std::size_t>(t)) = 1.0;
  }
  Tensor logsm = log_softmax(mask_logits, 1);
  Tensor ce = scale(mean(sum(mul(onehot, logsm), 1)), -1.0);

  double fp = 0.0, fn = 0.0;
  for (std::size_t i = 0; i < hw; ++i) {
    std::size_t best = 0;
    for (std::size_t q = 1; q < n_q; ++q)
      if (mask_logits.at(i, q) > mask_logits.at(i, best)) best = q;
    const double pixel_ce = -logsm.at(i, static_cast<std::size_t>(target_query[i]));
    (best == static_cast<std::size_t>(target_query[i]) ? fn : fp) += pixel_ce;
  }
  const double inv = 1.0 / static_cast<double>(hw);
  return {std::move(ce), fp * inv, fn * inv};
}

// ---- classification loss -----------------------------------------------------

// Soft-target cross-entropy, mean over queries:
//   (1/N_Q) * sum_q w_q * (-sum_c y_hat[q,c] * log softmax(p)[q,c])
// Targets need not sum to 1; unmatched queries carry weight
// `no_object_weight`. y_hat is a constant.
inline Tensor class_loss(const Tensor& p, const Tensor& y_hat,
                         const std::vector<char>& matched, double no_object_weight) {
  if (p.shape != y_hat.shape || p.rank() != 2) {
    throw ShapeError("class_loss: logits and targets must be equal-shape matrices");
  }
  for (double v : y_hat.data) {
    if (!(v >= 0.0 && v <= 1.0)) throw TensorError("class_loss: targets must lie in [0,1]");
  }
  if (matched.size() != p.rows()) throw ShapeError("class_loss: matched flags mismatch");

  Tensor weights = Tensor::zeros({p.rows()});
  for (std::size_t q = 0; q < p.rows(); ++q) {
    weights.data[q] = matched[q] ? 1.0 : no_object_weight;
  }
  Tensor per_query = scale(sum(mul(y_hat.detached(), log_softmax(p, 1)), 1), -1.0);
  return mean(mul(per_query, weights));
}

// ---- semantic loss ------------------------------------------------------------

// Mean per-pixel softmax cross-entropy against the semantic label map.
inline Tensor semantic_loss(const Tensor& m_sem, const std::vector<int>& labels) {
  if (m_sem.rank() != 2 || labels.size() != m_sem.rows()) {
    throw ShapeError("semantic_loss: one label per pixel required");
  }
  const std::size_t hw = m_sem.rows(), nc = m_sem.cols();
  Tensor onehot = Tensor::zeros({hw, nc});
  for (std::size_t i = 0; i < hw; ++i) {
    const int c = labels[i];
    if (c < 0 || static_cast<std::size_t>(c) >= nc) {
      throw TensorError("semantic_loss: label out of range");
    }
    onehot.at(i, static_cast<std::size_t>(c)) = 1.0;
  }
  return scale(mean(sum(mul(onehot, log_softmax(m_sem, 1)), 1)), -1.0);
}

// ---- total loss ----------------------------------------------------------------

namespace detail {

inline Tensor column(const Tensor& m, std::size_t c) {
  return reshape(slice_cols(m, c, c + 1), {m.rows()});
}

inline FrozenTargets build_targets(const std::vector<StageOutput>& stages,
                                   const std::vector<GroundTruthSegment>& gts,
                                   const Tensor& S, const LossConfig& lcfg,
                                   const RelaxConfig& rcfg) {
  FrozenTargets ft;
  if (lcfg.per_stage_matching) {
    for (const auto& st : stages) ft.assignments.push_back(hungarian(matching_cost(st, gts)));
  } else {
    ft.assignments.push_back(hungarian(matching_cost(stages.back(), gts)));
  }

  const StageOutput& fin = stages.back();
  const std::size_t n_q = fin.p.rows();
  const std::size_t n_cls = fin.p.cols();  // N_C + 1
  const Assignment& final_assign = ft.assignments.back();

  ft.matched.assign(n_q, 0);
  Tensor y = Tensor::zeros({n_q, n_cls});
  for (std::size_t q = 0; q < n_q; ++q) y.at(q, n_cls - 1) = 1.0;  // no-object
  for (const auto& [q, g] : final_assign.pairs) {
    ft.matched[static_cast<std::size_t>(q)] = 1;
    y.at(static_cast<std::size_t>(q), n_cls - 1) = 0.0;
    y.at(static_cast<std::size_t>(q),
         static_cast<std::size_t>(gts[static_cast<std::size_t>(g)].class_id)) = 1.0;
  }

  // Overlap weights from the final stage's masks; zero rows keep unmatched
  // queries on their hard no-object target.
  const Tensor& mask_src = rcfg.reclass_on_relaxed ? fin.m_pan_relaxed : fin.m_pan;
  Tensor y_m = reclass_weights(mask_src, S);
  Tensor y_m_ext = Tensor::zeros({n_q, n_cls});
  for (std::size_t q = 0; q < n_q; ++q) {
    if (!ft.matched[q]) continue;
    for (std::size_t c = 0; c + 1 < n_cls; ++c) y_m_ext.at(q, c) = y_m.at(q, c);
  }
  ft.y_hat = reclass_apply(y, y_m_ext, lcfg.eta);
  return ft;
}

}  // namespace detail

// Full training objective over all decoder stages. One assignment is made
// on the final stage and reused everywhere (per_stage_matching re-matches
// each stage); the softened class targets come from the final stage.
// Passing `frozen` reuses a previous decision set, holding targets fixed.
inline TotalLoss total_loss(const std::vector<StageOutput>& stages,
                            const std::vector<GroundTruthSegment>& gts,
                            const std::vector<int>& sem_labels, const Tensor& S,
                            const LossConfig& lcfg, const RelaxConfig& rcfg,
                            const FrozenTargets* frozen = nullptr) {
  if (stages.empty()) throw TensorError("total_loss: no stage outputs");
  if (gts.empty()) throw TensorError("total_loss: no ground-truth segments");

  TotalLoss out;
  out.targets = frozen ? *frozen : detail::build_targets(stages, gts, S, lcfg, rcfg);
  const FrozenTargets& ft = out.targets;

  const std::size_t hw = stages.back().m_pan.rows();
  // Per-pixel target query for the mask-id variant, from the final
  // assignment: pixel -> owning GT segment -> matched query.
  std::vector<int> pixel_query;
  if (lcfg.activation == MaskActivation::kSoftmax) {
    pixel_query.assign(hw, -1);
    const Assignment& fa = ft.assignments.back();
    for (const auto& [q, g] : fa.pairs) {
      const auto& mask = gts[static_cast<std::size_t>(g)].mask;
      for (std::size_t i = 0; i < hw; ++i)
        if (mask[i]) pixel_query[i] = q;
    }
    for (std::size_t i = 0; i < hw; ++i) {
      if (pixel_query[i] < 0) throw TensorError("mask_id_loss: pixel without a matched query");
    }
  }

  Tensor total = Tensor::scalar(0.0);
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const StageOutput& st = stages[s];
    const Assignment& assign =
        lcfg.per_stage_matching ? ft.assignments[s] : ft.assignments[0];
    const double inv_pairs = 1.0 / static_cast<double>(assign.pairs.size());
    StageLossBreakdown br;

    Tensor stage_ce = Tensor::scalar(0.0);
    Tensor stage_dice = Tensor::scalar(0.0);
    if (lcfg.activation == MaskActivation::kSigmoid) {
      for (const auto& [q, g] : assign.pairs) {
        const auto& seg = gts[static_cast<std::size_t>(g)];
        Tensor gt_mask = Tensor::zeros({hw});
        for (std::size_t i = 0; i < hw; ++i) gt_mask.data[i] = seg.mask[i];
        MaskLossTerms t = mask_loss(
            detail::column(st.m_pan_relaxed, static_cast<std::size_t>(q)), gt_mask);
        stage_ce = add(stage_ce, t.ce);
        stage_dice = add(stage_dice, sub(Tensor::scalar(1.0), t.dice));
        br.fp += t.fp * inv_pairs;
        br.fn += t.fn * inv_pairs;
      }
      stage_ce = scale(stage_ce, inv_pairs);
      stage_dice = scale(stage_dice, inv_pairs);
    } else {
      MaskIdTerms mi = mask_id_loss(st.m_pan_relaxed, pixel_query);
      stage_ce = mi.ce;
      br.fp = mi.fp;
      br.fn = mi.fn;
      Tensor probs = softmax(st.m_pan_relaxed, 1);
      for (const auto& [q, g] : assign.pairs) {
        const auto& seg = gts[static_cast<std::size_t>(g)];
        Tensor gt_mask = Tensor::zeros({hw});
        double gsum = 0.0;
        for (std::size_t i = 0; i < hw; ++i) {
          gt_mask.data[i] = seg.mask[i];
          gsum += gt_mask.data[i];
        }
        Tensor pq = detail::column(probs, static_cast<std::size_t>(q));
        Tensor dice = div(scale(sum(mul(pq, gt_mask)), 2.0),
                          add(sum(pq), Tensor::scalar(gsum)));
        stage_dice = add(stage_dice, sub(Tensor::scalar(1.0), dice));
      }
      stage_dice = scale(stage_dice, inv_pairs);
    }

    Tensor cls = class_loss(st.p, ft.y_hat, ft.matched, lcfg.no_object_weight);

    br.mask_ce = stage_ce.value();
    br.dice = stage_dice.value();
    br.class_ce = cls.value();

    if (lcfg.w_mask_ce != 0.0) total = add(total, scale(stage_ce, lcfg.w_mask_ce));
    if (lcfg.w_dice != 0.0) total = add(total, scale(stage_dice, lcfg.w_dice));
    if (lcfg.w_class != 0.0) total = add(total, scale(cls, lcfg.w_class));

    if (st.has_sem() && !st.skip_sem_loss && lcfg.w_sem != 0.0) {
      Tensor sem = semantic_loss(st.m_sem, sem_labels);
      br.semantic = sem.value();
      total = add(total, scale(sem, lcfg.w_sem));
    }

    out.report.mask_ce += br.mask_ce;
    out.report.dice += br.dice;
    out.report.class_ce += br.class_ce;
    out.report.semantic += br.semantic;
    out.report.fp_mask += br.fp;
    out.report.fn_mask += br.fn;
    out.report.per_stage.push_back(br);
  }

  out.loss = std::move(total);
  out.report.total = out.loss.value();
  out.report.pq_style_mask =
      lcfg.w_mask_ce * out.report.mask_ce + lcfg.w_dice * out.report.dice;
  return out;
}

}  // namespace remax
