#pragma once

// Bipartite matching between predicted queries and ground-truth segments.
// The solver is an O(n^3) shortest-augmenting-path Hungarian method on a
// zero-padded square matrix, followed by a fix-and-verify pass that makes
// the returned pair list the lexicographically smallest optimum, so ties
// resolve deterministically.

#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "remax/model.hpp"
#include "remax/tensor.hpp"

namespace remax {

struct GroundTruthSegment {
  std::vector<std::uint8_t> mask;  // binary over the mask grid
  int class_id = 0;
  bool is_thing = true;

  std::size_t pixel_count() const {
    std::size_t n = 0;
    for (auto v : mask) n += v;
    return n;
  }
};

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (query, gt), sorted by query
  double total_cost = 0.0;
};

namespace detail {

// Minimum assignment cost on an n x n matrix (row-major), all rows matched.
inline double hungarian_square(const std::vector<double>& a, int n,
                               std::vector<int>* row_of_col = nullptr) {
  const double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  double total = 0.0;
  for (int j = 1; j <= n; ++j) total += a[(p[j] - 1) * n + (j - 1)];
  if (row_of_col) {
    row_of_col->assign(n, -1);
    for (int j = 1; j <= n; ++j) (*row_of_col)[j - 1] = p[j] - 1;
  }
  return total;
}

// Minimum cost of matching min(#rows, #cols) pairs between the given row
// and column subsets; dummy zero rows/cols absorb the surplus side.
inline double hungarian_subset(const Tensor& cost, int row_begin,
                               const std::vector<char>& col_used) {
  const int rows = static_cast<int>(cost.rows());
  const int cols = static_cast<int>(cost.cols());
  std::vector<int> rs, cs;
  for (int r = row_begin; r < rows; ++r) rs.push_back(r);
  for (int c = 0; c < cols; ++c)
    if (!col_used[static_cast<std::size_t>(c)]) cs.push_back(c);
  if (rs.empty() || cs.empty()) return 0.0;

  const int n = static_cast<int>(std::max(rs.size(), cs.size()));
  std::vector<double> a(static_cast<std::size_t>(n) * n, 0.0);
  for (std::size_t i = 0; i < rs.size(); ++i)
    for (std::size_t j = 0; j < cs.size(); ++j)
      a[i * static_cast<std::size_t>(n) + j] =
          cost.at(static_cast<std::size_t>(rs[i]), static_cast<std::size_t>(cs[j]));
  return hungarian_square(a, n);
}

}  // namespace detail

// Minimum-cost injective assignment of min(R, C) (query, gt) pairs. Among
// cost-equal optima the lexicographically smallest pair list wins.
inline Assignment hungarian(const Tensor& cost) {
  if (cost.rank() != 2) throw ShapeError("hungarian: cost must be a matrix");
  check_finite(cost.data, "hungarian cost");
  const int rows = static_cast<int>(cost.rows());
  const int cols = static_cast<int>(cost.cols());
  const int k_pairs = std::min(rows, cols);

  std::vector<char> no_cols(static_cast<std::size_t>(cols), 0);
  const double best = detail::hungarian_subset(cost, 0, no_cols);
  const double tol = 1e-9 * (1.0 + std::abs(best));

  Assignment out;
  std::vector<char> col_used(static_cast<std::size_t>(cols), 0);
  double acc = 0.0;
  int q_min = 0;
  for (int k = 0; k < k_pairs; ++k) {
    bool fixed = false;
    for (int q = q_min; q <= rows - (k_pairs - k) && !fixed; ++q) {
      for (int g = 0; g < cols && !fixed; ++g) {
        if (col_used[static_cast<std::size_t>(g)]) continue;
        col_used[static_cast<std::size_t>(g)] = 1;
        const double rest = detail::hungarian_subset(cost, q + 1, col_used);
        const double c_qg = cost.at(static_cast<std::size_t>(q), static_cast<std::size_t>(g));
        if (acc + c_qg + rest <= best + tol) {
          out.pairs.emplace_back(q, g);
          acc += c_qg;
          q_min = q + 1;
          fixed = true;
        } else {
          col_used[static_cast<std::size_t>(g)] = 0;
        }
      }
    }
    if (!fixed) throw TensorError("hungarian: internal refinement failure");
  }
  out.total_cost = acc;
  return out;
}

namespace detail {

inline double dice_coeff_detached(const Tensor& probs, std::size_t q,
                                  const std::vector<std::uint8_t>& gt_mask) {
  const std::size_t hw = probs.rows();
  double inter = 0.0, psum = 0.0, gsum = 0.0;
  for (std::size_t i = 0; i < hw; ++i) {
    const double m = probs.at(i, q);
    inter += m * static_cast<double>(gt_mask[i]);
    psum += m;
    gsum += static_cast<double>(gt_mask[i]);
  }
  return 2.0 * inter / (psum + gsum);
}

}  // namespace detail

// Matching cost between every query and every GT segment:
//   cost[q, g] = -softmax(p)[q, class_g] + (1 - Dice(sigmoid(m[:, q]), mask_g))
// evaluated on detached values; the matching decision never carries
// gradient. Masks are the stage's (possibly gated) logits.
inline Tensor matching_cost(const StageOutput& final_stage,
                            const std::vector<GroundTruthSegment>& gts) {
  if (gts.empty()) throw TensorError("matching_cost: no ground-truth segments");
  const Tensor probs_cls = softmax(final_stage.p.detached(), 1);
  const Tensor probs_mask = sigmoid(final_stage.m_pan_relaxed.detached());
  const std::size_t n_q = final_stage.m_pan_relaxed.cols();
  const std::size_t hw = final_stage.m_pan_relaxed.rows();

  Tensor cost = Tensor::zeros({n_q, gts.size()});
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (gts[g].mask.size() != hw) throw ShapeError("matching_cost: GT mask grid mismatch");
    for (std::size_t q = 0; q < n_q; ++q) {
      const double cls = probs_cls.at(q, static_cast<std::size_t>(gts[g].class_id));
      const double dice = detail::dice_coeff_detached(probs_mask, q, gts[g].mask);
      cost.at(q, g) = -cls + (1.0 - dice);
    }
  }
  return cost;
}

}  // namespace remax
