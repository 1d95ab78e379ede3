#pragma once

// Panoptic post-processing and evaluation metrics.
//
// PanopticMap is a per-pixel (class, segment) partition: exactly one
// segment per non-void pixel, at most one segment per stuff class.
// pq() matches predicted to ground-truth segments per category at
// IoU > 0.5 (such a match is necessarily unique) and reports
// PQ = sum(IoU over TP) / (TP + FP/2 + FN/2), with SQ/RQ factors and
// things/stuff splits. miou() is the usual class-presence-averaged
// intersection over union on semantic maps.

#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "remax/model.hpp"
#include "remax/tensor.hpp"

namespace remax {

struct PanopticMap {
  int grid_h = 0;
  int grid_w = 0;
  std::vector<int> class_id;    // per pixel; -1 = void
  std::vector<int> segment_id;  // per pixel; 0 = void, else an id from `segments`

  struct Segment {
    int id = 0;  // 1-based
    int class_id = 0;
    bool is_thing = true;
    std::size_t pixels = 0;
  };
  std::vector<Segment> segments;

  std::size_t size() const { return class_id.size(); }

  // Checks the partition invariants; throws on violation.
  void validate() const {
    if (class_id.size() != segment_id.size() ||
        class_id.size() != static_cast<std::size_t>(grid_h) * static_cast<std::size_t>(grid_w)) {
      throw ShapeError("panoptic map: grid size mismatch");
    }
    std::map<int, std::size_t> counts;
    for (std::size_t i = 0; i < size(); ++i) {
      if ((class_id[i] < 0) != (segment_id[i] == 0)) {
        throw TensorError("panoptic map: void pixels must have no segment");
      }
      if (segment_id[i] != 0) ++counts[segment_id[i]];
    }
    std::map<int, int> stuff_seen;  // class -> segment id
    std::size_t covered = 0;
    for (const auto& seg : segments) {
      if (seg.id <= 0) throw TensorError("panoptic map: segment ids are 1-based");
      if (counts[seg.id] != seg.pixels || seg.pixels == 0) {
        throw TensorError("panoptic map: segment pixel count inconsistent");
      }
      covered += seg.pixels;
      if (!seg.is_thing) {
        auto [it, fresh] = stuff_seen.emplace(seg.class_id, seg.id);
        if (!fresh) throw TensorError("panoptic map: multiple segments for one stuff class");
      }
    }
    std::size_t nonvoid = 0;
    for (int c : class_id) nonvoid += c >= 0;
    if (covered != nonvoid || counts.size() != segments.size()) {
      throw TensorError("panoptic map: segments do not partition the non-void area");
    }
    for (std::size_t i = 0; i < size(); ++i) {
      if (segment_id[i] == 0) continue;
      bool ok = false;
      for (const auto& seg : segments) {
        if (seg.id == segment_id[i]) {
          ok = seg.class_id == class_id[i];
          break;
        }
      }
      if (!ok) throw TensorError("panoptic map: pixel class disagrees with its segment");
    }
  }
};

struct InferenceConfig {
  double t_cls = 0.3;    // minimum class confidence for a query to survive
  std::size_t t_px = 4;  // minimum segment area in grid cells
  double t_void = 0.2;   // minimum mask score for a pixel to be claimed
  int n_thing_classes = 4;
};

// Turns the final stage's raw outputs into a panoptic map: per-query class
// and confidence filtering, per-pixel argmax of confidence * mask prob,
// small-segment removal with reassignment to surviving queries, and a
// merge of same-class stuff segments.
inline PanopticMap panoptic_inference(const StageOutput& final_stage,
                                      const InferenceConfig& cfg, int grid_h, int grid_w) {
  const std::size_t hw = final_stage.m_pan.rows();
  const std::size_t n_q = final_stage.m_pan.cols();
  const std::size_t n_cls = final_stage.p.cols();  // N_C + 1
  if (hw != static_cast<std::size_t>(grid_h) * static_cast<std::size_t>(grid_w)) {
    throw ShapeError("panoptic_inference: grid dims disagree with mask rows");
  }

  const Tensor cls_probs = softmax(final_stage.p.detached(), 1);
  std::vector<int> query_class(n_q, -1);
  std::vector<double> query_conf(n_q, 0.0);
  std::vector<char> alive(n_q, 0);
  for (std::size_t q = 0; q < n_q; ++q) {
    std::size_t best_real = 0, best_all = 0;
    for (std::size_t c = 1; c < n_cls; ++c) {
      if (cls_probs.at(q, c) > cls_probs.at(q, best_all)) best_all = c;
      if (c + 1 < n_cls && cls_probs.at(q, c) > cls_probs.at(q, best_real)) best_real = c;
    }
    query_class[q] = static_cast<int>(best_real);
    query_conf[q] = cls_probs.at(q, best_real);
    alive[q] = query_conf[q] >= cfg.t_cls && best_all != n_cls - 1;
  }

  auto best_query = [&](std::size_t i, const std::vector<char>& live) {
    int best = -1;
    double best_score = 0.0;
    for (std::size_t q = 0; q < n_q; ++q) {
      if (!live[q]) continue;
      const double score = query_conf[q] * sigmoid_scalar(final_stage.m_pan.at(i, q));
      if (score > best_score) {
        best_score = score;
        best = static_cast<int>(q);
      }
    }
    return best_score >= cfg.t_void ? best : -1;
  };

  std::vector<int> owner(hw, -1);
  for (std::size_t i = 0; i < hw; ++i) owner[i] = best_query(i, alive);

  // Drop queries that ended up with fewer than t_px cells, then reassign
  // just those cells among the survivors (a survivor can only gain).
  std::vector<std::size_t> area(n_q, 0);
  for (std::size_t i = 0; i < hw; ++i)
    if (owner[i] >= 0) ++area[static_cast<std::size_t>(owner[i])];
  std::vector<char> surviving = alive;
  for (std::size_t q = 0; q < n_q; ++q)
    if (alive[q] && area[q] < cfg.t_px) surviving[q] = 0;
  for (std::size_t i = 0; i < hw; ++i) {
    if (owner[i] >= 0 && !surviving[static_cast<std::size_t>(owner[i])]) {
      owner[i] = best_query(i, surviving);
    }
  }

  PanopticMap map;
  map.grid_h = grid_h;
  map.grid_w = grid_w;
  map.class_id.assign(hw, -1);
  map.segment_id.assign(hw, 0);

  std::vector<int> seg_of_query(n_q, 0);
  std::map<int, int> stuff_segment;  // stuff class -> segment id
  int next_id = 1;
  for (std::size_t q = 0; q < n_q; ++q) {
    if (!surviving[q]) continue;
    bool used = false;
    for (std::size_t i = 0; i < hw; ++i) used |= owner[i] == static_cast<int>(q);
    if (!used) continue;
    const int cls = query_class[q];
    if (cls < cfg.n_thing_classes) {
      seg_of_query[q] = next_id++;
      map.segments.push_back({seg_of_query[q], cls, true, 0});
    } else {
      auto it = stuff_segment.find(cls);
      if (it == stuff_segment.end()) {
        it = stuff_segment.emplace(cls, next_id++).first;
        map.segments.push_back({it->second, cls, false, 0});
      }
      seg_of_query[q] = it->second;
    }
  }

  for (std::size_t i = 0; i < hw; ++i) {
    if (owner[i] < 0) continue;
    const auto q = static_cast<std::size_t>(owner[i]);
    map.class_id[i] = query_class[q];
    map.segment_id[i] = seg_of_query[q];
  }
  for (auto& seg : map.segments) {
    for (std::size_t i = 0; i < hw; ++i) seg.pixels += map.segment_id[i] == seg.id;
  }
  // Merging can leave a recorded segment with no pixels only if every cell
  // of a survivor was taken over; drop such entries.
  std::erase_if(map.segments, [](const PanopticMap::Segment& s) { return s.pixels == 0; });
  return map;
}

// ---- panoptic quality --------------------------------------------------------

struct PQCategoryStat {
  int category = -1;
  std::size_t tp = 0, fp = 0, fn = 0;
  double iou_sum = 0.0;
  double pq = 0.0, sq = 0.0, rq = 0.0;

  void finalize() {
    const double denom = static_cast<double>(tp) + 0.5 * static_cast<double>(fp + fn);
    sq = tp > 0 ? iou_sum / static_cast<double>(tp) : 0.0;
    rq = denom > 0.0 ? static_cast<double>(tp) / denom : 0.0;
    pq = denom > 0.0 ? iou_sum / denom : 0.0;
  }
};

struct PQResult {
  std::vector<PQCategoryStat> per_category;  // categories with any activity, sorted
  PQCategoryStat all, things, stuff;         // averages of per-category PQ/SQ/RQ
};

// Accumulates matching statistics over one or more images, then averages
// per-category PQ over active categories.
class PQAccumulator {
 public:
  explicit PQAccumulator(int n_thing_classes) : n_things_(n_thing_classes) {}

  void add(const PanopticMap& pred, const PanopticMap& gt) {
    if (pred.size() != gt.size()) throw ShapeError("pq: map dimensions differ");
    const std::size_t n = gt.size();

    // Intersections between every (gt segment, pred segment) pair, counted
    // over pixels that are non-void in the GT.
    std::map<std::pair<int, int>, std::size_t> inter;
    std::map<int, std::size_t> pred_valid_area;
    for (std::size_t i = 0; i < n; ++i) {
      if (gt.class_id[i] < 0) continue;
      if (pred.segment_id[i] != 0) ++pred_valid_area[pred.segment_id[i]];
      if (gt.segment_id[i] != 0 && pred.segment_id[i] != 0) {
        ++inter[{gt.segment_id[i], pred.segment_id[i]}];
      }
    }

    std::map<int, char> gt_matched, pred_matched;
    for (const auto& gs : gt.segments) {
      for (const auto& ps : pred.segments) {
        if (gs.class_id != ps.class_id) continue;
        const auto it = inter.find({gs.id, ps.id});
        if (it == inter.end()) continue;
        const double i_px = static_cast<double>(it->second);
        const double u_px = static_cast<double>(gs.pixels) +
                            static_cast<double>(pred_valid_area[ps.id]) - i_px;
        const double iou = u_px > 0.0 ? i_px / u_px : 0.0;
        if (iou > 0.5) {
          auto& stat = cat_[gs.class_id];
          stat.category = gs.class_id;
          ++stat.tp;
          stat.iou_sum += iou;
          gt_matched[gs.id] = 1;
          pred_matched[ps.id] = 1;
        }
      }
    }
    for (const auto& gs : gt.segments) {
      if (!gt_matched.count(gs.id)) {
        auto& stat = cat_[gs.class_id];
        stat.category = gs.class_id;
        ++stat.fn;
      }
    }
    for (const auto& ps : pred.segments) {
      if (!pred_matched.count(ps.id)) {
        auto& stat = cat_[ps.class_id];
        stat.category = ps.class_id;
        ++stat.fp;
      }
    }
  }

  PQResult result() const {
    PQResult r;
    struct Group {
      PQCategoryStat* agg;
      int n = 0;
      double pq = 0, sq = 0, rq = 0;
    };
    Group all{&r.all}, things{&r.things}, stuff{&r.stuff};
    auto fold = [](Group& grp, const PQCategoryStat& c) {
      grp.agg->tp += c.tp;
      grp.agg->fp += c.fp;
      grp.agg->fn += c.fn;
      grp.agg->iou_sum += c.iou_sum;
      grp.n += 1;
      grp.pq += c.pq;
      grp.sq += c.sq;
      grp.rq += c.rq;
    };
    for (const auto& [cid, stat0] : cat_) {
      PQCategoryStat stat = stat0;
      stat.finalize();
      r.per_category.push_back(stat);
      fold(all, stat);
      fold(cid < n_things_ ? things : stuff, stat);
    }
    // Aggregate PQ/SQ/RQ are category averages over active categories.
    for (Group* g : {&all, &things, &stuff}) {
      if (g->n == 0) continue;
      g->agg->pq = g->pq / g->n;
      g->agg->sq = g->sq / g->n;
      g->agg->rq = g->rq / g->n;
    }
    return r;
  }

 private:
  int n_things_;
  std::map<int, PQCategoryStat> cat_;
};

inline PQResult pq(const PanopticMap& pred, const PanopticMap& gt, int n_thing_classes) {
  PQAccumulator acc(n_thing_classes);
  acc.add(pred, gt);
  return acc.result();
}

// ---- mIoU ----------------------------------------------------------------------

struct MiouResult {
  double miou = 0.0;
  std::vector<std::pair<int, double>> per_class;  // classes present in GT
};

inline MiouResult miou(const std::vector<int>& pred, const std::vector<int>& gt,
                       int n_classes) {
  if (pred.size() != gt.size()) throw ShapeError("miou: map dimensions differ");
  MiouResult r;
  double total = 0.0;
  for (int c = 0; c < n_classes; ++c) {
    std::size_t inter = 0, uni = 0, gt_px = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const bool pg = gt[i] == c, pp = pred[i] == c;
      inter += pg && pp;
      uni += pg || pp;
      gt_px += pg;
    }
    if (gt_px == 0) continue;
    const double iou = uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
    r.per_class.emplace_back(c, iou);
    total += iou;
  }
  r.miou = r.per_class.empty() ? 0.0 : total / static_cast<double>(r.per_class.size());
  return r;
}

// Global per-class intersection/union accumulated across images.
class MiouAccumulator {
 public:
  explicit MiouAccumulator(int n_classes) : inter_(n_classes, 0), uni_(n_classes, 0),
                                            gt_px_(n_classes, 0) {}

  void add(const std::vector<int>& pred, const std::vector<int>& gt) {
    if (pred.size() != gt.size()) throw ShapeError("miou: map dimensions differ");
    for (std::size_t i = 0; i < gt.size(); ++i) {
      for (int c = 0; c < static_cast<int>(inter_.size()); ++c) {
        const bool pg = gt[i] == c, pp = pred[i] == c;
        inter_[static_cast<std::size_t>(c)] += pg && pp;
        uni_[static_cast<std::size_t>(c)] += pg || pp;
        gt_px_[static_cast<std::size_t>(c)] += pg;
      }
    }
  }

  MiouResult result() const {
    MiouResult r;
    double total = 0.0;
    for (std::size_t c = 0; c < inter_.size(); ++c) {
      if (gt_px_[c] == 0) continue;
      const double iou =
          uni_[c] > 0 ? static_cast<double>(inter_[c]) / static_cast<double>(uni_[c]) : 0.0;
      r.per_class.emplace_back(static_cast<int>(c), iou);
      total += iou;
    }
    r.miou = r.per_class.empty() ? 0.0 : total / static_cast<double>(r.per_class.size());
    return r;
  }

 private:
  std::vector<std::size_t> inter_, uni_, gt_px_;
};

// ---- CSV report -----------------------------------------------------------------

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

// Schema: category_id,tp,fp,fn,iou_sum,pq,sq,rq with aggregate rows keyed
// "all" / "things" / "stuff".
inline void write_metrics_csv(std::ostream& os, const PQResult& r) {
  os << "category_id,tp,fp,fn,iou_sum,pq,sq,rq\n";
  auto row = [&os](const std::string& key, const PQCategoryStat& s) {
    os << key << ',' << s.tp << ',' << s.fp << ',' << s.fn << ',' << fmt_double(s.iou_sum)
       << ',' << fmt_double(s.pq) << ',' << fmt_double(s.sq) << ',' << fmt_double(s.rq)
       << '\n';
  };
  for (const auto& c : r.per_category) row(std::to_string(c.category), c);
  row("all", r.all);
  row("things", r.things);
  row("stuff", r.stuff);
}

}  // namespace remax
