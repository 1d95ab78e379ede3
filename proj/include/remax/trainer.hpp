#pragma once

// The experiment harness behind the CLI: dataset generation, the seeded
// training loop with CSV logging, checkpoint-based evaluation with and
// without the test-time semantic gate, ablation grids, and the
// false-positive/false-negative loss diagnostic.
//
// Every output file is byte-reproducible for a fixed config and build;
// wall-clock timings stay out of the logs unless log.timing=true.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "remax/checkpoint.hpp"
#include "remax/config.hpp"
#include "remax/losses.hpp"
#include "remax/matching.hpp"
#include "remax/metrics.hpp"
#include "remax/model.hpp"
#include "remax/optim.hpp"
#include "remax/synthdata.hpp"

namespace remax {

// Raised when training hits a non-finite loss; carries the batch
// provenance needed to replay the failure.
class NumericFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- dataset generation --------------------------------------------------------

struct GenPaths {
  std::string train;
  std::string val;
};

inline GenPaths dataset_paths(const RunConfig& cfg) {
  return {cfg.data_dir + "/train.rmxds", cfg.data_dir + "/val.rmxds"};
}

// Train split uses sample indices [0, train_count); the val split
// continues at [train_count, train_count + val_count).
inline GenPaths cmd_gen(const RunConfig& cfg) {
  std::filesystem::create_directories(cfg.data_dir);
  const GenPaths paths = dataset_paths(cfg);
  std::vector<PanopticSample> train, val;
  for (int i = 0; i < cfg.train_count; ++i)
    train.push_back(generate(static_cast<std::uint64_t>(i), cfg.scene));
  for (int i = 0; i < cfg.val_count; ++i)
    val.push_back(generate(static_cast<std::uint64_t>(cfg.train_count + i), cfg.scene));
  write_dataset(paths.train, train, cfg.scene);
  write_dataset(paths.val, val, cfg.scene);
  return paths;
}

// ---- training loop ---------------------------------------------------------------

struct StepRecord {
  int step = 0;
  double lr = 0.0;
  LossReport report;       // batch-averaged
  double val_pq = -1.0;    // < 0 when not evaluated this step
  double wall_ms = 0.0;
};

class Trainer {
 public:
  Trainer(const RunConfig& cfg, Dataset train_data, Dataset val_data)
      : cfg_(cfg),
        train_(std::move(train_data)),
        val_(std::move(val_data)),
        params_(init_params(cfg.model)),
        optimizer_(cfg.opt, params_),
        schedule_(cfg.schedule()),
        batch_rng_(derive_seed(cfg.seed, "batch")) {
    if (train_.samples.empty()) throw ConfigError("training dataset is empty");
    if (train_.n_classes() != cfg_.model.n_classes) {
      throw ConfigError("dataset class count disagrees with the model");
    }
  }

  ParamStore& params() { return params_; }
  const RunConfig& config() const { return cfg_; }
  int step_index() const { return step_; }

  // One optimization step over a freshly sampled batch.
  StepRecord step() {
    ++step_;
    StepRecord rec;
    rec.step = step_;
    rec.lr = schedule_.at(step_, cfg_.steps);

    std::vector<std::size_t> batch(static_cast<std::size_t>(cfg_.batch_size));
    for (auto& b : batch) {
      b = static_cast<std::size_t>(
          batch_rng_.uniform_int(0, static_cast<std::int64_t>(train_.samples.size()) - 1));
    }

    GradBuffer grads(params_);
    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    try {
      for (const std::size_t idx : batch) {
        const PanopticSample& sample = train_.samples[idx];
        Tape tape;
        BoundParams bound = BoundParams::attach(tape, params_);
        const SemanticMaskGT gt = sample.semantic_gt();
        const auto stages = forward(sample.image_f64(), bound, cfg_.model, cfg_.relax, &gt,
                                    ForwardMode::kTrain);
        TotalLoss tl = total_loss(stages, sample.segments, sample.labels, sample.S,
                                  cfg_.loss, cfg_.relax);
        const Gradients g = backward(tape, tl.loss);
        for (const auto& [name, leaf] : bound) grads.add(name, g.at(leaf), inv_batch);
        accumulate_report(rec.report, tl.report, inv_batch);
      }
    } catch (const NumericError& e) {
      std::ostringstream oss;
      oss << "non-finite loss at step " << step_ << " (seed " << cfg_.seed << "; batch";
      for (const std::size_t idx : batch) oss << ' ' << idx;
      oss << "): " << e.what();
      throw NumericFailure(oss.str());
    }

    optimizer_.step(params_, grads, rec.lr);
    return rec;
  }

  // Dataset-level PQ on the validation split, standard inference path.
  double validate() const {
    PQAccumulator acc(cfg_.infer.n_thing_classes);
    const BoundParams bound = BoundParams::detached(params_);
    for (const auto& sample : val_.samples) {
      const auto stages = forward(sample.image_f64(), bound, cfg_.model, cfg_.relax, nullptr,
                                  ForwardMode::kInfer);
      const PanopticMap pred = panoptic_inference(stages.back(), cfg_.infer, sample.grid_h,
                                                  sample.grid_w);
      acc.add(pred, sample.panoptic_gt());
    }
    return acc.result().all.pq;
  }

 private:
  static void accumulate_report(LossReport& into, const LossReport& part, double w) {
    into.total += w * part.total;
    into.mask_ce += w * part.mask_ce;
    into.dice += w * part.dice;
    into.class_ce += w * part.class_ce;
    into.semantic += w * part.semantic;
    into.fp_mask += w * part.fp_mask;
    into.fn_mask += w * part.fn_mask;
    into.pq_style_mask += w * part.pq_style_mask;
  }

  RunConfig cfg_;
  Dataset train_;
  Dataset val_;
  ParamStore params_;
  Optimizer optimizer_;
  LrSchedule schedule_;
  RngStream batch_rng_;
  int step_ = 0;
};

// ---- train command ----------------------------------------------------------------

inline double log10_ratio(double fp, double fn) {
  return std::log10(std::max(fp, 1e-12) / std::max(fn, 1e-12));
}

inline void write_log_header(std::ostream& os) {
  os << "step,lr,total,mask_ce,dice,class_ce,semantic,fp_mask,fn_mask,log10_fp_fn,"
        "val_pq,wall_ms\n";
}

inline void write_log_row(std::ostream& os, const StepRecord& r) {
  os << r.step << ',' << fmt_double(r.lr) << ',' << fmt_double(r.report.total) << ','
     << fmt_double(r.report.mask_ce) << ',' << fmt_double(r.report.dice) << ','
     << fmt_double(r.report.class_ce) << ',' << fmt_double(r.report.semantic) << ','
     << fmt_double(r.report.fp_mask) << ',' << fmt_double(r.report.fn_mask) << ','
     << fmt_double(log10_ratio(r.report.fp_mask, r.report.fn_mask)) << ',';
  if (r.val_pq >= 0.0) os << fmt_double(r.val_pq);
  os << ',' << fmt_double(r.wall_ms) << '\n';
}

struct TrainOutcome {
  std::string checkpoint_path;
  std::string log_path;
  double first_total = 0.0;
  double final_total = 0.0;
  double final_val_pq = 0.0;
  std::vector<StepRecord> records;
};

inline TrainOutcome cmd_train(const RunConfig& cfg) {
  const GenPaths paths = dataset_paths(cfg);
  Trainer trainer(cfg, read_dataset(paths.train), read_dataset(paths.val));
  std::filesystem::create_directories(cfg.out_dir);

  TrainOutcome out;
  out.checkpoint_path = cfg.out_dir + "/checkpoint.rmx";
  out.log_path = cfg.out_dir + "/train_log.csv";

  {
    std::ofstream cfg_os(cfg.out_dir + "/config.txt");
    dump_config(cfg_os, cfg);
  }

  std::ofstream log(out.log_path);
  write_log_header(log);
  for (int s = 1; s <= cfg.steps; ++s) {
    const auto t0 = std::chrono::steady_clock::now();
    StepRecord rec = trainer.step();
    if (s % cfg.val_every == 0 || s == cfg.steps) rec.val_pq = trainer.validate();
    if (cfg.log_timing) {
      rec.wall_ms = std::chrono::duration<double, std::milli>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
    }
    write_log_row(log, rec);
    if (s == 1) out.first_total = rec.report.total;
    out.final_total = rec.report.total;
    if (rec.val_pq >= 0.0) out.final_val_pq = rec.val_pq;
    out.records.push_back(std::move(rec));
  }
  if (cfg.steps == 0) out.final_val_pq = trainer.validate();
  log.close();
  save_checkpoint(out.checkpoint_path, trainer.params());
  return out;
}

// ---- eval command ------------------------------------------------------------------

struct EvalOutcome {
  PQResult plain;        // semantic gate removed (standard inference)
  PQResult with_gate;    // semantic gate kept at test time
  MiouResult miou_plain;
  MiouResult miou_with_gate;
};

inline EvalOutcome cmd_eval(const RunConfig& cfg, const std::string& checkpoint_path) {
  const GenPaths paths = dataset_paths(cfg);
  const Dataset val = read_dataset(paths.val);
  ParamStore params = init_params(cfg.model);
  load_checkpoint(checkpoint_path, params);
  const BoundParams bound = BoundParams::detached(params);

  PQAccumulator pq_plain(cfg.infer.n_thing_classes), pq_gate(cfg.infer.n_thing_classes);
  MiouAccumulator miou_plain(cfg.model.n_classes), miou_gate(cfg.model.n_classes);
  for (const auto& sample : val.samples) {
    const PanopticMap gt_map = sample.panoptic_gt();
    for (const bool gated : {false, true}) {
      const auto stages =
          forward(sample.image_f64(), bound, cfg.model, cfg.relax, nullptr,
                  gated ? ForwardMode::kInferWithGate : ForwardMode::kInfer);
      StageOutput stage = stages.back();
      if (gated) stage.m_pan = stage.m_pan_relaxed;  // post-process the gated logits
      const PanopticMap pred = panoptic_inference(stage, cfg.infer, sample.grid_h,
                                                  sample.grid_w);
      (gated ? pq_gate : pq_plain).add(pred, gt_map);
      (gated ? miou_gate : miou_plain).add(pred.class_id, sample.labels);
    }
  }

  EvalOutcome out;
  out.plain = pq_plain.result();
  out.with_gate = pq_gate.result();
  out.miou_plain = miou_plain.result();
  out.miou_with_gate = miou_gate.result();

  std::filesystem::create_directories(cfg.out_dir);
  {
    std::ofstream os(cfg.out_dir + "/metrics.csv");
    write_metrics_csv(os, out.plain);
  }
  {
    std::ofstream os(cfg.out_dir + "/metrics_with_branch.csv");
    write_metrics_csv(os, out.with_gate);
  }
  {
    std::ofstream os(cfg.out_dir + "/eval_summary.csv");
    os << "variant,pq,sq,rq,miou\n";
    os << "no_branch," << fmt_double(out.plain.all.pq) << ',' << fmt_double(out.plain.all.sq)
       << ',' << fmt_double(out.plain.all.rq) << ',' << fmt_double(out.miou_plain.miou)
       << '\n';
    os << "with_branch," << fmt_double(out.with_gate.all.pq) << ','
       << fmt_double(out.with_gate.all.sq) << ',' << fmt_double(out.with_gate.all.rq) << ','
       << fmt_double(out.miou_with_gate.miou) << '\n';
  }
  return out;
}

// ---- ablation grids ----------------------------------------------------------------

struct GridAxis {
  std::string key;
  std::vector<std::string> values;
};

// Parses "key=v1,v2,v3" into one grid axis.
inline GridAxis parse_grid_axis(const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos) throw ConfigError("grid axis must look like key=v1,v2,...");
  GridAxis axis;
  axis.key = spec.substr(0, eq);
  std::stringstream ss(spec.substr(eq + 1));
  std::string item;
  while (std::getline(ss, item, ',')) axis.values.push_back(item);
  if (axis.values.empty()) throw ConfigError("grid axis has no values: " + spec);
  return axis;
}

inline std::string sanitize_for_path(std::string s) {
  for (char& c : s) {
    if (c == '.' || c == '/' || c == '=' || c == ' ') c = '_';
  }
  return s;
}

struct AblateCell {
  std::vector<std::pair<std::string, std::string>> settings;
  std::string dir;
  double final_val_pq = 0.0;
  double final_total = 0.0;
};

// Runs one training per grid cell (cartesian product, declared order),
// sharing the base seed and dataset across cells, and joins the final
// validation PQ per cell into ablate_summary.csv.
inline std::vector<AblateCell> cmd_ablate(const RunConfig& base,
                                          const std::vector<GridAxis>& axes) {
  if (axes.empty()) throw ConfigError("ablate: no grid axes given");
  std::vector<AblateCell> cells;
  std::vector<std::size_t> cursor(axes.size(), 0);
  bool done = false;
  while (!done) {
    AblateCell cell;
    for (std::size_t a = 0; a < axes.size(); ++a) {
      cell.settings.emplace_back(axes[a].key, axes[a].values[cursor[a]]);
    }
    cells.push_back(std::move(cell));
    done = true;  // odometer increment, most-significant axis first
    for (std::size_t a = axes.size(); a-- > 0;) {
      if (++cursor[a] < axes[a].values.size()) {
        done = false;
        break;
      }
      cursor[a] = 0;
    }
  }

  for (auto& cell : cells) {
    RunConfig cfg = base;
    std::string name;
    for (const auto& [k, v] : cell.settings) {
      apply_kv(cfg, k, v);
      if (!name.empty()) name += "__";
      name += sanitize_for_path(k) + "-" + sanitize_for_path(v);
    }
    cfg.out_dir = base.out_dir + "/" + name;
    cfg.finalize();
    const TrainOutcome out = cmd_train(cfg);
    cell.dir = cfg.out_dir;
    cell.final_val_pq = out.final_val_pq;
    cell.final_total = out.final_total;
  }

  std::filesystem::create_directories(base.out_dir);
  std::ofstream os(base.out_dir + "/ablate_summary.csv");
  for (std::size_t a = 0; a < axes.size(); ++a) os << axes[a].key << ',';
  os << "final_val_pq,final_total,run_dir\n";
  for (const auto& cell : cells) {
    for (const auto& [k, v] : cell.settings) os << v << ',';
    os << fmt_double(cell.final_val_pq) << ',' << fmt_double(cell.final_total) << ','
       << cell.dir << '\n';
  }
  return cells;
}

// ---- fp/fn diagnostic ----------------------------------------------------------------

// Trains two matched-seed runs, gate on vs gate off, and logs the
// false-positive and false-negative mask-loss components per step; the
// CSV is the raw series behind the loss-ratio histogram.
inline void cmd_inspect_losses(const RunConfig& base, const std::string& checkpoint_path,
                               int steps) {
  RunConfig cfg_on = base;
  RunConfig cfg_off = base;
  cfg_off.relax.remask_stage_count = 0;
  cfg_on.finalize();
  cfg_off.finalize();

  const GenPaths paths = dataset_paths(base);
  const Dataset train_data = read_dataset(paths.train);
  const Dataset val_data = read_dataset(paths.val);
  Trainer on(cfg_on, train_data, val_data);
  Trainer off(cfg_off, train_data, val_data);
  if (!checkpoint_path.empty()) {
    load_checkpoint(checkpoint_path, on.params());
    load_checkpoint(checkpoint_path, off.params());
  }

  std::filesystem::create_directories(base.out_dir);
  std::ofstream os(base.out_dir + "/fpfn_hist.csv");
  os << "step,fp_remask,fn_remask,log10_fp_fn_remask,fp_plain,fn_plain,log10_fp_fn_plain\n";
  for (int s = 1; s <= steps; ++s) {
    const StepRecord a = on.step();
    const StepRecord b = off.step();
    os << s << ',' << fmt_double(a.report.fp_mask) << ',' << fmt_double(a.report.fn_mask)
       << ',' << fmt_double(log10_ratio(a.report.fp_mask, a.report.fn_mask)) << ','
       << fmt_double(b.report.fp_mask) << ',' << fmt_double(b.report.fn_mask) << ','
       << fmt_double(log10_ratio(b.report.fp_mask, b.report.fn_mask)) << '\n';
  }
}

}  // namespace remax
