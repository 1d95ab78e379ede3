#pragma once

// Run configuration: flat "dotted.key=value" text files, every key also
// settable from the command line. One source of truth per knob; derived
// fields (scene size, class splits) are synchronized in finalize().

#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "remax/losses.hpp"
#include "remax/metrics.hpp"
#include "remax/model.hpp"
#include "remax/optim.hpp"
#include "remax/relax.hpp"
#include "remax/synthdata.hpp"

namespace remax {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  ModelConfig model;
  RelaxConfig relax;
  LossConfig loss;
  OptimConfig opt;
  SceneConfig scene;
  InferenceConfig infer;

  int steps = 500;
  int batch_size = 4;
  int val_every = 50;
  std::vector<double> milestones{0.85, 0.95};
  double decay_factor = 0.1;

  int train_count = 64;
  int val_count = 16;

  std::uint64_t seed = 0;
  std::string data_dir = "data";
  std::string out_dir = "out";
  bool log_timing = false;  // keep wall_ms at 0 so logs are byte-reproducible

  // Propagates shared knobs into the sub-configs and validates.
  void finalize() {
    model.seed = seed;
    scene.seed = seed;
    scene.height = model.height;
    scene.width = model.width;
    infer.n_thing_classes = scene.n_thing_classes;
    loss.eta = relax.eta;
    loss.activation = relax.activation;

    model.validate();
    scene.validate();
    if (scene.n_classes() != model.n_classes) {
      throw ConfigError("scene thing+stuff classes must equal model.n_classes");
    }
    if (!(relax.eta >= 0.0 && relax.eta <= 1.0)) throw ConfigError("relax.eta must be in [0,1]");
    if (relax.remask_stage_count < 0 || relax.remask_stage_count > model.stages) {
      throw ConfigError("relax.remask_stages must lie in [0, model.stages]");
    }
    if (loss.w_mask_ce < 0 || loss.w_dice < 0 || loss.w_class < 0 || loss.w_sem < 0) {
      throw ConfigError("loss weights must be nonnegative");
    }
    if (steps < 0 || batch_size < 1 || val_every < 1 || train_count < 1 || val_count < 1) {
      throw ConfigError("train counts must be positive");
    }
    double prev = 0.0;
    for (double m : milestones) {
      if (!(m > prev && m < 1.0)) {
        throw ConfigError("milestones must be strictly increasing within (0,1)");
      }
      prev = m;
    }
  }

  LrSchedule schedule() const { return {opt.lr, milestones, decay_factor}; }
};

namespace detail {

inline bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected bool (true/false/1/0), got '" + v + "'");
}

inline double parse_f64(const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw ConfigError("");
    return x;
  } catch (...) {
    throw ConfigError("expected number, got '" + v + "'");
  }
}

inline long long parse_i64(const std::string& v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(v, &used);
    if (used != v.size()) throw ConfigError("");
    return x;
  } catch (...) {
    throw ConfigError("expected integer, got '" + v + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& v) {
  try {
    std::size_t used = 0;
    const std::uint64_t x = std::stoull(v, &used);
    if (used != v.size()) throw ConfigError("");
    return x;
  } catch (...) {
    throw ConfigError("expected unsigned integer, got '" + v + "'");
  }
}

inline MaskActivation parse_activation(const std::string& v) {
  if (v == "sigmoid") return MaskActivation::kSigmoid;
  if (v == "softmax") return MaskActivation::kSoftmax;
  throw ConfigError("activation must be 'sigmoid' or 'softmax', got '" + v + "'");
}

inline std::vector<double> parse_milestones(const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_f64(item));
  if (out.empty()) throw ConfigError("milestones list is empty");
  return out;
}

}  // namespace detail

// Applies one key=value pair; throws ConfigError for unknown keys or
// unparseable values.
inline void apply_kv(RunConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  auto i = [&] { return static_cast<int>(parse_i64(value)); };
  auto f = [&] { return parse_f64(value); };
  auto b = [&] { return parse_bool(value); };

  if (key == "model.height") c.model.height = i();
  else if (key == "model.width") c.model.width = i();
  else if (key == "model.n_queries") c.model.n_queries = i();
  else if (key == "model.n_classes") c.model.n_classes = i();
  else if (key == "model.d_q") c.model.d_q = i();
  else if (key == "model.d_pix") c.model.d_pix = i();
  else if (key == "model.d_sem") c.model.d_sem = i();
  else if (key == "model.stages") c.model.stages = i();
  else if (key == "relax.eta") c.relax.eta = f();
  else if (key == "relax.remask_stages") c.relax.remask_stage_count = i();
  else if (key == "relax.stop_grad_semantic") c.relax.stop_grad_semantic = b();
  else if (key == "relax.activation") c.relax.activation = parse_activation(value);
  else if (key == "relax.gt_remask") c.relax.gt_remask_mode = b();
  else if (key == "relax.stop_grad_class_gate") c.relax.stop_grad_class_gate = b();
  else if (key == "relax.reclass_on_relaxed") c.relax.reclass_on_relaxed = b();
  else if (key == "loss.w_mask_ce") c.loss.w_mask_ce = f();
  else if (key == "loss.w_dice") c.loss.w_dice = f();
  else if (key == "loss.w_class") c.loss.w_class = f();
  else if (key == "loss.w_sem") c.loss.w_sem = f();
  else if (key == "loss.no_object_weight") c.loss.no_object_weight = f();
  else if (key == "loss.per_stage_matching") c.loss.per_stage_matching = b();
  else if (key == "opt.kind") {
    if (value == "adamw") c.opt.kind = OptimConfig::Kind::kAdamW;
    else if (value == "sgd") c.opt.kind = OptimConfig::Kind::kSgd;
    else throw ConfigError("opt.kind must be 'adamw' or 'sgd'");
  }
  else if (key == "opt.lr") c.opt.lr = f();
  else if (key == "opt.beta1") c.opt.beta1 = f();
  else if (key == "opt.beta2") c.opt.beta2 = f();
  else if (key == "opt.eps") c.opt.eps = f();
  else if (key == "opt.weight_decay") c.opt.weight_decay = f();
  else if (key == "opt.momentum") c.opt.momentum = f();
  else if (key == "train.steps") c.steps = i();
  else if (key == "train.batch_size") c.batch_size = i();
  else if (key == "train.val_every") c.val_every = i();
  else if (key == "train.milestones") c.milestones = parse_milestones(value);
  else if (key == "train.decay_factor") c.decay_factor = f();
  else if (key == "data.dir") c.data_dir = value;
  else if (key == "data.train_count") c.train_count = i();
  else if (key == "data.val_count") c.val_count = i();
  else if (key == "scene.thing_classes") c.scene.n_thing_classes = i();
  else if (key == "scene.stuff_classes") c.scene.n_stuff_classes = i();
  else if (key == "scene.min_things") c.scene.min_things = i();
  else if (key == "scene.max_things") c.scene.max_things = i();
  else if (key == "scene.noise_std") c.scene.noise_std = f();
  else if (key == "infer.t_cls") c.infer.t_cls = f();
  else if (key == "infer.t_px") c.infer.t_px = static_cast<std::size_t>(parse_i64(value));
  else if (key == "infer.t_void") c.infer.t_void = f();
  else if (key == "seed") c.seed = parse_u64(value);
  else if (key == "out.dir") c.out_dir = value;
  else if (key == "log.timing") c.log_timing = b();
  else throw ConfigError("unknown config key: " + key);
}

inline void apply_kv_line(RunConfig& c, const std::string& line_in) {
  std::string line = line_in;
  if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
  const auto strip = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  };
  line = strip(line);
  if (line.empty()) return;
  const auto eq = line.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + line + "'");
  apply_kv(c, strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
}

inline RunConfig load_config(const std::string& path_or_empty,
                             const std::vector<std::string>& overrides) {
  RunConfig c;
  if (!path_or_empty.empty()) {
    std::ifstream is(path_or_empty);
    if (!is) throw ConfigError("cannot open config file: " + path_or_empty);
    std::string line;
    while (std::getline(is, line)) apply_kv_line(c, line);
  }
  for (const auto& kv : overrides) apply_kv_line(c, kv);
  c.finalize();
  return c;
}

// Writes the effective configuration in a stable key order, loadable back.
inline void dump_config(std::ostream& os, const RunConfig& c) {
  const auto act = [](MaskActivation a) {
    return a == MaskActivation::kSigmoid ? "sigmoid" : "softmax";
  };
  os << "model.height=" << c.model.height << "\n";
  os << "model.width=" << c.model.width << "\n";
  os << "model.n_queries=" << c.model.n_queries << "\n";
  os << "model.n_classes=" << c.model.n_classes << "\n";
  os << "model.d_q=" << c.model.d_q << "\n";
  os << "model.d_pix=" << c.model.d_pix << "\n";
  os << "model.d_sem=" << c.model.d_sem << "\n";
  os << "model.stages=" << c.model.stages << "\n";
  os << "relax.eta=" << fmt_double(c.relax.eta) << "\n";
  os << "relax.remask_stages=" << c.relax.remask_stage_count << "\n";
  os << "relax.stop_grad_semantic=" << (c.relax.stop_grad_semantic ? "true" : "false") << "\n";
  os << "relax.activation=" << act(c.relax.activation) << "\n";
  os << "relax.gt_remask=" << (c.relax.gt_remask_mode ? "true" : "false") << "\n";
  os << "relax.stop_grad_class_gate=" << (c.relax.stop_grad_class_gate ? "true" : "false")
     << "\n";
  os << "relax.reclass_on_relaxed=" << (c.relax.reclass_on_relaxed ? "true" : "false") << "\n";
  os << "loss.w_mask_ce=" << fmt_double(c.loss.w_mask_ce) << "\n";
  os << "loss.w_dice=" << fmt_double(c.loss.w_dice) << "\n";
  os << "loss.w_class=" << fmt_double(c.loss.w_class) << "\n";
  os << "loss.w_sem=" << fmt_double(c.loss.w_sem) << "\n";
  os << "loss.no_object_weight=" << fmt_double(c.loss.no_object_weight) << "\n";
  os << "loss.per_stage_matching=" << (c.loss.per_stage_matching ? "true" : "false") << "\n";
  os << "opt.kind=" << (c.opt.kind == OptimConfig::Kind::kAdamW ? "adamw" : "sgd") << "\n";
  os << "opt.lr=" << fmt_double(c.opt.lr) << "\n";
  os << "opt.beta1=" << fmt_double(c.opt.beta1) << "\n";
  os << "opt.beta2=" << fmt_double(c.opt.beta2) << "\n";
  os << "opt.eps=" << fmt_double(c.opt.eps) << "\n";
  os << "opt.weight_decay=" << fmt_double(c.opt.weight_decay) << "\n";
  os << "opt.momentum=" << fmt_double(c.opt.momentum) << "\n";
  os << "train.steps=" << c.steps << "\n";
  os << "train.batch_size=" << c.batch_size << "\n";
  os << "train.val_every=" << c.val_every << "\n";
  os << "train.milestones=";
  for (std::size_t i = 0; i < c.milestones.size(); ++i) {
    os << (i ? "," : "") << fmt_double(c.milestones[i]);
  }
  os << "\n";
  os << "train.decay_factor=" << fmt_double(c.decay_factor) << "\n";
  os << "data.dir=" << c.data_dir << "\n";
  os << "data.train_count=" << c.train_count << "\n";
  os << "data.val_count=" << c.val_count << "\n";
  os << "scene.thing_classes=" << c.scene.n_thing_classes << "\n";
  os << "scene.stuff_classes=" << c.scene.n_stuff_classes << "\n";
  os << "scene.min_things=" << c.scene.min_things << "\n";
  os << "scene.max_things=" << c.scene.max_things << "\n";
  os << "scene.noise_std=" << fmt_double(c.scene.noise_std) << "\n";
  os << "infer.t_cls=" << fmt_double(c.infer.t_cls) << "\n";
  os << "infer.t_px=" << c.infer.t_px << "\n";
  os << "infer.t_void=" << fmt_double(c.infer.t_void) << "\n";
  os << "seed=" << c.seed << "\n";
  os << "out.dir=" << c.out_dir << "\n";
  os << "log.timing=" << (c.log_timing ? "true" : "false") << "\n";
}

}  // namespace remax
