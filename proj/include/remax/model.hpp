#pragma once

// A desk-scale mask transformer: a small pixel encoder, decoder stages
// that refine learned mask queries by softmax cross-attention over pixel
// features, and three heads (panoptic mask, classification with a
// trailing no-object slot, auxiliary per-pixel semantic prediction).
//
// The encoder embeds non-overlapping 4x4 patches, so every mask-shaped
// tensor lives on the stride-4 grid: HW below always means
// (height/4)*(width/4).

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "remax/relax.hpp"
#include "remax/rng.hpp"
#include "remax/tensor.hpp"

namespace remax {

inline constexpr int kPatchStride = 4;

struct ModelConfig {
  int height = 32;  // image pixels
  int width = 32;
  int n_queries = 8;
  int n_classes = 6;  // things + stuff; the class head adds one no-object slot
  int d_q = 32;
  int d_pix = 32;
  int d_sem = 32;
  int stages = 4;
  std::uint64_t seed = 0;

  int grid_h() const { return height / kPatchStride; }
  int grid_w() const { return width / kPatchStride; }
  std::size_t hw() const {
    return static_cast<std::size_t>(grid_h()) * static_cast<std::size_t>(grid_w());
  }

  void validate() const {
    if (height < 16 || width < 16 || height % kPatchStride || width % kPatchStride) {
      throw TensorError("model: height/width must be >= 16 and divisible by 4");
    }
    if (n_queries < 1 || n_classes < 1 || d_q < 1 || d_pix < 1 || d_sem < 1 || stages < 1) {
      throw TensorError("model: all dimensions must be positive and stages >= 1");
    }
  }
};

// One decoder stage's predictions. m_pan_relaxed aliases m_pan's values
// exactly when no gate was applied to the stage.
struct StageOutput {
  Tensor m_pan;          // HW x N_Q logits
  Tensor p;              // N_Q x (N_C+1) class logits, last slot = no-object
  Tensor m_sem;          // HW x N_C logits; empty when the branch is skipped
  Tensor m_pan_relaxed;  // HW x N_Q
  bool skip_sem_loss = false;

  bool has_sem() const { return m_sem.numel() > 0; }
};

// Named parameter tensors in a fixed registration order. Master values
// are detached; a forward pass binds them onto a tape.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Shape shape, double init_std, std::uint64_t seed) {
    Tensor t = Tensor::zeros(std::move(shape));
    if (init_std > 0.0) {
      RngStream rng(derive_seed(seed, "param:" + name));
      for (auto& v : t.data) v = rng.normal(0.0, init_std);
    }
    items_.emplace_back(name, std::move(t));
    return items_.back().second;
  }

  bool contains(const std::string& name) const { return find(name) != nullptr; }

  Tensor& get(const std::string& name) {
    for (auto& [n, t] : items_)
      if (n == name) return t;
    throw TensorError("unknown parameter: " + name);
  }
  const Tensor& get(const std::string& name) const {
    const Tensor* t = find(name);
    if (!t) throw TensorError("unknown parameter: " + name);
    return *t;
  }

  std::size_t size() const { return items_.size(); }
  auto begin() { return items_.begin(); }
  auto end() { return items_.end(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  std::size_t total_scalars() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

 private:
  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : items_)
      if (n == name) return &t;
    return nullptr;
  }
  std::vector<std::pair<std::string, Tensor>> items_;
};

// Parameter groups, by name prefix. The semantic branch covers the
// encoder's semantic projection plus the semantic head proper.
inline bool is_semantic_branch_param(const std::string& name) {
  return name.rfind("sem_head.", 0) == 0 || name.rfind("enc.sem_proj.", 0) == 0;
}

inline ParamStore init_params(const ModelConfig& cfg) {
  cfg.validate();
  const auto q = static_cast<std::size_t>(cfg.n_queries);
  const auto dq = static_cast<std::size_t>(cfg.d_q);
  const auto dp = static_cast<std::size_t>(cfg.d_pix);
  const auto ds = static_cast<std::size_t>(cfg.d_sem);
  const auto nc = static_cast<std::size_t>(cfg.n_classes);
  const std::size_t patch = kPatchStride * kPatchStride * 3;
  const double sd = 0.02;
  const std::uint64_t seed = cfg.seed;

  ParamStore p;
  p.add("query_embed", {q, dq}, sd, seed);

  p.add("enc.patch.w", {patch, dp}, sd, seed);
  p.add("enc.patch.b", {dp}, 0.0, seed);
  for (int b = 0; b < 2; ++b) {
    const std::string pre = "enc.blk" + std::to_string(b) + ".";
    p.add(pre + "w1", {dp, dp}, sd, seed);
    p.add(pre + "b1", {dp}, 0.0, seed);
    p.add(pre + "w2", {dp, dp}, sd, seed);
    p.add(pre + "b2", {dp}, 0.0, seed);
  }
  p.add("enc.sem_proj.w", {dp, ds}, sd, seed);
  p.add("enc.sem_proj.b", {ds}, 0.0, seed);

  for (int s = 0; s < cfg.stages; ++s) {
    const std::string pre = "stage" + std::to_string(s) + ".";
    p.add(pre + "attn.wq", {dq, dq}, sd, seed);
    p.add(pre + "attn.wk", {dp, dq}, sd, seed);
    p.add(pre + "attn.wv", {dp, dq}, sd, seed);
    p.add(pre + "attn.wo", {dq, dq}, sd, seed);
    p.add(pre + "ffn.w1", {dq, dq}, sd, seed);
    p.add(pre + "ffn.b1", {dq}, 0.0, seed);
    p.add(pre + "ffn.w2", {dq, dq}, sd, seed);
    p.add(pre + "ffn.b2", {dq}, 0.0, seed);
  }

  p.add("mask_head.w", {dq, dp}, sd, seed);
  p.add("mask_head.b", {dp}, 0.0, seed);
  p.add("class_head.w", {dq, nc + 1}, sd, seed);
  p.add("class_head.b", {nc + 1}, 0.0, seed);

  p.add("sem_head.local.w", {ds, ds}, sd, seed);
  p.add("sem_head.ctx.w", {ds, ds}, sd, seed);
  p.add("sem_head.hidden.b", {ds}, 0.0, seed);
  p.add("sem_head.out.w", {ds, nc}, sd, seed);
  p.add("sem_head.out.b", {nc}, 0.0, seed);
  return p;
}

// Parameters bound for one forward pass: tape-attached leaves, or the
// detached master values when no tape is given (inference).
class BoundParams {
 public:
  static BoundParams attach(Tape& tape, const ParamStore& store) {
    BoundParams bp;
    for (const auto& [name, t] : store) bp.items_.emplace_back(name, tape.leaf(t));
    return bp;
  }
  static BoundParams detached(const ParamStore& store) {
    BoundParams bp;
    for (const auto& [name, t] : store) bp.items_.emplace_back(name, t);
    return bp;
  }

  const Tensor& operator()(const std::string& name) const {
    for (const auto& [n, t] : items_)
      if (n == name) return t;
    throw TensorError("unbound parameter: " + name);
  }

  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

enum class ForwardMode {
  kTrain,          // all stages, semantic branch on (unless GT-gated), gates applied
  kInfer,          // final stage only, semantic branch never touched
  kInferWithGate,  // final stage only, but the semantic gate is kept at test time
};

struct ForwardStats {
  std::size_t sem_branch_madds = 0;  // multiply-adds spent in the semantic branch
};

namespace detail {

inline Tensor linear(const Tensor& x, const BoundParams& P, const std::string& prefix) {
  return add(matmul(x, P(prefix + ".w")), P(prefix + ".b"));
}

// Non-overlapping 4x4 patch pixels flattened per grid cell; purely a
// rearrangement of the (constant) input image.
inline Tensor patchify(const std::vector<double>& image, const ModelConfig& cfg) {
  const std::size_t expect =
      static_cast<std::size_t>(cfg.height) * static_cast<std::size_t>(cfg.width) * 3;
  if (image.size() != expect) throw ShapeError("forward: image size mismatch");
  for (double v : image) {
    if (!(v >= 0.0 && v <= 1.0)) throw TensorError("forward: image values must be in [0,1]");
  }
  const std::size_t patch = kPatchStride * kPatchStride * 3;
  Tensor out = Tensor::zeros({cfg.hw(), patch});
  const auto gw = static_cast<std::size_t>(cfg.grid_w());
  for (std::size_t cell = 0; cell < cfg.hw(); ++cell) {
    const std::size_t gy = cell / gw, gx = cell % gw;
    std::size_t k = 0;
    for (int dy = 0; dy < kPatchStride; ++dy) {
      for (int dx = 0; dx < kPatchStride; ++dx) {
        const std::size_t py = gy * kPatchStride + static_cast<std::size_t>(dy);
        const std::size_t px = gx * kPatchStride + static_cast<std::size_t>(dx);
        const std::size_t base = (py * static_cast<std::size_t>(cfg.width) + px) * 3;
        for (int ch = 0; ch < 3; ++ch) out.data[cell * patch + k++] = image[base + ch];
      }
    }
  }
  return out;
}

}  // namespace detail

struct EncodedImage {
  Tensor pixel_feats;  // HW x d_pix
  Tensor x_sem;        // HW x d_sem; empty unless requested
};

inline EncodedImage encode(const std::vector<double>& image, const BoundParams& P,
                           const ModelConfig& cfg, bool want_sem_features,
                           ForwardStats* stats = nullptr) {
  Tensor x = detail::linear(detail::patchify(image, cfg), P, "enc.patch");
  for (int b = 0; b < 2; ++b) {
    const std::string pre = "enc.blk" + std::to_string(b);
    Tensor h = tanh(add(matmul(x, P(pre + ".w1")), P(pre + ".b1")));
    x = add(x, add(matmul(h, P(pre + ".w2")), P(pre + ".b2")));
  }
  EncodedImage enc;
  enc.pixel_feats = x;
  if (want_sem_features) {
    enc.x_sem = detail::linear(x, P, "enc.sem_proj");
    if (stats) {
      stats->sem_branch_madds +=
          cfg.hw() * static_cast<std::size_t>(cfg.d_pix) * static_cast<std::size_t>(cfg.d_sem);
    }
  }
  return enc;
}

// Residual cross-attention readout plus a residual feed-forward block.
inline Tensor decoder_stage(const Tensor& queries, const Tensor& pixel_feats,
                            const BoundParams& P, int stage, const ModelConfig& cfg) {
  const std::string pre = "stage" + std::to_string(stage) + ".";
  Tensor q = matmul(queries, P(pre + "attn.wq"));
  Tensor k = matmul(pixel_feats, P(pre + "attn.wk"));
  Tensor v = matmul(pixel_feats, P(pre + "attn.wv"));
  Tensor attn = softmax(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(double(cfg.d_q))), 1);
  Tensor out = add(queries, matmul(matmul(attn, v), P(pre + "attn.wo")));
  Tensor h = tanh(add(matmul(out, P(pre + "ffn.w1")), P(pre + "ffn.b1")));
  return add(out, add(matmul(h, P(pre + "ffn.w2")), P(pre + "ffn.b2")));
}

// The three heads. m_sem is produced only in train mode; its hidden layer
// mixes each pixel's semantic feature with a global-average context
// vector (split-weight form of concatenation).
inline StageOutput heads(const Tensor& queries, const Tensor& pixel_feats,
                         const Tensor& x_sem, bool train_mode, const BoundParams& P,
                         const ModelConfig& cfg, ForwardStats* stats = nullptr) {
  StageOutput so;
  Tensor mask_emb = detail::linear(queries, P, "mask_head");
  so.m_pan = matmul(pixel_feats, transpose(mask_emb));
  so.p = detail::linear(queries, P, "class_head");

  if (train_mode) {
    if (x_sem.numel() == 0) throw TensorError("heads: semantic features missing in train mode");
    const auto ds = static_cast<std::size_t>(cfg.d_sem);
    Tensor ctx = reshape(mean(x_sem, 0), {1, ds});
    Tensor ctx_feat = reshape(matmul(ctx, P("sem_head.ctx.w")), {ds});
    Tensor hidden = tanh(add(add(matmul(x_sem, P("sem_head.local.w")), ctx_feat),
                             P("sem_head.hidden.b")));
    so.m_sem = add(matmul(hidden, P("sem_head.out.w")), P("sem_head.out.b"));
    if (stats) {
      const auto nc = static_cast<std::size_t>(cfg.n_classes);
      stats->sem_branch_madds += cfg.hw() * ds * ds + ds * ds + cfg.hw() * ds * nc;
    }
  }
  so.m_pan_relaxed = so.m_pan;
  return so;
}

// Applies the relaxation gate to one stage's outputs in place.
inline void apply_remask(StageOutput& stage, const RelaxConfig& cfg,
                         const SemanticMaskGT* gt) {
  if (cfg.gt_remask_mode) {
    if (gt == nullptr) throw TensorError("remask: GT gating requested without GT masks");
    const std::size_t nc = gt->S.shape[1];
    Tensor gate = remask_map_gt(*gt, slice_cols(stage.p, 0, nc), cfg);
    stage.m_pan_relaxed = remask_apply(stage.m_pan, gate);
    stage.skip_sem_loss = true;
    return;
  }
  if (!stage.has_sem()) throw TensorError("remask: semantic prediction missing");
  const std::size_t nc = stage.m_sem.shape[1];
  Tensor gate = remask_map(stage.m_sem, slice_cols(stage.p, 0, nc), cfg);
  stage.m_pan_relaxed = remask_apply(stage.m_pan, gate);
}

// Runs the encoder once, loops the decoder stages, and emits per-stage
// heads. Training returns one StageOutput per stage with the gate applied
// to the first remask_stage_count stages; inference returns only the final
// stage and never touches the semantic branch (kInferWithGate keeps it).
inline std::vector<StageOutput> forward(const std::vector<double>& image,
                                        const BoundParams& P, const ModelConfig& mcfg,
                                        const RelaxConfig& rcfg, const SemanticMaskGT* gt,
                                        ForwardMode mode, ForwardStats* stats = nullptr) {
  mcfg.validate();
  const bool train = mode == ForwardMode::kTrain;
  const bool want_sem = (train && !rcfg.gt_remask_mode) || mode == ForwardMode::kInferWithGate;
  if (train && rcfg.gt_remask_mode && gt == nullptr) {
    throw TensorError("forward: GT gating requires ground-truth semantic masks");
  }

  const EncodedImage enc = encode(image, P, mcfg, want_sem, stats);
  Tensor queries = P("query_embed");

  std::vector<StageOutput> outputs;
  for (int s = 0; s < mcfg.stages; ++s) {
    queries = decoder_stage(queries, enc.pixel_feats, P, s, mcfg);
    const bool is_final = s == mcfg.stages - 1;
    if (!train && !is_final) continue;

    const bool stage_emits_sem = (train && !rcfg.gt_remask_mode) ||
                                 mode == ForwardMode::kInferWithGate;
    StageOutput so = heads(queries, enc.pixel_feats, enc.x_sem, stage_emits_sem, P, mcfg, stats);
    so.skip_sem_loss = rcfg.gt_remask_mode;

    if (train && s < rcfg.remask_stage_count) {
      apply_remask(so, rcfg, gt);
    } else if (mode == ForwardMode::kInferWithGate) {
      // Test-time variant that keeps the semantic gate on the final stage.
      RelaxConfig rc = rcfg;
      rc.gt_remask_mode = false;
      apply_remask(so, rc, nullptr);
      so.skip_sem_loss = true;
    }
    outputs.push_back(std::move(so));
  }
  return outputs;
}

}  // namespace remax
