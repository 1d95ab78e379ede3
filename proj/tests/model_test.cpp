#include "remax/model.hpp"

#include <gtest/gtest.h>

#include "remax/gradcheck.hpp"
#include "remax/rng.hpp"
#include "remax/synthdata.hpp"

namespace remax {
namespace {

ModelConfig tiny_cfg() {
  ModelConfig m;
  m.height = m.width = 16;
  m.n_queries = 3;
  m.n_classes = 4;
  m.d_q = m.d_pix = m.d_sem = 8;
  m.stages = 2;
  m.seed = 9;
  return m;
}

SceneConfig scene_for(const ModelConfig& m) {
  SceneConfig s;
  s.height = m.height;
  s.width = m.width;
  s.n_thing_classes = 2;
  s.n_stuff_classes = 2;
  s.max_things = 2;
  s.seed = 4;
  return s;
}

TEST(Model, StageOutputShapes) {
  const ModelConfig mc = tiny_cfg();
  const PanopticSample sample = generate(0, scene_for(mc));
  const ParamStore params = init_params(mc);
  const SemanticMaskGT gt = sample.semantic_gt();
  const auto stages = forward(sample.image_f64(), BoundParams::detached(params), mc, {},
                              &gt, ForwardMode::kTrain);
  ASSERT_EQ(stages.size(), 2u);
  for (const auto& st : stages) {
    EXPECT_EQ(st.m_pan.shape, (Shape{mc.hw(), 3u}));
    EXPECT_EQ(st.p.shape, (Shape{3u, 5u}));
    EXPECT_EQ(st.m_sem.shape, (Shape{mc.hw(), 4u}));
    EXPECT_EQ(st.m_pan_relaxed.shape, st.m_pan.shape);
  }
}

TEST(Model, DeterministicForSeedAndImage) {
  const ModelConfig mc = tiny_cfg();
  const PanopticSample sample = generate(1, scene_for(mc));
  auto run = [&] {
    const ParamStore params = init_params(mc);
    const auto stages = forward(sample.image_f64(), BoundParams::detached(params), mc, {},
                                nullptr, ForwardMode::kInfer);
    return stages.back().m_pan.data;
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Model, ZeroImageGivesFiniteFeatures) {
  const ModelConfig mc = tiny_cfg();
  const ParamStore params = init_params(mc);
  const std::vector<double> image(static_cast<std::size_t>(mc.height) * mc.width * 3, 0.0);
  const EncodedImage enc = encode(image, BoundParams::detached(params), mc, true);
  for (double v : enc.pixel_feats.data) EXPECT_TRUE(std::isfinite(v));
  for (double v : enc.x_sem.data) EXPECT_TRUE(std::isfinite(v));
}

TEST(Model, WrongImageSizeRejected) {
  const ModelConfig mc = tiny_cfg();
  const ParamStore params = init_params(mc);
  EXPECT_THROW(encode(std::vector<double>(10, 0.0), BoundParams::detached(params), mc, false),
               ShapeError);
}

TEST(Model, InferenceReturnsOnlyFinalStageWithoutSemanticWork) {
  const ModelConfig mc = tiny_cfg();
  const PanopticSample sample = generate(2, scene_for(mc));
  const ParamStore params = init_params(mc);
  ForwardStats stats;
  const auto stages = forward(sample.image_f64(), BoundParams::detached(params), mc, {},
                              nullptr, ForwardMode::kInfer, &stats);
  ASSERT_EQ(stages.size(), 1u);
  EXPECT_FALSE(stages.back().has_sem());
  EXPECT_EQ(stats.sem_branch_madds, 0u);

  ForwardStats train_stats;
  const SemanticMaskGT gt = sample.semantic_gt();
  (void)forward(sample.image_f64(), BoundParams::detached(params), mc, {}, &gt,
                ForwardMode::kTrain, &train_stats);
  EXPECT_GT(train_stats.sem_branch_madds, 0u);
}

TEST(Model, InferenceBitIdenticalUnderSemanticBranchMutation) {
  const ModelConfig mc = tiny_cfg();
  const PanopticSample sample = generate(3, scene_for(mc));
  ParamStore params = init_params(mc);

  auto run = [&] {
    const auto stages = forward(sample.image_f64(), BoundParams::detached(params), mc, {},
                                nullptr, ForwardMode::kInfer);
    auto flat = stages.back().m_pan.data;
    const auto& p = stages.back().p.data;
    flat.insert(flat.end(), p.begin(), p.end());
    return flat;
  };
  const auto before = run();
  RngStream rng(99);
  for (auto& [name, t] : params) {
    if (is_semantic_branch_param(name)) {
      for (auto& v : t.data) v = rng.uniform(-100.0, 100.0);
    }
  }
  const auto after = run();
  ASSERT_EQ(before.size(), after.size());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i], after[i]);
}

TEST(Model, SingleStageEqualsManualComposition) {
  ModelConfig mc = tiny_cfg();
  mc.stages = 1;
  const PanopticSample sample = generate(5, scene_for(mc));
  const ParamStore params = init_params(mc);
  const BoundParams bound = BoundParams::detached(params);

  const auto stages = forward(sample.image_f64(), bound, mc, {}, nullptr, ForwardMode::kInfer);
  const EncodedImage enc = encode(sample.image_f64(), bound, mc, false);
  const Tensor queries = decoder_stage(bound("query_embed"), enc.pixel_feats, bound, 0, mc);
  const StageOutput manual = heads(queries, enc.pixel_feats, Tensor(), false, bound, mc);

  ASSERT_EQ(stages.size(), 1u);
  EXPECT_EQ(stages.back().m_pan.data, manual.m_pan.data);
  EXPECT_EQ(stages.back().p.data, manual.p.data);
}

TEST(Model, ZeroedStageWeightsMakeDecoderStageIdentity) {
  const ModelConfig mc = tiny_cfg();
  ParamStore params = init_params(mc);
  for (auto& [name, t] : params) {
    if (name.rfind("stage0.", 0) == 0) {
      for (auto& v : t.data) v = 0.0;
    }
  }
  const BoundParams bound = BoundParams::detached(params);
  RngStream rng(7);
  Tensor queries = Tensor::zeros({3, 8});
  for (auto& v : queries.data) v = rng.uniform(-1.0, 1.0);
  Tensor feats = Tensor::zeros({mc.hw(), 8});
  for (auto& v : feats.data) v = rng.uniform(-1.0, 1.0);

  const Tensor out = decoder_stage(queries, feats, bound, 0, mc);
  for (std::size_t i = 0; i < queries.numel(); ++i) EXPECT_EQ(out.data[i], queries.data[i]);
}

TEST(Model, RemaskDisabledKeepsRawLogitsBitIdentical) {
  const ModelConfig mc = tiny_cfg();
  const PanopticSample sample = generate(6, scene_for(mc));
  const ParamStore params = init_params(mc);
  RelaxConfig rc;
  rc.remask_stage_count = 0;
  const SemanticMaskGT gt = sample.semantic_gt();
  const auto stages = forward(sample.image_f64(), BoundParams::detached(params), mc, rc,
                              &gt, ForwardMode::kTrain);
  for (const auto& st : stages) {
    for (std::size_t i = 0; i < st.m_pan.numel(); ++i) {
      EXPECT_EQ(st.m_pan.data[i], st.m_pan_relaxed.data[i]);
    }
  }
}

TEST(Model, EncoderGradientMatchesFiniteDifferences) {
  ModelConfig mc = tiny_cfg();
  const PanopticSample sample = generate(7, scene_for(mc));
  ParamStore params = init_params(mc);
  const std::vector<double> image = sample.image_f64();

  // Check d sum(pixel_feats) / d enc.patch.w by re-running the encoder
  // with a perturbed copy of that one tensor.
  Tape tape;
  BoundParams bound = BoundParams::attach(tape, params);
  const EncodedImage enc = encode(image, bound, mc, false);
  const Gradients g = backward(tape, sum(enc.pixel_feats));
  const Tensor ad = g.at(bound("enc.patch.w"));

  const double eps = 1e-5;
  Tensor& w = params.get("enc.patch.w");
  double max_err = 0.0;
  for (std::size_t i = 0; i < w.numel(); i += 7) {  // sampled components
    const double orig = w.data[i];
    w.data[i] = orig + eps;
    const double fp = sum(encode(image, BoundParams::detached(params), mc, false).pixel_feats)
                          .value();
    w.data[i] = orig - eps;
    const double fm = sum(encode(image, BoundParams::detached(params), mc, false).pixel_feats)
                          .value();
    w.data[i] = orig;
    const double fd = (fp - fm) / (2 * eps);
    max_err = std::max(max_err, std::abs(ad.data[i] - fd) /
                                    std::max(1e-8, std::abs(ad.data[i]) + std::abs(fd)));
  }
  EXPECT_LE(max_err, 1e-6);
}

TEST(Model, AlignedQueryWinsTheMaskLogit) {
  // With an identity mask head, a pixel feature aligned with one of the
  // orthogonal query embeddings maximizes that query's mask logit.
  const ModelConfig mc = tiny_cfg();  // d_q == d_pix == 8
  ParamStore params = init_params(mc);
  Tensor& w = params.get("mask_head.w");
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) w.at(i, j) = i == j ? 1.0 : 0.0;
  for (auto& v : params.get("mask_head.b").data) v = 0.0;
  const BoundParams bound = BoundParams::detached(params);

  Tensor queries = Tensor::zeros({3, 8});
  queries.at(0, 2) = 1.0;
  queries.at(1, 5) = 1.0;
  queries.at(2, 7) = 1.0;
  Tensor feats = Tensor::zeros({mc.hw(), 8});
  feats.at(0, 5) = 4.0;  // aligned with query 1

  const StageOutput so = heads(queries, feats, Tensor(), false, bound, mc);
  EXPECT_GT(so.m_pan.at(0, 1), so.m_pan.at(0, 0));
  EXPECT_GT(so.m_pan.at(0, 1), so.m_pan.at(0, 2));
}

TEST(Model, GtGateRequiresGroundTruth) {
  const ModelConfig mc = tiny_cfg();
  const PanopticSample sample = generate(8, scene_for(mc));
  const ParamStore params = init_params(mc);
  RelaxConfig rc;
  rc.gt_remask_mode = true;
  EXPECT_THROW(forward(sample.image_f64(), BoundParams::detached(params), mc, rc, nullptr,
                       ForwardMode::kTrain),
               TensorError);
  const SemanticMaskGT gt = sample.semantic_gt();
  const auto stages = forward(sample.image_f64(), BoundParams::detached(params), mc, rc, &gt,
                              ForwardMode::kTrain);
  for (const auto& st : stages) {
    EXPECT_TRUE(st.skip_sem_loss);
    EXPECT_FALSE(st.has_sem());
  }
}

}  // namespace
}  // namespace remax
