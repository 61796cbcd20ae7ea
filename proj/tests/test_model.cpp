#include <gtest/gtest.h>

#include <numeric>

#include "csrnet/bench.hpp"
#include "csrnet/gradcheck_suite.hpp"
#include "csrnet/model.hpp"

using namespace csrnet;

namespace {

ModelConfig desk(Variant v, int stages = 3) { return ModelConfig{v, stages, 8, 0.125, 5, true, true, true}; }

template <typename T>
std::unique_ptr<CsrNet<T>> build(const ModelConfig& cfg, std::uint64_t seed = 0) {
  auto m = std::make_unique<CsrNet<T>>(cfg);
  auto p = m->params();
  nn::init_params(p, seed);
  return m;
}

}  // namespace

TEST(Model, ModuleCounts) {
  const std::pair<Variant, std::size_t> expected[] = {{Variant::heavy, 6}, {Variant::medium, 4}, {Variant::light, 3}};
  for (auto [v, srms] : expected) {
    CsrNet<float> m(desk(v));
    EXPECT_EQ(m.srm_count(), srms) << to_string(v);
    EXPECT_EQ(m.pyramid_count(), 3u);
    EXPECT_EQ(m.context_path(1), 4);
    EXPECT_EQ(m.context_path(2), 3);
    EXPECT_EQ(m.context_path(3), 2);
  }
}

TEST(Model, HeavyTopology) {
  CsrNet<float> m(desk(Variant::heavy));
  for (int stage = 1; stage <= 3; ++stage)
    for (int path = 1; path < m.context_path(stage); ++path) EXPECT_NE(m.srm(stage, path), nullptr);
  EXPECT_EQ(m.srm(2, 3), nullptr);
}

TEST(Model, MediumDropsPathOneFusionOfFirstTwoStages) {
  CsrNet<float> m(desk(Variant::medium));
  EXPECT_EQ(m.srm(1, 1), nullptr);
  EXPECT_EQ(m.srm(2, 1), nullptr);
  EXPECT_NE(m.srm(1, 2), nullptr);
  EXPECT_NE(m.srm(1, 3), nullptr);
  EXPECT_NE(m.srm(2, 2), nullptr);
  EXPECT_NE(m.srm(3, 1), nullptr);
}

TEST(Model, LightHasOneFusionPerStage) {
  CsrNet<float> m(desk(Variant::light));
  EXPECT_NE(m.srm(1, 3), nullptr);
  EXPECT_NE(m.srm(2, 2), nullptr);
  EXPECT_NE(m.srm(3, 1), nullptr);
  EXPECT_EQ(m.srm(1, 2), nullptr);
  EXPECT_EQ(m.srm(1, 1), nullptr);
  EXPECT_EQ(m.srm(2, 1), nullptr);
  // Stage-1 output sits on the 16x path and feeds the stage-2 context block.
  EXPECT_EQ(m.context_path(2), 3);
  const auto p = m.params();
  EXPECT_EQ(p.at("stage2.context.spfm.entry.conv.weight")->value.c(), 8u);
  EXPECT_EQ(p.at("stage1.context.spfm.entry.conv.weight")->value.c(), 64u);
}

TEST(Model, ParameterCountDecreasesHeavyToLight) {
  for (auto [c, mu] : {std::pair<std::size_t, double>{8, 0.125}, {16, 0.25}, {128, 1.0}}) {
    std::size_t counts[3];
    for (int v = 0; v < 3; ++v) {
      CsrNet<float> m(ModelConfig{Variant(v), 3, c, mu, 19, true, true, true});
      counts[v] = nn::count_trainable(m.params());
    }
    EXPECT_GT(counts[0], counts[1]);
    EXPECT_GT(counts[1], counts[2]);
  }
}

TEST(Model, ParameterOrderIsDeterministic) {
  CsrNet<float> a(desk(Variant::medium)), b(desk(Variant::medium));
  std::vector<std::string> ka, kb;
  for (const auto& [k, _] : a.params()) ka.push_back(k);
  for (const auto& [k, _] : b.params()) kb.push_back(k);
  EXPECT_EQ(ka, kb);
  EXPECT_TRUE(std::is_sorted(ka.begin(), ka.end()));
}

TEST(Model, ConfigValidation) {
  EXPECT_THROW(CsrNet<float>(desk(Variant::light, 2)), ConfigError);
  EXPECT_THROW(CsrNet<float>(desk(Variant::medium, 1)), ConfigError);
  EXPECT_THROW(CsrNet<float>(desk(Variant::heavy, 4)), ConfigError);
  auto bad = desk(Variant::heavy);
  bad.c = 2;
  EXPECT_THROW(CsrNet<float>{bad}, ConfigError);
  bad = desk(Variant::heavy);
  bad.mu = 0;
  EXPECT_THROW(CsrNet<float>{bad}, ConfigError);
  EXPECT_THROW(parse_variant("huge"), ConfigError);
  EXPECT_EQ(parse_variant("medium"), Variant::medium);
}

TEST(Model, GoldenShapes) {
  struct Row {
    Variant v;
    int stages;
    std::array<bool, 3> taps;
  };
  const Row rows[] = {{Variant::heavy, 3, {true, true, true}},
                      {Variant::heavy, 2, {true, true, false}},
                      {Variant::heavy, 1, {true, false, false}},
                      {Variant::medium, 3, {false, false, true}},
                      {Variant::light, 3, {false, false, true}}};
  for (const auto& row : rows)
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{32, 32}, {64, 64}, {96, 64}}) {
      auto m = build<float>(desk(row.v, row.stages));
      auto rng = make_rng(h * w);
      const auto out = m->forward(random_uniform<float>(Shape4{2, 3, h, w}, rng, 0.f, 1.f), nn::Mode::train);
      EXPECT_EQ(out.logits.shape(), (Shape4{2, 5, h, w}));
      for (int s = 1; s <= 3; ++s) {
        const auto& tap = out.stages.tap(s);
        ASSERT_EQ(tap.has_value(), row.taps[s - 1]) << to_string(row.v) << row.stages << " tap " << s;
        if (tap) {
          EXPECT_EQ(tap->shape(), (Shape4{2, 8, h / 4, w / 4}));
        }
      }
    }
}

TEST(Model, TruncatedHeadConsumesLastStage) {
  auto m = build<double>(desk(Variant::heavy, 1), 3);
  auto rng = make_rng(1);
  const auto x = random_uniform<double>(Shape4{1, 3, 32, 32}, rng, 0.0, 1.0);
  const auto out = m->forward(x, nn::Mode::train);
  ASSERT_TRUE(out.stages.low_refined.has_value());
  auto p = m->params();
  const auto head = ops::conv2d(*out.stages.low_refined, p.at("head.weight")->value, &p.at("head.bias")->value, 1, 0);
  EXPECT_EQ(out.logits, ops::bilinear_upsample(head, 4));
}

TEST(Model, SpfmAblationKeepsShapes) {
  auto cfg = desk(Variant::light);
  cfg.spfm_enabled = false;
  auto m = build<float>(cfg);
  EXPECT_EQ(m->pyramid_count(), 0u);
  auto rng = make_rng(2);
  const auto out = m->forward(random_uniform<float>(Shape4{1, 3, 64, 32}, rng, 0.f, 1.f), nn::Mode::train);
  EXPECT_EQ(out.logits.shape(), (Shape4{1, 5, 64, 32}));
  EXPECT_EQ(out.stages.high_refined->shape(), (Shape4{1, 8, 16, 8}));
}

TEST(Model, GeometryAndStatsErrors) {
  auto m = build<float>(desk(Variant::light));
  EXPECT_THROW(m->forward(Tensor4<float>(Shape4{1, 3, 48, 32}), nn::Mode::train), GeometryError);
  EXPECT_THROW(m->forward(Tensor4<float>(Shape4{1, 3, 32, 32}), nn::Mode::eval), UninitializedStatsError);
}

TEST(Model, EvalIsDeterministicAndBatchEquivariant) {
  auto m = build<float>(desk(Variant::medium), 5);
  calibrate_batch_norm(*m, Shape4{4, 3, 32, 32}, 1);
  auto rng = make_rng(3);
  const auto x = random_uniform<float>(Shape4{4, 3, 32, 32}, rng, 0.f, 1.f);
  const std::size_t perm[] = {2, 0, 3, 1};
  Tensor4<float> xp(x.shape());
  const std::size_t S = 3 * 32 * 32;
  for (std::size_t i = 0; i < 4; ++i) std::copy(x.sample(perm[i]), x.sample(perm[i]) + S, xp.sample(i));
  const auto y = m->forward(x, nn::Mode::eval).logits;
  EXPECT_EQ(y, m->forward(x, nn::Mode::eval).logits);
  const auto yp = m->forward(xp, nn::Mode::eval).logits;
  const std::size_t L = y.size() / 4;
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_TRUE(std::equal(yp.sample(i), yp.sample(i) + L, y.sample(perm[i]))) << "sample " << i;
}

TEST(Model, EndToEndFiniteDifference) {
  for (const auto& c : gradcheck_cases()) {
    if (!c.name.starts_with("model.")) continue;
    for (std::uint64_t s = 0; s < 2; ++s) EXPECT_LT(c.run(s).max_rel_error, 1e-4) << c.name << " seed " << s;
  }
}

TEST(Model, BackwardCoversEveryTrainableSlot) {
  for (int v = 0; v < 3; ++v) {
    auto m = build<double>(desk(Variant(v)), 7);
    auto p = m->params();
    auto rng = make_rng(v);
    const auto out = m->forward(random_uniform<double>(Shape4{2, 3, 32, 32}, rng, 0.0, 1.0), nn::Mode::train);
    m->backward(random_normal<double>(out.logits.shape(), rng));
    for (const auto& [k, prm] : p) {
      if (!prm->trainable) continue;
      double norm = 0;
      for (double g : prm->grad.values()) norm += g * g;
      EXPECT_GT(norm, 0.0) << to_string(Variant(v)) << " " << k;
    }
  }
}
