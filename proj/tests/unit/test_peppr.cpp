#include <gtest/gtest.h>

#include <cmath>

#include "axai/peppr.hpp"

using namespace axai;

namespace {

ExplanationMap random_map(Rng& rng, std::size_t h, std::size_t w, int levels) {
  ExplanationMap m(h, w);
  for (auto& v : m.data) v = static_cast<float>(rng.uniform_int(0, levels)) / static_cast<float>(levels);
  return m;
}

LabeledImages toy_test_set(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  LabeledImages s;
  for (std::size_t i = 0; i < n; ++i) {
    Image img(8, 8, 1);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    s.images.push_back(img);
    s.labels.push_back({i % 2 == 0});
    s.ids.push_back("s" + std::to_string(i));
  }
  return s;
}

ModelParams<double> toy_model() {
  ArchitectureDescriptor a;
  a.height = a.width = 8;
  a.blocks = {{2, 3, 1}};
  a.label_names = {"x"};
  return init_params<double>(a, 3);
}

} // namespace

TEST(QuantileGrid, StepFiveHundredths) {
  const auto g = quantile_grid(0.05);
  ASSERT_EQ(g.size(), 21u);
  EXPECT_EQ(g.front(), 0.0);
  EXPECT_EQ(g.back(), 1.0);
  EXPECT_EQ(g[10], 0.5);
  EXPECT_EQ(quantile_grid(0.3), (std::vector<double>{0.0, 0.3, 0.6, 0.8999999999999999, 1.0}));
  EXPECT_THROW(quantile_grid(0.0), ConfigError);
  EXPECT_THROW(quantile_grid(0.7), ConfigError);
}

TEST(Masks, TwoByTwoExample) {
  ExplanationMap m(2, 2);
  m.data = {1, 2, 3, 4};
  const auto s = quantile_masks(m, 0.25);
  ASSERT_EQ(s.masks.size(), 5u);
  EXPECT_EQ(s.masks[0].retained, (std::vector<unsigned char>{1, 1, 1, 1}));
  EXPECT_EQ(s.masks[1].retained, (std::vector<unsigned char>{0, 1, 1, 1}));
  EXPECT_EQ(s.masks[2].retained, (std::vector<unsigned char>{0, 0, 1, 1}));
  EXPECT_EQ(s.masks[3].retained, (std::vector<unsigned char>{0, 0, 0, 1}));
  EXPECT_EQ(s.masks[4].retained, (std::vector<unsigned char>{0, 0, 0, 0}));
  const auto r = restoration_masks(s);
  EXPECT_EQ(r[1].retained, (std::vector<unsigned char>{1, 0, 0, 0}));
}

TEST(Masks, TiesBrokenByRowMajorIndex) {
  ExplanationMap m(2, 3);
  m.data = {0.5f, 0.2f, 0.5f, 0.2f, 0.5f, 0.9f};
  EXPECT_EQ(importance_order(m), (std::vector<std::size_t>{1, 3, 0, 2, 4, 5}));
  const ExplanationMap flat(3, 3, 0.0f);
  const auto order = importance_order(flat);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(order[i], i);
}

TEST(Masks, NestedExactAndComplementary) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 1 + static_cast<std::size_t>(rng.uniform_int(0, 20));
    const std::size_t w = 1 + static_cast<std::size_t>(rng.uniform_int(0, 20));
    const auto map = random_map(rng, h, w, trial % 2 ? 3 : 1000);
    const auto s = quantile_masks(map, 0.05);
    const auto r = restoration_masks(s);
    const std::size_t n = h * w;
    for (std::size_t q = 0; q < s.masks.size(); ++q) {
      EXPECT_EQ(s.masks[q].count(), retained_count(s.quantiles[q], n));
      for (std::size_t p = 0; p < n; ++p) ASSERT_NE(s.masks[q].retained[p], r[q].retained[p]);
      if (q == 0) continue;
      for (std::size_t p = 0; p < n; ++p) ASSERT_LE(s.masks[q].retained[p], s.masks[q - 1].retained[p]);
    }
  }
}

TEST(ApplyMask, FillModes) {
  Image img(2, 2, 2, 0.25f);
  Image mean(2, 2, 2, 0.75f);
  Mask mask(2, 2, true);
  mask.retained[1] = 0;
  Rng rng(1);
  const auto a = apply_mask(img, mask, FillMode::TrainMean, &mean, rng);
  EXPECT_EQ(a.data, (std::vector<float>{0.25f, 0.25f, 0.75f, 0.75f, 0.25f, 0.25f, 0.25f, 0.25f}));
  Rng r1(5), r2(5), r3(6);
  const auto n1 = apply_mask(img, mask, FillMode::RandomNoise, nullptr, r1);
  const auto n2 = apply_mask(img, mask, FillMode::RandomNoise, nullptr, r2);
  const auto n3 = apply_mask(img, mask, FillMode::RandomNoise, nullptr, r3);
  EXPECT_EQ(n1, n2);
  for (std::size_t k = 0; k < 8; ++k) {
    if (k == 2 || k == 3) {
      EXPECT_NE(n1.data[k], n3.data[k]);
      EXPECT_GE(n1.data[k], 0.0f);
      EXPECT_LT(n1.data[k], 1.0f);
    } else {
      EXPECT_EQ(n1.data[k], n3.data[k]);
    }
  }
  EXPECT_THROW(apply_mask(img, mask, FillMode::TrainMean, nullptr, rng), ConfigError);
  EXPECT_THROW(apply_mask(img, Mask(3, 2, true), FillMode::RandomNoise, nullptr, rng), ContractError);
}

TEST(RetainedImportance, HandExample) {
  ExplanationMap m(1, 4);
  m.data = {0.1f, 0.2f, 0.3f, 0.4f};
  Mask mask(1, 4, true);
  mask.retained[0] = 0;
  mask.retained[1] = 0;
  EXPECT_NEAR(retained_importance(m, mask), 0.7, 1e-7);
  EXPECT_THROW(retained_importance(ExplanationMap(1, 4), mask), DegenerateInputError);
}

TEST(RunPeppr, EndpointsAndDegenerateErasure) {
  const auto params = toy_model();
  const auto test = toy_test_set(40, 2);
  Rng rng(4);
  const auto overall = random_map(rng, 8, 8, 1000);
  const Image mean(8, 8, 1, 0.5f);
  PepprOptions opt;
  opt.fill = FillMode::TrainMean;
  const auto r = run_peppr(params, test, overall, &mean, opt);
  ASSERT_EQ(r.erasure.auc.size(), 21u);
  EXPECT_EQ(r.erasure.auc.front(), r.erasure.baseline_auc);
  EXPECT_EQ(r.restoration.auc.back(), r.restoration.baseline_auc);
  EXPECT_EQ(r.erasure.auc.back()[0], 0.5);
  EXPECT_EQ(r.restoration.auc.front()[0], 0.5);
  EXPECT_NEAR(r.erasure.retained_importance.front(), 1.0, 1e-12);
  EXPECT_EQ(r.erasure.retained_importance.back(), 0.0);
  for (std::size_t q = 0; q < 21; ++q)
    EXPECT_NEAR(r.erasure.retained_importance[q] + r.restoration.retained_importance[q], 1.0, 1e-9);
}

TEST(RunPeppr, NoiseFillIsSeededAndThreadIndependent) {
  const auto params = toy_model();
  const auto test = toy_test_set(30, 3);
  Rng rng(5);
  const auto overall = random_map(rng, 8, 8, 1000);
  PepprOptions opt;
  opt.step = 0.25;
  const auto a = run_peppr(params, test, overall, nullptr, opt);
  opt.threads = 4;
  const auto b = run_peppr(params, test, overall, nullptr, opt);
  EXPECT_EQ(peppr_curves_csv(a, {"x"}), peppr_curves_csv(b, {"x"}));
  EXPECT_EQ(a.erasure.auc.front(), a.erasure.baseline_auc);
  opt.seed = 8;
  const auto c = run_peppr(params, test, overall, nullptr, opt);
  EXPECT_NE(peppr_curves_csv(a, {"x"}), peppr_curves_csv(c, {"x"}));
}

TEST(CurvesCsv, RoundTrip) {
  const auto params = toy_model();
  const auto test = toy_test_set(20, 4);
  Rng rng(6);
  PepprOptions opt;
  opt.step = 0.5;
  const auto r = run_peppr(params, test, random_map(rng, 8, 8, 100), nullptr, opt);
  const auto rows = parse_curves_csv(peppr_curves_csv(r, {"x"}));
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(rows[0].direction, "erasure");
  EXPECT_EQ(rows[3].direction, "restoration");
  EXPECT_EQ(rows[4].quantile, 0.5);
  EXPECT_EQ(rows[2].auc, r.erasure.auc[2][0]);
  EXPECT_THROW(parse_curves_csv("bad\n"), ParseError);
}
