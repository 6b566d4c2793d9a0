#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "axai/gradcam.hpp"

using namespace axai;

namespace {

ArchitectureDescriptor pointwise_arch() {
  ArchitectureDescriptor a;
  a.height = a.width = 8;
  a.blocks = {{1, 1, 1}};
  a.label_names = {"x", "y"};
  return a;
}

Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(h, w, 1);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

} // namespace

TEST(Upsample, TwoByTwoToFourByFour) {
  const std::vector<double> src{1.0, 3.0, 5.0, 13.0};
  const auto out = upsample_bilinear(src, 2, 2, 4, 4);
  const double w[4][2] = {{1.0, 0.0}, {0.75, 0.25}, {0.25, 0.75}, {0.0, 1.0}};
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) {
      double expected = 0.0;
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) expected += w[y][i] * w[x][j] * src[i * 2 + j];
      EXPECT_DOUBLE_EQ(out[y * 4 + x], expected) << y << "," << x;
    }
}

TEST(Upsample, ConstantStaysConstant) {
  const std::vector<double> src(9, 0.3);
  for (double v : upsample_bilinear(src, 3, 3, 64, 64)) EXPECT_EQ(v, 0.3);
  const std::vector<double> one{0.7};
  for (double v : upsample_bilinear(one, 1, 1, 5, 7)) EXPECT_EQ(v, 0.7);
}

TEST(Upsample, SameSizeIsIdentity) {
  const std::vector<double> src{1, 2, 3, 4, 5, 6};
  EXPECT_EQ(upsample_bilinear(src, 2, 3, 2, 3), src);
  EXPECT_THROW(upsample_bilinear(src, 2, 3, 1, 3), ContractError);
}

TEST(GradCam, ZeroHeadGivesZeroMap) {
  const auto arch = pointwise_arch();
  auto p = init_params<double>(arch, 1);
  std::fill(p.head_weight().data.begin(), p.head_weight().data.end(), 0.0);
  const auto m = gradcam(p, random_image(8, 8, 2), 0);
  EXPECT_EQ(m.normalization, Normalization::MaxOne);
  for (float v : m.data) EXPECT_EQ(v, 0.0f);
}

TEST(GradCam, PointwiseClosedForm) {
  const auto arch = pointwise_arch();
  ModelParams<double> p(arch);
  p.conv_weight(0).data = {1.5};
  p.conv_bias(0).data = {-0.4};
  p.head_weight().data = {2.0, -1.0};
  const auto img = random_image(8, 8, 3);
  std::vector<double> a(64);
  for (std::size_t i = 0; i < 64; ++i) a[i] = std::max(0.0, 1.5 * img.data[i] - 0.4);
  const double peak = *std::max_element(a.begin(), a.end());
  const auto raw = gradcam(p, img, 0, Normalization::Raw);
  const auto norm = gradcam(p, img, 0);
  for (std::size_t i = 0; i < 64; ++i) {
    EXPECT_NEAR(raw.data[i], 2.0 / 64.0 * a[i], 1e-7);
    EXPECT_NEAR(norm.data[i], a[i] / peak, 1e-6);
  }
  for (float v : gradcam(p, img, 1).data) EXPECT_EQ(v, 0.0f);
}

TEST(GradCam, InvariantToPositiveHeadScaling) {
  ArchitectureDescriptor arch;
  arch.height = arch.width = 32;
  arch.blocks = {{4, 3, 1}, {6, 3, 1}};
  arch.label_names = {"a", "b"};
  auto p = init_params<double>(arch, 5);
  const auto img = random_image(32, 32, 6);
  const auto before = gradcam(p, img, 1);
  for (std::size_t c = 0; c < 6; ++c) p.head_weight().data[6 + c] *= 3.5;
  p.head_bias().data[1] = 2.0;
  const auto after = gradcam(p, img, 1);
  for (std::size_t i = 0; i < before.data.size(); ++i) EXPECT_NEAR(after.data[i], before.data[i], 1e-6);
}

TEST(GradCam, MapsAreNonNegativeAndPeakAtOne) {
  ArchitectureDescriptor arch;
  arch.height = arch.width = 32;
  arch.blocks = {{4, 3, 1}, {6, 3, 1}};
  arch.label_names = {"a", "b"};
  const auto p = init_params<float>(arch, 7);
  const std::size_t labels[] = {0, 1};
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto out = gradcam_labels(p, random_image(32, 32, 100 + s), labels);
    ASSERT_EQ(out.size(), 2u);
    for (const auto& e : out) {
      EXPECT_EQ(e.map.height, 32u);
      EXPECT_GT(e.probability, 0.0);
      EXPECT_LT(e.probability, 1.0);
      float peak = 0.0f;
      for (float v : e.map.data) {
        ASSERT_TRUE(std::isfinite(v));
        ASSERT_GE(v, 0.0f);
        peak = std::max(peak, v);
      }
      EXPECT_TRUE(peak == 0.0f || peak == 1.0f);
    }
  }
}

TEST(GradCam, LabelOutOfRangeRejected) {
  const auto p = init_params<double>(pointwise_arch(), 1);
  EXPECT_THROW(gradcam(p, random_image(8, 8, 1), 2), ContractError);
}
