#include <gtest/gtest.h>

#include "axai/report.hpp"

using namespace axai;

namespace {

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("axai_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

} // namespace

TEST(DecileBands, RampAndConstantMaps) {
  ExplanationMap ramp(10, 10);
  for (std::size_t i = 0; i < 100; ++i) ramp.data[i] = static_cast<float>(i);
  const auto b = decile_bands(ramp);
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(b[i], static_cast<int>(i / 10)) << i;
  const ExplanationMap flat(10, 10, 0.5f);
  EXPECT_EQ(decile_bands(flat), b);
}

TEST(DecileBands, EachBandHoldsATenth) {
  Rng rng(3);
  ExplanationMap m(20, 30);
  for (auto& v : m.data) v = static_cast<float>(rng.uniform_int(0, 5));
  const auto b = decile_bands(m);
  std::vector<int> count(10, 0);
  for (int v : b) ++count[v];
  for (int c : count) EXPECT_EQ(c, 60);
}

TEST(Render, DecileBandLuminance) {
  ExplanationMap ramp(10, 10);
  for (std::size_t i = 0; i < 100; ++i) ramp.data[i] = static_cast<float>(i);
  const auto img = render_decile_bands(ramp);
  EXPECT_EQ(img.data[0], to_byte(0.1f));
  EXPECT_EQ(img.data[99], 255);
  const Image bg(10, 10, 1, 0.0f);
  EXPECT_EQ(render_decile_bands(ramp, &bg).data[99], to_byte(0.5f));
}

TEST(Render, HeatmapEndpoints) {
  ExplanationMap m(1, 2);
  m.data = {0.0f, 2.0f};
  const auto h = render_heatmap(m);
  ASSERT_EQ(h.channels, 3u);
  EXPECT_EQ(std::vector<std::uint8_t>(h.data.begin(), h.data.begin() + 3), (std::vector<std::uint8_t>{0, 0, 0}));
  EXPECT_EQ(std::vector<std::uint8_t>(h.data.begin() + 3, h.data.end()), (std::vector<std::uint8_t>{255, 255, 255}));
}

TEST(RegionDensity, HandExample) {
  ExplanationMap m(4, 4, 1.0f);
  m.at(1, 1) = 9.0f;
  const auto d = region_density(m, Circle{1.0, 1.0, 0.5});
  EXPECT_DOUBLE_EQ(d.inside_mean, 9.0);
  EXPECT_DOUBLE_EQ(d.outside_mean, 1.0);
  EXPECT_DOUBLE_EQ(d.ratio(), 9.0);
  EXPECT_TRUE(d.argmax_inside);
  EXPECT_EQ(d.argmax_x, 1u);
  EXPECT_THROW(region_density(m, Circle{1.0, 1.0, 100.0}), ContractError);
}

TEST(FloatMap, HeaderSizeAndRoundTrip) {
  Image img(2, 2, 1);
  img.data = {0.1f, -2.5f, 3.0e-20f, 7.0f};
  const auto bytes = encode_float_map(img);
  EXPECT_EQ(bytes.size(), 32u);
  EXPECT_EQ(bytes.substr(0, 4), "AXF1");
  EXPECT_EQ(decode_float_map(bytes), img);
}

TEST(FloatMap, CorruptInputsRejected) {
  Image img(2, 2, 1, 0.5f);
  auto bytes = encode_float_map(img);
  auto bad = bytes;
  bad[3] = '0';
  try {
    decode_float_map(bad, "x.axf");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte offset 0"), std::string::npos);
  }
  EXPECT_THROW(decode_float_map(bytes.substr(0, 10)), FormatError);
  EXPECT_THROW(decode_float_map(bytes.substr(0, 30)), FormatError);
  EXPECT_THROW(decode_float_map(bytes + "z"), FormatError);
}

TEST(Pnm, RoundTrip) {
  const auto dir = temp_dir("pnm");
  Image img(3, 2, 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(i) / 17.0f;
  write_pnm(quantize(img), dir / "a.ppm");
  const auto back = read_image(dir / "a.ppm");
  ASSERT_TRUE(back.same_shape(img));
  for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 0.5 / 255.0 + 1e-6);
  fs::remove_all(dir);
}

TEST(Summary, EmptyDirectoryNamesFirstMissingArtifact) {
  const auto dir = temp_dir("summary");
  try {
    summarize_run(dir);
    FAIL();
  } catch (const PrerequisiteError& e) {
    EXPECT_NE(std::string(e.what()).find("data/manifest.csv"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(Summary, RequiredArtifactsOrder) {
  const auto r = required_artifacts({"a", "b"});
  EXPECT_EQ(r.front(), "data/manifest.csv");
  EXPECT_EQ(r[4], "global/label_a.axf");
  EXPECT_EQ(r.back(), "peppr/curves.csv");
}
