#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "axai/aggregate.hpp"

using namespace axai;

namespace {

std::vector<ExplanationMap> random_maps(Rng& rng, std::size_t n, std::size_t h, std::size_t w) {
  std::vector<ExplanationMap> maps;
  for (std::size_t i = 0; i < n; ++i) {
    ExplanationMap m(h, w);
    for (auto& v : m.data) v = static_cast<float>(rng.uniform());
    maps.push_back(m);
  }
  return maps;
}

bool close(double a, double b, double rel) { return std::abs(a - b) <= rel * std::max(std::abs(b), 1e-30); }

SampleRecord record(const std::string& id, Split s, std::vector<bool> labels) {
  return {id, id, Laterality::Left, std::move(labels), s, "images/" + id + ".axf"};
}

} // namespace

TEST(LabelGlobal, MatchesWideOracle) {
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform_int(0, 29));
    const std::size_t h = 2 + static_cast<std::size_t>(rng.uniform_int(0, 10));
    const std::size_t w = 2 + static_cast<std::size_t>(rng.uniform_int(0, 10));
    const auto maps = random_maps(rng, n, h, w);
    std::vector<double> p(n);
    for (auto& v : p) v = rng.uniform(0.01, 1.0);
    const auto g = label_global(maps, p);
    EXPECT_EQ(g.n_positives, n);
    for (std::size_t k = 0; k < h * w; ++k) {
      long double acc = 0.0L;
      for (std::size_t i = 0; i < n; ++i) acc += static_cast<long double>(p[i]) * maps[i].data[k];
      const double expected = static_cast<double>(acc / static_cast<long double>(n));
      ASSERT_TRUE(close(g.map.data[k], expected, 1e-6)) << trial << " " << k;
    }
  }
}

TEST(LabelGlobal, PermutationInvariant) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform_int(0, 20));
    auto maps = random_maps(rng, n, 6, 5);
    std::vector<double> p(n);
    for (auto& v : p) v = rng.uniform();
    const auto a = label_global(maps, p);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(perm);
    std::vector<ExplanationMap> maps2;
    std::vector<double> p2;
    for (auto i : perm) {
      maps2.push_back(maps[i]);
      p2.push_back(p[i]);
    }
    const auto b = label_global(maps2, p2);
    for (std::size_t k = 0; k < 30; ++k) ASSERT_TRUE(close(b.map.data[k], a.map.data[k], 1e-6));
  }
}

TEST(LabelGlobal, HandExample) {
  ExplanationMap a(1, 2), b(1, 2);
  a.data = {1.0f, 0.0f};
  b.data = {0.5f, 1.0f};
  const std::vector<ExplanationMap> maps{a, b};
  const std::vector<double> p{0.8, 0.4};
  const auto g = label_global(maps, p, 2);
  EXPECT_FLOAT_EQ(g.map.data[0], (0.8f + 0.2f) / 2.0f);
  EXPECT_FLOAT_EQ(g.map.data[1], 0.4f / 2.0f);
  EXPECT_EQ(g.label, 2u);
  EXPECT_DOUBLE_EQ(g.weight_sum, 1.2);
}

TEST(LabelGlobal, Errors) {
  Rng rng(1);
  const auto maps = random_maps(rng, 2, 3, 3);
  EXPECT_THROW(label_global(std::span<const ExplanationMap>{}, std::span<const double>{}), EmptyInputError);
  const std::vector<double> one{0.5};
  EXPECT_THROW(label_global(maps, one), ContractError);
  const std::vector<double> zeros{0.0, 0.0};
  EXPECT_THROW(label_global(maps, zeros), DegenerateInputError);
  const std::vector<double> bad{0.5, 1.5};
  EXPECT_THROW(label_global(maps, bad), ContractError);
  auto mixed = maps;
  mixed[1] = ExplanationMap(3, 4);
  const std::vector<double> p{0.5, 0.5};
  EXPECT_THROW(label_global(mixed, p), ContractError);
}

TEST(OverallGlobal, MeanOfLabelMaps) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t L = 1 + static_cast<std::size_t>(rng.uniform_int(0, 4));
    const auto maps = random_maps(rng, L, 4, 7);
    const auto o = overall_global(maps);
    EXPECT_EQ(o.n_labels, L);
    for (std::size_t k = 0; k < 28; ++k) {
      long double acc = 0.0L;
      for (const auto& m : maps) acc += m.data[k];
      ASSERT_TRUE(close(o.map.data[k], static_cast<double>(acc / static_cast<long double>(L)), 1e-6));
    }
    auto reversed = maps;
    std::reverse(reversed.begin(), reversed.end());
    const auto r = overall_global(reversed);
    for (std::size_t k = 0; k < 28; ++k) ASSERT_TRUE(close(r.map.data[k], o.map.data[k], 1e-6));
  }
  EXPECT_THROW(overall_global(std::span<const ExplanationMap>{}), EmptyInputError);
}

TEST(AggregationWeights, UniformIgnoresProbabilities) {
  std::vector<SampleExplanation> s(3);
  s[0].probability = 0.1;
  s[1].probability = 0.5;
  s[2].probability = 0.9;
  EXPECT_EQ(aggregation_weights(s, Weighting::Uniform), (std::vector<double>{1.0, 1.0, 1.0}));
  EXPECT_EQ(aggregation_weights(s, Weighting::Probability), (std::vector<double>{0.1, 0.5, 0.9}));
}

TEST(SelectPositives, GroundTruthInManifestOrder) {
  DatasetManifest m;
  m.records = {record("a", Split::Val, {true, false}), record("b", Split::Test, {true, true}),
               record("c", Split::Val, {false, false}), record("d", Split::Val, {true, false})};
  const auto pos = select_positives(m, Split::Val, 0);
  ASSERT_EQ(pos.size(), 2u);
  EXPECT_EQ(pos[0]->sample_id, "a");
  EXPECT_EQ(pos[1]->sample_id, "d");
  EXPECT_THROW(select_positives(m, Split::Val, 1), EmptyInputError);
  EXPECT_THROW(select_positives(m, Split::Train, 0), ContractError);
  EXPECT_EQ(select_positives(m, Split::Test, 1).size(), 1u);
}
