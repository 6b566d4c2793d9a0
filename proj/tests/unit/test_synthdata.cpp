#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

#include "axai/synthdata.hpp"

using namespace axai;

namespace {

SynthConfig small_config(std::size_t subjects = 60) {
  auto c = default_synth_config();
  c.n_subjects = subjects;
  return c;
}

fs::path temp_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("axai_test_" + name);
  fs::remove_all(p);
  return p;
}

} // namespace

TEST(Generate, DeterministicForSeed) {
  const auto c = small_config();
  const auto a = generate_dataset(c, 11);
  const auto b = generate_dataset(c, 11, 3);
  ASSERT_EQ(a.images.size(), b.images.size());
  EXPECT_EQ(manifest_to_csv(a.manifest), manifest_to_csv(b.manifest));
  for (std::size_t i = 0; i < a.images.size(); ++i) EXPECT_EQ(a.images[i], b.images[i]) << i;
  const auto other = generate_dataset(c, 12);
  EXPECT_NE(a.images.front(), other.images.front());
}

TEST(Generate, ValuesWithinUnitInterval) {
  const auto ds = generate_dataset(small_config(), 3);
  for (const auto& img : ds.images)
    for (float v : img.data) {
      ASSERT_TRUE(std::isfinite(v));
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
}

TEST(Generate, ZeroLesionCountsGiveHealthyDataset) {
  auto c = small_config();
  for (auto& l : c.labels) l.count_min = l.count_max = 0;
  const auto ds = generate_dataset(c, 5);
  for (const auto& r : ds.manifest.records)
    for (bool b : r.labels) EXPECT_FALSE(b) << r.sample_id;
}

TEST(Generate, PrevalenceWithinThreePercent) {
  const auto ds = generate_dataset(default_synth_config(), 7);
  const auto& recs = ds.manifest.records;
  ASSERT_GE(recs.size(), 2000u);
  const auto& specs = default_synth_config().labels;
  for (std::size_t l = 0; l < specs.size(); ++l) {
    std::size_t pos = 0;
    for (const auto& r : recs) pos += r.labels[l];
    const double frac = static_cast<double>(pos) / static_cast<double>(recs.size());
    EXPECT_NEAR(frac, specs[l].prevalence, 0.03) << specs[l].name;
  }
}

TEST(Generate, RightEyesStoredMirrored) {
  auto c = small_config(40);
  c.noise_sigma = 0.0;
  for (auto& l : c.labels) l.count_min = l.count_max = 0;
  c.background.landmark_jitter = 0.0;
  const auto ds = generate_dataset(c, 1);
  const Circle disc = disc_zone(c);
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const auto& img = ds.images[i];
    std::size_t best = 0;
    for (std::size_t k = 0; k < img.data.size(); ++k)
      if (img.data[k] > img.data[best]) best = k;
    double x = static_cast<double>(best % img.width), y = static_cast<double>(best / img.width);
    if (ds.manifest.records[i].laterality == Laterality::Right) x = static_cast<double>(img.width) - 1.0 - x;
    EXPECT_TRUE(disc.contains(x, y)) << ds.manifest.records[i].sample_id;
  }
}

TEST(Generate, InvalidConfigRejected) {
  auto c = small_config();
  c.height = 8;
  EXPECT_THROW(generate_dataset(c, 1), ConfigError);
  c = small_config();
  c.co_occurrence_prob = 1.5;
  EXPECT_THROW(generate_dataset(c, 1), ConfigError);
  c = small_config();
  c.labels.clear();
  EXPECT_THROW(generate_dataset(c, 1), ConfigError);
}

TEST(Laterality, LeftIsIdentity) {
  Image img(4, 5, 1);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = static_cast<float>(i);
  EXPECT_EQ(apply_laterality_flip(img, Laterality::Left), img);
}

TEST(Laterality, RightMirrorsColumns) {
  Image img(3, 6, 1);
  img.at(1, 0) = 1.0f;
  const auto out = apply_laterality_flip(img, Laterality::Right);
  EXPECT_EQ(out.at(1, 5), 1.0f);
  EXPECT_EQ(out.at(1, 0), 0.0f);
  EXPECT_EQ(apply_laterality_flip(out, Laterality::Right), img);
}

TEST(Split, SingleSubjectGoesToTrain) {
  DatasetManifest m;
  m.records.push_back({"a_L", "a", Laterality::Left, {true}, Split::Test, "images/a_L.axf"});
  m.records.push_back({"a_R", "a", Laterality::Right, {false}, Split::Test, "images/a_R.axf"});
  const auto s = split_by_subject(m, {}, 1);
  for (const auto& r : s.records) EXPECT_EQ(r.split, Split::Train);
}

TEST(Split, SubjectsNeverStraddleSplits) {
  const auto ds = generate_dataset(small_config(200), 4);
  const auto m = split_by_subject(ds.manifest, {}, 9);
  std::map<std::string, Split> seen;
  for (const auto& r : m.records) {
    auto [it, inserted] = seen.emplace(r.subject_id, r.split);
    if (!inserted) {
      EXPECT_EQ(it->second, r.split) << r.subject_id;
    }
  }
  EXPECT_NO_THROW(check_manifest_invariants(m));
}

TEST(Split, SizesForSingleSampleSubjects) {
  DatasetManifest m;
  for (int i = 0; i < 1000; ++i) {
    const std::string s = "s" + std::to_string(i);
    m.records.push_back({s + "_L", s, Laterality::Left, {false}, Split::Train, "images/" + s + "_L.axf"});
  }
  const auto out = split_by_subject(m, {}, 3);
  const auto n_train = out.in_split(Split::Train).size(), n_val = out.in_split(Split::Val).size(),
             n_test = out.in_split(Split::Test).size();
  EXPECT_GE(n_train, 650u);
  EXPECT_LE(n_train, 750u);
  EXPECT_GE(n_val, 100u);
  EXPECT_LE(n_val, 200u);
  EXPECT_GE(n_test, 100u);
  EXPECT_LE(n_test, 200u);
}

TEST(Split, BadFractionsRejected) {
  DatasetManifest m;
  EXPECT_THROW(split_by_subject(m, {0.5, 0.2, 0.2}, 1), ConfigError);
  EXPECT_THROW(split_by_subject(m, {1.2, -0.1, -0.1}, 1), ConfigError);
}

TEST(Manifest, RoundTrip) {
  const auto ds = generate_dataset(small_config(30), 2);
  const auto m = split_by_subject(ds.manifest, {}, 2);
  const auto dir = temp_dir("manifest");
  save_manifest(m, dir / "manifest.csv");
  const auto back = load_manifest(dir / "manifest.csv");
  EXPECT_EQ(manifest_to_csv(back), manifest_to_csv(m));
  ASSERT_EQ(back.records.size(), m.records.size());
  EXPECT_EQ(back.records[3].labels, m.records[3].labels);
  fs::remove_all(dir);
}

TEST(Manifest, TrailingSpaceInSplitTokenIsAParseError) {
  const std::string text = std::string(kManifestHeader) +
                           "\na_L,a,left,train,0;1,images/a_L.axf\nb_L,b,left,test ,1;0,images/b_L.axf\n";
  try {
    manifest_from_csv(text, "m.csv");
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("m.csv:3"), std::string::npos) << e.what();
  }
}

TEST(Manifest, HeaderOnlyIsEmpty) {
  const auto m = manifest_from_csv(std::string(kManifestHeader) + "\n");
  EXPECT_TRUE(m.records.empty());
}

TEST(Manifest, MalformedRowsRejected) {
  const std::string h = std::string(kManifestHeader) + "\n";
  EXPECT_THROW(manifest_from_csv(h + "a_L,a,up,train,0,images/a.axf\n"), ParseError);
  EXPECT_THROW(manifest_from_csv(h + "a_L,a,left,train,2,images/a.axf\n"), ParseError);
  EXPECT_THROW(manifest_from_csv(h + "a_L,a,left,train\n"), ParseError);
  EXPECT_THROW(manifest_from_csv("wrong,header\n"), ParseError);
}

TEST(MeanImage, SingletonAndPair) {
  Image a(2, 2, 1), b(2, 2, 1);
  a.data = {0.0f, 1.0f, 0.5f, 0.25f};
  b.data = {1.0f, 1.0f, 0.0f, 0.75f};
  const std::vector<Image> one{a};
  EXPECT_EQ(mean_image(one), a);
  const std::vector<Image> two{a, b};
  const auto m = mean_image(two);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(m.data[i], (a.data[i] + b.data[i]) / 2.0f);
  EXPECT_THROW(mean_image(std::span<const Image>{}), EmptyInputError);
}

TEST(MeanImage, ValBrightestPixelInsideDisc) {
  const auto c = default_synth_config();
  const auto ds = generate_dataset(c, 7);
  const auto m = split_by_subject(ds.manifest, {}, 7);
  std::vector<Image> val;
  for (std::size_t i = 0; i < m.records.size(); ++i)
    if (m.records[i].split == Split::Val) val.push_back(apply_laterality_flip(ds.images[i], m.records[i].laterality));
  const auto mean = mean_image(val);
  std::size_t best = 0;
  for (std::size_t k = 0; k < mean.data.size(); ++k)
    if (mean.data[k] > mean.data[best]) best = k;
  EXPECT_TRUE(disc_zone(c).contains(static_cast<double>(best % mean.width), static_cast<double>(best / mean.width)));
}

TEST(MeanImage, FlipControlsDiscMaximaCount) {
  const auto c = default_synth_config();
  const auto ds = generate_dataset(c, 7);
  const auto m = split_by_subject(ds.manifest, {}, 7);
  std::vector<Image> flipped, raw;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    if (m.records[i].split != Split::Val) continue;
    raw.push_back(ds.images[i]);
    flipped.push_back(apply_laterality_flip(ds.images[i], m.records[i].laterality));
  }
  const Circle fov = field_of_view(c);
  EXPECT_EQ(count_bright_maxima(mean_image(flipped), fov), 1u);
  EXPECT_EQ(count_bright_maxima(mean_image(raw), fov), 2u);
}

TEST(SynthConfigText, RoundTrip) {
  auto c = default_synth_config();
  c.noise_sigma = 0.1234567890123;
  c.labels[1].scatter_fraction = 0.77;
  const auto text = synth_config_to_text(c, 99);
  const auto back = synth_config_from_text(text);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(synth_config_to_text(back.config, 99), text);
  EXPECT_THROW(synth_config_from_text("seed=1\n"), ParseError);
}

TEST(WriteDataset, ImagesReadBackBitExact) {
  const auto ds = generate_dataset(small_config(10), 8);
  const auto m = split_by_subject(ds.manifest, {}, 8);
  const auto dir = temp_dir("dataset");
  write_dataset(ds, m, dir);
  for (std::size_t i = 0; i < m.records.size(); ++i)
    EXPECT_EQ(load_sample_image(m.records[i], dir, false), ds.images[i]);
  fs::remove_all(dir);
}
