#pragma once

// Synthetic aligned modality: a circular field of view with a bright "disc"
// and a dark "fovea" landmark at fixed normalized coordinates, plus three
// lesion types whose spatial signatures differ (tightly localized at the disc,
// disc-centred with retina-wide scatter, quadrant-biased with scatter).
// Also hosts the dataset manifest, subject-level splitting, laterality
// flipping and the mean-image alignment diagnostic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "axai/error.hpp"
#include "axai/image.hpp"
#include "axai/io.hpp"
#include "axai/parallel.hpp"
#include "axai/rng.hpp"

namespace axai {

enum class Laterality { Left, Right };
enum class Split { Train, Val, Test };

inline const char* to_string(Laterality l) { return l == Laterality::Left ? "left" : "right"; }

inline const char* to_string(Split s) {
  switch (s) {
  case Split::Train: return "train";
  case Split::Val: return "val";
  case Split::Test: return "test";
  }
  return "?";
}

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  return std::nullopt;
}

inline std::optional<Laterality> parse_laterality(std::string_view s) {
  if (s == "left") return Laterality::Left;
  if (s == "right") return Laterality::Right;
  return std::nullopt;
}

struct SampleRecord {
  std::string sample_id;
  std::string subject_id;
  Laterality laterality = Laterality::Left;
  std::vector<bool> labels;
  Split split = Split::Train;
  std::string image_path; // relative to the manifest's directory

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

struct DatasetManifest {
  std::vector<SampleRecord> records;

  std::size_t label_count() const { return records.empty() ? 0 : records.front().labels.size(); }

  std::vector<const SampleRecord*> in_split(Split split) const {
    std::vector<const SampleRecord*> out;
    for (const auto& r : records)
      if (r.split == split) out.push_back(&r);
    return out;
  }

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

// Throws if any subject appears in more than one split or a sample id repeats.
inline void check_manifest_invariants(const DatasetManifest& m) {
  std::unordered_set<std::string> ids;
  std::unordered_map<std::string, Split> subject_split;
  const std::size_t n_labels = m.label_count();
  for (const auto& r : m.records) {
    if (!ids.insert(r.sample_id).second) throw ContractError("duplicate sample_id '" + r.sample_id + "'");
    if (r.labels.size() != n_labels)
      throw ContractError("sample '" + r.sample_id + "' has " + std::to_string(r.labels.size()) +
                          " labels, expected " + std::to_string(n_labels));
    auto [it, inserted] = subject_split.emplace(r.subject_id, r.split);
    if (!inserted && it->second != r.split)
      throw ContractError("subject '" + r.subject_id + "' straddles splits " + to_string(it->second) + " and " +
                          to_string(r.split));
  }
}

// ---------------------------------------------------------------------------
// Configuration

enum class Placement { TightLandmark, LandmarkPlusScatter, QuadrantBiased };

struct Point2 {
  double x = 0.0; // normalized, 0 = left edge
  double y = 0.0; // normalized, 0 = top edge
};

struct LesionSpec {
  std::string name;
  Placement placement = Placement::TightLandmark;
  Point2 landmark_center;
  double spread_sigma = 0.03;    // normalized to min(H, W)
  double scatter_fraction = 0.0; // share of lesions placed uniformly over the field
  int count_min = 1;
  int count_max = 2;
  double intensity = -0.3; // signed contrast added at the lesion centre
  double radius_min = 2.0; // pixels at 64x64; scaled with image size
  double radius_max = 3.0;
  double prevalence = 0.3;
};

struct LandmarkGeometry {
  Point2 field_center{0.5, 0.5};
  double field_radius = 0.48; // normalized to min(H, W)
  double base_intensity = 0.30;
  double vignette = 0.25; // relative darkening towards the field edge
  Point2 disc_center{0.30, 0.52};
  double disc_sigma = 0.045;
  double disc_intensity = 0.35;
  Point2 fovea_center{0.55, 0.52};
  double fovea_sigma = 0.04;
  double fovea_intensity = -0.12;
  double landmark_jitter = 0.01; // normalized standard deviation
  double brightness_jitter = 0.0; // half-width of the uniform per-image gain
};

struct SynthConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t channels = 1;
  std::size_t n_subjects = 1800;
  double second_eye_prob = 0.7;
  std::vector<LesionSpec> labels;
  LandmarkGeometry background;
  double co_occurrence_prob = 0.3;
  double noise_sigma = 0.03;
};

inline std::vector<LesionSpec> default_lesion_specs() {
  const LandmarkGeometry g;
  LesionSpec glaucoma;
  glaucoma.name = "glaucoma";
  glaucoma.placement = Placement::TightLandmark;
  glaucoma.landmark_center = g.disc_center;
  glaucoma.spread_sigma = 0.025;
  glaucoma.scatter_fraction = 0.0;
  glaucoma.count_min = 1;
  glaucoma.count_max = 2;
  glaucoma.intensity = 0.30;
  glaucoma.radius_min = 3.0;
  glaucoma.radius_max = 4.0;
  glaucoma.prevalence = 0.30;

  LesionSpec retinopathy;
  retinopathy.name = "retinopathy";
  retinopathy.placement = Placement::LandmarkPlusScatter;
  retinopathy.landmark_center = g.disc_center;
  retinopathy.spread_sigma = 0.08;
  retinopathy.scatter_fraction = 0.5;
  retinopathy.count_min = 4;
  retinopathy.count_max = 8;
  retinopathy.intensity = 0.30;
  retinopathy.radius_min = 2.0;
  retinopathy.radius_max = 3.0;
  retinopathy.prevalence = 0.30;

  LesionSpec detachment;
  detachment.name = "detachment";
  detachment.placement = Placement::QuadrantBiased;
  detachment.landmark_center = {0.70, 0.28};
  detachment.spread_sigma = 0.08;
  detachment.scatter_fraction = 0.3;
  detachment.count_min = 1;
  detachment.count_max = 3;
  detachment.intensity = 0.30;
  detachment.radius_min = 3.0;
  detachment.radius_max = 5.0;
  detachment.prevalence = 0.25;
  return {glaucoma, retinopathy, detachment};
}

inline SynthConfig default_synth_config() {
  SynthConfig c;
  c.labels = default_lesion_specs();
  return c;
}

inline void validate(const SynthConfig& c) {
  auto prob = [](double p, const std::string& what) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(what + " must lie in [0,1], got " + std::to_string(p));
  };
  if (c.height < 16 || c.width < 16)
    throw ConfigError("image size must be at least 16x16, got " + std::to_string(c.height) + "x" +
                      std::to_string(c.width));
  if (c.channels < 1) throw ConfigError("image needs at least one channel");
  if (c.labels.empty()) throw ConfigError("at least one label is required");
  prob(c.co_occurrence_prob, "co_occurrence_prob");
  prob(c.second_eye_prob, "second_eye_prob");
  if (!(c.noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");
  if (!(c.background.field_radius > 0.0)) throw ConfigError("field_radius must be positive");
  double prevalence_sum = 0.0;
  std::set<std::string> names;
  for (const auto& l : c.labels) {
    if (l.name.empty() || l.name.find_first_of(",;/ \t\n") != std::string::npos)
      throw ConfigError("invalid label name '" + l.name + "'");
    if (!names.insert(l.name).second) throw ConfigError("duplicate label name '" + l.name + "'");
    prob(l.prevalence, l.name + ".prevalence");
    prob(l.scatter_fraction, l.name + ".scatter_fraction");
    if (l.count_min < 0 || l.count_max < l.count_min)
      throw ConfigError(l.name + ": lesion count range must satisfy 0 <= min <= max");
    if (!(l.radius_min > 0.0) || l.radius_max < l.radius_min)
      throw ConfigError(l.name + ": lesion radius range must satisfy 0 < min <= max");
    if (!(l.spread_sigma >= 0.0)) throw ConfigError(l.name + ": spread_sigma must be non-negative");
    prevalence_sum += l.prevalence;
  }
  if (c.co_occurrence_prob < 1.0 && prevalence_sum > 1.0 + 1e-12)
    throw ConfigError("label prevalences sum to " + std::to_string(prevalence_sum) +
                      " > 1, which exclusive label draws cannot realize");
}

// ---------------------------------------------------------------------------
// Geometry helpers (pixel units, left-eye frame)

struct Circle {
  double cx = 0.0;
  double cy = 0.0;
  double r = 0.0;

  bool contains(double x, double y) const { return (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r; }
};

inline double scale_px(const SynthConfig& c) { return static_cast<double>(std::min(c.height, c.width)); }

inline double size_factor(const SynthConfig& c) { return scale_px(c) / 64.0; }

inline double to_px_x(const SynthConfig& c, double x) { return x * static_cast<double>(c.width) - 0.5; }
inline double to_px_y(const SynthConfig& c, double y) { return y * static_cast<double>(c.height) - 0.5; }

inline Circle field_of_view(const SynthConfig& c) {
  return {to_px_x(c, c.background.field_center.x), to_px_y(c, c.background.field_center.y),
          c.background.field_radius * scale_px(c)};
}

inline Circle disc_zone(const SynthConfig& c) {
  return {to_px_x(c, c.background.disc_center.x), to_px_y(c, c.background.disc_center.y),
          2.0 * c.background.disc_sigma * scale_px(c)};
}

// Region where a landmark-anchored lesion type concentrates: three spread
// sigmas plus the largest lesion radius around its landmark.
inline Circle lesion_zone(const SynthConfig& c, const LesionSpec& spec) {
  return {to_px_x(c, spec.landmark_center.x), to_px_y(c, spec.landmark_center.y),
          3.0 * spec.spread_sigma * scale_px(c) + spec.radius_max * size_factor(c)};
}

// ---------------------------------------------------------------------------
// Laterality

inline Image apply_laterality_flip(const Image& img, Laterality laterality) {
  if (laterality == Laterality::Left) return img;
  Image out(img.height, img.width, img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t ch = 0; ch < img.channels; ++ch) out.at(y, img.width - 1 - x, ch) = img.at(y, x, ch);
  return out;
}

// ---------------------------------------------------------------------------
// Generation

struct GeneratedDataset {
  SynthConfig config;
  DatasetManifest manifest;
  std::vector<Image> images; // as stored: right eyes mirrored
};

namespace detail {

struct Lesion {
  double x, y, radius, intensity;
};

inline bool sample_in_field(const Circle& fov, Rng& rng, double& x, double& y) {
  const double r = 0.92 * fov.r * std::sqrt(rng.uniform());
  const double a = 2.0 * std::numbers::pi * rng.uniform();
  x = fov.cx + r * std::cos(a);
  y = fov.cy + r * std::sin(a);
  return true;
}

inline void place_lesions(const SynthConfig& c, const LesionSpec& spec, Rng& rng, std::vector<Lesion>& out) {
  const Circle fov = field_of_view(c);
  const int count = static_cast<int>(rng.uniform_int(std::max(1, spec.count_min), spec.count_max));
  const double sigma_px = spec.spread_sigma * scale_px(c);
  const double cx = to_px_x(c, spec.landmark_center.x);
  const double cy = to_px_y(c, spec.landmark_center.y);
  for (int i = 0; i < count; ++i) {
    double x = cx, y = cy;
    const bool scatter = rng.bernoulli(spec.scatter_fraction);
    if (scatter) {
      sample_in_field(fov, rng, x, y);
    } else {
      for (int attempt = 0; attempt < 16; ++attempt) {
        x = rng.normal(cx, sigma_px);
        y = rng.normal(cy, sigma_px);
        if (fov.contains(x, y)) break;
        x = cx;
        y = cy;
      }
    }
    const double radius = rng.uniform(spec.radius_min, spec.radius_max) * size_factor(c);
    out.push_back({x, y, radius, spec.intensity});
  }
}

inline std::vector<bool> draw_labels(const SynthConfig& c, Rng& rng) {
  std::vector<bool> labels(c.labels.size(), false);
  if (rng.bernoulli(c.co_occurrence_prob)) {
    for (std::size_t l = 0; l < c.labels.size(); ++l) labels[l] = rng.bernoulli(c.labels[l].prevalence);
  } else {
    const double u = rng.uniform();
    double cumulative = 0.0;
    for (std::size_t l = 0; l < c.labels.size(); ++l) {
      cumulative += c.labels[l].prevalence;
      if (u < cumulative) {
        labels[l] = true;
        break;
      }
    }
  }
  // A lesion type that cannot produce lesions cannot be positive.
  for (std::size_t l = 0; l < c.labels.size(); ++l)
    if (c.labels[l].count_max < 1) labels[l] = false;
  return labels;
}

inline Image render_left_frame(const SynthConfig& c, const std::vector<Lesion>& lesions, Rng& rng) {
  const auto& g = c.background;
  const Circle fov = field_of_view(c);
  const double s = scale_px(c);
  const double jx = rng.normal(0.0, g.landmark_jitter * s);
  const double jy = rng.normal(0.0, g.landmark_jitter * s);
  const double brightness = rng.uniform(1.0 - g.brightness_jitter, 1.0 + g.brightness_jitter);
  const double disc_x = to_px_x(c, g.disc_center.x) + jx, disc_y = to_px_y(c, g.disc_center.y) + jy;
  const double fov_x = to_px_x(c, g.fovea_center.x) + jx, fov_y = to_px_y(c, g.fovea_center.y) + jy;
  const double disc_s2 = 2.0 * std::pow(g.disc_sigma * s, 2);
  const double fovea_s2 = 2.0 * std::pow(g.fovea_sigma * s, 2);

  Image img(c.height, c.width, c.channels);
  for (std::size_t y = 0; y < c.height; ++y) {
    for (std::size_t x = 0; x < c.width; ++x) {
      const double px = static_cast<double>(x), py = static_cast<double>(y);
      double v = 0.0;
      if (fov.contains(px, py)) {
        const double d2 = ((px - fov.cx) * (px - fov.cx) + (py - fov.cy) * (py - fov.cy)) / (fov.r * fov.r);
        v = g.base_intensity * brightness * (1.0 - g.vignette * d2);
        v += g.disc_intensity * std::exp(-((px - disc_x) * (px - disc_x) + (py - disc_y) * (py - disc_y)) / disc_s2);
        v += g.fovea_intensity * std::exp(-((px - fov_x) * (px - fov_x) + (py - fov_y) * (py - fov_y)) / fovea_s2);
        for (const auto& les : lesions) {
          const double d2l = (px - les.x) * (px - les.x) + (py - les.y) * (py - les.y);
          v += les.intensity * std::exp(-d2l / (les.radius * les.radius));
        }
      }
      for (std::size_t ch = 0; ch < c.channels; ++ch) {
        const double noisy = v + (c.noise_sigma > 0.0 ? rng.normal(0.0, c.noise_sigma) : 0.0);
        img.at(y, x, ch) = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
      }
    }
  }
  return img;
}

inline std::string pad_index(std::size_t i, int width) {
  std::string s = std::to_string(i);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

} // namespace detail

// Pure function of (config, seed). Every sample draws from its own stream
// derived from (seed, sample index), so generation parallelizes freely.
inline GeneratedDataset generate_dataset(const SynthConfig& config, std::uint64_t seed, std::size_t threads = 1) {
  validate(config);
  GeneratedDataset ds;
  ds.config = config;
  for (std::size_t s = 0; s < config.n_subjects; ++s) {
    Rng subject_rng(derive_seed(seed, stream::synth, hash_string("subject"), s));
    const Laterality first = subject_rng.bernoulli(0.5) ? Laterality::Left : Laterality::Right;
    const bool both = subject_rng.bernoulli(config.second_eye_prob);
    const std::string subject_id = "subj" + detail::pad_index(s, 5);
    auto add = [&](Laterality lat) {
      SampleRecord r;
      r.subject_id = subject_id;
      r.sample_id = subject_id + (lat == Laterality::Left ? "_L" : "_R");
      r.laterality = lat;
      r.split = Split::Train;
      r.image_path = "images/" + r.sample_id + ".axf";
      ds.manifest.records.push_back(std::move(r));
    };
    add(first);
    if (both) add(first == Laterality::Left ? Laterality::Right : Laterality::Left);
  }

  ds.images.resize(ds.manifest.records.size());
  parallel_for(ds.manifest.records.size(), threads, [&](std::size_t i) {
    Rng rng(derive_seed(seed, stream::synth, hash_string("sample"), i));
    auto& record = ds.manifest.records[i];
    record.labels = detail::draw_labels(config, rng);
    std::vector<detail::Lesion> lesions;
    for (std::size_t l = 0; l < config.labels.size(); ++l)
      if (record.labels[l]) detail::place_lesions(config, config.labels[l], rng, lesions);
    Image left = detail::render_left_frame(config, lesions, rng);
    ds.images[i] = apply_laterality_flip(left, record.laterality);
  });
  return ds;
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitFractions {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;
};

// Subjects (in first-appearance order) are shuffled and cut into contiguous
// val/test blocks sized by rounding; every remaining subject goes to Train.
inline DatasetManifest split_by_subject(DatasetManifest manifest, SplitFractions f, std::uint64_t seed) {
  for (double v : {f.train, f.val, f.test})
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("split fractions must lie in [0,1]");
  if (std::abs(f.train + f.val + f.test - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1, got " + std::to_string(f.train + f.val + f.test));

  std::vector<std::string> subjects;
  std::unordered_set<std::string> seen;
  for (const auto& r : manifest.records)
    if (seen.insert(r.subject_id).second) subjects.push_back(r.subject_id);

  Rng rng(derive_seed(seed, stream::split));
  rng.shuffle(subjects);

  const double n = static_cast<double>(subjects.size());
  std::size_t n_val = static_cast<std::size_t>(std::llround(f.val * n));
  std::size_t n_test = static_cast<std::size_t>(std::llround(f.test * n));
  n_val = std::min(n_val, subjects.size());
  n_test = std::min(n_test, subjects.size() - n_val);

  std::unordered_map<std::string, Split> assignment;
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    Split s = Split::Train;
    if (i < n_val) s = Split::Val;
    else if (i < n_val + n_test) s = Split::Test;
    assignment[subjects[i]] = s;
  }
  for (auto& r : manifest.records) r.split = assignment.at(r.subject_id);
  return manifest;
}

// ---------------------------------------------------------------------------
// Manifest CSV

inline constexpr std::string_view kManifestHeader = "sample_id,subject_id,laterality,split,labels,image_path";

inline std::string encode_labels(const std::vector<bool>& labels) {
  std::string s;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (i) s.push_back(';');
    s.push_back(labels[i] ? '1' : '0');
  }
  return s;
}

inline std::string manifest_to_csv(const DatasetManifest& m) {
  std::string out(kManifestHeader);
  out.push_back('\n');
  for (const auto& r : m.records) {
    for (const std::string* field : {&r.sample_id, &r.subject_id, &r.image_path})
      if (field->find_first_of(",\n\r") != std::string::npos)
        throw ContractError("manifest field '" + *field + "' contains a separator");
    out += r.sample_id + ',' + r.subject_id + ',' + to_string(r.laterality) + ',' + to_string(r.split) + ',' +
           encode_labels(r.labels) + ',' + r.image_path + '\n';
  }
  return out;
}

inline DatasetManifest manifest_from_csv(const std::string& text, const std::string& origin = "<manifest>") {
  DatasetManifest m;
  std::unordered_set<std::string> ids;
  std::unordered_map<std::string, Split> subject_split;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  std::optional<std::size_t> n_labels;

  auto fail = [&](const std::string& why) -> ParseError {
    return ParseError(origin + ":" + std::to_string(line_no) + ": " + why);
  };

  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.find('\r') != std::string::npos) throw fail("carriage return found; LF line endings are required");
    if (line_no == 1) {
      if (line != kManifestHeader) throw fail("expected header '" + std::string(kManifestHeader) + "'");
      continue;
    }
    if (line.empty()) throw fail("empty row");

    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      fields.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (fields.size() != 6) throw fail("expected 6 fields, got " + std::to_string(fields.size()));

    SampleRecord r;
    r.sample_id = fields[0];
    r.subject_id = fields[1];
    if (r.sample_id.empty()) throw fail("empty sample_id");
    if (r.subject_id.empty()) throw fail("empty subject_id");
    const auto lat = parse_laterality(fields[2]);
    if (!lat) throw fail("unknown laterality token '" + fields[2] + "'");
    r.laterality = *lat;
    const auto split = parse_split(fields[3]);
    if (!split) throw fail("unknown split token '" + fields[3] + "'");
    r.split = *split;

    const std::string& lab = fields[4];
    if (lab.empty()) throw fail("empty label list");
    for (std::size_t i = 0; i < lab.size(); ++i) {
      if (i % 2 == 0) {
        if (lab[i] != '0' && lab[i] != '1') throw fail("label flags must be 0 or 1 in '" + lab + "'");
        r.labels.push_back(lab[i] == '1');
      } else if (lab[i] != ';') {
        throw fail("label flags must be separated by ';' in '" + lab + "'");
      }
    }
    if (lab.back() == ';') throw fail("trailing ';' in label list");
    if (!n_labels) n_labels = r.labels.size();
    if (r.labels.size() != *n_labels)
      throw fail("expected " + std::to_string(*n_labels) + " labels, got " + std::to_string(r.labels.size()));

    r.image_path = fields[5];
    if (r.image_path.empty()) throw fail("empty image_path");

    if (!ids.insert(r.sample_id).second) throw fail("duplicate sample_id '" + r.sample_id + "'");
    auto [it, inserted] = subject_split.emplace(r.subject_id, r.split);
    if (!inserted && it->second != r.split)
      throw fail("subject '" + r.subject_id + "' already assigned to split " + to_string(it->second));
    m.records.push_back(std::move(r));
  }
  if (line_no == 0) throw ParseError(origin + ":1: missing header");
  return m;
}

inline void save_manifest(const DatasetManifest& m, const fs::path& path) { write_file(path, manifest_to_csv(m)); }

inline DatasetManifest load_manifest(const fs::path& path) { return manifest_from_csv(read_file(path), path.string()); }

// Writes images under `dir/images/` and the manifest as `dir/manifest.csv`.
inline void write_dataset(const GeneratedDataset& ds, const DatasetManifest& manifest, const fs::path& dir) {
  for (std::size_t i = 0; i < manifest.records.size(); ++i)
    write_float_map(ds.images[i], dir / manifest.records[i].image_path);
  save_manifest(manifest, dir / "manifest.csv");
}

// ---------------------------------------------------------------------------
// Loading and the mean-image diagnostic

// Loads a sample and, when `flip` is set, mirrors right eyes into the shared
// left-eye frame.
inline Image load_sample_image(const SampleRecord& r, const fs::path& root, bool flip = true) {
  Image img = read_image(root / r.image_path);
  return flip ? apply_laterality_flip(img, r.laterality) : img;
}

// Pixel-wise mean, accumulated in double in input order.
inline Image mean_image(std::span<const Image> images) {
  if (images.empty()) throw EmptyInputError("mean_image: no images");
  const Image& first = images.front();
  std::vector<double> acc(first.size(), 0.0);
  for (const auto& img : images) {
    if (!img.same_shape(first)) throw ContractError("mean_image: image shapes differ");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += img.data[i];
  }
  Image out(first.height, first.width, first.channels);
  const double n = static_cast<double>(images.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out.data[i] = static_cast<float>(acc[i] / n);
  return out;
}

inline Image mean_image(const DatasetManifest& m, Split split, const fs::path& root, bool flip = true) {
  std::vector<Image> images;
  for (const auto* r : m.in_split(split)) images.push_back(load_sample_image(*r, root, flip));
  if (images.empty()) throw EmptyInputError(std::string("mean_image: split '") + to_string(split) + "' is empty");
  return mean_image(images);
}

// Counts bright local maxima of channel 0 inside `region`. A pixel counts when
// it is the maximum of its (2*radius+1)^2 neighbourhood (plateaus resolved to
// their first pixel in row-major order) and its height above the region's
// median reaches half of the largest such height.
inline std::size_t count_bright_maxima(const Image& img, const Circle& region, int radius = 2) {
  std::vector<float> inside;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      if (region.contains(static_cast<double>(x), static_cast<double>(y))) inside.push_back(img.at(y, x));
  if (inside.empty()) return 0;
  std::vector<float> sorted = inside;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2), sorted.end());
  const float median = sorted[sorted.size() / 2];
  const float peak = *std::max_element(inside.begin(), inside.end());
  const float threshold = median + 0.5f * (peak - median);
  if (!(peak > median)) return 0;

  const auto H = static_cast<long>(img.height), W = static_cast<long>(img.width);
  std::size_t count = 0;
  for (long y = 0; y < H; ++y) {
    for (long x = 0; x < W; ++x) {
      if (!region.contains(static_cast<double>(x), static_cast<double>(y))) continue;
      const float v = img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
      if (v < threshold) continue;
      bool is_max = true;
      for (long dy = -radius; dy <= radius && is_max; ++dy) {
        for (long dx = -radius; dx <= radius; ++dx) {
          const long yy = y + dy, xx = x + dx;
          if ((dy == 0 && dx == 0) || yy < 0 || xx < 0 || yy >= H || xx >= W) continue;
          const float u = img.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
          const bool earlier = yy < y || (yy == y && xx < x);
          if (u > v || (u == v && earlier)) {
            is_max = false;
            break;
          }
        }
      }
      if (is_max) ++count;
    }
  }
  return count;
}

// ---------------------------------------------------------------------------
// Config persistence (key=value), so later stages can recover the geometry.

inline std::string placement_name(Placement p) {
  switch (p) {
  case Placement::TightLandmark: return "tight-landmark";
  case Placement::LandmarkPlusScatter: return "landmark-plus-scatter";
  case Placement::QuadrantBiased: return "quadrant-biased";
  }
  return "?";
}

inline Placement parse_placement(const std::string& s) {
  if (s == "tight-landmark") return Placement::TightLandmark;
  if (s == "landmark-plus-scatter") return Placement::LandmarkPlusScatter;
  if (s == "quadrant-biased") return Placement::QuadrantBiased;
  throw ParseError("unknown placement '" + s + "'");
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

} // namespace detail

inline std::string synth_config_to_text(const SynthConfig& c, std::uint64_t seed) {
  using detail::fmt_double;
  std::ostringstream o;
  const auto& g = c.background;
  o << "seed=" << seed << "\n"
    << "height=" << c.height << "\nwidth=" << c.width << "\nchannels=" << c.channels << "\n"
    << "n_subjects=" << c.n_subjects << "\nsecond_eye_prob=" << fmt_double(c.second_eye_prob) << "\n"
    << "co_occurrence_prob=" << fmt_double(c.co_occurrence_prob) << "\nnoise_sigma=" << fmt_double(c.noise_sigma)
    << "\n"
    << "field_center=" << fmt_double(g.field_center.x) << "," << fmt_double(g.field_center.y) << "\n"
    << "field_radius=" << fmt_double(g.field_radius) << "\nbase_intensity=" << fmt_double(g.base_intensity)
    << "\nvignette=" << fmt_double(g.vignette) << "\n"
    << "disc_center=" << fmt_double(g.disc_center.x) << "," << fmt_double(g.disc_center.y) << "\n"
    << "disc_sigma=" << fmt_double(g.disc_sigma) << "\ndisc_intensity=" << fmt_double(g.disc_intensity) << "\n"
    << "fovea_center=" << fmt_double(g.fovea_center.x) << "," << fmt_double(g.fovea_center.y) << "\n"
    << "fovea_sigma=" << fmt_double(g.fovea_sigma) << "\nfovea_intensity=" << fmt_double(g.fovea_intensity)
    << "\nlandmark_jitter=" << fmt_double(g.landmark_jitter) << "\nbrightness_jitter=" << fmt_double(g.brightness_jitter)
    << "\n"
    << "labels=" << c.labels.size() << "\n";
  for (std::size_t i = 0; i < c.labels.size(); ++i) {
    const auto& l = c.labels[i];
    const std::string p = "label" + std::to_string(i) + ".";
    o << p << "name=" << l.name << "\n"
      << p << "placement=" << placement_name(l.placement) << "\n"
      << p << "landmark_center=" << fmt_double(l.landmark_center.x) << "," << fmt_double(l.landmark_center.y) << "\n"
      << p << "spread_sigma=" << fmt_double(l.spread_sigma) << "\n"
      << p << "scatter_fraction=" << fmt_double(l.scatter_fraction) << "\n"
      << p << "count_range=" << l.count_min << "," << l.count_max << "\n"
      << p << "intensity=" << fmt_double(l.intensity) << "\n"
      << p << "radius_range=" << fmt_double(l.radius_min) << "," << fmt_double(l.radius_max) << "\n"
      << p << "prevalence=" << fmt_double(l.prevalence) << "\n";
  }
  return o.str();
}

inline std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& origin) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError(origin + ":" + std::to_string(line_no) + ": expected key=value");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

struct StoredSynthConfig {
  SynthConfig config;
  std::uint64_t seed = 0;
};

inline StoredSynthConfig synth_config_from_text(const std::string& text, const std::string& origin = "<config>") {
  const auto kv = parse_key_values(text, origin);
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw ParseError(origin + ": missing key '" + k + "'");
    return it->second;
  };
  auto num = [&](const std::string& k) {
    try {
      return std::stod(get(k));
    } catch (const std::logic_error&) {
      throw ParseError(origin + ": bad number for '" + k + "'");
    }
  };
  auto pair = [&](const std::string& k) {
    const std::string& v = get(k);
    const auto comma = v.find(',');
    if (comma == std::string::npos) throw ParseError(origin + ": expected 'a,b' for '" + k + "'");
    try {
      return std::pair{std::stod(v.substr(0, comma)), std::stod(v.substr(comma + 1))};
    } catch (const std::logic_error&) {
      throw ParseError(origin + ": bad pair for '" + k + "'");
    }
  };
  StoredSynthConfig s;
  auto& c = s.config;
  s.seed = std::stoull(get("seed"));
  c.height = static_cast<std::size_t>(num("height"));
  c.width = static_cast<std::size_t>(num("width"));
  c.channels = static_cast<std::size_t>(num("channels"));
  c.n_subjects = static_cast<std::size_t>(num("n_subjects"));
  c.second_eye_prob = num("second_eye_prob");
  c.co_occurrence_prob = num("co_occurrence_prob");
  c.noise_sigma = num("noise_sigma");
  auto& g = c.background;
  std::tie(g.field_center.x, g.field_center.y) = pair("field_center");
  g.field_radius = num("field_radius");
  g.base_intensity = num("base_intensity");
  g.vignette = num("vignette");
  std::tie(g.disc_center.x, g.disc_center.y) = pair("disc_center");
  g.disc_sigma = num("disc_sigma");
  g.disc_intensity = num("disc_intensity");
  std::tie(g.fovea_center.x, g.fovea_center.y) = pair("fovea_center");
  g.fovea_sigma = num("fovea_sigma");
  g.fovea_intensity = num("fovea_intensity");
  g.landmark_jitter = num("landmark_jitter");
  g.brightness_jitter = num("brightness_jitter");
  const auto n = static_cast<std::size_t>(num("labels"));
  for (std::size_t i = 0; i < n; ++i) {
    const std::string p = "label" + std::to_string(i) + ".";
    LesionSpec l;
    l.name = get(p + "name");
    l.placement = parse_placement(get(p + "placement"));
    std::tie(l.landmark_center.x, l.landmark_center.y) = pair(p + "landmark_center");
    l.spread_sigma = num(p + "spread_sigma");
    l.scatter_fraction = num(p + "scatter_fraction");
    const auto counts = pair(p + "count_range");
    l.count_min = static_cast<int>(counts.first);
    l.count_max = static_cast<int>(counts.second);
    l.intensity = num(p + "intensity");
    std::tie(l.radius_min, l.radius_max) = pair(p + "radius_range");
    l.prevalence = num(p + "prevalence");
    c.labels.push_back(std::move(l));
  }
  validate(c);
  return s;
}

inline std::vector<std::string> label_names(const SynthConfig& c) {
  std::vector<std::string> names;
  for (const auto& l : c.labels) names.push_back(l.name);
  return names;
}

} // namespace axai
