#pragma once

// Visual exports and the plain-text run summary.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "axai/error.hpp"
#include "axai/image.hpp"
#include "axai/io.hpp"
#include "axai/peppr.hpp"
#include "axai/synthdata.hpp"

namespace axai {

// Importance decile per pixel (0 = least important, 9 = most). A pixel is in
// band k when it is still retained after erasing the fraction k/10, using the
// same ranking and tie rule as quantile_masks.
inline std::vector<int> decile_bands(const ExplanationMap& map) {
  const auto order = importance_order(map);
  const std::size_t n = order.size();
  std::vector<std::size_t> threshold(10);
  for (int k = 0; k < 10; ++k) threshold[k] = n - retained_count(static_cast<double>(k) / 10.0, n);
  std::vector<int> band(n, 0);
  for (std::size_t rank = 0; rank < n; ++rank) {
    int b = 0;
    for (int k = 9; k >= 0; --k)
      if (rank >= threshold[k]) {
        b = k;
        break;
      }
    band[order[rank]] = b;
  }
  return band;
}

// Band k is drawn at luminance (k + 1) / 10; with a background the result is a
// 50/50 blend with the background's channel mean.
inline ByteImage render_decile_bands(const ExplanationMap& map, const Image* background = nullptr) {
  if (background && (background->height != map.height || background->width != map.width))
    throw ContractError("render_decile_bands: background and map shapes differ");
  const auto band = decile_bands(map);
  Image out(map.height, map.width, 1);
  for (std::size_t p = 0; p < map.pixels(); ++p) {
    double lum = static_cast<double>(band[p] + 1) / 10.0;
    if (background) {
      double bg = 0.0;
      for (std::size_t c = 0; c < background->channels; ++c) bg += background->data[p * background->channels + c];
      bg /= static_cast<double>(background->channels);
      lum = 0.5 * lum + 0.5 * std::clamp(bg, 0.0, 1.0);
    }
    out.data[p] = static_cast<float>(lum);
  }
  return quantize(out);
}

// Black-red-yellow-white ramp over the map scaled by its maximum.
inline ByteImage render_heatmap(const ExplanationMap& map) {
  const float peak = map.data.empty() ? 0.0f : *std::max_element(map.data.begin(), map.data.end());
  Image out(map.height, map.width, 3);
  for (std::size_t p = 0; p < map.pixels(); ++p) {
    const double t = peak > 0.0f ? std::clamp(static_cast<double>(map.data[p] / peak), 0.0, 1.0) : 0.0;
    out.data[p * 3 + 0] = static_cast<float>(std::clamp(3.0 * t, 0.0, 1.0));
    out.data[p * 3 + 1] = static_cast<float>(std::clamp(3.0 * t - 1.0, 0.0, 1.0));
    out.data[p * 3 + 2] = static_cast<float>(std::clamp(3.0 * t - 2.0, 0.0, 1.0));
  }
  return quantize(out);
}

struct RegionDensity {
  double inside_mean = 0.0;
  double outside_mean = 0.0;
  std::size_t argmax_x = 0, argmax_y = 0;
  bool argmax_inside = false;

  double ratio() const { return outside_mean > 0.0 ? inside_mean / outside_mean : HUGE_VAL; }
};

// Mean map value inside and outside a circle (pixel centres), plus the
// location of the first maximum in row-major order.
inline RegionDensity region_density(const ExplanationMap& map, const Circle& zone) {
  RegionDensity d;
  double in = 0.0, out = 0.0;
  std::size_t n_in = 0, n_out = 0, best = 0;
  for (std::size_t y = 0; y < map.height; ++y)
    for (std::size_t x = 0; x < map.width; ++x) {
      const double v = map.at(y, x);
      if (zone.contains(static_cast<double>(x), static_cast<double>(y))) {
        in += v;
        ++n_in;
      } else {
        out += v;
        ++n_out;
      }
      if (map.data[y * map.width + x] > map.data[best]) best = y * map.width + x;
    }
  if (n_in == 0 || n_out == 0) throw ContractError("region_density: the zone must split the map into two parts");
  d.inside_mean = in / static_cast<double>(n_in);
  d.outside_mean = out / static_cast<double>(n_out);
  d.argmax_y = best / map.width;
  d.argmax_x = best % map.width;
  d.argmax_inside = zone.contains(static_cast<double>(d.argmax_x), static_cast<double>(d.argmax_y));
  return d;
}

// ---------------------------------------------------------------------------
// Run summary

namespace detail {

inline fs::path require_artifact(const fs::path& dir, const std::string& rel) {
  const fs::path p = dir / rel;
  if (!fs::is_regular_file(p)) throw PrerequisiteError("missing artifact: " + rel + " (in " + dir.string() + ")");
  return p;
}

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

} // namespace detail

// Required artifacts, in the order they are checked.
inline std::vector<std::string> required_artifacts(const std::vector<std::string>& labels) {
  std::vector<std::string> r{"data/manifest.csv", "data/synth.cfg", "model/checkpoint.axm", "model/history.csv"};
  for (const auto& l : labels) r.push_back("global/label_" + l + ".axf");
  r.push_back("global/overall.axf");
  r.push_back("peppr/curves.csv");
  return r;
}

// Plain-text summary of a completed run directory. Label names come from the
// stored synthetic config; everything else from the stage artifacts.
inline std::string summarize_run(const fs::path& dir) {
  detail::require_artifact(dir, "data/manifest.csv");
  const auto stored = synth_config_from_text(read_file(detail::require_artifact(dir, "data/synth.cfg")),
                                             (dir / "data/synth.cfg").string());
  const auto labels = label_names(stored.config);
  for (const auto& rel : required_artifacts(labels)) detail::require_artifact(dir, rel);

  const auto manifest = load_manifest(dir / "data/manifest.csv");
  const auto rows = parse_curves_csv(read_file(dir / "peppr/curves.csv"), (dir / "peppr/curves.csv").string());

  std::ostringstream o;
  o << "aligned-xai run report\n";
  o << "seed: " << stored.seed << "\n";
  o << "labels: ";
  for (std::size_t l = 0; l < labels.size(); ++l) o << (l ? "," : "") << labels[l];
  o << "\nsamples: train=" << manifest.in_split(Split::Train).size()
    << " val=" << manifest.in_split(Split::Val).size() << " test=" << manifest.in_split(Split::Test).size() << "\n";

  o << "\n[baseline test AUC]\n";
  for (const auto& l : labels) {
    const auto it = std::find_if(rows.begin(), rows.end(), [&](const CurveRow& r) { return r.label == l; });
    if (it == rows.end()) throw FormatError("peppr/curves.csv has no rows for label '" + l + "'");
    o << l << " " << detail::fmt("%.6f", it->baseline_auc) << "\n";
  }

  o << "\n[localization]\n";
  for (std::size_t l = 0; l < labels.size(); ++l) {
    const auto map = to_map(read_float_map(dir / ("global/label_" + labels[l] + ".axf")), labels[l]);
    const auto d = region_density(map, lesion_zone(stored.config, stored.config.labels[l]));
    o << labels[l] << " zone_density_ratio=" << detail::fmt("%.4f", d.ratio()) << " argmax=(" << d.argmax_x << ","
      << d.argmax_y << ") argmax_in_zone=" << (d.argmax_inside ? "yes" : "no") << "\n";
  }

  o << "\n[peppr]\ndirection quantile label auc retained_importance\n";
  for (const auto& r : rows)
    o << r.direction << " " << detail::fmt("%.2f", r.quantile) << " " << r.label << " " << detail::fmt("%.6f", r.auc)
      << " " << detail::fmt("%.6f", r.retained_importance) << "\n";

  o << "\n[files]\n";
  std::vector<std::pair<std::string, std::uintmax_t>> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel.rfind("report/", 0) == 0) continue;
    files.emplace_back(rel, e.file_size());
  }
  std::sort(files.begin(), files.end());
  std::size_t images = 0, explain = 0;
  for (const auto& [rel, size] : files) {
    if (rel.rfind("data/images/", 0) == 0) {
      ++images;
      continue;
    }
    if (rel.rfind("explain/", 0) == 0 && rel.find("/probabilities.csv") == std::string::npos &&
        rel.find("MANIFEST") == std::string::npos) {
      ++explain;
      continue;
    }
    o << rel << " " << size << "\n";
  }
  o << "data/images/* " << images << " files\n";
  o << "explain/*/*.axf " << explain << " files\n";
  return o.str();
}

} // namespace axai
