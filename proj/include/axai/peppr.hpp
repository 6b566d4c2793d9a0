#pragma once

// Progressive Erasing Plus Progressive Restoration. The overall global
// explanation is ranked once; quantile masks erase the least important pixels
// first (erasure) and their complements restore the least important pixels
// first (restoration). The fixed model is scored on the masked test split at
// every quantile.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "axai/error.hpp"
#include "axai/image.hpp"
#include "axai/metrics.hpp"
#include "axai/model.hpp"
#include "axai/parallel.hpp"
#include "axai/rng.hpp"

namespace axai {

enum class FillMode { TrainMean, RandomNoise };
enum class Direction { Erasure, Restoration };

inline const char* to_string(FillMode f) { return f == FillMode::TrainMean ? "train-mean" : "noise"; }
inline const char* to_string(Direction d) { return d == Direction::Erasure ? "erasure" : "restoration"; }

// Pixel indices sorted by ascending importance; ties by ascending row-major
// index, so every quantile erases an exact pixel count.
inline std::vector<std::size_t> importance_order(const ExplanationMap& map) {
  if (!map.all_finite()) throw NumericError("importance ranking: map '" + map.provenance + "' has non-finite values");
  std::vector<std::size_t> order(map.pixels());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return map.data[a] < map.data[b]; });
  return order;
}

// {0, q, 2q, ..., 1}. When 1/q is (numerically) an integer n the grid is i/n.
inline std::vector<double> quantile_grid(double step) {
  if (!(step > 0.0 && step <= 0.5)) throw ConfigError("quantile step must lie in (0, 0.5], got " + std::to_string(step));
  std::vector<double> grid;
  const double inv = 1.0 / step;
  const double n = std::round(inv);
  if (std::abs(inv - n) < 1e-9) {
    for (int i = 0; i <= static_cast<int>(n); ++i) grid.push_back(static_cast<double>(i) / n);
  } else {
    for (int i = 0; static_cast<double>(i) * step < 1.0; ++i) grid.push_back(static_cast<double>(i) * step);
    grid.push_back(1.0);
  }
  return grid;
}

// Pixels kept at erased fraction v.
inline std::size_t retained_count(double v, std::size_t n_pixels) {
  return static_cast<std::size_t>(std::llround((1.0 - v) * static_cast<double>(n_pixels)));
}

struct QuantileMaskSeries {
  std::vector<double> quantiles;
  std::vector<Mask> masks; // erasure direction: true = retained
  std::vector<std::size_t> order;
  std::string source;
};

inline QuantileMaskSeries quantile_masks(const ExplanationMap& map, double step) {
  QuantileMaskSeries s;
  s.quantiles = quantile_grid(step);
  s.order = importance_order(map);
  s.source = map.provenance;
  const std::size_t n = map.pixels();
  for (double v : s.quantiles) {
    Mask m(map.height, map.width, true);
    const std::size_t erased = n - retained_count(v, n);
    for (std::size_t k = 0; k < erased; ++k) m.retained[s.order[k]] = 0;
    s.masks.push_back(std::move(m));
  }
  return s;
}

inline const std::vector<Mask>& erasure_masks(const QuantileMaskSeries& s) { return s.masks; }

inline std::vector<Mask> restoration_masks(const QuantileMaskSeries& s) {
  std::vector<Mask> out;
  for (const auto& m : s.masks) out.push_back(m.complement());
  return out;
}

// Copies retained pixels; erased pixels take the training-set mean or
// independent uniform [0,1) noise. One mask serves every channel.
inline Image apply_mask(const Image& image, const Mask& mask, FillMode fill, const Image* train_mean, Rng& rng) {
  if (mask.height != image.height || mask.width != image.width)
    throw ContractError("apply_mask: mask and image shapes differ");
  if (fill == FillMode::TrainMean) {
    if (!train_mean) throw ConfigError("apply_mask: train-mean fill requires the training mean image");
    if (!train_mean->same_shape(image)) throw ContractError("apply_mask: training mean image has the wrong shape");
  }
  Image out = image;
  for (std::size_t p = 0; p < mask.pixels(); ++p) {
    if (mask.retained[p]) continue;
    for (std::size_t c = 0; c < image.channels; ++c) {
      const std::size_t k = p * image.channels + c;
      out.data[k] = fill == FillMode::TrainMean ? train_mean->data[k] : static_cast<float>(rng.uniform());
    }
  }
  return out;
}

// Share of the map's total mass lying in retained pixels.
inline double retained_importance(const ExplanationMap& map, const Mask& mask) {
  if (mask.height != map.height || mask.width != map.width)
    throw ContractError("retained_importance: mask and map shapes differ");
  double total = 0.0, kept = 0.0;
  for (std::size_t p = 0; p < map.pixels(); ++p) {
    total += map.data[p];
    if (mask.retained[p]) kept += map.data[p];
  }
  if (!(total > 0.0)) throw DegenerateInputError("retained_importance: map has no importance mass");
  return kept / total;
}

struct PepprCurves {
  Direction direction = Direction::Erasure;
  std::vector<double> quantiles;
  std::vector<std::vector<double>> auc; // [quantile][label]
  std::vector<double> retained_importance;
  std::vector<double> baseline_auc; // [label]
};

struct PepprOptions {
  double step = 0.05;
  FillMode fill = FillMode::RandomNoise;
  std::uint64_t seed = 7;
  std::size_t threads = 1;
};

struct PepprResult {
  PepprCurves erasure;
  PepprCurves restoration;
};

namespace detail {

template <typename T>
std::vector<double> masked_aucs(const ModelParams<T>& params, const LabeledImages& test, const Mask& mask,
                                FillMode fill, const Image* train_mean, std::uint64_t seed, Direction dir,
                                std::size_t step_index, std::size_t threads) {
  std::vector<Image> masked(test.images.size());
  parallel_for(test.images.size(), threads, [&](std::size_t i) {
    Rng rng(derive_seed(seed, stream::peppr, static_cast<std::uint64_t>(dir), step_index, hash_string(test.ids[i])));
    masked[i] = apply_mask(test.images[i], mask, fill, train_mean, rng);
  });
  const auto probs = predict(params, masked, threads);
  const std::size_t L = params.arch.n_labels();
  std::vector<double> aucs;
  for (std::size_t l = 0; l < L; ++l) {
    std::vector<double> s;
    std::vector<bool> t;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      s.push_back(probs[i][l]);
      t.push_back(test.labels[i][l]);
    }
    try {
      aucs.push_back(roc_auc(s, t, l));
    } catch (const MetricError& e) {
      throw MetricError("PEPPR: AUC undefined for label '" + params.arch.label_names[l] + "': " + e.what());
    }
  }
  return aucs;
}

} // namespace detail

// Scores the fixed model on the test images under both mask series. The
// unmasked baseline goes through the same masking path with an all-true mask.
template <typename T>
PepprResult run_peppr(const ModelParams<T>& params, const LabeledImages& test, const ExplanationMap& overall,
                      const Image* train_mean, const PepprOptions& opt) {
  if (test.images.empty()) throw EmptyInputError("PEPPR: the test split is empty");
  const auto series = quantile_masks(overall, opt.step);
  const Mask full(overall.height, overall.width, true);
  const auto baseline = detail::masked_aucs(params, test, full, opt.fill, train_mean, opt.seed, Direction::Erasure,
                                            0, opt.threads);
  PepprResult r;
  for (Direction dir : {Direction::Erasure, Direction::Restoration}) {
    PepprCurves& c = dir == Direction::Erasure ? r.erasure : r.restoration;
    c.direction = dir;
    c.quantiles = series.quantiles;
    c.baseline_auc = baseline;
    for (std::size_t q = 0; q < series.quantiles.size(); ++q) {
      const Mask mask = dir == Direction::Erasure ? series.masks[q] : series.masks[q].complement();
      c.retained_importance.push_back(retained_importance(overall, mask));
      c.auc.push_back(
          detail::masked_aucs(params, test, mask, opt.fill, train_mean, opt.seed, dir, q, opt.threads));
    }
  }
  return r;
}

// One row per (direction, quantile, label).
inline std::string peppr_curves_csv(const PepprResult& r, const std::vector<std::string>& label_names) {
  std::string out = "direction,quantile,label,auc,retained_importance,baseline_auc\n";
  char buf[256];
  for (const PepprCurves* c : {&r.erasure, &r.restoration}) {
    for (std::size_t q = 0; q < c->quantiles.size(); ++q) {
      for (std::size_t l = 0; l < label_names.size(); ++l) {
        std::snprintf(buf, sizeof buf, "%s,%.10g,%s,%.17g,%.17g,%.17g\n", to_string(c->direction), c->quantiles[q],
                      label_names[l].c_str(), c->auc[q][l], c->retained_importance[q], c->baseline_auc[l]);
        out += buf;
      }
    }
  }
  return out;
}

struct CurveRow {
  std::string direction;
  double quantile = 0.0;
  std::string label;
  double auc = 0.0;
  double retained_importance = 0.0;
  double baseline_auc = 0.0;
};

inline std::vector<CurveRow> parse_curves_csv(const std::string& text, const std::string& origin = "<curves>") {
  std::istringstream in(text);
  std::string line;
  std::vector<CurveRow> rows;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1) {
      if (line != "direction,quantile,label,auc,retained_importance,baseline_auc")
        throw ParseError(origin + ":1: unexpected header");
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string field;
    while (std::getline(ls, field, ',')) f.push_back(field);
    if (f.size() != 6) throw ParseError(origin + ":" + std::to_string(line_no) + ": expected 6 fields");
    try {
      rows.push_back({f[0], std::stod(f[1]), f[2], std::stod(f[3]), std::stod(f[4]), std::stod(f[5])});
    } catch (const std::logic_error&) {
      throw ParseError(origin + ":" + std::to_string(line_no) + ": malformed number");
    }
  }
  return rows;
}

} // namespace axai
