#pragma once

// Label-wise and overall global explanations built by pixel-wise averaging of
// image-wise GradCAM maps over the positive instances of a held-out split.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "axai/error.hpp"
#include "axai/gradcam.hpp"
#include "axai/image.hpp"
#include "axai/io.hpp"
#include "axai/model.hpp"
#include "axai/parallel.hpp"
#include "axai/synthdata.hpp"

namespace axai {

enum class Weighting { Probability, Uniform };

inline const char* to_string(Weighting w) { return w == Weighting::Probability ? "prob" : "uniform"; }

struct LabelGlobalExplanation {
  ExplanationMap map;
  std::size_t label = 0;
  std::size_t n_positives = 0;
  double weight_sum = 0.0;
};

struct OverallGlobalExplanation {
  ExplanationMap map;
  std::size_t n_labels = 0;
};

// Ground-truth positives for `label` in `split`, in manifest order.
inline std::vector<const SampleRecord*> select_positives(const DatasetManifest& manifest, Split split,
                                                         std::size_t label) {
  if (split == Split::Train)
    throw ContractError("select_positives: global explanations are built from the val or test split");
  std::vector<const SampleRecord*> out;
  for (const auto* r : manifest.in_split(split)) {
    if (label >= r->labels.size()) throw ContractError("select_positives: label index out of range");
    if (r->labels[label]) out.push_back(r);
  }
  if (out.empty())
    throw EmptyInputError("no positive instances of label " + std::to_string(label) + " in split '" +
                          to_string(split) + "'; its global explanation is undefined");
  return out;
}

// E^l = (1 / n(l)) * sum_i p_i * E^l_i, summed in input order in double.
inline LabelGlobalExplanation label_global(std::span<const ExplanationMap> maps, std::span<const double> probabilities,
                                           std::size_t label = 0) {
  if (maps.empty()) throw EmptyInputError("label_global: no maps for label " + std::to_string(label));
  if (maps.size() != probabilities.size())
    throw ContractError("label_global: " + std::to_string(maps.size()) + " maps but " +
                        std::to_string(probabilities.size()) + " probabilities");
  const auto& first = maps.front();
  std::vector<double> acc(first.pixels(), 0.0);
  double weight_sum = 0.0;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (!maps[i].same_shape(first))
      throw ContractError("label_global: map " + std::to_string(i) + " is " + std::to_string(maps[i].height) + "x" +
                          std::to_string(maps[i].width) + ", expected " + std::to_string(first.height) + "x" +
                          std::to_string(first.width));
    const double p = probabilities[i];
    if (!(p >= 0.0 && p <= 1.0)) throw ContractError("label_global: probability outside [0,1]");
    weight_sum += p;
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += p * static_cast<double>(maps[i].data[k]);
  }
  if (!(weight_sum > 0.0))
    throw DegenerateInputError("label_global: all weights are zero for label " + std::to_string(label));
  LabelGlobalExplanation g;
  g.label = label;
  g.n_positives = maps.size();
  g.weight_sum = weight_sum;
  g.map = ExplanationMap(first.height, first.width);
  const double n = static_cast<double>(maps.size());
  for (std::size_t k = 0; k < acc.size(); ++k) g.map.data[k] = static_cast<float>(acc[k] / n);
  g.map.provenance = "label:" + std::to_string(label);
  return g;
}

// E^Overall = unweighted mean of the label-wise maps.
inline OverallGlobalExplanation overall_global(std::span<const ExplanationMap> label_maps) {
  if (label_maps.empty()) throw EmptyInputError("overall_global: no label-wise explanations");
  const auto& first = label_maps.front();
  std::vector<double> acc(first.pixels(), 0.0);
  for (const auto& m : label_maps) {
    if (!m.same_shape(first)) throw ContractError("overall_global: label-wise maps differ in shape");
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += static_cast<double>(m.data[k]);
  }
  OverallGlobalExplanation o;
  o.n_labels = label_maps.size();
  o.map = ExplanationMap(first.height, first.width);
  const double n = static_cast<double>(label_maps.size());
  for (std::size_t k = 0; k < acc.size(); ++k) o.map.data[k] = static_cast<float>(acc[k] / n);
  o.map.provenance = "overall";
  return o;
}

inline OverallGlobalExplanation overall_global(std::span<const LabelGlobalExplanation> labels) {
  std::vector<ExplanationMap> maps;
  for (const auto& l : labels) maps.push_back(l.map);
  return overall_global(maps);
}

// ---------------------------------------------------------------------------
// Orchestration

struct SampleExplanation {
  std::string sample_id;
  ExplanationMap map;
  double probability = 0.0;
};

struct ExplainOptions {
  Split split = Split::Val;
  Normalization normalization = Normalization::MaxOne;
  Weighting weighting = Weighting::Probability;
  bool flip = true;
  std::size_t threads = 1;
};

struct SplitExplanations {
  std::vector<std::vector<SampleExplanation>> per_label; // [label][positive sample]
  std::vector<LabelGlobalExplanation> label_globals;
  OverallGlobalExplanation overall;
};

inline std::vector<double> aggregation_weights(const std::vector<SampleExplanation>& samples, Weighting w) {
  std::vector<double> out;
  for (const auto& s : samples) out.push_back(w == Weighting::Probability ? s.probability : 1.0);
  return out;
}

inline SplitExplanations aggregate_explanations(std::vector<std::vector<SampleExplanation>> per_label, Weighting w) {
  SplitExplanations r;
  r.per_label = std::move(per_label);
  for (std::size_t l = 0; l < r.per_label.size(); ++l) {
    std::vector<ExplanationMap> maps;
    for (const auto& s : r.per_label[l]) maps.push_back(s.map);
    r.label_globals.push_back(label_global(maps, aggregation_weights(r.per_label[l], w), l));
  }
  r.overall = overall_global(std::span<const LabelGlobalExplanation>(r.label_globals));
  return r;
}

// Image-wise GradCAM maps for every positive instance of every label.
template <typename T>
std::vector<std::vector<SampleExplanation>> explain_positives(const ModelParams<T>& params,
                                                              const DatasetManifest& manifest, const fs::path& root,
                                                              const ExplainOptions& opt) {
  const std::size_t L = params.arch.n_labels();
  if (manifest.label_count() != L)
    throw ContractError("manifest has " + std::to_string(manifest.label_count()) + " labels but the model has " +
                        std::to_string(L));
  // One forward pass per sample covers all of its positive labels.
  std::vector<const SampleRecord*> samples;
  for (std::size_t l = 0; l < L; ++l) select_positives(manifest, opt.split, l);
  for (const auto* r : manifest.in_split(opt.split))
    if (std::find(r->labels.begin(), r->labels.end(), true) != r->labels.end()) samples.push_back(r);

  std::vector<std::vector<LabelExplanation>> results(samples.size());
  std::vector<std::vector<std::size_t>> wanted(samples.size());
  parallel_for(samples.size(), opt.threads, [&](std::size_t i) {
    for (std::size_t l = 0; l < L; ++l)
      if (samples[i]->labels[l]) wanted[i].push_back(l);
    const Image img = load_sample_image(*samples[i], root, opt.flip);
    results[i] = gradcam_labels(params, img, wanted[i], opt.normalization, samples[i]->sample_id);
  });

  std::vector<std::vector<SampleExplanation>> per_label(L);
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t j = 0; j < wanted[i].size(); ++j)
      per_label[wanted[i][j]].push_back(
          {samples[i]->sample_id, std::move(results[i][j].map), results[i][j].probability});
  return per_label;
}

template <typename T>
SplitExplanations explain_split(const ModelParams<T>& params, const DatasetManifest& manifest, const fs::path& root,
                                const ExplainOptions& opt) {
  return aggregate_explanations(explain_positives(params, manifest, root, opt), opt.weighting);
}

// ---------------------------------------------------------------------------
// Persistence

inline std::string global_meta_text(const LabelGlobalExplanation& g, const std::string& name, Weighting w,
                                    Normalization n) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", g.weight_sum);
  std::ostringstream o;
  o << "kind=label\nlabel=" << g.label << "\nname=" << name << "\nn_positives=" << g.n_positives
    << "\nweight_sum=" << buf << "\nweighting=" << to_string(w) << "\nsample_normalization=" << to_string(n)
    << "\nnormalization=raw\n";
  return o.str();
}

inline std::string overall_meta_text(const OverallGlobalExplanation& o, const std::vector<std::string>& names) {
  std::ostringstream s;
  s << "kind=overall\nn_labels=" << o.n_labels << "\nlabels=";
  for (std::size_t i = 0; i < names.size(); ++i) s << (i ? "," : "") << names[i];
  s << "\nnormalization=raw\n";
  return s.str();
}

} // namespace axai
