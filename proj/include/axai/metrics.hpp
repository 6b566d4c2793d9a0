#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "axai/error.hpp"

namespace axai {

struct ScoredLabelSet {
  std::vector<double> scores;
  std::vector<bool> truths;
  std::size_t label = 0;
};

// Mann-Whitney statistic in integer form. `twice_u` is 2*U where U counts
// positive/negative pairs ordered correctly plus half of the tied pairs, so
// AUC = twice_u / (2 * positives * negatives) with no intermediate rounding.
struct AucCounts {
  std::uint64_t twice_u = 0;
  std::uint64_t positives = 0;
  std::uint64_t negatives = 0;

  double auc() const {
    return static_cast<double>(twice_u) / (2.0 * static_cast<double>(positives) * static_cast<double>(negatives));
  }
};

inline AucCounts roc_auc_counts(std::span<const double> scores, const std::vector<bool>& truths,
                                std::size_t label = 0) {
  if (scores.size() != truths.size())
    throw ContractError("roc_auc: " + std::to_string(scores.size()) + " scores but " +
                        std::to_string(truths.size()) + " truths");
  const std::size_t n = scores.size();
  AucCounts c;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(scores[i]))
      throw MetricError("roc_auc: non-finite score for label " + std::to_string(label));
    truths[i] ? ++c.positives : ++c.negatives;
  }
  if (c.positives == 0 || c.negatives == 0)
    throw MetricError("roc_auc undefined for label " + std::to_string(label) + ": only one class present (" +
                      std::to_string(c.positives) + " positives, " + std::to_string(c.negatives) +
                      " negatives)");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Average ranks, doubled so tied blocks stay integral: a block occupying
  // 1-based ranks [i+1, j] has average rank (i+1+j)/2.
  std::uint64_t positive_rank_sum_x2 = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t rank_x2 = static_cast<std::uint64_t>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (truths[order[k]]) positive_rank_sum_x2 += rank_x2;
    i = j;
  }
  c.twice_u = positive_rank_sum_x2 - c.positives * (c.positives + 1);
  return c;
}

// P(score+ > score-) + 0.5 * P(score+ == score-).
inline double roc_auc(std::span<const double> scores, const std::vector<bool>& truths, std::size_t label = 0) {
  return roc_auc_counts(scores, truths, label).auc();
}

inline double roc_auc(const ScoredLabelSet& set) { return roc_auc(set.scores, set.truths, set.label); }

} // namespace axai
