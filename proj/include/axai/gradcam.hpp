#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "axai/error.hpp"
#include "axai/image.hpp"
#include "axai/model.hpp"

namespace axai {

// Bilinear resize with the half-pixel (align-corners = false) convention:
// source coordinate = (dst + 0.5) * (src_size / dst_size) - 0.5, clamped to
// the valid range. Interpolates as a + t * (b - a), which is exact on
// constant input.
inline std::vector<double> upsample_bilinear(std::span<const double> src, std::size_t src_h, std::size_t src_w,
                                             std::size_t dst_h, std::size_t dst_w) {
  if (src.size() != src_h * src_w) throw ContractError("upsample_bilinear: source size does not match its shape");
  if (src_h == 0 || src_w == 0 || src_h > dst_h || src_w > dst_w)
    throw ContractError("upsample_bilinear: cannot resize " + std::to_string(src_h) + "x" + std::to_string(src_w) +
                        " to " + std::to_string(dst_h) + "x" + std::to_string(dst_w));
  auto coord = [](std::size_t dst, std::size_t src_n, std::size_t dst_n, std::size_t& i0, std::size_t& i1, double& t) {
    const double scale = static_cast<double>(src_n) / static_cast<double>(dst_n);
    double s = (static_cast<double>(dst) + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src_n - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, src_n - 1);
    t = s - static_cast<double>(i0);
  };
  std::vector<double> out(dst_h * dst_w);
  for (std::size_t y = 0; y < dst_h; ++y) {
    std::size_t y0, y1;
    double ty;
    coord(y, src_h, dst_h, y0, y1, ty);
    for (std::size_t x = 0; x < dst_w; ++x) {
      std::size_t x0, x1;
      double tx;
      coord(x, src_w, dst_w, x0, x1, tx);
      const double a = src[y0 * src_w + x0], b = src[y0 * src_w + x1];
      const double c = src[y1 * src_w + x0], d = src[y1 * src_w + x1];
      const double top = a + tx * (b - a);
      const double bottom = c + tx * (d - c);
      out[y * dst_w + x] = top + ty * (bottom - top);
    }
  }
  return out;
}

// Divides by the maximum; an all-zero map stays zero.
inline void normalize_max_one(ExplanationMap& m) {
  const float peak = m.data.empty() ? 0.0f : *std::max_element(m.data.begin(), m.data.end());
  if (peak > 0.0f)
    for (auto& v : m.data) v /= peak;
  m.normalization = Normalization::MaxOne;
}

struct LabelExplanation {
  ExplanationMap map;
  double probability = 0.0; // sigmoid of the label's logit
};

// GradCAM maps for several labels of one image from a single forward pass.
// alpha_k is the spatial mean of d(logit)/dA^k at the last conv layer; the
// coarse map ReLU(sum_k alpha_k A^k) is upsampled to the input size.
template <typename T>
std::vector<LabelExplanation> gradcam_labels(const ModelParams<T>& params, const Image& image,
                                             std::span<const std::size_t> labels,
                                             Normalization normalization = Normalization::MaxOne,
                                             const std::string& sample_id = {}) {
  const auto geo = params.arch.geometry();
  const auto cache = forward_sample(params, image, geo);
  const auto& target = geo.back().conv;
  const auto& A = cache.activations.back();
  const std::size_t area = target.h * target.w;

  std::vector<LabelExplanation> out;
  for (std::size_t label : labels) {
    if (label >= params.arch.n_labels())
      throw ContractError("gradcam: label index " + std::to_string(label) + " out of range (" +
                          std::to_string(params.arch.n_labels()) + " labels)");
    const auto grad = target_layer_gradient(params, label);
    std::vector<double> coarse(area, 0.0);
    for (std::size_t k = 0; k < target.c; ++k) {
      double alpha = 0.0;
      for (std::size_t i = 0; i < area; ++i) alpha += static_cast<double>(grad[k * area + i]);
      alpha /= static_cast<double>(area);
      if (!std::isfinite(alpha))
        throw NumericError("gradcam: non-finite gradient for sample '" + sample_id + "', label " +
                           std::to_string(label));
      for (std::size_t i = 0; i < area; ++i) coarse[i] += alpha * static_cast<double>(A[k * area + i]);
    }
    for (auto& v : coarse) {
      if (!std::isfinite(v))
        throw NumericError("gradcam: non-finite activation map for sample '" + sample_id + "', label " +
                           std::to_string(label));
      v = std::max(v, 0.0);
    }
    const auto fine = upsample_bilinear(coarse, target.h, target.w, image.height, image.width);
    LabelExplanation e;
    e.map = ExplanationMap(image.height, image.width);
    std::transform(fine.begin(), fine.end(), e.map.data.begin(), [](double v) { return static_cast<float>(v); });
    e.map.provenance = sample_id + ":" + params.arch.label_names[label];
    if (normalization == Normalization::MaxOne) normalize_max_one(e.map);
    e.probability = static_cast<double>(detail::sigmoid(cache.logits[label]));
    out.push_back(std::move(e));
  }
  return out;
}

template <typename T>
ExplanationMap gradcam(const ModelParams<T>& params, const Image& image, std::size_t label,
                       Normalization normalization = Normalization::MaxOne) {
  const std::size_t labels[] = {label};
  return std::move(gradcam_labels(params, image, labels, normalization).front().map);
}

} // namespace axai
