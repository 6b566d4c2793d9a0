#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "axai/error.hpp"

namespace axai {

// H x W x C float image, row-major with the channel index innermost.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c = 1, float fill = 0.0f)
      : height(h), width(w), channels(c), data(h * w * c, fill) {}

  std::size_t pixels() const noexcept { return height * width; }
  std::size_t size() const noexcept { return data.size(); }

  float& at(std::size_t y, std::size_t x, std::size_t c = 0) {
    return data[(y * width + x) * channels + c];
  }
  float at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return data[(y * width + x) * channels + c];
  }

  bool same_shape(const Image& o) const noexcept {
    return height == o.height && width == o.width && channels == o.channels;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

enum class Normalization { Raw, MaxOne };

// H x W importance map. Values are non-negative and finite.
struct ExplanationMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> data;
  Normalization normalization = Normalization::Raw;
  std::string provenance;

  ExplanationMap() = default;
  ExplanationMap(std::size_t h, std::size_t w, float fill = 0.0f)
      : height(h), width(w), data(h * w, fill) {}

  std::size_t pixels() const noexcept { return data.size(); }
  float& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  float at(std::size_t y, std::size_t x) const { return data[y * width + x]; }

  bool same_shape(const ExplanationMap& o) const noexcept {
    return height == o.height && width == o.width;
  }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](float v) { return std::isfinite(v); });
  }
};

// Single-channel image view of a map (used for persistence and rendering).
inline Image to_image(const ExplanationMap& m) {
  Image img(m.height, m.width, 1);
  img.data = m.data;
  return img;
}

inline ExplanationMap to_map(const Image& img, std::string provenance = {}) {
  if (img.channels != 1)
    throw ContractError("explanation maps must have exactly one channel, got " +
                        std::to_string(img.channels));
  ExplanationMap m(img.height, img.width);
  m.data = img.data;
  m.provenance = std::move(provenance);
  return m;
}

inline const char* to_string(Normalization n) {
  return n == Normalization::Raw ? "raw" : "max-one";
}

// Boolean H x W mask, true = pixel retained.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<unsigned char> retained;

  Mask() = default;
  Mask(std::size_t h, std::size_t w, bool fill) : height(h), width(w), retained(h * w, fill ? 1 : 0) {}

  std::size_t pixels() const noexcept { return retained.size(); }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count(retained.begin(), retained.end(), 1));
  }
  Mask complement() const {
    Mask m = *this;
    for (auto& r : m.retained) r = r ? 0 : 1;
    return m;
  }

  friend bool operator==(const Mask&, const Mask&) = default;
};

} // namespace axai
