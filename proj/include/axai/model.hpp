#pragma once

// Small convolutional multi-label classifier with hand-written forward and
// backward passes. Every block is conv(k x k, same padding) -> ReLU -> 2x2
// average pool; the last pooled map is globally averaged and fed to a linear
// head producing one logit per label. Templated on the scalar type so the
// same code runs in 32-bit (training) and 64-bit (verification).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <numeric>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "axai/error.hpp"
#include "axai/image.hpp"
#include "axai/io.hpp"
#include "axai/metrics.hpp"
#include "axai/parallel.hpp"
#include "axai/rng.hpp"
#include "axai/synthdata.hpp"

namespace axai {

// ---------------------------------------------------------------------------
// Architecture

struct ConvBlockSpec {
  std::size_t channels = 8;
  std::size_t kernel = 3;
  std::size_t stride = 1;

  friend bool operator==(const ConvBlockSpec&, const ConvBlockSpec&) = default;
};

struct Shape3 {
  std::size_t c = 0, h = 0, w = 0;
  std::size_t size() const { return c * h * w; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

struct BlockGeometry {
  Shape3 input;
  Shape3 conv; // conv/ReLU output; the last block's is the GradCAM target
  Shape3 pooled;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
};

struct ArchitectureDescriptor {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t in_channels = 1;
  std::vector<ConvBlockSpec> blocks{{8, 3, 1}, {16, 3, 1}, {32, 3, 1}, {32, 3, 1}};
  std::vector<std::string> label_names{"glaucoma", "retinopathy", "detachment"};
  // Per-channel input standardization (x - mean) / std; empty means none.
  std::vector<double> input_mean;
  std::vector<double> input_std;

  std::size_t n_labels() const { return label_names.size(); }

  std::vector<BlockGeometry> geometry() const {
    if (blocks.empty()) throw ConfigError("architecture needs at least one conv block");
    if (input_mean.size() != input_std.size() || (!input_mean.empty() && input_mean.size() != in_channels))
      throw ConfigError("input standardization needs one mean and one std per channel");
    for (double sd : input_std)
      if (!(sd > 0.0) || !std::isfinite(sd)) throw ConfigError("input standardization std must be positive");
    if (label_names.empty()) throw ConfigError("architecture needs at least one label");
    std::vector<BlockGeometry> out;
    Shape3 in{in_channels, height, width};
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const auto& s = blocks[b];
      if (s.kernel % 2 == 0 || s.kernel == 0) throw ConfigError("conv kernel size must be odd");
      if (s.stride == 0 || s.channels == 0) throw ConfigError("conv stride and channels must be positive");
      BlockGeometry g;
      g.input = in;
      g.kernel = s.kernel;
      g.stride = s.stride;
      g.pad = s.kernel / 2;
      g.conv = {s.channels, (in.h + 2 * g.pad - s.kernel) / s.stride + 1, (in.w + 2 * g.pad - s.kernel) / s.stride + 1};
      if (g.conv.h < 2 || g.conv.w < 2)
        throw ConfigError("block " + std::to_string(b) + " output is too small to pool");
      g.pooled = {s.channels, g.conv.h / 2, g.conv.w / 2};
      out.push_back(g);
      in = g.pooled;
    }
    if (out.back().conv.h < 4 || out.back().conv.w < 4)
      throw ConfigError("last conv feature map is " + std::to_string(out.back().conv.h) + "x" +
                        std::to_string(out.back().conv.w) + "; at least 4x4 is required");
    return out;
  }

  std::string to_text() const {
    std::ostringstream o;
    o << "input=" << height << "x" << width << "x" << in_channels << "\nblocks=";
    for (std::size_t b = 0; b < blocks.size(); ++b)
      o << (b ? "," : "") << blocks[b].channels << "/" << blocks[b].kernel << "/" << blocks[b].stride;
    o << "\nlabels=";
    for (std::size_t l = 0; l < label_names.size(); ++l) o << (l ? "," : "") << label_names[l];
    auto list = [&](const char* key, const std::vector<double>& v) {
      o << "\n" << key << "=";
      char buf[32];
      for (std::size_t i = 0; i < v.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", v[i]);
        o << (i ? "," : "") << buf;
      }
    };
    list("input_mean", input_mean);
    list("input_std", input_std);
    o << "\n";
    return o.str();
  }

  static ArchitectureDescriptor from_text(const std::string& text) {
    const auto kv = parse_key_values(text, "architecture");
    auto get = [&](const char* k) {
      auto it = kv.find(k);
      if (it == kv.end()) throw FormatError(std::string("architecture: missing key '") + k + "'");
      return it->second;
    };
    auto split = [](const std::string& s, char sep) {
      std::vector<std::string> parts;
      std::size_t start = 0;
      while (true) {
        const auto p = s.find(sep, start);
        parts.push_back(s.substr(start, p == std::string::npos ? std::string::npos : p - start));
        if (p == std::string::npos) break;
        start = p + 1;
      }
      return parts;
    };
    ArchitectureDescriptor a;
    try {
      const auto in = split(get("input"), 'x');
      if (in.size() != 3) throw FormatError("architecture: input must be HxWxC");
      a.height = std::stoul(in[0]);
      a.width = std::stoul(in[1]);
      a.in_channels = std::stoul(in[2]);
      a.blocks.clear();
      for (const auto& blk : split(get("blocks"), ',')) {
        const auto f = split(blk, '/');
        if (f.size() != 3) throw FormatError("architecture: block must be channels/kernel/stride");
        a.blocks.push_back({std::stoul(f[0]), std::stoul(f[1]), std::stoul(f[2])});
      }
      for (auto [key, dst] : {std::pair{"input_mean", &a.input_mean}, std::pair{"input_std", &a.input_std}}) {
        const auto it = kv.find(key);
        if (it == kv.end() || it->second.empty()) continue;
        for (const auto& f : split(it->second, ',')) dst->push_back(std::stod(f));
      }
    } catch (const std::logic_error&) {
      throw FormatError("architecture: malformed number");
    }
    a.label_names = split(get("labels"), ',');
    a.geometry();
    return a;
  }

  friend bool operator==(const ArchitectureDescriptor&, const ArchitectureDescriptor&) = default;
};

// ---------------------------------------------------------------------------
// Parameters

template <typename T> struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
    data.assign(std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>()), T(0));
  }
  std::size_t size() const { return data.size(); }
};

// Block order: conv0.weight, conv0.bias, conv1.weight, ..., head.weight, head.bias.
// Conv weights are [out][in][k][k]; the head weight is [labels][channels].
template <typename T> struct ModelParams {
  ArchitectureDescriptor arch;
  std::vector<Tensor<T>> blocks;
  std::uint64_t generation = 0; // bumped by every optimizer update

  ModelParams() = default;
  explicit ModelParams(ArchitectureDescriptor a) : arch(std::move(a)) {
    const auto geo = arch.geometry();
    for (const auto& g : geo) {
      blocks.emplace_back(std::vector<std::size_t>{g.conv.c, g.input.c, g.kernel, g.kernel});
      blocks.emplace_back(std::vector<std::size_t>{g.conv.c});
    }
    blocks.emplace_back(std::vector<std::size_t>{arch.n_labels(), geo.back().conv.c});
    blocks.emplace_back(std::vector<std::size_t>{arch.n_labels()});
  }

  std::size_t n_conv() const { return arch.blocks.size(); }
  Tensor<T>& conv_weight(std::size_t b) { return blocks[2 * b]; }
  Tensor<T>& conv_bias(std::size_t b) { return blocks[2 * b + 1]; }
  const Tensor<T>& conv_weight(std::size_t b) const { return blocks[2 * b]; }
  const Tensor<T>& conv_bias(std::size_t b) const { return blocks[2 * b + 1]; }
  Tensor<T>& head_weight() { return blocks[blocks.size() - 2]; }
  Tensor<T>& head_bias() { return blocks.back(); }
  const Tensor<T>& head_weight() const { return blocks[blocks.size() - 2]; }
  const Tensor<T>& head_bias() const { return blocks.back(); }

  static bool is_bias(std::size_t block_index) { return block_index % 2 == 1; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n += b.size();
    return n;
  }

  // Zero-shaped copy for gradients and optimizer moments.
  ModelParams zeros_like() const {
    ModelParams z = *this;
    for (auto& b : z.blocks) std::fill(b.data.begin(), b.data.end(), T(0));
    z.generation = 0;
    return z;
  }

  template <typename U> ModelParams<U> cast() const {
    ModelParams<U> out;
    out.arch = arch;
    for (const auto& b : blocks) {
      Tensor<U> t;
      t.shape = b.shape;
      t.data.assign(b.data.begin(), b.data.end());
      out.blocks.push_back(std::move(t));
    }
    return out;
  }

  bool all_finite() const {
    for (const auto& b : blocks)
      for (T v : b.data)
        if (!std::isfinite(v)) return false;
    return true;
  }

  // FNV-1a over the parameter bytes.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& b : blocks) {
      const auto* p = reinterpret_cast<const unsigned char*>(b.data.data());
      for (std::size_t i = 0; i < b.data.size() * sizeof(T); ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
      }
    }
    return h;
  }
};

// He-normal conv weights, a small normal head and zero biases.
template <typename T> ModelParams<T> init_params(const ArchitectureDescriptor& arch, std::uint64_t seed) {
  ModelParams<T> p(arch);
  Rng rng(derive_seed(seed, stream::init));
  for (std::size_t b = 0; b < p.n_conv(); ++b) {
    auto& w = p.conv_weight(b);
    const double fan_in = static_cast<double>(w.shape[1] * w.shape[2] * w.shape[3]);
    const double sigma = std::sqrt(2.0 / fan_in);
    for (auto& v : w.data) v = static_cast<T>(rng.normal(0.0, sigma));
  }
  auto& head = p.head_weight();
  const double head_sigma = std::sqrt(1.0 / static_cast<double>(head.shape[1]));
  for (auto& v : head.data) v = static_cast<T>(rng.normal(0.0, head_sigma));
  return p;
}

// ---------------------------------------------------------------------------
// Forward

template <typename T> struct SampleCache {
  std::vector<std::vector<T>> padded_inputs; // per block, zero-padded input
  std::vector<std::vector<T>> activations;   // per block, post-ReLU conv output
  std::vector<std::vector<T>> pooled;        // per block
  std::vector<T> features;                   // global average of the last pooled map
  std::vector<T> logits;
};

template <typename T> struct ForwardCache {
  std::vector<SampleCache<T>> samples;
  const ModelParams<T>* params = nullptr;
  std::uint64_t generation = 0;

  // Activations A^k of the GradCAM target layer (last conv) for one sample.
  const std::vector<T>& target_activations(std::size_t i) const { return samples[i].activations.back(); }
};

namespace detail {

template <typename T> T sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

template <typename T>
void pad_input(std::span<const T> in, const Shape3& s, std::size_t pad, std::vector<T>& out) {
  const std::size_t ph = s.h + 2 * pad, pw = s.w + 2 * pad;
  out.assign(s.c * ph * pw, T(0));
  for (std::size_t c = 0; c < s.c; ++c)
    for (std::size_t y = 0; y < s.h; ++y)
      std::copy_n(in.data() + (c * s.h + y) * s.w, s.w, out.data() + (c * ph + y + pad) * pw + pad);
}

template <typename T>
void conv_forward(const std::vector<T>& in_pad, const BlockGeometry& g, const Tensor<T>& weight,
                  const Tensor<T>& bias, std::vector<T>& out) {
  const std::size_t ph = g.input.h + 2 * g.pad, pw = g.input.w + 2 * g.pad;
  const std::size_t K = g.kernel, S = g.stride, OH = g.conv.h, OW = g.conv.w;
  out.assign(g.conv.size(), T(0));
  for (std::size_t co = 0; co < g.conv.c; ++co) {
    T* o = out.data() + co * OH * OW;
    std::fill(o, o + OH * OW, bias.data[co]);
    for (std::size_t ci = 0; ci < g.input.c; ++ci) {
      const T* src = in_pad.data() + ci * ph * pw;
      const T* wk = weight.data.data() + (co * g.input.c + ci) * K * K;
      for (std::size_t ky = 0; ky < K; ++ky) {
        for (std::size_t kx = 0; kx < K; ++kx) {
          const T w = wk[ky * K + kx];
          for (std::size_t oy = 0; oy < OH; ++oy) {
            T* orow = o + oy * OW;
            const T* irow = src + (oy * S + ky) * pw + kx;
            if (S == 1) {
              for (std::size_t ox = 0; ox < OW; ++ox) orow[ox] += w * irow[ox];
            } else {
              for (std::size_t ox = 0; ox < OW; ++ox) orow[ox] += w * irow[ox * S];
            }
          }
        }
      }
    }
  }
}

// Gradients of one conv layer given dL/d(conv output). Accumulates into
// d_weight/d_bias; writes dL/d(padded input) into d_in_pad when requested.
template <typename T>
void conv_backward(const std::vector<T>& in_pad, const BlockGeometry& g, const Tensor<T>& weight,
                   const std::vector<T>& d_out, Tensor<T>& d_weight, Tensor<T>& d_bias, std::vector<T>* d_in_pad) {
  const std::size_t ph = g.input.h + 2 * g.pad, pw = g.input.w + 2 * g.pad;
  const std::size_t K = g.kernel, S = g.stride, OH = g.conv.h, OW = g.conv.w;
  if (d_in_pad) d_in_pad->assign(g.input.c * ph * pw, T(0));
  for (std::size_t co = 0; co < g.conv.c; ++co) {
    const T* dout = d_out.data() + co * OH * OW;
    T db = T(0);
    for (std::size_t i = 0; i < OH * OW; ++i) db += dout[i];
    d_bias.data[co] += db;
    for (std::size_t ci = 0; ci < g.input.c; ++ci) {
      const T* src = in_pad.data() + ci * ph * pw;
      const T* wk = weight.data.data() + (co * g.input.c + ci) * K * K;
      T* dwk = d_weight.data.data() + (co * g.input.c + ci) * K * K;
      T* dsrc = d_in_pad ? d_in_pad->data() + ci * ph * pw : nullptr;
      for (std::size_t ky = 0; ky < K; ++ky) {
        for (std::size_t kx = 0; kx < K; ++kx) {
          const T w = wk[ky * K + kx];
          T dw = T(0);
          for (std::size_t oy = 0; oy < OH; ++oy) {
            const T* drow = dout + oy * OW;
            const T* irow = src + (oy * S + ky) * pw + kx;
            if (S == 1) {
              for (std::size_t ox = 0; ox < OW; ++ox) dw += drow[ox] * irow[ox];
              if (dsrc) {
                T* dirow = dsrc + (oy * S + ky) * pw + kx;
                for (std::size_t ox = 0; ox < OW; ++ox) dirow[ox] += w * drow[ox];
              }
            } else {
              for (std::size_t ox = 0; ox < OW; ++ox) dw += drow[ox] * irow[ox * S];
              if (dsrc) {
                T* dirow = dsrc + (oy * S + ky) * pw + kx;
                for (std::size_t ox = 0; ox < OW; ++ox) dirow[ox * S] += w * drow[ox];
              }
            }
          }
          dwk[ky * K + kx] += dw;
        }
      }
    }
  }
}

template <typename T> void avg_pool2(const std::vector<T>& in, const Shape3& s, const Shape3& ps, std::vector<T>& out) {
  out.assign(ps.size(), T(0));
  for (std::size_t c = 0; c < s.c; ++c)
    for (std::size_t y = 0; y < ps.h; ++y)
      for (std::size_t x = 0; x < ps.w; ++x) {
        const T* p = in.data() + (c * s.h + 2 * y) * s.w + 2 * x;
        out[(c * ps.h + y) * ps.w + x] = (p[0] + p[1] + p[s.w] + p[s.w + 1]) * T(0.25);
      }
}

template <typename T>
void avg_pool2_backward(const std::vector<T>& d_pooled, const Shape3& s, const Shape3& ps, std::vector<T>& d_in) {
  d_in.assign(s.size(), T(0));
  for (std::size_t c = 0; c < s.c; ++c)
    for (std::size_t y = 0; y < ps.h; ++y)
      for (std::size_t x = 0; x < ps.w; ++x) {
        const T g = d_pooled[(c * ps.h + y) * ps.w + x] * T(0.25);
        T* p = d_in.data() + (c * s.h + 2 * y) * s.w + 2 * x;
        p[0] = g;
        p[1] = g;
        p[s.w] = g;
        p[s.w + 1] = g;
      }
}

template <typename T> std::vector<T> to_chw(const Image& img, const ArchitectureDescriptor& arch) {
  std::vector<T> out(img.size());
  for (std::size_t c = 0; c < img.channels; ++c) {
    const bool standardize = !arch.input_mean.empty();
    const double m = standardize ? arch.input_mean[c] : 0.0, inv = standardize ? 1.0 / arch.input_std[c] : 1.0;
    for (std::size_t i = 0; i < img.pixels(); ++i) {
      const double v = static_cast<double>(img.data[i * img.channels + c]);
      out[c * img.pixels() + i] = standardize ? static_cast<T>((v - m) * inv) : static_cast<T>(v);
    }
  }
  return out;
}

} // namespace detail

template <typename T>
SampleCache<T> forward_sample(const ModelParams<T>& params, const Image& img, const std::vector<BlockGeometry>& geo) {
  if (img.height != params.arch.height || img.width != params.arch.width || img.channels != params.arch.in_channels)
    throw ContractError("input is " + std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                        std::to_string(img.channels) + " but the model expects " + std::to_string(params.arch.height) +
                        "x" + std::to_string(params.arch.width) + "x" + std::to_string(params.arch.in_channels));
  SampleCache<T> cache;
  const std::size_t nb = geo.size();
  cache.padded_inputs.resize(nb);
  cache.activations.resize(nb);
  cache.pooled.resize(nb);
  std::vector<T> x = detail::to_chw<T>(img, params.arch);
  for (std::size_t b = 0; b < nb; ++b) {
    const auto& g = geo[b];
    detail::pad_input<T>(b == 0 ? std::span<const T>(x) : std::span<const T>(cache.pooled[b - 1]), g.input, g.pad,
                         cache.padded_inputs[b]);
    detail::conv_forward(cache.padded_inputs[b], g, params.conv_weight(b), params.conv_bias(b), cache.activations[b]);
    for (auto& v : cache.activations[b]) v = v > T(0) ? v : T(0);
    detail::avg_pool2(cache.activations[b], g.conv, g.pooled, cache.pooled[b]);
  }
  const auto& last = geo.back().pooled;
  const std::size_t area = last.h * last.w;
  cache.features.assign(last.c, T(0));
  for (std::size_t c = 0; c < last.c; ++c) {
    T s = T(0);
    for (std::size_t i = 0; i < area; ++i) s += cache.pooled.back()[c * area + i];
    cache.features[c] = s / static_cast<T>(area);
  }
  const auto& hw = params.head_weight();
  const std::size_t L = params.arch.n_labels();
  cache.logits.assign(L, T(0));
  for (std::size_t l = 0; l < L; ++l) {
    T z = params.head_bias().data[l];
    for (std::size_t c = 0; c < last.c; ++c) z += hw.data[l * last.c + c] * cache.features[c];
    cache.logits[l] = z;
  }
  return cache;
}

template <typename T> struct ForwardResult {
  std::vector<std::vector<T>> probabilities; // [sample][label]
  ForwardCache<T> cache;
};

template <typename T>
ForwardResult<T> forward(const ModelParams<T>& params, std::span<const Image> batch, std::size_t threads = 1) {
  const auto geo = params.arch.geometry();
  ForwardResult<T> r;
  r.cache.samples.resize(batch.size());
  r.cache.params = &params;
  r.cache.generation = params.generation;
  r.probabilities.resize(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    r.cache.samples[i] = forward_sample(params, batch[i], geo);
    for (T z : r.cache.samples[i].logits) r.probabilities[i].push_back(detail::sigmoid(z));
  });
  return r;
}

// Probabilities only; does not keep activations.
template <typename T>
std::vector<std::vector<double>> predict(const ModelParams<T>& params, std::span<const Image> images,
                                         std::size_t threads = 1) {
  const auto geo = params.arch.geometry();
  std::vector<std::vector<double>> out(images.size());
  parallel_for(images.size(), threads, [&](std::size_t i) {
    const auto cache = forward_sample(params, images[i], geo);
    for (T z : cache.logits) out[i].push_back(static_cast<double>(detail::sigmoid(z)));
  });
  return out;
}

// ---------------------------------------------------------------------------
// Loss and gradients

inline constexpr double kProbEpsilon = 1e-7;

template <typename T> double l2_penalty(const ModelParams<T>& params) {
  double s = 0.0;
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    if (ModelParams<T>::is_bias(b)) continue;
    for (T v : params.blocks[b].data) s += static_cast<double>(v) * static_cast<double>(v);
  }
  return s;
}

// Mean binary cross-entropy over batch and labels plus l2_lambda * sum of
// squared weights (biases excluded). Probabilities are clamped to [eps, 1-eps].
template <typename T>
double bce_l2_loss(const std::vector<std::vector<T>>& probabilities, const std::vector<std::vector<bool>>& labels,
                   const ModelParams<T>& params, double l2_lambda) {
  if (probabilities.size() != labels.size()) throw ContractError("bce_l2_loss: batch size mismatch");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    if (probabilities[i].size() != labels[i].size()) throw ContractError("bce_l2_loss: label count mismatch");
    for (std::size_t l = 0; l < labels[i].size(); ++l) {
      const double p = std::clamp(static_cast<double>(probabilities[i][l]), kProbEpsilon, 1.0 - kProbEpsilon);
      total += labels[i][l] ? -std::log(p) : -std::log(1.0 - p);
      ++count;
    }
  }
  const double bce = count ? total / static_cast<double>(count) : 0.0;
  return bce + (l2_lambda != 0.0 ? l2_lambda * l2_penalty(params) : 0.0);
}

namespace detail {

// Backpropagates dL/dlogits for one sample through head, pooling and convs,
// accumulating parameter gradients into `grads`.
template <typename T>
void backward_sample(const ModelParams<T>& params, const SampleCache<T>& cache, const std::vector<BlockGeometry>& geo,
                     const std::vector<T>& d_logits, ModelParams<T>& grads) {
  const std::size_t L = params.arch.n_labels();
  const auto& last = geo.back().pooled;
  const std::size_t C = last.c, area = last.h * last.w;
  const auto& hw = params.head_weight();
  auto& dhw = grads.head_weight();
  auto& dhb = grads.head_bias();
  std::vector<T> d_features(C, T(0));
  for (std::size_t l = 0; l < L; ++l) {
    const T dz = d_logits[l];
    if (dz == T(0)) continue;
    dhb.data[l] += dz;
    for (std::size_t c = 0; c < C; ++c) {
      dhw.data[l * C + c] += dz * cache.features[c];
      d_features[c] += dz * hw.data[l * C + c];
    }
  }
  std::vector<T> d_pooled(last.size());
  for (std::size_t c = 0; c < C; ++c)
    std::fill_n(d_pooled.begin() + static_cast<std::ptrdiff_t>(c * area), area, d_features[c] / static_cast<T>(area));

  std::vector<T> d_act, d_in_pad;
  for (std::size_t bi = geo.size(); bi-- > 0;) {
    const auto& g = geo[bi];
    detail::avg_pool2_backward(d_pooled, g.conv, g.pooled, d_act);
    const auto& act = cache.activations[bi];
    for (std::size_t i = 0; i < d_act.size(); ++i)
      if (!(act[i] > T(0))) d_act[i] = T(0);
    detail::conv_backward(cache.padded_inputs[bi], g, params.conv_weight(bi), d_act, grads.conv_weight(bi),
                          grads.conv_bias(bi), bi > 0 ? &d_in_pad : nullptr);
    if (bi > 0) {
      const auto& s = g.input;
      const std::size_t ph = s.h + 2 * g.pad, pw = s.w + 2 * g.pad;
      d_pooled.assign(s.size(), T(0));
      for (std::size_t c = 0; c < s.c; ++c)
        for (std::size_t y = 0; y < s.h; ++y)
          std::copy_n(d_in_pad.data() + (c * ph + y + g.pad) * pw + g.pad, s.w, d_pooled.data() + (c * s.h + y) * s.w);
    }
  }
}

template <typename T> void check_cache(const ModelParams<T>& params, const ForwardCache<T>& cache) {
  if (cache.params != &params || cache.generation != params.generation)
    throw ContractError("stale forward cache: it was produced by different or since-updated parameters");
}

} // namespace detail

// dL/dlogit for the clamped BCE term; zero where the clamp is active.
template <typename T>
std::vector<std::vector<T>> logit_gradients(const ForwardCache<T>& cache, const std::vector<std::vector<bool>>& labels) {
  const std::size_t B = cache.samples.size();
  std::vector<std::vector<T>> d(B);
  for (std::size_t i = 0; i < B; ++i) {
    const auto& z = cache.samples[i].logits;
    if (labels[i].size() != z.size()) throw ContractError("backward: label count mismatch");
    const T scale = T(1) / static_cast<T>(B * z.size());
    d[i].resize(z.size());
    for (std::size_t l = 0; l < z.size(); ++l) {
      const T p = detail::sigmoid(z[l]);
      const bool clamped = static_cast<double>(p) < kProbEpsilon || static_cast<double>(p) > 1.0 - kProbEpsilon;
      d[i][l] = clamped ? T(0) : (p - (labels[i][l] ? T(1) : T(0))) * scale;
    }
  }
  return d;
}

// Exact gradient of bce_l2_loss with respect to every parameter. Per-sample
// gradients are computed independently and summed in sample order, so the
// result does not depend on `threads`.
template <typename T>
ModelParams<T> backward(const ForwardCache<T>& cache, const std::vector<std::vector<bool>>& labels,
                        const ModelParams<T>& params, double l2_lambda, std::size_t threads = 1) {
  detail::check_cache(params, cache);
  if (labels.size() != cache.samples.size()) throw ContractError("backward: batch size mismatch");
  const auto geo = params.arch.geometry();
  const auto d_logits = logit_gradients(cache, labels);
  std::vector<ModelParams<T>> per_sample(cache.samples.size(), params.zeros_like());
  parallel_for(cache.samples.size(), threads, [&](std::size_t i) {
    detail::backward_sample(params, cache.samples[i], geo, d_logits[i], per_sample[i]);
  });
  ModelParams<T> grads = params.zeros_like();
  for (const auto& g : per_sample)
    for (std::size_t b = 0; b < grads.blocks.size(); ++b)
      for (std::size_t k = 0; k < grads.blocks[b].size(); ++k) grads.blocks[b].data[k] += g.blocks[b].data[k];
  if (l2_lambda != 0.0) {
    for (std::size_t b = 0; b < grads.blocks.size(); ++b) {
      if (ModelParams<T>::is_bias(b)) continue;
      for (std::size_t k = 0; k < grads.blocks[b].size(); ++k)
        grads.blocks[b].data[k] += static_cast<T>(2.0 * l2_lambda) * params.blocks[b].data[k];
    }
  }
  return grads;
}

// d(logit_label)/d(A), A being the post-ReLU output of the last conv layer.
// The head and pooling are linear, so this does not depend on the input.
template <typename T> std::vector<T> target_layer_gradient(const ModelParams<T>& params, std::size_t label) {
  if (label >= params.arch.n_labels())
    throw ContractError("label index " + std::to_string(label) + " out of range");
  const auto geo = params.arch.geometry();
  const auto& g = geo.back();
  const std::size_t area = g.pooled.h * g.pooled.w;
  std::vector<T> d_pooled(g.pooled.size());
  for (std::size_t c = 0; c < g.pooled.c; ++c)
    std::fill_n(d_pooled.begin() + static_cast<std::ptrdiff_t>(c * area), area,
                params.head_weight().data[label * g.pooled.c + c] / static_cast<T>(area));
  std::vector<T> d_act;
  detail::avg_pool2_backward(d_pooled, g.conv, g.pooled, d_act);
  return d_act;
}

// ---------------------------------------------------------------------------
// Optimizer

struct TrainConfig {
  double learning_rate = 5e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double l2_lambda = 5e-5;
  std::size_t batch_size = 32;
  std::size_t epochs = 5;
  double erasing_prob = 0.3;
  double erasing_area_min = 0.05;
  double erasing_area_max = 0.40;
  double erasing_aspect_min = 0.3;
  double erasing_aspect_max = 3.3;
  bool standardize_input = true;
  std::uint64_t seed = 7;
  std::size_t threads = 1;
};

inline void validate(const TrainConfig& c) {
  if (!(c.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0) || !(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0))
    throw ConfigError("Adam decay rates must lie in [0,1)");
  if (!(c.l2_lambda >= 0.0)) throw ConfigError("l2_lambda must be non-negative");
  if (c.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (c.epochs == 0) throw ConfigError("epochs must be positive");
  if (!(c.erasing_prob >= 0.0 && c.erasing_prob <= 1.0)) throw ConfigError("erasing_prob must lie in [0,1]");
  if (!(c.erasing_area_min > 0.0 && c.erasing_area_min <= c.erasing_area_max && c.erasing_area_max <= 1.0))
    throw ConfigError("erasing area range must satisfy 0 < min <= max <= 1");
  if (!(c.erasing_aspect_min > 0.0 && c.erasing_aspect_min <= c.erasing_aspect_max))
    throw ConfigError("erasing aspect range must satisfy 0 < min <= max");
}

template <typename T> struct AdamState {
  ModelParams<T> m;
  ModelParams<T> v;
  std::uint64_t t = 0;

  AdamState() = default;
  explicit AdamState(const ModelParams<T>& params) : m(params.zeros_like()), v(params.zeros_like()) {}
};

// One bias-corrected Adam update at step t (t >= 1).
template <typename T>
void adam_step(ModelParams<T>& params, const ModelParams<T>& grads, AdamState<T>& state, std::uint64_t t,
               const TrainConfig& config) {
  if (t < 1) throw ContractError("adam_step: t must be >= 1");
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (std::size_t b = 0; b < params.blocks.size(); ++b) {
    auto& p = params.blocks[b].data;
    const auto& g = grads.blocks[b].data;
    auto& m = state.m.blocks[b].data;
    auto& v = state.v.blocks[b].data;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = static_cast<double>(g[k]);
      m[k] = static_cast<T>(b1 * static_cast<double>(m[k]) + (1.0 - b1) * gk);
      v[k] = static_cast<T>(b2 * static_cast<double>(v[k]) + (1.0 - b2) * gk * gk);
      const double m_hat = static_cast<double>(m[k]) / c1;
      const double v_hat = static_cast<double>(v[k]) / c2;
      p[k] = static_cast<T>(static_cast<double>(p[k]) - config.learning_rate * m_hat / (std::sqrt(v_hat) + config.adam_epsilon));
    }
  }
  state.t = t;
  ++params.generation;
}

// ---------------------------------------------------------------------------
// RandomErasing

struct ErasedRect {
  std::size_t top = 0, left = 0, height = 0, width = 0;
};

struct ErasingResult {
  Image image;
  std::optional<ErasedRect> rect;
};

// With probability erasing_prob, fills one axis-aligned rectangle with
// uniform [0,1) noise. The rectangle's area fraction is uniform in the area
// range and its aspect ratio (height/width) uniform in the aspect range; a
// draw whose rounded rectangle does not fit, or whose rounded area leaves the
// area range, is redrawn up to 10 times before the erasure is skipped.
inline ErasingResult random_erasing(const Image& image, Rng& rng, const TrainConfig& c) {
  ErasingResult r{image, std::nullopt};
  if (!rng.bernoulli(c.erasing_prob)) return r;
  const double total = static_cast<double>(image.pixels());
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double area = rng.uniform(c.erasing_area_min, c.erasing_area_max) * total;
    const double aspect = rng.uniform(c.erasing_aspect_min, c.erasing_aspect_max);
    const auto h = static_cast<std::size_t>(std::llround(std::sqrt(area * aspect)));
    const auto w = static_cast<std::size_t>(std::llround(std::sqrt(area / aspect)));
    if (h == 0 || w == 0 || h > image.height || w > image.width) continue;
    const double frac = static_cast<double>(h * w) / total;
    if (frac < c.erasing_area_min || frac > c.erasing_area_max) continue;
    ErasedRect rect;
    rect.height = h;
    rect.width = w;
    rect.top = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(image.height - h)));
    rect.left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(image.width - w)));
    for (std::size_t y = rect.top; y < rect.top + h; ++y)
      for (std::size_t x = rect.left; x < rect.left + w; ++x)
        for (std::size_t ch = 0; ch < image.channels; ++ch) r.image.at(y, x, ch) = static_cast<float>(rng.uniform());
    r.rect = rect;
    return r;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Training

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  std::vector<double> val_auc;
};

template <typename T> struct TrainResult {
  ModelParams<T> params;
  std::vector<EpochRecord> history;
};

struct LabeledImages {
  std::vector<Image> images;
  std::vector<std::vector<bool>> labels;
  std::vector<std::string> ids;
};

inline LabeledImages load_split(const DatasetManifest& manifest, Split split, const fs::path& root, bool flip = true) {
  LabeledImages out;
  for (const auto* r : manifest.in_split(split)) {
    out.images.push_back(load_sample_image(*r, root, flip));
    out.labels.push_back(r->labels);
    out.ids.push_back(r->sample_id);
  }
  return out;
}

inline std::vector<double> label_aucs(const std::vector<std::vector<double>>& probs,
                                      const std::vector<std::vector<bool>>& labels, std::size_t n_labels) {
  std::vector<double> aucs;
  for (std::size_t l = 0; l < n_labels; ++l) {
    std::vector<double> s;
    std::vector<bool> t;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      s.push_back(probs[i][l]);
      t.push_back(labels[i][l]);
    }
    aucs.push_back(roc_auc(s, t, l));
  }
  return aucs;
}

// Sets each head bias to the log-odds of its label's training prevalence so
// the head weights are not spent on fitting the label prior.
template <typename T>
void init_head_bias_from_prevalence(ModelParams<T>& params, const std::vector<std::vector<bool>>& labels) {
  const std::size_t L = params.arch.n_labels();
  for (std::size_t l = 0; l < L; ++l) {
    double positives = 0.0;
    for (const auto& row : labels) positives += row[l] ? 1.0 : 0.0;
    const double n = static_cast<double>(labels.size());
    const double p = std::clamp((positives + 0.5) / (n + 1.0), 1e-4, 1.0 - 1e-4);
    params.head_bias().data[l] = static_cast<T>(std::log(p / (1.0 - p)));
  }
}

// Per-channel mean and population std over every pixel of the given images.
inline void fit_input_standardization(ArchitectureDescriptor& arch, std::span<const Image> images) {
  if (images.empty()) throw EmptyInputError("input standardization: no images");
  const std::size_t C = arch.in_channels;
  std::vector<double> sum(C, 0.0), sq(C, 0.0);
  double n = 0.0;
  for (const auto& im : images) {
    if (im.channels != C) throw ContractError("input standardization: channel count mismatch");
    for (std::size_t i = 0; i < im.pixels(); ++i)
      for (std::size_t c = 0; c < C; ++c) {
        const double v = static_cast<double>(im.data[i * C + c]);
        sum[c] += v;
        sq[c] += v * v;
      }
    n += static_cast<double>(im.pixels());
  }
  arch.input_mean.assign(C, 0.0);
  arch.input_std.assign(C, 1.0);
  for (std::size_t c = 0; c < C; ++c) {
    const double m = sum[c] / n;
    const double var = sq[c] / n - m * m;
    arch.input_mean[c] = m;
    arch.input_std[c] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
}

template <typename T> using EpochCallback = std::function<void(const EpochRecord&)>;

// Deterministic given config.seed: the epoch shuffle, the per-sample
// augmentation draws and the initialization come from separate named streams.
template <typename T>
TrainResult<T> train(const LabeledImages& train_set, const LabeledImages& val_set, const ArchitectureDescriptor& arch,
                     const TrainConfig& config, const EpochCallback<T>& on_epoch = {}) {
  validate(config);
  if (train_set.images.empty()) throw EmptyInputError("train: the Train split is empty");
  if (val_set.images.empty()) throw EmptyInputError("train: the Val split is empty");
  ArchitectureDescriptor model_arch = arch;
  if (config.standardize_input && model_arch.input_mean.empty())
    fit_input_standardization(model_arch, train_set.images);
  TrainResult<T> result{init_params<T>(model_arch, config.seed), {}};
  auto& params = result.params;
  init_head_bias_from_prevalence(params, train_set.labels);
  AdamState<T> adam(params);
  std::uint64_t step = 0;
  const std::size_t n = train_set.images.size();

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(config.seed, stream::shuffle, epoch));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      std::vector<Image> batch(end - start);
      std::vector<std::vector<bool>> labels(end - start);
      parallel_for(end - start, config.threads, [&](std::size_t j) {
        const std::size_t idx = order[start + j];
        Rng aug(derive_seed(config.seed, stream::augment, epoch, start + j));
        batch[j] = random_erasing(train_set.images[idx], aug, config).image;
        labels[j] = train_set.labels[idx];
      });
      auto fwd = forward<T>(params, batch, config.threads);
      const double loss = bce_l2_loss(fwd.probabilities, labels, params, config.l2_lambda);
      if (!std::isfinite(loss))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                            std::to_string(step + 1));
      const auto grads = backward(fwd.cache, labels, params, config.l2_lambda, config.threads);
      adam_step(params, grads, adam, ++step, config);
      if (!params.all_finite())
        throw TrainingError("non-finite parameters at epoch " + std::to_string(epoch + 1) + ", step " +
                            std::to_string(step));
      loss_sum += loss;
      ++batches;
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(batches);
    rec.val_auc = label_aucs(predict(params, val_set.images, config.threads), val_set.labels, arch.n_labels());
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint: "AXM1", u32 descriptor length, descriptor text, u32 block count,
// then per block u32 rank, u32 dims, little-endian f32 payload.

inline constexpr std::array<char, 4> kCheckpointMagic{'A', 'X', 'M', '1'};

template <typename T> std::string encode_checkpoint(const ModelParams<T>& params) {
  std::string out(kCheckpointMagic.data(), 4);
  const std::string arch = params.arch.to_text();
  detail::put_u32(out, static_cast<std::uint32_t>(arch.size()));
  out += arch;
  detail::put_u32(out, static_cast<std::uint32_t>(params.blocks.size()));
  for (const auto& b : params.blocks) {
    detail::put_u32(out, static_cast<std::uint32_t>(b.shape.size()));
    for (auto d : b.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (T v : b.data) detail::put_f32(out, static_cast<float>(v));
  }
  return out;
}

template <typename T> ModelParams<T> decode_checkpoint(const std::string& bytes, const std::string& origin = "<checkpoint>") {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (bytes.size() < pos + n)
      throw FormatError(origin + ": truncated checkpoint at byte offset " + std::to_string(bytes.size()) +
                        " (needed " + std::to_string(pos + n) + ")");
  };
  auto u32 = [&] {
    need(4);
    const auto v = detail::get_u32(bytes, pos);
    pos += 4;
    return v;
  };
  need(4);
  if (bytes.compare(0, 4, kCheckpointMagic.data(), 4) != 0)
    throw FormatError(origin + ": bad magic at byte offset 0 (expected AXM1)");
  pos = 4;
  const auto len = u32();
  need(len);
  const auto arch = ArchitectureDescriptor::from_text(bytes.substr(pos, len));
  pos += len;
  ModelParams<T> params(arch);
  const auto n_blocks = u32();
  if (n_blocks != params.blocks.size())
    throw FormatError(origin + ": expected " + std::to_string(params.blocks.size()) + " parameter blocks, found " +
                      std::to_string(n_blocks));
  for (auto& b : params.blocks) {
    const std::size_t block_offset = pos;
    const auto rank = u32();
    std::vector<std::size_t> shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(u32());
    if (shape != b.shape)
      throw FormatError(origin + ": parameter block shape mismatch at byte offset " + std::to_string(block_offset));
    need(4 * b.size());
    for (auto& v : b.data) {
      v = static_cast<T>(detail::get_f32(bytes, pos));
      pos += 4;
    }
  }
  if (pos != bytes.size()) throw FormatError(origin + ": trailing data at byte offset " + std::to_string(pos));
  return params;
}

template <typename T> void save_checkpoint(const ModelParams<T>& params, const fs::path& path) {
  write_file(path, encode_checkpoint(params));
}

template <typename T> ModelParams<T> load_checkpoint(const fs::path& path) {
  return decode_checkpoint<T>(read_file(path), path.string());
}

} // namespace axai
