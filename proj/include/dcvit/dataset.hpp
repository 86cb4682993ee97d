// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "dcvit/binio.hpp"
#include "dcvit/error.hpp"
#include "dcvit/rng.hpp"
#include "dcvit/tensor.hpp"

namespace dcvit {

/// Images in normalized input space plus optional integer labels.
struct Dataset {
  Tensor images;  // [n, c, h, w]
  std::optional<std::vector<int>> labels;

  std::int64_t size() const { return images.rank() == 0 ? 0 : images.dim(0); }
  bool labeled() const { return labels.has_value(); }

  const std::vector<int>& require_labels(const char* what) const {
    if (!labels) throw ValidationError(std::string(what) + " needs a labeled dataset");
    return *labels;
  }

  void validate(std::int64_t num_classes = 0) const {
    if (images.rank() != 4) throw ValidationError("dataset images must be [n, c, h, w], got " + shape_str(images.shape()));
    if (labels) {
      if (static_cast<std::int64_t>(labels->size()) != size())
        throw ValidationError(detail::concat("dataset has ", size(), " images but ", labels->size(), " labels"));
      for (auto l : *labels)
        if (l < 0 || (num_classes > 0 && l >= num_classes) || l > 0xffff)
          throw ValidationError(detail::concat("label ", l, " outside [0, ", num_classes, ")"));
    }
  }
};

// "DCDS" | u32 version | n, c, h, w as u64 | float32 pixels | u8 has_labels
// | n x u16 labels (only when has_labels = 1)
inline constexpr std::uint32_t kDatasetVersion = 1;

inline std::vector<std::uint8_t> serialize_dataset(const Dataset& ds) {
  ds.validate();
  binio::Writer w;
  w.magic("DCDS");
  w.u32(kDatasetVersion);
  for (int i = 0; i < 4; ++i) w.u64(static_cast<std::uint64_t>(ds.images.dim(i)));
  w.f32s(ds.images.data());
  w.u8(ds.labeled() ? 1 : 0);
  if (ds.labels)
    for (auto l : *ds.labels) w.u16(static_cast<std::uint16_t>(l));
  return w.buffer();
}

inline Dataset deserialize_dataset(binio::Reader r) {
  r.expect_magic("DCDS");
  const auto version = r.u32();
  if (version != kDatasetVersion) throw IoError(detail::concat(r.what(), ": unsupported dataset version ", version));
  Shape shape(4);
  for (auto& e : shape) e = static_cast<std::int64_t>(r.u64());
  Dataset ds{Tensor(shape), std::nullopt};
  r.f32s(ds.images.data());
  const auto flag = r.u8();
  if (flag > 1) throw IoError(r.what() + ": bad label flag");
  if (flag == 1) {
    ds.labels.emplace(static_cast<std::size_t>(shape[0]));
    for (auto& l : *ds.labels) l = r.u16();
  }
  if (!r.at_end()) throw IoError(r.what() + ": trailing bytes");
  return ds;
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  binio::Writer w;
  const auto bytes = serialize_dataset(ds);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

inline Dataset load_dataset(const std::string& path) { return deserialize_dataset(binio::Reader::from_file(path)); }

/// Procedural class-separable images. Class c is an oriented sinusoidal
/// grating (orientation and frequency fixed per class up to jitter, phase
/// random per sample), overlaid with a weaker grating of random orientation
/// and frequency, a small per-class colour offset and Gaussian pixel noise.
/// Sample i has label i % classes, so the histogram is exactly uniform.
inline Dataset gen_toy_dataset(std::int64_t classes, std::int64_t per_class, std::int64_t image_size,
                               std::uint64_t seed, std::uint64_t split = 0, std::int64_t channels = 3,
                               double noise = 1.3, double distractor = 1.0) {
  if (classes < 2) throw ValidationError("toy dataset needs at least 2 classes");
  if (per_class < 1 || image_size < 2 || channels < 1) throw ValidationError("toy dataset geometry must be positive");
  Rng rng(seed, streams::kData + (split << 8));
  Rng colour_rng(seed, streams::kData);  // class colours are shared across splits
  std::vector<double> colour(static_cast<std::size_t>(classes * channels));
  for (auto& v : colour) v = colour_rng.uniform(-0.2, 0.2);

  const auto n = classes * per_class, s = image_size;
  Dataset ds{Tensor({n, channels, s, s}), std::vector<int>(static_cast<std::size_t>(n))};
  const double pi = std::numbers::pi;
  for (std::int64_t i = 0; i < n; ++i) {
    const auto c = i % classes;
    (*ds.labels)[static_cast<std::size_t>(i)] = static_cast<int>(c);
    const double theta = pi * static_cast<double>(c) / static_cast<double>(classes) + rng.uniform(-0.1, 0.1);
    const double cycles = (2.0 + 1.5 * static_cast<double>(c % 3)) * rng.uniform(0.85, 1.15);
    const double phase = rng.uniform(0.0, 2.0 * pi);
    const double amp = rng.uniform(0.8, 1.2);
    const double kx = 2.0 * pi * cycles * std::cos(theta) / static_cast<double>(s);
    const double ky = 2.0 * pi * cycles * std::sin(theta) / static_cast<double>(s);
    const double d_theta = rng.uniform(0.0, pi), d_cycles = rng.uniform(1.5, 6.0), d_phase = rng.uniform(0.0, 2.0 * pi);
    const double dx = 2.0 * pi * d_cycles * std::cos(d_theta) / static_cast<double>(s);
    const double dy = 2.0 * pi * d_cycles * std::sin(d_theta) / static_cast<double>(s);
    float* img = ds.images.ptr() + i * channels * s * s;
    for (std::int64_t ch = 0; ch < channels; ++ch) {
      const double offset = colour[static_cast<std::size_t>(c * channels + ch)];
      const double gain = 1.0 - 0.15 * static_cast<double>(ch);
      for (std::int64_t y = 0; y < s; ++y)
        for (std::int64_t x = 0; x < s; ++x) {
          const auto fx = static_cast<double>(x), fy = static_cast<double>(y);
          const double v = gain * (amp * std::sin(kx * fx + ky * fy + phase) +
                                   distractor * std::sin(dx * fx + dy * fy + d_phase));
          img[(ch * s + y) * s + x] = static_cast<float>(v + offset + noise * rng.normal());
        }
    }
  }
  return ds;
}

/// Uniform sample of `samples` distinct images without replacement, labels
/// stripped. Indices are kept in increasing order.
inline Dataset sample_tiny(const Dataset& train, std::int64_t samples, std::uint64_t seed) {
  if (samples < 1 || samples > train.size())
    throw ValidationError(detail::concat("cannot sample ", samples, " images from a set of ", train.size()));
  Rng rng(seed, streams::kTinySample);
  auto perm = rng.permutation(train.size());
  perm.resize(static_cast<std::size_t>(samples));
  std::sort(perm.begin(), perm.end());
  const auto per = train.images.numel() / train.size();
  Shape shape = train.images.shape();
  shape[0] = samples;
  Dataset out{Tensor(shape), std::nullopt};
  for (std::size_t i = 0; i < perm.size(); ++i)
    std::copy_n(train.images.ptr() + perm[i] * per, per, out.images.ptr() + static_cast<std::int64_t>(i) * per);
  return out;
}

/// Random horizontal flip and random resized square crop (area fraction in
/// [min_scale, 1]) with bilinear resampling back to the input size.
template <typename T>
BasicTensor<T> flip_crop(const BasicTensor<T>& images, Rng& rng, double min_scale = 0.67, bool flip = true) {
  const auto n = images.dim(0), ch = images.dim(1), h = images.dim(2), w = images.dim(3);
  BasicTensor<T> out(images.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    const bool mirror = flip && rng.bernoulli(0.5);
    const double side = std::sqrt(rng.uniform(min_scale, 1.0));
    const double ch_h = side * static_cast<double>(h), ch_w = side * static_cast<double>(w);
    const double y0 = rng.uniform(0.0, static_cast<double>(h) - ch_h);
    const double x0 = rng.uniform(0.0, static_cast<double>(w) - ch_w);
    for (std::int64_t c = 0; c < ch; ++c) {
      const T* src = images.ptr() + (i * ch + c) * h * w;
      T* dst = out.ptr() + (i * ch + c) * h * w;
      for (std::int64_t y = 0; y < h; ++y) {
        const double sy = std::clamp(y0 + (static_cast<double>(y) + 0.5) * ch_h / static_cast<double>(h) - 0.5, 0.0,
                                     static_cast<double>(h - 1));
        const auto y_lo = static_cast<std::int64_t>(sy);
        const auto y_hi = std::min(y_lo + 1, h - 1);
        const double fy = sy - static_cast<double>(y_lo);
        for (std::int64_t x = 0; x < w; ++x) {
          const auto xd = mirror ? w - 1 - x : x;
          const double sx = std::clamp(x0 + (static_cast<double>(xd) + 0.5) * ch_w / static_cast<double>(w) - 0.5,
                                       0.0, static_cast<double>(w - 1));
          const auto x_lo = static_cast<std::int64_t>(sx);
          const auto x_hi = std::min(x_lo + 1, w - 1);
          const double fx = sx - static_cast<double>(x_lo);
          const double top = (1 - fx) * src[y_lo * w + x_lo] + fx * src[y_lo * w + x_hi];
          const double bot = (1 - fx) * src[y_hi * w + x_lo] + fx * src[y_hi * w + x_hi];
          dst[y * w + x] = static_cast<T>((1 - fy) * top + fy * bot);
        }
      }
    }
  }
  return out;
}

}  // namespace dcvit
