// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <string>
#include <vector>

#include "dcvit/error.hpp"
#include "dcvit/rng.hpp"
#include "dcvit/vit.hpp"

namespace dcvit {

/// How the retained MLP units of a compressed block are chosen/initialised.
enum class ReuseStrategy { Random, GeluMean, Reinit };

inline const char* to_string(ReuseStrategy s) {
  switch (s) {
    case ReuseStrategy::Random: return "random";
    case ReuseStrategy::GeluMean: return "gelu_mean";
    case ReuseStrategy::Reinit: return "reinit";
  }
  return "?";
}

inline ReuseStrategy parse_reuse_strategy(const std::string& s) {
  if (s == "random") return ReuseStrategy::Random;
  if (s == "gelu_mean") return ReuseStrategy::GeluMean;
  if (s == "reinit") return ReuseStrategy::Reinit;
  throw ValidationError("unknown reuse strategy '" + s + "' (random|gelu_mean|reinit)");
}

/// Retained units per block for drop ratio r_d: floor(mlp_hidden * (1 - r_d)),
/// with products within 1e-9 of an integer snapped to it.
inline std::int64_t hidden_units_for_ratio(std::int64_t mlp_hidden, double r_d) {
  if (!(r_d >= 0.0 && r_d <= 1.0))
    throw ValidationError(detail::concat("drop ratio ", r_d, " outside [0, 1]"));
  const double keep = static_cast<double>(mlp_hidden) * (1.0 - r_d);
  const double near = std::round(keep);
  if (std::abs(keep - near) < 1e-9) return static_cast<std::int64_t>(near);
  return static_cast<std::int64_t>(std::floor(keep));
}

/// Indices of the `count` largest scores (ties: lower index first), returned
/// in increasing index order.
inline std::vector<std::int64_t> top_units(const std::vector<double>& scores, std::int64_t count) {
  std::vector<std::int64_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::int64_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(count));
  std::sort(order.begin(), order.end());
  return order;
}

/// Replaces block `block` of `src` with an attention-free block whose MLP keeps
/// `hidden_units` units. Returns a new, independent model.
///
/// Random and GeluMean copy FC1 rows, FC1 bias entries and FC2 columns of the
/// retained units verbatim and keep the FC2 bias whole; Reinit keeps the
/// pruned shape but draws fresh weights. A block left with zero units has no
/// MLP branch at all and acts as the identity.
template <typename T>
Model<T> compress_block(const Model<T>& src, std::int64_t block, std::int64_t hidden_units,
                        ReuseStrategy strategy, const BasicTensor<T>* tiny_set, Rng& rng) {
  const auto& c = src.config;
  if (block < 0 || block >= c.depth)
    throw UsageError(detail::concat("block index ", block, " outside [0, ", c.depth, ")"));
  if (src.specs[static_cast<std::size_t>(block)].compressed())
    throw UsageError(detail::concat("block ", block, " is already compressed"));
  if (hidden_units < 0 || hidden_units > c.mlp_hidden)
    throw ValidationError(detail::concat("hidden_units ", hidden_units, " outside [0, ", c.mlp_hidden, "]"));
  if (strategy == ReuseStrategy::GeluMean && (tiny_set == nullptr || tiny_set->dim(0) == 0))
    throw UsageError("gelu_mean reuse needs a non-empty tiny set");

  std::vector<std::int64_t> keep;
  if (strategy == ReuseStrategy::GeluMean) {
    keep = top_units(mlp_activation_means(src, block, *tiny_set), hidden_units);
  } else {
    auto perm = rng.permutation(c.mlp_hidden);
    keep.assign(perm.begin(), perm.begin() + hidden_units);
    std::sort(keep.begin(), keep.end());
  }

  Model<T> out = src.clone();
  const auto p = block_prefix(block);
  for (const char* name : {"ln1.weight", "ln1.bias", "attn.qkv.weight", "attn.qkv.bias", "attn.proj.weight",
                           "attn.proj.bias"})
    out.params.erase(p + name);

  const auto d = c.embed_dim, h_full = c.mlp_hidden, h = hidden_units;
  if (h == 0) {
    out.params.erase_prefix(p + "ln2.");
    out.params.erase_prefix(p + "mlp.");
  } else {
    const auto& w1 = src.params.at(p + "mlp.fc1.weight");
    const auto& b1 = src.params.at(p + "mlp.fc1.bias");
    const auto& w2 = src.params.at(p + "mlp.fc2.weight");
    BasicTensor<T> nw1({h, d}), nb1({h}), nw2({d, h});
    if (strategy == ReuseStrategy::Reinit) {
      nw1 = detail::trunc_normal<T>({h, d}, rng);
      nw2 = detail::trunc_normal<T>({d, h}, rng);
      out.params.set(p + "mlp.fc2.bias", BasicTensor<T>::zeros({d}));
    } else {
      for (std::int64_t t = 0; t < h; ++t) {
        const auto j = keep[static_cast<std::size_t>(t)];
        std::copy_n(w1.ptr() + j * d, d, nw1.ptr() + t * d);
        nb1[t] = b1[j];
        for (std::int64_t r = 0; r < d; ++r) nw2[r * h + t] = w2[r * h_full + j];
      }
    }
    out.params.set(p + "mlp.fc1.weight", nw1);
    out.params.set(p + "mlp.fc1.bias", nb1);
    out.params.set(p + "mlp.fc2.weight", nw2);
  }
  auto& spec = out.specs[static_cast<std::size_t>(block)];
  spec.variant = BlockVariant::Compressed;
  spec.hidden_units = h;
  spec.reuse_indices = keep;
  validate_model(out);
  return out;
}

/// Drop-ratio form; the retained count comes from hidden_units_for_ratio().
template <typename T>
Model<T> compress_block_ratio(const Model<T>& src, std::int64_t block, double r_d, ReuseStrategy strategy,
                              const BasicTensor<T>* tiny_set, Rng& rng) {
  return compress_block(src, block, hidden_units_for_ratio(src.config.mlp_hidden, r_d), strategy, tiny_set, rng);
}

namespace detail {

template <typename T>
bool same_bits(T a, T b) {
  return std::memcmp(&a, &b, sizeof(T)) == 0;
}

}  // namespace detail

/// Throws InvariantError unless the compressed block of `dst` holds bit-exact
/// copies of the retained units of the full block in `src`.
template <typename T>
void verify_weight_reuse(const Model<T>& src, const Model<T>& dst, std::int64_t block) {
  const auto& spec = dst.specs.at(static_cast<std::size_t>(block));
  if (!spec.compressed()) throw InvariantError("verify_weight_reuse on an uncompressed block");
  if (spec.hidden_units == 0) return;
  const auto p = block_prefix(block);
  const auto d = src.config.embed_dim, h_full = src.config.mlp_hidden, h = spec.hidden_units;
  const auto &w1 = src.params.at(p + "mlp.fc1.weight"), &b1 = src.params.at(p + "mlp.fc1.bias"),
             &w2 = src.params.at(p + "mlp.fc2.weight"), &b2 = src.params.at(p + "mlp.fc2.bias");
  const auto &nw1 = dst.params.at(p + "mlp.fc1.weight"), &nb1 = dst.params.at(p + "mlp.fc1.bias"),
             &nw2 = dst.params.at(p + "mlp.fc2.weight"), &nb2 = dst.params.at(p + "mlp.fc2.bias");
  for (std::int64_t t = 0; t < h; ++t) {
    const auto j = spec.reuse_indices[static_cast<std::size_t>(t)];
    bool ok = detail::same_bits(nb1[t], b1[j]);
    for (std::int64_t r = 0; r < d && ok; ++r)
      ok = detail::same_bits(nw1[t * d + r], w1[j * d + r]) && detail::same_bits(nw2[r * h + t], w2[r * h_full + j]);
    if (!ok) throw InvariantError(detail::concat("weight reuse broken at block ", block, " unit ", j));
  }
  if (!nb2.bit_equal(b2)) throw InvariantError(detail::concat("fc2 bias changed at block ", block));
}

}  // namespace dcvit
