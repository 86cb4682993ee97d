// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dcvit/error.hpp"
#include "dcvit/vit.hpp"

namespace dcvit {

/// weights_only counts one MAC per multiply inside parameterised linear maps
/// (patch projection, QKV, attention output, FC1, FC2, head). full adds the
/// QK^T and AV products and two multiplies per layer-norm element.
enum class MacsConvention { WeightsOnly, Full };

inline const char* to_string(MacsConvention c) { return c == MacsConvention::WeightsOnly ? "weights_only" : "full"; }

inline MacsConvention parse_convention(const std::string& s) {
  if (s == "weights_only") return MacsConvention::WeightsOnly;
  if (s == "full") return MacsConvention::Full;
  throw ValidationError("unknown MACs convention '" + s + "' (weights_only|full)");
}

struct MacsBreakdown {
  std::int64_t macs_o = 0;    // whole model as specified
  std::int64_t macs_a = 0;    // one attention module incl. its layer norm
  std::int64_t macs_m = 0;    // one full MLP excl. its layer norm
  std::int64_t macs_ln2 = 0;  // the MLP's layer norm (zero under weights_only)
  std::int64_t depth = 0;
  std::int64_t mlp_hidden = 0;
  std::map<std::string, std::int64_t> per_component;
  MacsConvention convention = MacsConvention::WeightsOnly;

  /// MACs of one MLP hidden unit (one FC1 row plus one FC2 column).
  double unit_macs() const { return static_cast<double>(macs_m) / static_cast<double>(mlp_hidden); }
};

/// Closed-form per-sample MAC counts for a model structure.
inline MacsBreakdown count_macs(const ViTConfig& c, const std::vector<BlockSpec>& specs,
                                MacsConvention convention = MacsConvention::WeightsOnly) {
  c.validate();
  if (static_cast<std::int64_t>(specs.size()) != c.depth) throw ValidationError("block spec count differs from depth");
  const bool full = convention == MacsConvention::Full;
  const auto t = c.num_tokens(), d = c.embed_dim;
  const std::int64_t ln = full ? 2 * t * d : 0;
  const std::int64_t attn = 4 * t * d * d + (full ? 2 * t * t * d + ln : 0);
  auto mlp = [&](std::int64_t hidden) { return 2 * t * d * hidden; };

  MacsBreakdown b;
  b.convention = convention;
  b.depth = c.depth;
  b.mlp_hidden = c.mlp_hidden;
  b.macs_a = attn;
  b.macs_m = mlp(c.mlp_hidden);
  b.macs_ln2 = ln;
  b.per_component["patch_embed"] = c.num_patches() * c.patch_dim() * d;
  for (std::int64_t i = 0; i < c.depth; ++i) {
    const auto& s = specs[static_cast<std::size_t>(i)];
    s.validate(c.mlp_hidden);
    const auto p = "blocks." + std::to_string(i) + ".";
    if (!s.compressed()) b.per_component[p + "attn"] = attn;
    const auto h = s.compressed() ? s.hidden_units : c.mlp_hidden;
    if (h > 0) {
      b.per_component[p + "mlp"] = mlp(h);
      if (full) b.per_component[p + "ln2"] = ln;
    }
  }
  if (full) b.per_component["norm"] = ln;
  b.per_component["head"] = d * c.num_classes;
  for (const auto& [k, v] : b.per_component) b.macs_o += v;
  return b;
}

inline MacsBreakdown count_macs(const ViTConfig& c, MacsConvention convention = MacsConvention::WeightsOnly) {
  return count_macs(c, std::vector<BlockSpec>(static_cast<std::size_t>(c.depth), BlockSpec::full()), convention);
}

/// Minimal number of blocks whose removal reaches the target:
/// ceil((macs_o - target) / (macs_a + macs_m)).
inline std::int64_t compute_k(std::int64_t macs_o, std::int64_t target, std::int64_t macs_a, std::int64_t macs_m,
                              std::optional<std::int64_t> max_blocks = std::nullopt) {
  if (target >= macs_o)
    throw ValidationError(detail::concat("target MACs ", target, " must be below the original ", macs_o));
  const auto per_block = macs_a + macs_m;
  if (per_block <= 0) throw ValidationError("attention + MLP MACs must be positive");
  const auto reduction = macs_o - target;
  const auto k = (reduction + per_block - 1) / per_block;
  if (max_blocks && k > *max_blocks)
    throw InfeasibleError(detail::concat("target ", target, " needs ", k, " blocks but the model has ", *max_blocks,
                                         "; reachable targets are [", macs_o - *max_blocks * per_block, ", ",
                                         macs_o - macs_a, "]"));
  return k;
}

/// Shared MLP drop ratio (macs_o - target - k*macs_a) / (k*macs_m).
inline double compute_r_d(std::int64_t macs_o, std::int64_t target, std::int64_t macs_a, std::int64_t macs_m,
                          std::int64_t k) {
  if (k < 1 || macs_m <= 0) throw ValidationError("compute_r_d needs k >= 1 and positive MLP MACs");
  const auto numer = macs_o - target - k * macs_a;
  const auto denom = k * macs_m;
  const double r = static_cast<double>(numer) / static_cast<double>(denom);
  if (numer < 0 || numer > denom)
    throw PlanningError(detail::concat("drop ratio ", r, " outside [0, 1] for k = ", k,
                                       "; feasible targets for this k are [", macs_o - k * (macs_a + macs_m), ", ",
                                       macs_o - k * macs_a, "]"));
  return r;
}

struct CompressionPlan {
  std::int64_t original_macs = 0;
  std::int64_t target_macs = 0;
  std::int64_t k = 0;
  double r_d = 0.0;
  std::vector<std::int64_t> hidden_counts;  // per compression stage, in stage order
  std::int64_t achieved_macs = 0;
  double unit_macs = 0.0;
  MacsConvention convention = MacsConvention::WeightsOnly;
  std::optional<std::int64_t> force_k;
  std::vector<std::int64_t> block_order;  // filled once blocks are selected
};

inline void to_json(nlohmann::json& j, const CompressionPlan& p) {
  j = nlohmann::json{{"original_macs", p.original_macs},
                     {"target_macs", p.target_macs},
                     {"k", p.k},
                     {"r_d", p.r_d},
                     {"hidden_counts", p.hidden_counts},
                     {"achieved_macs", p.achieved_macs},
                     {"unit_macs", p.unit_macs},
                     {"convention", to_string(p.convention)},
                     {"force_k", p.force_k ? nlohmann::json(*p.force_k) : nlohmann::json(nullptr)},
                     {"block_order", p.block_order}};
}

inline void from_json(const nlohmann::json& j, CompressionPlan& p) {
  p.original_macs = j.value("original_macs", std::int64_t{0});
  p.target_macs = j.at("target_macs").get<std::int64_t>();
  p.k = j.at("k").get<std::int64_t>();
  p.r_d = j.at("r_d").get<double>();
  p.hidden_counts = j.at("hidden_counts").get<std::vector<std::int64_t>>();
  p.achieved_macs = j.at("achieved_macs").get<std::int64_t>();
  p.unit_macs = j.value("unit_macs", 0.0);
  p.convention = parse_convention(j.value("convention", std::string("weights_only")));
  if (j.contains("force_k") && !j.at("force_k").is_null()) p.force_k = j.at("force_k").get<std::int64_t>();
  p.block_order = j.value("block_order", std::vector<std::int64_t>{});
}

/// Structure for a MACs target: k blocks lose their attention and keep
/// hidden_counts[s] MLP units each. Counts start at floor(H * (1 - r_d)) and
/// the spare units go one each to the earliest stages, as long as the total
/// stays within the target.
inline CompressionPlan make_plan(const MacsBreakdown& b, std::int64_t target,
                                 std::optional<std::int64_t> force_k = std::nullopt) {
  CompressionPlan plan;
  plan.original_macs = b.macs_o;
  plan.target_macs = target;
  plan.convention = b.convention;
  plan.force_k = force_k;
  plan.unit_macs = b.unit_macs();
  if (target > b.macs_o)
    throw ValidationError(detail::concat("target MACs ", target, " exceed the original ", b.macs_o));
  if (target == b.macs_o && !force_k) {
    plan.achieved_macs = b.macs_o;
    return plan;
  }
  std::int64_t k = 0;
  if (force_k) {
    if (*force_k < 1 || *force_k > b.depth)
      throw ValidationError(detail::concat("force_k ", *force_k, " outside [1, ", b.depth, "]"));
    k = *force_k;
  } else {
    k = compute_k(b.macs_o, target, b.macs_a, b.macs_m, b.depth);
  }
  plan.k = k;
  plan.r_d = compute_r_d(b.macs_o, target, b.macs_a, b.macs_m, k);

  const __int128 h = b.mlp_hidden;
  const __int128 reduction = b.macs_o - target;
  // Largest total of retained units whose MACs keep the model within target.
  __int128 units = (static_cast<__int128>(k) * (b.macs_a + b.macs_m) - reduction) * h / b.macs_m;
  units = std::min<__int128>(units, k * h);
  const auto base = static_cast<std::int64_t>(units / k);
  const auto residue = static_cast<std::int64_t>(units % k);
  plan.hidden_counts.assign(static_cast<std::size_t>(k), base);
  for (std::int64_t s = 0; s < residue; ++s) plan.hidden_counts[static_cast<std::size_t>(s)] += 1;

  __int128 removed = static_cast<__int128>(k) * b.macs_a + (k * h - units) * b.macs_m / h;
  for (auto hc : plan.hidden_counts)
    if (hc == 0) removed += b.macs_ln2;
  plan.achieved_macs = static_cast<std::int64_t>(b.macs_o - removed);
  if (plan.achieved_macs > target)
    throw InvariantError(detail::concat("plan overshoots target: ", plan.achieved_macs, " > ", target));
  return plan;
}

/// Target MACs for a fractional reduction of the original model.
inline std::int64_t target_from_reduction(const MacsBreakdown& b, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ValidationError("reduction fraction must lie in (0, 1)");
  return static_cast<std::int64_t>(std::ceil(static_cast<double>(b.macs_o) * (1.0 - fraction)));
}

struct OptionRange {
  std::int64_t k = 0;
  std::int64_t min_macs = 0;
  std::int64_t max_macs = 0;
};

/// Reachable model sizes when compressing exactly k blocks, k = 1..k_max.
inline std::vector<OptionRange> enumerate_options(const MacsBreakdown& b, std::int64_t k_max) {
  if (k_max < 1 || k_max > b.depth)
    throw ValidationError(detail::concat("k_max ", k_max, " outside [1, ", b.depth, "]"));
  std::vector<OptionRange> out;
  for (std::int64_t k = 1; k <= k_max; ++k)
    out.push_back({k, b.macs_o - k * (b.macs_a + b.macs_m + b.macs_ln2), b.macs_o - k * b.macs_a});
  return out;
}

/// Block specs realising a plan on the given block indices (stage order).
inline std::vector<BlockSpec> planned_specs(const ViTConfig& c, const CompressionPlan& plan,
                                            const std::vector<std::int64_t>& blocks) {
  if (static_cast<std::int64_t>(blocks.size()) != plan.k) throw ValidationError("block list length differs from k");
  std::vector<BlockSpec> specs(static_cast<std::size_t>(c.depth), BlockSpec::full());
  for (std::size_t s = 0; s < blocks.size(); ++s) {
    auto& spec = specs.at(static_cast<std::size_t>(blocks[s]));
    spec.variant = BlockVariant::Compressed;
    spec.hidden_units = plan.hidden_counts[s];
    for (std::int64_t u = 0; u < spec.hidden_units; ++u) spec.reuse_indices.push_back(u);
  }
  return specs;
}

}  // namespace dcvit
