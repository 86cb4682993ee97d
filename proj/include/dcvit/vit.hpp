// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dcvit/error.hpp"
#include "dcvit/ops.hpp"
#include "dcvit/rng.hpp"
#include "dcvit/tape.hpp"
#include "dcvit/tensor.hpp"

namespace dcvit {

/// Vision Transformer geometry.
struct ViTConfig {
  std::int64_t image_size = 32;
  std::int64_t patch_size = 8;
  std::int64_t channels = 3;
  std::int64_t embed_dim = 64;
  std::int64_t depth = 6;
  std::int64_t heads = 4;
  std::int64_t mlp_hidden = 256;
  std::int64_t num_classes = 10;
  double drop_path_rate = 0.0;
  double layer_norm_eps = 1e-6;
  GeluForm gelu = GeluForm::Erf;

  std::int64_t grid() const { return image_size / patch_size; }
  std::int64_t num_patches() const { return grid() * grid(); }
  std::int64_t num_tokens() const { return num_patches() + 1; }
  std::int64_t patch_dim() const { return channels * patch_size * patch_size; }

  void validate() const {
    if (patch_size <= 0 || image_size <= 0 || image_size % patch_size != 0)
      throw ValidationError(detail::concat("image_size ", image_size, " not divisible by patch_size ", patch_size));
    if (channels < 1) throw ValidationError("channels must be >= 1");
    if (heads < 1 || embed_dim < 1 || embed_dim % heads != 0)
      throw ValidationError(detail::concat("embed_dim ", embed_dim, " not divisible by heads ", heads));
    if (mlp_hidden < 1) throw ValidationError("mlp_hidden must be >= 1");
    if (depth < 1) throw ValidationError("depth must be >= 1");
    if (num_classes < 2) throw ValidationError("num_classes must be >= 2");
    if (drop_path_rate < 0.0 || drop_path_rate >= 1.0) throw ValidationError("drop_path_rate must lie in [0, 1)");
    if (!(layer_norm_eps > 0.0)) throw ValidationError("layer_norm_eps must be positive");
  }

  friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ViTConfig& c) {
  j = nlohmann::json{{"image_size", c.image_size}, {"patch_size", c.patch_size},
                     {"channels", c.channels},     {"embed_dim", c.embed_dim},
                     {"depth", c.depth},           {"heads", c.heads},
                     {"mlp_hidden", c.mlp_hidden}, {"num_classes", c.num_classes},
                     {"drop_path_rate", c.drop_path_rate}, {"layer_norm_eps", c.layer_norm_eps},
                     {"gelu", to_string(c.gelu)}};
}

inline void from_json(const nlohmann::json& j, ViTConfig& c) {
  ViTConfig d;
  c.image_size = j.value("image_size", d.image_size);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.channels = j.value("channels", d.channels);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.depth = j.value("depth", d.depth);
  c.heads = j.value("heads", d.heads);
  c.mlp_hidden = j.value("mlp_hidden", d.mlp_hidden);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.drop_path_rate = j.value("drop_path_rate", d.drop_path_rate);
  c.layer_norm_eps = j.value("layer_norm_eps", d.layer_norm_eps);
  const auto g = j.value("gelu", std::string("erf"));
  if (g != "erf" && g != "tanh") throw ValidationError("gelu must be erf or tanh");
  c.gelu = g == "erf" ? GeluForm::Erf : GeluForm::Tanh;
}

enum class BlockVariant { Full, Compressed };

/// Per-block structure. A compressed block has no attention branch and keeps
/// `hidden_units` MLP units taken from the original indices `reuse_indices`.
struct BlockSpec {
  BlockVariant variant = BlockVariant::Full;
  std::int64_t hidden_units = 0;
  std::vector<std::int64_t> reuse_indices;

  static BlockSpec full() { return {}; }
  bool compressed() const { return variant == BlockVariant::Compressed; }

  void validate(std::int64_t mlp_hidden) const {
    if (!compressed()) return;
    if (hidden_units < 0 || hidden_units > mlp_hidden)
      throw ValidationError(detail::concat("hidden_units ", hidden_units, " outside [0, ", mlp_hidden, "]"));
    if (static_cast<std::int64_t>(reuse_indices.size()) != hidden_units)
      throw ValidationError("reuse_indices length differs from hidden_units");
    for (std::size_t i = 0; i < reuse_indices.size(); ++i) {
      if (reuse_indices[i] < 0 || reuse_indices[i] >= mlp_hidden)
        throw ValidationError("reuse index out of range");
      if (i > 0 && reuse_indices[i] <= reuse_indices[i - 1])
        throw ValidationError("reuse_indices must be strictly increasing");
    }
  }

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

inline void to_json(nlohmann::json& j, const BlockSpec& s) {
  if (!s.compressed()) {
    j = nlohmann::json{{"variant", "full"}};
  } else {
    j = nlohmann::json{{"variant", "compressed"}, {"hidden_units", s.hidden_units},
                       {"reuse_indices", s.reuse_indices}};
  }
}

inline void from_json(const nlohmann::json& j, BlockSpec& s) {
  const auto v = j.at("variant").get<std::string>();
  if (v == "full") {
    s = BlockSpec::full();
  } else if (v == "compressed") {
    s.variant = BlockVariant::Compressed;
    s.hidden_units = j.at("hidden_units").get<std::int64_t>();
    s.reuse_indices = j.at("reuse_indices").get<std::vector<std::int64_t>>();
  } else {
    throw ValidationError("unknown block variant " + v);
  }
}

inline std::string block_prefix(std::int64_t i) { return "blocks." + std::to_string(i) + "."; }

/// Named parameter tensors in deterministic (lexicographic) order.
template <typename T>
class ParamStore {
 public:
  using Map = std::map<std::string, BasicTensor<T>>;

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const BasicTensor<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("missing parameter " + name);
    return it->second;
  }
  BasicTensor<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("missing parameter " + name);
    return it->second;
  }

  void set(const std::string& name, BasicTensor<T> t) { params_[name] = std::move(t); }
  void erase(const std::string& name) { params_.erase(name); }

  /// Removes every parameter whose name starts with `prefix`.
  void erase_prefix(const std::string& prefix) {
    for (auto it = params_.begin(); it != params_.end();) {
      if (it->first.rfind(prefix, 0) == 0)
        it = params_.erase(it);
      else
        ++it;
    }
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [k, v] : params_) out.push_back(k);
    return out;
  }

  std::size_t size() const { return params_.size(); }
  const Map& map() const { return params_; }
  Map& map() { return params_; }

  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& [k, v] : params_) n += v.numel();
    return n;
  }

  ParamStore clone() const {
    ParamStore out;
    for (const auto& [k, v] : params_) out.params_.emplace(k, v.clone());
    return out;
  }

 private:
  Map params_;
};

/// A ViT instance: geometry, per-block structure and weights.
template <typename T>
struct Model {
  ViTConfig config;
  std::vector<BlockSpec> specs;
  ParamStore<T> params;

  Model clone() const { return Model{config, specs, params.clone()}; }

  std::int64_t compressed_count() const {
    return std::count_if(specs.begin(), specs.end(), [](const BlockSpec& s) { return s.compressed(); });
  }
};

using ViTModel = Model<float>;

namespace detail {

template <typename T>
BasicTensor<T> trunc_normal(Shape shape, Rng& rng, double stddev = 0.02) {
  BasicTensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.truncated_normal(stddev));
  return t;
}

}  // namespace detail

/// Expected shapes of every parameter for a (config, specs) pair.
inline std::map<std::string, Shape> expected_param_shapes(const ViTConfig& c,
                                                          const std::vector<BlockSpec>& specs) {
  const auto d = c.embed_dim;
  std::map<std::string, Shape> out;
  out["patch_embed.weight"] = {d, c.patch_dim()};
  out["patch_embed.bias"] = {d};
  out["cls_token"] = {d};
  out["pos_embed"] = {c.num_tokens(), d};
  for (std::int64_t i = 0; i < c.depth; ++i) {
    const auto p = block_prefix(i);
    const auto& s = specs[static_cast<std::size_t>(i)];
    if (!s.compressed()) {
      out[p + "ln1.weight"] = {d};
      out[p + "ln1.bias"] = {d};
      out[p + "attn.qkv.weight"] = {3 * d, d};
      out[p + "attn.qkv.bias"] = {3 * d};
      out[p + "attn.proj.weight"] = {d, d};
      out[p + "attn.proj.bias"] = {d};
    }
    const auto h = s.compressed() ? s.hidden_units : c.mlp_hidden;
    if (h > 0) {
      out[p + "ln2.weight"] = {d};
      out[p + "ln2.bias"] = {d};
      out[p + "mlp.fc1.weight"] = {h, d};
      out[p + "mlp.fc1.bias"] = {h};
      out[p + "mlp.fc2.weight"] = {d, h};
      out[p + "mlp.fc2.bias"] = {d};
    }
  }
  out["norm.weight"] = {d};
  out["norm.bias"] = {d};
  out["head.weight"] = {c.num_classes, d};
  out["head.bias"] = {c.num_classes};
  return out;
}

/// Checks that the parameter set matches the config and block specs exactly.
template <typename T>
void validate_model(const Model<T>& m) {
  m.config.validate();
  if (static_cast<std::int64_t>(m.specs.size()) != m.config.depth)
    throw ValidationError(detail::concat("model has ", m.specs.size(), " block specs for depth ", m.config.depth));
  for (const auto& s : m.specs) s.validate(m.config.mlp_hidden);
  const auto expected = expected_param_shapes(m.config, m.specs);
  if (expected.size() != m.params.size())
    throw ValidationError(detail::concat("model stores ", m.params.size(), " parameters, expected ", expected.size()));
  for (const auto& [name, shape] : expected) {
    if (!m.params.contains(name)) throw ValidationError("missing parameter " + name);
    if (m.params.at(name).shape() != shape)
      throw ValidationError("parameter " + name + " has shape " + shape_str(m.params.at(name).shape()) +
                            ", expected " + shape_str(shape));
  }
}

/// Fresh all-Full model: truncated-normal(0.02) weights, zero biases,
/// layer norms at gamma = 1, beta = 0.
template <typename T = float>
Model<T> init_params(const ViTConfig& config, Rng& rng) {
  config.validate();
  Model<T> m;
  m.config = config;
  m.specs.assign(static_cast<std::size_t>(config.depth), BlockSpec::full());
  for (const auto& [name, shape] : expected_param_shapes(config, m.specs)) {
    const bool is_norm = name.find("ln1.") != std::string::npos || name.find("ln2.") != std::string::npos ||
                         name.rfind("norm.", 0) == 0;
    const bool is_bias = name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
    if (is_norm)
      m.params.set(name, BasicTensor<T>(shape, is_bias ? T(0) : T(1)));
    else if (is_bias)
      m.params.set(name, BasicTensor<T>::zeros(shape));
    else
      m.params.set(name, detail::trunc_normal<T>(shape, rng));
  }
  return m;
}

template <typename T>
std::int64_t count_params(const Model<T>& m) {
  return m.params.count();
}

enum class RunMode { Train, Eval };

template <typename T>
struct ModelOutput {
  BasicTensor<T> tokens;  // [n, tokens, d], after the final layer norm
  BasicTensor<T> logits;  // [n, classes], head applied to the CLS token
};

/// Patch projection, CLS token and positional embedding: [n, tokens, d].
template <typename T>
BasicTensor<T> embed(Tape<T>& tape, const Model<T>& m, const BasicTensor<T>& images) {
  const auto& c = m.config;
  if (images.rank() != 4 || images.dim(1) != c.channels || images.dim(2) != c.image_size ||
      images.dim(3) != c.image_size)
    throw ValidationError("images " + shape_str(images.shape()) + " do not match model input [n," +
                          std::to_string(c.channels) + "," + std::to_string(c.image_size) + "," +
                          std::to_string(c.image_size) + "]");
  auto patches = patchify(tape, images, c.patch_size);
  const auto& pb = m.params.at("patch_embed.bias");
  auto proj = linear(tape, patches, m.params.at("patch_embed.weight"), &pb);
  return assemble_tokens(tape, proj, m.params.at("cls_token"), m.params.at("pos_embed"));
}

namespace detail {

template <typename T>
BasicTensor<T> maybe_drop_path(Tape<T>& tape, const BasicTensor<T>& branch, double rate, RunMode mode,
                               Rng* rng) {
  if (mode != RunMode::Train || rate <= 0.0) return branch;
  if (!rng) throw UsageError("train-mode forward with drop path needs an Rng");
  const double keep = 1.0 - rate;
  std::vector<T> factors(static_cast<std::size_t>(branch.dim(0)));
  for (auto& f : factors) f = rng->bernoulli(keep) ? static_cast<T>(1.0 / keep) : T(0);
  return scale_samples(tape, branch, std::move(factors));
}

}  // namespace detail

/// Attention residual branch of a Full block: proj(Attn(LN1(x))).
template <typename T>
BasicTensor<T> attention_branch(Tape<T>& tape, const Model<T>& m, std::int64_t i, const BasicTensor<T>& x) {
  const auto p = block_prefix(i);
  const auto& prm = m.params;
  const T eps = static_cast<T>(m.config.layer_norm_eps);
  auto h = layer_norm(tape, x, prm.at(p + "ln1.weight"), prm.at(p + "ln1.bias"), eps);
  h = linear(tape, h, prm.at(p + "attn.qkv.weight"), &prm.at(p + "attn.qkv.bias"));
  h = attention(tape, h, x.dim(0), x.dim(1), m.config.heads);
  return linear(tape, h, prm.at(p + "attn.proj.weight"), &prm.at(p + "attn.proj.bias"));
}

/// GELU(FC1(LN2(x))): the MLP hidden activations of block i.
template <typename T>
BasicTensor<T> mlp_hidden(Tape<T>& tape, const Model<T>& m, std::int64_t i, const BasicTensor<T>& x) {
  const auto p = block_prefix(i);
  const auto& prm = m.params;
  auto h = layer_norm(tape, x, prm.at(p + "ln2.weight"), prm.at(p + "ln2.bias"),
                      static_cast<T>(m.config.layer_norm_eps));
  h = linear(tape, h, prm.at(p + "mlp.fc1.weight"), &prm.at(p + "mlp.fc1.bias"));
  return gelu(tape, h, m.config.gelu);
}

/// One transformer block. Full: x += Attn(LN1 x); x += MLP(LN2 x).
/// Compressed: x += MLP'(LN2 x), or x unchanged when no hidden units remain.
template <typename T>
BasicTensor<T> block_forward(Tape<T>& tape, const Model<T>& m, std::int64_t i, BasicTensor<T> x,
                             RunMode mode, Rng* rng) {
  const auto& spec = m.specs[static_cast<std::size_t>(i)];
  const auto depth = m.config.depth;
  // stochastic-depth rate grows linearly with block index
  const double rate = depth > 1 ? m.config.drop_path_rate * static_cast<double>(i) / static_cast<double>(depth - 1)
                                : m.config.drop_path_rate;
  if (!spec.compressed()) {
    auto a = attention_branch(tape, m, i, x);
    x = add(tape, x, detail::maybe_drop_path(tape, a, rate, mode, rng));
  } else if (spec.hidden_units == 0) {
    return x;
  }
  const auto p = block_prefix(i);
  auto h = mlp_hidden(tape, m, i, x);
  h = linear(tape, h, m.params.at(p + "mlp.fc2.weight"), &m.params.at(p + "mlp.fc2.bias"));
  return add(tape, x, detail::maybe_drop_path(tape, h, rate, mode, rng));
}

/// Final layer norm and linear head on the CLS token.
template <typename T>
ModelOutput<T> head_forward(Tape<T>& tape, const Model<T>& m, const BasicTensor<T>& x) {
  const auto& prm = m.params;
  auto tokens = layer_norm(tape, x, prm.at("norm.weight"), prm.at("norm.bias"),
                           static_cast<T>(m.config.layer_norm_eps));
  auto cls = take_token(tape, tokens, 0);
  auto logits = linear(tape, cls, prm.at("head.weight"), &prm.at("head.bias"));
  return {tokens, logits};
}

/// Full forward pass. Drop path is active only in Train mode.
template <typename T>
ModelOutput<T> forward(Tape<T>& tape, const Model<T>& m, const BasicTensor<T>& images,
                       RunMode mode = RunMode::Eval, Rng* rng = nullptr) {
  if (static_cast<std::int64_t>(m.specs.size()) != m.config.depth)
    throw ValidationError("block spec count differs from depth");
  auto x = embed(tape, m, images);
  for (std::int64_t i = 0; i < m.config.depth; ++i) x = block_forward(tape, m, i, x, mode, rng);
  return head_forward(tape, m, x);
}

/// Rows [begin, end) of a [n, ...] tensor as a new tensor.
template <typename T>
BasicTensor<T> slice_batch(const BasicTensor<T>& x, std::int64_t begin, std::int64_t end) {
  const auto per = x.dim(0) == 0 ? 0 : x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = end - begin;
  return BasicTensor<T>(shape, std::span<const T>(x.ptr() + begin * per, static_cast<std::size_t>((end - begin) * per)));
}

/// Gathers samples `idx` of a [n, ...] tensor.
template <typename T>
BasicTensor<T> gather_batch(const BasicTensor<T>& x, std::span<const std::int64_t> idx) {
  const auto per = x.dim(0) == 0 ? 0 : x.numel() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = static_cast<std::int64_t>(idx.size());
  BasicTensor<T> out(shape);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(x.ptr() + idx[i] * per, per, out.ptr() + static_cast<std::int64_t>(i) * per);
  return out;
}

/// Eval-mode forward in chunks without recording; concatenated outputs.
template <typename T>
ModelOutput<T> infer(const Model<T>& m, const BasicTensor<T>& images, std::int64_t chunk = 64) {
  const auto n = images.dim(0);
  const auto t = m.config.num_tokens(), d = m.config.embed_dim, c = m.config.num_classes;
  ModelOutput<T> out{BasicTensor<T>({n, t, d}), BasicTensor<T>({n, c})};
  for (std::int64_t b = 0; b < n; b += chunk) {
    const auto e = std::min(n, b + chunk);
    auto tape = Tape<T>::inference();
    auto part = forward(tape, m, slice_batch(images, b, e));
    std::copy(part.tokens.data().begin(), part.tokens.data().end(), out.tokens.ptr() + b * t * d);
    std::copy(part.logits.data().begin(), part.logits.data().end(), out.logits.ptr() + b * c);
  }
  return out;
}

/// Mean post-GELU activation of every FC1 unit of block i over all tokens of
/// `images`, measured in the block as currently configured.
template <typename T>
std::vector<double> mlp_activation_means(const Model<T>& m, std::int64_t block, const BasicTensor<T>& images,
                                         std::int64_t chunk = 64) {
  const auto& spec = m.specs.at(static_cast<std::size_t>(block));
  const auto units = spec.compressed() ? spec.hidden_units : m.config.mlp_hidden;
  std::vector<double> sums(static_cast<std::size_t>(units), 0.0);
  std::int64_t rows = 0;
  const auto n = images.dim(0);
  for (std::int64_t b = 0; b < n; b += chunk) {
    auto tape = Tape<T>::inference();
    auto x = embed(tape, m, slice_batch(images, b, std::min(n, b + chunk)));
    for (std::int64_t i = 0; i < block; ++i) x = block_forward(tape, m, i, x, RunMode::Eval, nullptr);
    if (!spec.compressed()) x = add(tape, x, attention_branch(tape, m, block, x));
    if (units == 0) continue;
    auto h = mlp_hidden(tape, m, block, x);
    for (std::int64_t r = 0; r < h.rows(); ++r)
      for (std::int64_t u = 0; u < units; ++u) sums[static_cast<std::size_t>(u)] += h[r * units + u];
    rows += h.rows();
  }
  for (auto& s : sums) s /= static_cast<double>(std::max<std::int64_t>(rows, 1));
  return sums;
}

}  // namespace dcvit
