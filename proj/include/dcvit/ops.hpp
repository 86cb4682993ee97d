// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <vector>

#include "dcvit/error.hpp"
#include "dcvit/tape.hpp"
#include "dcvit/tensor.hpp"

namespace dcvit {

namespace kernels {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;

template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

/// C[m x n] (+)= op(A) * op(B) over contiguous row-major buffers, where
/// op(A) is m x k and op(B) is k x n. Eigen is built without OpenMP, so the
/// product is single-threaded and its summation order is fixed per shape.
template <typename T>
void gemm(const T* a, bool trans_a, const T* b, bool trans_b, T* c, std::int64_t m,
          std::int64_t n, std::int64_t k, bool accumulate) {
  if (m == 0 || n == 0) return;
  MatMap<T> cm(c, m, n);
  if (k == 0) {
    if (!accumulate) cm.setZero();
    return;
  }
  const ConstMatMap<T> am(a, trans_a ? k : m, trans_a ? m : k);
  const ConstMatMap<T> bm(b, trans_b ? n : k, trans_b ? k : n);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate)
      cm.noalias() += lhs * rhs;
    else
      cm.noalias() = lhs * rhs;
  };
  if (!trans_a && !trans_b) run(am, bm);
  if (!trans_a && trans_b) run(am, bm.transpose());
  if (trans_a && !trans_b) run(am.transpose(), bm);
  if (trans_a && trans_b) run(am.transpose(), bm.transpose());
}

template <typename T>
T gelu_erf(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(0.70710678118654752440)));
}

template <typename T>
T gelu_erf_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(0.70710678118654752440)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <typename T>
T gelu_tanh(T x) {
  const T c = T(std::sqrt(2.0 / std::numbers::pi));
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_tanh_grad(T x) {
  const T c = T(std::sqrt(2.0 / std::numbers::pi));
  const T u = c * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(u);
  const T du = c * (T(1) + T(3 * 0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

/// Row-wise max-subtracted softmax of a rows x cols block, in place.
template <typename T>
void softmax_rows(T* x, std::int64_t rows, std::int64_t cols, std::int64_t stride) {
  for (std::int64_t r = 0; r < rows; ++r) {
    T* row = x + r * stride;
    T mx = row[0];
    for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    T total = 0;
    for (std::int64_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      total += row[c];
    }
    const T inv = T(1) / total;
    for (std::int64_t c = 0; c < cols; ++c) row[c] *= inv;
  }
}

}  // namespace kernels

enum class GeluForm { Erf, Tanh };

inline const char* to_string(GeluForm f) { return f == GeluForm::Erf ? "erf" : "tanh"; }

namespace detail {

template <typename T>
void add_into(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

/// Plain 2-D matrix product a[m x k] * b[k x n].
template <typename T>
BasicTensor<T> matmul(Tape<T>& tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  BasicTensor<T> out({m, n});
  kernels::gemm(a.ptr(), false, b.ptr(), false, out.ptr(), m, n, k, false);
  tape.counters().matmul_macs += m * n * k;
  if (tape.wants_grad(a, b)) {
    tape.record(out, [a, b, out, m, n, k]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      if (a.requires_grad()) kernels::gemm(g, false, b.ptr(), true, a.ensure_grad().data(), m, k, n, true);
      if (b.requires_grad()) kernels::gemm(a.ptr(), true, g, false, b.ensure_grad().data(), k, n, m, true);
    });
  }
  return out;
}

/// y = x * w^T + bias over the trailing axis of x; w is [out x in].
template <typename T>
BasicTensor<T> linear(Tape<T>& tape, const BasicTensor<T>& x, const BasicTensor<T>& w,
                      const BasicTensor<T>* bias) {
  if (w.rank() != 2 || x.cols() != w.dim(1))
    throw DimensionError("linear input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  const auto rows = x.rows(), in = w.dim(1), outf = w.dim(0);
  if (bias && bias->numel() != outf)
    throw DimensionError("linear bias " + shape_str(bias->shape()) + " for " + std::to_string(outf) + " outputs");
  Shape shape = x.shape();
  shape.back() = outf;
  BasicTensor<T> out(shape);
  kernels::gemm(x.ptr(), false, w.ptr(), true, out.ptr(), rows, outf, in, false);
  if (bias) {
    const T* bp = bias->ptr();
    T* o = out.ptr();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t c = 0; c < outf; ++c) o[r * outf + c] += bp[c];
  }
  tape.counters().linear_macs += rows * in * outf;
  const bool bias_grad = bias && bias->requires_grad();
  if (tape.recording() && (x.requires_grad() || w.requires_grad() || bias_grad)) {
    BasicTensor<T> b = bias ? *bias : BasicTensor<T>();
    const bool has_bias = bias != nullptr;
    tape.record(out, [x, w, b, has_bias, out, rows, in, outf]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      if (x.requires_grad()) kernels::gemm(g, false, w.ptr(), false, x.ensure_grad().data(), rows, in, outf, true);
      if (w.requires_grad()) kernels::gemm(g, true, x.ptr(), false, w.ensure_grad().data(), outf, in, rows, true);
      if (has_bias && b.requires_grad()) {
        auto gb = b.ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t c = 0; c < outf; ++c) gb[c] += g[r * outf + c];
      }
    });
  }
  return out;
}

/// Elementwise a + b (identical shapes).
template <typename T>
BasicTensor<T> add(Tape<T>& tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
  BasicTensor<T> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  if (tape.wants_grad(a, b)) {
    tape.record(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto g = std::span<const T>(out.grad());
      if (a.requires_grad()) detail::add_into(a.ensure_grad(), g);
      if (b.requires_grad()) detail::add_into(b.ensure_grad(), g);
    });
  }
  return out;
}

/// s * a.
template <typename T>
BasicTensor<T> scale(Tape<T>& tape, const BasicTensor<T>& a, T s) {
  BasicTensor<T> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
  if (tape.wants_grad(a)) {
    tape.record(out, [a, out, s]() mutable {
      if (!out.has_grad()) return;
      auto ga = a.ensure_grad();
      auto g = out.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

/// Sum of all entries, accumulated sequentially in double.
template <typename T>
BasicTensor<T> sum(Tape<T>& tape, const BasicTensor<T>& a) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(a[i]);
  auto out = BasicTensor<T>::scalar(static_cast<T>(acc));
  if (tape.wants_grad(a)) {
    tape.record(out, [a, out]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      for (auto& v : a.ensure_grad()) v += g;
    });
  }
  return out;
}

/// Gaussian error linear unit; erf form by default.
template <typename T>
BasicTensor<T> gelu(Tape<T>& tape, const BasicTensor<T>& x, GeluForm form = GeluForm::Erf) {
  BasicTensor<T> out(x.shape());
  const auto n = x.numel();
  const T* xp = x.ptr();
  T* op = out.ptr();
  if (form == GeluForm::Erf)
    for (std::int64_t i = 0; i < n; ++i) op[i] = kernels::gelu_erf(xp[i]);
  else
    for (std::int64_t i = 0; i < n; ++i) op[i] = kernels::gelu_tanh(xp[i]);
  if (tape.wants_grad(x)) {
    tape.record(out, [x, out, form, n]() mutable {
      if (!out.has_grad()) return;
      auto gx = x.ensure_grad();
      auto g = out.grad();
      const T* xp = x.ptr();
      if (form == GeluForm::Erf)
        for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * kernels::gelu_erf_grad(xp[i]);
      else
        for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * kernels::gelu_tanh_grad(xp[i]);
    });
  }
  return out;
}

/// Normalises every row over the trailing axis, then applies gamma/beta.
template <typename T>
BasicTensor<T> layer_norm(Tape<T>& tape, const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(1e-6)) {
  const auto d = x.cols(), rows = x.rows();
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layer_norm over " + std::to_string(d) + " features with gamma " +
                         shape_str(gamma.shape()));
  if (!(eps > T(0))) throw ValidationError("layer_norm eps must be positive");
  BasicTensor<T> out(x.shape());
  BasicTensor<T> xhat(x.shape());
  std::vector<T> rstd(static_cast<std::size_t>(rows));
  const T* xp = x.ptr();
  const T* gp = gamma.ptr();
  const T* bp = beta.ptr();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xp + r * d;
    double mean = 0.0;
    for (std::int64_t c = 0; c < d; ++c) mean += row[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t c = 0; c < d; ++c) {
      const double dv = row[c] - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(d);
    const T rs = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    rstd[static_cast<std::size_t>(r)] = rs;
    T* xh = xhat.ptr() + r * d;
    T* o = out.ptr() + r * d;
    for (std::int64_t c = 0; c < d; ++c) {
      xh[c] = (row[c] - static_cast<T>(mean)) * rs;
      o[c] = xh[c] * gp[c] + bp[c];
    }
  }
  tape.counters().layer_norm_elements += rows * d;
  if (tape.wants_grad(x, gamma, beta)) {
    tape.record(out, [x, gamma, beta, out, xhat, rstd = std::move(rstd), rows, d]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      const T* xh = xhat.ptr();
      const T* gp = gamma.ptr();
      if (gamma.requires_grad()) {
        auto gg = gamma.ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t c = 0; c < d; ++c) gg[c] += g[r * d + c] * xh[r * d + c];
      }
      if (beta.requires_grad()) {
        auto gb = beta.ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
      }
      if (x.requires_grad()) {
        auto gx = x.ensure_grad();
        const T inv_d = T(1) / static_cast<T>(d);
        for (std::int64_t r = 0; r < rows; ++r) {
          T mean_dxh = 0, mean_dxh_xh = 0;
          for (std::int64_t c = 0; c < d; ++c) {
            const T dxh = g[r * d + c] * gp[c];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[r * d + c];
          }
          mean_dxh *= inv_d;
          mean_dxh_xh *= inv_d;
          const T rs = rstd[static_cast<std::size_t>(r)];
          for (std::int64_t c = 0; c < d; ++c) {
            const T dxh = g[r * d + c] * gp[c];
            gx[r * d + c] += rs * (dxh - mean_dxh - xh[r * d + c] * mean_dxh_xh);
          }
        }
      }
    });
  }
  return out;
}

/// Max-subtracted softmax along `axis` (negative counts from the back).
template <typename T>
BasicTensor<T> softmax(Tape<T>& tape, const BasicTensor<T>& x, int axis = -1) {
  if (x.rank() == 0) throw DimensionError("softmax of a scalar");
  const int ax = axis < 0 ? x.rank() + axis : axis;
  if (ax < 0 || ax >= x.rank()) throw DimensionError("softmax axis out of range");
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= x.dim(i);
  for (int i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const auto extent = x.dim(ax);
  BasicTensor<T> out(x.shape());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const T* src = x.ptr() + o * extent * inner + in;
      T* dst = out.ptr() + o * extent * inner + in;
      T mx = src[0];
      for (std::int64_t e = 1; e < extent; ++e) mx = std::max(mx, src[e * inner]);
      T total = 0;
      for (std::int64_t e = 0; e < extent; ++e) {
        dst[e * inner] = std::exp(src[e * inner] - mx);
        total += dst[e * inner];
      }
      for (std::int64_t e = 0; e < extent; ++e) dst[e * inner] /= total;
    }
  }
  if (tape.wants_grad(x)) {
    tape.record(out, [x, out, outer, inner, extent]() mutable {
      if (!out.has_grad()) return;
      auto gx = x.ensure_grad();
      const T* g = out.grad().data();
      const T* y = out.ptr();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * extent * inner + in;
          T dot = 0;
          for (std::int64_t e = 0; e < extent; ++e) dot += g[base + e * inner] * y[base + e * inner];
          for (std::int64_t e = 0; e < extent; ++e)
            gx[base + e * inner] += y[base + e * inner] * (g[base + e * inner] - dot);
        }
      }
    });
  }
  return out;
}

/// Multi-head scaled dot-product self-attention.
///
/// qkv is [batch, tokens, 3d] holding the Q, K and V projections side by side;
/// the result is [batch, tokens, d] with heads concatenated along features.
template <typename T>
BasicTensor<T> attention(Tape<T>& tape, const BasicTensor<T>& qkv, std::int64_t batch,
                         std::int64_t tokens, std::int64_t heads) {
  const auto three_d = qkv.cols();
  if (three_d % 3 != 0 || qkv.rows() != batch * tokens)
    throw DimensionError("attention input " + shape_str(qkv.shape()));
  const auto d = three_d / 3;
  if (heads <= 0 || d % heads != 0) throw DimensionError("attention heads do not divide features");
  const auto dh = d / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(dh));
  using Stride = Eigen::OuterStride<>;
  using CMap = Eigen::Map<const kernels::RowMat<T>, 0, Stride>;
  using MMap = Eigen::Map<kernels::RowMat<T>, 0, Stride>;

  BasicTensor<T> out({batch, tokens, d});
  // Attention probabilities, kept for the backward pass.
  BasicTensor<T> probs({batch, heads, tokens, tokens});
  for (std::int64_t b = 0; b < batch; ++b) {
    const T* base = qkv.ptr() + b * tokens * three_d;
    for (std::int64_t h = 0; h < heads; ++h) {
      CMap q(base + h * dh, tokens, dh, Stride(three_d));
      CMap k(base + d + h * dh, tokens, dh, Stride(three_d));
      CMap v(base + 2 * d + h * dh, tokens, dh, Stride(three_d));
      kernels::MatMap<T> p(probs.ptr() + (b * heads + h) * tokens * tokens, tokens, tokens);
      p.noalias() = (q * k.transpose()) * scale_factor;
      kernels::softmax_rows(p.data(), tokens, tokens, tokens);
      MMap o(out.ptr() + b * tokens * d + h * dh, tokens, dh, Stride(d));
      o.noalias() = p * v;
    }
  }
  tape.counters().attention_macs += 2 * batch * tokens * tokens * d;
  tape.counters().attention_calls += 1;
  if (tape.wants_grad(qkv)) {
    tape.record(out, [qkv, out, probs, batch, tokens, heads, d, dh, three_d, scale_factor]() mutable {
      if (!out.has_grad()) return;
      auto gq_all = qkv.ensure_grad();
      kernels::RowMat<T> dp(tokens, tokens);
      for (std::int64_t b = 0; b < batch; ++b) {
        const T* base = qkv.ptr() + b * tokens * three_d;
        T* gbase = gq_all.data() + b * tokens * three_d;
        const T* gout = out.grad().data() + b * tokens * d;
        for (std::int64_t h = 0; h < heads; ++h) {
          CMap q(base + h * dh, tokens, dh, Stride(three_d));
          CMap k(base + d + h * dh, tokens, dh, Stride(three_d));
          CMap v(base + 2 * d + h * dh, tokens, dh, Stride(three_d));
          CMap go(gout + h * dh, tokens, dh, Stride(d));
          kernels::ConstMatMap<T> p(probs.ptr() + (b * heads + h) * tokens * tokens, tokens, tokens);
          MMap gq(gbase + h * dh, tokens, dh, Stride(three_d));
          MMap gk(gbase + d + h * dh, tokens, dh, Stride(three_d));
          MMap gv(gbase + 2 * d + h * dh, tokens, dh, Stride(three_d));
          gv.noalias() += p.transpose() * go;
          dp.noalias() = go * v.transpose();
          for (std::int64_t i = 0; i < tokens; ++i) {
            T dot = 0;
            for (std::int64_t j = 0; j < tokens; ++j) dot += dp(i, j) * p(i, j);
            for (std::int64_t j = 0; j < tokens; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot) * scale_factor;
          }
          gq.noalias() += dp * k;
          gk.noalias() += dp.transpose() * q;
        }
      }
    });
  }
  return out;
}

/// Splits [n, c, h, w] images into non-overlapping p x p patches, giving
/// [n, (h/p)*(w/p), c*p*p] with each patch flattened channel-major.
template <typename T>
BasicTensor<T> patchify(Tape<T>& tape, const BasicTensor<T>& images, std::int64_t p) {
  if (images.rank() != 4) throw DimensionError("patchify expects [n,c,h,w], got " + shape_str(images.shape()));
  const auto n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  if (p <= 0 || h % p != 0 || w % p != 0)
    throw ValidationError("image " + std::to_string(h) + "x" + std::to_string(w) +
                          " not divisible by patch " + std::to_string(p));
  const auto gh = h / p, gw = w / p, pd = c * p * p;
  BasicTensor<T> out({n, gh * gw, pd});
  // index map: out flat index -> image flat index
  auto src_index = [=](std::int64_t i, std::int64_t py, std::int64_t px, std::int64_t ch,
                       std::int64_t y, std::int64_t x) {
    return ((i * c + ch) * h + py * p + y) * w + px * p + x;
  };
  T* op = out.ptr();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t py = 0; py < gh; ++py)
      for (std::int64_t px = 0; px < gw; ++px)
        for (std::int64_t ch = 0; ch < c; ++ch)
          for (std::int64_t y = 0; y < p; ++y)
            for (std::int64_t x = 0; x < p; ++x)
              *op++ = images[src_index(i, py, px, ch, y, x)];
  if (tape.wants_grad(images)) {
    tape.record(out, [images, out, src_index, n, gh, gw, c, p]() mutable {
      if (!out.has_grad()) return;
      auto gi = images.ensure_grad();
      const T* g = out.grad().data();
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t py = 0; py < gh; ++py)
          for (std::int64_t px = 0; px < gw; ++px)
            for (std::int64_t ch = 0; ch < c; ++ch)
              for (std::int64_t y = 0; y < p; ++y)
                for (std::int64_t x = 0; x < p; ++x) gi[src_index(i, py, px, ch, y, x)] += *g++;
    });
  }
  return out;
}

/// Builds [n, 1 + P, d] token sequences: CLS token first, then the patch
/// embeddings, plus the positional table [1 + P, d].
template <typename T>
BasicTensor<T> assemble_tokens(Tape<T>& tape, const BasicTensor<T>& patches,
                               const BasicTensor<T>& cls, const BasicTensor<T>& pos) {
  if (patches.rank() != 3) throw DimensionError("assemble_tokens expects [n,P,d]");
  const auto n = patches.dim(0), np = patches.dim(1), d = patches.dim(2), t = np + 1;
  if (cls.numel() != d || pos.numel() != t * d)
    throw DimensionError("cls " + shape_str(cls.shape()) + " / pos " + shape_str(pos.shape()) +
                         " incompatible with patches " + shape_str(patches.shape()));
  BasicTensor<T> out({n, t, d});
  for (std::int64_t i = 0; i < n; ++i) {
    T* o = out.ptr() + i * t * d;
    for (std::int64_t c = 0; c < d; ++c) o[c] = cls[c] + pos[c];
    const T* src = patches.ptr() + i * np * d;
    for (std::int64_t r = 0; r < np * d; ++r) o[d + r] = src[r] + pos[d + r];
  }
  if (tape.wants_grad(patches, cls, pos)) {
    tape.record(out, [patches, cls, pos, out, n, np, d, t]() mutable {
      if (!out.has_grad()) return;
      const T* g = out.grad().data();
      if (patches.requires_grad()) {
        auto gp = patches.ensure_grad();
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t r = 0; r < np * d; ++r) gp[i * np * d + r] += g[i * t * d + d + r];
      }
      if (cls.requires_grad()) {
        auto gc = cls.ensure_grad();
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t c = 0; c < d; ++c) gc[c] += g[i * t * d + c];
      }
      if (pos.requires_grad()) {
        auto gpos = pos.ensure_grad();
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t r = 0; r < t * d; ++r) gpos[r] += g[i * t * d + r];
      }
    });
  }
  return out;
}

/// Multiplies every slice x[i, ...] by factors[i]; used for drop-path.
template <typename T>
BasicTensor<T> scale_samples(Tape<T>& tape, const BasicTensor<T>& x, std::vector<T> factors) {
  const auto n = x.dim(0);
  if (static_cast<std::int64_t>(factors.size()) != n)
    throw DimensionError("scale_samples factor count mismatch");
  const auto per = n == 0 ? 0 : x.numel() / n;
  BasicTensor<T> out(x.shape());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < per; ++j) out[i * per + j] = x[i * per + j] * factors[static_cast<std::size_t>(i)];
  if (tape.wants_grad(x)) {
    tape.record(out, [x, out, factors = std::move(factors), n, per]() mutable {
      if (!out.has_grad()) return;
      auto gx = x.ensure_grad();
      auto g = out.grad();
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < per; ++j) gx[i * per + j] += g[i * per + j] * factors[static_cast<std::size_t>(i)];
    });
  }
  return out;
}

/// Selects token `index` from [n, t, d], giving [n, d].
template <typename T>
BasicTensor<T> take_token(Tape<T>& tape, const BasicTensor<T>& x, std::int64_t index) {
  if (x.rank() != 3 || index < 0 || index >= x.dim(1))
    throw DimensionError("take_token " + std::to_string(index) + " from " + shape_str(x.shape()));
  const auto n = x.dim(0), t = x.dim(1), d = x.dim(2);
  BasicTensor<T> out({n, d});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t c = 0; c < d; ++c) out[i * d + c] = x[(i * t + index) * d + c];
  if (tape.wants_grad(x)) {
    tape.record(out, [x, out, n, t, d, index]() mutable {
      if (!out.has_grad()) return;
      auto gx = x.ensure_grad();
      auto g = out.grad();
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < d; ++c) gx[(i * t + index) * d + c] += g[i * d + c];
    });
  }
  return out;
}

}  // namespace dcvit
