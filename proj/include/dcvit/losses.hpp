// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dcvit/error.hpp"
#include "dcvit/tape.hpp"
#include "dcvit/tensor.hpp"

namespace dcvit {

/// Sum of squared differences, sum ||a - b||^2 over every entry.
template <typename T>
BasicTensor<T> mse_sum(Tape<T>& tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mse_sum " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double acc = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double dv = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += dv * dv;
  }
  auto out = BasicTensor<T>::scalar(static_cast<T>(acc));
  if (tape.wants_grad(a, b)) {
    tape.record(out, [a, b, out]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      if (a.requires_grad()) {
        auto ga = a.ensure_grad();
        for (std::int64_t i = 0; i < a.numel(); ++i) ga[i] += T(2) * (a[i] - b[i]) * g;
      }
      if (b.requires_grad()) {
        auto gb = b.ensure_grad();
        for (std::int64_t i = 0; i < a.numel(); ++i) gb[i] -= T(2) * (a[i] - b[i]) * g;
      }
    });
  }
  return out;
}

namespace detail {

/// log-softmax of one row, computed as (x - max) - log(sum exp(x - max)).
template <typename T>
void log_softmax_row(const T* x, T* out, std::int64_t n) {
  T mx = x[0];
  for (std::int64_t c = 1; c < n; ++c) mx = std::max(mx, x[c]);
  double total = 0.0;
  for (std::int64_t c = 0; c < n; ++c) total += std::exp(static_cast<double>(x[c] - mx));
  const double log_total = std::log(total);
  // subtracting in double keeps tiny log-probabilities accurate in float
  for (std::int64_t c = 0; c < n; ++c) out[c] = static_cast<T>(static_cast<double>(x[c] - mx) - log_total);
}

}  // namespace detail

/// -sum_x sum_c p_T(c|x) log softmax(s)(c|x), summed over rows.
///
/// teacher_probs rows must be probability vectors (sum 1 within 1e-5).
template <typename T>
BasicTensor<T> soft_cross_entropy(Tape<T>& tape, const BasicTensor<T>& teacher_probs,
                                  const BasicTensor<T>& student_logits) {
  if (teacher_probs.shape() != student_logits.shape() || teacher_probs.rank() != 2)
    throw DimensionError("soft_cross_entropy " + shape_str(teacher_probs.shape()) + " vs " +
                         shape_str(student_logits.shape()));
  const auto n = teacher_probs.dim(0), classes = teacher_probs.dim(1);
  for (std::int64_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::int64_t c = 0; c < classes; ++c) {
      const T p = teacher_probs[r * classes + c];
      if (!(p >= T(0))) throw ValidationError("teacher probability row has a negative entry");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-5)
      throw ValidationError(detail::concat("teacher probability row ", r, " sums to ", s));
  }
  BasicTensor<T> logp(student_logits.shape());
  double acc = 0.0;
  for (std::int64_t r = 0; r < n; ++r) {
    detail::log_softmax_row(student_logits.ptr() + r * classes, logp.ptr() + r * classes, classes);
    for (std::int64_t c = 0; c < classes; ++c)
      acc -= static_cast<double>(teacher_probs[r * classes + c]) * static_cast<double>(logp[r * classes + c]);
  }
  auto out = BasicTensor<T>::scalar(static_cast<T>(acc));
  if (tape.wants_grad(teacher_probs, student_logits)) {
    tape.record(out, [teacher_probs, student_logits, logp, out, n, classes]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      if (student_logits.requires_grad()) {
        auto gs = student_logits.ensure_grad();
        for (std::int64_t r = 0; r < n; ++r) {
          T mass = 0;
          for (std::int64_t c = 0; c < classes; ++c) mass += teacher_probs[r * classes + c];
          for (std::int64_t c = 0; c < classes; ++c) {
            const auto i = r * classes + c;
            gs[i] += g * (mass * std::exp(logp[i]) - teacher_probs[i]);
          }
        }
      }
      if (teacher_probs.requires_grad()) {
        auto gt = teacher_probs.ensure_grad();
        for (std::int64_t i = 0; i < n * classes; ++i) gt[i] -= g * logp[i];
      }
    });
  }
  return out;
}

/// Mean negative log-likelihood of integer labels.
template <typename T>
BasicTensor<T> hard_cross_entropy(Tape<T>& tape, const BasicTensor<T>& logits,
                                  std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<std::int64_t>(labels.size()))
    throw DimensionError("hard_cross_entropy logits " + shape_str(logits.shape()) + " with " +
                         std::to_string(labels.size()) + " labels");
  const auto n = logits.dim(0), classes = logits.dim(1);
  for (auto y : labels)
    if (y < 0 || y >= classes)
      throw ValidationError(detail::concat("label ", y, " outside [0, ", classes, ")"));
  BasicTensor<T> logp(logits.shape());
  double acc = 0.0;
  for (std::int64_t r = 0; r < n; ++r) {
    detail::log_softmax_row(logits.ptr() + r * classes, logp.ptr() + r * classes, classes);
    acc -= static_cast<double>(logp[r * classes + labels[static_cast<std::size_t>(r)]]);
  }
  auto out = BasicTensor<T>::scalar(static_cast<T>(n > 0 ? acc / static_cast<double>(n) : 0.0));
  if (tape.wants_grad(logits)) {
    std::vector<int> ys(labels.begin(), labels.end());
    tape.record(out, [logits, logp, out, ys = std::move(ys), n, classes]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0] / static_cast<T>(n);
      auto gl = logits.ensure_grad();
      for (std::int64_t r = 0; r < n; ++r) {
        for (std::int64_t c = 0; c < classes; ++c) gl[r * classes + c] += g * std::exp(logp[r * classes + c]);
        gl[r * classes + ys[static_cast<std::size_t>(r)]] -= g;
      }
    });
  }
  return out;
}

/// Total-variation energy sum_ij ((x[i,j+1]-x[i,j])^2 + (x[i+1,j]-x[i,j])^2)^(beta/2)
/// per channel, summed over channels and (for rank-4 input) images.
/// Differences that would step past the border count as zero.
template <typename T>
BasicTensor<T> tv_reg(Tape<T>& tape, const BasicTensor<T>& img, T beta) {
  if (img.rank() != 3 && img.rank() != 4)
    throw DimensionError("tv_reg expects [c,h,w] or [n,c,h,w], got " + shape_str(img.shape()));
  const auto h = img.dim(-2), w = img.dim(-1);
  if (h < 2 || w < 2) throw ValidationError("tv_reg needs spatial extents >= 2");
  if (!(beta > T(0))) throw ValidationError("tv_reg beta must be positive");
  const auto planes = img.numel() / (h * w);
  const T half_beta = beta / T(2);
  auto diffs = [h, w](const T* x, std::int64_t i, std::int64_t j, T& dx, T& dy) {
    dx = j + 1 < w ? x[i * w + j + 1] - x[i * w + j] : T(0);
    dy = i + 1 < h ? x[(i + 1) * w + j] - x[i * w + j] : T(0);
  };
  double acc = 0.0;
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const T* x = img.ptr() + pl * h * w;
    for (std::int64_t i = 0; i < h; ++i)
      for (std::int64_t j = 0; j < w; ++j) {
        T dx, dy;
        diffs(x, i, j, dx, dy);
        const T s = dx * dx + dy * dy;
        acc += half_beta == T(1) ? static_cast<double>(s) : std::pow(static_cast<double>(s), static_cast<double>(half_beta));
      }
  }
  auto out = BasicTensor<T>::scalar(static_cast<T>(acc));
  if (tape.wants_grad(img)) {
    tape.record(out, [img, out, planes, h, w, half_beta, diffs]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      auto gi = img.ensure_grad();
      for (std::int64_t pl = 0; pl < planes; ++pl) {
        const T* x = img.ptr() + pl * h * w;
        T* gx = gi.data() + pl * h * w;
        for (std::int64_t i = 0; i < h; ++i)
          for (std::int64_t j = 0; j < w; ++j) {
            T dx, dy;
            diffs(x, i, j, dx, dy);
            const T s = dx * dx + dy * dy;
            T coef;
            if (half_beta == T(1))
              coef = T(1);
            else if (s > T(0))
              coef = half_beta * std::pow(s, half_beta - T(1));
            else
              coef = T(0);
            coef *= T(2) * g;
            if (j + 1 < w) {
              gx[i * w + j + 1] += coef * dx;
              gx[i * w + j] -= coef * dx;
            }
            if (i + 1 < h) {
              gx[(i + 1) * w + j] += coef * dy;
              gx[i * w + j] -= coef * dy;
            }
          }
      }
    });
  }
  return out;
}

/// Squared L2 norm of every entry.
template <typename T>
BasicTensor<T> l2_reg(Tape<T>& tape, const BasicTensor<T>& img) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < img.numel(); ++i) acc += static_cast<double>(img[i]) * static_cast<double>(img[i]);
  auto out = BasicTensor<T>::scalar(static_cast<T>(acc));
  if (tape.wants_grad(img)) {
    tape.record(out, [img, out]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      auto gi = img.ensure_grad();
      for (std::int64_t i = 0; i < img.numel(); ++i) gi[i] += T(2) * img[i] * g;
    });
  }
  return out;
}

}  // namespace dcvit
