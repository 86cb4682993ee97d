// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "dcvit/error.hpp"
#include "dcvit/tensor.hpp"

namespace dcvit {

/// Multiply counts observed while executing ops; used by MACs cross-checks
/// and by the structural tests that assert attention math was skipped.
struct OpCounters {
  std::int64_t linear_macs = 0;
  std::int64_t matmul_macs = 0;
  std::int64_t attention_macs = 0;
  std::int64_t attention_calls = 0;
  std::int64_t layer_norm_elements = 0;
};

/// Reverse-mode gradient tape.
///
/// Ops append a backward closure when recording and at least one input
/// requires a gradient. backward() replays the closures newest-first, which
/// is a valid reverse topological order because ops can only consume tensors
/// that already exist. A tape may run backward once; reset() re-arms it.
/// One tape belongs to one thread.
template <typename T>
class Tape {
 public:
  enum class Mode { Record, Inference };

  explicit Tape(Mode mode = Mode::Record) : recording_(mode == Mode::Record) {}

  static Tape inference() { return Tape(Mode::Inference); }

  bool recording() const { return recording_; }

  template <typename... Ts>
  bool wants_grad(const Ts&... inputs) const {
    return recording_ && (inputs.requires_grad() || ...);
  }

  /// Marks `out` as differentiable and registers its backward closure.
  void record(BasicTensor<T>& out, std::function<void()> backward_fn) {
    if (consumed_) throw UsageError("tape already ran backward; call reset() before reuse");
    out.set_requires_grad(true);
    nodes_.push_back(std::move(backward_fn));
  }

  /// Populates gradients of every requires_grad tensor reachable from loss.
  /// Leaf gradients are accumulated into their existing buffers.
  void backward(BasicTensor<T> loss) {
    if (loss.numel() != 1)
      throw UsageError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    if (consumed_) throw UsageError("backward() called twice on the same tape without reset()");
    if (!recording_ || !loss.requires_grad() || nodes_.empty())
      throw UsageError("loss was not produced by a recording tape");
    consumed_ = true;
    loss.ensure_grad()[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  /// Drops all recorded closures (and the intermediates they keep alive).
  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  OpCounters& counters() { return counters_; }
  const OpCounters& counters() const { return counters_; }

 private:
  bool recording_;
  bool consumed_ = false;
  std::vector<std::function<void()>> nodes_;
  OpCounters counters_;
};

}  // namespace dcvit
