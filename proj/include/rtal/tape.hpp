#pragma once

#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "rtal/tensor.hpp"

namespace rtal {

/// Backward rule of one recorded operation. Receives the operation output,
/// whose gradient is populated, and accumulates into the inputs it captured.
using BackwardRule = std::function<void(const Tensor& output)>;

/// Ordered record of differentiable operations executed on this thread.
///
/// Operations append themselves when any input requires a gradient, so every
/// entry's inputs were produced by earlier entries or are leaves. backward()
/// replays the record in reverse and then clears it. Each thread owns its own
/// tape; tensors may cross threads but a graph may not.
class Tape {
 public:
  static Tape& local();

  bool recording() const noexcept { return paused_ == 0; }
  std::size_t size() const noexcept { return entries_.size(); }
  void clear() noexcept { entries_.clear(); }

  void record(const Tensor& output, BackwardRule rule);

  /// Populates gradients of every requires_grad ancestor of `loss`
  /// (accumulating into existing buffers) and clears the tape.
  void backward(const Tensor& loss);

 private:
  friend class NoGradGuard;
  struct Entry {
    Tensor output;
    BackwardRule rule;
  };
  std::vector<Entry> entries_;
  int paused_ = 0;
};

/// Suspends recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++Tape::local().paused_; }
  ~NoGradGuard() { --Tape::local().paused_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

void backward(const Tensor& loss);

/// Marks `output` as computed from `inputs` and records `rule` if recording is
/// on and any input requires a gradient. In debug builds also rejects
/// non-finite outputs. Returns `output`.
Tensor record_op(Tensor output, std::initializer_list<Tensor> inputs, BackwardRule rule);

/// Adds `g` into `target`'s gradient when `target` requires one.
template <class T>
void accumulate_grad(const Tensor& target, std::span<const T> g) {
  if (!target.requires_grad()) return;
  Tensor t = target;
  auto dst = t.mutable_grad<T>();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
}

}  // namespace rtal
