#include "rtal/tape.hpp"

#include <cmath>

#include "rtal/errors.hpp"

namespace rtal {

Tape& Tape::local() {
  thread_local Tape tape;
  return tape;
}

void Tape::record(const Tensor& output, BackwardRule rule) { entries_.push_back({output, std::move(rule)}); }

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward() needs a scalar loss, shape is " + to_string(loss.shape()));
  if (!loss.requires_grad()) throw std::logic_error("backward(): loss does not depend on any requires_grad tensor");
  std::size_t end = entries_.size();
  while (end > 0 && !entries_[end - 1].output.is(loss)) --end;
  if (end == 0) throw std::logic_error("backward(): loss is not on this thread's tape");

  Tensor seed = loss;
  visit_dtype(loss.dtype(), [&]<class T>() { seed.mutable_grad<T>()[0] += T(1); });
  for (std::size_t i = end; i-- > 0;) {
    const Entry& e = entries_[i];
    if (e.output.has_grad()) e.rule(e.output);
  }
  entries_.clear();
}

void backward(const Tensor& loss) { Tape::local().backward(loss); }

Tensor record_op(Tensor output, std::initializer_list<Tensor> inputs, BackwardRule rule) {
#ifndef NDEBUG
  visit_dtype(output.dtype(), [&]<class T>() {
    for (T v : output.values<T>()) {
      if (!std::isfinite(v)) throw NumericalError("non-finite value produced by a forward operation");
    }
  });
#endif
  Tape& tape = Tape::local();
  if (!tape.recording()) return output;
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (!any) return output;
  output.set_requires_grad(true);
  tape.record(output, std::move(rule));
  return output;
}

}  // namespace rtal
