#include "rtal/optim.hpp"

#include <algorithm>
#include <cmath>

#include "rtal/errors.hpp"

namespace rtal {

AdamState AdamState::create(const ParamList& params, const AdamConfig& config) {
  AdamState s;
  s.config = config;
  for (const auto& p : params) {
    s.first_moment.emplace_back(p.tensor.shape(), p.tensor.dtype());
    s.second_moment.emplace_back(p.tensor.shape(), p.tensor.dtype());
  }
  return s;
}

Checkpoint AdamState::save(const ParamList& params) const {
  Checkpoint c;
  c.step = step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.params.push_back({"m." + params[i].name, first_moment[i].to(DType::F32)});
    c.params.push_back({"v." + params[i].name, second_moment[i].to(DType::F32)});
  }
  return c;
}

void AdamState::load(const ParamList& params, const Checkpoint& saved) {
  ParamList targets;
  for (std::size_t i = 0; i < params.size(); ++i) {
    targets.push_back({"m." + params[i].name, first_moment[i]});
    targets.push_back({"v." + params[i].name, second_moment[i]});
  }
  load_params(targets, saved);
  step = saved.step;
}

double adam_step(AdamState& state, const ParamList& params, double lr) {
  if (params.size() != state.first_moment.size()) throw std::invalid_argument("adam_step: state does not match parameters");
  const AdamConfig& hp = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(hp.beta1, t);
  const double correction2 = 1.0 - std::pow(hp.beta2, t);
  double largest = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k].tensor;
    if (!p.has_grad()) continue;
    visit_dtype(p.dtype(), [&]<class T>() {
      const auto g = p.grad_values<T>();
      for (T v : g) {
        if (!std::isfinite(v)) throw NumericalError("non-finite gradient in parameter '" + params[k].name + "'");
      }
      auto w = p.mutable_values<T>();
      auto m = state.first_moment[k].mutable_values<T>();
      auto v = state.second_moment[k].mutable_values<T>();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = static_cast<T>(hp.beta1 * static_cast<double>(m[i]) + (1 - hp.beta1) * gi);
        v[i] = static_cast<T>(hp.beta2 * static_cast<double>(v[i]) + (1 - hp.beta2) * gi * gi);
        const double m_hat = static_cast<double>(m[i]) / correction1;
        const double v_hat = static_cast<double>(v[i]) / correction2;
        const double update = lr * m_hat / (std::sqrt(v_hat) + hp.eps);
        w[i] = static_cast<T>(static_cast<double>(w[i]) - update);
        largest = std::max(largest, std::abs(update));
      }
    });
  }
  return largest;
}

double lr_schedule(std::uint64_t step, std::size_t d_model, std::size_t warmup) {
  if (step == 0 || warmup == 0) throw std::invalid_argument("lr_schedule: step and warmup must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return std::pow(static_cast<double>(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

}  // namespace rtal
