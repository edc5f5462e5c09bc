#include "rtal/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "rtal/errors.hpp"
#include "rtal/ops.hpp"
#include "rtal/rng.hpp"
#include "rtal/tape.hpp"

namespace rtal {
namespace {

void require_f64(const Tensor& t) {
  if (t.dtype() != DType::F64) throw std::invalid_argument("gradient checks need double-precision tensors");
}

Tensor projection_weights(const Shape& shape) {
  Rng rng(0x9a7d'c0de);
  Tensor w(shape, DType::F64);
  for (double& v : w.mutable_values<double>()) v = rng.uniform(-1.0, 1.0);
  return w;
}

double project(const Tensor& y, const Tensor& w) {
  const auto yv = y.values<double>();
  const auto wv = w.values<double>();
  double acc = 0;
  for (std::size_t i = 0; i < yv.size(); ++i) acc += yv[i] * wv[i];
  return acc;
}

}  // namespace

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
  require_f64(x);
  Tensor point = x.detach();
  point.set_requires_grad(true);
  const Tensor y = f(point);
  require_f64(y);
  const Tensor w = projection_weights(y.shape());
  Tensor loss = sum(mul(y, w));
  if (loss.requires_grad()) backward(loss);
  const std::vector<double> analytic = point.grad_vector();

  NoGradGuard no_grad;
  double worst = 0;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    const double v = point.at(i);
    Tensor probe = point.detach();
    probe.set(i, v + step);
    const double up = project(f(probe), w);
    probe.set(i, v - step);
    const double down = project(f(probe), w);
    worst = std::max(worst, relative_error(analytic[i], (up - down) / (2 * step)));
  }
  return worst;
}

double grad_check_params(const std::function<Tensor()>& loss_fn, std::span<Tensor> params, double step) {
  for (Tensor& p : params) {
    require_f64(p);
    p.zero_grad();
  }
  const Tensor loss = loss_fn();
  if (loss.numel() != 1) throw ShapeError("grad_check_params: loss must be scalar");
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (const Tensor& p : params) analytic.push_back(p.grad_vector());

  NoGradGuard no_grad;
  double worst = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = params[k];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double v = p.at(i);
      p.set(i, v + step);
      const double up = loss_fn().item();
      p.set(i, v - step);
      const double down = loss_fn().item();
      p.set(i, v);
      worst = std::max(worst, relative_error(analytic[k][i], (up - down) / (2 * step)));
    }
  }
  return worst;
}

}  // namespace rtal
