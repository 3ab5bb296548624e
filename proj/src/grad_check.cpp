#include "babymamba/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace bm {

namespace {

double evaluate(const std::function<Var()>& f) {
  NoGradGuard guard;
  const double v = f().value()[0];
  if (!std::isfinite(v)) throw NumericError("grad_check: objective is not finite");
  return v;
}

}  // namespace

double grad_check(const std::function<Var()>& f, std::span<Var> params, double h) {
  for (auto& p : params) p.zero_grad();
  const Var loss = f();
  if (!std::isfinite(loss.value()[0])) throw NumericError("grad_check: objective is not finite");
  backward(loss);

  double worst = 0.0;
  for (auto& p : params) {
    const Tensor analytic = p.grad();
    Tensor& theta = p.mutable_value();
    for (std::size_t i = 0; i < theta.numel(); ++i) {
      const double orig = theta[i];
      theta[i] = orig + h;
      const double up = evaluate(f);
      theta[i] = orig - h;
      const double down = evaluate(f);
      theta[i] = orig;
      const double fd = (up - down) / (2.0 * h);
      const double ad = analytic[i];
      const double err = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

double grad_check(const std::function<Var(const Var&)>& f, const Tensor& theta, double h) {
  Var param = Var::parameter(theta);
  Var params[] = {param};
  return grad_check([&] { return f(param); }, params, h);
}

}  // namespace bm
