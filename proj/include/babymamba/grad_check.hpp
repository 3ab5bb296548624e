#pragma once

#include <functional>
#include <span>

#include "babymamba/autodiff.hpp"

namespace bm {

// Max over coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|), with g_fd
// the central difference (f(theta + h e_i) - f(theta - h e_i)) / 2h.
double grad_check(const std::function<Var(const Var&)>& f, const Tensor& theta, double h = 1e-5);

// Same measure over every coordinate of several parameters that `f` closes
// over; parameter values are restored afterwards.
double grad_check(const std::function<Var()>& f, std::span<Var> params, double h = 1e-5);

}  // namespace bm
