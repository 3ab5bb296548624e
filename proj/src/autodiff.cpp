#include "babymamba/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace bm {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

thread_local bool g_grad_enabled = true;
thread_local MacTally* g_mac_tally = nullptr;

void tally_linear(std::uint64_t n) {
  if (g_mac_tally) g_mac_tally->linear += n;
}
void tally_conv(std::uint64_t n) {
  if (g_mac_tally) g_mac_tally->conv += n;
}
void tally_pool(std::uint64_t n) {
  if (g_mac_tally) g_mac_tally->pool += n;
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Accumulate into an input's gradient if it participates in differentiation.
template <typename F>
void accumulate(Node& self, std::size_t i, F&& f) {
  Node& in = *self.inputs[i];
  if (!in.requires_grad) return;
  f(in.grad_ref());
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_scalar(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

template <typename Fwd, typename Deriv>
Var unary(const Var& x, Fwd fwd, Deriv deriv) {
  Tensor out(x.shape());
  const auto in = x.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = fwd(in[i]);
  return make_result(std::move(out), {x}, [deriv](Node& self) {
    accumulate(self, 0, [&](Tensor& g) {
      const auto xv = self.inputs[0]->value.data();
      const auto yv = self.value.data();
      const auto gy = self.grad.data();
      for (std::size_t i = 0; i < xv.size(); ++i) g[i] += gy[i] * deriv(xv[i], yv[i]);
    });
  });
}

}  // namespace

// ---- Var / graph ----------------------------------------------------------

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
  if (node_->grad.empty()) return Tensor(node_->value.shape());
  return node_->grad;
}

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  Var out;
  out.node_ = std::make_shared<Node>();
  out.node_->value = std::move(value);
  if (!g_grad_enabled) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->inputs.reserve(inputs.size());
  for (auto& v : inputs) out.node_->inputs.push_back(v.node());
  out.node_->backward_fn = std::move(backward_fn);
  return out;
}

void backward(const Var& root) {
  if (root.numel() != 1) {
    throw ContractError("backward requires a scalar root, got shape " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_ref()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

MacCounter::MacCounter() : previous_(g_mac_tally) { g_mac_tally = &tally_; }
MacCounter::~MacCounter() { g_mac_tally = previous_; }
MacTally* active_mac_tally() { return g_mac_tally; }

// ---- elementwise ------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  Tensor out(a.shape());
  out.flat() = a.value().flat() + b.value().flat();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    accumulate(self, 0, [&](Tensor& g) { g.flat() += self.grad.flat(); });
    accumulate(self, 1, [&](Tensor& g) { g.flat() += self.grad.flat(); });
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  Tensor out(a.shape());
  out.flat() = a.value().flat() - b.value().flat();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    accumulate(self, 0, [&](Tensor& g) { g.flat() += self.grad.flat(); });
    accumulate(self, 1, [&](Tensor& g) { g.flat() -= self.grad.flat(); });
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  out.flat() = a.value().flat().cwiseProduct(b.value().flat());
  return make_result(std::move(out), {a, b}, [](Node& self) {
    accumulate(self, 0, [&](Tensor& g) { g.flat() += self.grad.flat().cwiseProduct(self.inputs[1]->value.flat()); });
    accumulate(self, 1, [&](Tensor& g) { g.flat() += self.grad.flat().cwiseProduct(self.inputs[0]->value.flat()); });
  });
}

Var scale(const Var& a, double s) {
  Tensor out(a.shape());
  out.flat() = a.value().flat() * s;
  return make_result(std::move(out), {a}, [s](Node& self) {
    accumulate(self, 0, [&](Tensor& g) { g.flat() += s * self.grad.flat(); });
  });
}

Var add_bias(const Var& x, const Var& b) {
  if (b.value().rank() != 1 || b.dim(0) != x.shape().back()) {
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " does not match " + shape_str(x.shape()));
  }
  Tensor out = x.value();
  out.rows_view().rowwise() += b.value().flat().transpose();
  return make_result(std::move(out), {x, b}, [](Node& self) {
    accumulate(self, 0, [&](Tensor& g) { g.flat() += self.grad.flat(); });
    accumulate(self, 1, [&](Tensor& g) { g.flat() += self.grad.rows_view().colwise().sum().transpose(); });
  });
}

Var silu(const Var& x) {
  return unary(
      x, [](double v) { return v * sigmoid_scalar(v); },
      [](double v, double) {
        const double s = sigmoid_scalar(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Var sigmoid(const Var& x) {
  return unary(x, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var softplus(const Var& x) {
  return unary(x, softplus_scalar, [](double v, double) { return sigmoid_scalar(v); });
}

Var exp(const Var& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var softmax(const Var& x, std::size_t axis) {
  const auto sp = split_axis(x.shape(), axis);
  Tensor out(x.shape());
  const auto in = x.value().data();
  auto o = out.data();
  for (std::size_t a = 0; a < sp.outer; ++a) {
    for (std::size_t c = 0; c < sp.inner; ++c) {
      const std::size_t base = a * sp.len * sp.inner + c;
      double mx = -INFINITY;
      for (std::size_t t = 0; t < sp.len; ++t) mx = std::max(mx, in[base + t * sp.inner]);
      double denom = 0.0;
      for (std::size_t t = 0; t < sp.len; ++t) {
        const double e = std::exp(in[base + t * sp.inner] - mx);
        o[base + t * sp.inner] = e;
        denom += e;
      }
      for (std::size_t t = 0; t < sp.len; ++t) o[base + t * sp.inner] /= denom;
    }
  }
  return make_result(std::move(out), {x}, [sp](Node& self) {
    accumulate(self, 0, [&](Tensor& g) {
      const auto y = self.value.data();
      const auto gy = self.grad.data();
      for (std::size_t a = 0; a < sp.outer; ++a) {
        for (std::size_t c = 0; c < sp.inner; ++c) {
          const std::size_t base = a * sp.len * sp.inner + c;
          double dot = 0.0;
          for (std::size_t t = 0; t < sp.len; ++t) dot += gy[base + t * sp.inner] * y[base + t * sp.inner];
          for (std::size_t t = 0; t < sp.len; ++t) {
            const std::size_t i = base + t * sp.inner;
            g[i] += y[i] * (gy[i] - dot);
          }
        }
      }
    });
  });
}

// ---- linear algebra ---------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Tensor out(Shape{a.dim(0), b.dim(1)});
  out.rows_view().noalias() = a.value().rows_view() * b.value().rows_view();
  tally_linear(static_cast<std::uint64_t>(a.dim(0)) * a.dim(1) * b.dim(1));
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const auto G = self.grad.rows_view();
    accumulate(self, 0, [&](Tensor& g) { g.rows_view().noalias() += G * self.inputs[1]->value.rows_view().transpose(); });
    accumulate(self, 1, [&](Tensor& g) { g.rows_view().noalias() += self.inputs[0]->value.rows_view().transpose() * G; });
  });
}

namespace {

Var linear_impl(const Var& x, const Var& w, const Var* bias) {
  if (w.value().rank() != 2 || x.shape().back() != w.dim(1)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  if (bias && (bias->value().rank() != 1 || bias->dim(0) != w.dim(0))) {
    throw DimensionError("linear: bias " + shape_str(bias->shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(0);
  Tensor out(out_shape);
  const auto X = x.value().rows_view();
  out.rows_view().noalias() = X * w.value().rows_view().transpose();
  if (bias) out.rows_view().rowwise() += bias->value().flat().transpose();
  tally_linear(static_cast<std::uint64_t>(X.rows()) * w.dim(0) * w.dim(1));

  std::vector<Var> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return make_result(std::move(out), std::move(inputs), [](Node& self) {
    const auto G = self.grad.rows_view();
    accumulate(self, 0, [&](Tensor& g) { g.rows_view().noalias() += G * self.inputs[1]->value.rows_view(); });
    accumulate(self, 1, [&](Tensor& g) { g.rows_view().noalias() += G.transpose() * self.inputs[0]->value.rows_view(); });
    if (self.inputs.size() > 2) {
      accumulate(self, 2, [&](Tensor& g) { g.flat() += G.colwise().sum().transpose(); });
    }
  });
}

}  // namespace

Var linear(const Var& x, const Var& weight) { return linear_impl(x, weight, nullptr); }
Var linear(const Var& x, const Var& weight, const Var& bias) { return linear_impl(x, weight, &bias); }

Var conv1d(const Var& x, const Var& w, const Var& b) {
  const bool batched = x.value().rank() == 3;
  if (!batched && x.value().rank() != 2) throw DimensionError("conv1d: input must be [Cin x L] or [B x Cin x L], got " + shape_str(x.shape()));
  if (w.value().rank() != 3) throw DimensionError("conv1d: weight must be [Cout x Cin x k], got " + shape_str(w.shape()));
  const std::size_t B = batched ? x.dim(0) : 1;
  const std::size_t cin = x.dim(batched ? 1 : 0);
  const std::size_t L = x.dim(batched ? 2 : 1);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin) {
    throw DimensionError("conv1d: input " + shape_str(x.shape()) + " has " + std::to_string(cin) +
                         " channels but weight " + shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)));
  }
  if (k % 2 == 0) throw ConfigError("conv1d: same padding needs an odd kernel size, got " + std::to_string(k));
  if (b.value().rank() != 1 || b.dim(0) != cout) throw DimensionError("conv1d: bias " + shape_str(b.shape()) + " does not match " + shape_str(w.shape()));
  const std::size_t pad = (k - 1) / 2;

  Tensor out(batched ? Shape{B, cout, L} : Shape{cout, L});
  const ConstMatrixMap<double> W(w.value().data().data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(cin * k));
  RowMatrix<double> cols(cin * k, L);
  const auto xin = x.value().data();
  for (std::size_t n = 0; n < B; ++n) {
    cols.setZero();
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t t = 0; t < L; ++t) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(pad);
          if (src >= 0 && src < static_cast<std::ptrdiff_t>(L)) cols(c * k + j, t) = xin[(n * cin + c) * L + src];
        }
      }
    }
    MatrixMap<double> Y(out.data().data() + n * cout * L, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(L));
    Y.noalias() = W * cols;
    Y.colwise() += b.value().flat();
  }
  tally_conv(static_cast<std::uint64_t>(B) * cout * cin * k * L);

  return make_result(std::move(out), {x, w, b}, [B, cin, L, cout, k, pad](Node& self) {
    const auto xin = self.inputs[0]->value.data();
    const ConstMatrixMap<double> Wm(self.inputs[1]->value.data().data(), static_cast<Eigen::Index>(cout),
                                    static_cast<Eigen::Index>(cin * k));
    RowMatrix<double> cols(cin * k, L);
    RowMatrix<double> gcols(cin * k, L);
    for (std::size_t n = 0; n < B; ++n) {
      const ConstMatrixMap<double> G(self.grad.data().data() + n * cout * L, static_cast<Eigen::Index>(cout),
                                     static_cast<Eigen::Index>(L));
      if (self.inputs[1]->requires_grad) {
        cols.setZero();
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t j = 0; j < k; ++j)
            for (std::size_t t = 0; t < L; ++t) {
              const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(pad);
              if (src >= 0 && src < static_cast<std::ptrdiff_t>(L)) cols(c * k + j, t) = xin[(n * cin + c) * L + src];
            }
        MatrixMap<double> gW(self.inputs[1]->grad_ref().data().data(), static_cast<Eigen::Index>(cout),
                             static_cast<Eigen::Index>(cin * k));
        gW.noalias() += G * cols.transpose();
      }
      accumulate(self, 2, [&](Tensor& g) { g.flat() += G.rowwise().sum(); });
      accumulate(self, 0, [&](Tensor& g) {
        gcols.noalias() = Wm.transpose() * G;
        for (std::size_t c = 0; c < cin; ++c)
          for (std::size_t j = 0; j < k; ++j)
            for (std::size_t t = 0; t < L; ++t) {
              const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(pad);
              if (src >= 0 && src < static_cast<std::ptrdiff_t>(L)) g[(n * cin + c) * L + src] += gcols(c * k + j, t);
            }
      });
    }
  });
}

Var depthwise_causal_conv(const Var& x, const Var& w, const Var& b) {
  if (x.value().rank() != 3) throw DimensionError("depthwise_causal_conv: input must be [N x L x E], got " + shape_str(x.shape()));
  const std::size_t N = x.dim(0), L = x.dim(1), E = x.dim(2);
  if (w.value().rank() != 2 || w.dim(0) != E) {
    throw DimensionError("depthwise_causal_conv: weight " + shape_str(w.shape()) + " does not match input " + shape_str(x.shape()));
  }
  if (b.value().rank() != 1 || b.dim(0) != E) throw DimensionError("depthwise_causal_conv: bias " + shape_str(b.shape()) + " does not match " + shape_str(w.shape()));
  const std::size_t k = w.dim(1);
  Tensor out(x.shape());
  const auto xi = x.value().data();
  const auto wi = w.value().data();
  const auto bi = b.value().data();
  auto o = out.data();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t t = 0; t < L; ++t) {
      double* row = &o[(n * L + t) * E];
      for (std::size_t e = 0; e < E; ++e) row[e] = bi[e];
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(k - 1);
        if (src < 0) continue;
        const double* xr = &xi[(n * L + src) * E];
        for (std::size_t e = 0; e < E; ++e) row[e] += wi[e * k + j] * xr[e];
      }
    }
  }
  tally_conv(static_cast<std::uint64_t>(N) * L * E * k);
  return make_result(std::move(out), {x, w, b}, [N, L, E, k](Node& self) {
    const auto xi = self.inputs[0]->value.data();
    const auto wi = self.inputs[1]->value.data();
    const auto gy = self.grad.data();
    Node& xn = *self.inputs[0];
    Node& wn = *self.inputs[1];
    double* gx = xn.requires_grad ? xn.grad_ref().data().data() : nullptr;
    double* gw = wn.requires_grad ? wn.grad_ref().data().data() : nullptr;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t t = 0; t < L; ++t) {
        const double* gr = &gy[(n * L + t) * E];
        for (std::size_t j = 0; j < k; ++j) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) - static_cast<std::ptrdiff_t>(k - 1);
          if (src < 0) continue;
          const std::size_t off = (n * L + src) * E;
          for (std::size_t e = 0; e < E; ++e) {
            if (gx) gx[off + e] += wi[e * k + j] * gr[e];
            if (gw) gw[e * k + j] += xi[off + e] * gr[e];
          }
        }
      }
    }
    accumulate(self, 2, [&](Tensor& g) { g.flat() += self.grad.rows_view().colwise().sum().transpose(); });
  });
}

// ---- normalization ----------------------------------------------------------

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const std::size_t D = x.shape().back();
  if (gamma.numel() != D || beta.numel() != D) {
    throw DimensionError("layer_norm: scale/shift " + shape_str(gamma.shape()) + " do not match " + shape_str(x.shape()));
  }
  const auto X = x.value().rows_view();
  const auto rows = static_cast<std::size_t>(X.rows());
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  AlignedVector<double> rstd(rows);
  auto Y = out.rows_view();
  auto XH = xhat.rows_view();
  const auto g = gamma.value().flat();
  const auto bvec = beta.value().flat();
  for (std::size_t r = 0; r < rows; ++r) {
    const double mu = X.row(r).mean();
    const double var = (X.row(r).array() - mu).square().mean();
    rstd[r] = 1.0 / std::sqrt(var + eps);
    XH.row(r) = (X.row(r).array() - mu) * rstd[r];
    Y.row(r) = XH.row(r).cwiseProduct(g.transpose()) + bvec.transpose();
  }
  return make_result(std::move(out), {x, gamma, beta}, [xhat = std::move(xhat), rstd = std::move(rstd), D](Node& self) {
    const auto G = self.grad.rows_view();
    const auto XH = xhat.rows_view();
    accumulate(self, 1, [&](Tensor& gg) { gg.flat() += G.cwiseProduct(XH).colwise().sum().transpose(); });
    accumulate(self, 2, [&](Tensor& gb) { gb.flat() += G.colwise().sum().transpose(); });
    accumulate(self, 0, [&](Tensor& gx) {
      auto GX = gx.rows_view();
      const auto gam = self.inputs[1]->value.flat();
      for (Eigen::Index r = 0; r < G.rows(); ++r) {
        const Eigen::RowVectorXd gxh = G.row(r).cwiseProduct(gam.transpose());
        const double m1 = gxh.mean();
        const double m2 = gxh.cwiseProduct(XH.row(r)).mean();
        GX.row(r).array() += rstd[r] * (gxh.array() - m1 - XH.row(r).array() * m2);
      }
    });
    (void)D;
  });
}

Var batch_norm_1d(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state, bool training) {
  if (x.value().rank() != 3) throw DimensionError("batch_norm_1d: input must be [B x F x L], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), F = x.dim(1), L = x.dim(2);
  if (gamma.numel() != F || beta.numel() != F) throw DimensionError("batch_norm_1d: scale/shift do not match " + shape_str(x.shape()));
  if (state.running_mean.numel() != F) {
    state.running_mean = Tensor(Shape{F}, 0.0);
    state.running_var = Tensor(Shape{F}, 1.0);
  }
  const auto xi = x.value().data();
  const auto gi = gamma.value().data();
  const auto bi = beta.value().data();
  AlignedVector<double> mean(F), rstd(F);
  const double n = static_cast<double>(B * L);
  if (training) {
    for (std::size_t f = 0; f < F; ++f) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < L; ++t) s += xi[(b * F + f) * L + t];
      const double mu = s / n;
      double v = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < L; ++t) {
          const double d = xi[(b * F + f) * L + t] - mu;
          v += d * d;
        }
      v /= n;
      mean[f] = mu;
      rstd[f] = 1.0 / std::sqrt(v + state.eps);
      const double unbiased = n > 1 ? v * n / (n - 1) : v;
      state.running_mean[f] = (1 - state.momentum) * state.running_mean[f] + state.momentum * mu;
      state.running_var[f] = (1 - state.momentum) * state.running_var[f] + state.momentum * unbiased;
    }
  } else {
    for (std::size_t f = 0; f < F; ++f) {
      mean[f] = state.running_mean[f];
      rstd[f] = 1.0 / std::sqrt(state.running_var[f] + state.eps);
    }
  }
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t t = 0; t < L; ++t) {
        const std::size_t i = (b * F + f) * L + t;
        xhat[i] = (xi[i] - mean[f]) * rstd[f];
        out[i] = gi[f] * xhat[i] + bi[f];
      }
  return make_result(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), rstd = std::move(rstd), training, B, F, L](Node& self) {
                       const auto gy = self.grad.data();
                       const auto gam = self.inputs[1]->value.data();
                       AlignedVector<double> sum_g(F, 0.0), sum_gx(F, 0.0);
                       for (std::size_t b = 0; b < B; ++b)
                         for (std::size_t f = 0; f < F; ++f)
                           for (std::size_t t = 0; t < L; ++t) {
                             const std::size_t i = (b * F + f) * L + t;
                             sum_g[f] += gy[i];
                             sum_gx[f] += gy[i] * xhat[i];
                           }
                       accumulate(self, 1, [&](Tensor& g) {
                         for (std::size_t f = 0; f < F; ++f) g[f] += sum_gx[f];
                       });
                       accumulate(self, 2, [&](Tensor& g) {
                         for (std::size_t f = 0; f < F; ++f) g[f] += sum_g[f];
                       });
                       accumulate(self, 0, [&](Tensor& g) {
                         const double n = static_cast<double>(B * L);
                         for (std::size_t b = 0; b < B; ++b)
                           for (std::size_t f = 0; f < F; ++f)
                             for (std::size_t t = 0; t < L; ++t) {
                               const std::size_t i = (b * F + f) * L + t;
                               if (training) {
                                 g[i] += gam[f] * rstd[f] * (gy[i] - sum_g[f] / n - xhat[i] * sum_gx[f] / n);
                               } else {
                                 g[i] += gam[f] * rstd[f] * gy[i];
                               }
                             }
                       });
                     });
}

// ---- shape manipulation -----------------------------------------------------

Var transpose_last(const Var& x) {
  const auto r = x.value().rank();
  if (r != 2 && r != 3) throw DimensionError("transpose_last: rank 2 or 3 required, got " + shape_str(x.shape()));
  const std::size_t B = r == 3 ? x.dim(0) : 1;
  const std::size_t M = x.dim(r - 2), N = x.dim(r - 1);
  Shape s = x.shape();
  std::swap(s[r - 2], s[r - 1]);
  Tensor out(s);
  for (std::size_t b = 0; b < B; ++b) {
    const ConstMatrixMap<double> in(x.value().data().data() + b * M * N, static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(N));
    MatrixMap<double> o(out.data().data() + b * M * N, static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(M));
    o = in.transpose();
  }
  return make_result(std::move(out), {x}, [B, M, N](Node& self) {
    accumulate(self, 0, [&](Tensor& g) {
      for (std::size_t b = 0; b < B; ++b) {
        const ConstMatrixMap<double> gy(self.grad.data().data() + b * M * N, static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(M));
        MatrixMap<double> gx(g.data().data() + b * M * N, static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(N));
        gx += gy.transpose();
      }
    });
  });
}

Var reverse_time(const Var& x, std::size_t axis) {
  return make_result(bm::reverse_time(x.value(), axis), {x}, [axis](Node& self) {
    accumulate(self, 0, [&](Tensor& g) { g.flat() += bm::reverse_time(self.grad, axis).flat(); });
  });
}

Var slice_last(const Var& x, std::size_t start, std::size_t length) {
  const std::size_t n = x.shape().back();
  if (start + length > n || length == 0) {
    throw DimensionError("slice_last: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for " + shape_str(x.shape()));
  }
  Shape s = x.shape();
  s.back() = length;
  Tensor out(s);
  out.rows_view() = x.value().rows_view().middleCols(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(length));
  return make_result(std::move(out), {x}, [start, length](Node& self) {
    accumulate(self, 0, [&](Tensor& g) {
      g.rows_view().middleCols(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(length)) += self.grad.rows_view();
    });
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), {x}, [](Node& self) {
    accumulate(self, 0, [&](Tensor& g) { g.flat() += self.grad.flat(); });
  });
}

Var mean_axis(const Var& x, std::size_t axis) {
  const auto sp = split_axis(x.shape(), axis);
  Shape s;
  for (std::size_t i = 0; i < x.shape().size(); ++i)
    if (i != axis) s.push_back(x.shape()[i]);
  if (s.empty()) s.push_back(1);
  const double inv = 1.0 / static_cast<double>(sp.len);
  Tensor out(s);
  const auto in = x.value().data();
  auto o = out.data();
  // Accumulate (inv * x_t) in time order; attention pooling with uniform
  // weights follows the same order and therefore agrees bitwise.
  for (std::size_t a = 0; a < sp.outer; ++a)
    for (std::size_t t = 0; t < sp.len; ++t)
      for (std::size_t c = 0; c < sp.inner; ++c) o[a * sp.inner + c] += inv * in[(a * sp.len + t) * sp.inner + c];
  return make_result(std::move(out), {x}, [sp, inv](Node& self) {
    accumulate(self, 0, [&](Tensor& g) {
      const auto gy = self.grad.data();
      for (std::size_t a = 0; a < sp.outer; ++a)
        for (std::size_t t = 0; t < sp.len; ++t)
          for (std::size_t c = 0; c < sp.inner; ++c) g[(a * sp.len + t) * sp.inner + c] += inv * gy[a * sp.inner + c];
    });
  });
}

Var weighted_time_sum(const Var& alpha, const Var& z) {
  if (alpha.value().rank() != 2 || z.value().rank() != 3 || alpha.dim(0) != z.dim(0) || alpha.dim(1) != z.dim(1)) {
    throw DimensionError("weighted_time_sum: weights " + shape_str(alpha.shape()) + " incompatible with " + shape_str(z.shape()));
  }
  const std::size_t N = z.dim(0), L = z.dim(1), D = z.dim(2);
  Tensor out(Shape{N, D});
  const auto a = alpha.value().data();
  const auto zi = z.value().data();
  auto o = out.data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t d = 0; d < D; ++d) o[n * D + d] += a[n * L + t] * zi[(n * L + t) * D + d];
  tally_pool(static_cast<std::uint64_t>(N) * L * D);
  return make_result(std::move(out), {alpha, z}, [N, L, D](Node& self) {
    const auto gy = self.grad.data();
    const auto a = self.inputs[0]->value.data();
    const auto zi = self.inputs[1]->value.data();
    accumulate(self, 0, [&](Tensor& g) {
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t t = 0; t < L; ++t) {
          double s = 0.0;
          for (std::size_t d = 0; d < D; ++d) s += gy[n * D + d] * zi[(n * L + t) * D + d];
          g[n * L + t] += s;
        }
    });
    accumulate(self, 1, [&](Tensor& g) {
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t t = 0; t < L; ++t)
          for (std::size_t d = 0; d < D; ++d) g[(n * L + t) * D + d] += a[n * L + t] * gy[n * D + d];
    });
  });
}

Var sum(const Var& x) {
  return make_result(Tensor::scalar(x.value().flat().sum()), {x}, [](Node& self) {
    accumulate(self, 0, [&](Tensor& g) { g.flat().array() += self.grad[0]; });
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Var smoothed_cross_entropy(const Var& logits, std::span<const int> labels, double smoothing) {
  if (logits.value().rank() != 2 || logits.dim(0) != labels.size()) {
    throw DimensionError("smoothed_cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  if (smoothing < 0.0 || smoothing >= 1.0) throw ConfigError("label smoothing must lie in [0, 1)");
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  Tensor probs(logits.shape());
  Tensor target(logits.shape(), smoothing / static_cast<double>(K));
  double loss = 0.0;
  const auto z = logits.value().data();
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= K) throw DataError("label " + std::to_string(y) + " out of range for " + std::to_string(K) + " classes");
    target[b * K + static_cast<std::size_t>(y)] += 1.0 - smoothing;
    double mx = -INFINITY;
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, z[b * K + k]);
    double denom = 0.0;
    for (std::size_t k = 0; k < K; ++k) denom += std::exp(z[b * K + k] - mx);
    const double log_denom = std::log(denom) + mx;
    for (std::size_t k = 0; k < K; ++k) {
      const double logp = z[b * K + k] - log_denom;
      probs[b * K + k] = std::exp(logp);
      loss -= target[b * K + k] * logp;
    }
  }
  loss /= static_cast<double>(B);
  return make_result(Tensor::scalar(loss), {logits}, [probs = std::move(probs), target = std::move(target), B](Node& self) {
    accumulate(self, 0, [&](Tensor& g) {
      g.flat() += (self.grad[0] / static_cast<double>(B)) * (probs.flat() - target.flat());
    });
  });
}

}  // namespace bm
