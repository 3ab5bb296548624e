#include "babymamba/ssm_core.hpp"

#include <cmath>
#include <span>

#include <Eigen/Core>

#include "babymamba/init.hpp"

namespace bm::ssm {

SsmKernelParams SsmKernelParams::init(std::size_t d_inner, std::size_t d_state, std::size_t dt_rank, std::uint64_t seed,
                                      const std::string& prefix, double dt_min, double dt_max) {
  if (d_inner == 0 || d_state == 0 || dt_rank == 0) throw ConfigError("ssm kernel extents must be >= 1");
  SsmKernelParams p;
  Tensor a_log(Shape{d_inner, d_state});
  for (std::size_t e = 0; e < d_inner; ++e)
    for (std::size_t n = 0; n < d_state; ++n) a_log.at(e, n) = std::log(static_cast<double>(n + 1));
  p.A_log = Var::parameter(std::move(a_log));
  p.D = Var::parameter(Tensor(Shape{d_inner}, 1.0));
  p.W_B = Var::parameter(fan_in_uniform({d_state, d_inner}, d_inner, seed, prefix + "W_B"));
  p.W_C = Var::parameter(fan_in_uniform({d_state, d_inner}, d_inner, seed, prefix + "W_C"));
  p.W_dt_low = Var::parameter(fan_in_uniform({dt_rank, d_inner}, d_inner, seed, prefix + "W_dt_low"));
  p.W_dt_up = Var::parameter(fan_in_uniform({d_inner, dt_rank}, dt_rank, seed, prefix + "W_dt_up"));

  Tensor bias(Shape{d_inner});
  auto rng = named_stream(seed, prefix + "dt_bias");
  const double lo = std::log(dt_min), hi = std::log(dt_max);
  for (auto& v : bias.data()) {
    const double dt = std::exp(rng.uniform(lo, hi));
    v = dt + std::log(-std::expm1(-dt));  // softplus^-1(dt)
  }
  p.dt_bias = Var::parameter(std::move(bias));
  return p;
}

SelectiveParams selective_params(const Var& x, const SsmKernelParams& p) {
  SelectiveParams s;
  s.delta = softplus(linear(linear(x, p.W_dt_low), p.W_dt_up, p.dt_bias));
  s.B = linear(x, p.W_B);
  s.C = linear(x, p.W_C);
  return s;
}

namespace {

// Discretization of one timestep over all (e, n): decay = exp(dt_e a_en) and
// drive = (decay - 1) / a_en, with the series form near zero.
using Block = Eigen::Map<Eigen::ArrayXXd>;             // [N x E], column e contiguous
using ConstBlock = Eigen::Map<const Eigen::ArrayXXd>;
using RowE = Eigen::Map<const Eigen::Array<double, 1, Eigen::Dynamic>>;
using ColN = Eigen::Map<const Eigen::ArrayXd>;

void discretize_step(const double* dt, const double* A, const double* inv_A, std::size_t E, std::size_t N, double* x,
                     double* decay, double* drive) {
  const auto n = static_cast<Eigen::Index>(N), e = static_cast<Eigen::Index>(E);
  const RowE d(dt, e);
  Block X(x, n, e), Dec(decay, n, e), Drv(drive, n, e);
  X = ConstBlock(A, n, e).rowwise() * d;
  Dec = X.exp();
  Drv = (X.abs() > kZohSeriesThreshold).select((Dec - 1.0) * ConstBlock(inv_A, n, e), (1.0 + 0.5 * X).rowwise() * d);
}

struct ScanInputs {
  std::span<const double> u, delta, B, C, D;
};

struct ScanConstants {
  AlignedVector<double> A, inv_A;
  explicit ScanConstants(const Tensor& A_log) : A(A_log.numel()), inv_A(A_log.numel()) {
    for (std::size_t i = 0; i < A.size(); ++i) {
      A[i] = -std::exp(A_log[i]);
      inv_A[i] = 1.0 / A[i];
    }
  }
};

// One recurrence step h = decay * h_prev + drive * B_t u_t, returning C_t h + D u_t per e.
inline void scan_step(const double* hp, double* h, const double* decay, const double* drive, const double* bt,
                      const double* ct, const double* ut, const double* D, std::size_t E, std::size_t N, double* y) {
  const auto n = static_cast<Eigen::Index>(N), e = static_cast<Eigen::Index>(E);
  const RowE u(ut, e);
  Block H(h, n, e);
  H = ConstBlock(decay, n, e) * ConstBlock(hp, n, e) + (ConstBlock(drive, n, e).colwise() * ColN(bt, n)).rowwise() * u;
  if (y) {
    Eigen::Map<Eigen::Array<double, 1, Eigen::Dynamic>>(y, e) =
        (H.colwise() * ColN(ct, n)).colwise().sum() + RowE(D, e) * u;
  }
}

// Runs sequence b forward with one step of scratch.
void scan_sequence(const ScanInputs& in, const ScanConstants& k, std::size_t b, std::size_t L, std::size_t E,
                   std::size_t N, double* y) {
  const std::size_t EN = E * N;
  AlignedVector<double> x(EN), decay(EN), drive(EN), h0(EN, 0.0), h1(EN);
  for (std::size_t t = 0; t < L; ++t) {
    const std::size_t row = b * L + t;
    discretize_step(&in.delta[row * E], k.A.data(), k.inv_A.data(), E, N, x.data(), decay.data(), drive.data());
    scan_step(h0.data(), h1.data(), decay.data(), drive.data(), &in.B[row * N], &in.C[row * N], &in.u[row * E],
              in.D.data(), E, N, &y[row * E]);
    std::swap(h0, h1);
  }
}

// Runs sequence b forward keeping every state and factor ([L x E x N] each).
void scan_sequence_stored(const ScanInputs& in, const ScanConstants& k, std::size_t b, std::size_t L, std::size_t E,
                          std::size_t N, const double* zeros, double* states, double* decays, double* drives) {
  const std::size_t EN = E * N;
  AlignedVector<double> x(EN);
  for (std::size_t t = 0; t < L; ++t) {
    const std::size_t row = b * L + t;
    double* decay = decays + t * EN;
    double* drive = drives + t * EN;
    discretize_step(&in.delta[row * E], k.A.data(), k.inv_A.data(), E, N, x.data(), decay, drive);
    scan_step(t > 0 ? states + (t - 1) * EN : zeros, states + t * EN, decay, drive, &in.B[row * N], &in.C[row * N],
              &in.u[row * E], in.D.data(), E, N, nullptr);
  }
}

}  // namespace

Var selective_scan(const Var& u, const Var& delta, const Var& A_log, const Var& Bm, const Var& Cm, const Var& D) {
  if (u.value().rank() != 3 || delta.shape() != u.shape()) {
    throw DimensionError("selective_scan: u " + shape_str(u.shape()) + " and delta " + shape_str(delta.shape()) +
                         " must share a [B x L x E] shape");
  }
  const std::size_t NB = u.dim(0), L = u.dim(1), E = u.dim(2);
  if (A_log.value().rank() != 2 || A_log.dim(0) != E) {
    throw DimensionError("selective_scan: A_log " + shape_str(A_log.shape()) + " does not match d_inner " + std::to_string(E));
  }
  const std::size_t N = A_log.dim(1);
  const Shape bc{NB, L, N};
  if (Bm.shape() != bc || Cm.shape() != bc) {
    throw DimensionError("selective_scan: B " + shape_str(Bm.shape()) + " / C " + shape_str(Cm.shape()) +
                         " expected " + shape_str(bc));
  }
  if (D.numel() != E) throw DimensionError("selective_scan: D " + shape_str(D.shape()) + " does not match d_inner");

  ScanConstants consts(A_log.value());

  const ScanInputs in{u.value().data(), delta.value().data(), Bm.value().data(), Cm.value().data(), D.value().data()};
  Tensor y(u.shape());
  for (std::size_t b = 0; b < NB; ++b) scan_sequence(in, consts, b, L, E, N, y.data().data());
  if (auto* tally = active_mac_tally()) tally->scan += 3ULL * NB * L * E * N;

  return make_result(std::move(y), {u, delta, A_log, Bm, Cm, D}, [consts = std::move(consts), NB, L, E, N](Node& self) {
    auto want = [&](std::size_t i) { return self.inputs[i]->requires_grad; };
    const ScanInputs in{self.inputs[0]->value.data(), self.inputs[1]->value.data(), self.inputs[3]->value.data(),
                        self.inputs[4]->value.data(), self.inputs[5]->value.data()};
    const auto gy = self.grad.data();
    const std::size_t EN = E * N;
    const double* A = consts.A.data();
    const double* inv_A = consts.inv_A.data();

    AlignedVector<double> gu(NB * L * E, 0.0), gdelta(NB * L * E, 0.0), gA(EN, 0.0);
    AlignedVector<double> gB(NB * L * N, 0.0), gC(NB * L * N, 0.0), gD(E, 0.0);
    AlignedVector<double> carry(EN), zeros(EN, 0.0), states(L * EN), decays(L * EN), drives(L * EN);

    for (std::size_t b = 0; b < NB; ++b) {
      // States are recomputed per sequence to keep memory at O(L E N).
      scan_sequence_stored(in, consts, b, L, E, N, zeros.data(), states.data(), decays.data(), drives.data());
      std::fill(carry.begin(), carry.end(), 0.0);
      for (std::size_t tt = L; tt-- > 0;) {
        const std::size_t row = b * L + tt;
        const double* __restrict h = &states[tt * EN];
        const double* __restrict hp = tt > 0 ? &states[(tt - 1) * EN] : zeros.data();
        const double* __restrict decay = &decays[tt * EN];
        const double* __restrict drive = &drives[tt * EN];
        const double* bt = &in.B[row * N];
        const double* ct = &in.C[row * N];
        double* gbt = &gB[row * N];
        double* gct = &gC[row * N];
        for (std::size_t e = 0; e < E; ++e) {
          const double g = gy[row * E + e];
          const double ut = in.u[row * E + e];
          const double dt = in.delta[row * E + e];
          gD[e] += g * ut;
          double gu_acc = g * in.D[e], gdelta_acc = 0.0;
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t k = e * N + n;
            const double x = dt * A[k];
            const bool exact = std::abs(x) > kZohSeriesThreshold;
            const double d_delta = exact ? decay[k] : 1.0 + x;
            const double d_a = exact ? (dt * decay[k] - drive[k]) * inv_A[k] : 0.5 * dt * dt;
            gct[n] += g * h[k];
            const double lam = g * ct[n] + carry[k];
            const double g_decay = lam * hp[k];
            const double g_drive = lam * bt[n] * ut;
            gbt[n] += lam * drive[k] * ut;
            gu_acc += lam * drive[k] * bt[n];
            gdelta_acc += g_decay * A[k] * decay[k] + g_drive * d_delta;
            gA[k] += g_decay * dt * decay[k] + g_drive * d_a;
            carry[k] = decay[k] * lam;
          }
          gu[row * E + e] += gu_acc;
          gdelta[row * E + e] += gdelta_acc;
        }
      }
    }

    auto add_into = [&](std::size_t i, const AlignedVector<double>& src) {
      if (!want(i)) return;
      auto& g = self.inputs[i]->grad_ref();
      for (std::size_t k = 0; k < src.size(); ++k) g[k] += src[k];
    };
    add_into(0, gu);
    add_into(1, gdelta);
    if (want(2)) {
      auto& g = self.inputs[2]->grad_ref();
      for (std::size_t k = 0; k < gA.size(); ++k) g[k] += gA[k] * A[k];  // dA/dA_log = A
    }
    add_into(3, gB);
    add_into(4, gC);
    add_into(5, gD);
  });
}

}  // namespace bm::ssm
