#include <complex>

#include <Eigen/Dense>

#include "babymamba/datapipe.hpp"
#include "babymamba/errors.hpp"

namespace bm {

namespace {

using cd = std::complex<double>;

// Coefficients of prod (z - r_i), highest power first.
std::vector<cd> poly_from_roots(const std::vector<cd>& roots) {
  std::vector<cd> p{1.0};
  for (const auto& r : roots) {
    std::vector<cd> next(p.size() + 1, 0.0);
    for (std::size_t i = 0; i < p.size(); ++i) {
      next[i] += p[i];
      next[i + 1] -= r * p[i];
    }
    p = std::move(next);
  }
  return p;
}

}  // namespace

IirFilter butter_lowpass(std::size_t order, double cutoff_hz, double fs_hz) {
  if (order == 0) throw ConfigError("Butterworth order must be >= 1");
  if (!(fs_hz > 0.0) || !(cutoff_hz > 0.0) || cutoff_hz >= fs_hz / 2.0) {
    throw ConfigError("low-pass cutoff " + std::to_string(cutoff_hz) + " Hz must lie in (0, " +
                      std::to_string(fs_hz / 2.0) + ") for fs = " + std::to_string(fs_hz) + " Hz");
  }
  const double n = double(order);
  const double k2 = 2.0 * fs_hz;
  const double warped = k2 * std::tan(M_PI * cutoff_hz / fs_hz);

  std::vector<cd> poles, zeros(order, cd(-1.0, 0.0));
  for (std::size_t k = 0; k < order; ++k) {
    const double theta = M_PI * (2.0 * double(k) + n + 1.0) / (2.0 * n);
    const cd analog = warped * cd(std::cos(theta), std::sin(theta));
    poles.push_back((k2 + analog) / (k2 - analog));
  }
  const auto a = poly_from_roots(poles);
  const auto b = poly_from_roots(zeros);

  IirFilter f;
  double sum_a = 0.0, sum_b = 0.0;
  for (const auto& c : a) {
    f.a.push_back(c.real());
    sum_a += c.real();
  }
  for (const auto& c : b) sum_b += c.real();
  for (const auto& c : b) f.b.push_back(c.real() * sum_a / sum_b);  // unit gain at DC
  return f;
}

std::vector<double> lfilter(const IirFilter& f, std::span<const double> x, std::span<const double> zi) {
  const std::size_t n = std::max(f.a.size(), f.b.size());
  std::vector<double> a(n, 0.0), b(n, 0.0);
  std::copy(f.a.begin(), f.a.end(), a.begin());
  std::copy(f.b.begin(), f.b.end(), b.begin());
  if (a[0] == 0.0) throw ConfigError("filter denominator must have a nonzero leading coefficient");
  for (auto& v : b) v /= a[0];
  for (std::size_t i = n; i-- > 0;) a[i] /= a[0];

  std::vector<double> z(n - 1, 0.0);
  if (!zi.empty()) {
    if (zi.size() != n - 1) throw DimensionError("lfilter: initial state length must be " + std::to_string(n - 1));
    std::copy(zi.begin(), zi.end(), z.begin());
  }
  std::vector<double> y(x.size());
  for (std::size_t t = 0; t < x.size(); ++t) {
    const double yt = b[0] * x[t] + (n > 1 ? z[0] : 0.0);
    for (std::size_t i = 0; i + 1 < n - 1; ++i) z[i] = b[i + 1] * x[t] + z[i + 1] - a[i + 1] * yt;
    if (n > 1) z[n - 2] = b[n - 1] * x[t] - a[n - 1] * yt;
    y[t] = yt;
  }
  return y;
}

std::vector<double> lfilter_zi(const IirFilter& f) {
  const std::size_t n = std::max(f.a.size(), f.b.size());
  if (n < 2) return {};
  std::vector<double> a(n, 0.0), b(n, 0.0);
  std::copy(f.a.begin(), f.a.end(), a.begin());
  std::copy(f.b.begin(), f.b.end(), b.begin());
  for (auto& v : b) v /= a[0];
  for (std::size_t i = n; i-- > 0;) a[i] /= a[0];

  const auto m = static_cast<Eigen::Index>(n - 1);
  // (I - companion(a)^T) zi = b[1:] - a[1:] b[0]
  Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(m, m);
  for (Eigen::Index j = 0; j < m; ++j) companion(0, j) = -a[static_cast<std::size_t>(j) + 1];
  for (Eigen::Index i = 1; i < m; ++i) companion(i, i - 1) = 1.0;
  const Eigen::MatrixXd lhs = Eigen::MatrixXd::Identity(m, m) - companion.transpose();
  Eigen::VectorXd rhs(m);
  for (Eigen::Index i = 0; i < m; ++i) {
    rhs(i) = b[static_cast<std::size_t>(i) + 1] - a[static_cast<std::size_t>(i) + 1] * b[0];
  }
  const Eigen::VectorXd zi = lhs.partialPivLu().solve(rhs);
  return {zi.data(), zi.data() + m};
}

std::vector<double> filtfilt(const IirFilter& f, std::span<const double> x, std::size_t padlen) {
  const std::size_t T = x.size();
  if (T == 0) return {};
  padlen = std::min(padlen, T - 1);
  // Odd reflection about both end points.
  std::vector<double> ext;
  ext.reserve(T + 2 * padlen);
  for (std::size_t i = padlen; i >= 1; --i) ext.push_back(2.0 * x[0] - x[i]);
  ext.insert(ext.end(), x.begin(), x.end());
  for (std::size_t i = 1; i <= padlen; ++i) ext.push_back(2.0 * x[T - 1] - x[T - 1 - i]);

  const auto zi = lfilter_zi(f);
  std::vector<double> z0(zi.size());
  for (std::size_t i = 0; i < zi.size(); ++i) z0[i] = zi[i] * ext.front();
  auto y = lfilter(f, ext, z0);
  std::reverse(y.begin(), y.end());
  for (std::size_t i = 0; i < zi.size(); ++i) z0[i] = zi[i] * y.front();
  y = lfilter(f, y, z0);
  std::reverse(y.begin(), y.end());
  return {y.begin() + static_cast<std::ptrdiff_t>(padlen), y.begin() + static_cast<std::ptrdiff_t>(padlen + T)};
}

Tensor butter_lowpass_filtfilt(const Tensor& x, double cutoff_hz, double fs_hz, std::size_t order) {
  if (x.rank() != 2) throw DimensionError("filter expects [C x T], got " + shape_str(x.shape()));
  const auto f = butter_lowpass(order, cutoff_hz, fs_hz);
  const std::size_t C = x.dim(0), T = x.dim(1);
  Tensor out(x.shape());
  std::vector<double> row(T);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t t = 0; t < T; ++t) row[t] = x.at(c, t);
    const auto y = filtfilt(f, row, 3 * 2 * order);
    for (std::size_t t = 0; t < T; ++t) out.at(c, t) = y[t];
  }
  return out;
}

}  // namespace bm
