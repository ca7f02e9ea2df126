#include "densemae/spline.hpp"

#include <algorithm>

#include "densemae/errors.hpp"

namespace densemae {

NaturalCubicSpline::NaturalCubicSpline(std::vector<double> knots, std::vector<double> values)
    : x_(std::move(knots)), y_(std::move(values)) {
  const std::size_t n = x_.size();
  if (n < 2) throw invalid_argument("spline needs at least 2 knots");
  if (y_.size() != n) throw invalid_argument("spline knot and value counts differ");
  for (std::size_t i = 1; i < n; ++i)
    if (!(x_[i] > x_[i - 1])) throw invalid_argument("spline knots must be strictly increasing");
  m_.assign(n, 0.0);
  if (n == 2) return;
  // Tridiagonal system for interior second derivatives (Thomas algorithm).
  const std::size_t k = n - 2;
  std::vector<double> diag(k), upper(k), rhs(k);
  for (std::size_t i = 0; i < k; ++i) {
    const double h0 = x_[i + 1] - x_[i];
    const double h1 = x_[i + 2] - x_[i + 1];
    diag[i] = 2.0 * (h0 + h1);
    upper[i] = h1;
    rhs[i] = 6.0 * ((y_[i + 2] - y_[i + 1]) / h1 - (y_[i + 1] - y_[i]) / h0);
  }
  for (std::size_t i = 1; i < k; ++i) {
    const double lower = x_[i + 1] - x_[i];  // sub-diagonal equals the previous h1
    const double w = lower / diag[i - 1];
    diag[i] -= w * upper[i - 1];
    rhs[i] -= w * rhs[i - 1];
  }
  m_[k] = rhs[k - 1] / diag[k - 1];
  for (std::size_t i = k - 1; i-- > 0;) m_[i + 1] = (rhs[i] - upper[i] * m_[i + 2]) / diag[i];
}

double NaturalCubicSpline::operator()(double t) const {
  const std::size_t n = x_.size();
  if (t <= x_[0]) return y_[0] + derivative(x_[0]) * (t - x_[0]);
  if (t >= x_[n - 1]) return y_[n - 1] + derivative(x_[n - 1]) * (t - x_[n - 1]);
  const std::size_t i =
      static_cast<std::size_t>(std::upper_bound(x_.begin(), x_.end(), t) - x_.begin()) - 1;
  const double h = x_[i + 1] - x_[i];
  const double a = (x_[i + 1] - t) / h;
  const double b = (t - x_[i]) / h;
  return a * y_[i] + b * y_[i + 1] +
         ((a * a * a - a) * m_[i] + (b * b * b - b) * m_[i + 1]) * h * h / 6.0;
}

double NaturalCubicSpline::derivative(double t) const {
  const std::size_t n = x_.size();
  const double tc = std::clamp(t, x_[0], x_[n - 1]);
  std::size_t i =
      static_cast<std::size_t>(std::upper_bound(x_.begin(), x_.end(), tc) - x_.begin());
  i = std::clamp<std::size_t>(i, 1, n - 1) - 1;
  const double h = x_[i + 1] - x_[i];
  const double a = (x_[i + 1] - tc) / h;
  const double b = (tc - x_[i]) / h;
  return (y_[i + 1] - y_[i]) / h + ((1.0 - 3.0 * a * a) * m_[i] + (3.0 * b * b - 1.0) * m_[i + 1]) * h / 6.0;
}

}  // namespace densemae
