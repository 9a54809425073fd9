#pragma once

// Numeric utilities: normal/chi-squared distribution functions, sample
// summaries, a small SPD solver, and OLS with HC3 robust standard errors.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <vector>

#include "emm/common.hpp"

namespace emm {

inline constexpr double kPi = 3.141592653589793238462643383279502884;
inline constexpr double kZ975 = 1.959963984540054;  // normal_quantile(0.975)

// Logistic function with stable tails; exact 0/1 only in the far tails.
inline double expit(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double logit(double p) {
  require(p > 0.0 && p < 1.0, "logit requires p in (0,1)");
  return std::log(p / (1.0 - p));
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x * 0.7071067811865475244); }

// Wichura's AS241 (PPND16) inverse normal CDF, ~1e-15 absolute accuracy.
inline double normal_quantile(double p) {
  require(p > 0.0 && p < 1.0, "normal_quantile requires p in (0,1)");
  const double q = p - 0.5;
  if (std::fabs(q) <= 0.425) {
    const double s = 0.180625 - q * q;
    const double num =
        (((((((2509.0809287301226727 * s + 33430.575583588128105) * s + 67265.770927008700853) * s +
              45921.953931549871457) *
                 s +
             13731.693765509461125) *
                s +
            1971.5909503065514427) *
               s +
           133.14166789178437745) *
              s +
          3.387132872796366608);
    const double den =
        (((((((5226.495278852545703 * s + 28729.085735721942674) * s + 39307.89580009271061) * s +
              21213.794301586595867) *
                 s +
             5394.1960214247511077) *
                s +
            687.1870074920579083) *
               s +
           42.313330701600911252) *
              s +
          1.0);
    return q * num / den;
  }
  double r = (q < 0.0) ? p : 1.0 - p;
  r = std::sqrt(-std::log(r));
  double x;
  if (r <= 5.0) {
    r -= 1.6;
    const double num =
        (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r +
              1.27045825245236838258) *
                 r +
             3.64784832476320460504) *
                r +
            5.7694972214606914055) *
               r +
           4.6303378461565452959) *
              r +
          1.42343711074968357734);
    const double den =
        (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r + 0.0151986665636164571966) * r +
              0.14810397642748007459) *
                 r +
             0.68976733498510000455) *
                r +
            1.6763848301838038494) *
               r +
           2.05319162663775882187) *
              r +
          1.0);
    x = num / den;
  } else {
    r -= 5.0;
    const double num =
        (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386) * r +
              0.026532189526576123093) *
                 r +
             0.29656057182850489123) *
                r +
            1.7848265399172913358) *
               r +
           5.4637849111641143699) *
              r +
          6.6579046435011037772);
    const double den =
        (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5) * r +
              7.868691311456132591e-4) *
                 r +
             0.0148753612908506148525) *
                r +
            0.13692988092273580531) *
               r +
           0.59983220655588793769) *
              r +
          1.0);
    x = num / den;
  }
  return (q < 0.0) ? -x : x;
}

namespace detail {

// Regularized lower incomplete gamma P(a,x) by series expansion (x < a+1).
inline double gamma_p_series(double a, double x) {
  double ap = a;
  double sum = 1.0 / a;
  double term = sum;
  for (int k = 0; k < 1000; ++k) {
    ap += 1.0;
    term *= x / ap;
    sum += term;
    if (std::fabs(term) < std::fabs(sum) * 1e-16) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Regularized upper incomplete gamma Q(a,x) by Lentz continued fraction (x >= a+1).
inline double gamma_q_cf(double a, double x) {
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= 1000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::fabs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 1e-16) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace detail

inline double gamma_p(double a, double x) {
  require(a > 0.0 && x >= 0.0, "gamma_p requires a > 0, x >= 0");
  if (x == 0.0) return 0.0;
  if (x < a + 1.0) return detail::gamma_p_series(a, x);
  return 1.0 - detail::gamma_q_cf(a, x);
}

inline double gamma_q(double a, double x) {
  require(a > 0.0 && x >= 0.0, "gamma_q requires a > 0, x >= 0");
  if (x == 0.0) return 1.0;
  if (x < a + 1.0) return 1.0 - detail::gamma_p_series(a, x);
  return detail::gamma_q_cf(a, x);
}

inline double chi_squared_cdf(double x, double dof) {
  if (x <= 0.0) return 0.0;
  return gamma_p(0.5 * dof, 0.5 * x);
}

// Upper tail P(X > x) for X ~ chi-squared(dof).
inline double chi_squared_sf(double x, double dof) {
  if (x <= 0.0) return 1.0;
  return gamma_q(0.5 * dof, 0.5 * x);
}

inline double chi_squared_quantile(double p, double dof) {
  require(p > 0.0 && p < 1.0, "chi_squared_quantile requires p in (0,1)");
  double lo = 0.0, hi = dof;
  while (chi_squared_cdf(hi, dof) < p) hi *= 2.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (chi_squared_cdf(mid, dof) < p)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

// ---------------------------------------------------------------- summaries

inline double mean(const std::vector<double>& v) {
  require(!v.empty(), "mean of empty vector");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Sample variance, n-1 denominator.
inline double variance(const std::vector<double>& v) {
  require(v.size() >= 2, "variance needs at least 2 values");
  const double m = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return ss / static_cast<double>(v.size() - 1);
}

inline double sd(const std::vector<double>& v) { return std::sqrt(variance(v)); }

// Linear-interpolation quantile (R type 7).
inline double quantile(std::vector<double> v, double p) {
  require(!v.empty(), "quantile of empty vector");
  require(p >= 0.0 && p <= 1.0, "quantile level outside [0,1]");
  std::sort(v.begin(), v.end());
  const double h = p * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(h);
  if (lo + 1 >= v.size()) return v.back();
  const double frac = h - static_cast<double>(lo);
  return v[lo] + frac * (v[lo + 1] - v[lo]);
}

inline double correlation(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size() && a.size() >= 2, "correlation needs equal-length vectors, n >= 2");
  const double ma = mean(a), mb = mean(b);
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
    sab += (a[i] - ma) * (b[i] - mb);
  }
  require(saa > 0.0 && sbb > 0.0, "correlation undefined for constant input");
  return sab / std::sqrt(saa * sbb);
}

// ------------------------------------------------------------- linear algebra

// Cholesky factorization of a symmetric positive definite matrix.
// Throws on a non-positive pivot, which is how rank deficiency surfaces.
class Cholesky {
 public:
  explicit Cholesky(const Matrix& a) : n_(a.rows()), l_(a.rows(), a.rows(), 0.0) {
    require(a.rows() == a.cols(), "Cholesky requires a square matrix");
    double max_diag = 0.0;
    for (std::size_t i = 0; i < n_; ++i) max_diag = std::max(max_diag, std::fabs(a(i, i)));
    const double tol = std::max(max_diag, 1.0) * 1e-12;
    for (std::size_t j = 0; j < n_; ++j) {
      double d = a(j, j);
      for (std::size_t k = 0; k < j; ++k) d -= l_(j, k) * l_(j, k);
      if (!(d > tol)) throw Error("rank deficient design (non-positive pivot in Cholesky)");
      l_(j, j) = std::sqrt(d);
      for (std::size_t i = j + 1; i < n_; ++i) {
        double s = a(i, j);
        for (std::size_t k = 0; k < j; ++k) s -= l_(i, k) * l_(j, k);
        l_(i, j) = s / l_(j, j);
      }
    }
  }

  std::vector<double> solve(const std::vector<double>& b) const {
    require(b.size() == n_, "Cholesky solve size mismatch");
    std::vector<double> y(n_), x(n_);
    for (std::size_t i = 0; i < n_; ++i) {
      double s = b[i];
      for (std::size_t k = 0; k < i; ++k) s -= l_(i, k) * y[k];
      y[i] = s / l_(i, i);
    }
    for (std::size_t ii = n_; ii-- > 0;) {
      double s = y[ii];
      for (std::size_t k = ii + 1; k < n_; ++k) s -= l_(k, ii) * x[k];
      x[ii] = s / l_(ii, ii);
    }
    return x;
  }

  Matrix inverse() const {
    Matrix inv(n_, n_, 0.0);
    std::vector<double> e(n_, 0.0);
    for (std::size_t j = 0; j < n_; ++j) {
      e[j] = 1.0;
      const std::vector<double> col = solve(e);
      for (std::size_t i = 0; i < n_; ++i) inv(i, j) = col[i];
      e[j] = 0.0;
    }
    return inv;
  }

 private:
  std::size_t n_;
  Matrix l_;
};

struct RobustFit {
  std::vector<double> coef;
  std::vector<double> se;        // HC3 sandwich
  std::vector<double> fitted;
  std::vector<double> residual;
};

// Least squares with HC3 robust standard errors:
// cov = (X'X)^-1 [sum_i x_i x_i' e_i^2 / (1-h_ii)^2] (X'X)^-1.
inline RobustFit ols_hc3(const Matrix& x, const std::vector<double>& y) {
  const std::size_t n = x.rows(), k = x.cols();
  require(n == y.size(), "ols_hc3 row mismatch");
  require(n > k && k >= 1, "ols_hc3 needs n > k >= 1");

  Matrix xtx(k, k, 0.0);
  std::vector<double> xty(k, 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t l = j; l < k; ++l) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += x(i, j) * x(i, l);
      xtx(j, l) = xtx(l, j) = s;
    }
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x(i, j) * y[i];
    xty[j] = s;
  }

  Cholesky chol(xtx);
  RobustFit fit;
  fit.coef = chol.solve(xty);
  const Matrix xtx_inv = chol.inverse();

  fit.fitted.resize(n);
  fit.residual.resize(n);
  Matrix meat(k, k, 0.0);
  std::vector<double> xi(k), axi(k);
  for (std::size_t i = 0; i < n; ++i) {
    double f = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      xi[j] = x(i, j);
      f += xi[j] * fit.coef[j];
    }
    fit.fitted[i] = f;
    const double e = y[i] - f;
    fit.residual[i] = e;
    double h = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t l = 0; l < k; ++l) s += xtx_inv(j, l) * xi[l];
      axi[j] = s;
      h += s * xi[j];
    }
    const double adj = std::max(1.0 - h, 1e-8);
    const double w = e * e / (adj * adj);
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t l = 0; l < k; ++l) meat(j, l) += w * xi[j] * xi[l];
  }

  fit.se.resize(k);
  for (std::size_t j = 0; j < k; ++j) {
    double v = 0.0;
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b) v += xtx_inv(j, a) * meat(a, b) * xtx_inv(b, j);
    fit.se[j] = std::sqrt(std::max(v, 0.0));
  }
  return fit;
}

}  // namespace emm
