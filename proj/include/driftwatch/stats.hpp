#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "driftwatch/error.hpp"

namespace driftwatch {

inline double standard_normal_cdf(double x) {
    return 0.5 * std::erfc(-x / std::sqrt(2.0));
}

// Acklam's rational approximation refined with one Halley step against the
// erfc-based CDF; accurate to ~1e-14 over (0, 1).
inline double standard_normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0))
        throw Error(ErrorKind::input, "normal quantile requires p in (0,1)");
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425;
    double x;
    if (p < plow) {
        double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - plow) {
        double q = p - 0.5;
        double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    // Halley refinement.
    double e = standard_normal_cdf(x) - p;
    double u = e * std::sqrt(2.0 * M_PI) * std::exp(x * x / 2.0);
    x = x - u / (1.0 + x * u / 2.0);
    return x;
}

namespace detail {

// Regularized lower incomplete gamma P(a, x): series for x < a+1,
// continued fraction otherwise (Numerical Recipes style).
inline double regularized_lower_gamma(double a, double x) {
    if (x < 0.0 || a <= 0.0)
        throw Error(ErrorKind::input, "regularized_lower_gamma domain error");
    if (x == 0.0) return 0.0;
    const double lg = std::lgamma(a);
    const int max_iter = 500;
    const double eps = std::numeric_limits<double>::epsilon();
    if (x < a + 1.0) {
        double ap = a;
        double sum = 1.0 / a;
        double del = sum;
        for (int i = 0; i < max_iter; ++i) {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if (std::fabs(del) < std::fabs(sum) * eps)
                return sum * std::exp(-x + a * std::log(x) - lg);
        }
        throw Error(ErrorKind::numeric, "incomplete gamma series did not converge");
    }
    const double fpmin = std::numeric_limits<double>::min() / eps;
    double b = x + 1.0 - a;
    double c = 1.0 / fpmin;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i <= max_iter; ++i) {
        double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::fabs(d) < fpmin) d = fpmin;
        c = b + an / c;
        if (std::fabs(c) < fpmin) c = fpmin;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < eps) {
            double q = std::exp(-x + a * std::log(x) - lg) * h;
            return 1.0 - q;
        }
    }
    throw Error(ErrorKind::numeric, "incomplete gamma continued fraction did not converge");
}

}  // namespace detail

inline double chi_square_cdf(double x, double dof) {
    if (x <= 0.0) return 0.0;
    return detail::regularized_lower_gamma(dof / 2.0, x / 2.0);
}

// Quantile via Wilson-Hilferty starting point and Newton on the CDF.
inline double chi_square_quantile(double p, double dof) {
    if (!(p > 0.0 && p < 1.0))
        throw Error(ErrorKind::input, "chi-square quantile requires p in (0,1)");
    double z = standard_normal_quantile(p);
    double t = 1.0 - 2.0 / (9.0 * dof) + z * std::sqrt(2.0 / (9.0 * dof));
    double x = dof * t * t * t;
    if (x <= 0.0) x = 1e-8;
    for (int i = 0; i < 100; ++i) {
        double f = chi_square_cdf(x, dof) - p;
        // pdf of chi-square
        double logpdf = (dof / 2.0 - 1.0) * std::log(x) - x / 2.0 -
                        std::lgamma(dof / 2.0) - (dof / 2.0) * std::log(2.0);
        double pdf = std::exp(logpdf);
        if (pdf <= 0.0) break;
        double step = f / pdf;
        double next = x - step;
        if (next <= 0.0) next = x / 2.0;
        if (std::fabs(next - x) < 1e-12 * std::max(1.0, x)) return next;
        x = next;
    }
    return x;
}

struct KsResult {
    double statistic = 0.0;
    bool passed = false;  // true when the fit is NOT rejected at the given level
};

// One-sample Kolmogorov-Smirnov test against Normal(mu, sigma) using the
// asymptotic critical value (valid for the >= 100 samples this project fits).
inline KsResult ks_test_normal(std::span<const double> samples, double mu, double sigma,
                               double level = 0.05) {
    if (samples.size() < 2) throw Error(ErrorKind::fit, "KS test needs at least 2 samples");
    std::vector<double> sorted(samples.begin(), samples.end());
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(sorted.size());
    double d = 0.0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        double f = standard_normal_cdf((sorted[i] - mu) / sigma);
        double lo = static_cast<double>(i) / n;
        double hi = static_cast<double>(i + 1) / n;
        d = std::max(d, std::max(std::fabs(f - lo), std::fabs(hi - f)));
    }
    // K(lambda) = 1 - level  =>  lambda = sqrt(-ln(level/2)/2)
    double critical = std::sqrt(-0.5 * std::log(level / 2.0)) / std::sqrt(n);
    return {d, d <= critical};
}

inline double mean_of(std::span<const double> xs) {
    if (xs.empty()) throw Error(ErrorKind::input, "mean of empty sequence");
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

// Unbiased (N-1) sample variance.
inline double sample_variance(std::span<const double> xs) {
    if (xs.size() < 2) throw Error(ErrorKind::input, "variance needs >= 2 samples");
    double m = mean_of(xs);
    double s = 0.0;
    for (double x : xs) s += (x - m) * (x - m);
    return s / static_cast<double>(xs.size() - 1);
}

// Linear-interpolation empirical quantile over a copy of the data.
inline double empirical_quantile(std::span<const double> xs, double q) {
    if (xs.empty()) throw Error(ErrorKind::input, "quantile of empty sequence");
    if (!(q >= 0.0 && q <= 1.0)) throw Error(ErrorKind::input, "quantile level out of [0,1]");
    std::vector<double> sorted(xs.begin(), xs.end());
    std::sort(sorted.begin(), sorted.end());
    double pos = q * static_cast<double>(sorted.size() - 1);
    std::size_t lo = static_cast<std::size_t>(pos);
    if (lo + 1 >= sorted.size()) return sorted.back();
    double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

}  // namespace driftwatch
