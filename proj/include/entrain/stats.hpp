#ifndef ENTRAIN_STATS_HPP_
#define ENTRAIN_STATS_HPP_

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "entrain/error.hpp"

namespace entrain {

inline constexpr double kMinReportedP = 1e-300;

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  double df = 0.0;
  double mean_difference = 0.0;
  bool p_clamped = false;  // true p was below kMinReportedP
};

inline double mean(std::span<const double> v) {
  require(!v.empty(), ErrorCode::TooFewPairs, "mean of an empty sample");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Two-sided p-value of Student's t with `df` degrees of freedom.
inline double two_sided_p(double t, double df) {
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

/// Paired t-test on d_i = a_i - b_i.
inline TTestResult paired_t_test(std::span<const std::pair<double, double>> pairs) {
  const std::size_t n = pairs.size();
  require(n >= 2, ErrorCode::TooFewPairs, "paired t-test needs at least 2 pairs, got " + std::to_string(n));
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = pairs[i].first - pairs[i].second;
  require(std::any_of(d.begin(), d.end(), [&](double x) { return x != d[0]; }), ErrorCode::ZeroVariance,
          "all paired differences are identical");
  const double m = mean(d);
  double ss = 0.0;
  for (double x : d) ss += (x - m) * (x - m);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  require(sd > 0.0, ErrorCode::ZeroVariance, "paired differences have zero variance");
  TTestResult r;
  r.df = static_cast<double>(n - 1);
  r.mean_difference = m;
  r.t = m / (sd / std::sqrt(static_cast<double>(n)));
  r.p = two_sided_p(r.t, r.df);
  if (!(r.p >= kMinReportedP)) {
    r.p = kMinReportedP;
    r.p_clamped = true;
  }
  return r;
}

inline TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorCode::TooFewPairs, "paired samples differ in length");
  std::vector<std::pair<double, double>> pairs(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) pairs[i] = {a[i], b[i]};
  return paired_t_test(pairs);
}

/// Exact expectation of |A∩B| / |A∪B| for independent uniformly random
/// subsets of sizes `a` and `b` drawn from `n` items (hypergeometric overlap).
inline double expected_random_jaccard(std::size_t n, std::size_t a, std::size_t b) {
  require(a <= n && b <= n, ErrorCode::PreconditionViolation, "set size exceeds universe");
  if (a == 0 && b == 0) return 1.0;
  // log C(x, y)
  auto lchoose = [](double x, double y) { return std::lgamma(x + 1) - std::lgamma(y + 1) - std::lgamma(x - y + 1); };
  double expected = 0.0;
  const std::size_t lo = (a + b > n) ? a + b - n : 0;
  const std::size_t hi = std::min(a, b);
  for (std::size_t k = lo; k <= hi; ++k) {
    const double logp = lchoose(static_cast<double>(a), static_cast<double>(k)) +
                        lchoose(static_cast<double>(n - a), static_cast<double>(b - k)) -
                        lchoose(static_cast<double>(n), static_cast<double>(b));
    expected += std::exp(logp) * static_cast<double>(k) / static_cast<double>(a + b - k);
  }
  return expected;
}

}  // namespace entrain

#endif  // ENTRAIN_STATS_HPP_
