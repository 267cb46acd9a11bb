#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <vector>

#include "errors.hpp"

namespace mlci {

// Failure probabilities are carried as ln(delta) so that budgets like
// delta / 2^H stay representable for large step counts.
struct LogDelta {
    double ln = 0.0;

    static LogDelta from_delta(double delta) {
        if (!(delta > 0.0 && delta < 1.0)) throw EstimateError("delta must lie in (0,1)");
        return {std::log(delta)};
    }
    // delta / k
    LogDelta over(double k) const { return {ln - std::log(k)}; }
    LogDelta halved() const { return {ln - std::numbers::ln2}; }
    double delta() const { return std::exp(ln); }
};

constexpr std::uint64_t kMaxPlanSize = 1ull << 53;

// Rounds a real-valued sample bound up to a usable count.
inline std::uint64_t to_count(double bound) {
    if (!(bound < static_cast<double>(kMaxPlanSize)))
        throw EstimateError("infeasible plan: required sample size exceeds 2^53");
    double c = std::ceil(bound);
    if (c < 1.0) return 1;
    return static_cast<std::uint64_t>(c);
}

// One-sided Hoeffding sample bound for a variable with range r:
// n = -r^2 ln(delta) / (2 eps^2).
inline double hoeffding_real(double r, double eps, LogDelta d) {
    if (!(r > 0.0)) throw EstimateError("hoeffding range must be positive");
    if (!(eps > 0.0)) throw EstimateError("tolerance must be positive");
    return -d.ln * r * r / (2.0 * eps * eps);
}

inline std::uint64_t hoeffding_n(double r, double eps, LogDelta d) {
    return to_count(hoeffding_real(r, eps, d));
}

inline std::uint64_t hoeffding_n(double r, double eps, double delta) {
    return hoeffding_n(r, eps, LogDelta::from_delta(delta));
}

// h(u) = (1+u) ln(1+u) - u
inline double bennett_h(double u) {
    if (!(u >= 0.0)) throw EstimateError("bennett_h needs u >= 0");
    return (1.0 + u) * std::log1p(u) - u;
}

// Bennett sample bound for variables with |X| <= b and per-point variance
// at most p*b^2: n = -ln(delta) * b^2 / (p * h(b*eps/p)).
inline double bennett_real(double p, double eps, LogDelta d, double b = 1.0) {
    if (!(p > 0.0 && p <= 1.0)) throw EstimateError("variance bound p must lie in (0,1]");
    if (!(eps > 0.0)) throw EstimateError("tolerance must be positive");
    if (!(b > 0.0)) throw EstimateError("per-point bound b must be positive");
    return -d.ln * b * b / (p * bennett_h(b * eps / p));
}

// Clipped against the range-2b Hoeffding bound for the same variable, so a
// vacuous variance bound never yields a worse answer than Hoeffding.
inline std::uint64_t bennett_n(double p, double eps, LogDelta d, double b = 1.0) {
    double raw = bennett_real(p, eps, d, b);
    double hoeff = hoeffding_real(2.0 * b, eps, d);
    return to_count(std::min(raw, hoeff));
}

inline std::uint64_t bennett_n(double p, double eps, double delta, double b = 1.0) {
    return bennett_n(p, eps, LogDelta::from_delta(delta), b);
}

struct BinomialBound {
    std::uint64_t n = 0;
    double worst_p = 0.0;  // true mean that required the largest testset
    bool exact = true;     // false: scan infeasible, n is the Hoeffding fallback
};

namespace detail {

inline double log_sum_exp(double a, double b) {
    if (a == -std::numeric_limits<double>::infinity()) return b;
    if (b == -std::numeric_limits<double>::infinity()) return a;
    double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// ln Pr[Binomial(n,p) <= k], computed from the anchor pmf at k with the
// recursive term ratio pmf(i-1)/pmf(i) = i(1-p) / ((n-i+1)p).
inline double log_binom_cdf(std::uint64_t n, double p, std::int64_t k) {
    constexpr double neg_inf = -std::numeric_limits<double>::infinity();
    if (k < 0) return neg_inf;
    if (k >= static_cast<std::int64_t>(n)) return 0.0;
    if (p <= 0.0) return 0.0;      // all mass at 0 <= k
    if (p >= 1.0) return neg_inf;  // all mass at n > k
    double kd = static_cast<double>(k), nd = static_cast<double>(n);
    double anchor = std::lgamma(nd + 1.0) - std::lgamma(kd + 1.0) - std::lgamma(nd - kd + 1.0) +
                    kd * std::log(p) + (nd - kd) * std::log1p(-p);
    double sum = 1.0, term = 1.0;
    for (std::int64_t i = k; i > 0; --i) {
        term *= static_cast<double>(i) * (1.0 - p) / ((nd - static_cast<double>(i) + 1.0) * p);
        sum += term;
        if (term < sum * 1e-18) break;
    }
    return std::min(anchor + std::log(sum), 0.0);
}

// ln Pr[|X/n - p| > eps] for X ~ Binomial(n,p), strict on both sides.
inline double log_two_sided_tail(std::uint64_t n, double p, double eps) {
    double nd = static_cast<double>(n);
    auto lower = static_cast<std::int64_t>(std::ceil(nd * (p - eps))) - 1;
    auto upper_from = static_cast<std::int64_t>(std::floor(nd * (p + eps))) + 1;
    double lo = log_binom_cdf(n, p, lower);
    // Pr[X >= m] under p equals Pr[X' <= n-m] for X' counting failures.
    double hi = upper_from > static_cast<std::int64_t>(n)
                    ? -std::numeric_limits<double>::infinity()
                    : log_binom_cdf(n, 1.0 - p, static_cast<std::int64_t>(n) - upper_from);
    return log_sum_exp(lo, hi);
}

inline double kl_bernoulli(double q, double p) {
    double a = q <= 0.0 ? 0.0 : q * std::log(q / p);
    double b = q >= 1.0 ? 0.0 : (1.0 - q) * std::log((1.0 - q) / (1.0 - p));
    return a + b;
}

// Chernoff certificate: ln of an upper bound on the two-sided tail,
// monotone decreasing in n. Used to cap the exact scan per true mean.
inline double log_chernoff_tail(double n, double p, double eps) {
    constexpr double neg_inf = -std::numeric_limits<double>::infinity();
    double up = p + eps < 1.0 && p < 1.0 ? -n * kl_bernoulli(p + eps, p) : neg_inf;
    double dn = p - eps > 0.0 && p > 0.0 ? -n * kl_bernoulli(p - eps, p) : neg_inf;
    return log_sum_exp(up, dn);
}

}  // namespace detail

// Smallest testset size n such that the exact two-sided binomial tail
// Pr[|X/n - p*| > eps] stays within delta for every candidate true mean p*
// (a step-1e-3 grid plus c +/- eps) and stays within it for every larger n
// as well. Deterministic; scans above 10^7 are reported as infeasible with
// the Hoeffding size instead.
inline BinomialBound exact_binomial_n(double c, double eps, LogDelta d,
                                      std::uint64_t limit = 10'000'000) {
    if (!(c > 0.0 && c < 1.0)) throw EstimateError("binomial threshold must lie in (0,1)");
    if (!(eps > 0.0)) throw EstimateError("tolerance must be positive");

    std::uint64_t fallback = hoeffding_n(1.0, eps, d);
    // Two-sided Hoeffding certifies every mean once n reaches this cap.
    double cap_real = (std::numbers::ln2 - d.ln) / (2.0 * eps * eps);
    std::uint64_t cap = to_count(cap_real);
    if (cap > limit) return {fallback, c, false};

    std::vector<double> means;
    means.reserve(1004);
    for (int i = 0; i <= 1000; ++i) means.push_back(static_cast<double>(i) / 1000.0);
    means.push_back(std::clamp(c - eps, 0.0, 1.0));
    means.push_back(std::clamp(c + eps, 0.0, 1.0));

    // Per mean, all n >= chernoff_cutoff(p) are certified; only the window
    // below it needs exact tail evaluation. Process hard means first so the
    // windows of the remaining means collapse.
    struct Entry {
        double p;
        std::uint64_t cutoff;
    };
    std::vector<Entry> entries;
    entries.reserve(means.size());
    for (double p : means) {
        std::uint64_t lo = 1, hi = cap;
        while (lo < hi) {
            std::uint64_t mid = lo + (hi - lo) / 2;
            if (detail::log_chernoff_tail(static_cast<double>(mid), p, eps) <= d.ln)
                hi = mid;
            else
                lo = mid + 1;
        }
        entries.push_back({p, lo});
    }
    std::sort(entries.begin(), entries.end(),
              [](const Entry& a, const Entry& b) { return a.cutoff > b.cutoff; });

    std::uint64_t best = 1;
    double worst = entries.front().p;
    for (const Entry& e : entries) {
        for (std::uint64_t m = best; m < e.cutoff; ++m) {
            if (detail::log_two_sided_tail(m, e.p, eps) > d.ln) {
                best = m + 1;
                worst = e.p;
            }
        }
    }
    return {best, worst, true};
}

inline BinomialBound exact_binomial_n(double c, double eps, double delta,
                                      std::uint64_t limit = 10'000'000) {
    return exact_binomial_n(c, eps, LogDelta::from_delta(delta), limit);
}

}  // namespace mlci
