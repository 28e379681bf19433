#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "porl/rng.hpp"

namespace porl::stats {

// Linear-interpolation quantile on a sorted copy (same convention as the
// common "type 7" estimator).
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) throw std::invalid_argument("quantile: empty sample");
    if (q <= 0.0) return sorted.front();
    if (q >= 1.0) return sorted.back();
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    if (lo + 1 >= sorted.size()) return sorted.back();
    return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
}

inline double quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    return quantile_sorted(v, q);
}

inline double median(std::vector<double> v) { return quantile(std::move(v), 0.5); }

inline double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

struct BootstrapCI {
    double lo = 0.0;
    double hi = 0.0;
};

// Percentile bootstrap CI of the median. A resample count of one
// degenerates to the sample median at both endpoints.
inline BootstrapCI bootstrap_median_ci(const std::vector<double>& data, int n_resamples,
                                       Rng& rng, double confidence = 0.95) {
    if (data.empty()) throw std::invalid_argument("bootstrap: empty sample");
    if (n_resamples < 1) throw std::invalid_argument("bootstrap: need at least one resample");
    if (n_resamples == 1) {
        const double m = median(data);
        return {m, m};
    }
    std::vector<double> medians(static_cast<std::size_t>(n_resamples));
    std::vector<double> resample(data.size());
    for (int b = 0; b < n_resamples; ++b) {
        for (auto& x : resample) x = data[rng.below(data.size())];
        medians[static_cast<std::size_t>(b)] = median(resample);
    }
    std::sort(medians.begin(), medians.end());
    const double alpha = 1.0 - confidence;
    return {quantile_sorted(medians, alpha / 2.0), quantile_sorted(medians, 1.0 - alpha / 2.0)};
}

// Wilson score upper bound on a binomial proportion.
inline double wilson_upper(int successes, int n, double z) {
    if (n <= 0) throw std::invalid_argument("wilson_upper: n must be positive");
    const double p = static_cast<double>(successes) / n;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / n;
    const double center = p + z2 / (2.0 * n);
    const double spread = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n));
    return (center + spread) / denom;
}

// Two-sample z statistic for equal proportions (pooled variance).
inline double proportion_z(int k1, int n1, int k2, int n2) {
    const double p1 = static_cast<double>(k1) / n1;
    const double p2 = static_cast<double>(k2) / n2;
    const double pooled = static_cast<double>(k1 + k2) / (n1 + n2);
    const double se = std::sqrt(pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2));
    return (p1 - p2) / se;
}

// Exponential moving average with the given retention factor, applied
// along the series; the raw data stays untouched.
inline std::vector<double> ema(const std::vector<double>& raw, double factor) {
    std::vector<double> out;
    out.reserve(raw.size());
    double acc = 0.0;
    bool first = true;
    for (double x : raw) {
        acc = first ? x : factor * acc + (1.0 - factor) * x;
        first = false;
        out.push_back(acc);
    }
    return out;
}

}  // namespace porl::stats
