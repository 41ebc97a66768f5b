#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "threshr/errors.hpp"

namespace threshr {

inline double expit(double x) {
    if (x >= 0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// standard normal CDF
inline double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Inverse standard normal CDF, Wichura's algorithm AS 241 (PPND16).
// Absolute accuracy around 1e-16 over the full open interval (0,1).
inline double norm_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) {
        if (p == 0.0) return -std::numeric_limits<double>::infinity();
        if (p == 1.0) return std::numeric_limits<double>::infinity();
        throw NonFiniteInput("norm_quantile: p outside [0,1]");
    }
    const double q = p - 0.5;
    if (std::abs(q) <= 0.425) {
        const double r = 0.180625 - q * q;
        return q *
               (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r +
                     6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r +
                   1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r +
                 1.3314166789178437745e2) * r + 3.3871328727963666080e0) /
               (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r +
                     3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r +
                   5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r +
                 4.2313330701600911252e1) * r + 1.0);
    }
    double r = (q < 0.0) ? p : 1.0 - p;
    r = std::sqrt(-std::log(r));
    double val;
    if (r <= 5.0) {
        r -= 1.6;
        val = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                    2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r +
                  3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r +
                4.63033784615654529590e0) * r + 1.42343711074968357734e0) /
              (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                    1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
                  6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r +
                2.05319162663775882187e0) * r + 1.0);
    } else {
        r -= 5.0;
        val = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                    1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
                  2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r +
                5.46378491116411436990e0) * r + 6.65790464350110377720e0) /
              (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                    1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
                  1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
                5.99832206555887937690e-1) * r + 1.0);
    }
    return (q < 0.0) ? -val : val;
}

// counter-based sub-seed derivation (splitmix64 round); independent streams
// for distinct indices from a common base seed
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    std::uint64_t z = base + (index + 1) * 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

using Rng = std::mt19937_64;

inline double uniform01(Rng& rng) {
    // 53-bit mantissa draw in (0,1); avoids the endpoints
    return (static_cast<double>(rng() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
}

inline double normal_draw(Rng& rng) { return norm_quantile(uniform01(rng)); }

// Inverse-CDF sampling of a normal truncated to [a, b].
inline double truncated_normal_sample(double a, double b, double mean, double sd, Rng& rng) {
    const double pa = norm_cdf((a - mean) / sd);
    const double pb = norm_cdf((b - mean) / sd);
    const double u = uniform01(rng);
    const double x = mean + sd * norm_quantile(pa + u * (pb - pa));
    return std::clamp(x, a, b);
}

inline double truncated_normal_cdf(double x, double a, double b, double mean, double sd) {
    if (x <= a) return 0.0;
    if (x >= b) return 1.0;
    const double pa = norm_cdf((a - mean) / sd);
    const double pb = norm_cdf((b - mean) / sd);
    return (norm_cdf((x - mean) / sd) - pa) / (pb - pa);
}

// lower-nearest-rank (type-1) quantile of already-sorted values
inline double quantile_type1_sorted(const std::vector<double>& sorted, double p) {
    if (sorted.empty()) throw EmptyDataset("quantile of empty sample");
    if (p <= 0.0) return sorted.front();
    const auto n = static_cast<double>(sorted.size());
    auto k = static_cast<std::size_t>(std::ceil(p * n));
    if (k < 1) k = 1;
    if (k > sorted.size()) k = sorted.size();
    return sorted[k - 1];
}

inline double quantile_type1(std::vector<double> values, double p) {
    std::sort(values.begin(), values.end());
    return quantile_type1_sorted(values, p);
}

// nodes/weights for Gauss-Legendre quadrature on [lo, hi]
struct QuadRule {
    std::vector<double> nodes;
    std::vector<double> weights;
};

inline QuadRule gauss_legendre(int n, double lo, double hi) {
    QuadRule rule;
    rule.nodes.resize(n);
    rule.weights.resize(n);
    // Newton iteration on Legendre polynomials, standard construction
    for (int i = 0; i < (n + 1) / 2; ++i) {
        double x = std::cos(M_PI * (i + 0.75) / (n + 0.5));
        double pp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = 0.0;
            for (int j = 0; j < n; ++j) {
                const double p2 = p1;
                p1 = p0;
                p0 = ((2.0 * j + 1.0) * x * p1 - j * p2) / (j + 1.0);
            }
            pp = n * (x * p0 - p1) / (x * x - 1.0);
            const double dx = p0 / pp;
            x -= dx;
            if (std::abs(dx) < 1e-15) break;
        }
        const double half = 0.5 * (hi - lo);
        rule.nodes[i] = lo + half * (1.0 - x);
        rule.nodes[n - 1 - i] = lo + half * (1.0 + x);
        rule.weights[i] = rule.weights[n - 1 - i] = 2.0 * half / ((1.0 - x * x) * pp * pp);
    }
    return rule;
}

}  // namespace threshr
