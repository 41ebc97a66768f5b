#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <vector>

#include "threshr/dataset.hpp"
#include "threshr/estimators.hpp"
#include "threshr/stats.hpp"

namespace threshr {

struct PointwiseInterval {
    double lower = 0.0;
    double upper = 0.0;
};

// estimates across the grid plus pointwise and (optionally) simultaneous bands
struct ThresholdCurve {
    std::vector<ThresholdEstimate> estimates;
    std::vector<PointwiseInterval> pointwise;
    std::vector<PointwiseInterval> simultaneous;
    double alpha = 0.05;
    double simultaneous_quantile = std::numeric_limits<double>::quiet_NaN();

    std::size_t size() const { return estimates.size(); }
    bool has_bands() const { return !simultaneous.empty(); }
};

inline PointwiseInterval pointwise_ci(double psi, double se, double alpha,
                                      const OutcomeKind& kind) {
    const double z = norm_quantile(1.0 - alpha / 2.0);
    PointwiseInterval ci{psi - z * se, psi + z * se};
    ci.lower = std::max(ci.lower, kind.lo);
    ci.upper = std::min(ci.upper, kind.hi);
    return ci;
}

// Sigma_hat[j,k] = (1/n) sum_i eif_j(O_i) eif_k(O_i)
inline MatrixXd eif_covariance(const std::vector<ThresholdEstimate>& estimates) {
    const auto k = static_cast<Eigen::Index>(estimates.size());
    if (k == 0) throw EmptyDataset("no estimates");
    const Eigen::Index n = estimates[0].eif.size();
    MatrixXd e(n, k);
    for (Eigen::Index j = 0; j < k; ++j) {
        if (estimates[j].eif.size() != n)
            throw DimensionMismatch("influence vectors of unequal length");
        e.col(j) = estimates[j].eif;
    }
    return (e.transpose() * e) / static_cast<double>(n);
}

struct BandOptions {
    double alpha = 0.05;
    int n_draws = 100000;
    std::uint64_t seed = 0;
    int chunk = 4096;  // draws per sub-seeded block; fixed so results are
                       // independent of how the loop is scheduled
};

namespace detail {

// correlation matrix with zero-variance coordinates flagged
inline MatrixXd correlation_from_covariance(const MatrixXd& cov,
                                            std::vector<bool>& degenerate) {
    const Eigen::Index k = cov.rows();
    VectorXd sd(k);
    degenerate.assign(static_cast<std::size_t>(k), false);
    for (Eigen::Index j = 0; j < k; ++j) {
        sd[j] = std::sqrt(std::max(cov(j, j), 0.0));
        if (!(sd[j] > 0.0)) degenerate[static_cast<std::size_t>(j)] = true;
    }
    MatrixXd corr = MatrixXd::Identity(k, k);
    for (Eigen::Index j = 0; j < k; ++j)
        for (Eigen::Index l = 0; l < k; ++l)
            if (!degenerate[j] && !degenerate[l])
                corr(j, l) = cov(j, l) / (sd[j] * sd[l]);
    return corr;
}

}  // namespace detail

// Monte-Carlo 1-alpha quantile of max_j |Z_j| for Z ~ N(0, corr). Small
// negative eigenvalues from sampling noise are floored at zero; materially
// negative ones are an error.
inline double max_abs_gaussian_quantile(const MatrixXd& corr, const BandOptions& opts) {
    const Eigen::Index k = corr.rows();
    if (k == 0) throw EmptyDataset("empty correlation matrix");
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(corr);
    if (eig.info() != Eigen::Success) throw NonPSDMatrix("eigendecomposition failed");
    VectorXd lam = eig.eigenvalues();
    for (Eigen::Index j = 0; j < k; ++j) {
        if (lam[j] < -1e-8) throw NonPSDMatrix("correlation matrix is not PSD");
        lam[j] = std::sqrt(std::max(lam[j], 0.0));
    }
    const MatrixXd root = eig.eigenvectors() * lam.asDiagonal();

    std::vector<double> stats;
    stats.reserve(static_cast<std::size_t>(opts.n_draws));
    VectorXd g(k);
    const int chunks = (opts.n_draws + opts.chunk - 1) / opts.chunk;
    for (int c = 0; c < chunks; ++c) {
        Rng rng(derive_seed(opts.seed, static_cast<std::uint64_t>(c)));
        const int lo = c * opts.chunk;
        const int hi = std::min(opts.n_draws, lo + opts.chunk);
        for (int t = lo; t < hi; ++t) {
            for (Eigen::Index j = 0; j < k; ++j) g[j] = normal_draw(rng);
            const VectorXd z = root * g;
            stats.push_back(z.cwiseAbs().maxCoeff());
        }
    }
    std::sort(stats.begin(), stats.end());
    return quantile_type1_sorted(stats, 1.0 - opts.alpha);
}

// pointwise intervals plus simultaneous bands over the whole grid
inline ThresholdCurve build_curve(const std::vector<ThresholdEstimate>& estimates,
                                  const OutcomeKind& kind, const BandOptions& opts = {},
                                  bool simultaneous = true) {
    ThresholdCurve curve;
    curve.estimates = estimates;
    curve.alpha = opts.alpha;
    for (const auto& est : estimates)
        curve.pointwise.push_back(pointwise_ci(est.psi, est.se, opts.alpha, kind));
    if (!simultaneous) return curve;

    const MatrixXd cov = eif_covariance(estimates);
    std::vector<bool> degenerate;
    const MatrixXd corr_full = detail::correlation_from_covariance(cov, degenerate);
    std::vector<Eigen::Index> keep;
    for (Eigen::Index j = 0; j < corr_full.rows(); ++j)
        if (!degenerate[static_cast<std::size_t>(j)]) keep.push_back(j);

    double q = 0.0;
    if (!keep.empty()) {
        MatrixXd corr(static_cast<Eigen::Index>(keep.size()),
                      static_cast<Eigen::Index>(keep.size()));
        for (std::size_t a = 0; a < keep.size(); ++a)
            for (std::size_t b = 0; b < keep.size(); ++b)
                corr(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
                    corr_full(keep[a], keep[b]);
        q = max_abs_gaussian_quantile(corr, opts);
    }
    curve.simultaneous_quantile = q;
    for (std::size_t j = 0; j < estimates.size(); ++j) {
        const auto& est = estimates[j];
        PointwiseInterval band;
        if (degenerate[j]) {
            // zero estimated variance: the band collapses to the point
            band = {est.psi, est.psi};
        } else {
            band = {est.psi - q * est.se, est.psi + q * est.se};
        }
        band.lower = std::max(band.lower, kind.lo);
        band.upper = std::min(band.upper, kind.hi);
        curve.simultaneous.push_back(band);
    }
    return curve;
}

struct ThresholdTestResult {
    bool reject = false;                               // some threshold controls risk below delta
    std::optional<double> witness;                     // smallest such threshold
    double delta = 0.0;
};

// Reject "no safe threshold exists" when the simultaneous upper band drops to
// delta or below somewhere on the grid.
inline ThresholdTestResult test_threshold_exists(const ThresholdCurve& curve, double delta) {
    if (!curve.has_bands()) throw BandsNotComputed("simultaneous bands required");
    ThresholdTestResult res;
    res.delta = delta;
    for (std::size_t j = 0; j < curve.size(); ++j) {
        if (curve.simultaneous[j].upper <= delta) {
            res.reject = true;
            res.witness = curve.estimates[j].threshold;
            break;
        }
    }
    return res;
}

struct ProtectionInterval {
    double lower = 0.0;  // largest biomarker value with an observed event
    double upper = std::numeric_limits<double>::infinity();
};

// [max biomarker among measured complete cases with Y=1, infinity); above the
// lower end no event was ever observed
inline ProtectionInterval absolute_protection_interval(const Dataset& data) {
    bool found = false;
    double best = -std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        if (data.r[i] && data.delta[i] && data.y[i] == 1.0) {
            best = std::max(best, data.a[i]);
            found = true;
        }
    }
    if (!found) throw NoEvents("no measured observation with an event");
    return ProtectionInterval{best, std::numeric_limits<double>::infinity()};
}

inline void write_curve_csv(const ThresholdCurve& curve, std::ostream& out) {
    out << "threshold,psi,se,ci_lower,ci_upper";
    if (curve.has_bands()) out << ",band_lower,band_upper";
    out << "\n";
    out.precision(17);
    for (std::size_t j = 0; j < curve.size(); ++j) {
        const auto& est = curve.estimates[j];
        out << est.threshold << ',' << est.psi << ',' << est.se << ','
            << curve.pointwise[j].lower << ',' << curve.pointwise[j].upper;
        if (curve.has_bands())
            out << ',' << curve.simultaneous[j].lower << ',' << curve.simultaneous[j].upper;
        out << "\n";
    }
}

}  // namespace threshr
