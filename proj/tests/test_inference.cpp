#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "threshr/inference.hpp"
#include "threshr/sims.hpp"

using namespace threshr;

namespace {

ThresholdEstimate synthetic_estimate(double v, double psi, const VectorXd& eif) {
    ThresholdEstimate est;
    est.threshold = v;
    est.psi = psi;
    est.eif = eif;
    est.se = std::sqrt(eif.squaredNorm()) / static_cast<double>(eif.size());
    return est;
}

// independent oracle for the max-|Z| quantile of k iid standard normals
double independent_max_quantile(int k, double alpha) {
    return norm_quantile(0.5 * (1.0 + std::pow(1.0 - alpha, 1.0 / k)));
}

}  // namespace

TEST_CASE("pointwise intervals use the two-sided normal quantile") {
    OutcomeKind kind;  // binary, [0,1]
    const auto ci = pointwise_ci(0.5, 0.1, 0.05, kind);
    CHECK(ci.lower == Catch::Approx(0.5 - 1.959963984540054 * 0.1).epsilon(1e-12));
    CHECK(ci.upper == Catch::Approx(0.5 + 1.959963984540054 * 0.1).epsilon(1e-12));
    const auto wide = pointwise_ci(0.9, 0.2, 0.05, kind);
    CHECK(wide.upper == 1.0);  // clamped to the outcome range
    const auto narrow = pointwise_ci(0.02, 0.05, 0.01, kind);
    CHECK(narrow.lower == 0.0);
}

TEST_CASE("covariance of influence vectors matches the standard errors") {
    Rng rng(3);
    const Eigen::Index n = 500;
    std::vector<ThresholdEstimate> ests;
    for (int j = 0; j < 3; ++j) {
        VectorXd eif(n);
        for (Eigen::Index i = 0; i < n; ++i) eif[i] = uniform01(rng) - 0.5;
        eif.array() -= eif.mean();
        ests.push_back(synthetic_estimate(0.1 * j, 0.3, eif));
    }
    const MatrixXd cov = eif_covariance(ests);
    for (int j = 0; j < 3; ++j) {
        // Sigma[j,j]/n = se_j^2
        CHECK(cov(j, j) / static_cast<double>(n) ==
              Catch::Approx(ests[j].se * ests[j].se).epsilon(1e-12));
    }
    CHECK(cov(0, 1) == Catch::Approx(cov(1, 0)).margin(1e-15));
    std::vector<ThresholdEstimate> ragged = ests;
    ragged[1].eif = VectorXd::Zero(n + 1);
    CHECK_THROWS_AS(eif_covariance(ragged), DimensionMismatch);
    CHECK_THROWS_AS(eif_covariance({}), EmptyDataset);
}

TEST_CASE("simultaneous quantile: closed-form extremes") {
    BandOptions opts;
    opts.n_draws = 200000;
    opts.seed = 5;

    // a single coordinate reduces to the pointwise quantile
    CHECK(max_abs_gaussian_quantile(MatrixXd::Identity(1, 1), opts) ==
          Catch::Approx(1.959963984540054).margin(0.02));

    // perfectly correlated coordinates are one coordinate in disguise
    MatrixXd ones = MatrixXd::Ones(4, 4);
    CHECK(max_abs_gaussian_quantile(ones, opts) == Catch::Approx(1.959963984540054).margin(0.02));

    // independent coordinates: P(max |Z| <= q) = (2 Phi(q) - 1)^k
    CHECK(max_abs_gaussian_quantile(MatrixXd::Identity(6, 6), opts) ==
          Catch::Approx(independent_max_quantile(6, 0.05)).margin(0.02));

    // the quantile grows with dimension and shrinks with correlation
    const double q2 = max_abs_gaussian_quantile(MatrixXd::Identity(2, 2), opts);
    const double q6 = max_abs_gaussian_quantile(MatrixXd::Identity(6, 6), opts);
    CHECK(q2 < q6);
    MatrixXd corr6 = MatrixXd::Constant(6, 6, 0.8);
    corr6.diagonal().setOnes();
    CHECK(max_abs_gaussian_quantile(corr6, opts) < q6);

    // identical options give identical results; a different seed gives a close one
    CHECK(max_abs_gaussian_quantile(corr6, opts) == max_abs_gaussian_quantile(corr6, opts));
    BandOptions other = opts;
    other.seed = 99;
    CHECK(max_abs_gaussian_quantile(corr6, other) ==
          Catch::Approx(max_abs_gaussian_quantile(corr6, opts)).margin(0.02));

    MatrixXd bad(2, 2);
    bad << 1.0, 1.5, 1.5, 1.0;  // |rho| > 1: not a correlation matrix
    CHECK_THROWS_AS(max_abs_gaussian_quantile(bad, opts), NonPSDMatrix);
}

TEST_CASE("curves: bands contain pointwise intervals and collapse when degenerate") {
    Rng rng(11);
    const Eigen::Index n = 400;
    std::vector<ThresholdEstimate> ests;
    for (int j = 0; j < 4; ++j) {
        VectorXd eif(n);
        for (Eigen::Index i = 0; i < n; ++i) eif[i] = uniform01(rng) - 0.5;
        eif.array() -= eif.mean();
        ests.push_back(synthetic_estimate(0.2 * j, 0.4 + 0.05 * j, eif));
    }
    // a zero-variance coordinate (e.g. a degenerate stratum)
    ests.push_back(synthetic_estimate(0.8, 0.7, VectorXd::Zero(n)));

    BandOptions opts;
    opts.n_draws = 50000;
    opts.seed = 2;
    const ThresholdCurve curve = build_curve(ests, OutcomeKind{}, opts, true);
    REQUIRE(curve.has_bands());
    REQUIRE(curve.size() == 5);
    CHECK(curve.simultaneous_quantile > 1.959963984540054);
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(curve.simultaneous[j].lower <= curve.pointwise[j].lower);
        CHECK(curve.simultaneous[j].upper >= curve.pointwise[j].upper);
    }
    CHECK(curve.simultaneous[4].lower == 0.7);
    CHECK(curve.simultaneous[4].upper == 0.7);

    const ThresholdCurve no_bands = build_curve(ests, OutcomeKind{}, opts, false);
    CHECK_FALSE(no_bands.has_bands());
    CHECK_THROWS_AS(test_threshold_exists(no_bands, 0.1), BandsNotComputed);
}

TEST_CASE("threshold-existence test reports the smallest witness") {
    std::vector<ThresholdEstimate> ests;
    ThresholdCurve curve;
    for (int j = 0; j < 4; ++j) {
        ThresholdEstimate est;
        est.threshold = 0.5 * j;
        est.psi = 0.4 - 0.1 * j;
        curve.estimates.push_back(est);
        curve.pointwise.push_back({est.psi - 0.05, est.psi + 0.05});
        curve.simultaneous.push_back({est.psi - 0.08, est.psi + 0.08});
    }
    // upper bands: 0.48, 0.38, 0.28, 0.18
    const auto none = test_threshold_exists(curve, 0.1);
    CHECK_FALSE(none.reject);
    CHECK_FALSE(none.witness.has_value());
    const auto hit = test_threshold_exists(curve, 0.3);
    CHECK(hit.reject);
    REQUIRE(hit.witness.has_value());
    CHECK(*hit.witness == 1.0);  // grid index 2 is the first with upper <= 0.3
    CHECK(hit.delta == 0.3);
}

TEST_CASE("absolute protection interval starts at the largest observed event") {
    DgpSpec spec;
    spec.family = DgpFamily::sim1;
    spec.n = 150;
    spec.seed = 4;
    Dataset d = generate(spec);
    const auto pi = absolute_protection_interval(d);
    double best = -1.0;
    for (Eigen::Index i = 0; i < d.n(); ++i)
        if (d.r[i] && d.delta[i] && d.y[i] == 1.0) best = std::max(best, d.a[i]);
    CHECK(pi.lower == best);
    CHECK(std::isinf(pi.upper));

    for (Eigen::Index i = 0; i < d.n(); ++i)
        if (d.delta[i]) d.y[i] = 0.0;
    CHECK_THROWS_AS(absolute_protection_interval(d), NoEvents);
}

TEST_CASE("curve serialization carries one row per threshold") {
    Rng rng(8);
    const Eigen::Index n = 100;
    std::vector<ThresholdEstimate> ests;
    for (int j = 0; j < 3; ++j) {
        VectorXd eif(n);
        for (Eigen::Index i = 0; i < n; ++i) eif[i] = uniform01(rng) - 0.5;
        ests.push_back(synthetic_estimate(0.1 * j, 0.3, eif));
    }
    BandOptions opts;
    opts.n_draws = 20000;
    const ThresholdCurve curve = build_curve(ests, OutcomeKind{}, opts, true);
    std::ostringstream out;
    write_curve_csv(curve, out);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "threshold,psi,se,ci_lower,ci_upper,band_lower,band_upper");
    int rows = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 3);
}
