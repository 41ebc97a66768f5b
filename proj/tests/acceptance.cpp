// Acceptance gate: one pass/fail line per criterion, nonzero exit on any
// failure. argv[1] is the path to the command-line binary (used by the
// determinism criterion).

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "threshr/threshr.hpp"

using namespace threshr;
namespace fs = std::filesystem;

namespace {

int g_failures = 0;

void report(int id, const char* title, bool pass, const std::string& detail) {
    if (!pass) ++g_failures;
    std::printf("%-4s criterion %2d: %s%s%s\n", pass ? "PASS" : "FAIL", id, title,
                detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
}

void run_criterion(int id, const char* title, const std::function<bool(std::string&)>& body) {
    std::string detail;
    bool pass = false;
    try {
        pass = body(detail);
    } catch (const std::exception& e) {
        detail = std::string("exception: ") + e.what();
    }
    report(id, title, pass, detail);
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// criterion 1: score-equation exactness on random mixed-covariate datasets
// ---------------------------------------------------------------------------

Dataset random_mixed_data(std::uint64_t seed, Eigen::Index n) {
    Rng rng(seed);
    Dataset d;
    d.covariate_names = {"w1", "w2"};
    d.w.resize(n, 2);
    d.a.resize(n);
    d.y.resize(n);
    d.r.assign(n, 1);
    d.delta.resize(n);
    d.weight = VectorXd::Ones(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double w1 = 2.0 * uniform01(rng) - 1.0;
        const double w2 = uniform01(rng) < 0.5 ? 1.0 : 0.0;
        d.w.row(i) << w1, w2;
        d.a[i] = uniform01(rng) + 0.5 * w1 + 0.3 * w2;
        const bool obs = uniform01(rng) < expit(0.8 + 0.5 * w1 - 0.3 * w2);
        d.delta[i] = obs ? 1 : 0;
        const double risk = expit(-0.5 + w1 + 0.7 * w2 - 0.5 * d.a[i]);
        d.y[i] = obs ? (uniform01(rng) < risk ? 1.0 : 0.0) : std::numeric_limits<double>::quiet_NaN();
    }
    d.validate();
    return d;
}

bool criterion_scores(std::string& detail) {
    NuisanceConfig cfg;
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const Dataset d = random_mixed_data(derive_seed(1001, t), 200);
        std::vector<double> a(d.a.data(), d.a.data() + d.n());
        const double v = quantile_type1(a, 0.5);
        const auto sr = sr_tmle(d, v, fit_nuisances_sr(d, v, cfg, d.weight), d.weight);
        const auto bin = bin_tmle(d, v, fit_nuisances_bin(d, v, cfg, d.weight), d.weight);
        worst = std::max({worst, std::abs(sr.diagnostics.score_y),
                          std::abs(sr.diagnostics.score_qv), std::abs(bin.diagnostics.score_y)});
    }
    detail = "max |score| = " + fmt(worst) + " over 100 datasets";
    return worst <= 1e-8;
}

// ---------------------------------------------------------------------------
// criterion 2: saturated TMLE equals the exhaustive plug-in on discrete DGPs
// ---------------------------------------------------------------------------

DiscreteDgp random_discrete(Rng& rng, int n_strata, int n_levels) {
    DiscreteDgp dgp;
    dgp.w_support.resize(n_strata, 2);
    for (int s = 0; s < n_strata; ++s) dgp.w_support.row(s) << s % 2, s / 2;
    dgp.w_prob.resize(n_strata);
    for (int s = 0; s < n_strata; ++s) dgp.w_prob[s] = 0.15 + 0.7 * uniform01(rng);
    dgp.w_prob /= dgp.w_prob.sum();
    dgp.a_support.resize(n_levels);
    for (int t = 0; t < n_levels; ++t) dgp.a_support[t] = t;
    dgp.a_prob.resize(n_strata, n_levels);
    for (int s = 0; s < n_strata; ++s) {
        for (int t = 0; t < n_levels; ++t) dgp.a_prob(s, t) = 0.15 + 0.7 * uniform01(rng);
        dgp.a_prob.row(s) /= dgp.a_prob.row(s).sum();
    }
    MatrixXd risk(n_strata, n_levels);
    for (int s = 0; s < n_strata; ++s)
        for (int t = 0; t < n_levels; ++t) risk(s, t) = 0.25 + 0.5 * uniform01(rng);
    dgp.risk = [risk](double a, const VectorXd& w) {
        return risk(static_cast<int>(w[0]) + 2 * static_cast<int>(w[1]), static_cast<int>(a));
    };
    return dgp;
}

int stratum_of(const Dataset& d, Eigen::Index i) {
    return static_cast<int>(d.w(i, 0)) + 2 * static_cast<int>(d.w(i, 1));
}

NuisanceFits saturated_fits(const Dataset& d, double v) {
    const Eigen::Index n = d.n();
    std::map<std::pair<int, int>, std::pair<double, double>> q_cells;
    std::map<int, std::pair<double, double>> above;
    for (Eigen::Index i = 0; i < n; ++i) {
        const int s = stratum_of(d, i);
        auto& qc = q_cells[{s, static_cast<int>(d.a[i])}];
        qc.first += d.y[i];
        qc.second += 1.0;
        auto& ab = above[s];
        ab.first += d.a[i] >= v ? 1.0 : 0.0;
        ab.second += 1.0;
    }
    NuisanceFits fits;
    fits.threshold = v;
    fits.gv.resize(n);
    fits.q.resize(n);
    fits.g_miss = VectorXd::Ones(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const int s = stratum_of(d, i);
        const auto& qc = q_cells.at({s, static_cast<int>(d.a[i])});
        fits.q[i] = qc.first / qc.second;
        const auto& ab = above.at(s);
        fits.gv[i] = ab.first / ab.second;
    }
    fits.refit_qv = [&d, v](const VectorXd& q_star) {
        std::map<int, std::pair<double, double>> acc;
        for (Eigen::Index i = 0; i < d.n(); ++i) {
            if (d.a[i] < v) continue;
            auto& a = acc[stratum_of(d, i)];
            a.first += q_star[i];
            a.second += 1.0;
        }
        VectorXd out(d.n());
        for (Eigen::Index i = 0; i < d.n(); ++i) {
            const auto& a = acc.at(stratum_of(d, i));
            out[i] = a.first / a.second;
        }
        return out;
    };
    return fits;
}

bool criterion_oracle(std::string& detail) {
    Rng rng(77);
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
        const int levels = 3 + static_cast<int>(uniform01(rng) * 3);  // 3..5 biomarker values
        const DiscreteDgp dgp = random_discrete(rng, 4, levels);
        const Dataset d = generate(dgp, 1200, derive_seed(2002, t));
        const double v = 1.0;
        const auto fits = saturated_fits(d, v);
        const auto est = sr_tmle(d, v, fits, d.weight);
        const VectorXd qv = fits.refit_qv(fits.q);  // plug-in from the same saturated fits
        worst = std::max(worst, std::abs(est.psi - qv.mean()));
    }
    detail = "max |TMLE - plug-in| = " + fmt(worst) + " over 50 instances";
    return worst <= 1e-8;
}

// ---------------------------------------------------------------------------
// criterion 3: covariate-free, fully-observed data collapses all estimators
// ---------------------------------------------------------------------------

bool criterion_reduction(std::string& detail) {
    NuisanceConfig cfg;
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
        Rng rng(derive_seed(3003, t));
        const Eigen::Index n = 150 + static_cast<Eigen::Index>(uniform01(rng) * 200);
        Dataset d;
        d.w.resize(n, 0);
        d.a.resize(n);
        d.y.resize(n);
        d.r.assign(n, 1);
        d.delta.assign(n, 1);
        d.weight = VectorXd::Ones(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            d.a[i] = 2.0 * uniform01(rng);
            d.y[i] = uniform01(rng) < 0.15 + 0.3 * d.a[i] ? 1.0 : 0.0;
        }
        d.validate();
        const double v = 0.8;
        const auto don = donovan(d, v, d.weight);
        const auto sr = sr_tmle(d, v, fit_nuisances_sr(d, v, cfg, d.weight), d.weight);
        const auto bin = bin_tmle(d, v, fit_nuisances_bin(d, v, cfg, d.weight), d.weight);
        worst = std::max({worst, std::abs(sr.psi - don.psi), std::abs(bin.psi - don.psi)});
    }
    detail = "max pairwise gap = " + fmt(worst) + " over 50 datasets";
    return worst <= 1e-8;
}

// ---------------------------------------------------------------------------
// criterion 4: pointwise and simultaneous coverage on the quantile-grid design
// ---------------------------------------------------------------------------

bool criterion_coverage(std::string& detail) {
    DgpSpec spec;
    spec.family = DgpFamily::coverage_d;
    spec.n = 2000;
    const std::vector<double> grid = default_grid(spec);
    const VectorXd truth = true_psi_quadrature(spec, grid);
    StudyConfig cfg;
    cfg.n_reps = 500;
    cfg.base_seed = 404;
    cfg.band_draws = 20000;
    cfg.simultaneous = true;
    const SimulationReport rep =
        monte_carlo_study(spec, grid, {EstimatorKind::sr_tmle}, truth, cfg);
    double pw_lo = 1.0, pw_hi = 0.0;
    for (const auto& c : rep.cells) {
        pw_lo = std::min(pw_lo, c.pointwise_coverage);
        pw_hi = std::max(pw_hi, c.pointwise_coverage);
    }
    const double sim = rep.cells.front().simultaneous_coverage;
    detail = "pointwise in [" + fmt(pw_lo) + ", " + fmt(pw_hi) + "], simultaneous " + fmt(sim) +
             ", failures " + std::to_string(rep.n_failed) + "/500";
    return pw_lo >= 0.93 && pw_hi <= 0.98 && sim >= 0.92 && sim <= 0.975;
}

// ---------------------------------------------------------------------------
// criterion 5: coverage ordering under biomarker-informed outcome missingness
// ---------------------------------------------------------------------------

bool criterion_ordering(std::string& detail) {
    DgpSpec spec;
    spec.family = DgpFamily::sim2;
    spec.sin_const = 1.0;
    spec.n = 2000;
    const std::vector<double> grid = default_grid(spec);
    const VectorXd truth = true_psi_quadrature(spec, grid);
    StudyConfig cfg;
    cfg.n_reps = 300;
    cfg.base_seed = 505;
    cfg.simultaneous = false;
    // the sinusoidal biomarker effects (~2 periods over the support) need a
    // dense spline in the biomarker direction
    cfg.nuisance.biomarker_knots = 12;
    const std::vector<EstimatorKind> kinds{EstimatorKind::sr_tmle, EstimatorKind::donovan,
                                           EstimatorKind::bin_tmle};
    const SimulationReport rep = monte_carlo_study(spec, grid, kinds, truth, cfg);
    const std::size_t nv = grid.size();
    auto cov = [&](std::size_t k, std::size_t j) {
        return rep.cells[k * nv + j].pointwise_coverage;
    };
    // nominal coverage is only expected where positivity holds with margin:
    // thresholds up to the marginal biomarker median (the same guard used for
    // the simultaneous-coverage study); above it, events vanish (truth drops
    // to ~0.005) and Wald intervals degrade for every estimator alike
    const double median = marginal_biomarker_quantile(spec, 0.5);
    double sr_min_interior = 1.0;
    for (std::size_t j = 0; j < nv; ++j)
        if (grid[j] <= median) sr_min_interior = std::min(sr_min_interior, cov(0, j));
    int don_below = 0, bin_below = 0;
    for (std::size_t j = 0; j < nv; ++j) {
        if (cov(1, j) <= cov(0, j) - 0.05) ++don_below;
        if (cov(2, j) <= cov(0, j) - 0.05) ++bin_below;
    }
    detail = "srTMLE interior min coverage " + fmt(sr_min_interior) + "; >=5pp worse at " +
             std::to_string(don_below) + "/10 (unadjusted) and " + std::to_string(bin_below) +
             "/10 (binary TMLE) thresholds";
    return sr_min_interior >= 0.92 && don_below >= 5 && bin_below >= 5;
}

// ---------------------------------------------------------------------------
// criterion 6: influence-function efficiency ordering
// ---------------------------------------------------------------------------

bool criterion_efficiency(std::string& detail) {
    DgpSpec nonlin;
    nonlin.family = DgpFamily::sim1;
    nonlin.sin_const = 1.0;
    const std::vector<double> grid = default_grid(nonlin);
    DgpSpec lin = nonlin;
    lin.sin_const = 0.0;
    DgpSpec full = nonlin;
    full.delta_always_one = true;
    const VectorXd l_non = efficiency_loss(nonlin, grid, 1000000, 606);
    const VectorXd l_lin = efficiency_loss(lin, grid, 1000000, 606);
    const VectorXd l_full = efficiency_loss(full, grid, 1000000, 606);
    bool ok = true;
    double max_full = 0.0;
    for (Eigen::Index j = 0; j < l_non.size(); ++j) {
        ok = ok && l_non[j] >= -0.01 && l_lin[j] >= -0.01 && l_full[j] >= -0.01;
        ok = ok && l_non[j] > l_lin[j];
        max_full = std::max(max_full, std::abs(l_full[j]));
    }
    detail = "nonlinear loss " + fmt(l_non.minCoeff()) + ".." + fmt(l_non.maxCoeff()) +
             ", linear " + fmt(l_lin.minCoeff()) + ".." + fmt(l_lin.maxCoeff()) +
             ", fully observed max |loss| " + fmt(max_full);
    return ok && max_full <= 0.01;
}

// ---------------------------------------------------------------------------
// criterion 7: double robustness under single-sided misspecification
// ---------------------------------------------------------------------------

bool criterion_double_robustness(std::string& detail) {
    DgpSpec spec;
    spec.family = DgpFamily::sim1;
    spec.sin_const = 0.0;
    spec.offset = 0.0;
    spec.n = 10000;
    // double robustness presumes the correctly-specified side is estimated
    // consistently; beyond the marginal biomarker median P(A >= v) shrinks to
    // a few percent and g_v cannot be learned well enough at this sample size
    // for either side to rescue the other, so the check stays on thresholds
    // where positivity holds with margin (the same guard as the coverage
    // studies use)
    const double median = marginal_biomarker_quantile(spec, 0.5);
    std::vector<double> grid;
    for (double v : default_grid(spec))
        if (v <= median) grid.push_back(v);
    const VectorXd truth = true_psi_quadrature(spec, grid);

    std::ostringstream os;
    bool ok = true;
    for (int side = 0; side < 2; ++side) {
        StudyConfig cfg;
        cfg.n_reps = 200;
        cfg.base_seed = 707 + side;
        cfg.simultaneous = false;
        if (side == 0) cfg.nuisance.intercept_only_outcome = true;
        else cfg.nuisance.intercept_only_g = true;
        const SimulationReport rep =
            monte_carlo_study(spec, grid, {EstimatorKind::sr_tmle}, truth, cfg);
        double worst_ratio = 0.0;
        for (const auto& c : rep.cells) {
            const double mcse = c.sd / std::sqrt(static_cast<double>(cfg.n_reps - rep.n_failed));
            worst_ratio = std::max(worst_ratio, std::abs(c.bias) / (3.0 * mcse));
        }
        os << (side == 0 ? "outcome-side" : "g-side") << " max |bias|/(3 MCSE) = "
           << fmt(worst_ratio) << (side == 0 ? "; " : "");
        ok = ok && worst_ratio <= 1.0;
    }
    detail = os.str();
    return ok;
}

// ---------------------------------------------------------------------------
// criterion 8: generated marginals versus their nominal levels
// ---------------------------------------------------------------------------

bool criterion_calibration(std::string& detail) {
    DgpSpec common;
    common.family = DgpFamily::sim1;
    common.n = 1000000;
    common.sin_const = 1.0;

    DgpSpec base = common;
    base.seed = 808;
    base.delta_always_one = true;
    const double p_common = generate(base).y.mean();

    DgpSpec rare = base;
    rare.offset = -3.0;
    rare.seed = 809;
    const double p_rare = generate(rare).y.mean();

    DgpSpec miss = common;
    miss.seed = 810;
    const Dataset dm = generate(miss);
    double p_miss = 0.0;
    for (Eigen::Index i = 0; i < dm.n(); ++i) p_miss += dm.delta[i] ? 0.0 : 1.0;
    p_miss /= static_cast<double>(dm.n());

    const bool ok_common = std::abs(p_common - 0.45) <= 0.01;
    const bool ok_rare = std::abs(p_rare - 0.08) <= 0.005;
    const bool ok_miss = std::abs(p_miss - 0.40) <= 0.01;
    detail = "P(Y=1)=" + fmt(p_common) + " (nominal 0.45+-0.01), rare P(Y=1)=" + fmt(p_rare) +
             " (0.08+-0.005), P(missing)=" + fmt(p_miss) + " (0.40+-0.01)";
    return ok_common && ok_rare && ok_miss;
}

// ---------------------------------------------------------------------------
// criterion 9: identification against the matching-intervention oracle
// ---------------------------------------------------------------------------

bool criterion_identification(std::string& detail) {
    Rng rng(909);
    double worst = 0.0;
    for (int t = 0; t < 10; ++t) {
        const DiscreteDgp dgp = random_discrete(rng, 4, 4);
        const double v = 1.0 + (t % 2);
        const double psi = true_psi(dgp, v);
        const Eigen::Index N = 300000;
        const double oracle = intervention_oracle(dgp, v, N, derive_seed(5005, t));
        const double se = std::sqrt(std::max(psi * (1.0 - psi), 1e-12) / static_cast<double>(N));
        worst = std::max(worst, std::abs(oracle - psi) / (3.0 * se));
    }
    detail = "max |oracle - enumeration| / (3 MC SE) = " + fmt(worst) + " over 10 DGPs";
    return worst <= 1.0;
}

// ---------------------------------------------------------------------------
// criterion 10: weight targeting versus the weighted unadjusted estimator
// ---------------------------------------------------------------------------

bool criterion_ipw(std::string& detail) {
    DgpSpec spec;
    spec.family = DgpFamily::biased_sampling;
    spec.n = 15000;
    const std::vector<double> grid{marginal_biomarker_quantile(spec, 0.5)};
    const VectorXd truth = true_psi_quadrature(spec, grid);
    StudyConfig cfg;
    cfg.n_reps = 200;
    cfg.base_seed = 1010;
    cfg.simultaneous = false;
    const std::vector<EstimatorKind> kinds{EstimatorKind::ipw_sr_tmle,
                                           EstimatorKind::ipw_sr_tmle_untargeted,
                                           EstimatorKind::donovan};
    const SimulationReport rep = monte_carlo_study(spec, grid, kinds, truth, cfg);
    const double sd_t = rep.cells[0].sd, sd_u = rep.cells[1].sd, sd_d = rep.cells[2].sd;
    detail = "sd targeted " + fmt(sd_t) + ", untargeted " + fmt(sd_u) + ", weighted unadjusted " +
             fmt(sd_d);
    return sd_t <= sd_u + 1e-12 && std::abs(sd_t / sd_d - 1.0) <= 0.10;
}

// ---------------------------------------------------------------------------
// criterion 11: CLI determinism
// ---------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

bool criterion_determinism(std::string& detail, const std::string& cli) {
    const fs::path dir = fs::temp_directory_path() / "threshr_acceptance";
    fs::create_directories(dir);

    DgpSpec spec;
    spec.family = DgpFamily::sim1;
    spec.n = 500;
    spec.seed = 12;
    const Dataset d = generate(spec);
    const fs::path input = dir / "input.csv";
    {
        std::ofstream out(input);
        write_csv(d, out);
    }
    const std::string schema =
        " --covariates w1,w2,w3 --measured-col r --missing-col delta --weight-col weight";
    const std::vector<std::string> invocations{
        "bands --input " + input.string() + schema +
            " --grid 0.2,0.8,1.2 --estimator sr_tmle,donovan --seed 99 --band-draws 20000",
        "simulate --design sim1 --n 250 --reps 6 --estimator sr_tmle --seed 31"
        " --no-simultaneous --quiet",
    };
    for (std::size_t k = 0; k < invocations.size(); ++k) {
        const fs::path o1 = dir / ("run" + std::to_string(k) + "_a.csv");
        const fs::path o2 = dir / ("run" + std::to_string(k) + "_b.csv");
        for (const fs::path& o : {o1, o2}) {
            const std::string cmd = cli + " " + invocations[k] + " --output " + o.string() +
                                    " 2>" + (dir / "stderr.txt").string();
            if (std::system(cmd.c_str()) != 0) {
                detail = "invocation failed: " + invocations[k];
                return false;
            }
        }
        const std::string a = slurp(o1), b = slurp(o2);
        if (a.empty() || a != b) {
            detail = "outputs differ for: " + invocations[k];
            return false;
        }
    }
    detail = std::to_string(invocations.size()) + " invocations byte-identical on repeat";
    return true;
}

}  // namespace

int main(int argc, char** argv) {
    const std::string cli = argc > 1 ? argv[1] : "";

    run_criterion(1, "targeting solves both score equations exactly", criterion_scores);
    run_criterion(2, "saturated estimator equals the exhaustive plug-in", criterion_oracle);
    run_criterion(3, "covariate-free data collapses all estimators", criterion_reduction);
    run_criterion(4, "pointwise and simultaneous coverage near nominal", criterion_coverage);
    run_criterion(5, "coverage ordering under informative missingness", criterion_ordering);
    run_criterion(6, "coarse influence function loses efficiency as expected", criterion_efficiency);
    run_criterion(7, "double robustness under one-sided misspecification",
                  criterion_double_robustness);
    run_criterion(8, "generated marginals match their nominal levels", criterion_calibration);
    run_criterion(9, "estimand matches the matching-intervention oracle", criterion_identification);
    run_criterion(10, "weight targeting recovers the unadjusted efficiency", criterion_ipw);
    run_criterion(11, "repeated CLI runs are byte-identical",
                  [&](std::string& d) { return criterion_determinism(d, cli); });

    if (g_failures > 0) {
        std::printf("%d criterion(s) failed\n", g_failures);
        return 1;
    }
    std::printf("all criteria passed\n");
    return 0;
}
