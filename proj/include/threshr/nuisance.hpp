#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <utility>
#include <vector>

#include "threshr/dataset.hpp"
#include "threshr/regress.hpp"

namespace threshr {

struct NuisanceConfig {
    int degree = 1;
    int covariate_knots = 4;      // interior quantile knots per baseline covariate
    int biomarker_knots = 4;      // knots for the biomarker term in Q and G fits
    bool include_interactions = false;
    double bound = 0.005;
    bool intercept_only_outcome = false;  // force Q / Q_v to intercept-only fits
    bool intercept_only_g = false;        // force g_v / G to intercept-only fits
    LogisticOptions logistic;
};

// bounded probability predictions plus fit flags
struct ProbFit {
    VectorXd pred;
    bool degenerate = false;
    bool capped = false;
    bool converged = true;
};

namespace detail {

inline std::vector<Eigen::Index> which(const Dataset& data,
                                       const std::function<bool(Eigen::Index)>& keep) {
    std::vector<Eigen::Index> idx;
    for (Eigen::Index i = 0; i < data.n(); ++i)
        if (keep(i)) idx.push_back(i);
    return idx;
}

inline MatrixXd take_rows(const MatrixXd& m, const std::vector<Eigen::Index>& idx) {
    MatrixXd out(static_cast<Eigen::Index>(idx.size()), m.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = m.row(idx[k]);
    return out;
}

inline VectorXd take(const VectorXd& v, const std::vector<Eigen::Index>& idx) {
    VectorXd out(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) out[static_cast<Eigen::Index>(k)] = v[idx[k]];
    return out;
}

// basis over the covariate matrix with knots chosen from the given fit rows
inline SplineBasis covariate_basis(const MatrixXd& features,
                                   const std::vector<Eigen::Index>& fit_rows,
                                   const NuisanceConfig& config, int knots_first_col) {
    SplineBasis basis;
    basis.degree = config.degree;
    basis.include_interactions = config.include_interactions;
    for (Eigen::Index j = 0; j < features.cols(); ++j) {
        std::vector<double> vals;
        vals.reserve(fit_rows.size());
        for (auto i : fit_rows) vals.push_back(features(i, j));
        const int k = (j == 0 && knots_first_col >= 0) ? knots_first_col : config.covariate_knots;
        basis.knots.push_back(quantile_knots(std::move(vals), k));
    }
    return basis;
}

// fit a bounded logistic on a row subset and predict for every row; the
// feature matrix must be finite (callers sanitize zero-weight rows)
inline ProbFit subset_logistic(const MatrixXd& features, const VectorXd& outcome,
                               const VectorXd& weights, const std::vector<Eigen::Index>& fit_rows,
                               const NuisanceConfig& config, bool intercept_only,
                               int knots_first_col = -1) {
    const Eigen::Index n = features.rows();
    ProbFit out;
    MatrixXd design;
    if (intercept_only) {
        design = MatrixXd::Ones(n, 1);
    } else {
        const SplineBasis basis = covariate_basis(features, fit_rows, config, knots_first_col);
        design = spline_design(features, basis);
    }
    MatrixXd fit_design = take_rows(design, fit_rows);
    const VectorXd fit_y = take(outcome, fit_rows);
    const VectorXd fit_w = take(weights, fit_rows);

    // drop aliased columns (e.g. a binary covariate constant within a small
    // stratum) so the IRLS normal equations stay full rank
    {
        const VectorXd sw = fit_w.array().sqrt();
        Eigen::ColPivHouseholderQR<MatrixXd> qr(sw.asDiagonal() * fit_design);
        qr.setThreshold(1e-8);
        const Eigen::Index rank = qr.rank();
        if (rank < fit_design.cols()) {
            std::vector<Eigen::Index> keep(qr.colsPermutation().indices().data(),
                                           qr.colsPermutation().indices().data() + rank);
            std::sort(keep.begin(), keep.end());
            MatrixXd reduced_fit(fit_design.rows(), rank), reduced_all(design.rows(), rank);
            for (Eigen::Index c = 0; c < rank; ++c) {
                reduced_fit.col(c) = fit_design.col(keep[static_cast<std::size_t>(c)]);
                reduced_all.col(c) = design.col(keep[static_cast<std::size_t>(c)]);
            }
            fit_design = std::move(reduced_fit);
            design = std::move(reduced_all);
        }
    }

    const VectorXd offset = VectorXd::Zero(fit_design.rows());
    const VectorXd start = VectorXd::Zero(fit_design.cols());
    const LogisticFit fit =
        fit_weighted_logistic(fit_design, fit_y, fit_w, offset, start, config.logistic);
    out.capped = fit.capped;
    out.converged = fit.converged;

    const VectorXd eta = design * fit.coefficients;
    out.pred.resize(n);
    for (Eigen::Index i = 0; i < n; ++i)
        out.pred[i] = bound_probability(expit(eta[i]), config.bound);
    return out;
}

inline ProbFit constant_fit(Eigen::Index n, double p, double bound, bool degenerate = true) {
    ProbFit out;
    out.pred = VectorXd::Constant(n, bound_probability(p, bound));
    out.degenerate = degenerate;
    return out;
}

inline double weighted_mean(const VectorXd& x, const VectorXd& w,
                            const std::vector<Eigen::Index>& idx) {
    double num = 0.0, den = 0.0;
    for (auto i : idx) {
        num += w[i] * x[i];
        den += w[i];
    }
    if (den <= 0.0) throw EmptyStratum("zero total weight in stratum");
    return num / den;
}

}  // namespace detail

// P(A >= v | W), pseudo-outcome regression of 1(a_i >= v) among measured rows
inline ProbFit fit_gv(const Dataset& data, double v, const NuisanceConfig& config,
                      const VectorXd& weights) {
    auto rows = detail::which(data, [&](Eigen::Index i) { return data.r[i] != 0 && weights[i] > 0; });
    if (rows.empty()) throw EmptyStratum("no measured observations");
    VectorXd ind(data.n());
    for (Eigen::Index i = 0; i < data.n(); ++i)
        ind[i] = (data.r[i] && data.a[i] >= v) ? 1.0 : 0.0;
    const double prop = detail::weighted_mean(ind, weights, rows);
    if (prop == 0.0 || prop == 1.0) return detail::constant_fit(data.n(), prop, config.bound);
    if (data.d() == 0 || config.intercept_only_g)
        return detail::constant_fit(data.n(), prop, config.bound, false);
    ProbFit fit = detail::subset_logistic(data.w, ind, weights, rows, config, false);
    fit.pred = bound_probability(std::move(fit.pred), config.bound);
    return fit;
}

// Q(a, w) = E[Y | A=a, W=w, Delta=1], fit among complete cases on (a, W)
inline ProbFit fit_q(const Dataset& data, const NuisanceConfig& config, const VectorXd& weights) {
    auto rows = detail::which(data, [&](Eigen::Index i) {
        return data.r[i] != 0 && data.delta[i] != 0 && weights[i] > 0;
    });
    if (rows.empty()) throw NoCompleteCases("no rows with r=1 and delta=1");
    MatrixXd features(data.n(), data.d() + 1);
    features.col(0) = data.a;
    if (data.d() > 0) features.rightCols(data.d()) = data.w;
    VectorXd outcome = data.y;
    for (Eigen::Index i = 0; i < data.n(); ++i)
        if (std::isnan(outcome[i])) outcome[i] = 0.0;  // zero-weight rows only
    if (config.intercept_only_outcome)
        return detail::constant_fit(data.n(), detail::weighted_mean(outcome, weights, rows),
                                    config.bound, false);
    // NaN-safe: fit rows all have a present; prediction is NaN where a is absent
    ProbFit fit;
    {
        // replace NaN biomarker with 0 only for the full matrix scan; rows with
        // r=0 get NaN predictions restored afterwards
        MatrixXd safe = features;
        std::vector<Eigen::Index> nan_rows;
        for (Eigen::Index i = 0; i < data.n(); ++i)
            if (std::isnan(safe(i, 0))) {
                safe(i, 0) = 0.0;
                nan_rows.push_back(i);
            }
        fit = detail::subset_logistic(safe, outcome, weights, rows, config, false,
                                      config.biomarker_knots);
        for (auto i : nan_rows) fit.pred[i] = std::numeric_limits<double>::quiet_NaN();
    }
    return fit;
}

// Q_v(w) by sequential regression: fractional regression of q_star on W among
// measured rows with a >= v
inline ProbFit fit_qv_sequential(const Dataset& data, double v, const VectorXd& q_star,
                                 const NuisanceConfig& config, const VectorXd& weights) {
    auto rows = detail::which(data, [&](Eigen::Index i) {
        return data.r[i] != 0 && data.a[i] >= v && weights[i] > 0;
    });
    if (rows.empty()) throw EmptyStratum("no measured observations with a >= v");
    if (data.d() == 0 || config.intercept_only_outcome)
        return detail::constant_fit(data.n(), detail::weighted_mean(q_star, weights, rows),
                                    config.bound, false);
    VectorXd outcome = q_star;
    for (Eigen::Index i = 0; i < data.n(); ++i)
        if (std::isnan(outcome[i])) outcome[i] = 0.5;  // unused rows
    return detail::subset_logistic(data.w, outcome, weights, rows, config, false);
}

// E[Y | A >= v, W, Delta=1] fit directly on Y (the binTMLE initial estimator)
inline ProbFit fit_qv_direct(const Dataset& data, double v, const NuisanceConfig& config,
                             const VectorXd& weights) {
    auto rows = detail::which(data, [&](Eigen::Index i) {
        return data.r[i] != 0 && data.a[i] >= v && data.delta[i] != 0 && weights[i] > 0;
    });
    if (rows.empty()) throw EmptyStratum("no complete cases with a >= v");
    VectorXd outcome = data.y;
    for (Eigen::Index i = 0; i < data.n(); ++i)
        if (std::isnan(outcome[i])) outcome[i] = 0.0;
    if (data.d() == 0 || config.intercept_only_outcome)
        return detail::constant_fit(data.n(), detail::weighted_mean(outcome, weights, rows),
                                    config.bound, false);
    return detail::subset_logistic(data.w, outcome, weights, rows, config, false);
}

enum class MissingnessMode { conditional_on_A, above_threshold };

// G(a,w) = P(Delta=1 | A, W) or G_v(w) = P(Delta=1 | A >= v, W)
inline ProbFit fit_missingness(const Dataset& data, double v, MissingnessMode mode,
                               const NuisanceConfig& config, const VectorXd& weights) {
    const bool above = mode == MissingnessMode::above_threshold;
    auto rows = detail::which(data, [&](Eigen::Index i) {
        if (data.r[i] == 0 || weights[i] <= 0) return false;
        return !above || data.a[i] >= v;
    });
    if (rows.empty()) throw EmptyStratum("no rows for missingness fit");
    VectorXd outcome(data.n());
    for (Eigen::Index i = 0; i < data.n(); ++i) outcome[i] = data.delta[i] ? 1.0 : 0.0;
    const double prop = detail::weighted_mean(outcome, weights, rows);
    if (prop == 0.0 || prop == 1.0) return detail::constant_fit(data.n(), prop, config.bound);
    if (config.intercept_only_g) return detail::constant_fit(data.n(), prop, config.bound, false);
    if (above) {
        if (data.d() == 0) return detail::constant_fit(data.n(), prop, config.bound, false);
        return detail::subset_logistic(data.w, outcome, weights, rows, config, false);
    }
    MatrixXd features(data.n(), data.d() + 1);
    features.col(0) = data.a;
    if (data.d() > 0) features.rightCols(data.d()) = data.w;
    MatrixXd safe = features;
    std::vector<Eigen::Index> nan_rows;
    for (Eigen::Index i = 0; i < data.n(); ++i)
        if (std::isnan(safe(i, 0))) {
            safe(i, 0) = 0.0;
            nan_rows.push_back(i);
        }
    ProbFit fit = detail::subset_logistic(safe, outcome, weights, rows, config, false,
                                          config.biomarker_knots);
    for (auto i : nan_rows) fit.pred[i] = std::numeric_limits<double>::quiet_NaN();
    return fit;
}

// Per-observation nuisance evaluations feeding one estimator run. refit_qv is
// the sequential-regression hook used by the srTMLE after the Q fluctuation.
struct NuisanceFits {
    double threshold = 0.0;
    VectorXd gv;       // P(A >= v | W)
    VectorXd q;        // E[Y | A, W, Delta=1]
    VectorXd qv;       // E[Y | A >= v, W] (direct fit; binTMLE initial estimator)
    VectorXd g_miss;   // P(Delta=1 | A, W)
    VectorXd gv_miss;  // P(Delta=1 | A >= v, W)
    bool any_capped = false;
    bool any_degenerate = false;
    std::function<VectorXd(const VectorXd&)> refit_qv;
};

inline NuisanceFits fit_nuisances_sr(const Dataset& data, double v, const NuisanceConfig& config,
                                     const VectorXd& weights) {
    NuisanceFits fits;
    fits.threshold = v;
    auto gv = fit_gv(data, v, config, weights);
    auto q = fit_q(data, config, weights);
    auto gm = fit_missingness(data, v, MissingnessMode::conditional_on_A, config, weights);
    fits.gv = std::move(gv.pred);
    fits.q = std::move(q.pred);
    fits.g_miss = std::move(gm.pred);
    fits.any_capped = gv.capped || q.capped || gm.capped;
    fits.any_degenerate = gv.degenerate || q.degenerate || gm.degenerate;
    fits.refit_qv = [&data, v, config, weights](const VectorXd& q_star) {
        return fit_qv_sequential(data, v, q_star, config, weights).pred;
    };
    return fits;
}

// Shared fits across a threshold grid: Q and G do not depend on v, so they are
// fit once; g_v and the sequential-regression hook are per-threshold.
inline std::vector<NuisanceFits> fit_nuisances_sr_grid(const Dataset& data,
                                                       const std::vector<double>& grid,
                                                       const NuisanceConfig& config,
                                                       const VectorXd& weights) {
    auto q = fit_q(data, config, weights);
    auto gm = fit_missingness(data, 0.0, MissingnessMode::conditional_on_A, config, weights);
    std::vector<NuisanceFits> out;
    out.reserve(grid.size());
    for (double v : grid) {
        NuisanceFits fits;
        fits.threshold = v;
        auto gv = fit_gv(data, v, config, weights);
        fits.gv = gv.pred;
        fits.q = q.pred;
        fits.g_miss = gm.pred;
        fits.any_capped = gv.capped || q.capped || gm.capped;
        fits.any_degenerate = gv.degenerate || q.degenerate || gm.degenerate;
        fits.refit_qv = [&data, v, config, weights](const VectorXd& q_star) {
            return fit_qv_sequential(data, v, q_star, config, weights).pred;
        };
        out.push_back(std::move(fits));
    }
    return out;
}

inline NuisanceFits fit_nuisances_bin(const Dataset& data, double v, const NuisanceConfig& config,
                                      const VectorXd& weights) {
    NuisanceFits fits;
    fits.threshold = v;
    auto gv = fit_gv(data, v, config, weights);
    auto qv = fit_qv_direct(data, v, config, weights);
    auto gm = fit_missingness(data, v, MissingnessMode::above_threshold, config, weights);
    fits.gv = std::move(gv.pred);
    fits.qv = std::move(qv.pred);
    fits.gv_miss = std::move(gm.pred);
    fits.any_capped = gv.capped || qv.capped || gm.capped;
    fits.any_degenerate = gv.degenerate || qv.degenerate || gm.degenerate;
    return fits;
}

// inverse sampling-probability weights, stratified by (Delta, Delta*Y)
struct SamplingWeights {
    VectorXd w;
    bool targeted = false;
    VectorXd h;  // E[D | R=1, W, Delta, Delta*Y], present iff targeted
};

inline SamplingWeights fit_sampling_weights(const Dataset& data) {
    std::map<std::pair<int, double>, std::pair<double, double>> strata;  // (count, measured)
    auto key = [&](Eigen::Index i) {
        const double dy = data.delta[i] ? data.y[i] : 0.0;
        return std::make_pair(int(data.delta[i]), dy);
    };
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        auto& s = strata[key(i)];
        s.first += 1.0;
        s.second += data.r[i] ? 1.0 : 0.0;
    }
    for (const auto& [k, s] : strata)
        if (s.second == 0.0)
            throw EmptyCellNoSample("stratum (delta=" + std::to_string(k.first) +
                                    ", dy=" + std::to_string(k.second) +
                                    ") has no measured member");
    SamplingWeights sw;
    sw.w.resize(data.n());
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        const auto& s = strata[key(i)];
        sw.w[i] = s.first / s.second;  // 1 / empirical P(R=1 | stratum)
    }
    return sw;
}

// One-parameter fluctuation of the inclusion probability pi = 1/w with clever
// covariate H/pi, iterated until the score sum_i (R_i - pi_i) H_i / pi_i is
// solved. H is the pseudo-outcome regression of the initial EIF values on
// (W, Delta, Delta*Y) among measured rows.
inline SamplingWeights target_sampling_weights(const Dataset& data, const SamplingWeights& initial,
                                               const VectorXd& d_init,
                                               const NuisanceConfig& config = {},
                                               const MatrixXd* extra = nullptr) {
    const Eigen::Index n = data.n();
    auto rows = detail::which(data, [&](Eigen::Index i) { return data.r[i] != 0; });
    if (rows.empty()) throw EmptyStratum("no measured rows");

    // optional derived regressors (e.g. fitted nuisance evaluations) join the
    // baseline covariates in the H regression
    MatrixXd feats(n, data.d() + (extra ? extra->cols() : 0));
    if (data.d() > 0) feats.leftCols(data.d()) = data.w;
    if (extra) feats.rightCols(extra->cols()) = *extra;

    // E[D | R=1, W, Delta, Delta*Y]: a separate covariate regression per
    // (Delta, Delta*Y) cell, since the conditional mean is not additive across
    // cells and only the subsampled cells drive the variance reduction
    VectorXd outcome = d_init;
    for (Eigen::Index i = 0; i < n; ++i)
        if (!std::isfinite(outcome[i])) outcome[i] = 0.0;
    auto cell_of = [&](Eigen::Index i) {
        return std::make_pair(int(data.delta[i]), data.delta[i] ? data.y[i] : 0.0);
    };
    std::map<std::pair<int, double>, std::vector<Eigen::Index>> cells;
    for (auto i : rows) cells[cell_of(i)].push_back(i);
    VectorXd h = VectorXd::Zero(n);  // cells with no measured rows carry no signal
    // a parsimonious design: H only removes phase-two sampling noise, and an
    // overfit regression adds more variance than the correction saves
    NuisanceConfig hconfig = config;
    hconfig.degree = 1;
    hconfig.covariate_knots = 0;
    hconfig.include_interactions = false;
    for (const auto& [key, fit_rows] : cells) {
        SplineBasis basis = detail::covariate_basis(feats, fit_rows, hconfig, -1);
        const MatrixXd design = spline_design(feats, basis);
        const auto m = static_cast<Eigen::Index>(fit_rows.size());
        VectorXd fit_w(m);
        for (Eigen::Index k = 0; k < m; ++k) fit_w[k] = initial.w[fit_rows[static_cast<std::size_t>(k)]];
        const MatrixXd fit_design = detail::take_rows(design, fit_rows);
        const VectorXd fit_y = detail::take(outcome, fit_rows);
        const VectorXd coef = fit_weighted_linear(fit_design, fit_y, fit_w);
        // covariate slopes only when they beat the cell mean by BIC: a noisy
        // regression leaks the sample's own EIF noise back into the weights
        const double ybar = fit_w.dot(fit_y) / fit_w.sum();
        const double sse0 = fit_w.dot((fit_y.array() - ybar).square().matrix());
        const double sse1 = fit_w.dot((fit_y - fit_design * coef).array().square().matrix());
        const double mm = static_cast<double>(m);
        const bool keep_slopes =
            m > design.cols() && sse1 > 0.0 &&
            mm * std::log(sse1 / mm) + static_cast<double>(design.cols()) * std::log(mm) <
                mm * std::log(sse0 / mm) + std::log(mm);
        const VectorXd pred = keep_slopes ? VectorXd(design * coef)
                                          : VectorXd(VectorXd::Constant(n, ybar));
        for (Eigen::Index i = 0; i < n; ++i)
            if (cell_of(i) == key) h[i] = pred[i];
    }

    // rows sampled with certainty (weight <= 1) keep pi = 1 exactly and stay
    // out of the fluctuation: their score contribution is identically zero
    VectorXd pi(n);
    std::vector<Eigen::Index> free_rows;
    for (Eigen::Index i = 0; i < n; ++i) {
        if (initial.w[i] <= 1.0) {
            pi[i] = 1.0;
        } else {
            pi[i] = std::max(1.0 / initial.w[i], config.bound);
            free_rows.push_back(i);
        }
    }
    const auto m = static_cast<Eigen::Index>(free_rows.size());

    const double tol = 1e-9 * static_cast<double>(n);
    for (int iter = 0; iter < 50 && m > 0; ++iter) {
        double score = 0.0;
        for (auto i : free_rows) score += ((data.r[i] ? 1.0 : 0.0) - pi[i]) * h[i] / pi[i];
        if (std::abs(score) <= tol) break;
        MatrixXd clever(m, 1);
        VectorXd offset(m), rsub(m);
        for (Eigen::Index k = 0; k < m; ++k) {
            const Eigen::Index i = free_rows[static_cast<std::size_t>(k)];
            clever(k, 0) = h[i] / pi[i];
            offset[k] = logit(pi[i]);
            rsub[k] = data.r[i] ? 1.0 : 0.0;
        }
        const LogisticFit fit = fit_weighted_logistic(clever, rsub, VectorXd::Ones(m), offset,
                                                      VectorXd::Zero(1), config.logistic);
        const double eps = fit.coefficients[0];
        for (Eigen::Index k = 0; k < m; ++k) {
            const Eigen::Index i = free_rows[static_cast<std::size_t>(k)];
            pi[i] = std::clamp(expit(logit(pi[i]) + eps * clever(k, 0)), config.bound, 1.0);
        }
        if (std::abs(eps) < 1e-14) break;
    }

    SamplingWeights out;
    out.w.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) out.w[i] = 1.0 / pi[i];
    out.targeted = true;
    out.h = h;
    return out;
}

// diagnostic dump of nuisance evaluations, one row per observation
inline void write_nuisance_csv(const NuisanceFits& fits, std::ostream& out) {
    out << "gv,q,qv,g_miss,gv_miss\n";
    out.precision(17);
    const Eigen::Index n = fits.gv.size();
    auto cell = [&](const VectorXd& v, Eigen::Index i) {
        if (v.size() == n && std::isfinite(v[i])) out << v[i];
    };
    for (Eigen::Index i = 0; i < n; ++i) {
        cell(fits.gv, i); out << ',';
        cell(fits.q, i); out << ',';
        cell(fits.qv, i); out << ',';
        cell(fits.g_miss, i); out << ',';
        cell(fits.gv_miss, i); out << '\n';
    }
}

}  // namespace threshr
