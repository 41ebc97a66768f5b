#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>

#include "threshr/dataset.hpp"
#include "threshr/nuisance.hpp"
#include "threshr/regress.hpp"

namespace threshr {

enum class EstimatorTag { donovan, bin_tmle, sr_tmle, ipw_sr_tmle };

inline const char* tag_name(EstimatorTag tag) {
    switch (tag) {
        case EstimatorTag::donovan: return "donovan";
        case EstimatorTag::bin_tmle: return "bin_tmle";
        case EstimatorTag::sr_tmle: return "sr_tmle";
        case EstimatorTag::ipw_sr_tmle: return "ipw_sr_tmle";
    }
    return "?";
}

struct EstimateDiagnostics {
    double score_y = 0.0;    // (1/n) sum 1(A>=v,D=1)/(gv G) (Y - Q*)
    double score_qv = 0.0;   // (1/n) sum 1(A>=v)/gv (Q* - Qv*)
    double eps_q = 0.0;
    double eps_qv = 0.0;
    bool nuisance_capped = false;
    bool nuisance_degenerate = false;
};

struct ThresholdEstimate {
    double threshold = 0.0;
    double psi = 0.0;
    VectorXd eif;
    double se = 0.0;
    EstimatorTag estimator_tag = EstimatorTag::sr_tmle;
    EstimateDiagnostics diagnostics;
};

struct OutcomeTransform {
    double lo = 0.0;
    double hi = 1.0;
};

namespace detail {

inline double se_from_eif(const VectorXd& eif) {
    const auto n = static_cast<double>(eif.size());
    return std::sqrt(eif.squaredNorm() / n / n);
}

// one-parameter logistic fluctuation with a single clever-covariate column
struct Fluctuation {
    double eps = 0.0;
    bool capped = false;
};

inline Fluctuation fluctuate(const VectorXd& clever, const VectorXd& outcome,
                             const VectorXd& weights, const VectorXd& offset_logit,
                             const LogisticOptions& opts) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < weights.size(); ++i)
        if (weights[i] > 0.0 && clever[i] != 0.0) rows.push_back(i);
    if (rows.empty()) throw EmptyStratum("fluctuation has no support");
    const auto m = static_cast<Eigen::Index>(rows.size());
    MatrixXd x(m, 1);
    VectorXd y(m), w(m), off(m);
    for (Eigen::Index k = 0; k < m; ++k) {
        x(k, 0) = clever[rows[k]];
        y[k] = outcome[rows[k]];
        w[k] = weights[rows[k]];
        off[k] = offset_logit[rows[k]];
    }
    const LogisticFit fit = fit_weighted_logistic(x, y, w, off, VectorXd::Zero(1), opts);
    return Fluctuation{fit.coefficients[0], fit.capped};
}

}  // namespace detail

// Lemma-1 efficient influence function evaluated at one observation. The first
// term vanishes when delta = 0 and the first two when a < v.
inline double eif_adjusted(const Observation& o, double v, double gv, double q_star,
                           double qv_star, double g_miss, double psi) {
    double out = qv_star - psi;
    if (o.r && o.a >= v) {
        out += (q_star - qv_star) / gv;
        if (o.delta) out += (o.y - q_star) / (gv * g_miss);
    }
    return out;
}

// Unadjusted NPMLE with empirical plug-in influence values. The implicit model
// is constant above the threshold, so the EIF collapses to the IPW residual.
inline ThresholdEstimate donovan(const Dataset& data, double v, const VectorXd& weights) {
    const Eigen::Index n = data.n();
    double num = 0.0, den = 0.0, above = 0.0, total = 0.0, miss_num = 0.0, miss_den = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const bool av = data.r[i] && data.a[i] >= v;
        total += weights[i] * (data.r[i] ? 1.0 : 0.0);
        if (av) {
            above += weights[i];
            miss_den += weights[i];
            if (data.delta[i]) {
                miss_num += weights[i];
                num += weights[i] * data.y[i];
                den += weights[i];
            }
        }
    }
    if (den <= 0.0) throw EmptyStratum("no complete cases above threshold");
    ThresholdEstimate est;
    est.threshold = v;
    est.estimator_tag = EstimatorTag::donovan;
    est.psi = num / den;
    const double g_hat = above / total;           // weighted P(A >= v) among measured
    const double gmiss_hat = miss_num / miss_den; // weighted P(Delta=1 | A >= v)
    est.eif.setZero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const bool av = data.r[i] && data.a[i] >= v;
        if (av && data.delta[i])
            est.eif[i] = weights[i] * (data.y[i] - est.psi) / (g_hat * gmiss_hat);
    }
    est.se = detail::se_from_eif(est.eif);
    return est;
}

struct TmleOptions {
    double bound = 0.005;
    LogisticOptions logistic;
    bool error_on_capped_targeting = true;
};

// Sequential-regression TMLE: indicator fluctuation of Q, sequential
// re-regression of the fluctuated Q onto W above the threshold, intercept
// fluctuation of Q_v, then the weighted substitution estimator.
inline ThresholdEstimate sr_tmle(const Dataset& data, double v, const NuisanceFits& fits,
                                 const VectorXd& weights, const TmleOptions& opts = {}) {
    const Eigen::Index n = data.n();
    const VectorXd gv = bound_probability(fits.gv, opts.bound);
    VectorXd g_miss = bound_probability(fits.g_miss, opts.bound);
    // rows with an unmeasured biomarker have no G(a,w) evaluation; they never
    // enter a term that uses it, so any finite placeholder works
    for (Eigen::Index i = 0; i < n; ++i)
        if (!std::isfinite(g_miss[i])) g_miss[i] = 0.5;

    VectorXd av(n), y0(n), q_logit(n), w_q(n);
    bool any_above = false;
    for (Eigen::Index i = 0; i < n; ++i) {
        av[i] = (data.r[i] && data.a[i] >= v) ? 1.0 : 0.0;
        any_above = any_above || av[i] > 0.0;
        const double dlt = data.delta[i] ? 1.0 : 0.0;
        w_q[i] = weights[i] * dlt / (gv[i] * g_miss[i]);
        y0[i] = (data.delta[i] && !std::isnan(data.y[i])) ? data.y[i] : 0.0;
        const double q = (w_q[i] > 0.0 || av[i] > 0.0)
                             ? bound_probability(std::isnan(fits.q[i]) ? 0.5 : fits.q[i], opts.bound)
                             : 0.5;
        q_logit[i] = logit(q);
    }
    if (!any_above) throw EmptyStratum("no measured observations above threshold");

    const auto fl_q = detail::fluctuate(av, y0, w_q, q_logit, opts.logistic);
    if (fl_q.capped && opts.error_on_capped_targeting)
        throw TargetingDiverged("Q fluctuation hit the coefficient cap");
    VectorXd q_star(n);
    for (Eigen::Index i = 0; i < n; ++i) q_star[i] = expit(q_logit[i] + fl_q.eps * av[i]);

    VectorXd qv = fits.refit_qv(q_star);
    VectorXd qv_logit(n), w_qv(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        qv_logit[i] = logit(bound_probability(qv[i], opts.bound));
        w_qv[i] = weights[i] * av[i] / gv[i];
    }
    const auto fl_qv =
        detail::fluctuate(VectorXd::Ones(n), q_star, w_qv, qv_logit, opts.logistic);
    if (fl_qv.capped && opts.error_on_capped_targeting)
        throw TargetingDiverged("Q_v fluctuation hit the coefficient cap");
    VectorXd qv_star(n);
    for (Eigen::Index i = 0; i < n; ++i) qv_star[i] = expit(qv_logit[i] + fl_qv.eps);

    ThresholdEstimate est;
    est.threshold = v;
    est.estimator_tag = EstimatorTag::sr_tmle;
    est.psi = qv_star.dot(weights) / weights.sum();
    est.eif.resize(n);
    double s_y = 0.0, s_qv = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double dlt = data.delta[i] ? 1.0 : 0.0;
        const double term_y = dlt * av[i] / (gv[i] * g_miss[i]) * (y0[i] - q_star[i]);
        const double term_a = av[i] / gv[i] * (q_star[i] - qv_star[i]);
        est.eif[i] = weights[i] * (term_y + term_a + qv_star[i] - est.psi);
        s_y += weights[i] * term_y;
        s_qv += weights[i] * term_a;
    }
    est.se = detail::se_from_eif(est.eif);
    est.diagnostics.score_y = s_y / static_cast<double>(n);
    est.diagnostics.score_qv = s_qv / static_cast<double>(n);
    est.diagnostics.eps_q = fl_q.eps;
    est.diagnostics.eps_qv = fl_qv.eps;
    est.diagnostics.nuisance_capped = fits.any_capped || fl_q.capped || fl_qv.capped;
    est.diagnostics.nuisance_degenerate = fits.any_degenerate;
    return est;
}

// Binary treatment-specific-mean TMLE on the coarsened structure (W, 1(A>=v),
// Delta, Delta*Y). Consistent only when missingness ignores A above v.
inline ThresholdEstimate bin_tmle(const Dataset& data, double v, const NuisanceFits& fits,
                                  const VectorXd& weights, const TmleOptions& opts = {}) {
    const Eigen::Index n = data.n();
    const VectorXd gv = bound_probability(fits.gv, opts.bound);
    const VectorXd gv_miss = bound_probability(fits.gv_miss, opts.bound);

    VectorXd av(n), y0(n), qv_logit(n), w_fl(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        av[i] = (data.r[i] && data.a[i] >= v) ? 1.0 : 0.0;
        const double dlt = data.delta[i] ? 1.0 : 0.0;
        y0[i] = (data.delta[i] && !std::isnan(data.y[i])) ? data.y[i] : 0.0;
        w_fl[i] = weights[i] * dlt * av[i] / (gv_miss[i] * gv[i]);
        qv_logit[i] = logit(bound_probability(fits.qv[i], opts.bound));
    }
    const auto fl = detail::fluctuate(VectorXd::Ones(n), y0, w_fl, qv_logit, opts.logistic);
    if (fl.capped && opts.error_on_capped_targeting)
        throw TargetingDiverged("binTMLE fluctuation hit the coefficient cap");
    VectorXd qv_star(n);
    for (Eigen::Index i = 0; i < n; ++i) qv_star[i] = expit(qv_logit[i] + fl.eps);

    ThresholdEstimate est;
    est.threshold = v;
    est.estimator_tag = EstimatorTag::bin_tmle;
    est.psi = qv_star.dot(weights) / weights.sum();
    est.eif.resize(n);
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double dlt = data.delta[i] ? 1.0 : 0.0;
        const double term = dlt * av[i] / (gv[i] * gv_miss[i]) * (y0[i] - qv_star[i]);
        est.eif[i] = weights[i] * (term + qv_star[i] - est.psi);
        s += weights[i] * term;
    }
    est.se = detail::se_from_eif(est.eif);
    est.diagnostics.score_y = s / static_cast<double>(n);
    est.diagnostics.eps_qv = fl.eps;
    est.diagnostics.nuisance_capped = fits.any_capped || fl.capped;
    est.diagnostics.nuisance_degenerate = fits.any_degenerate;
    return est;
}

// IPW-srTMLE for biomarker missingness. With target_weights the inclusion
// probabilities are fluctuated first and the modified (efficient) influence
// function R w D - (R w - 1) H is reported; otherwise the inefficient R w D.
inline ThresholdEstimate ipw_sr_tmle(const Dataset& data, double v, const NuisanceFits& fits,
                                     const SamplingWeights& sw, bool target_weights,
                                     const NuisanceConfig& config = {},
                                     const TmleOptions& opts = {}) {
    const Eigen::Index n = data.n();
    VectorXd rw(n);
    for (Eigen::Index i = 0; i < n; ++i) rw[i] = data.r[i] ? data.weight[i] * sw.w[i] : 0.0;

    ThresholdEstimate base = sr_tmle(data, v, fits, rw, opts);
    if (!target_weights) {
        base.estimator_tag = EstimatorTag::ipw_sr_tmle;
        return base;
    }

    // unweighted EIF evaluations among measured rows seed the H regression
    VectorXd d_init(n);
    for (Eigen::Index i = 0; i < n; ++i)
        d_init[i] = (rw[i] > 0.0) ? base.eif[i] / rw[i] : 0.0;

    // fitted nuisance evaluations are strong predictors of the EIF given
    // (W, Delta, Delta*Y); feed them to the H regression as derived features
    const VectorXd qv_hat = fits.refit_qv ? fits.refit_qv(fits.q) : VectorXd();
    std::vector<const VectorXd*> derived;
    for (const VectorXd* f : {&qv_hat, &fits.qv, &fits.gv})
        if (f->size() == n && f->allFinite()) derived.push_back(f);
    MatrixXd extra(n, static_cast<Eigen::Index>(derived.size()));
    for (std::size_t j = 0; j < derived.size(); ++j)
        extra.col(static_cast<Eigen::Index>(j)) = *derived[j];
    const SamplingWeights targeted =
        target_sampling_weights(data, sw, d_init, config, extra.cols() > 0 ? &extra : nullptr);
    VectorXd rw_star(n);
    for (Eigen::Index i = 0; i < n; ++i)
        rw_star[i] = data.r[i] ? data.weight[i] * targeted.w[i] : 0.0;

    ThresholdEstimate est = sr_tmle(data, v, fits, rw_star, opts);
    est.estimator_tag = EstimatorTag::ipw_sr_tmle;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double d = (rw_star[i] > 0.0) ? est.eif[i] / rw_star[i] : 0.0;
        const double rwi = data.r[i] ? targeted.w[i] : 0.0;
        est.eif[i] = rwi * d * (data.r[i] ? data.weight[i] : 1.0) -
                     (rwi * (data.r[i] ? data.weight[i] : 1.0) - 1.0) * targeted.h[i];
    }
    est.se = detail::se_from_eif(est.eif);
    return est;
}

// affine outcome transform to [0,1] and back
inline Dataset scale_outcome(const Dataset& data, const OutcomeTransform& t) {
    if (!(t.lo < t.hi)) throw OutOfRangeOutcome("invalid outcome range");
    Dataset out = data;
    for (Eigen::Index i = 0; i < out.n(); ++i) {
        if (!out.delta[i]) continue;
        if (out.y[i] < t.lo || out.y[i] > t.hi)
            throw OutOfRangeOutcome("outcome outside [lo,hi] at row " + std::to_string(i));
        out.y[i] = (out.y[i] - t.lo) / (t.hi - t.lo);
    }
    out.outcome_kind.binary = false;
    out.outcome_kind.lo = 0.0;
    out.outcome_kind.hi = 1.0;
    return out;
}

inline ThresholdEstimate unscale_estimate(ThresholdEstimate est, const OutcomeTransform& t) {
    const double span = t.hi - t.lo;
    est.psi = t.lo + span * est.psi;
    est.se *= span;
    est.eif *= span;
    return est;
}

}  // namespace threshr
