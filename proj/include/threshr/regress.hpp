#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <vector>

#include "threshr/errors.hpp"
#include "threshr/stats.hpp"

namespace threshr {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct LogisticOptions {
    double tol = 1e-10;       // on the score sup-norm, scaled by the total weight
    int max_iter = 100;
    double coef_cap = 30.0;   // separation guard
};

struct LogisticFit {
    VectorXd coefficients;
    bool converged = false;
    bool capped = false;
    int iterations = 0;
    double final_gradient_norm = 0.0;
};

namespace detail {

inline void check_finite(const MatrixXd& m, const char* what) {
    if (!m.allFinite()) throw NonFiniteInput(std::string("non-finite values in ") + what);
}

inline double weighted_loglik(const VectorXd& y, const VectorXd& w, const VectorXd& eta) {
    double ll = 0.0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
        if (w[i] == 0.0) continue;
        const double e = eta[i];
        // y*log(p) + (1-y)*log(1-p) = y*eta - log(1+exp(eta))
        const double log1pe = (e > 0) ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
        ll += w[i] * (y[i] * e - log1pe);
    }
    return ll;
}

}  // namespace detail

// Weighted logistic regression with offset via iteratively reweighted least
// squares. Outcomes may be fractional in [0,1]. A fit that runs into
// separation is clamped at the coefficient cap and flagged non-converged.
inline LogisticFit fit_weighted_logistic(const MatrixXd& design, const VectorXd& y,
                                         const VectorXd& weights, const VectorXd& offset,
                                         const VectorXd& start,
                                         const LogisticOptions& opts = {}) {
    const Eigen::Index n = design.rows(), p = design.cols();
    if (y.size() != n || weights.size() != n || offset.size() != n || start.size() != p)
        throw DimensionMismatch("fit_weighted_logistic: dimension mismatch");
    detail::check_finite(design, "design");
    detail::check_finite(y, "y");
    detail::check_finite(weights, "weights");
    detail::check_finite(offset, "offset");
    if ((weights.array() < 0.0).any()) throw NonFiniteInput("negative weights");
    const double wsum = weights.sum();
    if (wsum <= 0.0) throw NonFiniteInput("all weights zero");
    if ((y.array() < 0.0).any() || (y.array() > 1.0).any())
        throw NonFiniteInput("y outside [0,1]");

    LogisticFit fit;
    fit.coefficients = start;
    const double score_tol = opts.tol * std::max(1.0, wsum);

    VectorXd eta = offset + design * fit.coefficients;
    VectorXd prob(n);
    double ll = 0.0;
    auto refresh = [&]() {
        for (Eigen::Index i = 0; i < n; ++i) prob[i] = expit(eta[i]);
        ll = detail::weighted_loglik(y, weights, eta);
    };
    refresh();

    for (int iter = 1; iter <= opts.max_iter; ++iter) {
        fit.iterations = iter;
        const VectorXd resid = (y - prob).cwiseProduct(weights);
        const VectorXd score = design.transpose() * resid;
        fit.final_gradient_norm = score.lpNorm<Eigen::Infinity>();
        if (fit.final_gradient_norm <= score_tol) {
            fit.converged = true;
            return fit;
        }
        VectorXd irls_w(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double v = prob[i] * (1.0 - prob[i]);
            irls_w[i] = weights[i] * std::max(v, 1e-12);
        }
        // rank-revealing solve of the p x p normal equations (p is small)
        const MatrixXd xtwx = design.transpose() * irls_w.asDiagonal() * design;
        Eigen::ColPivHouseholderQR<MatrixXd> qr(xtwx);
        qr.setThreshold(1e-10);
        if (qr.rank() < p) throw SingularSystem("rank-deficient weighted normal equations");
        const VectorXd step = qr.solve(score);
        if (!step.allFinite()) throw SingularSystem("non-finite IRLS step");
        // step-halving keeps the weighted log-likelihood non-decreasing
        double scale = 1.0;
        VectorXd cand;
        for (int h = 0; h < 40; ++h) {
            cand = fit.coefficients + scale * step;
            eta = offset + design * cand;
            const double ll_new = detail::weighted_loglik(y, weights, eta);
            if (ll_new >= ll - 1e-12 * std::abs(ll)) break;
            scale *= 0.5;
        }
        fit.coefficients = cand;
        if (fit.coefficients.lpNorm<Eigen::Infinity>() > opts.coef_cap) {
            for (Eigen::Index j = 0; j < p; ++j)
                fit.coefficients[j] = std::clamp(fit.coefficients[j], -opts.coef_cap, opts.coef_cap);
            eta = offset + design * fit.coefficients;
            refresh();
            const VectorXd s = design.transpose() * ((y - prob).cwiseProduct(weights));
            fit.final_gradient_norm = s.lpNorm<Eigen::Infinity>();
            fit.capped = true;
            fit.converged = false;
            return fit;
        }
        refresh();
    }
    const VectorXd s = design.transpose() * ((y - prob).cwiseProduct(weights));
    fit.final_gradient_norm = s.lpNorm<Eigen::Infinity>();
    fit.converged = fit.final_gradient_norm <= score_tol;
    return fit;
}

// weighted least squares, minimum-norm solution on deficient designs
inline VectorXd fit_weighted_linear(const MatrixXd& design, const VectorXd& y,
                                    const VectorXd& weights) {
    detail::check_finite(design, "design");
    detail::check_finite(y, "y");
    detail::check_finite(weights, "weights");
    const VectorXd sw = weights.array().sqrt();
    const MatrixXd xs = sw.asDiagonal() * design;
    const VectorXd ys = sw.cwiseProduct(y);
    return xs.completeOrthogonalDecomposition().solve(ys);
}

struct SplineBasis {
    std::vector<std::vector<double>> knots;  // one strictly increasing vector per covariate
    int degree = 1;
    bool include_interactions = false;
};

// Truncated-power basis. degree 0 gives step indicators 1(w >= k); degree d >= 1
// gives monomials w^1..w^d followed by hinge terms (w-k)_+^d. Column order is
// intercept, covariate blocks in input order, then optional pairwise products
// of the raw covariates.
inline MatrixXd spline_design(const MatrixXd& w, const SplineBasis& basis) {
    detail::check_finite(w, "covariates");
    const Eigen::Index n = w.rows(), d = w.cols();
    if (basis.knots.size() != static_cast<std::size_t>(d))
        throw DimensionMismatch("spline basis covariate count mismatch");
    Eigen::Index cols = 1;
    for (Eigen::Index j = 0; j < d; ++j) {
        cols += (basis.degree >= 1 ? basis.degree : 0) +
                static_cast<Eigen::Index>(basis.knots[j].size());
    }
    if (basis.include_interactions) cols += d * (d - 1) / 2;
    MatrixXd out(n, cols);
    out.col(0).setOnes();
    Eigen::Index c = 1;
    for (Eigen::Index j = 0; j < d; ++j) {
        for (int k = 1; k <= basis.degree; ++k) out.col(c++) = w.col(j).array().pow(k);
        for (double knot : basis.knots[j]) {
            if (basis.degree == 0) {
                out.col(c++) = (w.col(j).array() >= knot).cast<double>();
            } else {
                out.col(c++) = (w.col(j).array() - knot).max(0.0).pow(basis.degree);
            }
        }
    }
    if (basis.include_interactions) {
        for (Eigen::Index j = 0; j < d; ++j)
            for (Eigen::Index k = j + 1; k < d; ++k)
                out.col(c++) = w.col(j).cwiseProduct(w.col(k));
    }
    return out;
}

// Interior type-1 quantile knots for one covariate; duplicates and knots at the
// observed extremes are dropped so hinge columns stay linearly independent.
inline std::vector<double> quantile_knots(std::vector<double> values, int count) {
    if (values.empty() || count <= 0) return {};
    std::sort(values.begin(), values.end());
    const double lo = values.front(), hi = values.back();
    std::vector<double> knots;
    for (int i = 1; i <= count; ++i) {
        const double q = quantile_type1_sorted(values, static_cast<double>(i) / (count + 1));
        if (q > lo && q < hi && (knots.empty() || q > knots.back())) knots.push_back(q);
    }
    return knots;
}

inline double bound_probability(double p, double bound) {
    return std::clamp(p, bound, 1.0 - bound);
}

inline VectorXd bound_probability(VectorXd p, double bound) {
    for (Eigen::Index i = 0; i < p.size(); ++i) p[i] = bound_probability(p[i], bound);
    return p;
}

}  // namespace threshr
