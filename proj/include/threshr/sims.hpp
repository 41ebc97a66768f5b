#pragma once

#include <Eigen/Dense>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "threshr/dataset.hpp"
#include "threshr/estimators.hpp"
#include "threshr/inference.hpp"
#include "threshr/nuisance.hpp"
#include "threshr/stats.hpp"

namespace threshr {

inline int thread_count() {
    if (const char* env = std::getenv("THRESHOLD_TMLE_THREADS")) {
        const int v = std::atoi(env);
        if (v > 0) return v;
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return hc ? static_cast<int>(hc) : 1;
}

enum class DgpFamily { sim1, sim2, confounding, coverage_d, biased_sampling };

inline const char* family_name(DgpFamily f) {
    switch (f) {
        case DgpFamily::sim1: return "sim1";
        case DgpFamily::sim2: return "sim2";
        case DgpFamily::confounding: return "confounding";
        case DgpFamily::coverage_d: return "coverage_d";
        case DgpFamily::biased_sampling: return "biased_sampling";
    }
    return "?";
}

inline DgpFamily parse_family(const std::string& s) {
    if (s == "sim1") return DgpFamily::sim1;
    if (s == "sim2") return DgpFamily::sim2;
    if (s == "confounding") return DgpFamily::confounding;
    if (s == "coverage_d") return DgpFamily::coverage_d;
    if (s == "biased_sampling") return DgpFamily::biased_sampling;
    throw UnknownFamily("unknown design: " + s);
}

struct DgpSpec {
    DgpFamily family = DgpFamily::sim1;
    Eigen::Index n = 1000;
    std::uint64_t seed = 0;
    double sin_const = 0.0;          // nonlinearity switch (outcome for sim1, missingness for sim2)
    double offset = 0.0;             // sim1/sim2 outcome intercept shift
    double confound = 0.9375;        // confounder coefficient, confounding family
    bool delta_always_one = false;   // drop outcome missingness (sim1/sim2 variants)
};

namespace detail {

inline double norm_pdf(double z) { return std::exp(-0.5 * z * z) / std::sqrt(2.0 * M_PI); }

// truncated-normal density on [a,b]
inline double truncnorm_pdf(double x, double a, double b, double mean, double sd) {
    if (x < a || x > b) return 0.0;
    const double z = norm_cdf((b - mean) / sd) - norm_cdf((a - mean) / sd);
    return norm_pdf((x - mean) / sd) / (sd * z);
}

// Gamma(shape=3, rate) survival function, closed form for the integer shape
inline double gamma3_survival(double x, double rate) {
    if (x <= 0.0) return 1.0;
    const double t = rate * x;
    return std::exp(-t) * (1.0 + t + 0.5 * t * t);
}

inline double gamma3_quantile(double p, double rate) {
    double lo = 0.0, hi = 1.0;
    while (1.0 - gamma3_survival(hi, rate) < p) hi *= 2.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (1.0 - gamma3_survival(mid, rate) < p) lo = mid; else hi = mid;
    }
    return 0.5 * (lo + hi);
}

struct Sim12Consts {
    static constexpr double w1_lo = -0.75, w1_hi = 1.5, w1_mean = 0.5, w1_sd = 0.75;
    static constexpr double p_w2 = 0.6, p_w3 = 0.3;
    static constexpr double a_lo = 0.0, a_hi = 2.0, a_sd = 0.5;
    static double a_mean(double w1, double w2, double w3) {
        return (0.8 + w1 + (w2 + w3) / 2.0) / 2.0;
    }
};

inline double sim12_risk(const DgpSpec& spec, double a, double w1, double w2, double w3) {
    // sim2 fixes the outcome model at the rare-event nonlinear setting; its
    // sin_const only steers the missingness mechanism
    const double off = (spec.family == DgpFamily::sim2) ? -3.0 : spec.offset;
    const double sin_term = (spec.family == DgpFamily::sim2) ? 1.0 : spec.sin_const;
    return expit(off + 0.75 * w1 - 0.2 + 0.5 * (w2 + w3) - a +
                 sin_term * 2.0 * std::sin(6.0 * a));
}

inline double sim12_obs_prob(const DgpSpec& spec, double a, double w1, double w2, double w3) {
    if (spec.delta_always_one) return 1.0;
    if (spec.family == DgpFamily::sim1) return expit(-1.0 + w1 + w2 + w3);
    return expit(-1.0 + a + spec.sin_const * 2.0 * std::sin(6.0 * a) + w1 + (w2 + w3) / 2.0);
}

inline double confound_link(double a, double w1, double w2, double c) {
    return expit(-1.0 - 1.3 * a - std::exp(a) - 2.0 * a * a + w1 - 0.25 * a * w1 + c * w2);
}

// mean of the confounding-family link over (W1, W2, A | W2) by quadrature; the
// event probability is linear in the scale constant, so matching a target
// marginal risk is a one-step root-find
inline double confound_mean_link(double c) {
    static const QuadRule qw = gauss_legendre(24, 0.0, 1.0);
    double total = 0.0;
    for (std::size_t i = 0; i < qw.nodes.size(); ++i) {
        const double w1 = qw.nodes[i];
        for (std::size_t j = 0; j < qw.nodes.size(); ++j) {
            const double w2 = qw.nodes[j];
            const double mu = -0.6 * w2, sd = 0.3;
            const QuadRule qa = gauss_legendre(48, mu - 8.0 * sd, mu + 8.0 * sd);
            double inner = 0.0;
            for (std::size_t k = 0; k < qa.nodes.size(); ++k)
                inner += qa.weights[k] * confound_link(qa.nodes[k], w1, w2, c) *
                         norm_pdf((qa.nodes[k] - mu) / sd) / sd;
            total += qw.weights[i] * qw.weights[j] * inner;
        }
    }
    return total;
}

inline double biased_risk(double a, double w1, double w2, double w3) {
    return expit(-4.7 + 0.7 * (0.7 * (0.5 - 1.5 * a + 0.25 * (w1 + w2 + w3) +
                                      std::sin(3.0 * w1) + std::sin(3.0 * w2) +
                                      std::log(1.0 + w3) + 2.0 * w1 * std::sin(3.0 * w2) +
                                      2.0 * w2 * std::sin(3.0 * w1) + w3 * std::sin(3.0 * w1) +
                                      w3 * (a - 0.4) + w3 * std::cos(3.0 * w1))));
}

inline constexpr double kBiasedGammaRate = 13.0;
inline constexpr double kBiasedControlSample = 0.1;  // P(R=1 | no event)

}  // namespace detail

// outcome-scale constant for the confounding family so P(Y=1) hits target_risk
inline double confounding_scale(double c, double target_risk = 0.04) {
    return target_risk / (0.1 * detail::confound_mean_link(c));
}

inline Dataset generate(const DgpSpec& spec) {
    if (spec.n < 1) throw EmptyDataset("nonpositive sample size");
    Rng rng(spec.seed);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    Dataset data;
    data.outcome_kind.binary = true;

    switch (spec.family) {
        case DgpFamily::sim1:
        case DgpFamily::sim2: {
            using C = detail::Sim12Consts;
            data.covariate_names = {"w1", "w2", "w3"};
            data.w.resize(spec.n, 3);
            data.a.resize(spec.n);
            data.y.resize(spec.n);
            data.weight = VectorXd::Ones(spec.n);
            data.r.assign(spec.n, 1);
            data.delta.resize(spec.n);
            for (Eigen::Index i = 0; i < spec.n; ++i) {
                const double w1 =
                    truncated_normal_sample(C::w1_lo, C::w1_hi, C::w1_mean, C::w1_sd, rng);
                const double w2 = uniform01(rng) < C::p_w2 ? 1.0 : 0.0;
                const double w3 = uniform01(rng) < C::p_w3 ? 1.0 : 0.0;
                const double a = truncated_normal_sample(C::a_lo, C::a_hi,
                                                         C::a_mean(w1, w2, w3), C::a_sd, rng);
                const double y = uniform01(rng) < detail::sim12_risk(spec, a, w1, w2, w3) ? 1.0 : 0.0;
                const bool obs =
                    uniform01(rng) < detail::sim12_obs_prob(spec, a, w1, w2, w3);
                data.w.row(i) << w1, w2, w3;
                data.a[i] = a;
                data.delta[i] = obs ? 1 : 0;
                data.y[i] = obs ? y : nan;
            }
            break;
        }
        case DgpFamily::confounding:
        case DgpFamily::coverage_d: {
            const double c = (spec.family == DgpFamily::coverage_d) ? 0.9375 : spec.confound;
            const double scale = confounding_scale(c);
            data.covariate_names = {"w1", "w2"};
            data.w.resize(spec.n, 2);
            data.a.resize(spec.n);
            data.y.resize(spec.n);
            data.weight = VectorXd::Ones(spec.n);
            data.r.assign(spec.n, 1);
            data.delta.assign(spec.n, 1);
            for (Eigen::Index i = 0; i < spec.n; ++i) {
                const double w1 = uniform01(rng);
                const double w2 = uniform01(rng);
                const double a = -0.6 * w2 + 0.3 * normal_draw(rng);
                const double p = scale * 0.1 * detail::confound_link(a, w1, w2, c);
                data.w.row(i) << w1, w2;
                data.a[i] = a;
                data.y[i] = uniform01(rng) < p ? 1.0 : 0.0;
            }
            break;
        }
        case DgpFamily::biased_sampling: {
            data.covariate_names = {"w1", "w2", "w3"};
            data.w.resize(spec.n, 3);
            data.a.resize(spec.n);
            data.y.resize(spec.n);
            data.weight = VectorXd::Ones(spec.n);
            data.r.resize(spec.n);
            data.delta.assign(spec.n, 1);
            for (Eigen::Index i = 0; i < spec.n; ++i) {
                const double w1 = 2.0 * uniform01(rng) - 1.0;
                const double w2 = 2.0 * uniform01(rng) - 1.0;
                const double w3 = -std::log(uniform01(rng));
                const double a = -(std::log(uniform01(rng)) + std::log(uniform01(rng)) +
                                   std::log(uniform01(rng))) /
                                 detail::kBiasedGammaRate;
                const double y = uniform01(rng) < detail::biased_risk(a, w1, w2, w3) ? 1.0 : 0.0;
                const double u_r = uniform01(rng);
                const bool measured = spec.delta_always_one || y == 1.0 ||
                                      u_r < detail::kBiasedControlSample;
                data.w.row(i) << w1, w2, w3;
                data.r[i] = measured ? 1 : 0;
                data.a[i] = measured ? a : nan;
                data.y[i] = y;
            }
            break;
        }
    }
    data.validate();
    return data;
}

namespace detail {

// true P(Y=1 | A=a, W=w) under the spec
inline double true_risk(const DgpSpec& spec, double a, const VectorXd& w) {
    switch (spec.family) {
        case DgpFamily::sim1:
        case DgpFamily::sim2:
            return sim12_risk(spec, a, w[0], w[1], w[2]);
        case DgpFamily::confounding:
        case DgpFamily::coverage_d: {
            const double c = (spec.family == DgpFamily::coverage_d) ? 0.9375 : spec.confound;
            static thread_local double cached_c = std::numeric_limits<double>::quiet_NaN();
            static thread_local double cached_scale = 0.0;
            if (c != cached_c) {
                cached_scale = confounding_scale(c);
                cached_c = c;
            }
            return cached_scale * 0.1 * confound_link(a, w[0], w[1], c);
        }
        case DgpFamily::biased_sampling:
            return biased_risk(a, w[0], w[1], w[2]);
    }
    throw UnknownFamily("true_risk");
}

// true P(A >= v | W = w)
inline double true_gv(const DgpSpec& spec, double v, const VectorXd& w) {
    switch (spec.family) {
        case DgpFamily::sim1:
        case DgpFamily::sim2: {
            using C = Sim12Consts;
            return 1.0 - truncated_normal_cdf(v, C::a_lo, C::a_hi, C::a_mean(w[0], w[1], w[2]),
                                              C::a_sd);
        }
        case DgpFamily::confounding:
        case DgpFamily::coverage_d:
            return 1.0 - norm_cdf((v + 0.6 * w[1]) / 0.3);
        case DgpFamily::biased_sampling:
            return gamma3_survival(v, kBiasedGammaRate);  // A independent of W
    }
    throw UnknownFamily("true_gv");
}

// true E[Y | A >= v, W = w] by quadrature over the conditional biomarker law
inline double true_qv(const DgpSpec& spec, double v, const VectorXd& w, int nodes = 80) {
    double lo = v, hi = 0.0;
    std::function<double(double)> pdf;
    switch (spec.family) {
        case DgpFamily::sim1:
        case DgpFamily::sim2: {
            using C = Sim12Consts;
            const double m = C::a_mean(w[0], w[1], w[2]);
            hi = C::a_hi;
            pdf = [m](double a) { return truncnorm_pdf(a, C::a_lo, C::a_hi, m, C::a_sd); };
            break;
        }
        case DgpFamily::confounding:
        case DgpFamily::coverage_d: {
            const double mu = -0.6 * w[1], sd = 0.3;
            hi = mu + 10.0 * sd;
            pdf = [mu, sd](double a) { return norm_pdf((a - mu) / sd) / sd; };
            break;
        }
        case DgpFamily::biased_sampling: {
            hi = gamma3_quantile(1.0 - 1e-10, kBiasedGammaRate);
            const double r = kBiasedGammaRate;
            pdf = [r](double a) {
                return a <= 0.0 ? 0.0 : 0.5 * r * r * r * a * a * std::exp(-r * a);
            };
            break;
        }
    }
    if (!(hi > lo)) throw DegenerateGrid("threshold above the biomarker support");
    const QuadRule qa = gauss_legendre(nodes, lo, hi);
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < qa.nodes.size(); ++k) {
        const double d = qa.weights[k] * pdf(qa.nodes[k]);
        num += d * true_risk(spec, qa.nodes[k], w);
        den += d;
    }
    if (den <= 0.0) throw DegenerateGrid("no biomarker mass above threshold");
    return num / den;
}

// iterate a function over quadrature nodes/probabilities of the W distribution
inline void for_each_w(const DgpSpec& spec, const std::function<void(const VectorXd&, double)>& f) {
    switch (spec.family) {
        case DgpFamily::sim1:
        case DgpFamily::sim2: {
            using C = Sim12Consts;
            const QuadRule q1 = gauss_legendre(64, C::w1_lo, C::w1_hi);
            const double pw2[2] = {1.0 - C::p_w2, C::p_w2};
            const double pw3[2] = {1.0 - C::p_w3, C::p_w3};
            VectorXd w(3);
            for (std::size_t i = 0; i < q1.nodes.size(); ++i) {
                const double dens =
                    truncnorm_pdf(q1.nodes[i], C::w1_lo, C::w1_hi, C::w1_mean, C::w1_sd);
                for (int b2 = 0; b2 < 2; ++b2)
                    for (int b3 = 0; b3 < 2; ++b3) {
                        w << q1.nodes[i], double(b2), double(b3);
                        f(w, q1.weights[i] * dens * pw2[b2] * pw3[b3]);
                    }
            }
            break;
        }
        case DgpFamily::confounding:
        case DgpFamily::coverage_d: {
            const QuadRule q = gauss_legendre(32, 0.0, 1.0);
            VectorXd w(2);
            for (std::size_t i = 0; i < q.nodes.size(); ++i)
                for (std::size_t j = 0; j < q.nodes.size(); ++j) {
                    w << q.nodes[i], q.nodes[j];
                    f(w, q.weights[i] * q.weights[j]);
                }
            break;
        }
        case DgpFamily::biased_sampling: {
            const QuadRule qu = gauss_legendre(24, -1.0, 1.0);
            const QuadRule qe = gauss_legendre(48, 0.0, 30.0);
            VectorXd w(3);
            for (std::size_t i = 0; i < qu.nodes.size(); ++i)
                for (std::size_t j = 0; j < qu.nodes.size(); ++j)
                    for (std::size_t k = 0; k < qe.nodes.size(); ++k) {
                        w << qu.nodes[i], qu.nodes[j], qe.nodes[k];
                        f(w, 0.25 * qu.weights[i] * qu.weights[j] * qe.weights[k] *
                                 std::exp(-qe.nodes[k]));
                    }
            break;
        }
    }
}

}  // namespace detail

// population threshold-response by nested quadrature; no fitted models involved
inline VectorXd true_psi_quadrature(const DgpSpec& spec, const std::vector<double>& grid) {
    VectorXd psi = VectorXd::Zero(static_cast<Eigen::Index>(grid.size()));
    double mass = 0.0;
    detail::for_each_w(spec, [&](const VectorXd& w, double p) {
        mass += p;
        for (std::size_t j = 0; j < grid.size(); ++j)
            psi[static_cast<Eigen::Index>(j)] += p * detail::true_qv(spec, grid[j], w);
    });
    return psi / mass;  // quadrature mass normalizes to 1 up to truncation error
}

// Mega-sample plug-in cross-check: E[ risk(A,W) 1(A>=v) / P(A>=v | W) ] over
// N full-data draws, using the closed-form biomarker survival function.
inline VectorXd true_psi_megasample(const DgpSpec& spec, const std::vector<double>& grid,
                                    Eigen::Index N = 2000000, std::uint64_t seed = 12345) {
    DgpSpec mega = spec;
    mega.n = N;
    mega.seed = seed;
    mega.delta_always_one = true;
    const Dataset data = generate(mega);
    VectorXd psi = VectorXd::Zero(static_cast<Eigen::Index>(grid.size()));
    VectorXd w_row;
    for (Eigen::Index i = 0; i < N; ++i) {
        w_row = data.w.row(i).transpose();
        // use the true event probability rather than the realized outcome: same
        // mean, far less MC noise
        const double a = data.a[i];
        const double risk = detail::true_risk(spec, a, w_row);
        for (std::size_t j = 0; j < grid.size(); ++j) {
            if (a >= grid[j])
                psi[static_cast<Eigen::Index>(j)] +=
                    risk / detail::true_gv(spec, grid[j], w_row);
        }
    }
    return psi / static_cast<double>(N);
}

struct TruthResult {
    VectorXd psi;
    std::string provenance;  // "quadrature" or "mega_sample(N)"
};

inline TruthResult true_psi(const DgpSpec& spec, const std::vector<double>& grid) {
    TruthResult out;
    out.psi = true_psi_quadrature(spec, grid);
    out.provenance = "quadrature";
    return out;
}

// marginal biomarker quantile of the DGP (for fixed population threshold grids)
inline double marginal_biomarker_quantile(const DgpSpec& spec, double p) {
    switch (spec.family) {
        case DgpFamily::biased_sampling:
            return detail::gamma3_quantile(p, detail::kBiasedGammaRate);
        default: {
            // invert the marginal CDF obtained by integrating A | W over W;
            // clamp to a tiny interior probability so tail quantiles of the
            // unbounded families stay finite
            p = std::clamp(p, 1e-6, 1.0 - 1e-6);
            auto cdf = [&](double x) {
                double total = 0.0, mass = 0.0;
                detail::for_each_w(spec, [&](const VectorXd& w, double pw) {
                    mass += pw;
                    total += pw * (1.0 - detail::true_gv(spec, x, w));
                });
                return total / mass;
            };
            double lo = -10.0, hi = 10.0;
            for (int it = 0; it < 100; ++it) {
                const double mid = 0.5 * (lo + hi);
                if (cdf(mid) < p) lo = mid; else hi = mid;
            }
            return 0.5 * (lo + hi);
        }
    }
}

inline std::vector<double> default_grid(const DgpSpec& spec) {
    switch (spec.family) {
        case DgpFamily::sim1:
        case DgpFamily::sim2: {
            std::vector<double> g;
            for (int j = 0; j < 10; ++j) g.push_back(0.2 * j);
            return g;
        }
        case DgpFamily::confounding:
            return {marginal_biomarker_quantile(spec, 0.5)};
        case DgpFamily::coverage_d: {
            std::vector<double> g;
            for (int j = 0; j <= 5; ++j)
                g.push_back(marginal_biomarker_quantile(spec, 0.1 * j));
            return g;
        }
        case DgpFamily::biased_sampling:
            return {marginal_biomarker_quantile(spec, 0.5)};
    }
    throw UnknownFamily("default_grid");
}

// Relative efficiency loss of the coarsened influence function versus the full
// one, both evaluated with the true nuisance functions at N fresh draws.
inline VectorXd efficiency_loss(const DgpSpec& spec, const std::vector<double>& grid,
                                Eigen::Index N = 1000000, std::uint64_t seed = 777) {
    if (spec.family != DgpFamily::sim1 && spec.family != DgpFamily::sim2)
        throw UnknownFamily("efficiency loss requires closed-form nuisances (sim1/sim2)");
    DgpSpec draw = spec;
    draw.n = N;
    draw.seed = seed;
    const Dataset data = generate(draw);
    const VectorXd psi = true_psi_quadrature(spec, grid);

    const auto k = static_cast<Eigen::Index>(grid.size());
    // Every nuisance depends on W only through (w1, w2 + w3), so tabulate
    // Q_v(w) and the coarse missingness propensity P(Delta=1 | A >= v, W) on a
    // fine w1 grid per threshold and interpolate linearly.
    using C = detail::Sim12Consts;
    constexpr int M = 257;
    const double step = (C::w1_hi - C::w1_lo) / (M - 1);
    std::vector<std::array<std::array<double, M>, 3>> qv_tab(k), gm_tab(k);
    VectorXd wq(3);
    for (Eigen::Index j = 0; j < k; ++j) {
        for (int s = 0; s < 3; ++s) {
            const double w2 = s > 0 ? 1.0 : 0.0, w3 = s > 1 ? 1.0 : 0.0;
            for (int t = 0; t < M; ++t) {
                const double w1 = C::w1_lo + step * t;
                wq << w1, w2, w3;
                qv_tab[j][s][t] = detail::true_qv(spec, grid[j], wq, 48);
                double gm = 1.0;
                if (!spec.delta_always_one) {
                    if (spec.family == DgpFamily::sim1) {
                        // missingness ignores A, so the coarse propensity is
                        // the same expit
                        gm = detail::sim12_obs_prob(spec, 0.0, w1, w2, w3);
                    } else {
                        const QuadRule qa = gauss_legendre(48, grid[j], C::a_hi);
                        const double m = C::a_mean(w1, w2, w3);
                        double num = 0.0, den = 0.0;
                        for (std::size_t u = 0; u < qa.nodes.size(); ++u) {
                            const double d = qa.weights[u] * detail::truncnorm_pdf(
                                                                qa.nodes[u], C::a_lo, C::a_hi, m,
                                                                C::a_sd);
                            num += d * detail::sim12_obs_prob(spec, qa.nodes[u], w1, w2, w3);
                            den += d;
                        }
                        gm = den > 0.0 ? num / den : 1.0;
                    }
                }
                gm_tab[j][s][t] = gm;
            }
        }
    }
    auto interp = [&](const std::array<double, M>& tab, double w1) {
        const double x = std::clamp((w1 - C::w1_lo) / step, 0.0, double(M - 1));
        const int t = std::min(static_cast<int>(x), M - 2);
        const double frac = x - t;
        return tab[t] * (1.0 - frac) + tab[t + 1] * frac;
    };

    // Accumulate conditional moments given (W, A): integrating the Bernoulli
    // outcome and missingness draws out analytically removes their Monte Carlo
    // noise, which would otherwise swamp the tiny efficiency gaps at extreme
    // thresholds where events are rare.  Y and Delta are independent given
    // (A, W), so for the efficient score D = Delta*av/(gv*g)(Y-q) + B with
    // B = av/gv (q - qv) + qv - psi:
    //   E[D | W, A]  = B
    //   E[D^2 | W,A] = (av/(gv*g))^2 g q(1-q) + B^2
    // and for the coarsened score D~ = Delta*av/(gv*gm)(Y-qv) + C with
    // C = qv - psi and gm = P(Delta=1 | A >= v, W):
    //   E[D~ | W, A]  = av/(gv*gm) g (q - qv) + C
    //   E[D~^2 | W,A] = (av/(gv*gm))^2 g [q(1-q) + (q-qv)^2]
    //                   + 2 av/(gv*gm) g (q-qv) C + C^2
    VectorXd s1_eff = VectorXd::Zero(k), s2_eff = VectorXd::Zero(k);
    VectorXd s1_co = VectorXd::Zero(k), s2_co = VectorXd::Zero(k);
    VectorXd w_row;
    for (Eigen::Index i = 0; i < N; ++i) {
        w_row = data.w.row(i).transpose();
        const int s = static_cast<int>(w_row[1] + w_row[2] + 0.5);
        const double a = data.a[i];
        const double q = detail::true_risk(spec, a, w_row);
        const double g_obs = spec.delta_always_one
                                 ? 1.0
                                 : detail::sim12_obs_prob(spec, a, w_row[0], w_row[1], w_row[2]);
        const double qvar = q * (1.0 - q);
        for (Eigen::Index j = 0; j < k; ++j) {
            const double v = grid[j];
            const double av = a >= v ? 1.0 : 0.0;
            const double gv = detail::true_gv(spec, v, w_row);
            const double qv = interp(qv_tab[j][s], w_row[0]);
            const double gv_obs = interp(gm_tab[j][s], w_row[0]);
            const double b = av / gv * (q - qv) + qv - psi[j];
            const double r_eff = av / (gv * g_obs);
            s1_eff[j] += b;
            s2_eff[j] += r_eff * r_eff * g_obs * qvar + b * b;
            const double c = qv - psi[j];
            const double r_co = av / (gv * gv_obs);
            s1_co[j] += r_co * g_obs * (q - qv) + c;
            s2_co[j] += r_co * r_co * g_obs * (qvar + (q - qv) * (q - qv)) +
                        2.0 * r_co * g_obs * (q - qv) * c + c * c;
        }
    }
    VectorXd loss(k);
    const double dn = static_cast<double>(N);
    for (Eigen::Index j = 0; j < k; ++j) {
        const double var_eff = s2_eff[j] / dn - std::pow(s1_eff[j] / dn, 2);
        const double var_co = s2_co[j] / dn - std::pow(s1_co[j] / dn, 2);
        loss[j] = std::sqrt(std::max(var_co, 0.0) / std::max(var_eff, 1e-300)) - 1.0;
    }
    return loss;
}

// ---------------------------------------------------------------------------
// discrete test DGPs: exact enumeration truth and the matching-intervention
// oracle for the identification check
// ---------------------------------------------------------------------------

struct DiscreteDgp {
    MatrixXd w_support;   // strata x d
    VectorXd w_prob;      // strata
    VectorXd a_support;   // increasing
    MatrixXd a_prob;      // strata x |a_support|, rows sum to 1
    std::function<double(double, const VectorXd&)> risk;  // P(Y=1 | A=a, W=w)
};

inline Dataset generate(const DiscreteDgp& dgp, Eigen::Index n, std::uint64_t seed) {
    Rng rng(seed);
    Dataset data;
    data.outcome_kind.binary = true;
    const Eigen::Index d = dgp.w_support.cols();
    for (Eigen::Index j = 0; j < d; ++j) data.covariate_names.push_back("w" + std::to_string(j + 1));
    data.w.resize(n, d);
    data.a.resize(n);
    data.y.resize(n);
    data.weight = VectorXd::Ones(n);
    data.r.assign(n, 1);
    data.delta.assign(n, 1);
    auto pick = [&](const VectorXd& probs) {
        double u = uniform01(rng), c = 0.0;
        for (Eigen::Index t = 0; t < probs.size(); ++t) {
            c += probs[t];
            if (u < c) return t;
        }
        return probs.size() - 1;
    };
    for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Index s = pick(dgp.w_prob);
        const Eigen::Index t = pick(dgp.a_prob.row(s).transpose());
        data.w.row(i) = dgp.w_support.row(s);
        data.a[i] = dgp.a_support[t];
        const VectorXd w = dgp.w_support.row(s).transpose();
        data.y[i] = uniform01(rng) < dgp.risk(data.a[i], w) ? 1.0 : 0.0;
    }
    data.validate();
    return data;
}

// exact enumeration of E_W E[Y | A >= v, W]
inline double true_psi(const DiscreteDgp& dgp, double v) {
    double psi = 0.0;
    for (Eigen::Index s = 0; s < dgp.w_support.rows(); ++s) {
        const VectorXd w = dgp.w_support.row(s).transpose();
        double num = 0.0, den = 0.0;
        for (Eigen::Index t = 0; t < dgp.a_support.size(); ++t) {
            if (dgp.a_support[t] < v) continue;
            num += dgp.a_prob(s, t) * dgp.risk(dgp.a_support[t], w);
            den += dgp.a_prob(s, t);
        }
        if (den <= 0.0) throw EmptyStratum("stratum has no biomarker mass above threshold");
        psi += dgp.w_prob[s] * num / den;
    }
    return psi;
}

// Mean outcome under the matching intervention: draws below the threshold are
// reassigned a biomarker value sampled from its conditional law given
// {A >= v, W}; the structural outcome equation is then evaluated at the
// intervened value.
inline double intervention_oracle(const DiscreteDgp& dgp, double v, Eigen::Index N,
                                  std::uint64_t seed) {
    Rng rng(seed);
    auto pick = [&](const VectorXd& probs, double total) {
        double u = uniform01(rng) * total, c = 0.0;
        for (Eigen::Index t = 0; t < probs.size(); ++t) {
            c += probs[t];
            if (u < c) return t;
        }
        return probs.size() - 1;
    };
    double events = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) {
        const Eigen::Index s = pick(dgp.w_prob, 1.0);
        const VectorXd probs = dgp.a_prob.row(s).transpose();
        Eigen::Index t = pick(probs, 1.0);
        if (dgp.a_support[t] < v) {
            // match with a same-stratum member above the threshold
            VectorXd above = probs;
            double total = 0.0;
            for (Eigen::Index u2 = 0; u2 < above.size(); ++u2) {
                if (dgp.a_support[u2] < v) above[u2] = 0.0;
                total += above[u2];
            }
            if (total <= 0.0) throw EmptyStratum("no match above threshold in stratum");
            t = pick(above, total);
        }
        const VectorXd w = dgp.w_support.row(s).transpose();
        if (uniform01(rng) < dgp.risk(dgp.a_support[t], w)) events += 1.0;
    }
    return events / static_cast<double>(N);
}

// ---------------------------------------------------------------------------
// Monte-Carlo study driver
// ---------------------------------------------------------------------------

enum class EstimatorKind {
    donovan,
    bin_tmle,
    sr_tmle,
    ipw_sr_tmle,            // weight-targeted
    ipw_sr_tmle_untargeted
};

inline const char* kind_name(EstimatorKind k) {
    switch (k) {
        case EstimatorKind::donovan: return "donovan";
        case EstimatorKind::bin_tmle: return "bin_tmle";
        case EstimatorKind::sr_tmle: return "sr_tmle";
        case EstimatorKind::ipw_sr_tmle: return "ipw_sr_tmle";
        case EstimatorKind::ipw_sr_tmle_untargeted: return "ipw_sr_tmle_untargeted";
    }
    return "?";
}

inline EstimatorKind parse_kind(const std::string& s) {
    if (s == "donovan") return EstimatorKind::donovan;
    if (s == "bin_tmle") return EstimatorKind::bin_tmle;
    if (s == "sr_tmle") return EstimatorKind::sr_tmle;
    if (s == "ipw_sr_tmle") return EstimatorKind::ipw_sr_tmle;
    if (s == "ipw_sr_tmle_untargeted") return EstimatorKind::ipw_sr_tmle_untargeted;
    throw UnknownFamily("unknown estimator: " + s);
}

struct StudyConfig {
    int n_reps = 500;
    std::uint64_t base_seed = 0;
    double alpha = 0.05;
    int band_draws = 100000;
    bool simultaneous = true;
    NuisanceConfig nuisance;
    double max_failure_rate = 0.02;
    int threads = 0;  // 0 = auto
};

struct StudyCell {
    EstimatorKind kind;
    double threshold = 0.0;
    double truth = 0.0;
    double bias = 0.0;
    double abs_bias = 0.0;
    double sd = 0.0;
    double mean_se = 0.0;
    double rmse = 0.0;
    double pointwise_coverage = 0.0;
    double simultaneous_coverage = std::numeric_limits<double>::quiet_NaN();
};

struct SimulationReport {
    std::vector<StudyCell> cells;
    int n_reps = 0;
    int n_failed = 0;
    double failure_rate = 0.0;
    std::string first_failure;
    std::string truth_provenance;
};

// run every estimator over the grid for one realized dataset
inline std::vector<std::vector<ThresholdEstimate>> estimate_all(
    const Dataset& data, const std::vector<double>& grid,
    const std::vector<EstimatorKind>& kinds, const NuisanceConfig& nuisance) {
    bool any_unmeasured = false;
    for (Eigen::Index i = 0; i < data.n(); ++i) any_unmeasured = any_unmeasured || !data.r[i];
    SamplingWeights sw;
    VectorXd base_w = data.weight;
    if (any_unmeasured) {
        sw = fit_sampling_weights(data);
        for (Eigen::Index i = 0; i < data.n(); ++i) base_w[i] *= data.r[i] ? sw.w[i] : 0.0;
    }

    std::vector<std::vector<ThresholdEstimate>> out(kinds.size());
    std::vector<NuisanceFits> sr_fits;  // shared across sr-based kinds
    auto ensure_sr = [&]() {
        if (sr_fits.empty()) sr_fits = fit_nuisances_sr_grid(data, grid, nuisance, base_w);
    };
    for (std::size_t k = 0; k < kinds.size(); ++k) {
        out[k].reserve(grid.size());
        switch (kinds[k]) {
            case EstimatorKind::donovan:
                for (double v : grid) out[k].push_back(donovan(data, v, base_w));
                break;
            case EstimatorKind::bin_tmle:
                for (double v : grid) {
                    const auto fits = fit_nuisances_bin(data, v, nuisance, base_w);
                    out[k].push_back(bin_tmle(data, v, fits, base_w));
                }
                break;
            case EstimatorKind::sr_tmle:
                ensure_sr();
                for (std::size_t j = 0; j < grid.size(); ++j)
                    out[k].push_back(sr_tmle(data, grid[j], sr_fits[j], base_w));
                break;
            case EstimatorKind::ipw_sr_tmle:
            case EstimatorKind::ipw_sr_tmle_untargeted: {
                if (!any_unmeasured) sw.w = VectorXd::Ones(data.n());
                ensure_sr();
                const bool target = kinds[k] == EstimatorKind::ipw_sr_tmle;
                for (std::size_t j = 0; j < grid.size(); ++j)
                    out[k].push_back(
                        ipw_sr_tmle(data, grid[j], sr_fits[j], sw, target, nuisance));
                break;
            }
        }
    }
    return out;
}

namespace detail {

struct RepResult {
    bool failed = false;
    std::string reason;
    MatrixXd psi, se, cover;  // kinds x thresholds
    VectorXd simul;           // kinds
};

inline RepResult run_replication(const DgpSpec& spec, int rep, const std::vector<double>& grid,
                                 const std::vector<EstimatorKind>& kinds, const VectorXd& truth,
                                 const StudyConfig& cfg) {
    RepResult res;
    const auto nk = static_cast<Eigen::Index>(kinds.size());
    const auto nv = static_cast<Eigen::Index>(grid.size());
    res.psi.setZero(nk, nv);
    res.se.setZero(nk, nv);
    res.cover.setZero(nk, nv);
    res.simul.setZero(nk);
    try {
        DgpSpec rspec = spec;
        rspec.seed = derive_seed(cfg.base_seed, static_cast<std::uint64_t>(rep));
        const Dataset data = generate(rspec);
        const auto ests = estimate_all(data, grid, kinds, cfg.nuisance);
        for (Eigen::Index k = 0; k < nk; ++k) {
            BandOptions bopts;
            bopts.alpha = cfg.alpha;
            bopts.n_draws = cfg.band_draws;
            bopts.seed = derive_seed(rspec.seed, 7000 + static_cast<std::uint64_t>(k));
            const ThresholdCurve curve =
                build_curve(ests[k], data.outcome_kind, bopts, cfg.simultaneous);
            bool all_in = true;
            for (Eigen::Index j = 0; j < nv; ++j) {
                res.psi(k, j) = curve.estimates[j].psi;
                res.se(k, j) = curve.estimates[j].se;
                const bool in = truth[j] >= curve.pointwise[j].lower &&
                                truth[j] <= curve.pointwise[j].upper;
                res.cover(k, j) = in ? 1.0 : 0.0;
                if (cfg.simultaneous)
                    all_in = all_in && truth[j] >= curve.simultaneous[j].lower &&
                             truth[j] <= curve.simultaneous[j].upper;
            }
            res.simul[k] = (cfg.simultaneous && all_in) ? 1.0 : 0.0;
        }
    } catch (const Error& e) {
        res.failed = true;
        res.reason = e.what();
    }
    return res;
}

}  // namespace detail

inline SimulationReport monte_carlo_study(const DgpSpec& spec, const std::vector<double>& grid,
                                          const std::vector<EstimatorKind>& kinds,
                                          const VectorXd& truth, const StudyConfig& cfg) {
    if (cfg.n_reps < 1) throw EmptyDataset("n_reps must be positive");
    if (truth.size() != static_cast<Eigen::Index>(grid.size()))
        throw DimensionMismatch("truth/grid length mismatch");

    std::vector<detail::RepResult> results(static_cast<std::size_t>(cfg.n_reps));
    const int workers = std::max(1, std::min(cfg.threads > 0 ? cfg.threads : thread_count(),
                                             cfg.n_reps));
    std::atomic<int> next{0};
    auto work = [&]() {
        for (;;) {
            const int r = next.fetch_add(1);
            if (r >= cfg.n_reps) return;
            results[static_cast<std::size_t>(r)] =
                detail::run_replication(spec, r, grid, kinds, truth, cfg);
        }
    };
    if (workers == 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < workers; ++t) pool.emplace_back(work);
        for (auto& th : pool) th.join();
    }

    // aggregate in replication order; independent of scheduling above
    const auto nk = static_cast<Eigen::Index>(kinds.size());
    const auto nv = static_cast<Eigen::Index>(grid.size());
    MatrixXd s1 = MatrixXd::Zero(nk, nv), s2 = MatrixXd::Zero(nk, nv);
    MatrixXd se_sum = MatrixXd::Zero(nk, nv), cov_sum = MatrixXd::Zero(nk, nv);
    VectorXd simul_sum = VectorXd::Zero(nk);
    SimulationReport report;
    report.n_reps = cfg.n_reps;
    int ok = 0;
    for (const auto& res : results) {
        if (res.failed) {
            ++report.n_failed;
            if (report.first_failure.empty()) report.first_failure = res.reason;
            continue;
        }
        ++ok;
        s1 += res.psi;
        s2 += res.psi.cwiseProduct(res.psi);
        se_sum += res.se;
        cov_sum += res.cover;
        simul_sum += res.simul;
    }
    report.failure_rate = static_cast<double>(report.n_failed) / cfg.n_reps;
    if (ok == 0)
        throw StudyFailed("every replication failed: " + report.first_failure);
    if (report.failure_rate > cfg.max_failure_rate)
        throw StudyFailed("failure rate " + std::to_string(report.failure_rate) +
                          " exceeds the allowed " + std::to_string(cfg.max_failure_rate) +
                          " (first: " + report.first_failure + ")");

    const double m = static_cast<double>(ok);
    for (Eigen::Index k = 0; k < nk; ++k) {
        for (Eigen::Index j = 0; j < nv; ++j) {
            StudyCell cell;
            cell.kind = kinds[k];
            cell.threshold = grid[j];
            cell.truth = truth[j];
            const double mean = s1(k, j) / m;
            const double var = std::max(s2(k, j) / m - mean * mean, 0.0);
            cell.bias = mean - truth[j];
            cell.abs_bias = std::abs(cell.bias);
            cell.sd = std::sqrt(var);  // population sd: makes rmse^2 = bias^2 + sd^2 exact
            cell.mean_se = se_sum(k, j) / m;
            cell.rmse = std::sqrt(cell.bias * cell.bias + var);
            cell.pointwise_coverage = cov_sum(k, j) / m;
            if (cfg.simultaneous) cell.simultaneous_coverage = simul_sum[k] / m;
            report.cells.push_back(cell);
        }
    }
    return report;
}

inline void write_report_csv(const SimulationReport& report, std::ostream& out) {
    out << "#schema=1\n";
    out << "estimator,threshold,truth,bias,abs_bias,sd,mean_se,rmse,pointwise_coverage,"
           "simultaneous_coverage,n_reps,n_failed\n";
    out.precision(17);
    for (const auto& c : report.cells) {
        out << kind_name(c.kind) << ',' << c.threshold << ',' << c.truth << ',' << c.bias << ','
            << c.abs_bias << ',' << c.sd << ',' << c.mean_se << ',' << c.rmse << ','
            << c.pointwise_coverage << ',';
        if (std::isnan(c.simultaneous_coverage)) out << "NA"; else out << c.simultaneous_coverage;
        out << ',' << report.n_reps << ',' << report.n_failed << "\n";
    }
}

// plot-ready long format: one (estimator, threshold, metric, value) per row
inline void write_report_long_csv(const SimulationReport& report, std::ostream& out) {
    out << "#schema=1\n";
    out << "estimator,threshold,metric,value\n";
    out.precision(17);
    auto row = [&](const StudyCell& c, const char* metric, double value) {
        if (std::isnan(value)) return;
        out << kind_name(c.kind) << ',' << c.threshold << ',' << metric << ',' << value << "\n";
    };
    for (const auto& c : report.cells) {
        row(c, "bias", c.bias);
        row(c, "abs_bias", c.abs_bias);
        row(c, "sd", c.sd);
        row(c, "mean_se", c.mean_se);
        row(c, "rmse", c.rmse);
        row(c, "pointwise_coverage", c.pointwise_coverage);
        row(c, "simultaneous_coverage", c.simultaneous_coverage);
    }
}

inline std::string report_summary(const SimulationReport& report) {
    std::ostringstream os;
    os.precision(4);
    os << "estimator               threshold   bias       sd         mean_se    rmse       "
          "cover      simul\n";
    for (const auto& c : report.cells) {
        os.width(24);
        os << std::left << kind_name(c.kind);
        os << std::left;
        auto col = [&](double v) {
            os.width(11);
            os << std::left << v;
        };
        col(c.threshold);
        col(c.bias);
        col(c.sd);
        col(c.mean_se);
        col(c.rmse);
        col(c.pointwise_coverage);
        if (!std::isnan(c.simultaneous_coverage)) os << c.simultaneous_coverage;
        os << "\n";
    }
    os << "replications=" << report.n_reps << " failed=" << report.n_failed << "\n";
    return os.str();
}

}  // namespace threshr
