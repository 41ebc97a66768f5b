// Command-line front end: threshold-response estimation from CSV data plus the
// simulation-study drivers. All randomness is governed by --seed.

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "threshr/threshr.hpp"

namespace {

using namespace threshr;
using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

int classify(const Error& e) {
    if (dynamic_cast<const MalformedRow*>(&e) || dynamic_cast<const InconsistentRecord*>(&e) ||
        dynamic_cast<const EmptyDataset*>(&e) || dynamic_cast<const DegenerateGrid*>(&e) ||
        dynamic_cast<const OutOfRangeOutcome*>(&e) || dynamic_cast<const NoCompleteCases*>(&e) ||
        dynamic_cast<const EmptyStratum*>(&e) || dynamic_cast<const EmptyCellNoSample*>(&e) ||
        dynamic_cast<const NoEvents*>(&e))
        return kExitData;
    if (dynamic_cast<const UnknownFamily*>(&e)) return kExitUsage;
    return kExitNumeric;
}

struct DataFlags {
    std::string input;
    std::string biomarker = "a";
    std::string outcome = "y";
    std::vector<std::string> covariates;
    std::string measured_col, missing_col, weight_col;
    double outcome_lo = 0.0, outcome_hi = 1.0;
    bool continuous = false;
    std::vector<double> grid_values;
    std::vector<double> grid_quantiles;
    int min_above = kDefaultMinAbove;
};

struct FitFlags {
    std::vector<std::string> estimators{"sr_tmle"};
    double alpha = 0.05;
    std::uint64_t seed = 0;
    int band_draws = 100000;
    bool ipw_target = true;
    NuisanceConfig nuisance;
};

void add_data_flags(CLI::App* cmd, DataFlags& d) {
    cmd->add_option("--input", d.input, "input CSV path")->required();
    cmd->add_option("--biomarker", d.biomarker, "biomarker column name");
    cmd->add_option("--outcome", d.outcome, "outcome column name");
    cmd->add_option("--covariates", d.covariates,
                    "covariate column names (default: all remaining columns)")
        ->delimiter(',');
    cmd->add_option("--measured-col", d.measured_col, "biomarker-measured indicator column");
    cmd->add_option("--missing-col", d.missing_col, "outcome-observed indicator column");
    cmd->add_option("--weight-col", d.weight_col, "external sampling weight column");
    auto* lo = cmd->add_option("--outcome-lo", d.outcome_lo, "continuous outcome lower bound");
    cmd->add_option("--outcome-hi", d.outcome_hi, "continuous outcome upper bound")->needs(lo);
    auto* gv = cmd->add_option("--grid", d.grid_values, "explicit threshold grid")->delimiter(',');
    cmd->add_option("--grid-quantiles", d.grid_quantiles,
                    "threshold grid as biomarker quantile probabilities")
        ->delimiter(',')
        ->excludes(gv);
    cmd->add_option("--min-above", d.min_above,
                    "minimum measured observations above the largest threshold");
}

void add_fit_flags(CLI::App* cmd, FitFlags& f) {
    cmd->add_option("--estimator", f.estimators,
                    "estimators: donovan, bin_tmle, sr_tmle, ipw_sr_tmle, ipw_sr_tmle_untargeted")
        ->delimiter(',');
    cmd->add_option("--alpha", f.alpha, "two-sided level")->check(CLI::Range(1e-6, 0.999999));
    cmd->add_option("--seed", f.seed, "base RNG seed");
    cmd->add_option("--band-draws", f.band_draws, "Monte-Carlo draws for simultaneous bands");
    cmd->add_flag("!--no-ipw-target", f.ipw_target, "skip the sampling-weight targeting step");
    cmd->add_option("--knots", f.nuisance.covariate_knots, "interior knots per covariate");
    cmd->add_option("--biomarker-knots", f.nuisance.biomarker_knots,
                    "interior knots for the biomarker term");
    cmd->add_option("--degree", f.nuisance.degree, "spline degree (0 = step functions)");
    cmd->add_flag("--interactions", f.nuisance.include_interactions,
                  "include pairwise covariate products");
    cmd->add_option("--bound", f.nuisance.bound, "probability truncation bound");
}

Dataset load_data(const DataFlags& d) {
    CsvSchema schema;
    schema.biomarker = d.biomarker;
    schema.outcome = d.outcome;
    schema.covariates = d.covariates;
    schema.measured_col = d.measured_col;
    schema.missing_col = d.missing_col;
    schema.weight_col = d.weight_col;
    if (d.continuous) {
        schema.outcome_kind.binary = false;
        schema.outcome_kind.lo = d.outcome_lo;
        schema.outcome_kind.hi = d.outcome_hi;
    }
    return load_csv(d.input, schema);
}

ThresholdGrid resolve_grid(const Dataset& data, const DataFlags& d) {
    if (!d.grid_values.empty()) {
        return make_grid(data, d.grid_values, GridProvenance::explicit_values, d.min_above);
    }
    if (!d.grid_quantiles.empty()) {
        return quantile_grid(data, d.grid_quantiles, d.min_above);
    }
    throw CLI::ValidationError("--grid or --grid-quantiles is required");
}

std::vector<EstimatorKind> resolve_kinds(const FitFlags& f) {
    std::vector<EstimatorKind> kinds;
    for (const auto& s : f.estimators) kinds.push_back(parse_kind(s));
    if (kinds.empty()) throw CLI::ValidationError("at least one --estimator is required");
    return kinds;
}

// run the selected estimators, rescaling bounded-continuous outcomes
std::vector<std::vector<ThresholdEstimate>> run_estimators(const Dataset& data,
                                                           const std::vector<double>& grid,
                                                           const std::vector<EstimatorKind>& kinds,
                                                           const DataFlags& d, const FitFlags& f) {
    if (!d.continuous) return estimate_all(data, grid, kinds, f.nuisance);
    const OutcomeTransform t{d.outcome_lo, d.outcome_hi};
    const Dataset scaled = scale_outcome(data, t);
    auto out = estimate_all(scaled, grid, kinds, f.nuisance);
    for (auto& per_kind : out)
        for (auto& est : per_kind) est = unscale_estimate(est, t);
    return out;
}

struct Sink {
    std::ofstream file;
    std::ostream* out = &std::cout;
    explicit Sink(const std::string& path) {
        if (!path.empty()) {
            file.open(path);
            if (!file) throw EmptyDataset("cannot open output file: " + path);
            out = &file;
        }
    }
};

json curve_json(const ThresholdCurve& curve, EstimatorKind kind) {
    json arr = json::array();
    for (std::size_t j = 0; j < curve.size(); ++j) {
        json row;
        row["estimator"] = kind_name(kind);
        row["threshold"] = curve.estimates[j].threshold;
        row["psi"] = curve.estimates[j].psi;
        row["se"] = curve.estimates[j].se;
        row["ci_lower"] = curve.pointwise[j].lower;
        row["ci_upper"] = curve.pointwise[j].upper;
        if (curve.has_bands()) {
            row["band_lower"] = curve.simultaneous[j].lower;
            row["band_upper"] = curve.simultaneous[j].upper;
        }
        arr.push_back(row);
    }
    return arr;
}

void maybe_write_json(const std::string& path, const json& doc) {
    if (path.empty()) return;
    std::ofstream out(path);
    if (!out) throw EmptyDataset("cannot open output file: " + path);
    out << doc.dump(2) << "\n";
}

int cmd_estimate(const DataFlags& d, const FitFlags& f, const std::string& output,
                 const std::string& json_path) {
    const Dataset data = load_data(d);
    const ThresholdGrid grid = resolve_grid(data, d);
    const auto kinds = resolve_kinds(f);
    const auto ests = run_estimators(data, grid.values, kinds, d, f);
    Sink sink(output);
    *sink.out << "#schema=1\n" << "threshold,psi,se,tag\n";
    sink.out->precision(17);
    json jarr = json::array();
    for (std::size_t k = 0; k < kinds.size(); ++k) {
        for (const auto& est : ests[k]) {
            *sink.out << est.threshold << ',' << est.psi << ',' << est.se << ','
                      << kind_name(kinds[k]) << "\n";
            jarr.push_back({{"estimator", kind_name(kinds[k])},
                            {"threshold", est.threshold},
                            {"psi", est.psi},
                            {"se", est.se}});
        }
    }
    maybe_write_json(json_path, jarr);
    return kExitOk;
}

int cmd_bands(const DataFlags& d, const FitFlags& f, const std::string& output,
              const std::string& json_path) {
    const Dataset data = load_data(d);
    const ThresholdGrid grid = resolve_grid(data, d);
    const auto kinds = resolve_kinds(f);
    const auto ests = run_estimators(data, grid.values, kinds, d, f);
    Sink sink(output);
    json jdoc = json::array();
    *sink.out << "#schema=1\n"
              << "estimator,threshold,psi,se,ci_lower,ci_upper,band_lower,band_upper\n";
    sink.out->precision(17);
    for (std::size_t k = 0; k < kinds.size(); ++k) {
        BandOptions bo;
        bo.alpha = f.alpha;
        bo.n_draws = f.band_draws;
        bo.seed = derive_seed(f.seed, 7000 + k);
        const ThresholdCurve curve = build_curve(ests[k], data.outcome_kind, bo, true);
        for (std::size_t j = 0; j < curve.size(); ++j) {
            *sink.out << kind_name(kinds[k]) << ',' << curve.estimates[j].threshold << ','
                      << curve.estimates[j].psi << ',' << curve.estimates[j].se << ','
                      << curve.pointwise[j].lower << ',' << curve.pointwise[j].upper << ','
                      << curve.simultaneous[j].lower << ',' << curve.simultaneous[j].upper << "\n";
        }
        for (auto& row : curve_json(curve, kinds[k])) jdoc.push_back(row);
    }
    maybe_write_json(json_path, jdoc);
    return kExitOk;
}

int cmd_test_threshold(const DataFlags& d, const FitFlags& f, double delta,
                       const std::string& output, const std::string& json_path) {
    const Dataset data = load_data(d);
    const ThresholdGrid grid = resolve_grid(data, d);
    const auto kinds = resolve_kinds(f);
    const auto ests = run_estimators(data, grid.values, kinds, d, f);
    BandOptions bo;
    bo.alpha = f.alpha;
    bo.n_draws = f.band_draws;
    bo.seed = derive_seed(f.seed, 7000);
    const ThresholdCurve curve = build_curve(ests[0], data.outcome_kind, bo, true);
    const ThresholdTestResult res = test_threshold_exists(curve, delta);
    Sink sink(output);
    *sink.out << "#schema=1\n" << "verdict,delta,witness\n";
    sink.out->precision(17);
    *sink.out << (res.reject ? "reject" : "fail_to_reject") << ',' << delta << ',';
    if (res.witness) *sink.out << *res.witness;
    *sink.out << "\n";
    json jdoc;
    jdoc["verdict"] = res.reject ? "reject" : "fail_to_reject";
    jdoc["delta"] = delta;
    if (res.witness) jdoc["witness"] = *res.witness;
    maybe_write_json(json_path, jdoc);
    return kExitOk;
}

struct SimFlags {
    std::string design = "sim1";
    Eigen::Index n = 1000;
    int reps = 500;
    double sin_const = 0.0;
    double offset = 0.0;
    double confound = 0.9375;
    bool no_missingness = false;
    std::vector<double> grid;
    bool no_simultaneous = false;
};

int cmd_simulate(const SimFlags& s, const FitFlags& f, const std::string& output,
                 const std::string& long_output, const std::string& json_path, bool quiet) {
    DgpSpec spec;
    spec.family = parse_family(s.design);
    spec.n = s.n;
    spec.sin_const = s.sin_const;
    spec.offset = s.offset;
    spec.confound = s.confound;
    spec.delta_always_one = s.no_missingness;
    const std::vector<double> grid = s.grid.empty() ? default_grid(spec) : s.grid;
    const TruthResult truth = true_psi(spec, grid);
    StudyConfig cfg;
    cfg.n_reps = s.reps;
    cfg.base_seed = f.seed;
    cfg.alpha = f.alpha;
    cfg.band_draws = f.band_draws;
    cfg.simultaneous = !s.no_simultaneous;
    cfg.nuisance = f.nuisance;
    const auto kinds = resolve_kinds(f);
    const SimulationReport report = monte_carlo_study(spec, grid, kinds, truth.psi, cfg);
    Sink sink(output);
    write_report_csv(report, *sink.out);
    if (!long_output.empty()) {
        std::ofstream lo(long_output);
        if (!lo) throw EmptyDataset("cannot open output file: " + long_output);
        write_report_long_csv(report, lo);
    }
    if (!quiet) std::cerr << report_summary(report);
    if (!json_path.empty()) {
        json jdoc;
        jdoc["design"] = s.design;
        jdoc["n"] = s.n;
        jdoc["reps"] = s.reps;
        jdoc["truth_provenance"] = truth.provenance;
        jdoc["n_failed"] = report.n_failed;
        json cells = json::array();
        for (const auto& c : report.cells) {
            json row{{"estimator", kind_name(c.kind)}, {"threshold", c.threshold},
                     {"truth", c.truth},               {"bias", c.bias},
                     {"sd", c.sd},                     {"mean_se", c.mean_se},
                     {"rmse", c.rmse},                 {"pointwise_coverage", c.pointwise_coverage}};
            if (!std::isnan(c.simultaneous_coverage))
                row["simultaneous_coverage"] = c.simultaneous_coverage;
            cells.push_back(row);
        }
        jdoc["cells"] = cells;
        maybe_write_json(json_path, jdoc);
    }
    return kExitOk;
}

int cmd_eff_loss(const SimFlags& s, const FitFlags& f, Eigen::Index draws,
                 const std::string& output, const std::string& json_path) {
    DgpSpec spec;
    spec.family = parse_family(s.design);
    spec.sin_const = s.sin_const;
    spec.offset = s.offset;
    spec.delta_always_one = s.no_missingness;
    const std::vector<double> grid = s.grid.empty() ? default_grid(spec) : s.grid;
    const VectorXd loss = efficiency_loss(spec, grid, draws, f.seed);
    Sink sink(output);
    *sink.out << "#schema=1\n" << "threshold,loss\n";
    sink.out->precision(17);
    json jarr = json::array();
    for (std::size_t j = 0; j < grid.size(); ++j) {
        *sink.out << grid[j] << ',' << loss[static_cast<Eigen::Index>(j)] << "\n";
        jarr.push_back({{"threshold", grid[j]}, {"loss", loss[static_cast<Eigen::Index>(j)]}});
    }
    maybe_write_json(json_path, jarr);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"covariate-adjusted threshold-response estimation"};
    app.require_subcommand(1);

    DataFlags d;
    FitFlags f;
    SimFlags s;
    std::string output, long_output, json_path;
    double delta = 0.0;
    Eigen::Index eff_draws = 1000000;
    bool quiet = false;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--output", output, "output CSV path (default: stdout)");
        cmd->add_option("--json", json_path, "also write a JSON summary to this path");
        add_fit_flags(cmd, f);
    };

    auto* est = app.add_subcommand("estimate", "per-threshold point estimates");
    add_data_flags(est, d);
    add_common(est);

    auto* bands = app.add_subcommand("bands", "estimates with pointwise and simultaneous bands");
    add_data_flags(bands, d);
    add_common(bands);

    auto* tt = app.add_subcommand("test-threshold", "test whether a risk-controlling threshold exists");
    add_data_flags(tt, d);
    add_common(tt);
    tt->add_option("--delta", delta, "risk level to control")->required();

    auto* sim = app.add_subcommand("simulate", "Monte-Carlo study on a built-in design");
    sim->add_option("--design", s.design, "sim1, sim2, confounding, coverage_d, biased_sampling");
    sim->add_option("--n", s.n, "sample size per replication");
    sim->add_option("--reps", s.reps, "number of replications");
    sim->add_option("--const", s.sin_const, "nonlinearity constant");
    sim->add_option("--offset", s.offset, "outcome model intercept shift");
    sim->add_option("--c", s.confound, "confounder coefficient (confounding design)");
    sim->add_flag("--no-missingness", s.no_missingness, "drop the missingness mechanism");
    sim->add_option("--sim-grid", s.grid, "override the design's threshold grid")->delimiter(',');
    sim->add_flag("--no-simultaneous", s.no_simultaneous, "skip simultaneous bands");
    sim->add_option("--long-output", long_output, "also write a long-format CSV to this path");
    sim->add_flag("--quiet", quiet, "suppress the summary table on stderr");
    add_common(sim);

    auto* eff = app.add_subcommand("eff-loss", "influence-function efficiency-loss curve");
    eff->add_option("--design", s.design, "sim1 (closed-form nuisances required)");
    eff->add_option("--const", s.sin_const, "nonlinearity constant");
    eff->add_option("--offset", s.offset, "outcome model intercept shift");
    eff->add_flag("--no-missingness", s.no_missingness, "drop the missingness mechanism");
    eff->add_option("--sim-grid", s.grid, "override the design's threshold grid")->delimiter(',');
    eff->add_option("--draws", eff_draws, "evaluation sample size");
    add_common(eff);

    try {
        app.parse(argc, argv);
        d.continuous = est->count("--outcome-lo") || bands->count("--outcome-lo") ||
                       tt->count("--outcome-lo");
        if (est->parsed()) return cmd_estimate(d, f, output, json_path);
        if (bands->parsed()) return cmd_bands(d, f, output, json_path);
        if (tt->parsed()) return cmd_test_threshold(d, f, delta, output, json_path);
        if (sim->parsed()) return cmd_simulate(s, f, output, long_output, json_path, quiet);
        if (eff->parsed()) return cmd_eff_loss(s, f, eff_draws, output, json_path);
        return kExitUsage;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return classify(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    }
}
