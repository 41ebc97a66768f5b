#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "threshr/errors.hpp"
#include "threshr/stats.hpp"

namespace threshr {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct OutcomeKind {
    bool binary = true;
    double lo = 0.0;
    double hi = 1.0;
};

// One subject, O = (W, R, RA, Delta, Delta*Y) with an external sampling weight.
struct Observation {
    VectorXd w;
    bool r = true;
    double a = std::numeric_limits<double>::quiet_NaN();  // NaN iff r == 0
    bool delta = true;
    double y = std::numeric_limits<double>::quiet_NaN();  // NaN iff delta == 0
    double weight = 1.0;
};

// Column store for the observed data. Immutable after construction.
class Dataset {
public:
    MatrixXd w;                    // n x d baseline covariates
    VectorXd a;                    // biomarker, NaN where r == 0
    VectorXd y;                    // outcome, NaN where delta == 0
    std::vector<std::uint8_t> r;   // biomarker measured
    std::vector<std::uint8_t> delta;
    VectorXd weight;
    std::vector<std::string> covariate_names;
    OutcomeKind outcome_kind;

    Eigen::Index n() const { return a.size(); }
    Eigen::Index d() const { return w.cols(); }

    Observation observation(Eigen::Index i) const {
        Observation o;
        o.w = w.row(i).transpose();
        o.r = r[i] != 0;
        o.a = a[i];
        o.delta = delta[i] != 0;
        o.y = y[i];
        o.weight = weight[i];
        return o;
    }

    void validate() const {
        const Eigen::Index m = n();
        if (m < 1) throw EmptyDataset("dataset has no observations");
        if (static_cast<Eigen::Index>(r.size()) != m ||
            static_cast<Eigen::Index>(delta.size()) != m || y.size() != m ||
            weight.size() != m || w.rows() != m)
            throw DimensionMismatch("dataset column lengths differ");
        bool any_measured = false;
        for (Eigen::Index i = 0; i < m; ++i) {
            if (weight[i] <= 0.0 || !std::isfinite(weight[i]))
                throw InconsistentRecord("nonpositive weight at row " + std::to_string(i));
            if (r[i] == 0 && !std::isnan(a[i]))
                throw InconsistentRecord("biomarker present with r=0 at row " + std::to_string(i));
            if (r[i] != 0 && std::isnan(a[i]))
                throw InconsistentRecord("biomarker absent with r=1 at row " + std::to_string(i));
            if (delta[i] == 0 && !std::isnan(y[i]))
                throw InconsistentRecord("outcome present with delta=0 at row " + std::to_string(i));
            if (delta[i] != 0 && std::isnan(y[i]))
                throw InconsistentRecord("outcome absent with delta=1 at row " + std::to_string(i));
            if (delta[i] != 0) {
                if (outcome_kind.binary) {
                    if (y[i] != 0.0 && y[i] != 1.0)
                        throw InconsistentRecord("non-binary outcome at row " + std::to_string(i));
                } else if (y[i] < outcome_kind.lo || y[i] > outcome_kind.hi) {
                    throw OutOfRangeOutcome("outcome outside [lo,hi] at row " + std::to_string(i));
                }
            }
            any_measured = any_measured || r[i] != 0;
        }
        if (!any_measured) throw EmptyDataset("no observation with measured biomarker");
    }

    std::vector<double> measured_biomarkers() const {
        std::vector<double> out;
        for (Eigen::Index i = 0; i < n(); ++i)
            if (r[i]) out.push_back(a[i]);
        return out;
    }

    std::string summary() const {
        std::size_t nr = 0, nd = 0, ny1 = 0;
        for (Eigen::Index i = 0; i < n(); ++i) {
            nr += r[i];
            nd += delta[i];
            if (delta[i] && y[i] == 1.0) ++ny1;
        }
        std::ostringstream os;
        os << "n=" << n() << "\ncovariates=" << d() << "\nmeasured=" << nr
           << "\nobserved_outcomes=" << nd << "\nevents=" << ny1
           << "\noutcome_kind=" << (outcome_kind.binary ? "binary" : "bounded_continuous")
           << "\n";
        return os.str();
    }
};

enum class GridProvenance { explicit_values, quantile };

struct ThresholdGrid {
    std::vector<double> values;
    GridProvenance provenance = GridProvenance::explicit_values;
    std::size_t size() const { return values.size(); }
};

inline constexpr int kDefaultMinAbove = 10;

inline ThresholdGrid make_grid(const Dataset& data, std::vector<double> values,
                               GridProvenance provenance = GridProvenance::explicit_values,
                               int min_above = kDefaultMinAbove) {
    if (values.empty()) throw DegenerateGrid("empty threshold grid");
    for (std::size_t i = 1; i < values.size(); ++i)
        if (!(values[i] > values[i - 1]))
            throw DegenerateGrid("threshold grid not strictly increasing");
    const double vmax = values.back();
    int above = 0;
    for (Eigen::Index i = 0; i < data.n(); ++i)
        if (data.r[i] && data.a[i] >= vmax) ++above;
    if (above < min_above)
        throw DegenerateGrid("fewer than " + std::to_string(min_above) +
                             " measured observations above the largest threshold");
    return ThresholdGrid{std::move(values), provenance};
}

inline ThresholdGrid quantile_grid(const Dataset& data, const std::vector<double>& probs,
                                   int min_above = kDefaultMinAbove) {
    if (probs.empty()) throw DegenerateGrid("no quantile probabilities");
    auto vals = data.measured_biomarkers();
    if (vals.empty()) throw EmptyDataset("no measured biomarkers");
    std::sort(vals.begin(), vals.end());
    std::vector<double> qs;
    for (double p : probs) {
        if (p < 0.0 || p > 1.0) throw DegenerateGrid("quantile probability outside [0,1]");
        qs.push_back(quantile_type1_sorted(vals, p));
    }
    std::sort(qs.begin(), qs.end());
    qs.erase(std::unique(qs.begin(), qs.end()), qs.end());
    if (probs.size() > 1 && qs.size() == 1)
        throw DegenerateGrid("all requested quantiles coincide");
    return make_grid(data, std::move(qs), GridProvenance::quantile, min_above);
}

struct CsvSchema {
    std::string biomarker;
    std::string outcome;
    std::vector<std::string> covariates;  // empty: every remaining column
    std::string measured_col;             // optional R indicator
    std::string missing_col;              // optional Delta indicator
    std::string weight_col;               // optional sampling weight
    char delimiter = ',';
    OutcomeKind outcome_kind;
};

namespace detail {

inline bool cell_missing(const std::string& s) { return s.empty() || s == "NA"; }

inline double parse_cell(const std::string& s, std::size_t row, const std::string& col) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw MalformedRow("non-numeric cell '" + s + "' in column " + col + ", data row " +
                           std::to_string(row + 1));
    }
}

inline std::vector<std::string> split_line(const std::string& line, char delim) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == delim) {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace detail

inline Dataset load_csv(std::istream& in, const CsvSchema& schema) {
    std::string line;
    if (!std::getline(in, line)) throw EmptyDataset("empty file");
    const auto header = detail::split_line(line, schema.delimiter);
    auto find = [&](const std::string& name) -> std::optional<std::size_t> {
        for (std::size_t j = 0; j < header.size(); ++j)
            if (header[j] == name) return j;
        return std::nullopt;
    };
    auto require = [&](const std::string& name) {
        auto j = find(name);
        if (!j) throw MalformedRow("column '" + name + "' not found in header");
        return *j;
    };
    const std::size_t col_a = require(schema.biomarker);
    const std::size_t col_y = require(schema.outcome);
    std::optional<std::size_t> col_r, col_delta, col_w;
    if (!schema.measured_col.empty()) col_r = require(schema.measured_col);
    if (!schema.missing_col.empty()) col_delta = require(schema.missing_col);
    if (!schema.weight_col.empty()) col_w = require(schema.weight_col);

    std::vector<std::size_t> cov_idx;
    std::vector<std::string> cov_names;
    if (schema.covariates.empty()) {
        for (std::size_t j = 0; j < header.size(); ++j) {
            if (j == col_a || j == col_y) continue;
            if (col_r && j == *col_r) continue;
            if (col_delta && j == *col_delta) continue;
            if (col_w && j == *col_w) continue;
            cov_idx.push_back(j);
            cov_names.push_back(header[j]);
        }
    } else {
        for (const auto& name : schema.covariates) {
            cov_idx.push_back(require(name));
            cov_names.push_back(name);
        }
    }

    std::vector<std::vector<double>> wrows;
    std::vector<double> as, ys, ws;
    std::vector<std::uint8_t> rs, deltas;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = detail::split_line(line, schema.delimiter);
        if (cells.size() != header.size())
            throw MalformedRow("row " + std::to_string(row + 1) + " has " +
                               std::to_string(cells.size()) + " cells, expected " +
                               std::to_string(header.size()));
        auto cell = [&](std::size_t j) { return cells[j]; };

        const bool a_present = !detail::cell_missing(cell(col_a));
        std::uint8_t rv;
        if (col_r) {
            rv = detail::parse_cell(cell(*col_r), row, schema.measured_col) != 0.0;
        } else {
            rv = a_present ? 1 : 0;
        }
        std::uint8_t dv = 1;
        if (col_delta) dv = detail::parse_cell(cell(*col_delta), row, schema.missing_col) != 0.0;
        const bool y_present = !detail::cell_missing(cell(col_y));

        as.push_back(a_present ? detail::parse_cell(cell(col_a), row, schema.biomarker) : nan);
        ys.push_back(y_present ? detail::parse_cell(cell(col_y), row, schema.outcome) : nan);
        rs.push_back(rv);
        deltas.push_back(dv);
        ws.push_back(col_w ? detail::parse_cell(cell(*col_w), row, schema.weight_col) : 1.0);
        std::vector<double> wrow;
        for (std::size_t k = 0; k < cov_idx.size(); ++k)
            wrow.push_back(detail::parse_cell(cell(cov_idx[k]), row, cov_names[k]));
        wrows.push_back(std::move(wrow));
        ++row;
    }
    if (row == 0) throw EmptyDataset("no data rows");

    Dataset data;
    data.covariate_names = cov_names;
    data.outcome_kind = schema.outcome_kind;
    data.a = Eigen::Map<VectorXd>(as.data(), static_cast<Eigen::Index>(row));
    data.y = Eigen::Map<VectorXd>(ys.data(), static_cast<Eigen::Index>(row));
    data.weight = Eigen::Map<VectorXd>(ws.data(), static_cast<Eigen::Index>(row));
    data.r = std::move(rs);
    data.delta = std::move(deltas);
    data.w.resize(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(cov_idx.size()));
    for (std::size_t i = 0; i < row; ++i)
        for (std::size_t j = 0; j < cov_idx.size(); ++j)
            data.w(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = wrows[i][j];
    data.validate();
    return data;
}

inline Dataset load_csv(const std::string& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw EmptyDataset("cannot open file: " + path);
    return load_csv(in, schema);
}

// canonical serialization; re-parses to an identical Dataset
inline void write_csv(const Dataset& data, std::ostream& out, char delimiter = ',') {
    for (const auto& name : data.covariate_names) out << name << delimiter;
    out << "a" << delimiter << "r" << delimiter << "delta" << delimiter << "y" << delimiter
        << "weight\n";
    out.precision(17);
    for (Eigen::Index i = 0; i < data.n(); ++i) {
        for (Eigen::Index j = 0; j < data.d(); ++j) out << data.w(i, j) << delimiter;
        if (data.r[i]) out << data.a[i];
        out << delimiter << int(data.r[i]) << delimiter << int(data.delta[i]) << delimiter;
        if (data.delta[i]) out << data.y[i];
        out << delimiter << data.weight[i] << "\n";
    }
}

inline CsvSchema canonical_schema(const Dataset& data, char delimiter = ',') {
    CsvSchema schema;
    schema.biomarker = "a";
    schema.outcome = "y";
    schema.covariates = data.covariate_names;
    schema.measured_col = "r";
    schema.missing_col = "delta";
    schema.weight_col = "weight";
    schema.delimiter = delimiter;
    schema.outcome_kind = data.outcome_kind;
    return schema;
}

}  // namespace threshr
