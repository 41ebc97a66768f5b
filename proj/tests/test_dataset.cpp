#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "threshr/dataset.hpp"
#include "threshr/sims.hpp"

using namespace threshr;

namespace {

Dataset parse(const std::string& csv, CsvSchema schema) {
    std::istringstream in(csv);
    return load_csv(in, schema);
}

CsvSchema basic_schema() {
    CsvSchema s;
    s.biomarker = "a";
    s.outcome = "y";
    return s;
}

}  // namespace

TEST_CASE("CSV loading with full schema") {
    CsvSchema schema = basic_schema();
    schema.missing_col = "delta";
    schema.weight_col = "wt";
    const Dataset d = parse(
        "x1,x2,a,delta,y,wt\n"
        "0.5,1,0.25,1,1,2\n"
        "-0.5,0,,1,0,1\n"
        "0.1,1,0.75,0,,1.5\n",
        schema);
    REQUIRE(d.n() == 3);
    CHECK(d.d() == 2);
    CHECK(d.covariate_names == std::vector<std::string>{"x1", "x2"});
    CHECK(d.a[0] == 0.25);
    CHECK(d.r[0] == 1);
    CHECK(d.r[1] == 0);       // inferred from the empty biomarker cell
    CHECK(std::isnan(d.a[1]));
    CHECK(d.delta[2] == 0);
    CHECK(std::isnan(d.y[2]));
    CHECK(d.weight[0] == 2.0);
    CHECK(d.weight[2] == 1.5);
}

TEST_CASE("CSV defaults when optional columns are absent") {
    const Dataset d = parse("a,y\n0.1,1\nNA,0\n", basic_schema());
    CHECK(d.r[0] == 1);
    CHECK(d.r[1] == 0);
    CHECK(d.delta[0] == 1);
    CHECK(d.weight[0] == 1.0);
}

TEST_CASE("CSV error paths") {
    CHECK_THROWS_AS(parse("", basic_schema()), EmptyDataset);
    CHECK_THROWS_AS(parse("a,y\n", basic_schema()), EmptyDataset);
    CHECK_THROWS_AS(parse("b,y\n1,1\n", basic_schema()), MalformedRow);  // missing column
    CHECK_THROWS_AS(parse("a,y\n1,1,9\n", basic_schema()), MalformedRow);  // ragged row
    CHECK_THROWS_AS(parse("a,y\nfoo,1\n", basic_schema()), MalformedRow);  // non-numeric
    CHECK_THROWS_AS(parse("a,y\n0.5,2\n", basic_schema()), InconsistentRecord);  // non-binary
    CsvSchema schema = basic_schema();
    schema.missing_col = "delta";
    CHECK_THROWS_AS(parse("a,delta,y\n0.5,1,\n", schema), InconsistentRecord);
    CsvSchema wschema = basic_schema();
    wschema.weight_col = "wt";
    CHECK_THROWS_AS(parse("a,y,wt\n0.5,1,0\n", wschema), InconsistentRecord);
}

TEST_CASE("validate rejects inconsistent hand-built records") {
    Dataset d;
    d.w.resize(1, 0);
    d.a.resize(1);
    d.a[0] = 0.5;
    d.y.resize(1);
    d.y[0] = 1.0;
    d.r = {0};  // biomarker present but flagged unmeasured
    d.delta = {1};
    d.weight = VectorXd::Ones(1);
    CHECK_THROWS_AS(d.validate(), InconsistentRecord);
    d.r = {1};
    CHECK_NOTHROW(d.validate());
    d.y[0] = 0.4;
    CHECK_THROWS_AS(d.validate(), InconsistentRecord);
    d.outcome_kind.binary = false;
    d.outcome_kind.hi = 1.0;
    CHECK_NOTHROW(d.validate());
    d.y[0] = 1.4;
    CHECK_THROWS_AS(d.validate(), OutOfRangeOutcome);
}

TEST_CASE("canonical serialization round-trips exactly") {
    DgpSpec spec;
    spec.family = DgpFamily::sim1;
    spec.n = 250;
    spec.seed = 77;
    const Dataset d = generate(spec);
    std::ostringstream out;
    write_csv(d, out);
    std::istringstream in(out.str());
    const Dataset back = load_csv(in, canonical_schema(d));
    REQUIRE(back.n() == d.n());
    CHECK(back.w == d.w);
    for (Eigen::Index i = 0; i < d.n(); ++i) {
        CHECK(back.r[i] == d.r[i]);
        CHECK(back.delta[i] == d.delta[i]);
        if (d.r[i]) CHECK(back.a[i] == d.a[i]);
        if (d.delta[i]) CHECK(back.y[i] == d.y[i]);
        CHECK(back.weight[i] == d.weight[i]);
    }
    // and the re-serialization is byte-identical
    std::ostringstream out2;
    write_csv(back, out2);
    CHECK(out.str() == out2.str());
}

TEST_CASE("threshold grid construction") {
    DgpSpec spec;
    spec.family = DgpFamily::sim1;
    spec.n = 200;
    spec.seed = 5;
    const Dataset d = generate(spec);

    CHECK_THROWS_AS(make_grid(d, {}), DegenerateGrid);
    CHECK_THROWS_AS(make_grid(d, {0.5, 0.5}), DegenerateGrid);
    CHECK_THROWS_AS(make_grid(d, {0.5, 0.2}), DegenerateGrid);
    CHECK_THROWS_AS(make_grid(d, {0.5, 10.0}), DegenerateGrid);  // nothing above 10
    const ThresholdGrid g = make_grid(d, {0.2, 0.8});
    CHECK(g.size() == 2);
    CHECK(g.provenance == GridProvenance::explicit_values);

    const ThresholdGrid q = quantile_grid(d, {0.0, 0.25, 0.5});
    REQUIRE(q.size() == 3);
    CHECK(q.values[0] < q.values[1]);
    CHECK(q.provenance == GridProvenance::quantile);
    CHECK_THROWS_AS(quantile_grid(d, {0.1, 1.2}), DegenerateGrid);

    // constant biomarker: all quantiles coincide
    Dataset flat = d;
    for (Eigen::Index i = 0; i < flat.n(); ++i)
        if (flat.r[i]) flat.a[i] = 1.0;
    CHECK_THROWS_AS(quantile_grid(flat, {0.1, 0.9}), DegenerateGrid);
}

TEST_CASE("min_above guard counts measured observations only") {
    Dataset d;
    const Eigen::Index n = 30;
    d.w.resize(n, 0);
    d.a.resize(n);
    d.y.resize(n);
    d.r.assign(n, 1);
    d.delta.assign(n, 1);
    d.weight = VectorXd::Ones(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        d.a[i] = static_cast<double>(i);
        d.y[i] = i % 2;
    }
    CHECK_NOTHROW(make_grid(d, {5.0, 20.0}));         // 10 values >= 20
    CHECK_THROWS_AS(make_grid(d, {5.0, 21.0}), DegenerateGrid);
    CHECK_NOTHROW(make_grid(d, {5.0, 25.0}, GridProvenance::explicit_values, 5));
}
