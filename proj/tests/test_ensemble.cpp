#include <doctest.h>

#include <cmath>

#include "polylab/ensemble.hpp"

using namespace polylab;

namespace {

EnsembleSpec small_spec(double T, std::size_t N) {
    EnsembleSpec s;
    s.domain.n = 128;
    s.domain.dx = 0.25;
    s.domain.dt = 0.01;
    s.domain.beta = 1.0;
    s.domain.n_steps = static_cast<std::int64_t>(std::llround(T / 0.01));
    s.master_seed = 77;
    s.realizations = N;
    return s;
}

bool same(const RunRecord& a, const RunRecord& b) {
    return a.realization_id == b.realization_id && a.log_Z_T == b.log_Z_T && a.O_T == b.O_T && a.M_T == b.M_T &&
           a.qv_T == b.qv_T && a.residual_T == b.residual_T && a.boundary_mass == b.boundary_mass && a.failed == b.failed;
}

}  // namespace

TEST_CASE("records and summaries do not depend on the worker count") {
    const EnsembleSpec spec = small_spec(1.0, 23);
    const EnsembleResult one = run_ensemble(spec, 1);
    for (unsigned jobs : {2u, 4u, 16u}) {
        const EnsembleResult many = run_ensemble(spec, jobs);
        REQUIRE(many.records.size() == one.records.size());
        for (std::size_t i = 0; i < one.records.size(); ++i) CHECK(same(one.records[i], many.records[i]));
        for (const auto& [key, acc] : one.summary) {
            CHECK(many.summary.at(key).mean == acc.mean);
            CHECK(many.summary.at(key).m2 == acc.m2);
        }
    }
    CHECK(one.accepted + one.failed == 23);
    CHECK(one.records.front().realization_id == 0);
    CHECK(one.records.back().realization_id == 22);
}

TEST_CASE("a realization depends only on its id") {
    EnsembleSpec spec = small_spec(0.5, 4);
    spec.first_id = 10;
    const EnsembleResult a = run_ensemble(spec, 1);
    spec.first_id = 12;
    spec.realizations = 1;
    const EnsembleResult b = run_ensemble(spec, 1);
    CHECK(same(a.records[2], b.records[0]));
}

TEST_CASE("tree merge agrees with a sequential merge") {
    const EnsembleResult r = run_ensemble(small_spec(0.5, 9), 1);
    std::vector<Summary> leaves;
    Accumulator seq;
    for (const RunRecord& rec : r.records) {
        leaves.push_back(summarize(rec));
        seq.add(rec.log_Z_T);
    }
    const Summary tree = merge_tree(leaves);
    CHECK(tree.at("log_Z_T").count == 9);
    CHECK(tree.at("log_Z_T").mean == doctest::Approx(seq.mean).epsilon(1e-14));
    CHECK(tree.at("log_Z_T").variance() == doctest::Approx(seq.variance()).epsilon(1e-12));
}

TEST_CASE("boundary rejection on a small torus") {
    EnsembleSpec spec = small_spec(8.0, 6);
    spec.domain.n = 32;
    const EnsembleResult r = run_ensemble(spec, 1);
    CHECK(r.boundary_rejected == 6);
    CHECK(r.failed == 6);
    CHECK(r.accepted == 0);
    for (const RunRecord& rec : r.records) CHECK(rec.failure == "boundary");
    CHECK(column(r.records, &RunRecord::log_Z_T).empty());

    spec.init = InitialKind::constant_one;
    CHECK(run_ensemble(spec, 1).failed == 0);
}

TEST_CASE("height snapshots of constant-start runs") {
    EnsembleSpec spec = small_spec(1.0, 3);
    spec.init = InitialKind::constant_one;
    spec.recording.snapshot_steps = {50, 100};
    spec.recording.lags = {0, 1, 2};
    spec.recording.box_half_widths = {2};
    spec.recording.box_centers = 4;
    const EnsembleResult r = run_ensemble(spec, 1);
    for (const RunRecord& rec : r.records) {
        REQUIRE(rec.heights.size() == 2);
        CHECK(rec.heights[1].step == 100);
        CHECK(std::isfinite(rec.heights[1].h_origin));
        CHECK(rec.heights[0].increments.size() == 3);
        CHECK(rec.heights[0].increments[0] == 0.0);
        CHECK(rec.heights[0].box_average.size() == 4);
    }
}

TEST_CASE("gamma estimate on exact linear means") {
    std::vector<SeriesAtT> s;
    for (double T : {10.0, 20.0, 40.0}) {
        std::vector<double> v;
        for (int k = -2; k <= 2; ++k) v.push_back(-(0.3 + 0.05 * T) + 0.1 * k);
        s.push_back({T, v});
    }
    const GammaEstimate g = estimate_gamma(s);
    CHECK(g.gamma_hat == doctest::Approx(0.05).epsilon(1e-10));
    CHECK(g.intercept == doctest::Approx(0.3).epsilon(1e-10));
    CHECK(g.ci_low < 0.05);
    CHECK(g.ci_high > 0.05);
    CHECK(g.points.size() == 3);
}

TEST_CASE("zero-variance input: gamma is zero with a finite interval") {
    std::vector<SeriesAtT> s;
    for (double T : {1.0, 2.0, 4.0}) s.push_back({T, std::vector<double>(10, 0.0)});
    const GammaEstimate g = estimate_gamma(s);
    CHECK(g.gamma_hat == 0.0);
    CHECK(g.se == 0.0);

    const std::vector<TestReport> reps = normality_reports("x", std::vector<double>(50, 0.0), Tolerances{}, 1);
    REQUIRE(!reps.empty());
    for (const TestReport& r : reps) {
        CHECK_FALSE(r.pass);
        CHECK(r.note.find("degenerate") != std::string::npos);
    }
}

TEST_CASE("normalization check on exact unit-mean weights") {
    std::vector<double> lz;
    for (int k = 0; k < 1000; ++k) {
        const double z = standard_normal(4, 0, k) * 0.3;
        lz.push_back(z - 0.045);
    }
    const TestReport r = normalization_check(lz, 1.0, 0.5, 0.375, Tolerances{});
    CHECK(r.pass);
}

TEST_CASE("ito convergence requires a strict decrease") {
    auto lvl = [](double dt, double mean) {
        Accumulator a;
        a.add(mean);
        a.add(mean);
        return std::pair<double, Accumulator>{dt, a};
    };
    const std::vector<std::pair<double, Accumulator>> good{lvl(0.04, 0.3), lvl(0.02, 0.15), lvl(0.01, 0.08)};
    CHECK(ito_convergence(good).pass);
    const std::vector<std::pair<double, Accumulator>> bad{lvl(0.04, 0.3), lvl(0.02, 0.31), lvl(0.01, 0.08)};
    CHECK_FALSE(ito_convergence(bad).pass);
}
