#include <doctest.h>

#include <cmath>
#include <sstream>

#include "polylab/errors.hpp"
#include "polylab/observables.hpp"

using namespace polylab;

namespace {

Model model_at(int n, double dx, double beta, std::int64_t steps) {
    DomainSpec d;
    d.n = n;
    d.dx = dx;
    d.dt = 0.01;
    d.beta = beta;
    d.n_steps = steps;
    return make_model(d, KernelSpec{});
}

}  // namespace

TEST_CASE("overlap of the uniform density") {
    const Model m = model_at(8, 1.0, 1.0, 1);
    const std::vector<double> f(8, 1.0 / 8.0);
    // (1/n) sum_k R(k) = (1.5 + 2 + 0.5) / 8
    CHECK(overlap_functional(f, m) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("overlap of a point mass is R(0)") {
    const Model m = model_at(32, 0.25, 1.0, 1);
    std::vector<double> f(32, 0.0);
    f[5] = 4.0;
    CHECK(overlap_functional(f, m) == doctest::Approx(0.375).epsilon(1e-12));
}

TEST_CASE("overlap: spectral against brute force, shift invariance") {
    const Model m = model_at(32, 0.25, 1.0, 1);
    std::vector<double> f(32);
    double s = 0.0;
    for (int x = 0; x < 32; ++x) s += f[x] = 1.0 + std::sin(0.7 * x) * 0.5 + (x % 3);
    for (double& v : f) v /= s * 0.25;
    const std::vector<double> r = m.cov.on_torus(m.domain);
    double brute = 0.0;
    for (int x = 0; x < 32; ++x)
        for (int y = 0; y < 32; ++y) brute += f[x] * f[y] * r[m.domain.wrap(x - y)];
    brute *= 0.0625;
    CHECK(std::abs(overlap_functional(f, m) - brute) < 1e-12);
    std::vector<double> g(32);
    for (int x = 0; x < 32; ++x) g[m.domain.wrap(x + 11)] = f[x];
    CHECK(std::abs(overlap_functional(g, m) - brute) < 1e-12);
}

TEST_CASE("overlap rejects unnormalized input") {
    const Model m = model_at(16, 0.25, 1.0, 1);
    CHECK_THROWS_AS(overlap_functional(std::vector<double>(16, 1.0), m), UsageError);
}

TEST_CASE("Ito decomposition holds pathwise up to the time-step error") {
    const Model m = model_at(128, 0.25, 1.0, 500);
    PathRecorder path(m);
    run_forward(m, NoiseStream{21, 0}, {}, SnapshotPolicy{SnapshotPolicy::Kind::none, {}}, &path);
    const OverlapSeries o = accumulate_overlap(path, m.domain);
    const MartingaleSeries ms = accumulate_martingale(path, o);
    CHECK(o.overlap.front() == 0.0);
    CHECK(ms.martingale.front() == 0.0);
    CHECK(o.final_qv() == doctest::Approx(o.final_overlap()));
    CHECK(std::abs(ms.residual.back()) < 0.1);
}

TEST_CASE("beta = 0: overlap of the heat kernel") {
    const Model m = model_at(64, 0.25, 0.0, 40);
    PathRecorder path(m);
    run_forward(m, NoiseStream{1, 0}, {}, SnapshotPolicy{SnapshotPolicy::Kind::none, {}}, &path);
    SpectralGrid grid(m.domain);
    double expect = 0.0;
    for (int i = 0; i < 40; ++i) {
        std::vector<double> p = initial_state(m.domain, {}).density;
        if (i > 0) apply_propagator(build_propagator(m.domain, HeatSymbol::lattice, i * 0.01), grid, p);
        expect += 0.01 * overlap_functional(p, m);
    }
    CHECK(accumulate_overlap(path, m.domain).final_overlap() == doctest::Approx(expect).epsilon(1e-12));
    CHECK(fixed_time_overlap(m, NoiseStream{1, 0}) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("Malliavin field: mass and bounds") {
    const Model m = model_at(64, 0.25, 0.7, 60);
    const MalliavinField f = malliavin_field(m, NoiseStream{2, 9}, 3);
    CHECK(f.slices.size() == 60);
    for (double mass : f.mass) CHECK(mass == doctest::Approx(0.7 * 0.5).epsilon(1e-12));
    for (double v : f.values) {
        CHECK(v >= 0.0);
        CHECK(v <= 0.7 * 1.0 * (1.0 + 1e-15));
    }
    std::ostringstream os;
    write_malliavin_csv(os, f, m.domain);
    CHECK(os.str().rfind("slice,time,site,value\n", 0) == 0);
}

TEST_CASE("local average and gradient of a linear profile") {
    DomainSpec d;
    d.n = 16;
    d.dx = 0.5;
    d.n_steps = 1;
    std::vector<double> h(16);
    for (int x = 0; x < 16; ++x) h[x] = d.centered(x) * 0.5;
    CHECK(local_average(h, 2, d) == doctest::Approx(0.0));
    CHECK(local_average(h, 1, d, 3) == doctest::Approx(1.5));
    std::vector<double> flat(16, 2.0);
    CHECK(mean_squared_gradient(flat, d) == 0.0);
}

TEST_CASE("increment moments of a deterministic field") {
    DomainSpec d;
    d.n = 8;
    d.dx = 1.0;
    d.n_steps = 1;
    IncrementAccumulator acc(d, {0, 1, 2});
    std::vector<double> h{0, 1, 0, 1, 0, 1, 0, 1};
    acc.add(h);
    acc.add(h);
    const IncrementMoments r = acc.result(1.0, 1.5);
    CHECK(r.moment[0] == 0.0);
    CHECK(r.moment[1] == doctest::Approx(1.0));
    CHECK(r.moment[2] == doctest::Approx(0.0));
    CHECK(r.bound[1] == doctest::Approx(1.5));
    CHECK(r.ratio[1] == doctest::Approx(1.0 / 1.5));
}

TEST_CASE("endpoint mode ties go to the smallest index") {
    DomainSpec d;
    d.n = 8;
    d.dx = 1.0;
    d.n_steps = 1;
    const std::vector<double> rho{0, 0.3, 0, 0.3, 0.2, 0.1, 0.1, 0};
    const EndpointMode e = endpoint_mode(rho, d);
    CHECK(e.site == 1);
    CHECK(e.centered[0] == doctest::Approx(0.3));
    CHECK(e.centered[2] == doctest::Approx(0.3));
}

TEST_CASE("box-averaged derivative: bound and integral") {
    const Model m = model_at(64, 0.25, 1.0, 100);
    BksOptions opt;
    opt.half_widths = {1, 2};
    opt.slices = {0, 50, 99};
    opt.realizations = 4;
    opt.master_seed = 5;
    const BksQuantities q = bks_derivative_average(m, opt);
    REQUIRE(q.boxes.size() == 2);
    for (const BksBox& b : q.boxes) {
        CHECK(b.box_volume == doctest::Approx((2 * b.half_width + 1) * 0.25));
        CHECK(b.ratio_lower_bound == doctest::Approx(std::sqrt(1.0 / 0.5 * b.box_volume)));
        CHECK(b.a_squared_target == doctest::Approx(1.0 * 1.0 * 0.5 * 1.0));
        // the s-integral of A^2 over y is exact per slice: beta linf * beta l1
        CHECK(b.a_squared_integral == doctest::Approx(b.a_squared_target).epsilon(1e-10));
        CHECK(b.worst_shortfall_sigma <= 3.0);
    }
    opt.site_budget = 3;
    CHECK_THROWS_AS(bks_derivative_average(m, opt), UsageError);
}
