#include <doctest.h>

#include <cmath>

#include "polylab/observables.hpp"
#include "polylab/solver.hpp"

using namespace polylab;

namespace {

Model small_model(double beta, std::int64_t steps, int n = 64) {
    DomainSpec d;
    d.n = n;
    d.dx = 0.25;
    d.dt = 0.01;
    d.beta = beta;
    d.n_steps = steps;
    return make_model(d, KernelSpec{});
}

double total(const std::vector<double>& v, double cell) {
    double s = 0.0;
    for (double x : v) s += x;
    return s * cell;
}

}  // namespace

TEST_CASE("initial states") {
    const Model m = small_model(1.0, 10);
    const FieldState delta = initial_state(m.domain, InitialData{InitialKind::delta_at_origin});
    CHECK(delta.density[0] == doctest::Approx(4.0));
    CHECK(delta.log_mass == 0.0);
    const FieldState flat = initial_state(m.domain, InitialData{InitialKind::constant_one});
    CHECK(flat.log_mass == doctest::Approx(std::log(16.0)));
    for (double h : height_field(flat, m.domain)) CHECK(std::abs(h) < 1e-14);
}

TEST_CASE("semigroup and normalization of the heat propagator") {
    for (HeatSymbol sym : {HeatSymbol::lattice, HeatSymbol::continuum}) {
        const Model m = small_model(0.0, 1);
        SpectralGrid grid(m.domain);
        std::vector<double> a = initial_state(m.domain, {}).density, b = a;
        apply_propagator(build_propagator(m.domain, sym, 0.3), grid, a);
        apply_propagator(build_propagator(m.domain, sym, 0.2), grid, a);
        apply_propagator(build_propagator(m.domain, sym, 0.5), grid, b);
        for (std::size_t x = 0; x < a.size(); ++x) CHECK(std::abs(a[x] - b[x]) < 1e-12);
        CHECK(total(a, m.domain.cell_volume()) == doctest::Approx(1.0).epsilon(1e-13));
    }
}

TEST_CASE("density stays normalized under the tilt") {
    const Model m = small_model(1.0, 300);
    struct Check : StepObserver {
        double cell;
        double worst = 0.0;
        void on_step(const StepView&) override {}
        void on_state(const FieldState& s) override {
            double t = 0.0;
            for (double v : s.density) t += v;
            worst = std::max(worst, std::abs(t * cell - 1.0));
        }
    } check;
    check.cell = m.domain.cell_volume();
    run_forward(m, NoiseStream{3, 0}, {}, SnapshotPolicy{SnapshotPolicy::Kind::none, {}}, &check);
    CHECK(check.worst < 1e-12);
}

TEST_CASE("constant xi gives the exact log-mass increment") {
    const Model m = small_model(0.8, 1);
    FieldState s = initial_state(m.domain, {});
    ForwardSolver solver(m, NoiseStream{1, 1});
    const std::vector<double> xi(m.domain.sites(), 2.0);
    solver.step(s, xi);
    const double r0 = m.cov.r0;
    CHECK(s.log_mass == doctest::Approx(0.8 * 2.0 * 0.01 - 0.5 * 0.64 * r0 * 0.01).epsilon(1e-14));
}

TEST_CASE("beta = 0 reproduces the heat kernel") {
    const Model m = small_model(0.0, 50);
    const ForwardTrajectory t = run_forward(m, NoiseStream{5, 5}, {});
    SpectralGrid grid(m.domain);
    std::vector<double> heat = initial_state(m.domain, {}).density;
    apply_propagator(build_propagator(m.domain, HeatSymbol::lattice, m.domain.horizon()), grid, heat);
    for (std::size_t x = 0; x < heat.size(); ++x) CHECK(std::abs(t.final_state.density[x] - heat[x]) < 1e-12);
    CHECK(t.final_state.log_mass == 0.0);
}

TEST_CASE("forward and backward pairing is constant") {
    const Model m = small_model(1.0, 60);
    const NoiseStream stream{11, 2};
    double lo = INFINITY, hi = -INFINITY;
    std::int64_t visits = 0, last = -1;
    sweep_paired(m, stream, {}, BackwardTerminal{}, [&](const FieldState& f, const BackwardState& b) {
        const double p = pairing_log(f, b, m.domain);
        lo = std::min(lo, p);
        hi = std::max(hi, p);
        CHECK(f.step == b.step);
        if (last >= 0) CHECK(f.step == last - 1);
        last = f.step;
        ++visits;
    });
    CHECK(visits == 61);
    CHECK(hi - lo < 1e-10);

    // endpoints: terminal constant pairs to log Z, initial pairs to the backward mass
    const ForwardTrajectory t = run_forward(m, stream, {});
    CHECK(lo == doctest::Approx(t.final_state.log_mass).epsilon(1e-9));
}

TEST_CASE("flipped Ito sign breaks the pairing") {
    const Model m = small_model(1.0, 40);
    const NoiseStream stream{11, 2};
    FieldState f = initial_state(m.domain, {});
    ForwardSolver fs(m, stream, SchemeOptions{true});
    for (int i = 0; i < 40; ++i) fs.step(f);
    const ForwardTrajectory good = run_forward(m, stream, {});
    CHECK(std::abs(f.log_mass - good.final_state.log_mass) > 1e-3);
}

TEST_CASE("trajectories are reproducible from the stream") {
    const Model m = small_model(1.0, 30);
    const ForwardTrajectory a = run_forward(m, NoiseStream{8, 3}, {});
    const ForwardTrajectory b = run_forward(m, NoiseStream{8, 3}, {});
    CHECK(a.final_state.density == b.final_state.density);
    CHECK(a.log_mass == b.log_mass);
}

TEST_CASE("gibbs marginal is a normalized density") {
    const Model m = small_model(1.0, 20);
    const NoiseStream stream{4, 4};
    sweep_paired(m, stream, {}, BackwardTerminal{}, [&](const FieldState& f, const BackwardState& b) {
        const std::vector<double> mu = gibbs_marginal(f, b, m.domain);
        CHECK(total(mu, m.domain.cell_volume()) == doctest::Approx(1.0).epsilon(1e-12));
    });
}
