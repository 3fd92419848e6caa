#include "polylab/solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "polylab/errors.hpp"

namespace polylab {

std::string to_string(HeatSymbol symbol) { return symbol == HeatSymbol::lattice ? "lattice" : "continuum"; }

HeatSymbol heat_symbol_from_string(const std::string& name) {
    if (name == "lattice") return HeatSymbol::lattice;
    if (name == "continuum") return HeatSymbol::continuum;
    throw ConfigError("unknown propagator symbol '" + name + "'");
}

HeatPropagator build_propagator(const DomainSpec& domain, HeatSymbol symbol) {
    return build_propagator(domain, symbol, domain.dt);
}

HeatPropagator build_propagator(const DomainSpec& domain, HeatSymbol symbol, double time) {
    domain.validate();
    if (!(time >= 0.0)) throw UsageError("propagator time must be >= 0");
    HeatPropagator prop;
    prop.symbol = symbol;
    prop.time = time;

    const SpectralGrid grid(domain);
    const double two_pi_over_l = 2.0 * std::numbers::pi / domain.side_length();
    const double dx = domain.dx;
    auto axis_rate = [&](int freq) {
        const double k = two_pi_over_l * freq;
        if (symbol == HeatSymbol::continuum) return 0.5 * k * k;
        return (1.0 - std::cos(k * dx)) / (dx * dx);
    };

    prop.multipliers.resize(grid.modes());
    for (std::size_t m = 0; m < grid.modes(); ++m) {
        const auto [fa, fb] = grid.frequency(m);
        double rate = axis_rate(fb);
        if (domain.dim == 2) rate += axis_rate(fa);
        prop.multipliers[m] = std::exp(-time * rate);
    }
    return prop;
}

namespace {

void multiply_spectrum(const HeatPropagator& prop, SpectralGrid& grid) {
    auto spec = grid.spectrum();
    for (std::size_t m = 0; m < spec.size(); ++m) spec[m] *= prop.multipliers[m];
}

void clamp_rounding_negatives(std::span<double> field) {
    for (double& v : field)
        if (v < 0.0) v = 0.0;
}

double sum_of(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
}

}  // namespace

void apply_propagator(const HeatPropagator& prop, SpectralGrid& grid, std::span<double> field) {
    if (field.size() != grid.sites() || prop.multipliers.size() != grid.modes())
        throw UsageError("propagator shape does not match field");
    std::copy(field.begin(), field.end(), grid.real().begin());
    grid.forward();
    multiply_spectrum(prop, grid);
    grid.inverse();
    const auto out = grid.real();
    std::copy(out.begin(), out.end(), field.begin());
    if (prop.symbol == HeatSymbol::lattice) clamp_rounding_negatives(field);
}

Model make_model(const DomainSpec& domain, const KernelSpec& kernel, HeatSymbol symbol) {
    domain.validate();
    Model model;
    model.domain = domain;
    model.kernel = build_mollifier(kernel.shape, kernel.radius, kernel.amplitude, domain);
    model.cov = covariance_from_mollifier(model.kernel, domain);
    model.prop = build_propagator(domain, symbol);
    SpectralGrid grid(domain);
    model.cov_spectrum = real_spectrum(grid, model.cov.on_torus(domain));
    return model;
}

Model with_horizon(const Model& model, std::int64_t n_steps) {
    Model out = model;
    out.domain.n_steps = n_steps;
    out.domain.validate();
    return out;
}

FieldState initial_state(const DomainSpec& domain, InitialData init) {
    FieldState state;
    state.density.assign(domain.sites(), 0.0);
    if (init.kind == InitialKind::delta_at_origin) {
        state.density[0] = 1.0 / domain.cell_volume();
        state.log_mass = 0.0;
    } else {
        std::fill(state.density.begin(), state.density.end(), 1.0 / domain.volume());
        state.log_mass = std::log(domain.volume());
    }
    return state;
}

std::vector<double> height_field(const FieldState& state, const DomainSpec& domain) {
    std::vector<double> h(domain.sites());
    for (std::size_t x = 0; x < h.size(); ++x) h[x] = std::log(state.density[x]) + state.log_mass;
    return h;
}

BackwardState terminal_state(const DomainSpec& domain, BackwardTerminal terminal) {
    BackwardState state;
    state.step = domain.n_steps;
    state.weights.assign(domain.sites(), 0.0);
    if (terminal.kind == BackwardTerminal::Kind::constant_one) {
        std::fill(state.weights.begin(), state.weights.end(), 1.0 / domain.volume());
        state.log_mass = std::log(domain.volume());
    } else {
        if (terminal.site >= domain.sites()) throw UsageError("terminal site outside the grid");
        state.weights[terminal.site] = 1.0 / domain.cell_volume();
        state.log_mass = 0.0;
    }
    return state;
}

ForwardSolver::ForwardSolver(const Model& model, const NoiseStream& stream, SchemeOptions options)
    : model_(&model), stream_(stream), options_(options), grid_(model.domain) {
    const std::size_t sites = model.domain.sites();
    eta_.resize(sites);
    xi_.resize(sites);
    rho_.resize(sites);
    diffused_.resize(sites);
    spectrum_.resize(grid_.modes());
}

void ForwardSolver::step(FieldState& state, StepObserver* observer) {
    const DomainSpec& domain = model_->domain;
    fill_noise_slice(stream_, state.step, domain, eta_);
    mollify_into(eta_, model_->kernel, domain, xi_);
    step(state, xi_, observer);
}

void ForwardSolver::step(FieldState& state, std::span<const double> xi, StepObserver* observer) {
    const DomainSpec& domain = model_->domain;
    const std::size_t sites = domain.sites();
    if (state.density.size() != sites || xi.size() != sites) throw UsageError("forward step: shape mismatch");
    if (state.step < 0 || state.step >= domain.n_steps)
        throw UsageError("forward step " + std::to_string(state.step) + " outside the horizon");

    // diffuse
    std::copy(state.density.begin(), state.density.end(), grid_.real().begin());
    grid_.forward();
    const auto spec = grid_.spectrum();
    std::copy(spec.begin(), spec.end(), spectrum_.begin());
    multiply_spectrum(model_->prop, grid_);
    grid_.inverse();
    const auto diffused = grid_.real();
    std::copy(diffused.begin(), diffused.end(), diffused_.begin());
    if (model_->prop.symbol == HeatSymbol::lattice) clamp_rounding_negatives(diffused_);

    // tilt; the exponent is shifted by its max so exp never overflows
    const double beta = domain.beta;
    const double ito = 0.5 * beta * beta * model_->cov.r0 * domain.dt;
    const double drift = options_.flip_ito_sign ? ito : -ito;
    const double bdt = beta * domain.dt;
    double amax = -std::numeric_limits<double>::infinity();
    for (std::size_t x = 0; x < sites; ++x) {
        rho_[x] = bdt * xi[x] + drift;
        amax = std::max(amax, rho_[x]);
    }
    double s_p = 0.0;
    double s_t = 0.0;
    for (std::size_t x = 0; x < sites; ++x) {
        const double tilted = diffused_[x] * std::exp(rho_[x] - amax);
        rho_[x] = tilted;
        s_p += diffused_[x];
        s_t += tilted;
    }
    const double increment = amax + std::log(s_t / s_p);
    if (!std::isfinite(increment) || !(s_t > 0.0)) throw NumericalError("forward field lost finiteness", state.step);

    const double norm = 1.0 / (s_t * domain.cell_volume());
    for (double& v : rho_) v *= norm;

    if (observer != nullptr) {
        StepView view;
        view.step = state.step;
        view.density = state.density;
        view.spectrum = spectrum_;
        view.diffused = diffused_;
        view.xi = xi;
        view.log_mass_before = state.log_mass;
        view.log_increment = increment;
        observer->on_step(view);
    }
    state.density.swap(rho_);
    state.log_mass += increment;
    state.step += 1;
    if (observer != nullptr) observer->on_state(state);
}

BackwardSolver::BackwardSolver(const Model& model, const NoiseStream& stream)
    : model_(&model), stream_(stream), grid_(model.domain) {
    eta_.resize(model.domain.sites());
    xi_.resize(model.domain.sites());
}

void BackwardSolver::step(BackwardState& state) {
    const DomainSpec& domain = model_->domain;
    fill_noise_slice(stream_, state.step - 1, domain, eta_);
    mollify_into(eta_, model_->kernel, domain, xi_);
    step(state, xi_);
}

void BackwardSolver::step(BackwardState& state, std::span<const double> xi) {
    const DomainSpec& domain = model_->domain;
    const std::size_t sites = domain.sites();
    if (state.weights.size() != sites || xi.size() != sites) throw UsageError("backward step: shape mismatch");
    if (state.step <= 0 || state.step > domain.n_steps)
        throw UsageError("backward step from " + std::to_string(state.step) + " outside the horizon");

    const double beta = domain.beta;
    const double drift = -0.5 * beta * beta * model_->cov.r0 * domain.dt;
    const double bdt = beta * domain.dt;
    auto real = grid_.real();
    double amax = -std::numeric_limits<double>::infinity();
    for (std::size_t x = 0; x < sites; ++x) {
        real[x] = bdt * xi[x] + drift;
        amax = std::max(amax, real[x]);
    }
    const double s_before = sum_of(state.weights);
    for (std::size_t x = 0; x < sites; ++x) real[x] = state.weights[x] * std::exp(real[x] - amax);
    grid_.forward();
    multiply_spectrum(model_->prop, grid_);
    grid_.inverse();
    if (model_->prop.symbol == HeatSymbol::lattice) clamp_rounding_negatives(grid_.real());
    const double s_after = sum_of(grid_.real());
    const double increment = amax + std::log(s_after / s_before);
    if (!std::isfinite(increment) || !(s_after > 0.0))
        throw NumericalError("backward field lost finiteness", state.step - 1);

    const double norm = 1.0 / (s_after * domain.cell_volume());
    for (std::size_t x = 0; x < sites; ++x) state.weights[x] = real[x] * norm;
    state.log_mass += increment;
    state.step -= 1;
}

FieldState forward_step(const FieldState& state, const XiSlice& xi, const Model& model) {
    if (xi.step != state.step) throw UsageError("forward_step: xi slice step does not match state step");
    ForwardSolver solver(model, NoiseStream{});
    FieldState next = state;
    solver.step(next, xi.values);
    return next;
}

std::vector<std::int64_t> SnapshotPolicy::resolve(std::int64_t n_steps) const {
    std::vector<std::int64_t> out;
    switch (kind) {
        case Kind::none:
            return out;
        case Kind::all:
            for (std::int64_t i = 0; i <= n_steps; ++i) out.push_back(i);
            return out;
        case Kind::geometric:
            for (std::int64_t s = 1; s < n_steps; s *= 2) out.push_back(s);
            out.push_back(n_steps);
            break;
        case Kind::explicit_steps:
            for (std::int64_t s : steps) {
                if (s < 0 || s > n_steps) throw UsageError("snapshot step " + std::to_string(s) + " outside [0, n_steps]");
                out.push_back(s);
            }
            out.push_back(n_steps);
            break;
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

ForwardTrajectory run_forward(const Model& model, const NoiseStream& stream, InitialData init,
                              const SnapshotPolicy& policy, StepObserver* observer, SchemeOptions options) {
    const DomainSpec& domain = model.domain;
    const std::int64_t n = domain.n_steps;
    const std::vector<std::int64_t> wanted = policy.resolve(n);
    auto next_snapshot = wanted.begin();

    ForwardTrajectory traj;
    traj.init = init;
    traj.log_mass.reserve(static_cast<std::size_t>(n) + 1);

    FieldState state = initial_state(domain, init);
    ForwardSolver solver(model, stream, options);
    if (observer != nullptr) observer->on_state(state);

    auto record = [&] {
        traj.log_mass.push_back(state.log_mass);
        if (next_snapshot != wanted.end() && *next_snapshot == state.step) {
            traj.snapshots.push_back({state.step, state.density, state.log_mass});
            ++next_snapshot;
        }
    };
    record();
    while (state.step < n) {
        solver.step(state, observer);
        record();
    }
    traj.final_state = std::move(state);
    return traj;
}

BackwardTrajectory run_backward(const Model& model, const NoiseStream& stream, BackwardTerminal terminal,
                                std::int64_t down_to, const SnapshotPolicy& policy) {
    const DomainSpec& domain = model.domain;
    const std::int64_t n = domain.n_steps;
    if (down_to < 0 || down_to > n) throw UsageError("run_backward: down_to outside [0, n_steps]");
    const std::vector<std::int64_t> wanted = policy.resolve(n);

    BackwardTrajectory traj;
    traj.terminal = terminal;
    traj.log_mass.assign(static_cast<std::size_t>(n) + 1, 0.0);

    BackwardState state = terminal_state(domain, terminal);
    BackwardSolver solver(model, stream);
    auto record = [&] {
        traj.log_mass[static_cast<std::size_t>(state.step)] = state.log_mass;
        if (std::binary_search(wanted.begin(), wanted.end(), state.step))
            traj.snapshots.push_back({state.step, state.weights, state.log_mass});
    };
    record();
    while (state.step > down_to) {
        solver.step(state);
        record();
    }
    std::reverse(traj.snapshots.begin(), traj.snapshots.end());
    traj.final_state = std::move(state);
    return traj;
}

std::vector<double> gibbs_marginal(const FieldState& fwd, const BackwardState& bwd, const DomainSpec& domain) {
    if (fwd.step != bwd.step) throw UsageError("gibbs_marginal: forward and backward steps differ");
    const std::size_t sites = domain.sites();
    if (fwd.density.size() != sites || bwd.weights.size() != sites) throw UsageError("gibbs_marginal: shape mismatch");
    std::vector<double> mu(sites);
    double total = 0.0;
    for (std::size_t x = 0; x < sites; ++x) {
        mu[x] = fwd.density[x] * bwd.weights[x];
        total += mu[x];
    }
    if (!(total > 0.0) || !std::isfinite(total)) throw NumericalError("gibbs marginal has zero mass", fwd.step);
    const double norm = 1.0 / (total * domain.cell_volume());
    for (double& v : mu) v *= norm;
    return mu;
}

double pairing_log(const FieldState& fwd, const BackwardState& bwd, const DomainSpec& domain) {
    double total = 0.0;
    for (std::size_t x = 0; x < fwd.density.size(); ++x) total += fwd.density[x] * bwd.weights[x];
    return std::log(total * domain.cell_volume()) + fwd.log_mass + bwd.log_mass;
}

void sweep_paired(const Model& model, const NoiseStream& stream, InitialData init, BackwardTerminal terminal,
                  const std::function<void(const FieldState&, const BackwardState&)>& visit) {
    const DomainSpec& domain = model.domain;
    const std::int64_t n = domain.n_steps;
    const auto stride = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(std::sqrt(static_cast<double>(n)))));

    ForwardSolver fsolver(model, stream);
    BackwardSolver bsolver(model, stream);

    std::vector<FieldState> checkpoints;
    FieldState state = initial_state(domain, init);
    checkpoints.push_back(state);
    while (state.step < n) {
        fsolver.step(state);
        if (state.step % stride == 0 && state.step < n) checkpoints.push_back(state);
    }

    BackwardState bwd = terminal_state(domain, terminal);
    std::vector<FieldState> segment;
    for (auto cp = checkpoints.rbegin(); cp != checkpoints.rend(); ++cp) {
        const std::int64_t lo = cp->step;
        const std::int64_t hi = std::min(lo + stride, n);
        segment.clear();
        segment.push_back(*cp);
        while (segment.back().step < hi) {
            FieldState next = segment.back();
            fsolver.step(next);
            segment.push_back(std::move(next));
        }
        // visit (lo, hi]; step 0 is visited after the loop
        for (auto it = segment.rbegin(); it != segment.rend() && it->step > lo; ++it) {
            while (bwd.step > it->step) bsolver.step(bwd);
            visit(*it, bwd);
        }
    }
    while (bwd.step > 0) bsolver.step(bwd);
    visit(checkpoints.front(), bwd);
}

}  // namespace polylab
