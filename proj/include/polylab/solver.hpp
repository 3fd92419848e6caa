#pragma once

// Feynman-Kac recursion on the torus.
//
// Forward (polymer endpoint / stochastic heat equation):
//     rho_{i+1} = normalize( tilt_i * P rho_i ),   tilt_i = exp(beta xi_i dt - beta^2 R(0) dt / 2)
// Fields are carried as (density with dx^d sum = 1, log_mass).
//
// Tilt ownership: the forward state at step i has absorbed slices 0..i-1;
// the backward state at step i has absorbed slices i..n_steps-1, i.e.
//     w_i = P( tilt_i * w_{i+1} ).
// With this split dx^d sum_x fwd_i(x) bwd_i(x) (log masses reattached) is the
// same number for every i.

#include <complex>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "polylab/environment.hpp"
#include "polylab/spectral.hpp"

namespace polylab {

enum class HeatSymbol {
    /// exp(-t (1 - cos(k dx)) / dx^2) per axis: continuous-time random walk
    /// on the grid. Positivity preserving.
    lattice,
    /// exp(-t |k|^2 / 2): band-limited Gaussian. Has negative lobes when
    /// t is not large against dx^2.
    continuum,
};

std::string to_string(HeatSymbol symbol);
HeatSymbol heat_symbol_from_string(const std::string& name);

struct HeatPropagator {
    HeatSymbol symbol = HeatSymbol::lattice;
    double time = 0.0;
    /// One multiplier per stored (half-spectrum) mode of SpectralGrid.
    std::vector<double> multipliers;
};

HeatPropagator build_propagator(const DomainSpec& domain, HeatSymbol symbol = HeatSymbol::lattice);
HeatPropagator build_propagator(const DomainSpec& domain, HeatSymbol symbol, double time);

/// In place: field <- P field. Clamps rounding negatives to zero for the
/// lattice symbol.
void apply_propagator(const HeatPropagator& prop, SpectralGrid& grid, std::span<double> field);

/// Everything a trajectory needs that is shared, immutable, and identical
/// across realizations.
struct Model {
    DomainSpec domain;
    Mollifier kernel;
    CovarianceTable cov;
    HeatPropagator prop;
    /// Real DFT of the torus R table on the half spectrum.
    std::vector<double> cov_spectrum;
};

struct KernelSpec {
    KernelShape shape = KernelShape::triangular;
    int radius = 1;
    double amplitude = 1.0;

    bool operator==(const KernelSpec&) const = default;
};

Model make_model(const DomainSpec& domain, const KernelSpec& kernel, HeatSymbol symbol = HeatSymbol::lattice);

/// Same model on a different horizon.
Model with_horizon(const Model& model, std::int64_t n_steps);

enum class InitialKind { delta_at_origin, constant_one };

struct InitialData {
    InitialKind kind = InitialKind::delta_at_origin;
};

struct FieldState {
    std::vector<double> density;
    double log_mass = 0.0;
    std::int64_t step = 0;
};

FieldState initial_state(const DomainSpec& domain, InitialData init);

/// h(t, x) = log u(t, x) = log density + log_mass. The constant start begins
/// with log_mass = log |torus|, so u(0, .) = 1.
std::vector<double> height_field(const FieldState& state, const DomainSpec& domain);

struct BackwardTerminal {
    enum class Kind { constant_one, delta_at } kind = Kind::constant_one;
    std::size_t site = 0;
};

struct BackwardState {
    std::vector<double> weights;
    double log_mass = 0.0;
    std::int64_t step = 0;
};

BackwardState terminal_state(const DomainSpec& domain, BackwardTerminal terminal);

/// Test hooks. Never enabled in production configurations.
struct SchemeOptions {
    /// Flips the sign of the Ito correction in the forward tilt only.
    bool flip_ito_sign = false;
};

/// Everything known about one forward step i -> i+1.
struct StepView {
    std::int64_t step = 0;
    std::span<const double> density;                ///< rho_i
    std::span<const std::complex<double>> spectrum;  ///< DFT of rho_i (half spectrum)
    std::span<const double> diffused;               ///< P rho_i, the predictable density
    std::span<const double> xi;                     ///< xi_i
    double log_mass_before = 0.0;
    double log_increment = 0.0;
};

class StepObserver {
public:
    virtual ~StepObserver() = default;
    virtual void on_step(const StepView& view) = 0;
    /// Called with the initial state and after every step.
    virtual void on_state(const FieldState&) {}
};

/// Forward evolution with reusable workspace. Not thread-safe; one per worker.
class ForwardSolver {
public:
    ForwardSolver(const Model& model, const NoiseStream& stream, SchemeOptions options = {});

    /// One step using the slice regenerated from the stream at state.step.
    void step(FieldState& state, StepObserver* observer = nullptr);
    /// One step with a caller-supplied xi slice.
    void step(FieldState& state, std::span<const double> xi, StepObserver* observer = nullptr);

    const Model& model() const { return *model_; }
    SpectralGrid& grid() { return grid_; }

private:
    const Model* model_;
    NoiseStream stream_;
    SchemeOptions options_;
    SpectralGrid grid_;
    std::vector<double> eta_;
    std::vector<double> xi_;
    std::vector<double> rho_;
    std::vector<double> diffused_;
    std::vector<std::complex<double>> spectrum_;
};

/// Backward evolution w_i = P(tilt_i w_{i+1}).
class BackwardSolver {
public:
    BackwardSolver(const Model& model, const NoiseStream& stream);

    /// state.step -> state.step - 1, using slice state.step - 1.
    void step(BackwardState& state);
    void step(BackwardState& state, std::span<const double> xi);

private:
    const Model* model_;
    NoiseStream stream_;
    SpectralGrid grid_;
    std::vector<double> eta_;
    std::vector<double> xi_;
};

/// Single step with explicit slice (allocates a workspace; convenient, not fast).
FieldState forward_step(const FieldState& state, const XiSlice& xi, const Model& model);

struct SnapshotPolicy {
    enum class Kind { none, geometric, all, explicit_steps } kind = Kind::geometric;
    std::vector<std::int64_t> steps;  ///< used by explicit_steps (final step always kept)

    /// Sorted, unique snapshot steps for a horizon of n_steps.
    std::vector<std::int64_t> resolve(std::int64_t n_steps) const;
};

struct Snapshot {
    std::int64_t step = 0;
    std::vector<double> density;
    double log_mass = 0.0;
};

struct ForwardTrajectory {
    InitialData init;
    std::vector<double> log_mass;  ///< per step 0..n_steps
    std::vector<Snapshot> snapshots;
    FieldState final_state;
};

ForwardTrajectory run_forward(const Model& model, const NoiseStream& stream, InitialData init,
                              const SnapshotPolicy& policy = {}, StepObserver* observer = nullptr,
                              SchemeOptions options = {});

struct BackwardSnapshot {
    std::int64_t step = 0;
    std::vector<double> weights;
    double log_mass = 0.0;
};

struct BackwardTrajectory {
    BackwardTerminal terminal;
    std::vector<double> log_mass;  ///< indexed by step; entries below down_to unused
    std::vector<BackwardSnapshot> snapshots;
    BackwardState final_state;  ///< state at down_to
};

/// Runs from n_steps down to `down_to`. The stream must be the one used by
/// the paired forward run; this cannot be checked here.
BackwardTrajectory run_backward(const Model& model, const NoiseStream& stream, BackwardTerminal terminal,
                                std::int64_t down_to = 0, const SnapshotPolicy& policy = {});

/// Normalized density proportional to fwd * bwd.
std::vector<double> gibbs_marginal(const FieldState& fwd, const BackwardState& bwd, const DomainSpec& domain);

/// log(dx^d sum fwd bwd) + both log masses. Step-independent for a paired run.
double pairing_log(const FieldState& fwd, const BackwardState& bwd, const DomainSpec& domain);

/// Visits (fwd_i, bwd_i) for i = n_steps, n_steps - 1, ..., 0 on one
/// environment. Forward states are recomputed from O(sqrt(n_steps))
/// checkpoints, so memory stays O(sqrt(n_steps) n^d).
void sweep_paired(const Model& model, const NoiseStream& stream, InitialData init, BackwardTerminal terminal,
                  const std::function<void(const FieldState&, const BackwardState&)>& visit);

}  // namespace polylab
