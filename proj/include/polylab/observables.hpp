#pragma once

// Path functionals of a trajectory: the overlap functional
//     Rf = dx^{2d} sum_{x,x'} f(x) f(x') R(x - x'),
// overlap / quadratic-variation / martingale series, the fixed-horizon
// overlap, Malliavin derivative fields, box averages of h, increment
// moments, and the BKS local-averaging quantities.
//
// All dt-integrals use the left endpoint: O_T = dt sum_{i<n} R(rho_i).

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "polylab/solver.hpp"

namespace polylab {

/// R(f) for a normalized density f, evaluated spectrally. Result clamped to [0, R(0)].
double overlap_functional(std::span<const double> f, const Model& model);

/// Same, from an already computed half spectrum of f (no normalization check).
double overlap_from_spectrum(std::span<const std::complex<double>> fhat, const Model& model, const SpectralGrid& grid);

/// Dx^d-weighted mass of `density` within R's support of the wrap seam.
class BoundaryMonitor {
public:
    explicit BoundaryMonitor(const Model& model);
    double mass(std::span<const double> density) const;

private:
    std::vector<std::size_t> band_;
    double cell_ = 1.0;
};

/// Per-step scalars along a forward run: R(rho_i), martingale increments
/// beta dt <P rho_i, xi_i>, log masses, and the running max boundary mass.
class PathRecorder : public StepObserver {
public:
    explicit PathRecorder(const Model& model);

    void on_step(const StepView& view) override;
    void on_state(const FieldState& state) override;

    const std::vector<double>& overlaps() const { return overlap_; }
    const std::vector<double>& martingale_increments() const { return dm_; }
    const std::vector<double>& log_mass() const { return log_mass_; }
    double boundary_mass() const { return boundary_max_; }

private:
    const Model* model_;
    BoundaryMonitor boundary_;
    SpectralGrid grid_;
    std::vector<double> overlap_;
    std::vector<double> dm_;
    std::vector<double> log_mass_;
    double boundary_max_ = 0.0;
};

struct OverlapSeries {
    std::vector<double> per_step;  ///< R(rho_i), i = 0..n-1
    std::vector<double> overlap;   ///< O at step i = 0..n (O_0 = 0)
    std::vector<double> qv;        ///< beta^2 O, same indexing

    double final_overlap() const { return overlap.back(); }
    double final_qv() const { return qv.back(); }
};

OverlapSeries accumulate_overlap(std::span<const double> per_step_overlap, const DomainSpec& domain);
OverlapSeries accumulate_overlap(const PathRecorder& path, const DomainSpec& domain);

struct MartingaleSeries {
    std::vector<double> martingale;  ///< M at step i = 0..n (M_0 = 0)
    std::vector<double> residual;    ///< log Z_i - (M_i - qv_i / 2)
};

MartingaleSeries accumulate_martingale(std::span<const double> increments, std::span<const double> log_mass,
                                       const OverlapSeries& overlap);
MartingaleSeries accumulate_martingale(const PathRecorder& path, const OverlapSeries& overlap);

/// dt sum_{i<n} R(mu_i), mu_i the time-i marginal of the length-T polymer.
/// Requires nothing but the environment stream; runs its own paired sweep.
double fixed_time_overlap(const Model& model, const NoiseStream& stream);

struct MalliavinField {
    std::size_t target_site = 0;
    std::size_t sites = 0;
    std::vector<std::int64_t> slices;  ///< slice index s (time s dt)
    std::vector<double> values;        ///< row per slice, D(s, y)
    std::vector<double> mass;          ///< dx^d sum_y D(s, y) per slice

    std::span<const double> row(std::size_t k) const { return {values.data() + k * sites, sites}; }
};

/// D_{s,y} h(T, x0) = beta dx^d sum_z mu_s(z) phi(z - y) where mu_s is the
/// time-s marginal (at slice s's tilt) of the polymer rooted at (T, x0) with
/// free end at time 0. `slices` empty means all of 0..n_steps-1.
MalliavinField malliavin_field(const Model& model, const NoiseStream& stream, std::size_t target_site,
                               std::span<const std::int64_t> slices = {});

/// Arithmetic mean of h over the (2M+1)^d box centred at `center`.
double local_average(std::span<const double> h, int half_width, const DomainSpec& domain, std::size_t center = 0);

struct IncrementMoments {
    std::vector<int> lags;
    std::vector<double> moment;      ///< E|h(0) - h(k dx)|^2, pooled over base sites
    std::vector<double> std_error;
    std::vector<double> bound;       ///< beta^2 R(0) (k dx)^2
    std::vector<double> ratio;       ///< moment / bound (0 at lag 0)
    std::vector<double> ratio_se;
};

/// Streaming per-realization increment moments (lags along axis 0).
class IncrementAccumulator {
public:
    IncrementAccumulator(const DomainSpec& domain, std::vector<int> lags);
    void add(std::span<const double> h);
    std::size_t count() const { return count_; }
    IncrementMoments result(double beta, double r0) const;

private:
    DomainSpec domain_;
    std::vector<int> lags_;
    std::vector<double> sum_;
    std::vector<double> sum_sq_;
    std::size_t count_ = 0;
};

IncrementMoments increment_moments(std::span<const std::vector<double>> h_fields, std::span<const int> lags,
                                   const DomainSpec& domain, double r0);

/// Site mean of |grad h|^2 with periodic central differences.
double mean_squared_gradient(std::span<const double> h, const DomainSpec& domain);

struct GradientOverlapReport {
    double f_hat = 0.0;
    double f_se = 0.0;
    double g_hat = 0.0;
    double g_se = 0.0;
    double defect = 0.0;  ///< f_hat - beta^2 (R(0) - g_hat)
    double defect_se = 0.0;
    std::size_t samples = 0;
};

/// h snapshots (constant start) and rho snapshots (delta start) at one time,
/// one of each per realization.
GradientOverlapReport gradient_overlap_identity(std::span<const std::vector<double>> h_fields,
                                                std::span<const std::vector<double>> rho_fields, const Model& model);

struct EndpointMode {
    std::size_t site = 0;
    std::vector<double> centered;  ///< density shifted so the mode sits at site 0
};

/// Argmax of rho; ties go to the smallest row-major index.
EndpointMode endpoint_mode(std::span<const double> rho, const DomainSpec& domain);

struct BksOptions {
    std::vector<int> half_widths;        ///< box half-widths M in sites
    std::vector<std::int64_t> slices;    ///< sampled slice indices s
    std::size_t realizations = 32;
    std::uint64_t master_seed = 0;
    std::uint64_t first_realization = 0;
    std::size_t site_budget = 129;       ///< max box sites (one backward pass each)
};

struct BksBox {
    int half_width = 0;
    std::size_t box_sites = 0;
    double box_volume = 0.0;      ///< |B_M| = ((2M+1) dx)^d
    std::vector<double> a_mean;   ///< [slice][y]: box average of E D_{s,y} h(T, x)
    std::vector<double> a_se;
    std::vector<double> big_a;    ///< A(s, y) = sqrt(beta |phi|_inf a)
    std::vector<double> ratio;    ///< A / |D h_M|_1 = sqrt(beta |phi|_inf / a) (inf when a = 0)
    std::vector<double> ratio_se;
    double ratio_lower_bound = 0.0;  ///< sqrt(|phi|_inf |phi|_1^{-1} |B_M|)
    double a_squared_integral = 0.0; ///< extrapolated int_0^T int A^2 dy ds
    double a_squared_integral_se = 0.0;
    double a_squared_target = 0.0;   ///< beta^2 |phi|_inf |phi|_1 T
    /// Worst standardized shortfall (LB - ratio) / ratio_se over sampled (s, y); <= 3 passes.
    double worst_shortfall_sigma = 0.0;
};

struct BksQuantities {
    std::vector<std::int64_t> slices;
    std::size_t sites = 0;
    std::vector<BksBox> boxes;
};

/// Monte Carlo over realizations of the box-averaged Malliavin derivative of
/// h(T, .). Cost: one forward pass plus one backward pass per site of the
/// largest box, per realization. d = 1 only.
BksQuantities bks_derivative_average(const Model& model, const BksOptions& options);

void write_malliavin_csv(std::ostream& os, const MalliavinField& field, const DomainSpec& domain);

}  // namespace polylab
