#pragma once

// Monte Carlo over disorder realizations and the estimators built on top:
// free-energy rate, overlap and martingale CLT checks, variance scaling, and
// the height-field bound suite.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "polylab/observables.hpp"
#include "polylab/stats.hpp"

namespace polylab {

struct RecordingSpec {
    std::vector<std::int64_t> snapshot_steps;  ///< steps where height / overlap samples are taken
    std::vector<int> lags;                     ///< increment lags in sites
    std::vector<int> box_half_widths;          ///< box half-widths in sites
    int box_centers = 8;                       ///< evenly spaced box centres for Var h_M
    bool fixed_time_overlap = false;
};

struct EnsembleSpec {
    DomainSpec domain;
    KernelSpec kernel;
    HeatSymbol symbol = HeatSymbol::lattice;
    InitialKind init = InitialKind::delta_at_origin;
    std::uint64_t master_seed = 0;
    std::uint64_t first_id = 0;
    std::size_t realizations = 1;
    double boundary_threshold = 1e-4;
    RecordingSpec recording;
    SchemeOptions scheme;
};

/// Height-field summaries of one constant-start snapshot.
struct HeightSample {
    std::int64_t step = 0;
    double h_origin = 0.0;
    double gradient_sq = 0.0;           ///< site mean of |grad h|^2
    std::vector<double> increments;     ///< per lag: site mean of (h(x) - h(x + k))^2
    std::vector<double> box_gap;        ///< per M: site mean of (h(x) - h_M(x))^2
    std::vector<double> box_average;    ///< [M][centre]: h_M at the box centres
};

struct RunRecord {
    std::uint64_t realization_id = 0;
    double T = 0.0;
    double beta = 0.0;
    double log_Z_T = 0.0;
    double O_T = 0.0;
    double M_T = 0.0;
    double qv_T = 0.0;
    double residual_T = 0.0;
    std::optional<double> fixed_T_overlap;
    double boundary_mass = 0.0;
    bool failed = false;
    std::string failure;  ///< empty, "boundary", or the numerical error text
    std::int64_t failed_step = -1;
    std::vector<double> snapshot_overlap;  ///< R(rho) at recording.snapshot_steps (delta start)
    std::vector<HeightSample> heights;     ///< constant start only
};

RunRecord run_realization(const Model& model, const EnsembleSpec& spec, std::uint64_t id);

/// Observables summarised in every ensemble.
inline constexpr const char* kSummaryFields[] = {"log_Z_T", "Z_T", "O_T", "M_T", "M_T_sq", "qv_T",
                                                 "residual_T", "abs_residual_T", "boundary_mass", "fixed_T_overlap"};

using Summary = std::map<std::string, Accumulator>;

Summary summarize(const RunRecord& record);
/// Pairwise tree merge of per-record summaries in the given order.
Summary merge_tree(std::span<const Summary> leaves);

struct EnsembleResult {
    double T = 0.0;
    std::vector<RunRecord> records;  ///< ordered by realization_id
    Summary summary;                 ///< accepted records only
    std::size_t accepted = 0;
    std::size_t failed = 0;
    std::size_t boundary_rejected = 0;  ///< included in failed
};

using ProgressFn = std::function<void(std::size_t done, std::size_t total)>;

/// Runs spec.realizations ids starting at spec.first_id on `jobs` threads
/// (0: hardware concurrency). Output does not depend on `jobs`.
EnsembleResult run_ensemble(const EnsembleSpec& spec, unsigned jobs = 1, const ProgressFn& progress = {});

/// Accepted records only.
std::vector<double> column(std::span<const RunRecord> records, double RunRecord::*field);

struct Tolerances {
    double alpha = 0.01;          ///< level of the normality tests
    double sigma = 3.0;           ///< standard-error multiplier of the identity checks
    double ci_level = 0.95;
    double variance_band_low = 0.75;
    double variance_band_high = 1.25;
    double scaling_spread = 4.0;  ///< max/min allowed for fitted-constant sequences
    std::size_t ks_resamples = 2000;
    std::size_t bootstrap_resamples = 2000;

    bool operator==(const Tolerances&) const = default;
};

struct SeriesAtT {
    double T = 0.0;
    std::vector<double> values;
};

struct GammaPoint {
    double T = 0.0;
    double mean = 0.0;  ///< mean of -log Z_T
    double se = 0.0;
    double rate = 0.0;  ///< mean / T
};

struct GammaEstimate {
    double gamma_hat = 0.0;
    double se = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    double intercept = 0.0;
    std::vector<GammaPoint> points;
};

/// Weighted least-squares slope of -mean(values) against T (weights 1/SE^2;
/// equal weights when every SE vanishes).
GammaEstimate estimate_gamma(std::span<const SeriesAtT> log_z, double ci_level = 0.95);

/// Skewness, kurtosis and bootstrap-KS normality checks of xs.
std::vector<TestReport> normality_reports(const std::string& label, std::span<const double> xs, const Tolerances& tol,
                                          std::uint64_t seed);

std::vector<TestReport> clt_report(std::span<const double> overlap, double T, double beta, const GammaEstimate& gamma,
                                   const Tolerances& tol, std::uint64_t seed);

struct MartingaleGroup {
    double T = 0.0;
    std::vector<double> log_z;
    std::vector<double> m;  ///< same realizations, same order
};

std::vector<TestReport> m_checks(std::span<const MartingaleGroup> groups, double beta, const GammaEstimate& gamma,
                                 const Tolerances& tol, std::uint64_t seed);

/// E exp(log Z_T) = 1 within sigma standard errors.
TestReport normalization_check(std::span<const double> log_z, double T, double beta, double r0, const Tolerances& tol);

/// mean(O_T) beta^2 / (2T) against gamma_hat at each given T.
std::vector<TestReport> overlap_growth(std::span<const SeriesAtT> overlap, double beta, const GammaEstimate& gamma,
                                       const Tolerances& tol);

std::vector<TestReport> variance_scaling(std::span<const SeriesAtT> log_z, const Tolerances& tol, std::uint64_t seed);

struct BoundSuiteInput {
    const Model* model = nullptr;
    const RecordingSpec* recording = nullptr;
    std::span<const RunRecord> records;  ///< constant-start runs with heights
    std::vector<std::int64_t> steps;     ///< subset of snapshot steps to test (empty: all)
};

std::vector<TestReport> bound_suite(const BoundSuiteInput& input, const Tolerances& tol);

/// |grad h|^2 (constant start) against beta^2 (R(0) - R(rho)) (delta start) at each snapshot.
std::vector<TestReport> gradient_overlap_reports(std::span<const RunRecord> height_runs,
                                                 std::span<const RunRecord> delta_runs, const RecordingSpec& recording,
                                                 const Model& model, const Tolerances& tol);

/// Mean |residual_T| per dt level must strictly decrease with dt.
TestReport ito_convergence(std::span<const std::pair<double, Accumulator>> levels);

}  // namespace polylab
