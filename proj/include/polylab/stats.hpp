#pragma once

// Mergeable moment accumulators and the small set of hypothesis tests used by
// the ensemble estimators. Random resampling is driven by Philox so every
// bootstrap is a pure function of its seed.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace polylab {

/// Count, mean, sum of squared deviations, min and max. merge() is the
/// pooled (Chan et al.) combination.
struct Accumulator {
    std::uint64_t count = 0;
    double mean = 0.0;
    double m2 = 0.0;
    double min = 0.0;
    double max = 0.0;

    void add(double x);
    void merge(const Accumulator& other);

    double variance() const;  ///< unbiased; 0 when count < 2
    double std_error() const;
};

Accumulator accumulate(std::span<const double> xs);

double mean_of(std::span<const double> xs);
double variance_of(std::span<const double> xs);  ///< unbiased

/// Deterministic N(0, 1) draw number `index` of stream (seed, stream).
double standard_normal(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);
/// Deterministic uniform in (0, 1).
double uniform01(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

double normal_cdf(double z);
double normal_quantile(double p);

struct ZTest {
    double sample = 0.0;  ///< sample skewness or excess kurtosis
    double z = 0.0;
    double p_value = 1.0;
};

/// D'Agostino's transformed skewness test. Needs n >= 8.
ZTest skewness_test(std::span<const double> xs);
/// Anscombe-Glynn kurtosis test (reports excess kurtosis). Needs n >= 20.
ZTest kurtosis_test(std::span<const double> xs);

/// sup |F_n - Phi((x - mean) / sd)| with mean and sd fitted from the sample.
double ks_normal_distance(std::span<const double> xs);

/// Upper alpha quantile of the fitted-parameter KS distance under normality,
/// from `resamples` parametric resamples of size n.
double ks_bootstrap_critical(std::size_t n, double alpha, std::size_t resamples, std::uint64_t seed);

struct Interval {
    double lower = 0.0;
    double upper = 0.0;
};

/// Percentile bootstrap interval for the unbiased variance.
Interval bootstrap_variance_ci(std::span<const double> xs, double level, std::size_t resamples, std::uint64_t seed);

struct TestReport {
    std::string name;
    double statistic = 0.0;
    double lower = 0.0;  ///< acceptance region [lower, upper]
    double upper = 0.0;
    bool pass = false;
    std::uint64_t samples = 0;
    std::string note;
    bool diagnostic = false;  ///< reported only; never decides an exit status
};

}  // namespace polylab
