#include <doctest.h>

#include <cmath>
#include <vector>

#include "polylab/errors.hpp"
#include "polylab/stats.hpp"

using namespace polylab;

namespace {

std::vector<double> normals(std::uint64_t seed, std::uint64_t stream, std::size_t n) {
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = standard_normal(seed, stream, i);
    return out;
}

}  // namespace

TEST_CASE("accumulator moments and merge") {
    const std::vector<double> xs{1, 2, 3, 4, 10};
    const Accumulator a = accumulate(xs);
    CHECK(a.count == 5);
    CHECK(a.mean == doctest::Approx(4.0));
    CHECK(a.variance() == doctest::Approx(12.5));
    CHECK(a.min == 1.0);
    CHECK(a.max == 10.0);

    Accumulator left = accumulate(std::span<const double>(xs).first(2));
    const Accumulator right = accumulate(std::span<const double>(xs).last(3));
    left.merge(right);
    CHECK(left.count == 5);
    CHECK(left.mean == doctest::Approx(a.mean).epsilon(1e-15));
    CHECK(left.variance() == doctest::Approx(a.variance()).epsilon(1e-14));
    CHECK(left.min == 1.0);
    CHECK(left.max == 10.0);

    Accumulator empty;
    empty.merge(a);
    CHECK(empty.mean == a.mean);
    CHECK(empty.variance() == a.variance());
}

TEST_CASE("normal quantile and cdf") {
    CHECK(normal_quantile(0.975) == doctest::Approx(1.959963984540054).epsilon(1e-12));
    CHECK(normal_quantile(0.5) == doctest::Approx(0.0));
    CHECK(normal_cdf(1.959963984540054) == doctest::Approx(0.975).epsilon(1e-12));
}

TEST_CASE("uniform and normal draws are deterministic and well formed") {
    CHECK(standard_normal(1, 2, 3) == standard_normal(1, 2, 3));
    CHECK(standard_normal(1, 2, 3) != standard_normal(1, 2, 4));
    const std::vector<double> z = normals(17, 0, 20000);
    const Accumulator a = accumulate(z);
    CHECK(std::abs(a.mean) < 4.0 / std::sqrt(20000.0));
    CHECK(std::abs(a.variance() - 1.0) < 4.0 * std::sqrt(2.0 / 20000.0));
    for (std::uint64_t i = 0; i < 1000; ++i) {
        const double u = uniform01(3, 4, i);
        CHECK(u > 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("skewness and kurtosis tests detect non-normal samples") {
    std::vector<double> expo(500);
    for (std::size_t i = 0; i < expo.size(); ++i) expo[i] = -std::log(uniform01(5, 0, i));
    CHECK(skewness_test(expo).p_value < 1e-6);
    CHECK(skewness_test(expo).sample == doctest::Approx(2.0).epsilon(0.3));
    CHECK(kurtosis_test(expo).p_value < 1e-3);

    const std::vector<double> z = normals(5, 1, 500);
    CHECK(skewness_test(z).p_value > 0.001);
    CHECK(kurtosis_test(z).p_value > 0.001);

    CHECK_THROWS_AS(skewness_test(std::vector<double>(4, 1.0)), UsageError);
    CHECK_THROWS_AS(skewness_test(std::vector<double>(40, 1.0)), NumericalError);
}

TEST_CASE("KS critical value close to the Lilliefors table") {
    // Lilliefors (1967): n > 30, alpha = 0.01 -> 1.031 / sqrt(n)
    const double c = ks_bootstrap_critical(400, 0.01, 4000, 99);
    CHECK(c == doctest::Approx(1.031 / 20.0).epsilon(0.06));
    const double c05 = ks_bootstrap_critical(400, 0.05, 4000, 99);
    CHECK(c05 == doctest::Approx(0.886 / 20.0).epsilon(0.06));
}

TEST_CASE("normality tests are calibrated") {
    // 1000 repetitions of n = 200 Gaussian samples at alpha = 1%
    const std::size_t reps = 1000, n = 200;
    const double ks_crit = ks_bootstrap_critical(n, 0.01, 4000, 123);
    int skew_rej = 0, kurt_rej = 0, ks_rej = 0;
    for (std::size_t r = 0; r < reps; ++r) {
        const std::vector<double> z = normals(2024, r + 1, n);
        skew_rej += skewness_test(z).p_value < 0.01;
        kurt_rej += kurtosis_test(z).p_value < 0.01;
        ks_rej += ks_normal_distance(z) > ks_crit;
    }
    for (int rej : {skew_rej, kurt_rej, ks_rej}) {
        CHECK(rej >= 2);
        CHECK(rej <= 30);
    }
}

TEST_CASE("bootstrap variance interval covers the sample variance") {
    const std::vector<double> z = normals(8, 8, 400);
    const Interval ci = bootstrap_variance_ci(z, 0.95, 2000, 1);
    const double v = variance_of(z);
    CHECK(ci.lower < v);
    CHECK(ci.upper > v);
    CHECK(ci.upper - ci.lower == doctest::Approx(2 * 1.96 * v * std::sqrt(2.0 / 399)).epsilon(0.25));
    const Interval again = bootstrap_variance_ci(z, 0.95, 2000, 1);
    CHECK(again.lower == ci.lower);
    CHECK(again.upper == ci.upper);
}
