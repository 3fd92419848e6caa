#include <doctest.h>

#include <cmath>

#include "polylab/environment.hpp"
#include "polylab/errors.hpp"

using namespace polylab;

namespace {

DomainSpec unit_grid(int n) {
    DomainSpec d;
    d.n = n;
    d.dx = 1.0;
    d.dt = 0.1;
    d.n_steps = 64;
    return d;
}

}  // namespace

TEST_CASE("triangular kernel at unit spacing") {
    const DomainSpec d = unit_grid(16);
    const Mollifier m = build_mollifier(KernelShape::triangular, 1, 1.0, d);
    CHECK(m.values.size() == 3);
    CHECK(m.at(-1) == doctest::Approx(0.5));
    CHECK(m.at(0) == doctest::Approx(1.0));
    CHECK(m.l1 == doctest::Approx(2.0));
    CHECK(m.linf == doctest::Approx(1.0));

    const CovarianceTable r = covariance_from_mollifier(m, d);
    CHECK(r.radius == 2);
    CHECK(r.at(0) == doctest::Approx(1.5).epsilon(1e-14));
    CHECK(r.at(1) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(r.at(-1) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(r.at(2) == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(r.at(3) == 0.0);
    CHECK(r.r0 == doctest::Approx(1.5));
}

TEST_CASE("desk kernel norms") {
    DomainSpec d;
    d.n_steps = 1;
    const Mollifier m = build_mollifier(KernelShape::triangular, 1, 1.0, d);
    CHECK(m.l1 == doctest::Approx(0.5));
    CHECK(m.linf == doctest::Approx(1.0));
    CHECK(covariance_from_mollifier(m, d).r0 == doctest::Approx(0.375));
}

TEST_CASE("covariance is positive semidefinite and symmetric") {
    const DomainSpec d = unit_grid(32);
    for (KernelShape shape : {KernelShape::triangular, KernelShape::quartic_bump}) {
        const CovarianceTable r = covariance_from_mollifier(build_mollifier(shape, 3, 0.7, d), d);
        for (int k = 0; k <= r.radius; ++k) CHECK(r.at(k) == doctest::Approx(r.at(-k)));
        for (double v : covariance_dft(r, d)) CHECK(v >= -1e-12);
    }
}

TEST_CASE("wrap-safety is enforced") {
    const DomainSpec d = unit_grid(8);
    CHECK_THROWS_AS(covariance_from_mollifier(build_mollifier(KernelShape::triangular, 2, 1.0, d), d), ConfigError);
    CHECK_NOTHROW(covariance_from_mollifier(build_mollifier(KernelShape::triangular, 1, 1.0, d), d));
}

TEST_CASE("domain validation") {
    DomainSpec d = unit_grid(16);
    CHECK_NOTHROW(d.validate());
    d.dim = 3;
    CHECK_THROWS_AS(d.validate(), ConfigError);
    d = unit_grid(16);
    d.dt = -1.0;
    CHECK_THROWS_AS(d.validate(), ConfigError);
}

TEST_CASE("noise slices: variance and determinism") {
    const DomainSpec d = unit_grid(4096);
    const NoiseStream s{42, 7};
    const NoiseSlice a = sample_noise_slice(s, 3, d);
    const NoiseSlice b = sample_noise_slice(s, 3, d);
    CHECK(a.values == b.values);
    CHECK(sample_noise_slice(s, 4, d).values != a.values);
    CHECK(sample_noise_slice(NoiseStream{42, 8}, 3, d).values != a.values);

    double sum = 0.0, sq = 0.0;
    std::size_t count = 0;
    for (std::int64_t step = 0; step < 16; ++step) {
        for (double v : sample_noise_slice(s, step, d).values) {
            sum += v;
            sq += v * v;
            ++count;
        }
    }
    const double mean = sum / count;
    const double var = sq / count - mean * mean;
    // 1 / (dt dx) = 10; relative SE of the sample variance is sqrt(2 / 65536)
    CHECK(std::abs(var - 10.0) < 4.0 * 10.0 * std::sqrt(2.0 / count));
    CHECK(std::abs(mean) < 4.0 * std::sqrt(10.0 / count));
}

TEST_CASE("mollified noise covariance matches R / dt") {
    const DomainSpec d = unit_grid(2048);
    const Mollifier m = build_mollifier(KernelShape::triangular, 1, 1.0, d);
    const NoiseStream s{9, 1};
    double c0 = 0.0, c1 = 0.0, c2 = 0.0, c3 = 0.0;
    const int reps = 32;
    for (int step = 0; step < reps; ++step) {
        const XiSlice xi = mollify_slice(sample_noise_slice(s, step, d), m, d);
        for (int x = 0; x < d.n; ++x) {
            const double v = xi.values[x];
            c0 += v * v;
            c1 += v * xi.values[d.wrap(x + 1)];
            c2 += v * xi.values[d.wrap(x + 2)];
            c3 += v * xi.values[d.wrap(x + 3)];
        }
    }
    const double norm = static_cast<double>(reps) * d.n * (1.0 / d.dt);
    CHECK(c0 / norm == doctest::Approx(1.5).epsilon(0.03));
    CHECK(c1 / norm == doctest::Approx(1.0).epsilon(0.04));
    CHECK(c2 / norm == doctest::Approx(0.25).epsilon(0.15));
    CHECK(std::abs(c3 / norm) < 0.05);
}
