#include "polylab/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include <boost/math/distributions/normal.hpp>

#include "polylab/errors.hpp"
#include "polylab/philox.hpp"

namespace polylab {

void Accumulator::add(double x) {
    if (count == 0) {
        min = max = x;
    } else {
        min = std::min(min, x);
        max = std::max(max, x);
    }
    ++count;
    const double delta = x - mean;
    mean += delta / static_cast<double>(count);
    m2 += delta * (x - mean);
}

void Accumulator::merge(const Accumulator& other) {
    if (other.count == 0) return;
    if (count == 0) {
        *this = other;
        return;
    }
    const double na = static_cast<double>(count);
    const double nb = static_cast<double>(other.count);
    const double n = na + nb;
    const double delta = other.mean - mean;
    mean += delta * nb / n;
    m2 += other.m2 + delta * delta * na * nb / n;
    count += other.count;
    min = std::min(min, other.min);
    max = std::max(max, other.max);
}

double Accumulator::variance() const { return count < 2 ? 0.0 : m2 / static_cast<double>(count - 1); }

double Accumulator::std_error() const {
    return count < 2 ? 0.0 : std::sqrt(variance() / static_cast<double>(count));
}

Accumulator accumulate(std::span<const double> xs) {
    Accumulator a;
    for (double x : xs) a.add(x);
    return a;
}

double mean_of(std::span<const double> xs) { return accumulate(xs).mean; }
double variance_of(std::span<const double> xs) { return accumulate(xs).variance(); }

namespace {

PhiloxCounter draw_block(std::uint64_t seed, std::uint64_t stream, std::uint64_t block) {
    const PhiloxCounter ctr{static_cast<std::uint32_t>(block), static_cast<std::uint32_t>(block >> 32),
                            static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    const PhiloxKey key{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32) ^ 0x5bd1e995u};
    return philox4x32(ctr, key);
}

struct Moments {
    double n = 0.0;
    double g1 = 0.0;  // skewness, biased (m3 / m2^1.5)
    double b2 = 0.0;  // kurtosis, biased (m4 / m2^2)
};

Moments central_moments(std::span<const double> xs) {
    Moments m;
    m.n = static_cast<double>(xs.size());
    const double mu = mean_of(xs);
    double s2 = 0.0, s3 = 0.0, s4 = 0.0;
    for (double x : xs) {
        const double d = x - mu;
        const double d2 = d * d;
        s2 += d2;
        s3 += d2 * d;
        s4 += d2 * d2;
    }
    s2 /= m.n;
    s3 /= m.n;
    s4 /= m.n;
    if (!(s2 > 0.0)) throw NumericalError("degenerate sample: zero variance", -1);
    m.g1 = s3 / std::pow(s2, 1.5);
    m.b2 = s4 / (s2 * s2);
    return m;
}

double two_sided_p(double z) { return 2.0 * normal_cdf(-std::abs(z)); }

}  // namespace

double uniform01(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    const PhiloxCounter r = draw_block(seed, stream, index / 2);
    return index % 2 == 0 ? uniform_open01(r[0], r[1]) : uniform_open01(r[2], r[3]);
}

double standard_normal(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
    const PhiloxCounter r = draw_block(seed, stream, index / 2);
    const double u1 = uniform_open01(r[0], r[1]);
    const double u2 = uniform_open01(r[2], r[3]);
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    return index % 2 == 0 ? radius * std::cos(angle) : radius * std::sin(angle);
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

double normal_quantile(double p) {
    return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

ZTest skewness_test(std::span<const double> xs) {
    if (xs.size() < 8) throw UsageError("skewness test needs at least 8 samples");
    const Moments m = central_moments(xs);
    const double n = m.n;
    const double y = m.g1 * std::sqrt((n + 1.0) * (n + 3.0) / (6.0 * (n - 2.0)));
    const double beta2 = 3.0 * (n * n + 27.0 * n - 70.0) * (n + 1.0) * (n + 3.0) /
                         ((n - 2.0) * (n + 5.0) * (n + 7.0) * (n + 9.0));
    const double w2 = -1.0 + std::sqrt(2.0 * (beta2 - 1.0));
    const double delta = 1.0 / std::sqrt(0.5 * std::log(w2));
    const double alpha = std::sqrt(2.0 / (w2 - 1.0));
    const double t = y / alpha;
    ZTest out;
    out.sample = m.g1;
    out.z = delta * std::log(t + std::sqrt(t * t + 1.0));
    out.p_value = two_sided_p(out.z);
    return out;
}

ZTest kurtosis_test(std::span<const double> xs) {
    if (xs.size() < 20) throw UsageError("kurtosis test needs at least 20 samples");
    const Moments m = central_moments(xs);
    const double n = m.n;
    const double e = 3.0 * (n - 1.0) / (n + 1.0);
    const double var = 24.0 * n * (n - 2.0) * (n - 3.0) / ((n + 1.0) * (n + 1.0) * (n + 3.0) * (n + 5.0));
    const double x = (m.b2 - e) / std::sqrt(var);
    const double sqrt_beta1 = 6.0 * (n * n - 5.0 * n + 2.0) / ((n + 7.0) * (n + 9.0)) *
                              std::sqrt(6.0 * (n + 3.0) * (n + 5.0) / (n * (n - 2.0) * (n - 3.0)));
    const double a = 6.0 + 8.0 / sqrt_beta1 * (2.0 / sqrt_beta1 + std::sqrt(1.0 + 4.0 / (sqrt_beta1 * sqrt_beta1)));
    const double term1 = 1.0 - 2.0 / (9.0 * a);
    const double denom = 1.0 + x * std::sqrt(2.0 / (a - 4.0));
    const double term2 = std::cbrt((1.0 - 2.0 / a) / denom);
    ZTest out;
    out.sample = m.b2 - 3.0;
    out.z = (term1 - term2) / std::sqrt(2.0 / (9.0 * a));
    if (!(denom > 0.0)) out.z = x > 0.0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    out.p_value = two_sided_p(out.z);
    return out;
}

double ks_normal_distance(std::span<const double> xs) {
    if (xs.size() < 2) throw UsageError("KS distance needs at least 2 samples");
    const Accumulator a = accumulate(xs);
    const double sd = std::sqrt(a.variance());
    if (!(sd > 0.0)) throw NumericalError("degenerate sample: zero variance", -1);
    std::vector<double> sorted(xs.begin(), xs.end());
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(sorted.size());
    double d = 0.0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        const double f = normal_cdf((sorted[i] - a.mean) / sd);
        d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
    }
    return d;
}

double ks_bootstrap_critical(std::size_t n, double alpha, std::size_t resamples, std::uint64_t seed) {
    if (n < 2 || resamples < 10) throw UsageError("KS bootstrap needs n >= 2 and >= 10 resamples");
    std::vector<double> dist(resamples);
    std::vector<double> sample(n);
    for (std::size_t r = 0; r < resamples; ++r) {
        for (std::size_t i = 0; i < n; ++i) sample[i] = standard_normal(seed, r, i);
        dist[r] = ks_normal_distance(sample);
    }
    std::sort(dist.begin(), dist.end());
    const auto k = static_cast<std::size_t>(std::ceil((1.0 - alpha) * static_cast<double>(resamples))) - 1;
    return dist[std::min(k, resamples - 1)];
}

Interval bootstrap_variance_ci(std::span<const double> xs, double level, std::size_t resamples, std::uint64_t seed) {
    if (xs.size() < 2 || resamples < 10) throw UsageError("variance bootstrap needs >= 2 samples and >= 10 resamples");
    std::vector<double> vars(resamples);
    const std::size_t n = xs.size();
    for (std::size_t r = 0; r < resamples; ++r) {
        Accumulator a;
        for (std::size_t i = 0; i < n; ++i) {
            const auto j = std::min(n - 1, static_cast<std::size_t>(uniform01(seed, r, i) * static_cast<double>(n)));
            a.add(xs[j]);
        }
        vars[r] = a.variance();
    }
    std::sort(vars.begin(), vars.end());
    const double tail = 0.5 * (1.0 - level);
    auto pick = [&](double q) {
        const auto k = static_cast<std::size_t>(std::floor(q * static_cast<double>(resamples - 1) + 0.5));
        return vars[std::min(k, resamples - 1)];
    };
    return {pick(tail), pick(1.0 - tail)};
}

}  // namespace polylab
