#include "polylab/environment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>

#include "polylab/errors.hpp"
#include "polylab/philox.hpp"

namespace polylab {

void DomainSpec::validate() const {
    if (dim != 1 && dim != 2) throw ConfigError("domain.d must be 1 or 2");
    if (n < 1) throw ConfigError("domain.n must be >= 1");
    if (!(dx > 0.0) || !std::isfinite(dx)) throw ConfigError("domain.dx must be > 0");
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigError("domain.dt must be > 0");
    if (n_steps < 0) throw ConfigError("domain.n_steps must be >= 0");
    if (n_steps >= (std::int64_t{1} << 32)) throw ConfigError("domain.n_steps must be < 2^32");
    if (!(beta >= 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be >= 0");
}

std::size_t DomainSpec::sites() const {
    return dim == 1 ? static_cast<std::size_t>(n) : static_cast<std::size_t>(n) * n;
}

double DomainSpec::cell_volume() const { return dim == 1 ? dx : dx * dx; }

double DomainSpec::volume() const {
    const double l = side_length();
    return dim == 1 ? l : l * l;
}

std::string to_string(KernelShape shape) {
    return shape == KernelShape::triangular ? "triangular" : "quartic_bump";
}

KernelShape kernel_shape_from_string(const std::string& name) {
    if (name == "triangular") return KernelShape::triangular;
    if (name == "quartic_bump") return KernelShape::quartic_bump;
    throw ConfigError("unknown kernel shape '" + name + "'");
}

namespace {

// Row-major index of an offset in a (2 r + 1)^d table, or -1 when outside.
long table_index(std::span<const int> offset, int dim, int radius) {
    if (static_cast<int>(offset.size()) != dim) throw UsageError("offset rank does not match kernel dimension");
    const int w = 2 * radius + 1;
    long idx = 0;
    for (int a = 0; a < dim; ++a) {
        const int o = offset[a];
        if (o < -radius || o > radius) return -1;
        idx = idx * w + (o + radius);
    }
    return idx;
}

}  // namespace

double Mollifier::at(std::span<const int> offset) const {
    const long idx = table_index(offset, dim, radius);
    return idx < 0 ? 0.0 : values[static_cast<std::size_t>(idx)];
}

double CovarianceTable::at(std::span<const int> offset) const {
    const long idx = table_index(offset, dim, radius);
    return idx < 0 ? 0.0 : values[static_cast<std::size_t>(idx)];
}

std::vector<double> CovarianceTable::on_torus(const DomainSpec& domain) const {
    std::vector<double> torus(domain.sites(), 0.0);
    const int w = width();
    if (dim == 1) {
        for (int k = -radius; k <= radius; ++k)
            torus[static_cast<std::size_t>(domain.wrap(k))] += values[static_cast<std::size_t>(k + radius)];
    } else {
        for (int a = -radius; a <= radius; ++a)
            for (int b = -radius; b <= radius; ++b) {
                const auto site = static_cast<std::size_t>(domain.wrap(a)) * domain.n + domain.wrap(b);
                torus[site] += values[static_cast<std::size_t>((a + radius) * w + (b + radius))];
            }
    }
    return torus;
}

Mollifier build_mollifier(KernelShape shape, int radius, double amplitude, const DomainSpec& domain) {
    domain.validate();
    if (radius < 1) throw ConfigError("kernel.radius must be >= 1");
    if (!(amplitude > 0.0) || !std::isfinite(amplitude)) throw ConfigError("kernel.amplitude must be > 0");
    // 2 * support(phi) < L/2 keeps R from wrapping onto itself.
    if (4 * radius >= domain.n)
        throw ConfigError("kernel wrap-safety violated: need 2*radius*dx < L_phys/2 (radius " +
                          std::to_string(radius) + ", n " + std::to_string(domain.n) + ")");

    Mollifier m;
    m.dim = domain.dim;
    m.radius = radius;
    const int w = m.width();
    m.values.assign(domain.dim == 1 ? w : w * w, 0.0);

    auto profile = [&](double r_sites) {
        if (shape == KernelShape::triangular) {
            const double u = r_sites / (radius + 1);
            return u < 1.0 ? amplitude * (1.0 - u) : 0.0;
        }
        const double u = r_sites / radius;
        if (u >= 1.0) return 0.0;
        const double s = 1.0 - u * u;
        return amplitude * s * s;
    };

    if (domain.dim == 1) {
        for (int k = -radius; k <= radius; ++k) m.values[static_cast<std::size_t>(k + radius)] = profile(std::abs(k));
    } else {
        for (int a = -radius; a <= radius; ++a)
            for (int b = -radius; b <= radius; ++b)
                m.values[static_cast<std::size_t>((a + radius) * w + (b + radius))] =
                    profile(std::hypot(static_cast<double>(a), static_cast<double>(b)));
    }

    double sum = 0.0;
    for (double v : m.values) {
        sum += v;
        m.linf = std::max(m.linf, v);
    }
    m.l1 = domain.cell_volume() * sum;
    return m;
}

CovarianceTable covariance_from_mollifier(const Mollifier& kernel, const DomainSpec& domain) {
    if (kernel.dim != domain.dim) throw UsageError("kernel dimension does not match domain");
    if (4 * kernel.radius >= domain.n) throw ConfigError("kernel wrap-safety violated for covariance table");

    CovarianceTable cov;
    cov.dim = kernel.dim;
    cov.radius = 2 * kernel.radius;
    const int r = kernel.radius;
    const int cw = cov.width();
    const double cell = domain.cell_volume();

    if (kernel.dim == 1) {
        cov.values.assign(static_cast<std::size_t>(cw), 0.0);
        for (int k = -cov.radius; k <= cov.radius; ++k) {
            double acc = 0.0;
            for (int j = -r; j <= r; ++j) acc += kernel.at(j + k) * kernel.at(j);
            cov.values[static_cast<std::size_t>(k + cov.radius)] = cell * acc;
        }
    } else {
        cov.values.assign(static_cast<std::size_t>(cw) * cw, 0.0);
        for (int ka = -cov.radius; ka <= cov.radius; ++ka)
            for (int kb = -cov.radius; kb <= cov.radius; ++kb) {
                double acc = 0.0;
                for (int ja = -r; ja <= r; ++ja)
                    for (int jb = -r; jb <= r; ++jb) {
                        const int shifted[2] = {ja + ka, jb + kb};
                        const int base[2] = {ja, jb};
                        acc += kernel.at(shifted) * kernel.at(base);
                    }
                cov.values[static_cast<std::size_t>((ka + cov.radius) * cw + (kb + cov.radius))] = cell * acc;
            }
    }
    const int zero[2] = {0, 0};
    cov.r0 = cov.at(std::span<const int>(zero, static_cast<std::size_t>(cov.dim)));
    return cov;
}

std::vector<double> covariance_dft(const CovarianceTable& cov, const DomainSpec& domain) {
    const std::vector<double> torus = cov.on_torus(domain);
    const std::size_t sites = domain.sites();
    const int n = domain.n;
    const double two_pi_over_n = 2.0 * std::numbers::pi / n;
    std::vector<double> spectrum(sites, 0.0);
    for (std::size_t m = 0; m < sites; ++m) {
        const long ma = domain.dim == 1 ? 0 : static_cast<long>(m) / n;
        const long mb = domain.dim == 1 ? static_cast<long>(m) : static_cast<long>(m) % n;
        double re = 0.0;
        for (std::size_t x = 0; x < sites; ++x) {
            if (torus[x] == 0.0) continue;
            const long xa = domain.dim == 1 ? 0 : static_cast<long>(x) / n;
            const long xb = domain.dim == 1 ? static_cast<long>(x) : static_cast<long>(x) % n;
            const long phase = (ma * xa + mb * xb) % n;
            re += torus[x] * std::cos(two_pi_over_n * static_cast<double>(phase));
        }
        spectrum[m] = re;
    }
    return spectrum;
}

void fill_noise_slice(const NoiseStream& stream, std::int64_t step, const DomainSpec& domain,
                      std::span<double> out) {
    if (step < 0 || step >= domain.n_steps)
        throw UsageError("noise step " + std::to_string(step) + " outside [0, " +
                         std::to_string(domain.n_steps) + ")");
    const std::size_t sites = domain.sites();
    if (out.size() != sites) throw UsageError("noise buffer has wrong size");

    const double scale = 1.0 / std::sqrt(domain.dt * domain.cell_volume());
    const PhiloxKey key{static_cast<std::uint32_t>(stream.master_seed),
                        static_cast<std::uint32_t>(stream.master_seed >> 32)};
    const auto step32 = static_cast<std::uint32_t>(step);
    const auto id_lo = static_cast<std::uint32_t>(stream.realization_id);
    const auto id_hi = static_cast<std::uint32_t>(stream.realization_id >> 32);
    constexpr double two_pi = 2.0 * std::numbers::pi;

    // Box-Muller on one Philox block per pair of sites.
    for (std::size_t s = 0; s < sites; s += 2) {
        const auto block = static_cast<std::uint32_t>(s / 2);
        const PhiloxCounter r = philox4x32({block, step32, id_lo, id_hi}, key);
        const double u1 = uniform_open01(r[0], r[1]);
        const double u2 = uniform_open01(r[2], r[3]);
        const double rad = scale * std::sqrt(-2.0 * std::log(u1));
        const double angle = two_pi * u2;
        out[s] = rad * std::cos(angle);
        if (s + 1 < sites) out[s + 1] = rad * std::sin(angle);
    }
}

NoiseSlice sample_noise_slice(const NoiseStream& stream, std::int64_t step, const DomainSpec& domain) {
    NoiseSlice slice;
    slice.step = step;
    slice.values.resize(domain.sites());
    fill_noise_slice(stream, step, domain, slice.values);
    return slice;
}

void mollify_into(std::span<const double> eta, const Mollifier& kernel, const DomainSpec& domain,
                  std::span<double> out) {
    const std::size_t sites = domain.sites();
    if (eta.size() != sites || out.size() != sites) throw UsageError("mollify: slice shape does not match domain");
    if (kernel.dim != domain.dim) throw UsageError("mollify: kernel dimension does not match domain");
    const int r = kernel.radius;
    const int n = domain.n;
    const double cell = domain.cell_volume();

    if (domain.dim == 1) {
        for (int x = 0; x < n; ++x) {
            double acc = 0.0;
            for (int o = -r; o <= r; ++o) acc += kernel.values[static_cast<std::size_t>(o + r)] * eta[static_cast<std::size_t>(domain.wrap(x - o))];
            out[static_cast<std::size_t>(x)] = cell * acc;
        }
        return;
    }
    const int w = kernel.width();
    for (int xa = 0; xa < n; ++xa)
        for (int xb = 0; xb < n; ++xb) {
            double acc = 0.0;
            for (int oa = -r; oa <= r; ++oa) {
                const std::size_t row = static_cast<std::size_t>(domain.wrap(xa - oa)) * n;
                for (int ob = -r; ob <= r; ++ob) {
                    const double phi = kernel.values[static_cast<std::size_t>((oa + r) * w + (ob + r))];
                    if (phi != 0.0) acc += phi * eta[row + domain.wrap(xb - ob)];
                }
            }
            out[static_cast<std::size_t>(xa) * n + xb] = cell * acc;
        }
}

XiSlice mollify_slice(const NoiseSlice& eta, const Mollifier& kernel, const DomainSpec& domain) {
    XiSlice xi;
    xi.step = eta.step;
    xi.values.resize(domain.sites());
    mollify_into(eta.values, kernel, domain, xi.values);
    return xi;
}

namespace {

template <class Table>
void write_table_csv(std::ostream& os, const Table& t) {
    os.precision(17);
    const int w = t.width();
    if (t.dim == 1) {
        os << "offset,value\n";
        for (int k = -t.radius; k <= t.radius; ++k) os << k << ',' << t.values[static_cast<std::size_t>(k + t.radius)] << '\n';
        return;
    }
    os << "offset_0,offset_1,value\n";
    for (int a = -t.radius; a <= t.radius; ++a)
        for (int b = -t.radius; b <= t.radius; ++b)
            os << a << ',' << b << ',' << t.values[static_cast<std::size_t>((a + t.radius) * w + (b + t.radius))] << '\n';
}

}  // namespace

void write_kernel_csv(std::ostream& os, const Mollifier& kernel) { write_table_csv(os, kernel); }
void write_covariance_csv(std::ostream& os, const CovarianceTable& cov) { write_table_csv(os, cov); }

}  // namespace polylab
