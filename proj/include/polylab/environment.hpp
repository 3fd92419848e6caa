#pragma once

// Discrete model of the random environment: periodic grid, mollifier phi,
// its exact discrete autocorrelation R, and reproducible white-noise slices.
//
// Conventions (the grid model is the ground truth, not an approximation of
// something else):
//   * sites are indexed row-major, site 0 is the origin;
//   * a white-noise slice eta_i has i.i.d. N(0, 1/(dt dx^d)) entries, so that
//     dt dx^d weighted sums reproduce white-noise integrals;
//   * xi_i = dx^d (phi * eta_i) (circular), hence Cov(xi_i(x), xi_i(x+k)) = R(k)/dt.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace polylab {

struct DomainSpec {
    int dim = 1;
    int n = 512;
    double dx = 0.25;
    double dt = 0.01;
    std::int64_t n_steps = 0;
    double beta = 1.0;

    /// Throws ConfigError when an invariant is violated.
    void validate() const;

    std::size_t sites() const;
    double cell_volume() const;
    double side_length() const { return n * dx; }
    double volume() const;
    double horizon() const { return static_cast<double>(n_steps) * dt; }

    /// Wrap an integer coordinate onto [0, n).
    int wrap(long long i) const {
        const long long m = i % n;
        return static_cast<int>(m < 0 ? m + n : m);
    }
    /// Signed representative of a coordinate, in [-n/2, n/2).
    int centered(int i) const { return i >= (n + 1) / 2 ? i - n : i; }

    bool operator==(const DomainSpec&) const = default;
};

enum class KernelShape { triangular, quartic_bump };

std::string to_string(KernelShape shape);
KernelShape kernel_shape_from_string(const std::string& name);

/// Grid samples of phi on offsets [-radius, radius]^d (row-major).
struct Mollifier {
    int dim = 1;
    int radius = 0;
    std::vector<double> values;
    double l1 = 0.0;    ///< dx^d * sum(phi)
    double linf = 0.0;  ///< max(phi)

    int width() const { return 2 * radius + 1; }
    /// phi at an offset; zero outside the support.
    double at(std::span<const int> offset) const;
    double at(int k) const { return at(std::span<const int>(&k, 1)); }
};

/// R(k) = dx^d sum_j phi(j + k) phi(j) on offsets [-2 radius, 2 radius]^d.
struct CovarianceTable {
    int dim = 1;
    int radius = 0;  ///< support half-width in sites (twice the kernel radius)
    std::vector<double> values;
    double r0 = 0.0;

    int width() const { return 2 * radius + 1; }
    double at(std::span<const int> offset) const;
    double at(int k) const { return at(std::span<const int>(&k, 1)); }

    /// R laid out on the torus (site index = offset mod n).
    std::vector<double> on_torus(const DomainSpec& domain) const;
};

Mollifier build_mollifier(KernelShape shape, int radius, double amplitude,
                          const DomainSpec& domain);

CovarianceTable covariance_from_mollifier(const Mollifier& kernel, const DomainSpec& domain);

/// Plain DFT of the torus-embedded R table (real part per mode). Used for
/// the positive-semidefiniteness check; O(n^{2d}) so meant for inspection.
std::vector<double> covariance_dft(const CovarianceTable& cov, const DomainSpec& domain);

/// Seekable white-noise source. A slice is a pure function of
/// (master_seed, realization_id, step).
struct NoiseStream {
    std::uint64_t master_seed = 0;
    std::uint64_t realization_id = 0;
};

struct NoiseSlice {
    std::vector<double> values;
    std::int64_t step = 0;
};

struct XiSlice {
    std::vector<double> values;
    std::int64_t step = 0;
};

NoiseSlice sample_noise_slice(const NoiseStream& stream, std::int64_t step,
                              const DomainSpec& domain);

/// Allocation-free form of sample_noise_slice; `out` must hold domain.sites() values.
void fill_noise_slice(const NoiseStream& stream, std::int64_t step, const DomainSpec& domain,
                      std::span<double> out);

XiSlice mollify_slice(const NoiseSlice& eta, const Mollifier& kernel, const DomainSpec& domain);

/// out = dx^d (phi * eta), circular. `out` and `eta` must not alias.
void mollify_into(std::span<const double> eta, const Mollifier& kernel,
                  const DomainSpec& domain, std::span<double> out);

void write_kernel_csv(std::ostream& os, const Mollifier& kernel);
void write_covariance_csv(std::ostream& os, const CovarianceTable& cov);

}  // namespace polylab
