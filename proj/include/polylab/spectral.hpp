#pragma once

// Thin RAII wrapper over FFTW real<->complex transforms on the periodic grid.
// One SpectralGrid per thread: plans are shared-nothing and execution uses
// the grid's own aligned buffers.

#include <complex>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "polylab/environment.hpp"

namespace polylab {

class SpectralGrid {
public:
    explicit SpectralGrid(const DomainSpec& domain);
    ~SpectralGrid();
    SpectralGrid(SpectralGrid&& other) noexcept;
    SpectralGrid& operator=(SpectralGrid&& other) noexcept;
    SpectralGrid(const SpectralGrid&) = delete;
    SpectralGrid& operator=(const SpectralGrid&) = delete;

    int dim() const { return dim_; }
    int n() const { return n_; }
    std::size_t sites() const { return sites_; }
    /// Number of stored (half-spectrum) modes.
    std::size_t modes() const { return modes_; }

    std::span<double> real() { return {real_, sites_}; }
    std::span<const double> real() const { return {real_, sites_}; }
    std::span<std::complex<double>> spectrum() { return {spectrum_, modes_}; }
    std::span<const std::complex<double>> spectrum() const { return {spectrum_, modes_}; }

    /// spectrum <- DFT(real). Unnormalized.
    void forward();
    /// real <- inverse DFT(spectrum) / sites. Clobbers the spectrum buffer.
    void inverse();

    /// Signed integer frequencies (per axis) of a stored mode.
    std::pair<int, int> frequency(std::size_t mode) const;
    /// Multiplicity of a stored mode in the full spectrum (1 or 2).
    double multiplicity(std::size_t mode) const { return multiplicity_[mode]; }

private:
    void release() noexcept;

    int dim_ = 1;
    int n_ = 0;
    int half_ = 0;  // n/2 + 1
    std::size_t sites_ = 0;
    std::size_t modes_ = 0;
    double* real_ = nullptr;
    std::complex<double>* spectrum_ = nullptr;
    void* plan_forward_ = nullptr;
    void* plan_inverse_ = nullptr;
    std::vector<double> multiplicity_;
};

/// Real part of the DFT of a real torus field, on the stored half spectrum.
std::vector<double> real_spectrum(SpectralGrid& grid, std::span<const double> field);

/// dx^{2d} sum_{x,x'} f(x) f(x') R(x-x') evaluated as
/// (dx^{2d}/N) sum_m Rhat_m |fhat_m|^2 from an already transformed f.
double quadratic_form_from_spectrum(const SpectralGrid& grid, std::span<const std::complex<double>> fhat,
                                    std::span<const double> cov_spectrum, const DomainSpec& domain);

}  // namespace polylab
