#include "polylab/spectral.hpp"

#include <fftw3.h>

#include <mutex>

#include "polylab/errors.hpp"

namespace polylab {

namespace {

// FFTW's planner is not re-entrant; execution is.
std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
}

}  // namespace

SpectralGrid::SpectralGrid(const DomainSpec& domain)
    : dim_(domain.dim), n_(domain.n), half_(domain.n / 2 + 1), sites_(domain.sites()) {
    modes_ = dim_ == 1 ? static_cast<std::size_t>(half_) : static_cast<std::size_t>(n_) * half_;
    multiplicity_.resize(modes_);
    for (std::size_t m = 0; m < modes_; ++m) {
        const int last = static_cast<int>(m % static_cast<std::size_t>(half_));
        const bool self_conjugate = last == 0 || (n_ % 2 == 0 && last == n_ / 2);
        multiplicity_[m] = self_conjugate ? 1.0 : 2.0;
    }
    real_ = fftw_alloc_real(sites_);
    spectrum_ = reinterpret_cast<std::complex<double>*>(fftw_alloc_complex(modes_));
    if (real_ == nullptr || spectrum_ == nullptr) {
        release();
        throw std::bad_alloc();
    }
    auto* spec = reinterpret_cast<fftw_complex*>(spectrum_);
    std::lock_guard lock(planner_mutex());
    if (dim_ == 1) {
        plan_forward_ = fftw_plan_dft_r2c_1d(n_, real_, spec, FFTW_ESTIMATE);
        plan_inverse_ = fftw_plan_dft_c2r_1d(n_, spec, real_, FFTW_ESTIMATE);
    } else {
        plan_forward_ = fftw_plan_dft_r2c_2d(n_, n_, real_, spec, FFTW_ESTIMATE);
        plan_inverse_ = fftw_plan_dft_c2r_2d(n_, n_, spec, real_, FFTW_ESTIMATE);
    }
    if (plan_forward_ == nullptr || plan_inverse_ == nullptr) {
        release();
        throw std::runtime_error("FFTW planning failed");
    }
}

SpectralGrid::~SpectralGrid() { release(); }

SpectralGrid::SpectralGrid(SpectralGrid&& other) noexcept
    : dim_(other.dim_),
      n_(other.n_),
      half_(other.half_),
      sites_(other.sites_),
      modes_(other.modes_),
      real_(std::exchange(other.real_, nullptr)),
      spectrum_(std::exchange(other.spectrum_, nullptr)),
      plan_forward_(std::exchange(other.plan_forward_, nullptr)),
      plan_inverse_(std::exchange(other.plan_inverse_, nullptr)),
      multiplicity_(std::move(other.multiplicity_)) {}

SpectralGrid& SpectralGrid::operator=(SpectralGrid&& other) noexcept {
    if (this != &other) {
        release();
        dim_ = other.dim_;
        n_ = other.n_;
        half_ = other.half_;
        sites_ = other.sites_;
        modes_ = other.modes_;
        real_ = std::exchange(other.real_, nullptr);
        spectrum_ = std::exchange(other.spectrum_, nullptr);
        plan_forward_ = std::exchange(other.plan_forward_, nullptr);
        plan_inverse_ = std::exchange(other.plan_inverse_, nullptr);
        multiplicity_ = std::move(other.multiplicity_);
    }
    return *this;
}

void SpectralGrid::release() noexcept {
    {
        std::lock_guard lock(planner_mutex());
        if (plan_forward_ != nullptr) fftw_destroy_plan(static_cast<fftw_plan>(plan_forward_));
        if (plan_inverse_ != nullptr) fftw_destroy_plan(static_cast<fftw_plan>(plan_inverse_));
    }
    plan_forward_ = plan_inverse_ = nullptr;
    if (real_ != nullptr) fftw_free(real_);
    if (spectrum_ != nullptr) fftw_free(spectrum_);
    real_ = nullptr;
    spectrum_ = nullptr;
}

void SpectralGrid::forward() { fftw_execute(static_cast<fftw_plan>(plan_forward_)); }

void SpectralGrid::inverse() {
    fftw_execute(static_cast<fftw_plan>(plan_inverse_));
    const double scale = 1.0 / static_cast<double>(sites_);
    for (std::size_t i = 0; i < sites_; ++i) real_[i] *= scale;
}

std::pair<int, int> SpectralGrid::frequency(std::size_t mode) const {
    auto signed_freq = [this](int m) { return m <= n_ / 2 ? m : m - n_; };
    if (dim_ == 1) return {0, static_cast<int>(mode)};
    const int a = static_cast<int>(mode / static_cast<std::size_t>(half_));
    const int b = static_cast<int>(mode % static_cast<std::size_t>(half_));
    return {signed_freq(a), b};
}

std::vector<double> real_spectrum(SpectralGrid& grid, std::span<const double> field) {
    if (field.size() != grid.sites()) throw UsageError("field size does not match spectral grid");
    std::copy(field.begin(), field.end(), grid.real().begin());
    grid.forward();
    std::vector<double> out(grid.modes());
    const auto spec = grid.spectrum();
    for (std::size_t m = 0; m < out.size(); ++m) out[m] = spec[m].real();
    return out;
}

double quadratic_form_from_spectrum(const SpectralGrid& grid, std::span<const std::complex<double>> fhat,
                                    std::span<const double> cov_spectrum, const DomainSpec& domain) {
    if (fhat.size() != grid.modes() || cov_spectrum.size() != grid.modes())
        throw UsageError("spectrum size does not match spectral grid");
    double acc = 0.0;
    for (std::size_t m = 0; m < fhat.size(); ++m) acc += grid.multiplicity(m) * cov_spectrum[m] * std::norm(fhat[m]);
    const double cell = domain.cell_volume();
    return acc * cell * cell / static_cast<double>(grid.sites());
}

}  // namespace polylab
