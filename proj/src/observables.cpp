#include "polylab/observables.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "polylab/errors.hpp"

namespace polylab {

namespace {

double clamp_overlap(double value, double r0) { return std::clamp(value, 0.0, r0); }

void check_normalized(std::span<const double> f, const DomainSpec& domain) {
    double mass = 0.0;
    for (double v : f) mass += v;
    mass *= domain.cell_volume();
    if (!(std::abs(mass - 1.0) <= 1e-8)) throw UsageError("overlap functional needs a normalized density (mass " + std::to_string(mass) + ")");
}

std::pair<int, int> coords(std::size_t site, const DomainSpec& domain) {
    if (domain.dim == 1) return {0, static_cast<int>(site)};
    return {static_cast<int>(site / static_cast<std::size_t>(domain.n)), static_cast<int>(site % static_cast<std::size_t>(domain.n))};
}

std::size_t site_of(int a, int b, const DomainSpec& domain) {
    if (domain.dim == 1) return static_cast<std::size_t>(domain.wrap(b));
    return static_cast<std::size_t>(domain.wrap(a)) * domain.n + domain.wrap(b);
}

}  // namespace

double overlap_from_spectrum(std::span<const std::complex<double>> fhat, const Model& model, const SpectralGrid& grid) {
    return clamp_overlap(quadratic_form_from_spectrum(grid, fhat, model.cov_spectrum, model.domain), model.cov.r0);
}

double overlap_functional(std::span<const double> f, const Model& model) {
    if (f.size() != model.domain.sites()) throw UsageError("overlap functional: density has wrong size");
    check_normalized(f, model.domain);
    SpectralGrid grid(model.domain);
    std::copy(f.begin(), f.end(), grid.real().begin());
    grid.forward();
    return overlap_from_spectrum(grid.spectrum(), model, grid);
}

BoundaryMonitor::BoundaryMonitor(const Model& model) : cell_(model.domain.cell_volume()) {
    const DomainSpec& d = model.domain;
    const int reach = model.cov.radius;
    const int seam = d.n / 2;
    auto near_seam = [&](int coord) {
        const int c = d.centered(coord);
        return c >= seam - reach || c <= -(seam - reach);
    };
    for (std::size_t s = 0; s < d.sites(); ++s) {
        const auto [a, b] = coords(s, d);
        if (near_seam(b) || (d.dim == 2 && near_seam(a))) band_.push_back(s);
    }
}

double BoundaryMonitor::mass(std::span<const double> density) const {
    double m = 0.0;
    for (std::size_t s : band_) m += density[s];
    return std::clamp(m * cell_, 0.0, 1.0);
}

PathRecorder::PathRecorder(const Model& model) : model_(&model), boundary_(model), grid_(model.domain) {
    const auto n = static_cast<std::size_t>(model.domain.n_steps);
    overlap_.reserve(n);
    dm_.reserve(n);
    log_mass_.reserve(n + 1);
}

void PathRecorder::on_step(const StepView& view) {
    overlap_.push_back(overlap_from_spectrum(view.spectrum, *model_, grid_));
    double mass = 0.0;
    double pairing = 0.0;
    for (std::size_t x = 0; x < view.diffused.size(); ++x) {
        mass += view.diffused[x];
        pairing += view.diffused[x] * view.xi[x];
    }
    const DomainSpec& d = model_->domain;
    // beta dt dx^d sum P rho_i xi_i, with P rho_i renormalized
    dm_.push_back(d.beta * d.dt * pairing / mass);
}

void PathRecorder::on_state(const FieldState& state) {
    log_mass_.push_back(state.log_mass);
    boundary_max_ = std::max(boundary_max_, boundary_.mass(state.density));
}

OverlapSeries accumulate_overlap(std::span<const double> per_step_overlap, const DomainSpec& domain) {
    OverlapSeries s;
    s.per_step.assign(per_step_overlap.begin(), per_step_overlap.end());
    s.overlap.resize(s.per_step.size() + 1);
    s.qv.resize(s.per_step.size() + 1);
    const double b2 = domain.beta * domain.beta;
    double acc = 0.0;
    s.overlap[0] = 0.0;
    s.qv[0] = 0.0;
    for (std::size_t i = 0; i < s.per_step.size(); ++i) {
        acc += domain.dt * s.per_step[i];
        s.overlap[i + 1] = acc;
        s.qv[i + 1] = b2 * acc;
    }
    return s;
}

OverlapSeries accumulate_overlap(const PathRecorder& path, const DomainSpec& domain) {
    return accumulate_overlap(path.overlaps(), domain);
}

MartingaleSeries accumulate_martingale(std::span<const double> increments, std::span<const double> log_mass,
                                       const OverlapSeries& overlap) {
    if (log_mass.size() != increments.size() + 1 || overlap.qv.size() != log_mass.size())
        throw UsageError("martingale series: step counts of increments, log masses and overlaps do not line up");
    MartingaleSeries s;
    s.martingale.resize(log_mass.size());
    s.residual.resize(log_mass.size());
    double m = 0.0;
    for (std::size_t i = 0; i < log_mass.size(); ++i) {
        if (i > 0) m += increments[i - 1];
        s.martingale[i] = m;
        s.residual[i] = (log_mass[i] - log_mass[0]) - (m - 0.5 * overlap.qv[i]);
    }
    return s;
}

MartingaleSeries accumulate_martingale(const PathRecorder& path, const OverlapSeries& overlap) {
    return accumulate_martingale(path.martingale_increments(), path.log_mass(), overlap);
}

double fixed_time_overlap(const Model& model, const NoiseStream& stream) {
    const DomainSpec& d = model.domain;
    SpectralGrid grid(d);
    double total = 0.0;
    sweep_paired(model, stream, InitialData{InitialKind::delta_at_origin}, BackwardTerminal{},
                 [&](const FieldState& fwd, const BackwardState& bwd) {
                     if (fwd.step >= d.n_steps) return;
                     const std::vector<double> mu = gibbs_marginal(fwd, bwd, d);
                     std::copy(mu.begin(), mu.end(), grid.real().begin());
                     grid.forward();
                     total += overlap_from_spectrum(grid.spectrum(), model, grid);
                 });
    return d.dt * total;
}

MalliavinField malliavin_field(const Model& model, const NoiseStream& stream, std::size_t target_site,
                               std::span<const std::int64_t> slices) {
    const DomainSpec& d = model.domain;
    if (target_site >= d.sites()) throw UsageError("malliavin_field: target site outside the grid");
    std::vector<std::int64_t> wanted(slices.begin(), slices.end());
    if (wanted.empty())
        for (std::int64_t s = 0; s < d.n_steps; ++s) wanted.push_back(s);
    std::sort(wanted.begin(), wanted.end());
    wanted.erase(std::unique(wanted.begin(), wanted.end()), wanted.end());
    if (!wanted.empty() && (wanted.front() < 0 || wanted.back() >= d.n_steps))
        throw UsageError("malliavin_field: slice index outside [0, n_steps)");

    MalliavinField field;
    field.target_site = target_site;
    field.sites = d.sites();
    field.slices = wanted;
    field.values.assign(wanted.size() * d.sites(), 0.0);
    field.mass.assign(wanted.size(), 0.0);

    const double cell = d.cell_volume();
    std::vector<double> smoothed(d.sites());
    BackwardTerminal terminal{BackwardTerminal::Kind::delta_at, target_site};
    sweep_paired(model, stream, InitialData{InitialKind::constant_one}, terminal,
                 [&](const FieldState& fwd, const BackwardState& bwd) {
                     // the marginal at step i carries slice i-1's tilt
                     const std::int64_t s = fwd.step - 1;
                     const auto it = std::lower_bound(wanted.begin(), wanted.end(), s);
                     if (s < 0 || it == wanted.end() || *it != s) return;
                     const auto k = static_cast<std::size_t>(it - wanted.begin());
                     const std::vector<double> mu = gibbs_marginal(fwd, bwd, d);
                     // phi is even, so the correlation with phi is the convolution
                     mollify_into(mu, model.kernel, d, smoothed);
                     double mass = 0.0;
                     double* row = field.values.data() + k * d.sites();
                     for (std::size_t y = 0; y < d.sites(); ++y) {
                         row[y] = d.beta * smoothed[y];
                         mass += row[y];
                     }
                     field.mass[k] = mass * cell;
                 });
    return field;
}

double local_average(std::span<const double> h, int half_width, const DomainSpec& domain, std::size_t center) {
    if (h.size() != domain.sites()) throw UsageError("local_average: field has wrong size");
    if (half_width < 0 || 2 * half_width + 1 > domain.n) throw UsageError("local_average: box exceeds the grid");
    if (center >= domain.sites()) throw UsageError("local_average: center outside the grid");
    const auto [ca, cb] = coords(center, domain);
    double acc = 0.0;
    std::size_t count = 0;
    if (domain.dim == 1) {
        for (int o = -half_width; o <= half_width; ++o, ++count) acc += h[site_of(0, cb + o, domain)];
    } else {
        for (int oa = -half_width; oa <= half_width; ++oa)
            for (int ob = -half_width; ob <= half_width; ++ob, ++count) acc += h[site_of(ca + oa, cb + ob, domain)];
    }
    return acc / static_cast<double>(count);
}

IncrementAccumulator::IncrementAccumulator(const DomainSpec& domain, std::vector<int> lags)
    : domain_(domain), lags_(std::move(lags)), sum_(lags_.size(), 0.0), sum_sq_(lags_.size(), 0.0) {
    for (int k : lags_)
        if (k < 0 || k >= domain.n) throw UsageError("increment lag outside [0, n)");
}

void IncrementAccumulator::add(std::span<const double> h) {
    if (h.size() != domain_.sites()) throw UsageError("increment moments: field has wrong size");
    for (std::size_t j = 0; j < lags_.size(); ++j) {
        const int k = lags_[j];
        double acc = 0.0;
        for (std::size_t s = 0; s < h.size(); ++s) {
            const auto [a, b] = coords(s, domain_);
            const std::size_t shifted = domain_.dim == 1 ? site_of(0, b + k, domain_) : site_of(a + k, b, domain_);
            const double diff = h[s] - h[shifted];
            acc += diff * diff;
        }
        const double v = acc / static_cast<double>(h.size());
        sum_[j] += v;
        sum_sq_[j] += v * v;
    }
    ++count_;
}

IncrementMoments IncrementAccumulator::result(double beta, double r0) const {
    if (count_ < 2) throw UsageError("increment moments need at least 2 realizations");
    IncrementMoments out;
    out.lags = lags_;
    const double nr = static_cast<double>(count_);
    for (std::size_t j = 0; j < lags_.size(); ++j) {
        const double mean = sum_[j] / nr;
        const double var = std::max(0.0, (sum_sq_[j] - nr * mean * mean) / (nr - 1.0));
        const double se = std::sqrt(var / nr);
        const double dist = lags_[j] * domain_.dx;
        const double bound = beta * beta * r0 * dist * dist;
        out.moment.push_back(mean);
        out.std_error.push_back(se);
        out.bound.push_back(bound);
        out.ratio.push_back(bound > 0.0 ? mean / bound : 0.0);
        out.ratio_se.push_back(bound > 0.0 ? se / bound : 0.0);
    }
    return out;
}

IncrementMoments increment_moments(std::span<const std::vector<double>> h_fields, std::span<const int> lags,
                                   const DomainSpec& domain, double r0) {
    IncrementAccumulator acc(domain, std::vector<int>(lags.begin(), lags.end()));
    for (const auto& h : h_fields) acc.add(h);
    return acc.result(domain.beta, r0);
}

double mean_squared_gradient(std::span<const double> h, const DomainSpec& domain) {
    if (h.size() != domain.sites()) throw UsageError("gradient: field has wrong size");
    const double inv = 1.0 / (2.0 * domain.dx);
    double acc = 0.0;
    for (std::size_t s = 0; s < h.size(); ++s) {
        const auto [a, b] = coords(s, domain);
        const double gb = (h[site_of(a, b + 1, domain)] - h[site_of(a, b - 1, domain)]) * inv;
        acc += gb * gb;
        if (domain.dim == 2) {
            const double ga = (h[site_of(a + 1, b, domain)] - h[site_of(a - 1, b, domain)]) * inv;
            acc += ga * ga;
        }
    }
    return acc / static_cast<double>(h.size());
}

GradientOverlapReport gradient_overlap_identity(std::span<const std::vector<double>> h_fields,
                                                std::span<const std::vector<double>> rho_fields, const Model& model) {
    if (h_fields.size() < 2 || rho_fields.size() < 2) throw UsageError("gradient/overlap identity needs >= 2 samples of each");
    const DomainSpec& d = model.domain;
    std::vector<double> f, g;
    for (const auto& h : h_fields) f.push_back(mean_squared_gradient(h, d));
    for (const auto& rho : rho_fields) g.push_back(overlap_functional(rho, model));

    auto mean_se = [](const std::vector<double>& v) {
        const double n = static_cast<double>(v.size());
        double m = 0.0;
        for (double x : v) m += x;
        m /= n;
        double ss = 0.0;
        for (double x : v) ss += (x - m) * (x - m);
        return std::pair{m, std::sqrt(ss / (n - 1.0) / n)};
    };

    GradientOverlapReport r;
    const double b2 = d.beta * d.beta;
    std::tie(r.f_hat, r.f_se) = mean_se(f);
    std::tie(r.g_hat, r.g_se) = mean_se(g);
    r.defect = r.f_hat - b2 * (model.cov.r0 - r.g_hat);
    if (f.size() == g.size()) {
        // same realizations: use the paired difference
        std::vector<double> diff(f.size());
        for (std::size_t k = 0; k < f.size(); ++k) diff[k] = f[k] - b2 * (model.cov.r0 - g[k]);
        r.defect_se = mean_se(diff).second;
    } else {
        r.defect_se = std::sqrt(r.f_se * r.f_se + b2 * b2 * r.g_se * r.g_se);
    }
    r.samples = std::min(f.size(), g.size());
    return r;
}

EndpointMode endpoint_mode(std::span<const double> rho, const DomainSpec& domain) {
    if (rho.size() != domain.sites()) throw UsageError("endpoint_mode: density has wrong size");
    EndpointMode out;
    out.site = static_cast<std::size_t>(std::max_element(rho.begin(), rho.end()) - rho.begin());
    out.centered.resize(rho.size());
    const auto [ma, mb] = coords(out.site, domain);
    for (std::size_t s = 0; s < rho.size(); ++s) {
        const auto [a, b] = coords(s, domain);
        out.centered[s] = rho[site_of(a + ma, b + mb, domain)];
    }
    return out;
}

BksQuantities bks_derivative_average(const Model& model, const BksOptions& options) {
    const DomainSpec& d = model.domain;
    if (d.dim != 1) throw UsageError("bks_derivative_average supports d = 1 only");
    if (options.half_widths.empty() || options.slices.empty()) throw UsageError("bks: empty box or slice grid");
    if (options.realizations < 2) throw UsageError("bks: need at least 2 realizations");
    const int m_max = *std::max_element(options.half_widths.begin(), options.half_widths.end());
    if (*std::min_element(options.half_widths.begin(), options.half_widths.end()) < 0) throw UsageError("bks: negative box half-width");
    const std::size_t box_sites = static_cast<std::size_t>(2 * m_max + 1);
    if (box_sites > options.site_budget)
        throw UsageError("bks: box of " + std::to_string(box_sites) + " sites exceeds the site budget of " +
                         std::to_string(options.site_budget));
    if (static_cast<int>(box_sites) > d.n) throw UsageError("bks: box exceeds the grid");

    std::vector<std::int64_t> slices = options.slices;
    std::sort(slices.begin(), slices.end());
    slices.erase(std::unique(slices.begin(), slices.end()), slices.end());
    if (slices.front() < 0 || slices.back() >= d.n_steps) throw UsageError("bks: slice outside [0, n_steps)");

    const std::size_t sites = d.sites();
    const std::size_t n_slices = slices.size();
    const std::size_t plane = n_slices * sites;
    const double cell = d.cell_volume();

    SnapshotPolicy policy{SnapshotPolicy::Kind::explicit_steps, {}};
    for (std::int64_t s : slices) policy.steps.push_back(s + 1);

    std::vector<std::vector<double>> sum(options.half_widths.size(), std::vector<double>(plane, 0.0));
    std::vector<std::vector<double>> sum_sq = sum;
    std::vector<double> integral_sum(options.half_widths.size(), 0.0);
    std::vector<double> integral_sq(options.half_widths.size(), 0.0);

    std::vector<double> per_site(box_sites * plane);  // D_x(s, y) for one realization
    std::vector<double> smoothed(sites);
    std::vector<double> a_r(plane);

    for (std::size_t r = 0; r < options.realizations; ++r) {
        const NoiseStream stream{options.master_seed, options.first_realization + r};
        const ForwardTrajectory fwd = run_forward(model, stream, InitialData{InitialKind::constant_one}, policy);
        BackwardSolver bsolver(model, stream);

        for (std::size_t bx = 0; bx < box_sites; ++bx) {
            const auto target = static_cast<std::size_t>(d.wrap(static_cast<int>(bx) - m_max));
            BackwardState bwd = terminal_state(d, BackwardTerminal{BackwardTerminal::Kind::delta_at, target});
            for (std::size_t k = n_slices; k-- > 0;) {
                const std::int64_t step = slices[k] + 1;
                while (bwd.step > step) bsolver.step(bwd);
                const auto snap = std::find_if(fwd.snapshots.begin(), fwd.snapshots.end(),
                                               [&](const Snapshot& sn) { return sn.step == step; });
                FieldState f{snap->density, snap->log_mass, snap->step};
                const std::vector<double> mu = gibbs_marginal(f, bwd, d);
                mollify_into(mu, model.kernel, d, smoothed);
                double* row = per_site.data() + bx * plane + k * sites;
                for (std::size_t y = 0; y < sites; ++y) row[y] = d.beta * smoothed[y];
            }
        }

        for (std::size_t j = 0; j < options.half_widths.size(); ++j) {
            const int m = options.half_widths[j];
            const double inv = 1.0 / static_cast<double>(2 * m + 1);
            std::fill(a_r.begin(), a_r.end(), 0.0);
            for (int o = -m; o <= m; ++o) {
                const double* src = per_site.data() + static_cast<std::size_t>(o + m_max) * plane;
                for (std::size_t q = 0; q < plane; ++q) a_r[q] += src[q];
            }
            double mass_total = 0.0;
            for (std::size_t q = 0; q < plane; ++q) {
                a_r[q] *= inv;
                sum[j][q] += a_r[q];
                sum_sq[j][q] += a_r[q] * a_r[q];
                mass_total += a_r[q];
            }
            // int_0^T int A^2 = beta |phi|_inf T * (mean over sampled s of int a(s, y) dy)
            const double integral = d.beta * model.kernel.linf * d.horizon() * mass_total * cell / static_cast<double>(n_slices);
            integral_sum[j] += integral;
            integral_sq[j] += integral * integral;
        }
    }

    BksQuantities out;
    out.slices = slices;
    out.sites = sites;
    const double nr = static_cast<double>(options.realizations);
    for (std::size_t j = 0; j < options.half_widths.size(); ++j) {
        BksBox box;
        box.half_width = options.half_widths[j];
        box.box_sites = static_cast<std::size_t>(2 * box.half_width + 1);
        box.box_volume = static_cast<double>(box.box_sites) * d.dx;
        box.ratio_lower_bound = std::sqrt(model.kernel.linf / model.kernel.l1 * box.box_volume);
        box.a_mean.resize(plane);
        box.a_se.resize(plane);
        box.big_a.resize(plane);
        box.ratio.resize(plane);
        box.ratio_se.resize(plane);
        double worst = -std::numeric_limits<double>::infinity();
        for (std::size_t q = 0; q < plane; ++q) {
            const double mean = sum[j][q] / nr;
            const double var = std::max(0.0, (sum_sq[j][q] - nr * mean * mean) / (nr - 1.0));
            const double se = std::sqrt(var / nr);
            box.a_mean[q] = mean;
            box.a_se[q] = se;
            box.big_a[q] = std::sqrt(d.beta * model.kernel.linf * mean);
            if (mean > 0.0) {
                box.ratio[q] = std::sqrt(d.beta * model.kernel.linf / mean);
                box.ratio_se[q] = box.ratio[q] * se / (2.0 * mean);
            } else {
                box.ratio[q] = std::numeric_limits<double>::infinity();
                box.ratio_se[q] = 0.0;
            }
            const double gap = box.ratio_lower_bound - box.ratio[q];
            // rounding slack for slices where D is deterministic
            if (gap <= 1e-12 * box.ratio_lower_bound) {
                worst = std::max(worst, box.ratio_se[q] > 0.0 ? gap / box.ratio_se[q] : 0.0);
            } else {
                worst = std::max(worst, box.ratio_se[q] > 0.0 ? gap / box.ratio_se[q]
                                                               : std::numeric_limits<double>::infinity());
            }
        }
        box.worst_shortfall_sigma = worst;
        const double imean = integral_sum[j] / nr;
        box.a_squared_integral = imean;
        box.a_squared_integral_se = std::sqrt(std::max(0.0, (integral_sq[j] - nr * imean * imean) / (nr - 1.0)) / nr);
        box.a_squared_target = d.beta * d.beta * model.kernel.linf * model.kernel.l1 * d.horizon();
        out.boxes.push_back(std::move(box));
    }
    return out;
}

void write_malliavin_csv(std::ostream& os, const MalliavinField& field, const DomainSpec& domain) {
    os.precision(17);
    os << "slice,time,site,value\n";
    for (std::size_t k = 0; k < field.slices.size(); ++k) {
        const auto row = field.row(k);
        for (std::size_t y = 0; y < row.size(); ++y)
            os << field.slices[k] << ',' << static_cast<double>(field.slices[k]) * domain.dt << ',' << y << ','
               << row[y] << '\n';
    }
}

}  // namespace polylab
