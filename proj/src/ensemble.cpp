#include "polylab/ensemble.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <iomanip>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include "polylab/errors.hpp"

namespace polylab {

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
}

std::string at_t(double T) { return " T=" + fmt(T); }

// Cyclic moving average of width 2m+1 along one axis, in place.
void box_filter_axis(std::vector<double>& f, int m, const DomainSpec& d, int axis) {
    const int n = d.n;
    const int lines = d.dim == 1 ? 1 : n;
    const std::size_t stride = (d.dim == 2 && axis == 0) ? static_cast<std::size_t>(n) : 1;
    const double inv = 1.0 / static_cast<double>(2 * m + 1);
    std::vector<double> line(n), out(n);
    for (int l = 0; l < lines; ++l) {
        const std::size_t base = d.dim == 1 ? 0 : (axis == 0 ? static_cast<std::size_t>(l) : static_cast<std::size_t>(l) * n);
        for (int i = 0; i < n; ++i) line[i] = f[base + i * stride];
        double acc = 0.0;
        for (int o = -m; o <= m; ++o) acc += line[d.wrap(o)];
        for (int i = 0; i < n; ++i) {
            out[i] = acc * inv;
            acc += line[d.wrap(i + m + 1)] - line[d.wrap(i - m)];
        }
        for (int i = 0; i < n; ++i) f[base + i * stride] = out[i];
    }
}

std::vector<double> box_average_field(std::span<const double> h, int m, const DomainSpec& d) {
    std::vector<double> f(h.begin(), h.end());
    box_filter_axis(f, m, d, 1);
    if (d.dim == 2) box_filter_axis(f, m, d, 0);
    return f;
}

std::size_t shifted_site(std::size_t s, int k, const DomainSpec& d) {
    if (d.dim == 1) return static_cast<std::size_t>(d.wrap(static_cast<long long>(s) + k));
    const auto n = static_cast<std::size_t>(d.n);
    return static_cast<std::size_t>(d.wrap(static_cast<long long>(s / n) + k)) * n + s % n;
}

HeightSample height_sample(const FieldState& state, const Model& model, const RecordingSpec& rec) {
    const DomainSpec& d = model.domain;
    const std::vector<double> h = height_field(state, d);
    HeightSample out;
    out.step = state.step;
    out.h_origin = h[0];
    out.gradient_sq = mean_squared_gradient(h, d);
    const double inv_sites = 1.0 / static_cast<double>(h.size());
    for (int k : rec.lags) {
        double acc = 0.0;
        for (std::size_t s = 0; s < h.size(); ++s) {
            const double diff = h[s] - h[shifted_site(s, k, d)];
            acc += diff * diff;
        }
        out.increments.push_back(acc * inv_sites);
    }
    const int centres = std::max(1, rec.box_centers);
    for (int m : rec.box_half_widths) {
        const std::vector<double> hm = box_average_field(h, m, d);
        double acc = 0.0;
        for (std::size_t s = 0; s < h.size(); ++s) acc += (h[s] - hm[s]) * (h[s] - hm[s]);
        out.box_gap.push_back(acc * inv_sites);
        for (int c = 0; c < centres; ++c) {
            const int coord = static_cast<int>(static_cast<long long>(c) * d.n / centres);
            const std::size_t site = d.dim == 1 ? static_cast<std::size_t>(coord)
                                                : static_cast<std::size_t>(coord) * d.n + coord;
            out.box_average.push_back(hm[site]);
        }
    }
    return out;
}

void validate_spec(const EnsembleSpec& spec) {
    spec.domain.validate();
    if (spec.realizations < 1) throw UsageError("ensemble needs at least one realization");
    if (!(spec.boundary_threshold >= 0.0)) throw ConfigError("boundary_mass_threshold must be >= 0");
    for (std::int64_t s : spec.recording.snapshot_steps)
        if (s < 0 || s > spec.domain.n_steps) throw ConfigError("snapshot step outside [0, n_steps]");
    for (int k : spec.recording.lags)
        if (k < 0 || k >= spec.domain.n) throw ConfigError("increment lag outside [0, n)");
    for (int m : spec.recording.box_half_widths)
        if (m < 0 || 2 * m + 1 > spec.domain.n) throw ConfigError("box half-width exceeds the grid");
}

struct MeanSe {
    double mean = 0.0;
    double se = 0.0;
    std::size_t n = 0;
};

MeanSe mean_se(std::span<const double> xs) {
    const Accumulator a = accumulate(xs);
    return {a.mean, a.std_error(), static_cast<std::size_t>(a.count)};
}

double z_of(double level) { return normal_quantile(0.5 + 0.5 * level); }

TestReport degenerate(const std::string& name, std::size_t n, const std::string& why) {
    TestReport r;
    r.name = name;
    r.statistic = std::numeric_limits<double>::quiet_NaN();
    r.lower = r.upper = std::numeric_limits<double>::quiet_NaN();
    r.pass = false;
    r.samples = n;
    r.note = "degenerate: " + why;
    return r;
}

}  // namespace

RunRecord run_realization(const Model& model, const EnsembleSpec& spec, std::uint64_t id) {
    const DomainSpec& d = model.domain;
    RunRecord rec;
    rec.realization_id = id;
    rec.T = d.horizon();
    rec.beta = d.beta;
    const NoiseStream stream{spec.master_seed, id};
    const auto& steps = spec.recording.snapshot_steps;
    try {
        PathRecorder path(model);
        SnapshotPolicy policy{SnapshotPolicy::Kind::explicit_steps, steps};
        if (steps.empty()) policy.kind = SnapshotPolicy::Kind::none;
        const ForwardTrajectory traj = run_forward(model, stream, InitialData{spec.init}, policy, &path, spec.scheme);
        const OverlapSeries overlap = accumulate_overlap(path, d);
        const MartingaleSeries mart = accumulate_martingale(path, overlap);
        rec.log_Z_T = traj.final_state.log_mass - traj.log_mass.front();
        rec.O_T = overlap.final_overlap();
        rec.qv_T = overlap.final_qv();
        rec.M_T = mart.martingale.back();
        rec.residual_T = mart.residual.back();
        rec.boundary_mass = path.boundary_mass();
        for (std::int64_t s : steps) {
            const auto snap = std::find_if(traj.snapshots.begin(), traj.snapshots.end(),
                                           [s](const Snapshot& sn) { return sn.step == s; });
            if (snap == traj.snapshots.end()) throw UsageError("snapshot step " + std::to_string(s) + " not recorded");
            if (spec.init == InitialKind::delta_at_origin) {
                rec.snapshot_overlap.push_back(overlap_functional(snap->density, model));
            } else {
                const FieldState state{snap->density, snap->log_mass, snap->step};
                rec.heights.push_back(height_sample(state, model, spec.recording));
            }
        }
        if (spec.recording.fixed_time_overlap) rec.fixed_T_overlap = fixed_time_overlap(model, stream);
    } catch (const NumericalError& e) {
        rec.failed = true;
        rec.failure = e.what();
        rec.failed_step = e.step();
        return rec;
    }
    if (spec.init == InitialKind::delta_at_origin && rec.boundary_mass > spec.boundary_threshold) {
        rec.failed = true;
        rec.failure = "boundary";
    }
    return rec;
}

Summary summarize(const RunRecord& r) {
    Summary s;
    auto put = [&](const char* key, double v) { s[key].add(v); };
    put("log_Z_T", r.log_Z_T);
    put("Z_T", std::exp(r.log_Z_T));
    put("O_T", r.O_T);
    put("M_T", r.M_T);
    put("M_T_sq", r.M_T * r.M_T);
    put("qv_T", r.qv_T);
    put("residual_T", r.residual_T);
    put("abs_residual_T", std::abs(r.residual_T));
    put("boundary_mass", r.boundary_mass);
    if (r.fixed_T_overlap) put("fixed_T_overlap", *r.fixed_T_overlap);
    return s;
}

Summary merge_tree(std::span<const Summary> leaves) {
    if (leaves.empty()) return {};
    if (leaves.size() == 1) return leaves.front();
    const std::size_t mid = leaves.size() / 2;
    Summary left = merge_tree(leaves.first(mid));
    const Summary right = merge_tree(leaves.subspan(mid));
    for (const auto& [key, acc] : right) left[key].merge(acc);
    return left;
}

EnsembleResult run_ensemble(const EnsembleSpec& spec, unsigned jobs, const ProgressFn& progress) {
    validate_spec(spec);
    const Model model = make_model(spec.domain, spec.kernel, spec.symbol);
    const std::size_t total = spec.realizations;
    if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
    jobs = static_cast<unsigned>(std::min<std::size_t>(jobs, total));

    EnsembleResult result;
    result.T = spec.domain.horizon();
    result.records.resize(total);

    std::atomic<std::size_t> next{0};
    std::size_t done = 0;
    std::mutex mutex;
    std::exception_ptr error;
    auto worker = [&] {
        for (;;) {
            const std::size_t k = next.fetch_add(1);
            if (k >= total) return;
            try {
                result.records[k] = run_realization(model, spec, spec.first_id + k);
            } catch (...) {
                std::lock_guard lock(mutex);
                if (!error) error = std::current_exception();
                next.store(total);
                return;
            }
            std::lock_guard lock(mutex);
            ++done;
            if (progress) progress(done, total);
        }
    };
    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned j = 0; j < jobs; ++j) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (error) std::rethrow_exception(error);

    std::vector<Summary> leaves;
    for (const RunRecord& r : result.records) {
        if (r.failed) {
            ++result.failed;
            if (r.failure == "boundary") ++result.boundary_rejected;
        } else {
            ++result.accepted;
            leaves.push_back(summarize(r));
        }
    }
    result.summary = merge_tree(leaves);
    return result;
}

std::vector<double> column(std::span<const RunRecord> records, double RunRecord::*field) {
    std::vector<double> out;
    out.reserve(records.size());
    for (const RunRecord& r : records)
        if (!r.failed) out.push_back(r.*field);
    return out;
}

GammaEstimate estimate_gamma(std::span<const SeriesAtT> log_z, double ci_level) {
    std::vector<double> ts;
    for (const auto& s : log_z) ts.push_back(s.T);
    std::sort(ts.begin(), ts.end());
    if (std::unique(ts.begin(), ts.end()) - ts.begin() < 3) throw UsageError("estimate_gamma needs at least 3 distinct T values");

    GammaEstimate g;
    bool weighted = true;
    for (const auto& s : log_z) {
        if (s.values.size() < 2) throw UsageError("estimate_gamma needs at least 2 samples per T");
        std::vector<double> neg(s.values.size());
        std::transform(s.values.begin(), s.values.end(), neg.begin(), [](double v) { return -v; });
        const MeanSe m = mean_se(neg);
        g.points.push_back({s.T, m.mean, m.se, m.mean / s.T});
        if (!(m.se > 0.0)) weighted = false;
    }
    double sw = 0.0, st = 0.0, sy = 0.0;
    auto weight = [&](const GammaPoint& p) { return weighted ? 1.0 / (p.se * p.se) : 1.0; };
    for (const auto& p : g.points) {
        sw += weight(p);
        st += weight(p) * p.T;
        sy += weight(p) * p.mean;
    }
    const double tbar = st / sw;
    const double ybar = sy / sw;
    double sxx = 0.0, sxy = 0.0;
    for (const auto& p : g.points) {
        sxx += weight(p) * (p.T - tbar) * (p.T - tbar);
        sxy += weight(p) * (p.T - tbar) * (p.mean - ybar);
    }
    g.gamma_hat = sxy / sxx;
    g.intercept = ybar - g.gamma_hat * tbar;
    if (weighted) {
        g.se = std::sqrt(1.0 / sxx);
    } else {
        double var = 0.0;
        for (const auto& p : g.points) var += std::pow((p.T - tbar) / sxx, 2) * p.se * p.se;
        g.se = std::sqrt(var);
    }
    const double z = z_of(ci_level);
    g.ci_low = g.gamma_hat - z * g.se;
    g.ci_high = g.gamma_hat + z * g.se;
    return g;
}

std::vector<TestReport> normality_reports(const std::string& label, std::span<const double> xs, const Tolerances& tol,
                                          std::uint64_t seed) {
    std::vector<TestReport> out;
    const std::size_t n = xs.size();
    if (n < 20) throw UsageError(label + ": normality tests need at least 20 samples");
    if (!(variance_of(xs) > 0.0)) {
        for (const char* t : {" skewness z", " excess kurtosis z", " KS distance"})
            out.push_back(degenerate(label + t, n, "zero variance"));
        return out;
    }
    const double zc = normal_quantile(1.0 - 0.5 * tol.alpha);
    const ZTest sk = skewness_test(xs);
    const ZTest ku = kurtosis_test(xs);
    out.push_back({label + " skewness z", sk.z, -zc, zc, std::abs(sk.z) <= zc, n,
                   "skewness " + fmt(sk.sample) + ", p " + fmt(sk.p_value)});
    out.push_back({label + " excess kurtosis z", ku.z, -zc, zc, std::abs(ku.z) <= zc, n,
                   "excess kurtosis " + fmt(ku.sample) + ", p " + fmt(ku.p_value)});
    const double d = ks_normal_distance(xs);
    const double crit = ks_bootstrap_critical(n, tol.alpha, tol.ks_resamples, seed);
    out.push_back({label + " KS distance", d, 0.0, crit, d <= crit, n,
                   "critical value from " + std::to_string(tol.ks_resamples) + " parametric resamples"});
    return out;
}

namespace {

TestReport band_report(const std::string& name, double ratio, double rel_se, std::size_t n, const Tolerances& tol) {
    const double z = z_of(tol.ci_level);
    TestReport r{name, ratio, tol.variance_band_low, tol.variance_band_high,
                 ratio >= tol.variance_band_low && ratio <= tol.variance_band_high, n, ""};
    r.note = "CI [" + fmt(ratio * (1.0 - z * rel_se)) + ", " + fmt(ratio * (1.0 + z * rel_se)) + "]";
    return r;
}

}  // namespace

std::vector<TestReport> clt_report(std::span<const double> overlap, double T, double beta, const GammaEstimate& gamma,
                                   const Tolerances& tol, std::uint64_t seed) {
    std::vector<double> s(overlap.begin(), overlap.end());
    const double mu = mean_of(overlap);
    for (double& v : s) v = (v - mu) / std::sqrt(T);
    std::vector<TestReport> out = normality_reports("overlap" + at_t(T), s, tol, seed);
    const std::string name = "overlap variance ratio" + at_t(T);
    const double var = variance_of(overlap);
    if (!(beta > 0.0) || !(gamma.gamma_hat > 0.0) || !(var > 0.0)) {
        out.push_back(degenerate(name, overlap.size(), "needs beta > 0, gamma_hat > 0 and Var > 0"));
        return out;
    }
    const double target = T * 8.0 * gamma.gamma_hat / std::pow(beta, 4);
    const double n = static_cast<double>(overlap.size());
    const double rel = std::sqrt(2.0 / (n - 1.0) + std::pow(gamma.se / gamma.gamma_hat, 2));
    out.push_back(band_report(name, var / target, rel, overlap.size(), tol));
    return out;
}

std::vector<TestReport> m_checks(std::span<const MartingaleGroup> groups, double beta, const GammaEstimate& gamma,
                                 const Tolerances& tol, std::uint64_t seed) {
    if (groups.empty()) throw UsageError("m_checks needs at least one T");
    std::vector<TestReport> out;
    const MartingaleGroup* largest = &groups.front();
    for (const auto& g : groups) {
        if (g.log_z.size() != g.m.size()) throw UsageError("m_checks: log Z and M samples are not paired");
        if (g.T > largest->T) largest = &g;
        std::vector<double> diff(g.m.size());
        for (std::size_t k = 0; k < diff.size(); ++k) diff[k] = g.m[k] * g.m[k] + 2.0 * g.log_z[k];
        const MeanSe d = mean_se(diff);
        const double bound = tol.sigma * d.se;
        TestReport r{"E M^2 + 2 E log Z" + at_t(g.T), d.mean, -bound, bound,
                     d.se > 0.0 ? std::abs(d.mean) <= bound : d.mean == 0.0, d.n, ""};
        std::vector<double> m2(g.m.size());
        for (std::size_t k = 0; k < m2.size(); ++k) m2[k] = g.m[k] * g.m[k];
        r.note = "mean M^2 " + fmt(mean_of(m2)) + ", -2 mean log Z " + fmt(-2.0 * mean_of(g.log_z)) + ", paired SE " +
                 fmt(d.se);
        out.push_back(r);
    }
    const double T = largest->T;
    const std::string name = "martingale variance ratio" + at_t(T);
    const double var = variance_of(largest->m);
    if (!(beta > 0.0) || !(gamma.gamma_hat > 0.0) || !(var > 0.0)) {
        out.push_back(degenerate(name, largest->m.size(), "needs beta > 0, gamma_hat > 0 and Var > 0"));
    } else {
        const double n = static_cast<double>(largest->m.size());
        const double rel = std::sqrt(2.0 / (n - 1.0) + std::pow(gamma.se / gamma.gamma_hat, 2));
        out.push_back(band_report(name, var / (2.0 * gamma.gamma_hat * T), rel, largest->m.size(), tol));
    }
    std::vector<double> scaled(largest->m);
    for (double& v : scaled) v /= std::sqrt(T);
    for (auto& r : normality_reports("martingale" + at_t(T), scaled, tol, seed)) out.push_back(std::move(r));
    return out;
}

TestReport normalization_check(std::span<const double> log_z, double T, double beta, double r0, const Tolerances& tol) {
    std::vector<double> z(log_z.size());
    std::transform(log_z.begin(), log_z.end(), z.begin(), [](double v) { return std::exp(v); });
    const MeanSe m = mean_se(z);
    const double bound = tol.sigma * m.se;
    TestReport r{"E Z_T - 1" + at_t(T), m.mean - 1.0, -bound, bound,
                 m.se > 0.0 ? std::abs(m.mean - 1.0) <= bound : m.mean == 1.0, m.n, ""};
    const double regime = beta * beta * r0 * T;
    r.note = "beta^2 R(0) T = " + fmt(regime) + (regime <= 2.0 ? " (light-tail regime)" : " (outside light-tail regime)");
    return r;
}

std::vector<TestReport> overlap_growth(std::span<const SeriesAtT> overlap, double beta, const GammaEstimate& gamma,
                                       const Tolerances& tol) {
    std::vector<const SeriesAtT*> sorted;
    for (const auto& s : overlap) sorted.push_back(&s);
    std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->T > b->T; });
    std::vector<TestReport> out;
    const double z = z_of(tol.ci_level);
    for (std::size_t k = 0; k < std::min<std::size_t>(2, sorted.size()); ++k) {
        const SeriesAtT& s = *sorted[k];
        const MeanSe m = mean_se(s.values);
        const double scale = beta * beta / (2.0 * s.T);
        const double rate = scale * m.mean;
        const double half = z * std::hypot(scale * m.se, gamma.se);
        TestReport r{"overlap growth rate - gamma_hat" + at_t(s.T), rate - gamma.gamma_hat, -half, half,
                     std::abs(rate - gamma.gamma_hat) <= half, m.n, ""};
        r.note = "beta^2 mean(O_T)/(2T) " + fmt(rate) + " vs gamma_hat " + fmt(gamma.gamma_hat);
        out.push_back(r);
    }
    return out;
}

std::vector<TestReport> variance_scaling(std::span<const SeriesAtT> log_z, const Tolerances& tol, std::uint64_t seed) {
    std::vector<const SeriesAtT*> sorted;
    for (const auto& s : log_z) sorted.push_back(&s);
    std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->T < b->T; });
    if (sorted.size() < 4 || sorted.back()->T < 8.0 * sorted.front()->T)
        throw UsageError("variance_scaling needs >= 4 T values spanning a factor of 8");

    struct Row {
        double T, v, lo, hi;
    };
    std::vector<Row> rows;
    std::vector<TestReport> out;
    for (std::size_t j = 0; j < sorted.size(); ++j) {
        const SeriesAtT& s = *sorted[j];
        const double v = variance_of(s.values);
        const Interval ci = bootstrap_variance_ci(s.values, tol.ci_level, tol.bootstrap_resamples, seed + j);
        rows.push_back({s.T, v / s.T, ci.lower / s.T, ci.upper / s.T});
        TestReport r{"Var log Z / T" + at_t(s.T), v / s.T, ci.lower / s.T, ci.upper / s.T, true, s.values.size(),
                     "bootstrap CI; Var log T / T = " + fmt(v * std::log(s.T) / s.T)};
        r.diagnostic = true;
        out.push_back(r);
    }
    int violations = 0;
    for (std::size_t j = 1; j < rows.size(); ++j)
        if (rows[j].lo > rows[j - 1].hi) ++violations;
    out.push_back({"Var log Z / T nonincreasing (CI overlap allowed)", static_cast<double>(violations), 0.0, 0.0,
                   violations == 0, rows.size(), "number of adjacent pairs with disjoint increasing CIs"});

    const Row& first = rows.front();
    const Row& last = rows.back();
    const bool degenerate_var = !(first.v > 0.0);
    TestReport drop{"Var log Z / T largest-T upper CI below smallest-T lower CI", last.hi, 0.0, first.lo,
                    !degenerate_var && last.hi < first.lo, sorted.back()->values.size(), ""};
    drop.note = "T=" + fmt(last.T) + " CI [" + fmt(last.lo) + ", " + fmt(last.hi) + "] vs T=" + fmt(first.T) + " CI [" +
                fmt(first.lo) + ", " + fmt(first.hi) + "]";
    if (degenerate_var) drop.note = "degenerate: zero variance";
    out.push_back(drop);

    double cmin = std::numeric_limits<double>::infinity(), cmax = 0.0;
    for (const Row& r : rows) {
        const double c = r.v * std::log(r.T);
        cmin = std::min(cmin, c);
        cmax = std::max(cmax, c);
    }
    if (!(cmin > 0.0)) {
        out.push_back(degenerate("Var log T / T spread", rows.size(), "zero variance"));
    } else {
        out.push_back({"Var log T / T spread (max/min)", cmax / cmin, 1.0, tol.scaling_spread,
                       cmax / cmin <= tol.scaling_spread, rows.size(), "C_hat = " + fmt(cmax)});
    }
    return out;
}

std::vector<TestReport> bound_suite(const BoundSuiteInput& input, const Tolerances& tol) {
    if (input.model == nullptr || input.recording == nullptr) throw UsageError("bound_suite: model and recording required");
    const Model& model = *input.model;
    const RecordingSpec& rec = *input.recording;
    const DomainSpec& d = model.domain;
    std::vector<const RunRecord*> runs;
    for (const RunRecord& r : input.records)
        if (!r.failed) runs.push_back(&r);
    if (runs.size() < 2) throw UsageError("bound_suite needs at least 2 accepted height runs");
    for (const RunRecord* r : runs)
        if (r->heights.size() != rec.snapshot_steps.size()) throw UsageError("bound_suite: missing height snapshots");

    const std::vector<std::int64_t> steps = input.steps.empty() ? rec.snapshot_steps : input.steps;
    const double b2 = d.beta * d.beta;
    const double r0 = model.cov.r0;
    const double linf = model.kernel.linf;
    const double l1 = model.kernel.l1;
    const int centres = std::max(1, rec.box_centers);
    std::vector<TestReport> out;
    std::vector<double> fitted;

    for (std::int64_t step : steps) {
        const auto it = std::find(rec.snapshot_steps.begin(), rec.snapshot_steps.end(), step);
        if (it == rec.snapshot_steps.end()) throw UsageError("bound_suite: step " + std::to_string(step) + " not recorded");
        const auto j = static_cast<std::size_t>(it - rec.snapshot_steps.begin());
        const double t = static_cast<double>(step) * d.dt;
        const std::string when = " t=" + fmt(t);

        for (std::size_t q = 0; q < rec.lags.size(); ++q) {
            const int k = rec.lags[q];
            if (k == 0) continue;
            std::vector<double> v;
            for (const RunRecord* r : runs) v.push_back(r->heights[j].increments[q]);
            const MeanSe m = mean_se(v);
            const double bound = b2 * r0 * std::pow(k * d.dx, 2);
            const std::string name = "increment ratio" + when + " lag=" + fmt(k * d.dx);
            if (!(bound > 0.0)) {
                out.push_back({name, 0.0, 0.0, 1.0, m.mean == 0.0, m.n, "beta = 0: moment " + fmt(m.mean)});
                continue;
            }
            const double upper = 1.0 + tol.sigma * m.se / bound;
            out.push_back({name, m.mean / bound, 0.0, upper, m.mean / bound <= upper, m.n, "SE " + fmt(m.se / bound)});
        }

        for (std::size_t q = 0; q < rec.box_half_widths.size(); ++q) {
            const int msites = rec.box_half_widths[q];
            const double mphys = msites * d.dx;
            std::vector<double> v;
            for (const RunRecord* r : runs) v.push_back(r->heights[j].box_gap[q]);
            const MeanSe m = mean_se(v);
            const double bound = r0 * b2 * d.dim * mphys * mphys;
            const std::string name = "Var[h - h_M] ratio" + when + " M=" + fmt(mphys);
            if (!(bound > 0.0)) {
                out.push_back({name, 0.0, 0.0, 1.0, m.mean == 0.0, m.n, "zero bound: value " + fmt(m.mean)});
            } else {
                const double upper = 1.0 + tol.sigma * m.se / bound;
                out.push_back({name, m.mean / bound, 0.0, upper, m.mean / bound <= upper, m.n, "SE " + fmt(m.se / bound)});
            }

            double var = 0.0;
            for (int c = 0; c < centres; ++c) {
                std::vector<double> box;
                for (const RunRecord* r : runs) box.push_back(r->heights[j].box_average[q * centres + c]);
                var += variance_of(box);
            }
            var /= centres;
            const std::string cname = "Var[h_M] fitted constant" + when + " M=" + fmt(mphys);
            if (mphys < 1.0) {
                TestReport r = degenerate(cname, runs.size(), "requires M >= 1");
                r.diagnostic = true;
                out.push_back(r);
                continue;
            }
            const double log_term = 2.0 + std::log(std::pow(2.0, d.dim) * linf / l1) + d.dim * std::log(mphys);
            const double denom = 2.0 * b2 * linf * l1 * t;
            const double c_fit = denom > 0.0 ? var * log_term / denom : 0.0;
            fitted.push_back(c_fit);
            TestReport r{cname, c_fit, 0.0, 0.0, true, runs.size(), "Var h_M " + fmt(var)};
            r.diagnostic = true;
            out.push_back(r);
        }
    }
    if (!fitted.empty()) {
        const auto [lo, hi] = std::minmax_element(fitted.begin(), fitted.end());
        if (*hi == 0.0) {
            out.push_back({"Var[h_M] fitted constant spread (max/min)", 1.0, 1.0, tol.scaling_spread, true, fitted.size(),
                           "all variances zero"});
        } else if (!(*lo > 0.0)) {
            out.push_back(degenerate("Var[h_M] fitted constant spread (max/min)", fitted.size(), "zero variance"));
        } else {
            out.push_back({"Var[h_M] fitted constant spread (max/min)", *hi / *lo, 1.0, tol.scaling_spread,
                           *hi / *lo <= tol.scaling_spread, fitted.size(), "C_hat = " + fmt(*hi)});
        }
    }
    return out;
}

std::vector<TestReport> gradient_overlap_reports(std::span<const RunRecord> height_runs,
                                                 std::span<const RunRecord> delta_runs, const RecordingSpec& recording,
                                                 const Model& model, const Tolerances& tol) {
    std::vector<TestReport> out;
    const double b2 = model.domain.beta * model.domain.beta;
    for (std::size_t j = 0; j < recording.snapshot_steps.size(); ++j) {
        std::vector<double> f, g;
        for (const RunRecord& r : height_runs)
            if (!r.failed && j < r.heights.size()) f.push_back(r.heights[j].gradient_sq);
        for (const RunRecord& r : delta_runs)
            if (!r.failed && j < r.snapshot_overlap.size()) g.push_back(r.snapshot_overlap[j]);
        if (f.size() < 2 || g.size() < 2) continue;
        const MeanSe fm = mean_se(f);
        const MeanSe gm = mean_se(g);
        const double defect = fm.mean - b2 * (model.cov.r0 - gm.mean);
        const double se = std::hypot(fm.se, b2 * gm.se);
        TestReport r{"gradient/overlap defect t=" + fmt(static_cast<double>(recording.snapshot_steps[j]) * model.domain.dt),
                     defect, -tol.sigma * se, tol.sigma * se, std::abs(defect) <= tol.sigma * se, std::min(f.size(), g.size()),
                     "f_hat " + fmt(fm.mean) + ", g_hat " + fmt(gm.mean)};
        r.diagnostic = true;
        out.push_back(r);
    }
    return out;
}

TestReport ito_convergence(std::span<const std::pair<double, Accumulator>> levels) {
    if (levels.size() < 2) throw UsageError("ito_convergence needs at least two dt levels");
    std::vector<std::pair<double, Accumulator>> sorted(levels.begin(), levels.end());
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    double worst = 0.0;
    std::string note;
    for (std::size_t j = 0; j < sorted.size(); ++j) {
        note += (j ? ", " : "") + std::string("dt=") + fmt(sorted[j].first) + ": " + fmt(sorted[j].second.mean) +
                " (SE " + fmt(sorted[j].second.std_error()) + ")";
        if (j > 0) {
            const double prev = sorted[j - 1].second.mean;
            worst = std::max(worst, prev > 0.0 ? sorted[j].second.mean / prev : std::numeric_limits<double>::infinity());
        }
    }
    TestReport r{"mean |residual_T| ratio across halving dt (max)", worst, 0.0, 1.0, worst < 1.0,
                 sorted.front().second.count, note};
    return r;
}

}  // namespace polylab
