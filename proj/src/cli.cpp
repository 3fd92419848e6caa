#include "polylab/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "polylab/errors.hpp"

namespace polylab {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------- config I/O

template <typename T>
void take(const json& obj, const char* key, T& out) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
}

void reject_unknown(const json& obj, std::initializer_list<const char*> keys, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [k, v] : obj.items()) {
        if (std::find_if(keys.begin(), keys.end(), [&](const char* s) { return k == s; }) == keys.end())
            throw ConfigError("unknown key '" + k + "' in " + where);
    }
}

json to_json(const ExperimentConfig& c) {
    json j;
    j["domain"] = {{"d", c.domain.d}, {"n", c.domain.n}, {"dx", c.domain.dx}, {"dt", c.domain.dt}, {"T_grid", c.domain.T_grid}};
    j["kernel"] = {{"shape", to_string(c.kernel.shape)}, {"radius", c.kernel.radius}, {"amplitude", c.kernel.amplitude}};
    j["propagator"] = to_string(c.propagator);
    j["beta"] = c.beta;
    j["ensemble"] = {{"N", c.ensemble.N},
                     {"master_seed", c.ensemble.master_seed},
                     {"boundary_mass_threshold", c.ensemble.boundary_mass_threshold}};
    const RecordingBlock& r = c.recording;
    j["recording"] = {{"snapshot_times", r.snapshot_times},
                      {"height_runs", r.height_runs},
                      {"lags", r.lags},
                      {"box_half_widths", r.box_half_widths},
                      {"box_centers", r.box_centers},
                      {"fixed_T_overlap", r.fixed_T_overlap},
                      {"malliavin_targets", r.malliavin_targets},
                      {"malliavin_T", r.malliavin_T},
                      {"malliavin_slices", r.malliavin_slices},
                      {"bks_M", r.bks_M},
                      {"bks_t", r.bks_t},
                      {"bks_N", r.bks_N},
                      {"bks_slices", r.bks_slices}};
    const Tolerances& t = c.tolerances;
    j["tolerances"] = {{"alpha", t.alpha},
                       {"sigma", t.sigma},
                       {"ci_level", t.ci_level},
                       {"variance_band_low", t.variance_band_low},
                       {"variance_band_high", t.variance_band_high},
                       {"scaling_spread", t.scaling_spread},
                       {"ks_resamples", t.ks_resamples},
                       {"bootstrap_resamples", t.bootstrap_resamples}};
    j["output"] = {{"records", c.output.records}, {"summaries", c.output.summaries}, {"reports", c.output.reports}};
    j["sweep"] = {{"parameter", c.sweep.parameter}, {"values", c.sweep.values}};
    j["test_hooks"] = {{"flip_ito_sign", c.test_hooks.flip_ito_sign}};
    return j;
}

ExperimentConfig from_json(const json& j) {
    ExperimentConfig c;
    reject_unknown(j, {"domain", "kernel", "propagator", "beta", "ensemble", "recording", "tolerances", "output", "sweep", "test_hooks"},
                   "config");
    if (j.contains("domain")) {
        const json& d = j["domain"];
        reject_unknown(d, {"d", "n", "dx", "dt", "T_grid"}, "domain");
        take(d, "d", c.domain.d);
        take(d, "n", c.domain.n);
        take(d, "dx", c.domain.dx);
        take(d, "dt", c.domain.dt);
        take(d, "T_grid", c.domain.T_grid);
    }
    if (j.contains("kernel")) {
        const json& k = j["kernel"];
        reject_unknown(k, {"shape", "radius", "amplitude"}, "kernel");
        std::string shape = to_string(c.kernel.shape);
        take(k, "shape", shape);
        c.kernel.shape = kernel_shape_from_string(shape);
        take(k, "radius", c.kernel.radius);
        take(k, "amplitude", c.kernel.amplitude);
    }
    if (j.contains("propagator")) {
        std::string p;
        take(j, "propagator", p);
        c.propagator = heat_symbol_from_string(p);
    }
    take(j, "beta", c.beta);
    if (j.contains("ensemble")) {
        const json& e = j["ensemble"];
        reject_unknown(e, {"N", "master_seed", "boundary_mass_threshold"}, "ensemble");
        take(e, "N", c.ensemble.N);
        take(e, "master_seed", c.ensemble.master_seed);
        take(e, "boundary_mass_threshold", c.ensemble.boundary_mass_threshold);
    }
    if (j.contains("recording")) {
        const json& r = j["recording"];
        reject_unknown(r, {"snapshot_times", "height_runs", "lags", "box_half_widths", "box_centers", "fixed_T_overlap",
                           "malliavin_targets", "malliavin_T", "malliavin_slices", "bks_M", "bks_t", "bks_N", "bks_slices"},
                       "recording");
        RecordingBlock& o = c.recording;
        take(r, "snapshot_times", o.snapshot_times);
        take(r, "height_runs", o.height_runs);
        take(r, "lags", o.lags);
        take(r, "box_half_widths", o.box_half_widths);
        take(r, "box_centers", o.box_centers);
        take(r, "fixed_T_overlap", o.fixed_T_overlap);
        take(r, "malliavin_targets", o.malliavin_targets);
        take(r, "malliavin_T", o.malliavin_T);
        take(r, "malliavin_slices", o.malliavin_slices);
        take(r, "bks_M", o.bks_M);
        take(r, "bks_t", o.bks_t);
        take(r, "bks_N", o.bks_N);
        take(r, "bks_slices", o.bks_slices);
    }
    if (j.contains("tolerances")) {
        const json& t = j["tolerances"];
        reject_unknown(t, {"alpha", "sigma", "ci_level", "variance_band_low", "variance_band_high", "scaling_spread",
                           "ks_resamples", "bootstrap_resamples"},
                       "tolerances");
        Tolerances& o = c.tolerances;
        take(t, "alpha", o.alpha);
        take(t, "sigma", o.sigma);
        take(t, "ci_level", o.ci_level);
        take(t, "variance_band_low", o.variance_band_low);
        take(t, "variance_band_high", o.variance_band_high);
        take(t, "scaling_spread", o.scaling_spread);
        take(t, "ks_resamples", o.ks_resamples);
        take(t, "bootstrap_resamples", o.bootstrap_resamples);
    }
    if (j.contains("output")) {
        const json& o = j["output"];
        reject_unknown(o, {"records", "summaries", "reports"}, "output");
        take(o, "records", c.output.records);
        take(o, "summaries", c.output.summaries);
        take(o, "reports", c.output.reports);
    }
    if (j.contains("sweep")) {
        const json& s = j["sweep"];
        reject_unknown(s, {"parameter", "values"}, "sweep");
        take(s, "parameter", c.sweep.parameter);
        take(s, "values", c.sweep.values);
    }
    if (j.contains("test_hooks")) {
        const json& h = j["test_hooks"];
        reject_unknown(h, {"flip_ito_sign"}, "test_hooks");
        take(h, "flip_ito_sign", c.test_hooks.flip_ito_sign);
    }
    return c;
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return h;
}

// ----------------------------------------------------------------- helpers

std::size_t shifted_index(std::size_t x, int shift, const DomainSpec& d) {
    if (d.dim == 1) return static_cast<std::size_t>(d.wrap(static_cast<long long>(x) + shift));
    const auto n = static_cast<std::size_t>(d.n);
    const auto r = static_cast<std::size_t>(d.wrap(static_cast<long long>(x / n) + shift));
    const auto c = static_cast<std::size_t>(d.wrap(static_cast<long long>(x % n) + 2 * shift));
    return r * n + c;
}

std::string csv_quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"') out += '"';
        out += ch;
    }
    return out + "\"";
}

void write_header(std::ostream& os, const Provenance& p) {
    os << "# tool=" << kToolName << ' ' << kToolVersion << '\n';
    os << "# config_hash=" << p.config_hash << '\n';
    os << "# master_seed=" << p.master_seed << '\n';
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    return os;
}

void close_out(std::ofstream& os, const fs::path& path) {
    os.flush();
    if (!os) throw IoError("write failed for " + path.string());
}

std::string read_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

fs::path resolve_out_dir(const CommandOptions& options) {
    if (options.out_dir) return *options.out_dir;
    if (const char* env = std::getenv(kOutputDirEnv); env != nullptr && *env != '\0') return env;
    return "polylab_out";
}

ExperimentConfig config_for(const CommandOptions& options) {
    ExperimentConfig c = options.config_path ? load_config(*options.config_path) : ExperimentConfig{};
    if (options.seed) c.ensemble.master_seed = *options.seed;
    validate_config(c);
    return c;
}

std::string fmt_short(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

std::vector<std::int64_t> even_slices(std::int64_t n_steps, int count) {
    std::vector<std::int64_t> out;
    count = std::max(1, std::min<int>(count, static_cast<int>(n_steps)));
    for (int k = 0; k < count; ++k) out.push_back(static_cast<std::int64_t>(k) * n_steps / count);
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

RecordingSpec height_recording(const ExperimentConfig& c) {
    RecordingSpec r;
    for (double t : c.recording.snapshot_times) r.snapshot_steps.push_back(steps_for(t, c.domain.dt));
    std::sort(r.snapshot_steps.begin(), r.snapshot_steps.end());
    r.snapshot_steps.erase(std::unique(r.snapshot_steps.begin(), r.snapshot_steps.end()), r.snapshot_steps.end());
    r.lags = c.recording.lags;
    r.box_half_widths = c.recording.box_half_widths;
    r.box_centers = c.recording.box_centers;
    return r;
}

double heights_horizon(const ExperimentConfig& c) {
    if (c.recording.snapshot_times.empty()) return *std::max_element(c.domain.T_grid.begin(), c.domain.T_grid.end());
    return *std::max_element(c.recording.snapshot_times.begin(), c.recording.snapshot_times.end());
}

EnsembleSpec base_spec(const ExperimentConfig& c, double T) {
    EnsembleSpec s;
    s.domain = domain_for(c, T);
    s.kernel = c.kernel;
    s.symbol = c.propagator;
    s.master_seed = c.ensemble.master_seed;
    s.realizations = c.ensemble.N;
    s.boundary_threshold = c.ensemble.boundary_mass_threshold;
    s.scheme = c.test_hooks;
    return s;
}

std::string heights_to_json(const RunRecord& r) {
    std::ostringstream os;
    os << "{\"realization_id\":" << r.realization_id << ",\"failed\":" << (r.failed ? "true" : "false")
       << ",\"boundary_mass\":" << format_double(r.boundary_mass) << ",\"snapshots\":[";
    auto arr = [&](const std::vector<double>& v) {
        os << '[';
        for (std::size_t k = 0; k < v.size(); ++k) os << (k ? "," : "") << format_double(v[k]);
        os << ']';
    };
    for (std::size_t j = 0; j < r.heights.size(); ++j) {
        const HeightSample& h = r.heights[j];
        os << (j ? "," : "") << "{\"step\":" << h.step << ",\"h_origin\":" << format_double(h.h_origin)
           << ",\"gradient_sq\":" << format_double(h.gradient_sq) << ",\"increments\":";
        arr(h.increments);
        os << ",\"box_gap\":";
        arr(h.box_gap);
        os << ",\"box_average\":";
        arr(h.box_average);
        os << '}';
    }
    os << "]}";
    return os.str();
}

double json_number(const json& v) {
    if (v.is_null()) return std::numeric_limits<double>::quiet_NaN();
    return v.get<double>();
}

std::vector<double> json_numbers(const json& v) {
    std::vector<double> out;
    for (const auto& x : v) out.push_back(json_number(x));
    return out;
}

// Iterates over newline-terminated lines; a missing final newline or a
// malformed line raises IoError with the byte offset of the line start.
template <typename F>
void for_each_line(const fs::path& path, F&& fn) {
    const std::string text = read_file(path);
    std::size_t pos = 0;
    while (pos < text.size()) {
        const std::size_t end = text.find('\n', pos);
        if (end == std::string::npos)
            throw IoError(path.string() + ": truncated line at byte offset " + std::to_string(pos));
        const std::string line = text.substr(pos, end - pos);
        if (!line.empty()) {
            try {
                fn(line);
            } catch (const std::exception& e) {
                throw IoError(path.string() + ": malformed line at byte offset " + std::to_string(pos) + " (" + e.what() + ")");
            }
        }
        pos = end + 1;
    }
}

std::vector<RunRecord> read_heights(const fs::path& path) {
    std::vector<RunRecord> out;
    for_each_line(path, [&](const std::string& line) {
        const json j = json::parse(line);
        RunRecord r;
        r.realization_id = j.at("realization_id").get<std::uint64_t>();
        r.failed = j.at("failed").get<bool>();
        r.boundary_mass = json_number(j.at("boundary_mass"));
        for (const auto& s : j.at("snapshots")) {
            HeightSample h;
            h.step = s.at("step").get<std::int64_t>();
            h.h_origin = json_number(s.at("h_origin"));
            h.gradient_sq = json_number(s.at("gradient_sq"));
            h.increments = json_numbers(s.at("increments"));
            h.box_gap = json_numbers(s.at("box_gap"));
            h.box_average = json_numbers(s.at("box_average"));
            r.heights.push_back(std::move(h));
        }
        out.push_back(std::move(r));
    });
    return out;
}

struct Manifest {
    std::string config_hash;
    std::uint64_t master_seed = 0;
    ExperimentConfig config;
};

Manifest read_manifest(const fs::path& dir) {
    const fs::path path = dir / "manifest.json";
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw IoError(path.string() + ": " + e.what());
    }
    Manifest m;
    try {
        m.config_hash = j.at("config_hash").get<std::string>();
        m.master_seed = j.at("master_seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw IoError(path.string() + ": " + e.what());
    }
    m.config = from_json(j.at("config"));
    return m;
}

struct BundleOutcome {
    std::vector<EnsembleResult> ensembles;
};

BundleOutcome simulate_bundle(const ExperimentConfig& c, const fs::path& dir, unsigned jobs, bool quiet, std::ostream& err) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    const Provenance prov{config_hash(c), c.ensemble.master_seed};
    BundleOutcome outcome;
    std::vector<std::string> files{c.output.records, c.output.summaries};

    const fs::path records_path = dir / c.output.records;
    std::ofstream records = open_out(records_path);
    for (std::size_t j = 0; j < c.domain.T_grid.size(); ++j) {
        const double T = c.domain.T_grid[j];
        EnsembleSpec spec = base_spec(c, T);
        spec.first_id = first_id_for_T(j);
        spec.recording.fixed_time_overlap = c.recording.fixed_T_overlap;
        if (!quiet) err << "simulate: T=" << fmt_short(T) << " N=" << spec.realizations << '\n';
        EnsembleResult res = run_ensemble(spec, jobs);
        for (const RunRecord& r : res.records) records << record_to_json(r) << '\n';
        outcome.ensembles.push_back(std::move(res));
    }
    close_out(records, records_path);

    const fs::path summaries_path = dir / c.output.summaries;
    std::ofstream sum = open_out(summaries_path);
    write_header(sum, prov);
    sum << "T,observable,N,accepted,failed,boundary_rejected,count,mean,variance,std_error,min,max\n";
    for (const EnsembleResult& res : outcome.ensembles) {
        for (const char* key : kSummaryFields) {
            const auto it = res.summary.find(key);
            if (it == res.summary.end()) continue;
            const Accumulator& a = it->second;
            sum << format_double(res.T) << ',' << key << ',' << res.records.size() << ',' << res.accepted << ','
                << res.failed << ',' << res.boundary_rejected << ',' << a.count << ',' << format_double(a.mean) << ','
                << format_double(a.variance()) << ',' << format_double(a.std_error()) << ',' << format_double(a.min)
                << ',' << format_double(a.max) << '\n';
        }
    }
    close_out(sum, summaries_path);

    if (c.recording.height_runs > 0) {
        const double th = heights_horizon(c);
        EnsembleSpec spec = base_spec(c, th);
        spec.init = InitialKind::constant_one;
        spec.realizations = c.recording.height_runs;
        spec.first_id = first_id_for_heights();
        spec.recording = height_recording(c);
        if (!quiet) err << "simulate: height runs t<=" << fmt_short(th) << " N=" << spec.realizations << '\n';
        const EnsembleResult res = run_ensemble(spec, jobs);
        const fs::path path = dir / "heights.jsonl";
        std::ofstream os = open_out(path);
        for (const RunRecord& r : res.records) os << heights_to_json(r) << '\n';
        close_out(os, path);
        files.push_back("heights.jsonl");
    }

    if (!c.recording.malliavin_targets.empty()) {
        const double tm = c.recording.malliavin_T > 0.0 ? c.recording.malliavin_T
                                                        : *std::min_element(c.domain.T_grid.begin(), c.domain.T_grid.end());
        const Model model = make_model(domain_for(c, tm), c.kernel, c.propagator);
        const std::vector<std::int64_t> slices = even_slices(model.domain.n_steps, c.recording.malliavin_slices);
        for (std::size_t target : c.recording.malliavin_targets) {
            const MalliavinField field =
                malliavin_field(model, NoiseStream{c.ensemble.master_seed, first_id_for_T(0)}, target, slices);
            const std::string name = "malliavin_x" + std::to_string(target) + ".csv";
            std::ofstream os = open_out(dir / name);
            write_header(os, prov);
            write_malliavin_csv(os, field, model.domain);
            close_out(os, dir / name);
            files.push_back(name);
        }
    }

    if (!c.recording.bks_M.empty()) {
        const Model model = make_model(domain_for(c, c.recording.bks_t), c.kernel, c.propagator);
        BksOptions opt;
        opt.half_widths = c.recording.bks_M;
        opt.slices = even_slices(model.domain.n_steps, c.recording.bks_slices);
        opt.realizations = c.recording.bks_N;
        opt.master_seed = c.ensemble.master_seed;
        opt.first_realization = first_id_for_heights() + (std::uint64_t{1} << 31);
        if (!quiet) err << "simulate: BKS t=" << fmt_short(c.recording.bks_t) << " N=" << opt.realizations << '\n';
        const BksQuantities q = bks_derivative_average(model, opt);
        std::ofstream os = open_out(dir / "bks.csv");
        write_header(os, prov);
        os << "M,box_sites,box_volume,ratio_lower_bound,min_ratio,worst_shortfall_sigma,a_squared_integral,"
              "a_squared_integral_se,a_squared_target\n";
        for (const BksBox& b : q.boxes) {
            const double min_ratio = *std::min_element(b.ratio.begin(), b.ratio.end());
            os << b.half_width << ',' << b.box_sites << ',' << format_double(b.box_volume) << ','
               << format_double(b.ratio_lower_bound) << ',' << format_double(min_ratio) << ','
               << format_double(b.worst_shortfall_sigma) << ',' << format_double(b.a_squared_integral) << ','
               << format_double(b.a_squared_integral_se) << ',' << format_double(b.a_squared_target) << '\n';
        }
        close_out(os, dir / "bks.csv");
        files.push_back("bks.csv");
    }

    json manifest;
    manifest["tool"] = kToolName;
    manifest["version"] = kToolVersion;
    manifest["config_hash"] = prov.config_hash;
    manifest["master_seed"] = prov.master_seed;
    manifest["config"] = to_json(c);
    manifest["files"] = files;
    json ens = json::array();
    for (std::size_t j = 0; j < outcome.ensembles.size(); ++j) {
        const EnsembleResult& r = outcome.ensembles[j];
        ens.push_back({{"T", r.T},
                       {"first_id", first_id_for_T(j)},
                       {"N", r.records.size()},
                       {"accepted", r.accepted},
                       {"failed", r.failed},
                       {"boundary_rejected", r.boundary_rejected}});
    }
    manifest["ensembles"] = ens;
    std::ofstream mf = open_out(dir / "manifest.json");
    mf << manifest.dump(2) << '\n';
    close_out(mf, dir / "manifest.json");
    return outcome;
}

std::map<double, std::vector<const RunRecord*>> group_by_T(const std::vector<RunRecord>& records) {
    std::map<double, std::vector<const RunRecord*>> out;
    for (const RunRecord& r : records)
        if (!r.failed) out[r.T].push_back(&r);
    return out;
}

std::vector<double> pick(const std::vector<const RunRecord*>& rs, double RunRecord::*f) {
    std::vector<double> out;
    for (const RunRecord* r : rs) out.push_back(r->*f);
    return out;
}

struct AnalysisOutput {
    std::vector<TestReport> reports;
    std::optional<GammaEstimate> gamma;
};

std::uint64_t test_seed(std::uint64_t master, std::uint64_t k) { return master ^ (0x9e3779b97f4a7c15ull * (k + 1)); }

AnalysisOutput analyze_records(const ExperimentConfig& c, const std::vector<RunRecord>& records,
                               const std::vector<RunRecord>& heights, const fs::path& dir, const Provenance& prov) {
    AnalysisOutput out;
    auto& reps = out.reports;
    const Tolerances& tol = c.tolerances;
    auto groups = group_by_T(records);
    for (auto it = groups.begin(); it != groups.end();) {
        it = it->second.size() >= 2 ? std::next(it) : groups.erase(it);
    }
    if (groups.empty()) throw UsageError("no T with at least 2 accepted records");
    const double beta = c.beta;
    const Model probe = make_model(domain_for(c, groups.begin()->first), c.kernel, c.propagator);
    const double r0 = probe.cov.r0;

    std::vector<SeriesAtT> logz, overlap;
    std::vector<MartingaleGroup> mart;
    for (const auto& [T, rs] : groups) {
        logz.push_back({T, pick(rs, &RunRecord::log_Z_T)});
        overlap.push_back({T, pick(rs, &RunRecord::O_T)});
        mart.push_back({T, logz.back().values, pick(rs, &RunRecord::M_T)});
    }
    for (const auto& [T, rs] : groups) {
        if (beta * beta * r0 * T <= 2.0) reps.push_back(normalization_check(pick(rs, &RunRecord::log_Z_T), T, beta, r0, tol));
    }
    {
        std::map<double, std::pair<std::size_t, std::size_t>> counts;
        for (const RunRecord& r : records) (r.failed ? counts[r.T].second : counts[r.T].first)++;
        for (const auto& [T, ab] : counts) {
            TestReport a{"accepted records T=" + fmt_short(T), static_cast<double>(ab.first), 2.0, INFINITY, ab.first >= 2,
                         ab.first + ab.second, "failed " + std::to_string(ab.second) + " of " + std::to_string(ab.first + ab.second)};
            a.diagnostic = ab.first >= 2;
            reps.push_back(a);
        }
    }

    if (groups.size() >= 3) {
        const GammaEstimate g = estimate_gamma(logz, tol.ci_level);
        out.gamma = g;
        TestReport gr{"gamma_hat", g.gamma_hat, g.ci_low, g.ci_high, g.ci_low > 0.0, groups.size(),
                      "SE " + fmt_short(g.se) + ", intercept " + fmt_short(g.intercept) + "; pass requires CI above 0"};
        if (!(beta > 0.0)) gr.note = "degenerate: beta = 0, all log Z vanish";
        reps.push_back(gr);
        for (const GammaPoint& p : g.points) {
            TestReport d{"-mean log Z / T T=" + fmt_short(p.T), p.rate, 0, 0, true, 0, "mean " + fmt_short(p.mean) + ", SE " + fmt_short(p.se)};
            d.diagnostic = true;
            reps.push_back(d);
        }
        for (auto& r : overlap_growth(overlap, beta, g, tol)) reps.push_back(std::move(r));
        const double Tmax = groups.rbegin()->first;
        if (overlap.back().values.size() >= 20) {
            for (auto& r : clt_report(overlap.back().values, Tmax, beta, g, tol, test_seed(prov.master_seed, 1)))
                reps.push_back(std::move(r));
            for (auto& r : m_checks(mart, beta, g, tol, test_seed(prov.master_seed, 2))) reps.push_back(std::move(r));
        }
        if (groups.size() >= 4 && groups.rbegin()->first >= 8.0 * groups.begin()->first) {
            for (auto& r : variance_scaling(logz, tol, test_seed(prov.master_seed, 3))) reps.push_back(std::move(r));
        }
    }

    if (!heights.empty()) {
        const RecordingSpec rec = height_recording(c);
        const double th = heights_horizon(c);
        const Model model = make_model(domain_for(c, th), c.kernel, c.propagator);
        BoundSuiteInput in;
        in.model = &model;
        in.recording = &rec;
        in.records = heights;
        try {
            for (auto& r : bound_suite(in, tol)) reps.push_back(std::move(r));
        } catch (const UsageError& e) {
            reps.push_back({"bound suite", 0.0, 0.0, 0.0, false, heights.size(), e.what()});
        }
        // law equality of h(T, 0) (constant start) and log Z_T (delta start)
        for (std::size_t j = 0; j < rec.snapshot_steps.size(); ++j) {
            const double t = static_cast<double>(rec.snapshot_steps[j]) * c.domain.dt;
            const auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& kv) { return std::abs(kv.first - t) < 1e-9 * t; });
            if (it == groups.end()) continue;
            std::vector<double> h;
            for (const RunRecord& r : heights)
                if (!r.failed) h.push_back(r.heights[j].h_origin);
            if (h.size() < 2) continue;
            const Accumulator ah = accumulate(h);
            const Accumulator az = accumulate(pick(it->second, &RunRecord::log_Z_T));
            const double diff = ah.mean - az.mean;
            const double se = std::hypot(ah.std_error(), az.std_error());
            reps.push_back({"mean h(T,0) - mean log Z_T T=" + fmt_short(t), diff, -tol.sigma * se, tol.sigma * se,
                            std::abs(diff) <= tol.sigma * se, h.size(), "SE " + fmt_short(se)});
        }
    }

    if (fs::exists(dir / "bks.csv")) {
        std::ifstream is(dir / "bks.csv");
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty() || line[0] == '#' || line[0] == 'M') continue;
            std::vector<double> v;
            std::stringstream ss(line);
            std::string cell;
            while (std::getline(ss, cell, ',')) v.push_back(std::strtod(cell.c_str(), nullptr));
            if (v.size() < 9) throw IoError((dir / "bks.csv").string() + ": malformed row");
            const double mphys = v[0] * c.domain.dx;
            reps.push_back({"BKS A-ratio lower bound worst shortfall (sigma) M=" + fmt_short(mphys), v[5], -INFINITY,
                            tol.sigma, v[5] <= tol.sigma, c.recording.bks_N,
                            "min ratio " + fmt_short(v[4]) + " vs bound " + fmt_short(v[3])});
            TestReport a2{"BKS int A^2 / target M=" + fmt_short(mphys), v[8] > 0 ? v[6] / v[8] : 0.0, 0, 0, true,
                          c.recording.bks_N, "SE " + fmt_short(v[7])};
            a2.diagnostic = true;
            reps.push_back(a2);
        }
    }
    return out;
}

void write_tidy_series(const fs::path& dir, const std::vector<RunRecord>& records, const Provenance& prov) {
    const auto groups = group_by_T(records);
    {
        std::ofstream os = open_out(dir / "scaling.csv");
        write_header(os, prov);
        os << "T,N,var_log_Z,var_log_Z_over_T,var_O_T,var_O_T_over_T,var_M_T_over_T\n";
        for (const auto& [T, rs] : groups) {
            const double vz = variance_of(pick(rs, &RunRecord::log_Z_T));
            const double vo = variance_of(pick(rs, &RunRecord::O_T));
            const double vm = variance_of(pick(rs, &RunRecord::M_T));
            os << format_double(T) << ',' << rs.size() << ',' << format_double(vz) << ',' << format_double(vz / T) << ','
               << format_double(vo) << ',' << format_double(vo / T) << ',' << format_double(vm / T) << '\n';
        }
        close_out(os, dir / "scaling.csv");
    }
    std::ofstream os = open_out(dir / "overlap_histogram.csv");
    write_header(os, prov);
    os << "T,bin_low,bin_high,count\n";
    for (const auto& [T, rs] : groups) {
        const std::vector<double> o = pick(rs, &RunRecord::O_T);
        const Accumulator a = accumulate(o);
        const double sd = std::sqrt(a.variance());
        if (!(sd > 0.0)) continue;
        constexpr int kBins = 24;
        std::vector<int> counts(kBins, 0);
        for (double v : o) {
            const double z = (v - a.mean) / sd;
            const int b = static_cast<int>(std::floor((z + 4.0) / 8.0 * kBins));
            if (b >= 0 && b < kBins) ++counts[b];
        }
        for (int b = 0; b < kBins; ++b)
            os << format_double(T) << ',' << format_double(-4.0 + 8.0 * b / kBins) << ','
               << format_double(-4.0 + 8.0 * (b + 1) / kBins) << ',' << counts[b] << '\n';
    }
    close_out(os, dir / "overlap_histogram.csv");
}

int report_exit(const std::vector<TestReport>& reports) {
    for (const TestReport& r : reports)
        if (!r.diagnostic && !r.pass) return kExitCheckFailed;
    return kExitOk;
}

template <typename F>
int guarded(std::ostream& err, const char* cmd, F&& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        err << cmd << ": configuration error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const UsageError& e) {
        err << cmd << ": usage error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const IoError& e) {
        err << cmd << ": I/O error: " << e.what() << '\n';
        return kExitIo;
    } catch (const NumericalError& e) {
        err << cmd << ": numerical failure: " << e.what() << '\n';
        return kExitCheckFailed;
    }
}

}  // namespace

// ------------------------------------------------------------------ public

ExperimentConfig parse_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    return from_json(j);
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot read config file " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

std::string serialize_config(const ExperimentConfig& config) { return to_json(config).dump(2); }

std::string config_hash(const ExperimentConfig& config) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json(config).dump())));
    return buf;
}

std::int64_t steps_for(double time, double dt) {
    if (!(time > 0.0) || !std::isfinite(time)) throw ConfigError("times must be positive, got " + fmt_short(time));
    const double ratio = time / dt;
    const double rounded = std::round(ratio);
    if (std::abs(ratio - rounded) > 1e-9 * std::max(1.0, ratio))
        throw ConfigError("time " + fmt_short(time) + " is not a multiple of dt " + fmt_short(dt));
    return static_cast<std::int64_t>(rounded);
}

DomainSpec domain_for(const ExperimentConfig& c, double T) {
    DomainSpec d;
    d.dim = c.domain.d;
    d.n = c.domain.n;
    d.dx = c.domain.dx;
    d.dt = c.domain.dt;
    d.beta = c.beta;
    d.n_steps = steps_for(T, c.domain.dt);
    return d;
}

std::uint64_t first_id_for_T(std::size_t j) { return static_cast<std::uint64_t>(j) << 32; }
std::uint64_t first_id_for_heights() { return std::uint64_t{0xFFFF} << 32; }

void validate_config(const ExperimentConfig& c) {
    if (c.domain.T_grid.empty()) throw ConfigError("domain.T_grid must not be empty");
    for (double T : c.domain.T_grid) domain_for(c, T).validate();
    {
        std::vector<double> ts = c.domain.T_grid;
        std::sort(ts.begin(), ts.end());
        if (std::adjacent_find(ts.begin(), ts.end()) != ts.end()) throw ConfigError("domain.T_grid has duplicate times");
    }
    // Mollifier construction enforces radius, amplitude and wrap-safety.
    const DomainSpec d = domain_for(c, c.domain.T_grid.front());
    const Mollifier m = build_mollifier(c.kernel.shape, c.kernel.radius, c.kernel.amplitude, d);
    (void)covariance_from_mollifier(m, d);
    if (c.ensemble.N < 1) throw ConfigError("ensemble.N must be >= 1");
    if (!(c.ensemble.boundary_mass_threshold >= 0.0)) throw ConfigError("ensemble.boundary_mass_threshold must be >= 0");
    const RecordingBlock& r = c.recording;
    for (double t : r.snapshot_times) (void)steps_for(t, c.domain.dt);
    for (int k : r.lags)
        if (k < 0 || k >= d.n) throw ConfigError("recording.lags entries must lie in [0, n)");
    for (int m : r.box_half_widths)
        if (m < 0 || 2 * m + 1 > d.n) throw ConfigError("recording.box_half_widths: box exceeds the grid");
    if (r.box_centers < 1) throw ConfigError("recording.box_centers must be >= 1");
    if (r.height_runs == 1) throw ConfigError("recording.height_runs must be 0 or >= 2");
    for (std::size_t x : r.malliavin_targets)
        if (x >= d.sites()) throw ConfigError("recording.malliavin_targets: site outside the grid");
    if (r.malliavin_T < 0.0) throw ConfigError("recording.malliavin_T must be >= 0");
    if (r.malliavin_T > 0.0) (void)steps_for(r.malliavin_T, c.domain.dt);
    if (r.malliavin_slices < 1) throw ConfigError("recording.malliavin_slices must be >= 1");
    if (!r.bks_M.empty()) {
        if (d.dim != 1) throw ConfigError("recording.bks_M requires d = 1");
        (void)steps_for(r.bks_t, c.domain.dt);
        if (r.bks_N < 2) throw ConfigError("recording.bks_N must be >= 2");
        if (r.bks_slices < 1) throw ConfigError("recording.bks_slices must be >= 1");
        for (int m : r.bks_M)
            if (m < 0 || 2 * m + 1 > d.n || 2 * m + 1 > 129) throw ConfigError("recording.bks_M: box exceeds grid or site budget (129)");
    }
    const Tolerances& t = c.tolerances;
    if (!(t.alpha > 0.0 && t.alpha < 1.0)) throw ConfigError("tolerances.alpha must lie in (0, 1)");
    if (!(t.ci_level > 0.0 && t.ci_level < 1.0)) throw ConfigError("tolerances.ci_level must lie in (0, 1)");
    if (!(t.sigma > 0.0)) throw ConfigError("tolerances.sigma must be > 0");
    if (!(t.variance_band_low < t.variance_band_high)) throw ConfigError("tolerances: empty variance band");
    if (t.ks_resamples < 10 || t.bootstrap_resamples < 10) throw ConfigError("tolerances: need >= 10 resamples");
    if (c.output.records.empty() || c.output.summaries.empty() || c.output.reports.empty())
        throw ConfigError("output file names must not be empty");
    if (!c.sweep.parameter.empty() && c.sweep.parameter != "beta" && c.sweep.parameter != "T")
        throw ConfigError("sweep.parameter must be \"beta\" or \"T\"");
}

std::string format_double(double v) {
    if (!std::isfinite(v)) return "null";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string record_to_json(const RunRecord& r) {
    std::string s = "{\"realization_id\":" + std::to_string(r.realization_id);
    s += ",\"T\":" + format_double(r.T);
    s += ",\"beta\":" + format_double(r.beta);
    s += ",\"log_Z_T\":" + format_double(r.log_Z_T);
    s += ",\"O_T\":" + format_double(r.O_T);
    s += ",\"M_T\":" + format_double(r.M_T);
    s += ",\"qv_T\":" + format_double(r.qv_T);
    s += ",\"residual_T\":" + format_double(r.residual_T);
    s += ",\"fixed_T_overlap\":" + (r.fixed_T_overlap ? format_double(*r.fixed_T_overlap) : std::string("null"));
    s += ",\"boundary_mass\":" + format_double(r.boundary_mass);
    s += std::string(",\"failed\":") + (r.failed ? "true" : "false") + "}";
    return s;
}

RunRecord record_from_json(const std::string& line) {
    const json j = json::parse(line);
    static const char* fields[] = {"realization_id", "T", "beta", "log_Z_T", "O_T", "M_T",
                                   "qv_T", "residual_T", "fixed_T_overlap", "boundary_mass", "failed"};
    if (j.size() != std::size(fields)) throw std::runtime_error("record has " + std::to_string(j.size()) + " fields");
    for (const char* f : fields)
        if (!j.contains(f)) throw std::runtime_error(std::string("record lacks field ") + f);
    RunRecord r;
    r.realization_id = j["realization_id"].get<std::uint64_t>();
    r.T = json_number(j["T"]);
    r.beta = json_number(j["beta"]);
    r.log_Z_T = json_number(j["log_Z_T"]);
    r.O_T = json_number(j["O_T"]);
    r.M_T = json_number(j["M_T"]);
    r.qv_T = json_number(j["qv_T"]);
    r.residual_T = json_number(j["residual_T"]);
    if (!j["fixed_T_overlap"].is_null()) r.fixed_T_overlap = j["fixed_T_overlap"].get<double>();
    r.boundary_mass = json_number(j["boundary_mass"]);
    r.failed = j["failed"].get<bool>();
    return r;
}

RecordsFile read_records(const fs::path& path) {
    RecordsFile out;
    for_each_line(path, [&](const std::string& line) { out.records.push_back(record_from_json(line)); });
    return out;
}

void write_reports_csv(std::ostream& os, const std::vector<TestReport>& reports, const Provenance& p) {
    write_header(os, p);
    os << "name,statistic,lower,upper,pass,diagnostic,samples,note\n";
    for (const TestReport& r : reports) {
        os << csv_quote(r.name) << ',' << format_double(r.statistic) << ',' << format_double(r.lower) << ','
           << format_double(r.upper) << ',' << (r.pass ? "true" : "false") << ',' << (r.diagnostic ? "true" : "false")
           << ',' << r.samples << ',' << csv_quote(r.note) << '\n';
    }
}

// ------------------------------------------------------------------ verify

std::vector<VerifyCheck> run_verify_suite(const ExperimentConfig& c) {
    std::vector<VerifyCheck> out;
    auto add = [&](const std::string& name, double value, double tol) { out.push_back({name, value, tol, value <= tol}); };
    const SchemeOptions hooks = c.test_hooks;
    const std::uint64_t seed = c.ensemble.master_seed;
    const double T0 = *std::min_element(c.domain.T_grid.begin(), c.domain.T_grid.end());
    DomainSpec d = domain_for(c, T0);
    d.n_steps = std::min<std::int64_t>(d.n_steps, 200);
    const Model model = make_model(d, c.kernel, c.propagator);
    const NoiseStream stream{seed, 0xFEEDull << 32};
    const double cell = d.cell_volume();

    // density normalization, both starts
    {
        struct Norm : StepObserver {
            double cell = 1.0;
            double worst = 0.0;
            void on_step(const StepView&) override {}
            void on_state(const FieldState& s) override {
                double m = 0.0;
                for (double v : s.density) m += v;
                worst = std::max(worst, std::abs(m * cell - 1.0));
            }
        } norm;
        norm.cell = cell;
        run_forward(model, stream, InitialData{InitialKind::delta_at_origin}, SnapshotPolicy{SnapshotPolicy::Kind::none, {}},
                    &norm, hooks);
        run_forward(model, stream, InitialData{InitialKind::constant_one}, SnapshotPolicy{SnapshotPolicy::Kind::none, {}},
                    &norm, hooks);
        add("density_normalization", norm.worst, 1e-12);
    }

    // forward-backward pairing, forward run under the configured scheme hooks
    {
        const Model short_model = with_horizon(model, std::min<std::int64_t>(d.n_steps, 100));
        const auto n = short_model.domain.n_steps;
        std::vector<FieldState> fwd;
        FieldState s = initial_state(short_model.domain, InitialData{InitialKind::delta_at_origin});
        ForwardSolver fs_(short_model, stream, hooks);
        fwd.push_back(s);
        for (std::int64_t i = 0; i < n; ++i) {
            fs_.step(s);
            fwd.push_back(s);
        }
        BackwardSolver bs(short_model, stream);
        BackwardState b = terminal_state(short_model.domain, BackwardTerminal{});
        double lo = pairing_log(fwd[static_cast<std::size_t>(n)], b, short_model.domain);
        double hi = lo;
        for (std::int64_t i = n; i > 0; --i) {
            bs.step(b);
            const double p = pairing_log(fwd[static_cast<std::size_t>(i - 1)], b, short_model.domain);
            lo = std::min(lo, p);
            hi = std::max(hi, p);
        }
        add("pairing_constancy", hi - lo, 1e-10);
    }

    // Malliavin mass and bounds
    {
        const Model short_model = with_horizon(model, std::min<std::int64_t>(d.n_steps, 100));
        const MalliavinField f = malliavin_field(short_model, stream, 0);
        double mass_err = 0.0;
        double lo = INFINITY, hi = -INFINITY;
        for (double m : f.mass) mass_err = std::max(mass_err, std::abs(m - d.beta * model.kernel.l1));
        for (double v : f.values) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        add("malliavin_mass", mass_err, 1e-10);
        const double cap = d.beta * model.kernel.linf;
        add("malliavin_bounds", std::max({0.0, -lo, hi - cap}), 4.0 * std::numeric_limits<double>::epsilon() * cap);
    }

    // spectral overlap against the brute-force double sum
    {
        DomainSpec small = d;
        small.n = std::max(32, 8 * c.kernel.radius);
        const Model sm = make_model(small, c.kernel, c.propagator);
        std::vector<double> f(small.sites());
        double total = 0.0;
        for (std::size_t x = 0; x < f.size(); ++x) total += f[x] = uniform01(seed, 77, x);
        for (double& v : f) v /= total * small.cell_volume();
        const std::vector<double> rt = sm.cov.on_torus(small);
        double brute = 0.0;
        for (std::size_t x = 0; x < f.size(); ++x)
            for (std::size_t y = 0; y < f.size(); ++y) {
                std::size_t off;
                if (small.dim == 1) {
                    off = static_cast<std::size_t>(small.wrap(static_cast<long long>(x) - static_cast<long long>(y)));
                } else {
                    const auto nn = static_cast<long long>(small.n);
                    off = static_cast<std::size_t>(small.wrap(static_cast<long long>(x / nn) - static_cast<long long>(y / nn)) * nn +
                                                   small.wrap(static_cast<long long>(x % nn) - static_cast<long long>(y % nn)));
                }
                brute += f[x] * f[y] * rt[off];
            }
        brute *= small.cell_volume() * small.cell_volume();
        const double spectral = overlap_functional(f, sm);
        add("overlap_spectral_vs_bruteforce", std::abs(spectral - brute), 1e-10);

        std::vector<double> shifted(f.size());
        for (std::size_t x = 0; x < f.size(); ++x) shifted[shifted_index(x, 7, small)] = f[x];
        add("overlap_shift_invariance", std::abs(overlap_functional(shifted, sm) - spectral), 1e-12);
    }

    // semigroup identity
    {
        SpectralGrid grid(d);
        const HeatPropagator p1 = build_propagator(d, c.propagator, d.dt);
        const HeatPropagator p2 = build_propagator(d, c.propagator, 2.0 * d.dt);
        std::vector<double> a(d.sites()), b;
        for (std::size_t x = 0; x < a.size(); ++x) a[x] = uniform01(seed, 78, x);
        b = a;
        apply_propagator(p1, grid, a);
        apply_propagator(p1, grid, a);
        apply_propagator(p2, grid, b);
        double err = 0.0;
        for (std::size_t x = 0; x < a.size(); ++x) err = std::max(err, std::abs(a[x] - b[x]));
        add("semigroup", err, 1e-12);
    }

    // beta = 0 trajectory against the spectral heat kernel, plus its overlap
    {
        DomainSpec d0 = d;
        d0.beta = 0.0;
        d0.n_steps = std::min<std::int64_t>(d.n_steps, 100);
        const Model m0 = make_model(d0, c.kernel, c.propagator);
        PathRecorder path(m0);
        const ForwardTrajectory tr = run_forward(m0, stream, InitialData{}, SnapshotPolicy{SnapshotPolicy::Kind::none, {}}, &path, hooks);
        SpectralGrid grid(d0);
        std::vector<double> heat = initial_state(d0, InitialData{}).density;
        const double peak = heat[0];
        double oracle_overlap = 0.0;
        for (std::int64_t i = 0; i < d0.n_steps; ++i) {
            std::vector<double> hk = initial_state(d0, InitialData{}).density;
            if (i > 0) apply_propagator(build_propagator(d0, c.propagator, static_cast<double>(i) * d0.dt), grid, hk);
            oracle_overlap += d0.dt * overlap_functional(hk, m0);
        }
        apply_propagator(build_propagator(d0, c.propagator, d0.horizon()), grid, heat);
        double err = std::abs(tr.final_state.log_mass);
        for (std::size_t x = 0; x < heat.size(); ++x) err = std::max(err, std::abs(tr.final_state.density[x] - heat[x]) / peak);
        add("beta0_heat_kernel", err, 1e-12);
        const double o = accumulate_overlap(path, d0).final_overlap();
        add("beta0_overlap_oracle", std::abs(o - oracle_overlap) / std::max(oracle_overlap, 1e-300), 1e-12);
    }

    // tilt increments: constant xi on the grid, and a single-site torus
    {
        const double xi_c = 0.7;
        std::vector<double> xi(d.sites(), xi_c);
        FieldState s = initial_state(d, InitialData{});
        ForwardSolver fs_(model, stream, hooks);
        fs_.step(s);
        const double before = s.log_mass;
        fs_.step(s, xi);
        const double expect = d.beta * xi_c * d.dt - 0.5 * d.beta * d.beta * model.cov.r0 * d.dt;
        add("constant_xi_increment", std::abs(s.log_mass - before - expect), 1e-12);

        DomainSpec one = d;
        one.n = 1;
        Model m1;
        m1.domain = one;
        m1.kernel.dim = one.dim;
        m1.kernel.radius = 0;
        m1.kernel.values = {1.0};
        m1.kernel.l1 = one.cell_volume();
        m1.kernel.linf = 1.0;
        m1.cov.dim = one.dim;
        m1.cov.radius = 0;
        m1.cov.values = {one.cell_volume()};
        m1.cov.r0 = one.cell_volume();
        m1.prop = build_propagator(one, c.propagator);
        m1.cov_spectrum = {one.cell_volume()};
        FieldState s1 = initial_state(one, InitialData{});
        ForwardSolver f1(m1, stream, hooks);
        const double xv = -1.3;
        const std::vector<double> x1{xv};
        f1.step(s1, x1);
        const double e1 = d.beta * xv * d.dt - 0.5 * d.beta * d.beta * m1.cov.r0 * d.dt;
        add("single_site_increment", std::abs(s1.log_mass - e1), 1e-14);
    }
    return out;
}

// ---------------------------------------------------------------- commands

int cmd_verify(const CommandOptions& options, std::ostream& out, std::ostream& err) {
    return guarded(err, "verify", [&] {
        const ExperimentConfig c = config_for(options);
        const std::vector<VerifyCheck> checks = run_verify_suite(c);
        int failed = 0;
        for (const VerifyCheck& k : checks) {
            out << (k.pass ? "pass " : "FAIL ") << k.name << " value=" << format_double(k.value)
                << " tolerance=" << format_double(k.tolerance) << '\n';
            if (!k.pass) ++failed;
        }
        out << "verify: " << checks.size() - failed << '/' << checks.size() << " checks passed\n";
        return failed == 0 ? kExitOk : kExitCheckFailed;
    });
}

int cmd_simulate(const CommandOptions& options, std::ostream& out, std::ostream& err) {
    return guarded(err, "simulate", [&] {
        const ExperimentConfig c = config_for(options);
        const fs::path dir = resolve_out_dir(options);
        const BundleOutcome b = simulate_bundle(c, dir, options.jobs, options.quiet, err);
        std::size_t failed = 0;
        for (const auto& e : b.ensembles) {
            out << "T=" << format_double(e.T) << " N=" << e.records.size() << " accepted=" << e.accepted
                << " failed=" << e.failed << " (boundary " << e.boundary_rejected << ")\n";
            failed += e.failed;
        }
        out << "bundle " << dir.string() << " config_hash=" << config_hash(c) << '\n';
        return kExitOk;
    });
}

int cmd_analyze(const CommandOptions& options, std::ostream& out, std::ostream& err) {
    return guarded(err, "analyze", [&] {
        std::vector<fs::path> inputs = options.records;
        if (inputs.empty()) inputs.push_back(resolve_out_dir(options));
        std::vector<RunRecord> records, heights;
        std::optional<Manifest> first;
        fs::path report_dir;
        for (const fs::path& in : inputs) {
            const fs::path dir = fs::is_directory(in) ? in : in.parent_path();
            if (!fs::exists(in)) throw IoError("missing records input " + in.string());
            const Manifest m = read_manifest(dir);
            if (!first) {
                first = m;
                report_dir = dir;
            } else if (m.config_hash != first->config_hash && !options.allow_hash_mismatch) {
                err << "analyze: bundles have different config hashes (" << m.config_hash << " vs " << first->config_hash
                    << "); pass --allow-hash-mismatch to proceed\n";
                return static_cast<int>(kExitConfig);
            }
            const fs::path rpath = fs::is_directory(in) ? dir / m.config.output.records : in;
            for (RunRecord& r : read_records(rpath).records) records.push_back(std::move(r));
            if (fs::exists(dir / "heights.jsonl"))
                for (RunRecord& r : read_heights(dir / "heights.jsonl")) heights.push_back(std::move(r));
        }
        ExperimentConfig c = first->config;
        if (options.config_path) {
            ExperimentConfig given = load_config(*options.config_path);
            if (options.seed) given.ensemble.master_seed = *options.seed;
            validate_config(given);
            const std::string h = config_hash(given);
            if (h != first->config_hash) {
                if (!options.allow_hash_mismatch) {
                    err << "analyze: config hash " << h << " does not match records (" << first->config_hash
                        << "); pass --allow-hash-mismatch to proceed\n";
                    return static_cast<int>(kExitConfig);
                }
                err << "analyze: warning: config hash mismatch overridden\n";
            }
            c = given;
        }
        const Provenance prov{first->config_hash, first->master_seed};
        const AnalysisOutput a = analyze_records(c, records, heights, report_dir, prov);
        const fs::path dir = options.out_dir ? *options.out_dir : report_dir;
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) throw IoError("cannot create " + dir.string());
        std::ofstream os = open_out(dir / c.output.reports);
        write_reports_csv(os, a.reports, prov);
        close_out(os, dir / c.output.reports);
        write_tidy_series(dir, records, prov);
        for (const TestReport& r : a.reports) {
            out << (r.diagnostic ? "info " : (r.pass ? "pass " : "FAIL ")) << r.name << " statistic=" << fmt_short(r.statistic);
            if (!r.diagnostic) out << " accept=[" << fmt_short(r.lower) << ", " << fmt_short(r.upper) << "]";
            if (!r.note.empty()) out << " (" << r.note << ")";
            out << '\n';
        }
        return report_exit(a.reports);
    });
}

int cmd_scan(const CommandOptions& options, std::ostream& out, std::ostream& err) {
    return guarded(err, "scan", [&] {
        const ExperimentConfig base = config_for(options);
        if (base.sweep.parameter.empty() || base.sweep.values.empty()) throw ConfigError("scan needs a nonempty sweep");
        const fs::path root = resolve_out_dir(options);
        const Provenance prov{config_hash(base), base.ensemble.master_seed};
        struct Row {
            double value;
            double T;
            std::vector<RunRecord> records;
            std::optional<GammaEstimate> gamma;
        };
        std::vector<Row> rows;
        for (double v : base.sweep.values) {
            ExperimentConfig c = base;
            c.sweep = {};
            if (base.sweep.parameter == "beta") {
                c.beta = v;
            } else {
                c.domain.T_grid = {v};
            }
            validate_config(c);
            const fs::path dir = root / (base.sweep.parameter + "_" + fmt_short(v));
            simulate_bundle(c, dir, options.jobs, options.quiet, err);
            Row row{v, *std::max_element(c.domain.T_grid.begin(), c.domain.T_grid.end()),
                    read_records(dir / c.output.records).records, std::nullopt};
            if (c.domain.T_grid.size() >= 3) {
                std::vector<SeriesAtT> lz;
                for (const auto& [T, rs] : group_by_T(row.records)) lz.push_back({T, pick(rs, &RunRecord::log_Z_T)});
                row.gamma = estimate_gamma(lz, c.tolerances.ci_level);
            }
            rows.push_back(std::move(row));
        }
        std::optional<GammaEstimate> pooled;
        if (base.sweep.parameter == "T" && rows.size() >= 3) {
            std::vector<SeriesAtT> lz;
            for (const Row& r : rows) lz.push_back({r.T, column(r.records, &RunRecord::log_Z_T)});
            pooled = estimate_gamma(lz, base.tolerances.ci_level);
        }
        std::error_code ec;
        fs::create_directories(root, ec);
        std::ofstream os = open_out(root / "scan.csv");
        write_header(os, prov);
        os << "sweep_parameter,sweep_value,T,gamma_hat,gamma_se,var_log_Z,var_O_T_over_T\n";
        std::vector<double> gammas;
        for (const Row& r : rows) {
            const std::optional<GammaEstimate>& g = pooled ? pooled : r.gamma;
            std::vector<const RunRecord*> at_t;
            for (const RunRecord& x : r.records)
                if (!x.failed && x.T == r.T) at_t.push_back(&x);
            const double vz = at_t.size() >= 2 ? variance_of(pick(at_t, &RunRecord::log_Z_T)) : NAN;
            const double vo = at_t.size() >= 2 ? variance_of(pick(at_t, &RunRecord::O_T)) / r.T : NAN;
            os << base.sweep.parameter << ',' << format_double(r.value) << ',' << format_double(r.T) << ','
               << format_double(g ? g->gamma_hat : NAN) << ',' << format_double(g ? g->se : NAN) << ','
               << format_double(vz) << ',' << format_double(vo) << '\n';
            if (g) gammas.push_back(g->gamma_hat);
        }
        close_out(os, root / "scan.csv");
        if (base.sweep.parameter == "beta" && gammas.size() == rows.size() && rows.size() >= 2) {
            bool monotone = true;
            for (std::size_t k = 1; k < rows.size(); ++k) {
                const GammaEstimate& a = *rows[k - 1].gamma;
                const GammaEstimate& b = *rows[k].gamma;
                if (rows[k].value > rows[k - 1].value && b.ci_high < a.ci_low) monotone = false;
            }
            out << "scan: gamma_hat nondecreasing in beta within CI: " << (monotone ? "yes" : "no") << '\n';
        }
        out << "scan: " << rows.size() << " bundles under " << root.string() << '\n';
        return kExitOk;
    });
}

}  // namespace polylab
