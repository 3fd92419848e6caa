#pragma once

// Experiment configuration, result bundles and the four subcommands.
// Commands return process exit codes: 0 ok, 1 a check failed, 2 bad
// configuration or usage, 3 I/O or corrupt input.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "polylab/ensemble.hpp"

namespace polylab {

inline constexpr const char* kToolName = "polylab";
inline constexpr const char* kToolVersion = "0.3.0";
inline constexpr const char* kOutputDirEnv = "POLYLAB_OUT";

enum ExitCode : int { kExitOk = 0, kExitCheckFailed = 1, kExitConfig = 2, kExitIo = 3 };

struct DomainBlock {
    int d = 1;
    int n = 512;
    double dx = 0.25;
    double dt = 0.01;
    std::vector<double> T_grid{25.0, 50.0, 100.0, 200.0};

    bool operator==(const DomainBlock&) const = default;
};

struct EnsembleBlock {
    std::size_t N = 2000;
    std::uint64_t master_seed = 20240601;
    double boundary_mass_threshold = 1e-4;

    bool operator==(const EnsembleBlock&) const = default;
};

struct RecordingBlock {
    std::vector<double> snapshot_times;     ///< height snapshots of the constant-start runs
    std::size_t height_runs = 0;            ///< constant-start realizations (0: none)
    std::vector<int> lags;                  ///< increment lags in sites
    std::vector<int> box_half_widths;       ///< h_M box half-widths in sites
    int box_centers = 8;
    bool fixed_T_overlap = false;
    std::vector<std::size_t> malliavin_targets;  ///< sites x0 of exported D fields
    double malliavin_T = 0.0;               ///< horizon of exported D fields (0: smallest T)
    int malliavin_slices = 16;
    std::vector<int> bks_M;                 ///< BKS box half-widths in sites (empty: off)
    double bks_t = 50.0;
    std::size_t bks_N = 32;
    int bks_slices = 8;

    bool operator==(const RecordingBlock&) const = default;
};

struct OutputBlock {
    std::string records = "records.jsonl";
    std::string summaries = "summaries.csv";
    std::string reports = "reports.csv";

    bool operator==(const OutputBlock&) const = default;
};

struct SweepBlock {
    std::string parameter;  ///< "beta" or "T"; empty: no sweep
    std::vector<double> values;

    bool operator==(const SweepBlock&) const = default;
};

struct ExperimentConfig {
    DomainBlock domain;
    KernelSpec kernel;
    HeatSymbol propagator = HeatSymbol::lattice;
    double beta = 1.0;
    EnsembleBlock ensemble;
    RecordingBlock recording;
    Tolerances tolerances;
    OutputBlock output;
    SweepBlock sweep;
    SchemeOptions test_hooks;

    bool operator==(const ExperimentConfig& o) const {
        return domain == o.domain && kernel == o.kernel && propagator == o.propagator && beta == o.beta &&
               ensemble == o.ensemble && recording == o.recording && tolerances == o.tolerances &&
               output == o.output && sweep == o.sweep && test_hooks.flip_ito_sign == o.test_hooks.flip_ito_sign;
    }
};

/// Throws ConfigError on malformed input, unknown keys or violated invariants.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical JSON text (sorted keys, every default written out).
std::string serialize_config(const ExperimentConfig& config);
/// 16 hex digits: FNV-1a 64 of the canonical text.
std::string config_hash(const ExperimentConfig& config);

/// Checks every module precondition without running anything.
void validate_config(const ExperimentConfig& config);

std::int64_t steps_for(double time, double dt);
DomainSpec domain_for(const ExperimentConfig& config, double T);

/// Id namespace of the T-grid entry j (delta start) and of the height runs.
std::uint64_t first_id_for_T(std::size_t j);
std::uint64_t first_id_for_heights();

/// 17 significant digits; non-finite values become "null".
std::string format_double(double v);

std::string record_to_json(const RunRecord& record);
RunRecord record_from_json(const std::string& line);

struct RecordsFile {
    std::vector<RunRecord> records;
};

/// Throws IoError naming the byte offset of the first malformed or truncated line.
RecordsFile read_records(const std::filesystem::path& path);

struct Provenance {
    std::string config_hash;
    std::uint64_t master_seed = 0;
};

void write_reports_csv(std::ostream& os, const std::vector<TestReport>& reports, const Provenance& p);

struct CommandOptions {
    std::optional<std::filesystem::path> config_path;
    std::optional<std::uint64_t> seed;
    unsigned jobs = 1;
    std::optional<std::filesystem::path> out_dir;
    bool allow_hash_mismatch = false;
    std::vector<std::filesystem::path> records;  ///< analyze inputs (bundle dirs or records files)
    bool quiet = false;
};

int cmd_verify(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_simulate(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_analyze(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_scan(const CommandOptions& options, std::ostream& out, std::ostream& err);

struct VerifyCheck {
    std::string name;
    double value = 0.0;
    double tolerance = 0.0;
    bool pass = false;
};

/// The exact-invariant suite on the configured grid.
std::vector<VerifyCheck> run_verify_suite(const ExperimentConfig& config);

}  // namespace polylab
