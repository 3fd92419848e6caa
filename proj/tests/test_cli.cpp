#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "polylab/cli.hpp"
#include "polylab/errors.hpp"

using namespace polylab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("polylab_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

fs::path write_config(const fs::path& dir, const std::string& text) {
    const fs::path p = dir / "config.json";
    std::ofstream(p) << text;
    return p;
}

const char* kTiny = R"({"domain": {"n": 64, "T_grid": [0.5, 1, 2]}, "ensemble": {"N": 2, "master_seed": 5}})";

int run(int (*cmd)(const CommandOptions&, std::ostream&, std::ostream&), const CommandOptions& o, std::string* out = nullptr,
        std::string* err = nullptr) {
    std::ostringstream os, es;
    const int code = cmd(o, os, es);
    if (out) *out = os.str();
    if (err) *err = es.str();
    return code;
}

}  // namespace

TEST_CASE("config round-trip is exact") {
    ExperimentConfig c;
    c.beta = 0.1 + 0.2;
    c.domain.dx = 1.0 / 3.0;
    c.domain.T_grid = {0.3, 1e-7, 123456.789};
    c.recording.lags = {0, 1, 7};
    c.recording.malliavin_targets = {3, 9};
    c.ensemble.master_seed = 18446744073709551615ull;
    c.kernel.shape = KernelShape::quartic_bump;
    c.propagator = HeatSymbol::continuum;
    c.sweep = {"beta", {0.0, 0.5}};
    c.test_hooks.flip_ito_sign = true;
    const ExperimentConfig back = parse_config(serialize_config(c));
    CHECK(back == c);
    CHECK(serialize_config(back) == serialize_config(c));
    CHECK(config_hash(back) == config_hash(c));
    CHECK(config_hash(c).size() == 16);
    CHECK(parse_config("{}") == ExperimentConfig{});
}

TEST_CASE("config errors") {
    CHECK_THROWS_AS(parse_config("{\"domain\": {\"nn\": 3}}"), ConfigError);
    CHECK_THROWS_AS(parse_config("{\"beta\": \"one\"}"), ConfigError);
    CHECK_THROWS_AS(parse_config("{"), ConfigError);
    ExperimentConfig c;
    c.domain.T_grid = {0.015};
    CHECK_THROWS_AS(validate_config(c), ConfigError);
    c = ExperimentConfig{};
    c.kernel.radius = 200;
    CHECK_THROWS_AS(validate_config(c), ConfigError);
    CHECK_NOTHROW(validate_config(ExperimentConfig{}));
    CHECK(steps_for(200.0, 0.01) == 20000);
}

TEST_CASE("record JSON schema") {
    RunRecord r;
    r.realization_id = 12;
    r.T = 25;
    r.beta = 1;
    r.log_Z_T = 0.1;
    r.O_T = 1.0 / 3.0;
    r.boundary_mass = std::numeric_limits<double>::quiet_NaN();
    const std::string line = record_to_json(r);
    const nlohmann::json j = nlohmann::json::parse(line);
    CHECK(j.size() == 11);
    for (const char* f : {"realization_id", "T", "beta", "log_Z_T", "O_T", "M_T", "qv_T", "residual_T",
                          "fixed_T_overlap", "boundary_mass", "failed"})
        CHECK(j.contains(f));
    CHECK(j["fixed_T_overlap"].is_null());
    CHECK(j["boundary_mass"].is_null());
    CHECK(line.find("0.33333333333333331") != std::string::npos);
    const RunRecord back = record_from_json(line);
    CHECK(back.O_T == r.O_T);
    CHECK(back.log_Z_T == r.log_Z_T);
    CHECK(format_double(0.1) == "0.10000000000000001");
}

TEST_CASE("truncated records name the byte offset") {
    const fs::path dir = scratch("trunc");
    RunRecord r;
    const std::string line = record_to_json(r) + "\n";
    std::ofstream(dir / "r.jsonl") << line << line.substr(0, 20);
    try {
        read_records(dir / "r.jsonl");
        FAIL("no error");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("byte offset " + std::to_string(line.size())) != std::string::npos);
    }
}

TEST_CASE("verify exit codes") {
    const fs::path dir = scratch("verify");
    CommandOptions o;
    std::string out;
    CHECK(run(cmd_verify, o, &out) == kExitOk);
    CHECK(out.find("FAIL") == std::string::npos);

    o.config_path = write_config(dir, R"({"test_hooks": {"flip_ito_sign": true}})");
    CHECK(run(cmd_verify, o, &out) == kExitCheckFailed);
    CHECK(out.find("FAIL pairing_constancy") != std::string::npos);

    std::string err;
    o.config_path = write_config(dir, R"({"domain": {"n": 8}, "kernel": {"radius": 2}})");
    CHECK(run(cmd_verify, o, &out, &err) == kExitConfig);
    CHECK(err.find("wrap-safety") != std::string::npos);
}

TEST_CASE("simulate is deterministic and analyze checks hashes") {
    const fs::path dir = scratch("sim");
    CommandOptions o;
    o.config_path = write_config(dir, kTiny);
    o.quiet = true;
    o.out_dir = dir / "a";
    REQUIRE(run(cmd_simulate, o) == kExitOk);
    o.out_dir = dir / "b";
    o.jobs = 4;
    REQUIRE(run(cmd_simulate, o) == kExitOk);
    for (const char* f : {"records.jsonl", "summaries.csv", "manifest.json"})
        CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));

    const RecordsFile rf = read_records(dir / "a" / "records.jsonl");
    CHECK(rf.records.size() == 6);
    CHECK(slurp(dir / "a" / "summaries.csv").find("# config_hash=") != std::string::npos);

    o.seed = 6;
    o.out_dir = dir / "c";
    REQUIRE(run(cmd_simulate, o) == kExitOk);
    CHECK(slurp(dir / "a" / "records.jsonl") != slurp(dir / "c" / "records.jsonl"));

    CommandOptions an;
    an.records = {dir / "a"};
    an.config_path = o.config_path;
    std::string out, err;
    const int code = run(cmd_analyze, an, &out, &err);
    CHECK((code == kExitOk || code == kExitCheckFailed));
    CHECK(fs::exists(dir / "a" / "reports.csv"));
    CHECK(fs::exists(dir / "a" / "scaling.csv"));
    CHECK(slurp(dir / "a" / "reports.csv").find("gamma_hat") != std::string::npos);

    an.config_path = write_config(dir, R"({"domain": {"n": 64, "T_grid": [0.5, 1, 2]}, "ensemble": {"N": 3}})");
    CHECK(run(cmd_analyze, an, &out, &err) == kExitConfig);
    an.allow_hash_mismatch = true;
    CHECK(run(cmd_analyze, an, &out, &err) != kExitConfig);

    CommandOptions missing;
    missing.records = {dir / "nowhere"};
    CHECK(run(cmd_analyze, missing) == kExitIo);

    std::ofstream(dir / "a" / "records.jsonl", std::ios::app) << "{\"realization_id\":";
    CommandOptions trunc;
    trunc.records = {dir / "a"};
    CHECK(run(cmd_analyze, trunc, &out, &err) == kExitIo);
    CHECK(err.find("byte offset") != std::string::npos);
}

TEST_CASE("beta = 0 records give a zero rate and degenerate notes") {
    const fs::path dir = scratch("beta0");
    CommandOptions o;
    o.config_path = write_config(dir, R"({"beta": 0, "domain": {"n": 64, "T_grid": [0.5, 1, 2]}, "ensemble": {"N": 30}})");
    o.quiet = true;
    o.out_dir = dir / "b";
    REQUIRE(run(cmd_simulate, o) == kExitOk);
    CommandOptions an;
    an.records = {dir / "b"};
    std::string out;
    CHECK(run(cmd_analyze, an, &out) == kExitCheckFailed);
    CHECK(out.find("gamma_hat statistic=0 ") != std::string::npos);
    CHECK(out.find("degenerate") != std::string::npos);
}

TEST_CASE("scan") {
    const fs::path dir = scratch("scan");
    CommandOptions o;
    o.quiet = true;
    o.out_dir = dir / "out";
    o.config_path = write_config(dir, R"({"domain": {"n": 64, "T_grid": [0.5]}, "ensemble": {"N": 3}, "sweep": {"parameter": "T", "values": [0.5, 1, 2]}})");
    REQUIRE(run(cmd_scan, o) == kExitOk);
    CHECK(fs::exists(dir / "out" / "scan.csv"));
    CHECK(fs::exists(dir / "out" / "T_1" / "records.jsonl"));

    o.config_path = write_config(dir, R"({"sweep": {"parameter": "beta", "values": []}})");
    CHECK(run(cmd_scan, o) == kExitConfig);
    o.config_path = write_config(dir, "{}");
    CHECK(run(cmd_scan, o) == kExitConfig);
}

TEST_CASE("output directory from the environment") {
    const fs::path dir = scratch("env");
    CommandOptions o;
    o.config_path = write_config(dir, R"({"domain": {"n": 64, "T_grid": [0.5]}, "ensemble": {"N": 2}})");
    o.quiet = true;
    ::setenv(kOutputDirEnv, (dir / "envout").c_str(), 1);
    CHECK(run(cmd_simulate, o) == kExitOk);
    ::unsetenv(kOutputDirEnv);
    CHECK(fs::exists(dir / "envout" / "records.jsonl"));
}
