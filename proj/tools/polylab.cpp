// polylab: verify | simulate | analyze | scan

#include <iostream>

#include <CLI11.hpp>

#include "polylab/cli.hpp"

int main(int argc, char** argv) {
    using namespace polylab;
    CLI::App app{"Directed polymer / stochastic heat equation Monte Carlo"};
    app.set_version_flag("--version", std::string(kToolName) + " " + kToolVersion);
    app.require_subcommand(1);

    CommandOptions opt;
    std::string config, out;
    std::uint64_t seed = 0;
    std::vector<std::string> records;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config, "configuration file (JSON)")->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "override ensemble.master_seed");
        sub->add_option("--out", out, std::string("output directory (default $") + kOutputDirEnv + ")");
        sub->add_flag("--quiet", opt.quiet, "no progress on stderr");
    };
    CLI::App* verify = app.add_subcommand("verify", "exact-invariant suite");
    common(verify);
    CLI::App* simulate = app.add_subcommand("simulate", "run the ensembles and write a bundle");
    common(simulate);
    simulate->add_option("--jobs", opt.jobs, "worker threads (0: all cores)");
    CLI::App* analyze = app.add_subcommand("analyze", "statistical reports from a bundle");
    common(analyze);
    analyze->add_option("records", records, "bundle directories or records files");
    analyze->add_flag("--allow-hash-mismatch", opt.allow_hash_mismatch, "proceed when config hashes differ");
    CLI::App* scan = app.add_subcommand("scan", "one bundle per sweep value");
    common(scan);
    scan->add_option("--jobs", opt.jobs, "worker threads (0: all cores)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }
    if (!config.empty()) opt.config_path = config;
    if (!out.empty()) opt.out_dir = out;
    for (CLI::App* sub : {verify, simulate, analyze, scan})
        if (sub->count("--seed") > 0) opt.seed = seed;
    for (const auto& r : records) opt.records.emplace_back(r);

    if (verify->parsed()) return cmd_verify(opt, std::cout, std::cerr);
    if (simulate->parsed()) return cmd_simulate(opt, std::cout, std::cerr);
    if (analyze->parsed()) return cmd_analyze(opt, std::cout, std::cerr);
    return cmd_scan(opt, std::cout, std::cerr);
}
