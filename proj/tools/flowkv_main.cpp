// flowkv batch runner: simulation scenarios and the theory-check suite.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "flowkv/errors.hpp"
#include "flowkv/scenario.hpp"
#include "flowkv/theory.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitViolation = 1;
constexpr int kExitParse = 2;
constexpr int kExitUnknownName = 3;
constexpr int kExitIo = 4;
constexpr int kExitValidation = 5;

int run_theory(const std::string& scenario_path, const std::string& out_dir) {
    flowkv::theory::TheoryConfig cfg;
    if (!scenario_path.empty()) {
        std::ifstream in(scenario_path);
        if (!in) throw flowkv::IoError("cannot open config: " + scenario_path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw flowkv::ParseError(std::string("bad config json: ") + e.what());
        }
        nlohmann::json t = j.value("theory", j);
        cfg.emc_instances = t.value("emc_instances", cfg.emc_instances);
        cfg.emc_trajectories = t.value("emc_trajectories", cfg.emc_trajectories);
        cfg.lipschitz_instances = t.value("lipschitz_instances", cfg.lipschitz_instances);
        cfg.ranking_instances = t.value("ranking_instances", cfg.ranking_instances);
        cfg.regret_instances = t.value("regret_instances", cfg.regret_instances);
        cfg.seed = t.value("seed", cfg.seed);
        cfg.inject_bound_fault = t.value("inject_bound_fault", cfg.inject_bound_fault);
    }
    flowkv::theory::TheorySummary sum = flowkv::theory::run_theory_suite(cfg);

    std::filesystem::create_directories(out_dir);
    std::ofstream out(std::filesystem::path(out_dir) / "theory-report.csv", std::ios::binary);
    if (!out) throw flowkv::IoError("cannot write theory-report.csv under " + out_dir);
    out << flowkv::theory::theory_report_csv(sum);

    std::cout << "theory checks: " << sum.rows.size() << " instances, " << sum.violations
              << " violations\n"
              << "max |score delta| / bound ratio: " << sum.max_delta_ratio << "\n"
              << "max |EMC - score| / stderr:      " << sum.max_emc_sigma << "\n";
    return sum.violations == 0 ? kExitOk : kExitViolation;
}

int run_scenario_cmd(const std::string& scenario_path, const std::string& out_dir, int workers,
                     std::uint64_t seed_offset) {
    flowkv::Scenario scenario = flowkv::Scenario::from_file(scenario_path);
    flowkv::ScenarioResult result = flowkv::run_scenario(scenario, workers, seed_offset);
    flowkv::write_scenario_outputs(scenario, result, out_dir);
    for (const auto& a : result.aggregates())
        std::cout << scenario.name << "/" << a.cell_id << ": hit_rate " << a.hit_rate_mean << " +- "
                  << a.hit_rate_std << " (" << a.runs << " runs)\n";
    std::cout << "outputs under " << (std::filesystem::path(out_dir) / scenario.name).string()
              << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"workflow-aware KV-cache policy simulator"};
    std::string scenario_path;
    std::string out_dir = "out";
    int workers = 1;
    std::uint64_t seed_offset = 0;
    bool theory = false;

    if (const char* env = std::getenv("FLOWKV_OUT")) out_dir = env;
    app.add_option("--scenario", scenario_path, "scenario file (or theory config with --theory)");
    app.add_option("--out", out_dir, "output directory (env FLOWKV_OUT overrides the default)");
    app.add_option("--workers", workers, "worker threads for scenario cells")->check(CLI::PositiveNumber);
    app.add_option("--seed-offset", seed_offset, "added to every scenario seed");
    app.add_flag("--theory", theory, "run the theory-check suite instead of a scenario");
    CLI11_PARSE(app, argc, argv);

    try {
        if (theory) return run_theory(scenario_path, out_dir);
        if (scenario_path.empty()) {
            std::cerr << "error: --scenario is required (see --help)\n";
            return kExitValidation;
        }
        return run_scenario_cmd(scenario_path, out_dir, workers, seed_offset);
    } catch (const flowkv::ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return kExitParse;
    } catch (const flowkv::UnknownNameError& e) {
        std::cerr << "unknown name: " << e.what() << "\n";
        return kExitUnknownName;
    } catch (const flowkv::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const flowkv::ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return kExitValidation;
    }
}
