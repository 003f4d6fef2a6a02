#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "flowkv/csv.hpp"
#include "flowkv/errors.hpp"
#include "flowkv/simulator.hpp"

namespace flowkv {

/// Shorthand used by scenario sweeps: a policy preset bundles the eviction
/// policy with the prefetch mode ("full" = hierarchical + conservative
/// prefetch, "aggressive" = hierarchical + aggressive prefetch).
inline void apply_policy_preset(SimConfig& cfg, const std::string& preset) {
    if (preset == "lru") {
        cfg.policy = EvictionPolicy::Lru;
        cfg.prefetch.mode = PrefetchMode::Off;
    } else if (preset == "lae") {
        cfg.policy = EvictionPolicy::Lae;
        cfg.prefetch.mode = PrefetchMode::Off;
    } else if (preset == "he") {
        cfg.policy = EvictionPolicy::Hierarchical;
        cfg.prefetch.mode = PrefetchMode::Off;
    } else if (preset == "kvflow") {
        cfg.policy = EvictionPolicy::KvFlow;
        cfg.prefetch.mode = PrefetchMode::Off;
    } else if (preset == "full") {
        cfg.policy = EvictionPolicy::Hierarchical;
        cfg.prefetch.mode = PrefetchMode::Conservative;
    } else if (preset == "aggressive") {
        cfg.policy = EvictionPolicy::Hierarchical;
        cfg.prefetch.mode = PrefetchMode::Aggressive;
    } else {
        throw UnknownNameError("unknown policy preset: " + preset);
    }
}

inline PredictorKind predictor_kind_from(const std::string& s) {
    if (s == "oracle") return PredictorKind::Oracle;
    if (s == "noisy") return PredictorKind::NoisyOracle;
    if (s == "markov") return PredictorKind::Markov;
    throw UnknownNameError("unknown predictor: " + s);
}

inline const char* predictor_name(PredictorKind k) {
    switch (k) {
        case PredictorKind::Oracle: return "oracle";
        case PredictorKind::NoisyOracle: return "noisy";
        default: return "markov";
    }
}

inline const char* prefetch_name(PrefetchMode m) {
    switch (m) {
        case PrefetchMode::Off: return "off";
        case PrefetchMode::Conservative: return "conservative";
        default: return "aggressive";
    }
}

/// Applies one (key, value) override onto a config. Sweep axes and base
/// fields share this path so the two cannot drift apart.
inline void apply_config_key(SimConfig& cfg, const std::string& key, const nlohmann::json& v) {
    try {
        if (key == "policy_preset")
            apply_policy_preset(cfg, v.get<std::string>());
        else if (key == "num_workflows")
            cfg.num_workflows = v.get<int>();
        else if (key == "concurrency_limit")
            cfg.concurrency_limit = v.get<int>();
        else if (key == "device_capacity")
            cfg.device_capacity = v.get<std::int64_t>();
        else if (key == "host_capacity")
            cfg.host_capacity = v.get<std::int64_t>();
        else if (key == "predictor")
            cfg.predictor.kind = predictor_kind_from(v.get<std::string>());
        else if (key == "lambda")
            cfg.predictor.lambda = v.get<double>();
        else if (key == "markov_order")
            cfg.predictor.order = v.get<int>();
        else if (key == "markov_alpha")
            cfg.predictor.alpha = v.get<double>();
        else if (key == "markov_train_traces")
            cfg.predictor.train_traces = v.get<int>();
        else if (key == "k")
            cfg.score.k = v.get<int>();
        else if (key == "gamma")
            cfg.score.gamma = v.get<double>();
        else if (key == "rho")
            cfg.prefetch.rho = v.get<double>();
        else if (key == "bandwidth")
            cfg.prefetch.bandwidth = v.get<std::int64_t>();
        else if (key == "prefill_per_token")
            cfg.cost.prefill_per_token = v.get<double>();
        else if (key == "pcie_per_token")
            cfg.cost.pcie_per_token = v.get<double>();
        else if (key == "decode_step_cost")
            cfg.cost.decode_step_cost = v.get<double>();
        else if (key == "decode_steps_per_invocation")
            cfg.cost.decode_steps_per_invocation = v.get<int>();
        else if (key == "shared_prefix_tokens")
            cfg.prompt.shared_prefix_tokens = v.get<std::int64_t>();
        else if (key == "per_agent_output_tokens") {
            // either one count for every agent, or a map of agent name -> count
            if (v.is_object()) {
                if (!cfg.graph) throw ValidationError("per-agent outputs need the graph first");
                cfg.prompt.per_agent_output.assign(cfg.graph->num_agents(), 0);
                for (const auto& [name, tokens] : v.items())
                    cfg.prompt.per_agent_output[cfg.graph->agent_by_name(name)] =
                        tokens.get<int>();
            } else {
                cfg.prompt.per_agent_output_tokens = v.get<int>();
            }
        }
        else if (key == "agent_header_tokens")
            cfg.prompt.agent_header_tokens = v.get<int>();
        else if (key == "think_time_ticks")
            cfg.think_time_ticks = v.get<int>();
        else if (key == "jitter")
            cfg.jitter = v.get<double>();
        else if (key == "timeseries_window")
            cfg.timeseries_window = v.get<int>();
        else if (key == "audit")
            cfg.audit = v.get<bool>();
        else
            throw UnknownNameError("unknown config key: " + key);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("bad value for config key '" + key + "': " + e.what());
    }
}

struct Scenario {
    std::string name;
    std::shared_ptr<const CallGraph> graph;
    nlohmann::ordered_json base;
    std::vector<std::pair<std::string, std::vector<nlohmann::json>>> sweep;  // axis order = file order
    std::vector<std::uint64_t> seeds;
    bool emit_events = false;

    static Scenario from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open scenario: " + path);
        nlohmann::ordered_json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("bad scenario json: ") + e.what());
        }
        return from_json(j, std::filesystem::path(path).parent_path());
    }

    static Scenario from_json(const nlohmann::ordered_json& j, const std::filesystem::path& dir) {
        Scenario s;
        try {
            s.name = j.at("name").get<std::string>();
            std::string graph_ref = j.at("graph").get<std::string>();
            std::filesystem::path gp = dir / graph_ref;
            if (!std::filesystem::exists(gp)) throw IoError("graph spec not found: " + gp.string());
            s.graph = std::make_shared<CallGraph>(CallGraph::from_file(gp.string()));
            s.base = j.value("base", nlohmann::ordered_json::object());
            if (j.contains("sweep"))
                for (const auto& [key, values] : j.at("sweep").items())
                    s.sweep.push_back({key, std::vector<nlohmann::json>(values.begin(), values.end())});
            s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
            s.emit_events = j.value("emit_events", false);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("bad scenario: ") + e.what());
        }
        if (s.seeds.empty()) throw ValidationError("scenario needs at least one seed");
        return s;
    }

    struct Cell {
        std::string id;
        std::vector<std::pair<std::string, nlohmann::json>> overrides;
    };

    /// Deterministic cross-product of the sweep axes, in file order.
    std::vector<Cell> cells() const {
        std::vector<Cell> out{{"", {}}};
        for (const auto& [key, values] : sweep) {
            std::vector<Cell> next;
            for (const auto& cell : out)
                for (const auto& v : values) {
                    Cell c = cell;
                    std::string val = v.is_string() ? v.get<std::string>() : v.dump();
                    c.id += (c.id.empty() ? "" : "__") + key + "-" + val;
                    c.overrides.push_back({key, v});
                    next.push_back(std::move(c));
                }
            out = std::move(next);
        }
        if (out.size() == 1 && out[0].id.empty()) out[0].id = "base";
        return out;
    }

    SimConfig config_for(const Cell& cell, std::uint64_t seed) const {
        SimConfig cfg;
        cfg.graph = graph;
        for (const auto& [key, v] : base.items()) apply_config_key(cfg, key, v);
        for (const auto& [key, v] : cell.overrides) apply_config_key(cfg, key, v);
        cfg.seed = seed;
        return cfg;
    }
};

struct CellResult {
    std::string cell_id;
    std::uint64_t seed = 0;
    SimConfig config;
    SimMetrics metrics;
    std::vector<Event> events;
};

struct ScenarioResult {
    std::vector<CellResult> rows;  // cell-major, then seed order

    /// Mean and standard deviation of a metric over the seeds of one cell.
    struct Aggregate {
        std::string cell_id;
        int runs = 0;
        double hit_rate_mean = 0, hit_rate_std = 0;
        double latency_mean = 0, latency_std = 0;
        double ttft_mean = 0, ttft_std = 0;
    };
    std::vector<Aggregate> aggregates() const {
        std::vector<Aggregate> out;
        for (std::size_t i = 0; i < rows.size();) {
            std::size_t j = i;
            while (j < rows.size() && rows[j].cell_id == rows[i].cell_id) ++j;
            Aggregate a;
            a.cell_id = rows[i].cell_id;
            a.runs = static_cast<int>(j - i);
            auto stats = [&](auto get, double& mean, double& sd) {
                double s = 0;
                for (std::size_t r = i; r < j; ++r) s += get(rows[r].metrics);
                mean = s / a.runs;
                double v = 0;
                for (std::size_t r = i; r < j; ++r) {
                    double d = get(rows[r].metrics) - mean;
                    v += d * d;
                }
                sd = a.runs > 1 ? std::sqrt(v / (a.runs - 1)) : 0.0;
            };
            stats([](const SimMetrics& m) { return m.hit_rate; }, a.hit_rate_mean, a.hit_rate_std);
            stats([](const SimMetrics& m) { return m.avg_workflow_latency; }, a.latency_mean,
                  a.latency_std);
            stats([](const SimMetrics& m) { return m.avg_ttft; }, a.ttft_mean, a.ttft_std);
            out.push_back(std::move(a));
            i = j;
        }
        return out;
    }
};

/// Runs every (cell, seed) pair, optionally across a thread pool. Cells
/// share nothing but the immutable graph; output order is independent of
/// the worker count.
inline ScenarioResult run_scenario(const Scenario& scenario, int workers = 1,
                                   std::uint64_t seed_offset = 0) {
    std::vector<Scenario::Cell> cells = scenario.cells();
    std::vector<CellResult> slots(cells.size() * scenario.seeds.size());
    std::vector<std::pair<std::size_t, std::size_t>> tasks;
    for (std::size_t c = 0; c < cells.size(); ++c)
        for (std::size_t s = 0; s < scenario.seeds.size(); ++s) tasks.push_back({c, s});

    auto run_task = [&](std::size_t t) {
        auto [c, s] = tasks[t];
        CellResult r;
        r.cell_id = cells[c].id;
        r.seed = scenario.seeds[s] + seed_offset;
        r.config = scenario.config_for(cells[c], r.seed);
        RunResult rr = run(r.config);
        r.metrics = std::move(rr.metrics);
        if (scenario.emit_events) r.events = std::move(rr.events);
        slots[t] = std::move(r);
    };

    if (workers <= 1) {
        for (std::size_t t = 0; t < tasks.size(); ++t) run_task(t);
    } else {
        std::vector<std::thread> pool;
        std::atomic<std::size_t> next{0};
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (std::size_t t = next++; t < tasks.size(); t = next++) run_task(t);
            });
        for (auto& th : pool) th.join();
    }
    return ScenarioResult{std::move(slots)};
}

inline std::string metrics_header(const Scenario& scenario) {
    std::string h =
        "scenario,cell,seed,policy,prefetch,predictor,lambda,k,gamma,concurrency,hit_rate,"
        "avg_workflow_latency,avg_ttft,evictions,evicted_tokens,prefetch_tokens,shortfalls,"
        "host_drops,max_steps_hits,first_eviction_event,first_termination_event,"
        "retired_drained_event,peak_active_tokens,total_prompt_tokens,device_hit_tokens,"
        "host_hit_tokens,miss_tokens,pure_decode_ticks,total_ticks";
    for (const auto& name : scenario.graph->agent_names()) h += ",ttft_" + name;
    return h + "\n";
}

inline std::string metrics_row(const Scenario& scenario, const CellResult& r) {
    CsvRow row;
    row.add(scenario.name).add(r.cell_id).add(r.seed);
    row.add(policy_name(r.config.policy)).add(prefetch_name(r.config.prefetch.mode));
    row.add(predictor_name(r.config.predictor.kind)).add(r.config.predictor.lambda);
    row.add(r.config.score.k).add(r.config.score.gamma).add(r.config.concurrency_limit);
    const SimMetrics& m = r.metrics;
    row.add(m.hit_rate).add(m.avg_workflow_latency).add(m.avg_ttft).add(m.evictions);
    row.add(m.evicted_tokens).add(m.prefetch_tokens).add(m.shortfalls).add(m.host_drops);
    row.add(m.max_steps_hits).add(m.first_eviction_event).add(m.first_termination_event);
    row.add(m.retired_drained_event).add(m.peak_active_tokens).add(m.total_prompt_tokens);
    row.add(m.device_hit_tokens).add(m.host_hit_tokens).add(m.miss_tokens);
    row.add(m.pure_decode_ticks).add(m.total_ticks);
    for (double t : m.per_agent_ttft) row.add(t);
    return row.str() + "\n";
}

inline std::string metrics_csv(const Scenario& scenario, const ScenarioResult& result) {
    std::string out = metrics_header(scenario);
    for (const auto& r : result.rows) out += metrics_row(scenario, r);
    return out;
}

inline std::string aggregate_csv(const ScenarioResult& result) {
    std::string out =
        "cell,runs,hit_rate_mean,hit_rate_std,latency_mean,latency_std,ttft_mean,ttft_std\n";
    for (const auto& a : result.aggregates()) {
        CsvRow row;
        row.add(a.cell_id).add(a.runs).add(a.hit_rate_mean).add(a.hit_rate_std);
        row.add(a.latency_mean).add(a.latency_std).add(a.ttft_mean).add(a.ttft_std);
        out += row.str() + "\n";
    }
    return out;
}

inline std::string timeseries_csv(const SimMetrics& m) {
    std::string out = "window,hit_rate\n";
    for (std::size_t i = 0; i < m.timeseries.size(); ++i)
        out += std::to_string(i) + "," + fmt_double(m.timeseries[i]) + "\n";
    return out;
}

/// Writes metrics.csv, aggregate.csv, per-cell timeseries, and (optionally)
/// event logs under `out_dir`/`scenario.name`/.
inline void write_scenario_outputs(const Scenario& scenario, const ScenarioResult& result,
                                   const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::path dir = fs::path(out_dir) / scenario.name;
    std::error_code ec;
    fs::create_directories(dir / "timeseries", ec);
    if (ec) throw IoError("cannot create output dir: " + dir.string());
    auto write = [](const fs::path& p, const std::string& content) {
        std::ofstream f(p, std::ios::binary);
        if (!f) throw IoError("cannot write: " + p.string());
        f << content;
    };
    write(dir / "metrics.csv", metrics_csv(scenario, result));
    write(dir / "aggregate.csv", aggregate_csv(result));
    for (const auto& r : result.rows) {
        std::string stem = r.cell_id + "_s" + std::to_string(r.seed);
        write(dir / "timeseries" / (stem + ".csv"), timeseries_csv(r.metrics));
        if (scenario.emit_events) write(dir / (stem + ".events.log"), events_to_log(r.events));
    }
}

}  // namespace flowkv
