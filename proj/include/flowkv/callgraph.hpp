#pragma once

#include <algorithm>
#include <cstdint>
#include <deque>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowkv/errors.hpp"
#include "flowkv/forecast.hpp"
#include "flowkv/rng.hpp"
#include "flowkv/types.hpp"

namespace flowkv {

/// One execution instance over the call graph. `terminated` is false only
/// when the max_steps cap cut the walk short of END.
struct WorkflowTrace {
    std::int64_t workflow_id = 0;
    std::vector<AgentId> invocations;
    bool terminated = false;
};

/// Global call graph: agents, admissible transitions, and a ground-truth
/// step kernel over states made of the last `n_ctx` invoked agents.
/// Immutable after construction; safe to share read-only across threads.
class CallGraph {
public:
    static constexpr int kMaxAgents = 63;
    static constexpr int kMaxContext = 8;

    CallGraph(std::vector<std::string> agent_names,
              std::set<std::pair<AgentId, AgentId>> edges,
              std::map<std::vector<AgentId>, std::vector<double>> kernel_rows,
              std::vector<double> entry_dist, int max_steps, int n_ctx)
        : names_(std::move(agent_names)),
          edges_(std::move(edges)),
          entry_(std::move(entry_dist)),
          max_steps_(max_steps),
          n_ctx_(n_ctx) {
        validate_shape();
        for (auto& [ctx, row] : kernel_rows) kernel_[encode_context(ctx)] = row;
        normalize_and_check_rows();
        check_reachability();
    }

    static CallGraph from_json(const nlohmann::json& j);
    static CallGraph from_file(const std::string& path);

    int num_agents() const { return static_cast<int>(names_.size()); }
    AgentId end_symbol() const { return num_agents(); }
    int outcomes() const { return num_agents() + 1; }
    int max_steps() const { return max_steps_; }
    int context_order() const { return n_ctx_; }
    const std::vector<std::string>& agent_names() const { return names_; }
    const std::set<std::pair<AgentId, AgentId>>& edges() const { return edges_; }
    const std::vector<double>& entry_dist() const { return entry_; }

    AgentId agent_by_name(const std::string& name) const {
        for (int i = 0; i < num_agents(); ++i)
            if (names_[i] == name) return i;
        throw UnknownNameError("unknown agent: " + name);
    }

    /// Kernel row for the state reached after `prefix` (last n_ctx agents).
    /// An empty prefix maps to the entry distribution with zero END mass.
    const std::vector<double>& row_for_prefix(std::span<const AgentId> prefix) const {
        if (prefix.empty()) return entry_row_;
        auto it = kernel_.find(encode_context(context_of(prefix)));
        if (it == kernel_.end()) throw ValidationError("prefix reaches a state with no kernel row");
        return it->second;
    }

    bool is_deterministic() const {
        for (const auto& [k, row] : kernel_) {
            (void)k;
            int support = 0;
            for (double p : row)
                if (p > 0) ++support;
            if (support > 1) return false;
        }
        int entry_support = 0;
        for (double p : entry_)
            if (p > 0) ++entry_support;
        return entry_support <= 1;
    }

    /// Fixed remaining agent sequence from `prefix`, for static workloads.
    /// Throws unless every reachable row is one-hot.
    std::vector<AgentId> deterministic_rollout(std::span<const AgentId> prefix) const {
        std::vector<AgentId> ctx(prefix.begin(), prefix.end());
        std::vector<AgentId> out;
        for (int step = 0; step < max_steps_; ++step) {
            const auto& row = row_for_prefix(ctx);
            AgentId next = -1;
            for (int a = 0; a < outcomes(); ++a) {
                if (row[a] > 0) {
                    if (next >= 0) throw ValidationError("rollout requires a deterministic kernel");
                    next = a;
                }
            }
            if (next == end_symbol() || next < 0) return out;
            out.push_back(next);
            ctx.push_back(next);
        }
        return out;
    }

    WorkflowTrace sample_workflow(std::uint64_t rng_seed, std::int64_t workflow_id = 0) const {
        Rng rng(rng_seed);
        WorkflowTrace trace;
        trace.workflow_id = workflow_id;
        std::vector<AgentId> ctx;
        for (int step = 0; step < max_steps_; ++step) {
            const std::vector<double>& row = row_for_prefix(ctx);
            AgentId next = static_cast<AgentId>(rng.pick_weighted(row));
            if (next == end_symbol()) {
                trace.terminated = true;
                return trace;
            }
            trace.invocations.push_back(next);
            ctx.push_back(next);
        }
        trace.terminated = false;  // hit the cap before END
        return trace;
    }

    /// Exact per-step marginals over agents+END for the next K steps,
    /// each conditioned on survival to that step. Computed by forward
    /// propagation of the kernel over context states.
    Forecast true_kstep_marginals(std::span<const AgentId> prefix, int K) const {
        if (K < 1) throw ValidationError("horizon must be >= 1");
        for (std::size_t i = 0; i + 1 < prefix.size(); ++i)
            if (!edges_.count({prefix[i], prefix[i + 1]}))
                throw ValidationError("prefix contains a non-edge transition");
        if (!prefix.empty()) row_for_prefix(prefix);  // must be a known state

        const int n_out = outcomes();
        std::vector<double> steps;
        steps.reserve(static_cast<std::size_t>(K) * n_out);

        // alive mass per context state, unconditional
        std::map<std::uint64_t, double> mass;
        std::vector<AgentId> ctx0 = context_of(prefix);
        mass[encode_context(ctx0)] = 1.0;
        bool at_entry = prefix.empty();

        for (int k = 0; k < K; ++k) {
            std::vector<double> outcome(n_out, 0.0);
            double alive = 0.0;
            std::map<std::uint64_t, double> next_mass;
            for (const auto& [key, m] : mass) {
                if (m <= 0.0) continue;
                alive += m;
                const std::vector<double>& row =
                    at_entry ? entry_row_ : kernel_.at(key);
                std::vector<AgentId> state = decode_context(key);
                for (int a = 0; a < n_out; ++a) {
                    double p = row[a];
                    if (p <= 0.0) continue;
                    outcome[a] += m * p;
                    if (a != end_symbol()) {
                        std::vector<AgentId> ns = state;
                        ns.push_back(a);
                        next_mass[encode_context(context_of(ns))] += m * p;
                    }
                }
            }
            if (alive <= 1e-15) {
                // absorbed: degenerate at END from here on
                std::fill(outcome.begin(), outcome.end(), 0.0);
                outcome[end_symbol()] = 1.0;
            } else {
                for (auto& x : outcome) x /= alive;
            }
            steps.insert(steps.end(), outcome.begin(), outcome.end());
            mass = std::move(next_mass);
            at_entry = false;
        }
        return Forecast(K, n_out, std::move(steps));
    }

    /// One line per invocation: workflow_id,step,agent_id
    static std::string trace_to_csv(const WorkflowTrace& t) {
        std::string out;
        for (std::size_t i = 0; i < t.invocations.size(); ++i) {
            out += std::to_string(t.workflow_id);
            out += ',';
            out += std::to_string(i);
            out += ',';
            out += std::to_string(t.invocations[i]);
            out += '\n';
        }
        return out;
    }

private:
    std::vector<std::string> names_;
    std::set<std::pair<AgentId, AgentId>> edges_;
    std::map<std::uint64_t, std::vector<double>> kernel_;
    std::vector<double> entry_;
    std::vector<double> entry_row_;  // entry_ padded with END mass 0
    int max_steps_;
    int n_ctx_;

    std::vector<AgentId> context_of(std::span<const AgentId> prefix) const {
        std::size_t n = std::min<std::size_t>(prefix.size(), static_cast<std::size_t>(n_ctx_));
        return std::vector<AgentId>(prefix.end() - n, prefix.end());
    }

    std::uint64_t encode_context(const std::vector<AgentId>& ctx) const {
        std::uint64_t key = 0;
        for (AgentId a : ctx) key = key * 128 + static_cast<std::uint64_t>(a + 1);
        return key;
    }

    std::vector<AgentId> decode_context(std::uint64_t key) const {
        std::vector<AgentId> ctx;
        while (key != 0) {
            ctx.push_back(static_cast<AgentId>(key % 128) - 1);
            key /= 128;
        }
        std::reverse(ctx.begin(), ctx.end());
        return ctx;
    }

    void validate_shape() {
        if (names_.empty() || num_agents() > kMaxAgents)
            throw ValidationError("agent count must be in [1, 63]");
        if (n_ctx_ < 1 || n_ctx_ > kMaxContext) throw ValidationError("n_ctx must be in [1, 8]");
        if (max_steps_ < 1) throw ValidationError("max_steps must be >= 1");
        for (auto [a, b] : edges_)
            if (a < 0 || a >= num_agents() || b < 0 || b >= num_agents())
                throw ValidationError("edge references an unknown agent");
        if (static_cast<int>(entry_.size()) != num_agents())
            throw ValidationError("entry distribution has wrong length");
        double s = 0.0;
        for (double p : entry_) {
            if (p < 0) throw ValidationError("negative entry probability");
            s += p;
        }
        if (std::abs(s - 1.0) > 1e-9) throw ValidationError("entry distribution does not sum to 1");
        for (auto& p : entry_) p /= s;
        entry_row_ = entry_;
        entry_row_.push_back(0.0);  // END cannot be the first step
    }

    void normalize_and_check_rows() {
        for (auto& [key, row] : kernel_) {
            std::vector<AgentId> ctx = decode_context(key);
            if (ctx.empty() || static_cast<int>(ctx.size()) > n_ctx_)
                throw ValidationError("kernel context length out of range");
            if (static_cast<int>(row.size()) != outcomes())
                throw ValidationError("kernel row has wrong length");
            double s = 0.0;
            for (double p : row) {
                if (p < 0) throw ValidationError("negative kernel probability");
                s += p;
            }
            if (std::abs(s - 1.0) > 1e-9)
                throw ValidationError("kernel row does not sum to 1 (context ending at agent " +
                                      std::to_string(ctx.back()) + ")");
            for (auto& p : row) p /= s;
            AgentId from = ctx.back();
            for (int a = 0; a < num_agents(); ++a)
                if (row[a] > 0 && !edges_.count({from, a}))
                    throw ValidationError("kernel places mass on a non-edge transition " +
                                          std::to_string(from) + "->" + std::to_string(a));
        }
    }

    // Every state reachable from entry must have a kernel row and must be
    // able to reach END within max_steps.
    void check_reachability() {
        std::set<std::uint64_t> reachable;
        std::deque<std::vector<AgentId>> queue;
        for (int a = 0; a < num_agents(); ++a) {
            if (entry_[a] <= 0) continue;
            std::vector<AgentId> ctx{a};
            if (reachable.insert(encode_context(ctx)).second) queue.push_back(ctx);
        }
        while (!queue.empty()) {
            std::vector<AgentId> ctx = queue.front();
            queue.pop_front();
            auto it = kernel_.find(encode_context(ctx));
            if (it == kernel_.end())
                throw ValidationError("reachable state has no kernel row (context ending at agent " +
                                      std::to_string(ctx.back()) + ")");
            for (int a = 0; a < num_agents(); ++a) {
                if (it->second[a] <= 0) continue;
                std::vector<AgentId> ns = ctx;
                ns.push_back(a);
                std::vector<AgentId> trimmed = context_of(std::span<const AgentId>(ns));
                if (reachable.insert(encode_context(trimmed)).second) queue.push_back(trimmed);
            }
        }

        // backward BFS over the reachable state graph toward END
        std::map<std::uint64_t, int> dist_to_end;
        std::deque<std::uint64_t> frontier;
        for (std::uint64_t key : reachable)
            if (kernel_.at(key)[end_symbol()] > 0) {
                dist_to_end[key] = 1;
                frontier.push_back(key);
            }
        // successor map
        std::map<std::uint64_t, std::vector<std::uint64_t>> preds;
        for (std::uint64_t key : reachable) {
            std::vector<AgentId> ctx = decode_context(key);
            const auto& row = kernel_.at(key);
            for (int a = 0; a < num_agents(); ++a) {
                if (row[a] <= 0) continue;
                std::vector<AgentId> ns = ctx;
                ns.push_back(a);
                preds[encode_context(context_of(std::span<const AgentId>(ns)))].push_back(key);
            }
        }
        while (!frontier.empty()) {
            std::uint64_t key = frontier.front();
            frontier.pop_front();
            int d = dist_to_end[key];
            auto it = preds.find(key);
            if (it == preds.end()) continue;
            for (std::uint64_t p : it->second)
                if (!dist_to_end.count(p)) {
                    dist_to_end[p] = d + 1;
                    frontier.push_back(p);
                }
        }
        for (std::uint64_t key : reachable) {
            auto it = dist_to_end.find(key);
            if (it == dist_to_end.end() || it->second > max_steps_)
                throw ValidationError("END unreachable within max_steps from a reachable state");
        }
    }
};

inline CallGraph CallGraph::from_json(const nlohmann::json& j) {
    try {
        std::vector<std::string> names = j.at("agents").get<std::vector<std::string>>();
        auto find_agent = [&](const std::string& n) -> AgentId {
            for (std::size_t i = 0; i < names.size(); ++i)
                if (names[i] == n) return static_cast<AgentId>(i);
            throw UnknownNameError("unknown agent in graph spec: " + n);
        };
        std::set<std::pair<AgentId, AgentId>> edges;
        for (const auto& e : j.at("edges")) edges.insert({find_agent(e.at(0)), find_agent(e.at(1))});

        int n_ctx = j.value("n_ctx", 1);
        int max_steps = j.value("max_steps", 64);

        std::map<std::vector<AgentId>, std::vector<double>> rows;
        for (const auto& [ctx_str, row_json] : j.at("kernel").items()) {
            std::vector<AgentId> ctx;
            std::size_t pos = 0;
            while (pos != std::string::npos && pos < ctx_str.size()) {
                std::size_t next = ctx_str.find(',', pos);
                std::string part = ctx_str.substr(pos, next == std::string::npos ? next : next - pos);
                ctx.push_back(find_agent(part));
                pos = next == std::string::npos ? next : next + 1;
            }
            std::vector<double> row(names.size() + 1, 0.0);
            for (const auto& [target, p] : row_json.items()) {
                if (target == "END")
                    row[names.size()] = p.get<double>();
                else
                    row[find_agent(target)] = p.get<double>();
            }
            rows[std::move(ctx)] = std::move(row);
        }

        std::vector<double> entry(names.size(), 0.0);
        for (const auto& [name, p] : j.at("entry").items()) entry[find_agent(name)] = p.get<double>();

        return CallGraph(std::move(names), std::move(edges), std::move(rows), std::move(entry),
                         max_steps, n_ctx);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad graph spec: ") + e.what());
    }
}

inline CallGraph CallGraph::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open graph spec: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad graph spec json: ") + e.what());
    }
    return from_json(j);
}

}  // namespace flowkv
