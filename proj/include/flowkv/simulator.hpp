#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowkv/cache.hpp"
#include "flowkv/callgraph.hpp"
#include "flowkv/csv.hpp"
#include "flowkv/errors.hpp"
#include "flowkv/policies.hpp"
#include "flowkv/predictor.hpp"
#include "flowkv/rng.hpp"
#include "flowkv/scoring.hpp"

namespace flowkv {

// ---------------------------------------------------------------------------
// configuration

struct CostModel {
    double prefill_per_token = 1.0;
    double pcie_per_token = 0.1;
    double decode_step_cost = 1.0;
    int decode_steps_per_invocation = 20;
};

struct PromptModel {
    std::int64_t shared_prefix_tokens = 256;
    int per_agent_output_tokens = 128;  // default when per_agent_output is empty
    std::vector<int> per_agent_output;  // indexed by agent id when non-empty
    int agent_header_tokens = 16;

    int output_tokens_for(int agent) const {
        if (agent >= 0 && agent < static_cast<int>(per_agent_output.size()))
            return per_agent_output[agent];
        return per_agent_output_tokens;
    }
};

enum class PredictorKind { Oracle, NoisyOracle, Markov };

struct PredictorConfig {
    PredictorKind kind = PredictorKind::Oracle;
    double lambda = 0.0;  // noise level for the noisy oracle
    int order = 3;        // markov order
    double alpha = 0.1;   // markov smoothing
    int train_traces = 1000;
};

enum class PrefetchMode { Off, Conservative, Aggressive };

struct PrefetchConfig {
    PrefetchMode mode = PrefetchMode::Off;
    double rho = 0.2;              // aggressive displacement fraction of device capacity
    std::int64_t bandwidth = 512;  // tokens per decode step
};

struct SimConfig {
    std::shared_ptr<const CallGraph> graph;
    int num_workflows = 64;
    int concurrency_limit = 8;
    std::int64_t device_capacity = 1 << 16;
    std::int64_t host_capacity = 1 << 16;
    EvictionPolicy policy = EvictionPolicy::Lru;
    PredictorConfig predictor;
    PrefetchConfig prefetch;
    ScoreParams score;
    CostModel cost;
    PromptModel prompt;
    int think_time_ticks = 0;  // idle gap between invocations of one workflow
    double jitter = 0.25;      // +-fraction applied to decode/output/think per invocation
    int timeseries_window = 50;
    bool audit = false;
    std::uint64_t seed = 1;

    void validate() const {
        if (!graph) throw ValidationError("simulation needs a call graph");
        if (num_workflows < 1 || concurrency_limit < 1)
            throw ValidationError("workflow pool and concurrency must be positive");
        if (cost.pcie_per_token >= cost.prefill_per_token)
            throw ValidationError("pcie cost per token must be below prefill cost");
        if (device_capacity <= prompt.shared_prefix_tokens ||
            host_capacity <= prompt.shared_prefix_tokens)
            throw ValidationError("tier capacities must exceed the shared prefix");
        if (prompt.shared_prefix_tokens < 1 || prompt.per_agent_output_tokens < 1 ||
            prompt.agent_header_tokens < 1)
            throw ValidationError("prompt model token counts must be positive");
        if (!prompt.per_agent_output.empty()) {
            if (static_cast<int>(prompt.per_agent_output.size()) != graph->num_agents())
                throw ValidationError("per-agent output sizes must cover every agent");
            for (int t : prompt.per_agent_output)
                if (t < 1) throw ValidationError("prompt model token counts must be positive");
        }
        if (cost.decode_steps_per_invocation < 1)
            throw ValidationError("decode steps per invocation must be >= 1");
        if (think_time_ticks < 0) throw ValidationError("think time cannot be negative");
        if (jitter < 0.0 || jitter >= 1.0) throw ValidationError("jitter must be in [0, 1)");
        if (timeseries_window < 1) throw ValidationError("timeseries window must be >= 1");
        if (predictor.lambda < 0.0 || predictor.lambda > 1.0)
            throw ValidationError("noise level must be in [0, 1]");
        if (predictor.order < 1) throw ValidationError("markov order must be >= 1");
        if (predictor.train_traces < 1) throw ValidationError("markov training set must be >= 1");
        if (prefetch.rho < 0.0 || prefetch.rho > 1.0) throw ValidationError("rho must be in [0, 1]");
        if (prefetch.bandwidth < 1 && prefetch.mode != PrefetchMode::Off)
            throw ValidationError("prefetch bandwidth must be positive");
        score.validate();
        if (policy == EvictionPolicy::KvFlow && !graph->is_deterministic())
            throw ValidationError("kvflow requires a static workload (deterministic kernel)");
    }
};

// ---------------------------------------------------------------------------
// token derivation: prompts are pure functions of (workflow, history)

class PromptBuilder {
public:
    PromptBuilder(std::int64_t shared, int header) : shared_(shared), header_(header) {}

    static TokenId shared_token(std::int64_t i) { return (1ULL << 60) | static_cast<TokenId>(i); }
    static TokenId header_token(int agent, int i) {
        return (2ULL << 60) | (static_cast<TokenId>(agent) << 20) | static_cast<TokenId>(i);
    }
    static TokenId output_token(WorkflowId w, int inv, int i) {
        return (3ULL << 60) | (static_cast<TokenId>(w) << 28) |
               (static_cast<TokenId>(inv) << 16) | static_cast<TokenId>(i);
    }

    /// History = completed invocations of the workflow as (agent, output_len).
    /// The prompt for the next invocation extends the previous one by the
    /// last output plus the next agent's header.
    std::vector<TokenId> prompt(WorkflowId w, std::span<const std::pair<int, int>> history,
                                int next_agent) const {
        std::vector<TokenId> t = context(w, history);
        for (int i = 0; i < header_; ++i) t.push_back(header_token(next_agent, i));
        return t;
    }

    /// The cached path right after an invocation completes: the prompt plus
    /// the invocation's decoded output.
    std::vector<TokenId> context(WorkflowId w, std::span<const std::pair<int, int>> history) const {
        std::vector<TokenId> t;
        for (std::int64_t i = 0; i < shared_; ++i) t.push_back(shared_token(i));
        for (std::size_t j = 0; j < history.size(); ++j) {
            auto [agent, out] = history[j];
            for (int i = 0; i < header_; ++i) t.push_back(header_token(agent, i));
            for (int i = 0; i < out; ++i) t.push_back(output_token(w, static_cast<int>(j), i));
        }
        return t;
    }

private:
    std::int64_t shared_;
    int header_;
};

// ---------------------------------------------------------------------------
// events

struct Event {
    enum class Type { Admit, Prefill, Insert, Extend, Demote, Drop, Promote, Terminate, Shortfall, Drained };
    std::int64_t tick = 0;
    Type type;
    std::int64_t w = -1;
    int agent = -1;
    std::int64_t a = 0, b = 0, c = 0, d = 0;
};

inline const char* event_name(Event::Type t) {
    switch (t) {
        case Event::Type::Admit: return "ADMIT";
        case Event::Type::Prefill: return "PREFILL";
        case Event::Type::Insert: return "INSERT";
        case Event::Type::Extend: return "EXTEND";
        case Event::Type::Demote: return "DEMOTE";
        case Event::Type::Drop: return "DROP";
        case Event::Type::Promote: return "PROMOTE";
        case Event::Type::Terminate: return "TERMINATE";
        case Event::Type::Shortfall: return "SHORTFALL";
        default: return "DRAINED";
    }
}

inline std::string events_to_log(std::span<const Event> events) {
    std::string out;
    for (const Event& e : events) {
        CsvRow row;
        row.add(e.tick).add(event_name(e.type)).add(e.w).add(e.agent).add(e.a).add(e.b).add(e.c).add(e.d);
        out += row.str() + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// metrics

struct SimMetrics {
    double hit_rate = 0.0;  // device-hit tokens / prefill-requested tokens
    std::int64_t total_prompt_tokens = 0;
    std::int64_t device_hit_tokens = 0;
    std::int64_t host_hit_tokens = 0;
    std::int64_t miss_tokens = 0;
    double avg_workflow_latency = 0.0;
    double avg_ttft = 0.0;
    std::vector<double> per_agent_ttft;
    std::int64_t evictions = 0;
    std::int64_t evicted_tokens = 0;
    std::int64_t prefetch_tokens = 0;
    std::int64_t prefetch_rounds = 0;
    std::int64_t shortfalls = 0;
    std::int64_t host_drops = 0;
    std::int64_t unknown_workflow_warnings = 0;
    std::int64_t max_steps_hits = 0;
    std::int64_t first_eviction_event = -1;     // prefill-event index of first eviction
    std::int64_t first_termination_event = -1;  // prefill-event index at first termination
    std::int64_t retired_drained_event = -1;    // first index after that with no retired cache
    std::int64_t peak_active_tokens = 0;        // max working set of live workflows
    std::int64_t pure_decode_ticks = 0;
    std::int64_t total_ticks = 0;
    std::vector<double> timeseries;  // per-window device hit rate, window = config value
};

struct InvocationCost {
    double ttft = 0.0;
    double total = 0.0;
};

/// Device hits are free; host hits pay the transfer, misses pay re-prefill.
inline InvocationCost invocation_cost(std::int64_t device_hit, std::int64_t host_hit,
                                      std::int64_t miss, int decode_steps, const CostModel& cost) {
    (void)device_hit;
    if (device_hit < 0 || host_hit < 0 || miss < 0 || decode_steps < 0)
        throw ValidationError("negative token counts");
    InvocationCost c;
    c.ttft = static_cast<double>(host_hit) * cost.pcie_per_token +
             static_cast<double>(miss) * cost.prefill_per_token;
    c.total = c.ttft + static_cast<double>(decode_steps) * cost.decode_step_cost;
    return c;
}

struct TimeseriesReport {
    std::vector<double> windows;
    std::int64_t first_termination_event = -1;
    std::int64_t retired_drained_event = -1;
};

/// Windowed token hit-rate curve recomputed from an event log, with the
/// phase markers the log carries.
inline TimeseriesReport hit_rate_timeseries(std::span<const Event> events, int window) {
    if (events.empty()) throw ValidationError("empty event log");
    if (window < 1) throw ValidationError("window must be >= 1");
    TimeseriesReport r;
    std::int64_t idx = 0, dev = 0, total = 0;
    for (const Event& e : events) {
        if (e.type == Event::Type::Prefill) {
            dev += e.b;
            total += e.a;
            ++idx;
            if (idx % window == 0) {
                r.windows.push_back(total > 0 ? static_cast<double>(dev) / total : 0.0);
                dev = total = 0;
            }
        } else if (e.type == Event::Type::Terminate && r.first_termination_event < 0) {
            r.first_termination_event = idx;
        } else if (e.type == Event::Type::Drained && r.retired_drained_event < 0) {
            r.retired_drained_event = idx;
        }
    }
    if (total > 0) r.windows.push_back(static_cast<double>(dev) / total);
    return r;
}

struct RunResult {
    SimMetrics metrics;
    std::vector<Event> events;
    std::string final_dump;  // cache tree state at end of run
};

// ---------------------------------------------------------------------------
// the engine

class Simulator {
public:
    explicit Simulator(const SimConfig& cfg)
        : cfg_(cfg),
          g_(*cfg.graph),
          tree_(cfg.device_capacity, cfg.host_capacity),
          builder_(cfg.prompt.shared_prefix_tokens, cfg.prompt.agent_header_tokens) {
        cfg_.validate();
        if (cfg_.predictor.kind == PredictorKind::Markov) {
            std::vector<WorkflowTrace> corpus;
            corpus.reserve(cfg_.predictor.train_traces);
            for (int i = 0; i < cfg_.predictor.train_traces; ++i)
                corpus.push_back(g_.sample_workflow(derive_seed(cfg_.seed, 0x6d61726bULL, i), i));
            markov_ = train_markov(corpus, g_.num_agents(), cfg_.predictor.order,
                                   cfg_.predictor.alpha);
        }
        pool_.reserve(cfg_.num_workflows);
        for (int i = 0; i < cfg_.num_workflows; ++i) {
            WorkflowTrace t = g_.sample_workflow(derive_seed(cfg_.seed, 0x77666c6fULL, i), i);
            if (!t.terminated) ++metrics_.max_steps_hits;
            pool_.push_back(std::move(t));
        }
        metrics_.per_agent_ttft.assign(g_.num_agents(), 0.0);
        agent_ttft_count_.assign(g_.num_agents(), 0);
    }

    RunResult run() {
        const std::int64_t max_ticks =
            8192 + static_cast<std::int64_t>(cfg_.num_workflows) * g_.max_steps() *
                       (2 + cfg_.cost.decode_steps_per_invocation * 2 + cfg_.think_time_ticks * 2);
        while (done_ < cfg_.num_workflows) {
            if (tick_ > max_ticks) throw ValidationError("simulation failed to terminate");
            step();
            ++tick_;
        }
        finalize_metrics();
        RunResult r;
        r.metrics = std::move(metrics_);
        r.events = std::move(events_);
        r.final_dump = tree_.dump();
        return r;
    }

private:
    struct WfState {
        int inv = -1;  // index of the current invocation
        std::vector<std::pair<int, int>> history;
        // Prefilling covers the idle think gap up to the scheduled prefill
        // tick; only Decoding pins the workflow's path against eviction.
        enum class Phase { Prefilling, Decoding } phase = Phase::Prefilling;
        std::int64_t phase_end = 0;  // tick at which the phase finishes
        int decode_steps = 0;
        int out_tokens = 0;
        int leaf = -1;  // deepest node of this workflow's cached path
        double latency = 0.0;
        std::int64_t private_tokens = 0;
    };

    SimConfig cfg_;
    const CallGraph& g_;
    CacheTree tree_;
    PromptBuilder builder_;
    MarkovModel markov_;
    std::vector<WorkflowTrace> pool_;
    std::map<WorkflowId, WfState> active_;
    std::map<WorkflowId, Forecast> forecasts_;
    std::vector<Event> events_;
    SimMetrics metrics_;
    std::vector<std::int64_t> agent_ttft_count_;
    double ttft_sum_ = 0.0;
    std::int64_t ttft_count_ = 0;
    double latency_sum_ = 0.0;
    int admitted_ = 0;
    int done_ = 0;
    std::int64_t tick_ = 0;
    std::int64_t prefill_events_ = 0;
    bool any_eviction_ = false;
    bool any_termination_ = false;
    bool drained_marked_ = false;
    std::int64_t window_dev_ = 0, window_total_ = 0;
    int window_fill_ = 0;

    void step() {
        bool did_prefill = false;

        // 1. invocation completions (extend + terminate / schedule thinking)
        std::vector<WorkflowId> completing;
        for (auto& [w, st] : active_)
            if (st.phase == WfState::Phase::Decoding && st.phase_end == tick_) completing.push_back(w);
        for (WorkflowId w : completing) complete_invocation(w);

        // 2. admissions: staggered one per tick while filling the initial
        //    window, then replace terminated workflows immediately
        int slots = cfg_.concurrency_limit - static_cast<int>(active_.size());
        int allow = admitted_ < cfg_.concurrency_limit ? 1 : slots;
        for (int i = 0; i < std::min(slots, allow) && admitted_ < cfg_.num_workflows; ++i) admit();

        // 3. prefills
        std::vector<WorkflowId> prefilling;
        for (auto& [w, st] : active_)
            if (st.phase == WfState::Phase::Prefilling && st.phase_end == tick_) prefilling.push_back(w);
        for (WorkflowId w : prefilling) {
            do_prefill(w);
            did_prefill = true;
        }

        // 4. prefetch fires only on pure-decode ticks
        if (!did_prefill) ++metrics_.pure_decode_ticks;
        if (!did_prefill && cfg_.prefetch.mode != PrefetchMode::Off && !active_.empty())
            prefetch_round();

        ++metrics_.total_ticks;
        track_working_set();
        if (cfg_.audit) tree_.audit();
    }

    void admit() {
        WorkflowId w = admitted_++;
        WfState st;
        st.phase = WfState::Phase::Prefilling;
        st.phase_end = tick_;
        active_.emplace(w, std::move(st));
        log({tick_, Event::Type::Admit, w, -1, 0, 0, 0, 0});
    }

    Forecast predict(std::span<const AgentId> prefix) const {
        if (cfg_.predictor.kind == PredictorKind::Markov && !prefix.empty())
            return markov_.predict(prefix, cfg_.score.k);
        Forecast base = g_.true_kstep_marginals(prefix, cfg_.score.k);
        if (cfg_.predictor.kind == PredictorKind::NoisyOracle)
            return noisy_predict(base, cfg_.predictor.lambda);
        return base;
    }

    ForecastProvider provider() const {
        return [this](WorkflowId w) -> const Forecast* {
            auto it = forecasts_.find(w);
            return it == forecasts_.end() ? nullptr : &it->second;
        };
    }

    void refresh_workflow(WorkflowId w) {
        const auto& inv = pool_[w].invocations;
        std::span<const AgentId> prefix(inv.data(), static_cast<std::size_t>(active_.at(w).inv + 1));
        forecasts_.insert_or_assign(w, predict(prefix));
        refresh_scores(tree_, w, provider(), cfg_.score);
    }

    std::set<int> pinned_nodes() const {
        std::set<int> pinned;
        for (const auto& [w, st] : active_) {
            (void)w;
            if (st.leaf < 0 || st.phase != WfState::Phase::Decoding) continue;
            pinned.insert(st.leaf);
            for (int a : tree_.ancestors_of(st.leaf)) pinned.insert(a);
        }
        return pinned;
    }

    std::map<WorkflowId, std::vector<AgentId>> remaining_sequences() const {
        std::map<WorkflowId, std::vector<AgentId>> rem;
        for (const auto& [w, st] : active_) {
            if (st.inv < 0) continue;
            const auto& inv = pool_[w].invocations;
            rem[w] = std::vector<AgentId>(inv.begin() + st.inv + 1, inv.end());
        }
        return rem;
    }

    void evict_for(std::int64_t needed, const std::set<int>& locked,
                   const std::set<int>& keep_hosts, WorkflowId w) {
        if (needed <= 0) return;
        std::optional<std::map<WorkflowId, std::vector<AgentId>>> rem;
        if (cfg_.policy == EvictionPolicy::KvFlow) rem = remaining_sequences();
        VictimSelection sel =
            select_victims(tree_, cfg_.policy, needed, rem ? &*rem : nullptr, locked);
        apply_victims(sel.victims, keep_hosts);
        if (sel.shortfall) {
            ++metrics_.shortfalls;
            log({tick_, Event::Type::Shortfall, w, -1, needed - sel.freed, 0, 0, 0});
        }
        mark_first_eviction();
    }

    void apply_victims(const std::vector<int>& victims, const std::set<int>& keep_hosts) {
        for (int id : victims) {
            std::int64_t len = tree_.node(id).len();
            for (int dropped : tree_.make_room_on_host(len, keep_hosts)) {
                ++metrics_.host_drops;
                log({tick_, Event::Type::Drop, -1, -1, dropped, 0, 0, 0});
            }
            tree_.demote_to_host(id);
            ++metrics_.evictions;
            metrics_.evicted_tokens += len;
            log({tick_, Event::Type::Demote, -1, -1, id, 0, 0, 0});
        }
    }

    void mark_first_eviction() {
        if (!any_eviction_) {
            any_eviction_ = true;
            metrics_.first_eviction_event = prefill_events_;
        }
    }

    /// match -> evict -> promote -> insert for one token sequence.
    void prepare_path(WorkflowId w, int agent, const std::vector<TokenId>& tokens,
                      bool count_metrics) {
        MatchResult m = tree_.match_prefix(tokens, w, agent);
        if (count_metrics) record_prefill(w, agent, m, static_cast<std::int64_t>(tokens.size()));

        std::int64_t host_len = 0;
        for (int id : m.host_path) host_len += tree_.node(id).len();
        std::int64_t demand = host_len + m.miss - tree_.device_free();
        if (demand > 0) {
            std::set<int> locked = pinned_nodes();
            for (int id : m.path) locked.insert(id);
            std::set<int> keep_hosts(m.host_path.begin(), m.host_path.end());
            evict_for(demand, locked, keep_hosts, w);
        }

        bool promoted_all = true;
        for (int id : m.host_path) {  // top-down keeps prefixes usable
            if (tree_.device_free() < tree_.node(id).len()) {
                promoted_all = false;
                break;
            }
            tree_.promote_to_device(id);
            log({tick_, Event::Type::Promote, -1, -1, id, 0, 0, 0});
        }
        if (!promoted_all) {
            ++metrics_.shortfalls;
            log({tick_, Event::Type::Shortfall, w, -1, 0, 0, 0, 0});
            return;  // tail would sit below host-resident nodes
        }
        if (m.miss > 0) {
            std::int64_t budget = std::min<std::int64_t>(m.miss, tree_.device_free());
            InsertReport rep = tree_.insert_suffix(tokens, w, agent, budget);
            active_.at(w).leaf = rep.leaf;
            log({tick_, Event::Type::Insert, w, agent, budget, 0, 0, 0});
            if (budget < m.miss) {
                ++metrics_.shortfalls;
                log({tick_, Event::Type::Shortfall, w, -1, m.miss - budget, 0, 0, 0});
            }
        } else if (!m.path.empty()) {
            active_.at(w).leaf = m.path.back();
        }
    }

    void record_prefill(WorkflowId w, int agent, const MatchResult& m, std::int64_t prompt_len) {
        metrics_.total_prompt_tokens += prompt_len;
        metrics_.device_hit_tokens += m.device_hit;
        metrics_.host_hit_tokens += m.host_hit;
        metrics_.miss_tokens += m.miss;
        log({tick_, Event::Type::Prefill, w, agent, prompt_len, m.device_hit, m.host_hit, m.miss});
        ++prefill_events_;
        window_dev_ += m.device_hit;
        window_total_ += prompt_len;
        if (++window_fill_ == cfg_.timeseries_window) flush_window();
        if (any_termination_ && !drained_marked_ && tree_.retired_device_tokens() == 0) {
            drained_marked_ = true;
            metrics_.retired_drained_event = prefill_events_;
            log({tick_, Event::Type::Drained, -1, -1, 0, 0, 0, 0});
        }
    }

    void flush_window() {
        metrics_.timeseries.push_back(
            window_total_ > 0 ? static_cast<double>(window_dev_) / window_total_ : 0.0);
        window_dev_ = window_total_ = 0;
        window_fill_ = 0;
    }

    void do_prefill(WorkflowId w) {
        WfState& st = active_.at(w);
        const WorkflowTrace& trace = pool_[w];
        ++st.inv;
        int agent = trace.invocations[st.inv];
        double j1 = 1.0 - cfg_.jitter +
                    2.0 * cfg_.jitter * seeded_uniform(cfg_.seed, w, st.inv, 1);
        double j2 = 1.0 - cfg_.jitter +
                    2.0 * cfg_.jitter * seeded_uniform(cfg_.seed, w, st.inv, 2);
        st.decode_steps = std::max(1, static_cast<int>(
                                          std::llround(cfg_.cost.decode_steps_per_invocation * j1)));
        st.out_tokens = std::max(
            1, static_cast<int>(std::llround(cfg_.prompt.output_tokens_for(agent) * j2)));

        std::vector<TokenId> prompt = builder_.prompt(w, st.history, agent);
        std::int64_t before_dev = metrics_.device_hit_tokens, before_host = metrics_.host_hit_tokens,
                     before_miss = metrics_.miss_tokens;
        prepare_path(w, agent, prompt, true);
        std::int64_t dev = metrics_.device_hit_tokens - before_dev;
        std::int64_t host = metrics_.host_hit_tokens - before_host;
        std::int64_t miss = metrics_.miss_tokens - before_miss;

        InvocationCost c = invocation_cost(dev, host, miss, st.decode_steps, cfg_.cost);
        st.latency += c.total;
        ttft_sum_ += c.ttft;
        ++ttft_count_;
        metrics_.per_agent_ttft[agent] += c.ttft;
        ++agent_ttft_count_[agent];
        st.private_tokens = static_cast<std::int64_t>(prompt.size()) - cfg_.prompt.shared_prefix_tokens;

        refresh_workflow(w);

        st.phase = WfState::Phase::Decoding;
        st.phase_end = tick_ + 1 + st.decode_steps;
    }

    void complete_invocation(WorkflowId w) {
        WfState& st = active_.at(w);
        const WorkflowTrace& trace = pool_[w];
        int agent = trace.invocations[st.inv];
        st.history.push_back({agent, st.out_tokens});
        log({tick_, Event::Type::Extend, w, agent, st.out_tokens, 0, 0, 0});
        std::vector<TokenId> ctx = builder_.context(w, st.history);
        prepare_path(w, agent, ctx, false);
        st.private_tokens = static_cast<std::int64_t>(ctx.size()) - cfg_.prompt.shared_prefix_tokens;

        bool finished = st.inv + 1 == static_cast<int>(trace.invocations.size());
        if (finished) {
            int newly_retired = 0;
            std::vector<int> affected = tree_.on_workflow_terminated(w, &newly_retired);
            log({tick_, Event::Type::Terminate, w, -1, newly_retired, 0, 0, 0});
            if (!any_termination_) {
                any_termination_ = true;
                metrics_.first_termination_event = prefill_events_;
            }
            forecasts_.erase(w);
            refresh_nodes(tree_, affected, provider(), cfg_.score);
            latency_sum_ += st.latency;
            active_.erase(w);
            ++done_;
            return;
        }
        refresh_workflow(w);
        double j3 = 1.0 - cfg_.jitter +
                    2.0 * cfg_.jitter * seeded_uniform(cfg_.seed, w, st.inv, 3);
        int think = static_cast<int>(std::llround(cfg_.think_time_ticks * j3));
        st.phase = WfState::Phase::Prefilling;
        st.phase_end = tick_ + 1 + think;
    }

    void prefetch_round() {
        auto fp = provider();
        PrefetchPlan plan =
            cfg_.prefetch.mode == PrefetchMode::Aggressive
                ? plan_aggressive_prefetch(tree_, fp, cfg_.prefetch.bandwidth, cfg_.prefetch.rho)
                : plan_conservative_prefetch(tree_, fp, cfg_.prefetch.bandwidth);
        if (plan.selected.empty()) return;

        std::set<int> keep_hosts(plan.selected.begin(), plan.selected.end());
        std::int64_t displacement_left = plan.displacement_budget;
        std::int64_t moved = 0;
        ++metrics_.prefetch_rounds;
        for (std::size_t i = 0; i < plan.selected.size(); ++i) {
            int id = plan.selected[i];
            const auto& n = tree_.node(id);
            if (n.tier != Tier::Host) continue;  // lost to a cascade earlier in the round
            if (tree_.node(n.parent).tier != Tier::Device) continue;
            std::int64_t need = n.len() - tree_.device_free();
            if (need > 0) {
                std::set<int> locked;  // keep candidate ancestry device-resident
                for (std::size_t j = i; j < plan.selected.size(); ++j) {
                    locked.insert(tree_.node(plan.selected[j]).parent);
                    for (int a : tree_.ancestors_of(plan.selected[j])) locked.insert(a);
                }
                for (int a : pinned_nodes()) locked.insert(a);
                VictimSelection sel = select_victims_hierarchical(tree_, need, locked);
                std::vector<int> usable;
                std::int64_t freed = 0;
                for (int v : sel.victims) {
                    bool retired = tree_.node(v).retired;
                    std::int64_t len = tree_.node(v).len();
                    if (!retired) {
                        if (cfg_.prefetch.mode != PrefetchMode::Aggressive) break;
                        if (displacement_left < len) break;
                        displacement_left -= len;
                    }
                    usable.push_back(v);
                    freed += len;
                    if (freed >= need) break;
                }
                if (freed < need) continue;  // cannot admit this candidate safely
                apply_victims_for_prefetch(usable, keep_hosts);
            }
            tree_.promote_to_device(id);
            moved += n.len();
            metrics_.prefetch_tokens += n.len();
            log({tick_, Event::Type::Promote, -1, -1, id, 0, 0, 0});
            if (moved > plan.budget_bw) throw ValidationError("prefetch exceeded bandwidth budget");
        }
    }

    void apply_victims_for_prefetch(const std::vector<int>& victims, const std::set<int>& keep) {
        for (int id : victims) {
            for (int dropped : tree_.make_room_on_host(tree_.node(id).len(), keep)) {
                ++metrics_.host_drops;
                log({tick_, Event::Type::Drop, -1, -1, dropped, 0, 0, 0});
            }
            tree_.demote_to_host(id);
            ++metrics_.evictions;
            metrics_.evicted_tokens += tree_.node(id).len();
            log({tick_, Event::Type::Demote, -1, -1, id, 0, 0, 0});
        }
        mark_first_eviction();
    }

    void track_working_set() {
        std::int64_t live = cfg_.prompt.shared_prefix_tokens;
        for (const auto& [w, st] : active_) {
            (void)w;
            live += st.private_tokens;
        }
        metrics_.peak_active_tokens = std::max(metrics_.peak_active_tokens, live);
    }

    void finalize_metrics() {
        if (window_fill_ > 0) flush_window();
        metrics_.hit_rate = metrics_.total_prompt_tokens > 0
                                ? static_cast<double>(metrics_.device_hit_tokens) /
                                      static_cast<double>(metrics_.total_prompt_tokens)
                                : 0.0;
        metrics_.avg_workflow_latency = latency_sum_ / cfg_.num_workflows;
        metrics_.avg_ttft = ttft_count_ > 0 ? ttft_sum_ / static_cast<double>(ttft_count_) : 0.0;
        for (int a = 0; a < g_.num_agents(); ++a)
            if (agent_ttft_count_[a] > 0)
                metrics_.per_agent_ttft[a] /= static_cast<double>(agent_ttft_count_[a]);
        metrics_.unknown_workflow_warnings = tree_.unknown_workflow_warnings();
    }

    static double seeded_uniform(std::uint64_t seed, WorkflowId w, int inv, int salt) {
        return static_cast<double>(derive_seed(seed, static_cast<std::uint64_t>(w) + 0x1000,
                                               static_cast<std::uint64_t>(inv), salt) >>
                                   11) *
               0x1.0p-53;
    }

    void log(Event e) { events_.push_back(e); }
};

inline RunResult run(const SimConfig& cfg) { return Simulator(cfg).run(); }

/// Re-applies an event log against a fresh cache. Policies are not rerun:
/// demotions, drops, and promotions are taken from the log, so the final
/// tier state must reproduce the original run exactly.
inline CacheTree replay_events(const SimConfig& cfg, std::span<const Event> events) {
    CacheTree tree(cfg.device_capacity, cfg.host_capacity);
    PromptBuilder builder(cfg.prompt.shared_prefix_tokens, cfg.prompt.agent_header_tokens);
    std::map<WorkflowId, std::vector<std::pair<int, int>>> history;
    std::map<WorkflowId, std::vector<TokenId>> pending;  // tokens for the next INSERT
    for (const Event& e : events) {
        switch (e.type) {
            case Event::Type::Prefill: {
                auto tokens = builder.prompt(e.w, history[e.w], e.agent);
                tree.match_prefix(tokens, e.w, e.agent);
                pending[e.w] = std::move(tokens);
                break;
            }
            case Event::Type::Extend: {
                history[e.w].push_back({e.agent, static_cast<int>(e.a)});
                auto tokens = builder.context(e.w, history[e.w]);
                tree.match_prefix(tokens, e.w, e.agent);
                pending[e.w] = std::move(tokens);
                break;
            }
            case Event::Type::Insert:
                tree.insert_suffix(pending.at(e.w), e.w, e.agent, e.a);
                break;
            case Event::Type::Demote:
                tree.demote_to_host(static_cast<int>(e.a));
                break;
            case Event::Type::Drop:
                tree.drop_host_node(static_cast<int>(e.a));
                break;
            case Event::Type::Promote:
                tree.promote_to_device(static_cast<int>(e.a));
                break;
            case Event::Type::Terminate:
                tree.on_workflow_terminated(e.w);
                break;
            default:
                break;  // Admit/Shortfall/Drained carry no cache mutation
        }
    }
    return tree;
}

}  // namespace flowkv
