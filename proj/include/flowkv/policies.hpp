#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "flowkv/cache.hpp"
#include "flowkv/csv.hpp"
#include "flowkv/errors.hpp"
#include "flowkv/scoring.hpp"

namespace flowkv {

enum class EvictionPolicy { Lru, Lae, Hierarchical, KvFlow };

inline const char* policy_name(EvictionPolicy p) {
    switch (p) {
        case EvictionPolicy::Lru: return "lru";
        case EvictionPolicy::Lae: return "lae";
        case EvictionPolicy::Hierarchical: return "he";
        default: return "kvflow";
    }
}

struct VictimSelection {
    std::vector<int> victims;  // in eviction order; each is a leaf at its turn
    std::int64_t freed = 0;
    bool shortfall = false;
};

namespace detail {

// Ordered candidate key. cls 0 pops before cls 1; within a class the policy
// ranks by `rank`, then by last_access (older first), then id.
struct CandidateKey {
    int cls;
    double rank;
    std::uint64_t last_access;
    int id;
    bool operator<(const CandidateKey& o) const {
        return std::tie(cls, rank, last_access, id) < std::tie(o.cls, o.rank, o.last_access, o.id);
    }
};

template <typename KeyFn>
VictimSelection select_victims(const CacheTree& tree, std::int64_t needed,
                               const std::set<int>& locked, KeyFn&& key_of) {
    if (needed <= 0) throw ValidationError("eviction request must free a positive amount");
    std::set<CandidateKey> frontier;
    std::map<int, int> virtual_device_children;
    auto try_add = [&](int id) {
        if (locked.count(id)) return;
        frontier.insert(key_of(tree.node(id)));
    };
    for (auto [last, id] : tree.lru_leaves()) {
        (void)last;
        try_add(id);
    }
    VictimSelection sel;
    while (sel.freed < needed && !frontier.empty()) {
        auto it = frontier.begin();
        int id = it->id;
        frontier.erase(it);
        const CacheTree::Node& n = tree.node(id);
        sel.victims.push_back(id);
        sel.freed += n.len();
        // evicting a node may expose its parent as a new leaf candidate
        int pid = n.parent;
        if (pid > 0 && tree.node(pid).tier == Tier::Device) {
            auto [vit, fresh] =
                virtual_device_children.try_emplace(pid, tree.node(pid).device_children);
            (void)fresh;
            if (--vit->second == 0) try_add(pid);
        }
    }
    sel.shortfall = sel.freed < needed;
    return sel;
}

}  // namespace detail

/// Plain LRU: device leaves by ascending last access, lifecycle-blind.
inline VictimSelection select_victims_lru(const CacheTree& tree, std::int64_t needed,
                                          const std::set<int>& locked = {}) {
    return detail::select_victims(tree, needed, locked, [](const CacheTree::Node& n) {
        return detail::CandidateKey{0, 0.0, n.last_access, n.id};
    });
}

/// Lifecycle-aware: retired nodes first, least-popular first (fewest
/// workflows ever tagged), then LRU over the active rest.
inline VictimSelection select_victims_lae(const CacheTree& tree, std::int64_t needed,
                                          const std::set<int>& locked = {}) {
    return detail::select_victims(tree, needed, locked, [](const CacheTree::Node& n) {
        if (n.retired)
            return detail::CandidateKey{0, static_cast<double>(n.ever_tagged), n.last_access, n.id};
        return detail::CandidateKey{1, 0.0, n.last_access, n.id};
    });
}

/// Hierarchical: all retired cache drains first (as in LAE), then active
/// nodes in ascending lookahead score. Node scores must be current.
inline VictimSelection select_victims_hierarchical(const CacheTree& tree, std::int64_t needed,
                                                   const std::set<int>& locked = {}) {
    return detail::select_victims(tree, needed, locked, [](const CacheTree::Node& n) {
        if (n.retired)
            return detail::CandidateKey{0, static_cast<double>(n.ever_tagged), n.last_access, n.id};
        return detail::CandidateKey{1, n.score, n.last_access, n.id};
    });
}

/// Steps-to-execution distance for one node: the minimum over active tagged
/// workflows of the position (1-based) of the next invocation of any tagged
/// agent in that workflow's remaining static sequence. Infinity if no tagged
/// agent appears again.
inline double kvflow_distance(const CacheTree::Node& n, const CacheTree& tree,
                              const std::map<WorkflowId, std::vector<AgentId>>& remaining) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [w, bits] : n.access) {
        auto it = remaining.find(w);
        if (it == remaining.end())
            throw ValidationError("kvflow needs a static remaining sequence for workflow " +
                                  std::to_string(w));
        const auto& seq = it->second;
        for (std::size_t k = 0; k < seq.size(); ++k) {
            if (bits & (1ULL << seq[k])) {
                best = std::min(best, static_cast<double>(k + 1));
                break;
            }
        }
    }
    (void)tree;
    return best;
}

/// KVFlow-style eviction for static workloads: evict the farthest
/// steps-to-execution first; retired and never-again nodes before any
/// finite-distance node; ties broken by last access.
inline VictimSelection select_victims_kvflow(
    const CacheTree& tree, std::int64_t needed,
    const std::map<WorkflowId, std::vector<AgentId>>& remaining, const std::set<int>& locked = {}) {
    return detail::select_victims(tree, needed, locked, [&](const CacheTree::Node& n) {
        double d = n.retired ? std::numeric_limits<double>::infinity()
                             : kvflow_distance(n, tree, remaining);
        if (std::isinf(d)) return detail::CandidateKey{0, 0.0, n.last_access, n.id};
        return detail::CandidateKey{1, -d, n.last_access, n.id};
    });
}

inline VictimSelection select_victims(const CacheTree& tree, EvictionPolicy policy,
                                      std::int64_t needed,
                                      const std::map<WorkflowId, std::vector<AgentId>>* remaining,
                                      const std::set<int>& locked = {}) {
    switch (policy) {
        case EvictionPolicy::Lru: return select_victims_lru(tree, needed, locked);
        case EvictionPolicy::Lae: return select_victims_lae(tree, needed, locked);
        case EvictionPolicy::Hierarchical: return select_victims_hierarchical(tree, needed, locked);
        case EvictionPolicy::KvFlow:
            if (!remaining) throw ValidationError("kvflow selected without static sequences");
            return select_victims_kvflow(tree, needed, *remaining, locked);
    }
    throw ValidationError("unknown eviction policy");
}

struct PrefetchPlan {
    std::vector<std::pair<int, double>> candidates;  // (node, one-step value), best first
    std::int64_t budget_space = 0;                   // Sa: free device + retired device tokens
    std::int64_t budget_bw = 0;                      // Sbw: bandwidth * step duration
    std::int64_t displacement_budget = 0;            // aggressive only: rho * device capacity
    std::vector<int> selected;                       // greedy prefix fitting min(Sa, Sbw)
    std::int64_t selected_tokens = 0;
};

namespace detail {

inline PrefetchPlan plan_prefetch(const CacheTree& tree, const ForecastProvider& forecasts,
                                  std::int64_t bandwidth, int step_duration,
                                  std::int64_t extra_space) {
    PrefetchPlan plan;
    plan.budget_space = tree.device_free() + tree.retired_device_tokens();
    plan.budget_bw = bandwidth * step_duration;
    plan.displacement_budget = extra_space;
    std::int64_t budget = std::min(plan.budget_space + extra_space, plan.budget_bw);

    for (auto [last, id] : tree.host_nodes()) {
        (void)last;
        const CacheTree::Node& n = tree.node(id);
        if (tree.node(n.parent).tier != Tier::Device) continue;  // keep prefixes usable
        auto terms = node_terms(tree, id, forecasts);
        double v = single_step_value(terms);
        if (v <= 0.0) continue;  // retired or provably dead next step
        plan.candidates.push_back({id, v});
    }
    std::sort(plan.candidates.begin(), plan.candidates.end(),
              [](const auto& a, const auto& b) {
                  return a.second != b.second ? a.second > b.second : a.first < b.first;
              });
    for (const auto& [id, v] : plan.candidates) {
        (void)v;
        std::int64_t len = tree.node(id).len();
        if (len <= budget - plan.selected_tokens) {
            plan.selected.push_back(id);
            plan.selected_tokens += len;
        }
    }
    return plan;
}

}  // namespace detail

/// Conservative prefetch: promote the highest one-step-value host nodes into
/// space that is free or held by retired cache, never displacing active
/// device cache, and never moving more than the per-step bandwidth budget.
/// Valid only on pure-decode steps (the simulator enforces the gating).
inline PrefetchPlan plan_conservative_prefetch(const CacheTree& tree,
                                               const ForecastProvider& forecasts,
                                               std::int64_t bandwidth, int step_duration = 1) {
    return detail::plan_prefetch(tree, forecasts, bandwidth, step_duration, 0);
}

/// Aggressive variant: additionally allowed to displace active device cache
/// (ascending lookahead score) worth up to rho * device capacity.
inline PrefetchPlan plan_aggressive_prefetch(const CacheTree& tree,
                                             const ForecastProvider& forecasts,
                                             std::int64_t bandwidth, double rho,
                                             int step_duration = 1) {
    if (rho < 0.0 || rho > 1.0) throw ValidationError("rho must be in [0, 1]");
    auto extra = static_cast<std::int64_t>(rho * static_cast<double>(tree.device_capacity()));
    return detail::plan_prefetch(tree, forecasts, bandwidth, step_duration, extra);
}

inline std::string prefetch_plan_csv(const PrefetchPlan& plan, const CacheTree& tree) {
    std::string out = "node_id,token_len,value,selected\n";
    std::set<int> chosen(plan.selected.begin(), plan.selected.end());
    for (const auto& [id, v] : plan.candidates) {
        CsvRow row;
        row.add(id).add(tree.node(id).len()).add(v).add(chosen.count(id) ? "1" : "0");
        out += row.str() + "\n";
    }
    return out;
}

inline std::string victims_csv(const VictimSelection& sel, const CacheTree& tree) {
    std::string out = "order,node_id,token_len,retired,score\n";
    for (std::size_t i = 0; i < sel.victims.size(); ++i) {
        const auto& n = tree.node(sel.victims[i]);
        CsvRow row;
        row.add(i).add(n.id).add(n.len()).add(n.retired ? "1" : "0").add(n.score);
        out += row.str() + "\n";
    }
    return out;
}

}  // namespace flowkv
