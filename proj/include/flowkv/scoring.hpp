#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "flowkv/cache.hpp"
#include "flowkv/csv.hpp"
#include "flowkv/errors.hpp"
#include "flowkv/forecast.hpp"

namespace flowkv {

struct ScoreParams {
    int k = 3;
    double gamma = 0.7;

    void validate() const {
        if (k < 1) throw ValidationError("lookahead horizon must be >= 1");
        if (!(gamma > 0.0 && gamma < 1.0)) throw ValidationError("gamma must be in (0, 1)");
    }
};

/// One active workflow's contribution to a node: its agent-access bits and
/// its current forecast.
struct AccessTerm {
    std::uint64_t bits = 0;
    const Forecast* forecast = nullptr;
};

/// s^(k) = prod_{j<k} (1 - p_end^(j)), with s^(1) = 1.
inline std::vector<double> survival_probs(const Forecast& f) {
    std::vector<double> s(f.horizon());
    for (int k = 0; k < f.horizon(); ++k) s[k] = f.survival(k);
    return s;
}

/// Next-step reuse value: sum over active workflows of A_w . P_w^(1).
inline double single_step_value(std::span<const AccessTerm> terms) {
    double v = 0.0;
    for (const auto& t : terms) v += t.forecast->mass_on(0, t.bits);
    return v;
}

/// K-step lookahead score with confidence decay and survival weighting:
/// sum_k gamma^{k-1} sum_w s_w^(k) * (A_w . P_w^(k)).
inline double multi_step_score(std::span<const AccessTerm> terms, const ScoreParams& params) {
    params.validate();
    double total = 0.0;
    for (const auto& t : terms) {
        if (t.forecast->horizon() < params.k)
            throw ValidationError("forecast horizon shorter than the scoring horizon");
        double g = 1.0;
        for (int k = 0; k < params.k; ++k) {
            total += g * t.forecast->survival(k) * t.forecast->mass_on(k, t.bits);
            g *= params.gamma;
        }
    }
    return total;
}

using ForecastProvider = std::function<const Forecast*(WorkflowId)>;

inline std::vector<AccessTerm> node_terms(const CacheTree& tree, int id,
                                          const ForecastProvider& forecasts) {
    std::vector<AccessTerm> terms;
    for (const auto& [w, bits] : tree.node(id).access) {
        const Forecast* f = forecasts(w);
        if (!f) throw ValidationError("missing forecast for active workflow " + std::to_string(w));
        terms.push_back({bits, f});
    }
    return terms;
}

/// Recomputes the scores of exactly the nodes tagged by `changed_workflow`
/// and repositions them in the tree's heap. Other nodes are untouched.
/// Returns how many nodes were recomputed.
inline int refresh_scores(CacheTree& tree, WorkflowId changed_workflow,
                          const ForecastProvider& forecasts, const ScoreParams& params) {
    const std::vector<int>* touched = tree.touched_nodes(changed_workflow);
    if (!touched) return 0;
    int count = 0;
    for (int id : *touched) {
        auto terms = node_terms(tree, id, forecasts);
        tree.set_score(id, multi_step_score(terms, params));
        ++count;
    }
    return count;
}

/// Recompute every node's score from scratch (used after terminations,
/// where the affected set is returned by the tree).
inline void refresh_nodes(CacheTree& tree, std::span<const int> ids,
                          const ForecastProvider& forecasts, const ScoreParams& params) {
    for (int id : ids) {
        auto terms = node_terms(tree, id, forecasts);
        tree.set_score(id, multi_step_score(terms, params));
    }
}

/// Debug export: node_id,score for every node.
inline std::string score_snapshot_csv(const CacheTree& tree) {
    std::string out = "node_id,score\n";
    for (std::size_t i = 1; i < tree.node_count(); ++i) {
        out += std::to_string(i) + "," + fmt_double(tree.node(static_cast<int>(i)).score) + "\n";
    }
    return out;
}

}  // namespace flowkv
