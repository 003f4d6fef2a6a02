#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "flowkv/callgraph.hpp"
#include "flowkv/csv.hpp"
#include "flowkv/errors.hpp"
#include "flowkv/forecast.hpp"
#include "flowkv/rng.hpp"
#include "flowkv/scoring.hpp"

namespace flowkv::theory {

/// Lipschitz multiplier (1 - gamma^K) / (2 (1 - gamma)).
inline double tight_multiplier(double gamma, int k) {
    return (1.0 - std::pow(gamma, k)) / (2.0 * (1.0 - gamma));
}

/// K-independent upper bound 1 / (2 (1 - gamma)).
inline double loose_multiplier(double gamma) { return 1.0 / (2.0 * (1.0 - gamma)); }

// ---------------------------------------------------------------------------
// synthetic node model shared by the checks: a node is a set of
// (access bits, true forecast, predicted forecast) triples, one per
// active workflow tagged on it.

struct NodeInstance {
    struct Term {
        std::uint64_t bits = 0;
        Forecast truth;
        Forecast predicted;
    };
    std::vector<Term> terms;

    double true_score(const ScoreParams& p) const {
        std::vector<AccessTerm> ts;
        for (const auto& t : terms) ts.push_back({t.bits, &t.truth});
        return multi_step_score(ts, p);
    }
    double predicted_score(const ScoreParams& p) const {
        std::vector<AccessTerm> ts;
        for (const auto& t : terms) ts.push_back({t.bits, &t.predicted});
        return multi_step_score(ts, p);
    }
    /// eps_c^gamma: discount-weighted l1 error summed over tagged workflows.
    double epsilon(double gamma) const {
        double e = 0.0;
        for (const auto& t : terms) e += forecast_l1_error(t.truth, t.predicted, gamma).discounted;
        return e;
    }
};

struct PerturbationReport {
    double delta = 0.0;        // |Score - Score_hat|
    double epsilon = 0.0;      // eps_c^gamma
    double bound_tight = 0.0;  // (1 - gamma^K) / (2 (1-gamma)) * eps
    double bound_loose = 0.0;  // eps / (2 (1-gamma))
    bool violated = false;
};

inline PerturbationReport check_lipschitz(const NodeInstance& node, const ScoreParams& params) {
    PerturbationReport r;
    r.delta = std::abs(node.true_score(params) - node.predicted_score(params));
    r.epsilon = node.epsilon(params.gamma);
    r.bound_tight = tight_multiplier(params.gamma, params.k) * r.epsilon;
    r.bound_loose = loose_multiplier(params.gamma) * r.epsilon;
    constexpr double slack = 1e-9;
    r.violated = r.delta > r.bound_tight + slack || r.bound_tight > r.bound_loose + slack;
    return r;
}

struct RankingReport {
    double delta_scores = 0.0;    // Score(c1) - Score(c2) under truth (> 0 required)
    double weighted_eps = 0.0;    // multiplier * (eps_c1 + eps_c2)
    bool condition_holds = false; // weighted_eps < delta_scores
    bool order_preserved = false; // predicted scores keep the same order
    bool violated = false;        // condition held yet the order flipped
};

inline RankingReport check_ranking_stability(const NodeInstance& c1, const NodeInstance& c2,
                                             const ScoreParams& params) {
    RankingReport r;
    double s1 = c1.true_score(params), s2 = c2.true_score(params);
    if (!(s1 > s2)) throw ValidationError("ranking check expects Score(c1) > Score(c2)");
    r.delta_scores = s1 - s2;
    r.weighted_eps =
        tight_multiplier(params.gamma, params.k) * (c1.epsilon(params.gamma) + c2.epsilon(params.gamma));
    r.condition_holds = r.weighted_eps < r.delta_scores;
    r.order_preserved = c1.predicted_score(params) > c2.predicted_score(params);
    r.violated = r.condition_holds && !r.order_preserved;
    return r;
}

struct RegretReport {
    int budget = 0;
    double regret = 0.0;  // L(E_hat) - L(E_star), proxy cost = summed true scores
    double bound = 0.0;   // multiplier * sum of eps over the symmetric difference
    std::vector<int> evicted_hat;
    std::vector<int> evicted_star;
    bool violated = false;
};

/// Bottom-B selection under a score vector, ties broken by node id.
inline std::vector<int> bottom_b(const std::vector<double>& scores, int b) {
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
        return scores[x] != scores[y] ? scores[x] < scores[y] : x < y;
    });
    order.resize(b);
    std::sort(order.begin(), order.end());
    return order;
}

/// Eviction-cost regret of predicted bottom-B eviction versus the
/// true-score optimum, with the Lipschitz bound over the symmetric
/// difference. Nodes count one unit each toward the budget.
inline std::vector<RegretReport> check_regret(const std::vector<NodeInstance>& nodes,
                                              const ScoreParams& params,
                                              const std::vector<int>& budgets) {
    const int n = static_cast<int>(nodes.size());
    std::vector<double> truth(n), pred(n), eps(n);
    for (int i = 0; i < n; ++i) {
        truth[i] = nodes[i].true_score(params);
        pred[i] = nodes[i].predicted_score(params);
        eps[i] = nodes[i].epsilon(params.gamma);
    }
    double mult = tight_multiplier(params.gamma, params.k);
    std::vector<RegretReport> out;
    for (int b : budgets) {
        if (b < 1 || b >= n) throw ValidationError("budget must be in [1, n-1]");
        RegretReport r;
        r.budget = b;
        r.evicted_hat = bottom_b(pred, b);
        r.evicted_star = bottom_b(truth, b);
        double cost_hat = 0.0, cost_star = 0.0;
        for (int i : r.evicted_hat) cost_hat += truth[i];
        for (int i : r.evicted_star) cost_star += truth[i];
        r.regret = cost_hat - cost_star;
        std::vector<int> sym;
        std::set_symmetric_difference(r.evicted_hat.begin(), r.evicted_hat.end(),
                                      r.evicted_star.begin(), r.evicted_star.end(),
                                      std::back_inserter(sym));
        for (int i : sym) r.bound += mult * eps[i];
        constexpr double slack = 1e-9;
        r.violated = r.regret < -slack || r.regret > r.bound + slack;
        out.push_back(std::move(r));
    }
    return out;
}

/// Expands size-heterogeneous nodes into per-unit virtual nodes sharing the
/// node's score, reducing size-constrained eviction to the unit-size case.
inline std::vector<NodeInstance> expand_unit_size(const std::vector<NodeInstance>& nodes,
                                                  const std::vector<int>& sizes) {
    if (nodes.size() != sizes.size()) throw ValidationError("sizes must match nodes");
    std::vector<NodeInstance> out;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        if (sizes[i] < 1) throw ValidationError("node sizes must be positive");
        for (int u = 0; u < sizes[i]; ++u) out.push_back(nodes[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Monte-Carlo estimate of the expected discounted miss count of an evicted
// node, for comparison against its lookahead score.

struct EmcEstimate {
    double value = 0.0;
    double stderr_ = 0.0;
};

struct EmcWorkflow {
    std::vector<AgentId> prefix;  // conditioning history for this workflow
    std::uint64_t bits = 0;       // agents of this workflow tagged on the node
};

/// Samples trajectories from the true kernel; a miss is counted at step k
/// when the workflow is still alive and invokes a tagged agent. The node is
/// treated as absent for the whole horizon.
inline EmcEstimate emc_monte_carlo(const CallGraph& g, const std::vector<EmcWorkflow>& workflows,
                                   const ScoreParams& params, int num_trajectories,
                                   std::uint64_t seed) {
    if (num_trajectories < 1) throw ValidationError("need at least one trajectory");
    params.validate();
    EmcEstimate est;
    double var_sum = 0.0;
    Rng rng(seed);
    for (const auto& wf : workflows) {
        double sum = 0.0, sum_sq = 0.0;
        for (int t = 0; t < num_trajectories; ++t) {
            std::vector<AgentId> ctx = wf.prefix;
            double g_pow = 1.0, x = 0.0;
            for (int k = 0; k < params.k; ++k) {
                const auto& row = g.row_for_prefix(ctx);
                auto next = static_cast<AgentId>(rng.pick_weighted(row));
                if (next == g.end_symbol()) break;
                if (wf.bits & (1ULL << next)) x += g_pow;
                ctx.push_back(next);
                g_pow *= params.gamma;
            }
            sum += x;
            sum_sq += x * x;
        }
        double mean = sum / num_trajectories;
        double var = std::max(0.0, sum_sq / num_trajectories - mean * mean);
        est.value += mean;
        var_sum += var / num_trajectories;
    }
    est.stderr_ = std::sqrt(var_sum);
    return est;
}

// ---------------------------------------------------------------------------
// random instance generators for the sweep suite

inline Forecast random_forecast(Rng& rng, int k, int outcomes) {
    std::vector<double> steps;
    steps.reserve(static_cast<std::size_t>(k) * outcomes);
    for (int s = 0; s < k; ++s) {
        auto d = rng.random_distribution(outcomes);
        steps.insert(steps.end(), d.begin(), d.end());
    }
    return Forecast(k, outcomes, std::move(steps));
}

/// Random perturbation: mixes the truth toward an independent random
/// forecast by a random amount (possibly zero).
inline Forecast perturb_forecast(Rng& rng, const Forecast& truth, double scale) {
    Forecast other = random_forecast(rng, truth.horizon(), truth.outcomes());
    std::vector<double> steps;
    steps.reserve(static_cast<std::size_t>(truth.horizon()) * truth.outcomes());
    for (int k = 0; k < truth.horizon(); ++k)
        for (int a = 0; a < truth.outcomes(); ++a)
            steps.push_back((1.0 - scale) * truth.at(k, a) + scale * other.at(k, a));
    return Forecast(truth.horizon(), truth.outcomes(), std::move(steps));
}

inline NodeInstance random_node_instance(Rng& rng, int k, int outcomes, int max_workflows,
                                         double max_scale) {
    NodeInstance node;
    int n_wf = 1 + static_cast<int>(rng.uniform_int(max_workflows));
    for (int w = 0; w < n_wf; ++w) {
        NodeInstance::Term t;
        int agents = outcomes - 1;
        do {
            t.bits = rng.next_u64() & ((1ULL << agents) - 1);
        } while (t.bits == 0);
        t.truth = random_forecast(rng, k, outcomes);
        t.predicted = perturb_forecast(rng, t.truth, rng.uniform() * max_scale);
        node.terms.push_back(std::move(t));
    }
    return node;
}

/// Random small call graph with a validated kernel; every agent keeps some
/// probability of reaching END so horizons terminate.
inline CallGraph random_graph(Rng& rng, int max_agents, int n_ctx = 1) {
    int n = 2 + static_cast<int>(rng.uniform_int(max_agents - 1));
    std::vector<std::string> names;
    for (int i = 0; i < n; ++i) names.push_back("a" + std::to_string(i));
    std::set<std::pair<AgentId, AgentId>> edges;
    std::map<std::vector<AgentId>, std::vector<double>> rows;
    for (int a = 0; a < n; ++a) {
        std::vector<double> row(n + 1, 0.0);
        int fanout = 1 + static_cast<int>(rng.uniform_int(std::min(n, 3)));
        for (int f = 0; f < fanout; ++f) {
            int b = static_cast<int>(rng.uniform_int(n));
            row[b] += 0.2 + rng.uniform();
            edges.insert({a, b});
        }
        row[n] = 0.15 + rng.uniform() * 0.5;  // END stays reachable in one step
        double s = std::accumulate(row.begin(), row.end(), 0.0);
        for (auto& p : row) p /= s;
        rows[{a}] = std::move(row);
    }
    std::vector<double> entry = rng.random_distribution(n);
    return CallGraph(std::move(names), std::move(edges), std::move(rows), std::move(entry), 64,
                     n_ctx);
}

// ---------------------------------------------------------------------------
// sweep suite

struct TheoryConfig {
    int emc_instances = 50;
    int emc_trajectories = 100000;
    int lipschitz_instances = 10000;
    int ranking_instances = 10000;
    int regret_instances = 1000;
    std::uint64_t seed = 2024;
    // Test hook: shrinks the Lipschitz bound so the checker must flag
    // violations; verifies the suite is not vacuously green.
    bool inject_bound_fault = false;

    void validate() const {
        if (emc_instances < 1 || lipschitz_instances < 1 || ranking_instances < 1 ||
            regret_instances < 1 || emc_trajectories < 1)
            throw ValidationError("theory sweep sizes must be positive");
    }
};

struct TheoryRow {
    std::string check;
    int instance = 0;
    double delta = 0.0;
    double epsilon = 0.0;
    double bound = 0.0;
    double ratio = 0.0;
    bool violated = false;
};

struct TheorySummary {
    std::int64_t violations = 0;
    double max_delta_ratio = 0.0;  // max delta / tight bound over the lipschitz sweep
    double max_emc_sigma = 0.0;    // max |EMC - Score| / stderr
    std::vector<TheoryRow> rows;
};

inline ScoreParams random_params(Rng& rng) {
    ScoreParams p;
    p.k = 1 + static_cast<int>(rng.uniform_int(5));
    p.gamma = rng.uniform_range(0.1, 0.95);
    return p;
}

inline TheorySummary run_theory_suite(const TheoryConfig& cfg) {
    cfg.validate();
    TheorySummary sum;
    const double fault = cfg.inject_bound_fault ? 0.5 : 1.0;

    // score vs expected discounted miss count, on random graphs
    Rng rng(derive_seed(cfg.seed, 1));
    for (int i = 0; i < cfg.emc_instances; ++i) {
        CallGraph g = random_graph(rng, 6);
        ScoreParams p = random_params(rng);
        int n_wf = 1 + static_cast<int>(rng.uniform_int(3));
        std::vector<EmcWorkflow> wfs;
        NodeInstance node;
        for (int w = 0; w < n_wf; ++w) {
            EmcWorkflow wf;
            int hops = static_cast<int>(rng.uniform_int(3));
            for (int h = 0; h <= hops; ++h) {
                const auto& row = g.row_for_prefix(wf.prefix);
                auto next = static_cast<AgentId>(rng.pick_weighted(row));
                if (next == g.end_symbol()) break;
                wf.prefix.push_back(next);
            }
            wf.bits = rng.next_u64() & ((1ULL << g.num_agents()) - 1);
            NodeInstance::Term t;
            t.bits = wf.bits;
            t.truth = g.true_kstep_marginals(wf.prefix, p.k);
            t.predicted = t.truth;
            node.terms.push_back(std::move(t));
            wfs.push_back(std::move(wf));
        }
        EmcEstimate est = emc_monte_carlo(g, wfs, p, cfg.emc_trajectories,
                                          derive_seed(cfg.seed, 2, i));
        double score = node.true_score(p);
        double gap = std::abs(est.value - score);
        double tol = std::max(3.0 * est.stderr_, 1e-9);
        TheoryRow row{"emc", i, gap, 0.0, tol, est.stderr_ > 0 ? gap / est.stderr_ : 0.0,
                      gap > tol};
        sum.max_emc_sigma = std::max(sum.max_emc_sigma, row.ratio);
        if (row.violated) ++sum.violations;
        sum.rows.push_back(std::move(row));
    }

    // score Lipschitz continuity
    Rng rng2(derive_seed(cfg.seed, 3));
    for (int i = 0; i < cfg.lipschitz_instances; ++i) {
        ScoreParams p = random_params(rng2);
        int outcomes = 3 + static_cast<int>(rng2.uniform_int(5));
        NodeInstance node = random_node_instance(rng2, p.k, outcomes, 4, 1.0);
        PerturbationReport r = check_lipschitz(node, p);
        double bound = r.bound_tight * fault;
        bool violated = r.delta > bound + 1e-9 || r.violated;
        TheoryRow row{"lipschitz", i, r.delta, r.epsilon, bound,
                      bound > 0 ? r.delta / bound : 0.0, violated};
        sum.max_delta_ratio = std::max(sum.max_delta_ratio, row.ratio);
        if (violated) ++sum.violations;
        sum.rows.push_back(std::move(row));
    }

    // pairwise ranking stability
    Rng rng3(derive_seed(cfg.seed, 4));
    int done = 0;
    while (done < cfg.ranking_instances) {
        ScoreParams p = random_params(rng3);
        int outcomes = 3 + static_cast<int>(rng3.uniform_int(5));
        NodeInstance c1 = random_node_instance(rng3, p.k, outcomes, 3, 0.6);
        NodeInstance c2 = random_node_instance(rng3, p.k, outcomes, 3, 0.6);
        double s1 = c1.true_score(p), s2 = c2.true_score(p);
        if (s1 == s2) continue;
        if (s1 < s2) std::swap(c1, c2);
        RankingReport r = check_ranking_stability(c1, c2, p);
        // the injected fault loosens the premise, so legitimate order flips
        // get miscounted as violations
        bool violated = cfg.inject_bound_fault
                            ? (r.weighted_eps * 0.5 < r.delta_scores && !r.order_preserved)
                            : r.violated;
        TheoryRow row{"ranking", done, r.delta_scores, r.weighted_eps, r.delta_scores, 0.0,
                      violated};
        if (violated) ++sum.violations;
        sum.rows.push_back(std::move(row));
        ++done;
    }

    // eviction-cost regret
    Rng rng4(derive_seed(cfg.seed, 5));
    for (int i = 0; i < cfg.regret_instances; ++i) {
        ScoreParams p = random_params(rng4);
        int outcomes = 3 + static_cast<int>(rng4.uniform_int(4));
        int n = 4 + static_cast<int>(rng4.uniform_int(17));
        bool perfect = i % 10 == 0;
        std::vector<NodeInstance> nodes;
        for (int j = 0; j < n; ++j) {
            NodeInstance node = random_node_instance(rng4, p.k, outcomes, 3, perfect ? 0.0 : 0.8);
            if (perfect)
                for (auto& t : node.terms) t.predicted = t.truth;
            nodes.push_back(std::move(node));
        }
        std::vector<int> budgets;
        for (int b = 1; b < n; ++b) budgets.push_back(b);
        auto reports = check_regret(nodes, p, budgets);
        for (const auto& r : reports) {
            bool violated = r.violated;
            if (cfg.inject_bound_fault && r.regret > r.bound * 0.5 + 1e-12) violated = true;
            if (perfect && r.regret != 0.0) violated = true;
            TheoryRow row{"regret", i, r.regret, 0.0, r.bound,
                          r.bound > 0 ? r.regret / r.bound : 0.0, violated};
            if (violated) ++sum.violations;
            sum.rows.push_back(std::move(row));
        }
    }
    return sum;
}

inline std::string theory_report_csv(const TheorySummary& sum) {
    std::string out = "check,instance_id,delta,epsilon,bound,ratio,violated\n";
    for (const auto& r : sum.rows) {
        CsvRow row;
        row.add(r.check).add(r.instance).add(r.delta).add(r.epsilon).add(r.bound).add(r.ratio);
        row.add(r.violated ? "1" : "0");
        out += row.str() + "\n";
    }
    return out;
}

}  // namespace flowkv::theory
