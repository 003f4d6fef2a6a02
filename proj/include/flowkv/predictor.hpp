#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowkv/callgraph.hpp"
#include "flowkv/errors.hpp"
#include "flowkv/forecast.hpp"

namespace flowkv {

/// Exact multi-step forecast from the ground-truth kernel.
inline Forecast oracle_predict(const CallGraph& g, std::span<const AgentId> prefix, int K) {
    return g.true_kstep_marginals(prefix, K);
}

/// Mixes every step of `base` with the uniform distribution over all
/// outcomes (agents + END): (1-lambda)*P + lambda*U.
inline Forecast noisy_predict(const Forecast& base, double lambda) {
    if (lambda < 0.0 || lambda > 1.0) throw ValidationError("noise level must be in [0, 1]");
    const int K = base.horizon();
    const int n = base.outcomes();
    const double u = 1.0 / n;
    std::vector<double> steps(static_cast<std::size_t>(K) * n);
    for (int k = 0; k < K; ++k)
        for (int a = 0; a < n; ++a)
            steps[static_cast<std::size_t>(k) * n + a] = (1.0 - lambda) * base.at(k, a) + lambda * u;
    return Forecast(K, n, std::move(steps));
}

/// Empirical order-n model over agent transitions, with longest-context
/// backoff and add-alpha smoothing on seen contexts. END is counted as a
/// regular outcome so termination probabilities are learned too.
class MarkovModel {
public:
    MarkovModel() = default;
    MarkovModel(int num_agents, int order, double alpha)
        : num_agents_(num_agents), order_(order), alpha_(alpha) {}

    int order() const { return order_; }
    int num_agents() const { return num_agents_; }
    int outcomes() const { return num_agents_ + 1; }
    double alpha() const { return alpha_; }

    void observe(std::span<const AgentId> context, AgentId target) {
        observe_weighted(context, target, 1.0);
    }

    void observe_weighted(std::span<const AgentId> context, AgentId target, double weight) {
        std::size_t start = context.size() > static_cast<std::size_t>(order_)
                                ? context.size() - order_
                                : 0;
        for (std::size_t s = start; s <= context.size(); ++s) {
            auto& row = counts_[key_of(context.subspan(s))];
            if (row.empty()) row.assign(outcomes(), 0.0);
            row[target] += weight;
        }
    }

    /// Smoothed distribution for the longest seen suffix of `prefix`;
    /// falls back to the global unigram row (always present after training).
    std::vector<double> row_for(std::span<const AgentId> prefix) const {
        std::size_t start = prefix.size() > static_cast<std::size_t>(order_)
                                ? prefix.size() - order_
                                : 0;
        for (std::size_t s = start; s <= prefix.size(); ++s) {
            auto it = counts_.find(key_of(prefix.subspan(s)));
            if (it != counts_.end()) return smooth(it->second);
        }
        throw ValidationError("markov model has no unigram row; train it first");
    }

    Forecast predict(std::span<const AgentId> prefix, int K) const {
        if (prefix.empty()) throw ValidationError("markov prediction needs a non-empty prefix");
        if (K < 1) throw ValidationError("horizon must be >= 1");
        const int n = outcomes();
        std::vector<double> steps;
        steps.reserve(static_cast<std::size_t>(K) * n);

        // Propagate the learned one-step rows over context states, with END
        // absorbing. Contexts are capped at `order_` agents.
        std::map<std::vector<AgentId>, double> mass;
        mass[tail(prefix)] = 1.0;
        for (int k = 0; k < K; ++k) {
            std::vector<double> outcome(n, 0.0);
            double alive = 0.0;
            std::map<std::vector<AgentId>, double> next_mass;
            for (const auto& [ctx, m] : mass) {
                if (m <= 0.0) continue;
                alive += m;
                std::vector<double> row = row_for(ctx);
                for (int a = 0; a < n; ++a) {
                    if (row[a] <= 0.0) continue;
                    outcome[a] += m * row[a];
                    if (a != num_agents_) {
                        std::vector<AgentId> ns = ctx;
                        ns.push_back(a);
                        next_mass[tail(ns)] += m * row[a];
                    }
                }
            }
            if (alive <= 1e-15) {
                std::fill(outcome.begin(), outcome.end(), 0.0);
                outcome[num_agents_] = 1.0;
            } else {
                for (auto& x : outcome) x /= alive;
            }
            steps.insert(steps.end(), outcome.begin(), outcome.end());
            mass = std::move(next_mass);
        }
        return Forecast(K, n, std::move(steps));
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["num_agents"] = num_agents_;
        j["order"] = order_;
        j["alpha"] = alpha_;
        nlohmann::json rows = nlohmann::json::object();
        for (const auto& [ctx, row] : counts_) rows[ctx] = row;
        j["counts"] = std::move(rows);
        return j;
    }

    static MarkovModel from_json(const nlohmann::json& j) {
        try {
            MarkovModel m(j.at("num_agents").get<int>(), j.at("order").get<int>(),
                          j.at("alpha").get<double>());
            for (const auto& [ctx, row] : j.at("counts").items())
                m.counts_[ctx] = row.get<std::vector<double>>();
            return m;
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("bad markov model: ") + e.what());
        }
    }

private:
    int num_agents_ = 0;
    int order_ = 1;
    double alpha_ = 0.0;
    std::map<std::string, std::vector<double>> counts_;

    static std::string key_of(std::span<const AgentId> ctx) {
        std::string k;
        for (AgentId a : ctx) {
            if (!k.empty()) k += ',';
            k += std::to_string(a);
        }
        return k;
    }

    std::vector<AgentId> tail(std::span<const AgentId> seq) const {
        std::size_t n = std::min<std::size_t>(seq.size(), static_cast<std::size_t>(order_));
        return std::vector<AgentId>(seq.end() - n, seq.end());
    }

    std::vector<double> smooth(const std::vector<double>& raw) const {
        double total = 0.0;
        for (double c : raw) total += c;
        std::vector<double> row(raw.size());
        double denom = total + alpha_ * raw.size();
        for (std::size_t a = 0; a < raw.size(); ++a) row[a] = (raw[a] + alpha_) / denom;
        return row;
    }
};

/// Counts every context of length <= n over the corpus. Terminated traces
/// contribute END as a final target; capped traces do not.
inline MarkovModel train_markov(std::span<const WorkflowTrace> traces, int num_agents, int order,
                                double alpha) {
    if (traces.empty()) throw ValidationError("markov training needs a non-empty corpus");
    if (order < 1) throw ValidationError("markov order must be >= 1");
    MarkovModel m(num_agents, order, alpha);
    for (const auto& t : traces) {
        const auto& inv = t.invocations;
        for (std::size_t i = 1; i < inv.size(); ++i)
            m.observe(std::span<const AgentId>(inv.data(), i), inv[i]);
        if (t.terminated && !inv.empty())
            m.observe(std::span<const AgentId>(inv), num_agents);
    }
    return m;
}

}  // namespace flowkv
