#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "flowkv/errors.hpp"

namespace flowkv {

/// K per-step probability distributions over agents + END for one workflow.
/// Step distributions are conditional on survival to that step; survival
/// itself is the running hazard product of the END masses.
class Forecast {
public:
    Forecast() = default;

    Forecast(int horizon, int outcomes, std::vector<double> steps)
        : horizon_(horizon), outcomes_(outcomes), p_(std::move(steps)) {
        if (horizon_ < 1) throw ValidationError("forecast horizon must be >= 1");
        if (outcomes_ < 2) throw ValidationError("forecast needs at least one agent plus END");
        if (p_.size() != static_cast<std::size_t>(horizon_) * outcomes_)
            throw ValidationError("forecast step data has wrong size");
        for (int k = 0; k < horizon_; ++k) {
            double s = 0.0;
            for (int a = 0; a < outcomes_; ++a) {
                double v = at(k, a);
                if (v < -1e-12) throw ValidationError("negative forecast probability");
                s += v;
            }
            if (std::abs(s - 1.0) > 1e-9)
                throw ValidationError("forecast step does not sum to 1");
        }
        survival_.resize(horizon_);
        double s = 1.0;
        for (int k = 0; k < horizon_; ++k) {
            survival_[k] = s;
            s *= 1.0 - p_end(k);
            if (s < 0.0) s = 0.0;
        }
    }

    int horizon() const { return horizon_; }
    int outcomes() const { return outcomes_; }
    int num_agents() const { return outcomes_ - 1; }

    /// Probability of outcome `a` at step k (0-based step index).
    double at(int k, int a) const { return p_[static_cast<std::size_t>(k) * outcomes_ + a]; }

    /// Conditional termination probability at step k.
    double p_end(int k) const { return at(k, outcomes_ - 1); }

    /// P(workflow still active at step k); survival(0) = 1 by convention.
    double survival(int k) const { return survival_[k]; }

    std::span<const double> step(int k) const {
        return std::span<const double>(p_).subspan(static_cast<std::size_t>(k) * outcomes_,
                                                   outcomes_);
    }

    /// Probability mass at step k on the agent set encoded in `bits`
    /// (bit a set = agent a; END is never included).
    double mass_on(int k, std::uint64_t bits) const {
        double s = 0.0;
        for (int a = 0; a < num_agents(); ++a)
            if (bits & (1ULL << a)) s += at(k, a);
        return s;
    }

private:
    int horizon_ = 0;
    int outcomes_ = 0;
    std::vector<double> p_;
    std::vector<double> survival_;
};

struct L1ErrorReport {
    std::vector<double> per_step;  // ||P^(k) - Phat^(k)||_1
    double discounted = 0.0;       // sum_k gamma^{k-1} eps^(k)
};

/// Per-step l1 deviation between two forecasts plus its discount-weighted
/// aggregate for a given gamma.
inline L1ErrorReport forecast_l1_error(const Forecast& truth, const Forecast& est, double gamma) {
    if (truth.horizon() != est.horizon() || truth.outcomes() != est.outcomes())
        throw ValidationError("forecast shapes differ");
    L1ErrorReport r;
    r.per_step.resize(truth.horizon());
    double g = 1.0;
    for (int k = 0; k < truth.horizon(); ++k) {
        double e = 0.0;
        for (int a = 0; a < truth.outcomes(); ++a) e += std::abs(truth.at(k, a) - est.at(k, a));
        r.per_step[k] = e;
        r.discounted += g * e;
        g *= gamma;
    }
    return r;
}

}  // namespace flowkv
