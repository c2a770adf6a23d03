#pragma once

#include "proxdtr/core.hpp"

#include <limits>

namespace proxdtr {

/// alpha_k = scale / (1 + k / decay_steps). An infinite decay gives a constant step.
struct StepSchedule {
    double scale = 0.5;
    double decay_steps = 1000.0;

    static StepSchedule constant(double alpha) { return {alpha, std::numeric_limits<double>::infinity()}; }
    /// alpha_k = a / (k + b).
    static StepSchedule robbins_monro(double a, double b) { return {a / b, b}; }

    double at(std::size_t k) const;
};

/// Linear TD(0) learner state. Updates return a new state.
struct TDState {
    LinearFunctional model;
    StepSchedule schedule;
    double gamma = 0.9;
    std::size_t steps = 0;
    /// Number of importance ratios that hit the cap.
    std::size_t clipped = 0;
    double ratio_cap = 100.0;
    /// ||theta||_inf above this aborts with DivergenceError.
    double divergence_bound = 1e6;

    TDState(LinearFunctional model, StepSchedule schedule, double gamma);
};

/// V(s) - r - gamma V(s').
double td_error(const LinearFunctional& model, const TransitionSample& sample, double gamma);

/// theta <- theta - alpha_k * delta * phi(s).
TDState td0_update(TDState state, const TransitionSample& sample);

/// pi(a|s) / pi_B(a|s), capped above at `cap`. Throws when pi_B(a|s) = 0.
double importance_ratio(const StochasticPolicy& target, const StochasticPolicy& behavior, const StateVector& state,
                        ActionId action, double cap = 100.0);

/// theta <- theta - alpha_k * rho * delta * phi(s) with rho the capped importance ratio.
TDState td0_offpolicy_update(TDState state, const TransitionSample& sample, const StochasticPolicy& target,
                             const StochasticPolicy& behavior);

/// (1/m) sum_i (V(s) - G_i)^2 over Monte-Carlo returns G_i from s.
double se_mc_loss(const LinearFunctional& model, const StateVector& state, std::span<const double> mc_returns);

struct TDRunConfig {
    StepSchedule schedule;
    std::size_t passes = 1;
    double ratio_cap = 100.0;
};

/// Streams every transition of the dataset (trajectory-major) through TD(0),
/// `passes` times. Off-policy when both policies are given.
TDState run_td(const OfflineDataset& ds, const FeatureBasis& basis, double gamma, const TDRunConfig& config,
               const StochasticPolicy* target = nullptr, const StochasticPolicy* behavior = nullptr);

}  // namespace proxdtr
