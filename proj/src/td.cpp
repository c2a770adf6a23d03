#include "proxdtr/td.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace proxdtr {

double StepSchedule::at(std::size_t k) const {
    if (!std::isfinite(decay_steps)) return scale;
    return scale / (1.0 + static_cast<double>(k) / decay_steps);
}

TDState::TDState(LinearFunctional model_in, StepSchedule schedule_in, double gamma_in)
    : model(std::move(model_in)), schedule(schedule_in), gamma(gamma_in) {
    require_discount(gamma);
    if (!(schedule.scale > 0.0) || !(schedule.decay_steps > 0.0)) throw ConfigError("step size must be positive");
}

double td_error(const LinearFunctional& model, const TransitionSample& sample, double gamma) {
    return model.value(sample.state) - sample.reward - gamma * model.value(sample.next_state);
}

namespace {

// Shared by the on- and off-policy updates; weight is 1 on-policy.
TDState weighted_update(TDState state, const TransitionSample& sample, double weight) {
    const double alpha = state.schedule.at(state.steps);
    const double delta = td_error(state.model, sample, state.gamma);
    state.model.theta -= (alpha * (weight * delta)) * state.model.basis.evaluate(sample.state);
    ++state.steps;
    const double norm = state.model.theta.lpNorm<Eigen::Infinity>();
    if (!std::isfinite(norm) || norm > state.divergence_bound) {
        std::ostringstream msg;
        msg << "semi-gradient divergence: ||theta||_inf = " << norm << " after " << state.steps
            << " updates (TD can diverge off-policy or with poor features)";
        throw DivergenceError(msg.str());
    }
    return state;
}

double raw_ratio(const StochasticPolicy& target, const StochasticPolicy& behavior, const StateVector& state,
                 ActionId action) {
    const double b = behavior.probability(state, action);
    if (!(b > 0.0)) {
        std::ostringstream msg;
        msg << "positivity violated at (s=" << state.transpose() << ", a=" << action << ")";
        throw DatasetError(msg.str());
    }
    return target.probability(state, action) / b;
}

}  // namespace

TDState td0_update(TDState state, const TransitionSample& sample) {
    return weighted_update(std::move(state), sample, 1.0);
}

double importance_ratio(const StochasticPolicy& target, const StochasticPolicy& behavior, const StateVector& state,
                        ActionId action, double cap) {
    return std::min(raw_ratio(target, behavior, state, action), cap);
}

TDState td0_offpolicy_update(TDState state, const TransitionSample& sample, const StochasticPolicy& target,
                             const StochasticPolicy& behavior) {
    const double rho = raw_ratio(target, behavior, sample.state, sample.action);
    if (rho > state.ratio_cap) ++state.clipped;
    return weighted_update(std::move(state), sample, std::min(rho, state.ratio_cap));
}

double se_mc_loss(const LinearFunctional& model, const StateVector& state, std::span<const double> mc_returns) {
    if (mc_returns.empty()) throw ConfigError("SE-MC loss needs at least one Monte-Carlo return");
    const double v = model.value(state);
    double total = 0.0;
    for (double g : mc_returns) total += (v - g) * (v - g);
    return total / static_cast<double>(mc_returns.size());
}

TDState run_td(const OfflineDataset& ds, const FeatureBasis& basis, double gamma, const TDRunConfig& config,
               const StochasticPolicy* target, const StochasticPolicy* behavior) {
    if ((target == nullptr) != (behavior == nullptr)) {
        throw ConfigError("off-policy TD needs both a target and a behavior policy");
    }
    TDState state(LinearFunctional(basis), config.schedule, gamma);
    state.ratio_cap = config.ratio_cap;
    for (std::size_t pass = 0; pass < config.passes; ++pass) {
        for (const auto& traj : ds.trajectories()) {
            for (std::size_t t = 0; t < traj.transition_count(); ++t) {
                const auto sample = traj.transition(t);
                state = target ? td0_offpolicy_update(std::move(state), sample, *target, *behavior)
                               : td0_update(std::move(state), sample);
            }
        }
    }
    return state;
}

}  // namespace proxdtr
