#pragma once

#include "proxdtr/core.hpp"
#include "proxdtr/estimating_eq.hpp"
#include "proxdtr/tabular.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <vector>

namespace proxdtr {

struct StepResult {
    StateVector next_state;
    double reward = 0.0;
};

/// Generative model. All randomness comes from the generator passed in.
class Environment {
public:
    virtual ~Environment() = default;
    virtual std::size_t state_dim() const = 0;
    virtual std::size_t action_count() const = 0;
    virtual StateVector initial_state(Rng& rng) const = 0;
    virtual StepResult step(const StateVector& state, ActionId action, Rng& rng) const = 0;
    /// Bound on |reward|, used to pick Monte-Carlo truncation horizons.
    virtual double reward_bound() const = 0;
};

/// Samples a tabular MDP. States are the scalar index states.
class ChainEnv : public Environment {
public:
    /// `initial` defaults to uniform over states.
    explicit ChainEnv(TabularMDP mdp, Vector initial = {});

    const TabularMDP& mdp() const { return mdp_; }
    const Vector& initial_distribution() const { return initial_; }

    std::size_t state_dim() const override { return 1; }
    std::size_t action_count() const override { return mdp_.action_count(); }
    StateVector initial_state(Rng& rng) const override;
    StepResult step(const StateVector& state, ActionId action, Rng& rng) const override;
    double reward_bound() const override;

private:
    TabularMDP mdp_;
    Vector initial_;
};

/// S-state chain with actions 0 (left) and 1 (right). A move goes the other
/// way with probability `slip`. Entering the right end pays 1; staying at the
/// left end pays `left_reward`.
TabularMDP chain_mdp(std::size_t states, double slip = 0.1, double left_reward = 0.2);

/// Random MDP with Dirichlet(1) transition rows and uniform [0, 1) expected rewards.
TabularMDP random_mdp(std::size_t states, std::size_t actions, Rng& rng);

/// Penalty for glucose outside [80, 140] mg/dL; asymmetric between hyper- and hypoglycemia.
double glycemic_reward(double glucose);

struct GlucoseParams {
    double carb_effect = 0.35;
    double dose_effect = 8.0;
    double activity_effect = 0.2;
    double reversion = 0.1;
    double target = 120.0;
    double noise_sd = 15.0;
    double meal_prob = 0.25;
    double carb_min = 20.0;
    double carb_max = 80.0;
    double activity_mean = 3.0;
    double activity_sd = 2.0;
    double initial_mean = 160.0;
    double initial_sd = 30.0;
    std::size_t doses = 14;
};

/// State (glucose mg/dL, activity level, carbohydrates g). Action = dose level.
///   g' = g + carb_effect c - dose_effect a - activity_effect act - reversion (g - target) + N(0, noise_sd^2)
/// clipped to [20, 600]; activity and carbs are fresh exogenous draws each step.
/// The reward is glycemic_reward(g').
class GlucoseEnv : public Environment {
public:
    explicit GlucoseEnv(GlucoseParams params = {});

    const GlucoseParams& params() const { return params_; }

    std::size_t state_dim() const override { return 3; }
    std::size_t action_count() const override { return params_.doses; }
    StateVector initial_state(Rng& rng) const override;
    StepResult step(const StateVector& state, ActionId action, Rng& rng) const override;
    double reward_bound() const override;

private:
    StateVector exogenous(double glucose, Rng& rng) const;

    GlucoseParams params_;
};

/// Under-correcting dose rule: clamp(round((g - 120) / 16), 0, doses - 1).
ActionId glucose_heuristic_dose(const StateVector& state, std::size_t doses);

/// Heuristic mixed with uniform (weight epsilon).
StochasticPolicy glucose_behavior_policy(std::size_t doses, double epsilon = 0.3);

/// n trajectories of T transitions; trajectory i uses the stream mix_seed(seed, i).
OfflineDataset generate_dataset(const Environment& env, const StochasticPolicy& behavior, std::size_t n,
                                std::size_t T, std::uint64_t seed);

/// Smallest H with gamma^H * reward_bound < tol.
std::size_t mc_horizon(double gamma, double reward_bound, double tol = 1e-4);

struct MCEstimate {
    double mean = 0.0;
    double standard_error = 0.0;
    std::vector<double> returns;
};

/// m truncated discounted returns from s0 (or fresh initial states when
/// s0 is empty); replication r uses the stream mix_seed(seed, r).
MCEstimate mc_value(const Environment& env, const StochasticPolicy& policy, const std::optional<StateVector>& s0,
                    double gamma, std::size_t m, std::size_t horizon, std::uint64_t seed);

/// Two independent successor draws per state give an unbiased estimate of
/// the evaluation MSBE: mean of (r1 + gamma V(s1') - V(s)) (r2 + gamma V(s2') - V(s)).
double double_sample_msbe(const Environment& env, const LinearFunctional& values, const StochasticPolicy& policy,
                          std::span<const StateVector> states, double gamma, Rng& rng);

/// Learner refit periodically by the online loop.
class OnlineLearner {
public:
    virtual ~OnlineLearner() = default;
    virtual void refit(const OfflineDataset& ds) = 0;
    virtual Vector pmf(const StateVector& state) const = 0;
    /// Snapshot of the current policy, independent of later refits.
    virtual StochasticPolicy policy() const = 0;
};

/// Policy that never changes.
class FixedPolicyLearner : public OnlineLearner {
public:
    explicit FixedPolicyLearner(StochasticPolicy policy) : policy_(std::move(policy)) {}
    void refit(const OfflineDataset&) override {}
    Vector pmf(const StateVector& state) const override { return policy_.pmf(state); }
    StochasticPolicy policy() const override { return policy_; }

private:
    StochasticPolicy policy_;
};

/// GGQ on a state-action basis; greedy deterministic pmf. Before the first
/// fit every action value is zero, so action 0 is chosen.
class GGQLearner : public OnlineLearner {
public:
    GGQLearner(FeatureBasis state_action_basis, double gamma, GGQConfig config = {});
    void refit(const OfflineDataset& ds) override;
    Vector pmf(const StateVector& state) const override;
    StochasticPolicy policy() const override { return model_.policy(); }
    const GGQModel& model() const { return model_; }

private:
    GGQModel model_;
    GGQConfig config_;
};

using EpsilonSchedule = std::function<double(std::size_t)>;

/// epsilon_k = 1 / (1 + k / scale).
EpsilonSchedule decaying_epsilon(double scale = 200.0);
EpsilonSchedule constant_epsilon(double epsilon);

struct OnlineStep {
    double epsilon = 0.0;
    ActionId action = 0;
    double reward = 0.0;
};

struct OnlineConfig {
    std::size_t steps = 5000;
    std::size_t refit_interval = 50;
    /// Restart from a fresh initial state after this many steps (0 = never).
    std::size_t episode_length = 0;
    std::uint64_t seed = 0;
};

struct OnlineResult {
    std::vector<OnlineStep> history;
    StochasticPolicy final_policy;
};

/// With probability 1 - epsilon_k follow the learner's most likely action,
/// otherwise pick uniformly. The learner is refit on all data every
/// refit_interval steps and once more at the end.
OnlineResult epsilon_greedy_online(const Environment& env, OnlineLearner& learner, const EpsilonSchedule& schedule,
                                   const OnlineConfig& config);

}  // namespace proxdtr
