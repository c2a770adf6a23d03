#pragma once

#include "proxdtr/core.hpp"

#include <vector>

namespace proxdtr {

/// Finite MDP given explicitly: P[a](s, s') and r[a](s, s').
///
/// Tabular states are the scalar index states (0), (1), ... so that the
/// same policies and bases work for both tabular and feature-based code.
class TabularMDP {
public:
    /// Rewards depending on the successor: reward[a](s, s').
    TabularMDP(std::vector<Matrix> transition, std::vector<Matrix> reward);
    /// Expected rewards R(s, a), independent of the successor.
    TabularMDP(std::vector<Matrix> transition, const Matrix& expected_reward);

    std::size_t state_count() const { return static_cast<std::size_t>(transition_.front().rows()); }
    std::size_t action_count() const { return transition_.size(); }

    /// P(. | s, a) as an S x S matrix per action.
    const Matrix& transition(ActionId a) const { return transition_.at(static_cast<std::size_t>(a)); }
    const Matrix& reward(ActionId a) const { return reward_.at(static_cast<std::size_t>(a)); }
    double probability(std::size_t s, ActionId a, std::size_t next) const;
    double reward(std::size_t s, ActionId a, std::size_t next) const;

    /// sum_{s'} P(s'|s,a) r(s,a,s'), an S x A matrix.
    Matrix expected_reward() const;
    /// Q(s, a) = sum_{s'} P (r + gamma V(s')).
    Matrix q_values(const Vector& values, double gamma) const;

    /// Transition and expected reward under a policy table (S x A).
    Matrix policy_transition(const Matrix& policy) const;
    Vector policy_reward(const Matrix& policy) const;

private:
    std::vector<Matrix> transition_;
    std::vector<Matrix> reward_;
};

/// (BV)(s) = max_a sum_{s'} P (r + gamma V(s')).
Vector bellman_optimality_operator(const TabularMDP& mdp, const Vector& values, double gamma);

struct ValueIterationResult {
    Vector values;
    Matrix q;
    std::vector<ActionId> greedy;
    std::size_t iterations = 0;
    /// ||B V - V||_inf at the returned values.
    double residual = 0.0;
};

/// Iterates V <- BV from V = 0 and stops at the first iterate whose residual
/// ||BV - V||_inf is at most tol. The greedy policy breaks ties toward the
/// lowest action index.
ValueIterationResult value_iteration(const TabularMDP& mdp, double gamma, double tol = 1e-10,
                                     std::size_t max_iter = 1'000'000);

/// Exact V^pi from the linear system (I - gamma P_pi) V = r_pi.
Vector policy_evaluation(const TabularMDP& mdp, const Matrix& policy, double gamma);
Vector policy_evaluation(const TabularMDP& mdp, const StochasticPolicy& policy, double gamma);

/// Greedy deterministic policy table (S x A) from Q.
Matrix greedy_table(const Matrix& q);

/// Finite-horizon Q-learning by backward induction over observed histories.
///
/// Stages are 0-based. The stage-t history is (s^{t-w+1..t}, a^{t-w+1..t-1})
/// for a window w (0 = full history). Each stage fits least squares of the
/// outcome on the history features fully interacted with action indicators.
/// The last stage regresses the observed cumulative reward; earlier stages
/// regress the fitted optimal value of the next stage. Rewards already
/// observed by stage t enter as a known offset, so the regression targets
/// the remaining reward only.
struct BackwardInductionConfig {
    std::size_t window = 0;
    /// Values within this tolerance of the maximum count as ties (lowest index wins).
    double tie_tol = 1e-9;
};

class StageRule {
public:
    StageRule(std::size_t stage, std::size_t window, FeatureBasis basis, std::size_t action_count, Matrix coef);

    /// Predicted remaining reward for each action, given the history up to this stage.
    Vector action_values(std::span<const StateVector> states, std::span<const ActionId> actions) const;
    ActionId recommend(std::span<const StateVector> states, std::span<const ActionId> actions,
                       double tie_tol = 1e-9) const;

    std::size_t stage() const { return stage_; }
    const Matrix& coefficients() const { return coef_; }
    Vector history_features(std::span<const StateVector> states, std::span<const ActionId> actions) const;

private:
    std::size_t stage_;
    std::size_t window_;
    FeatureBasis basis_;
    std::size_t action_count_;
    Matrix coef_;  // action_count x history_dim
};

struct BackwardInductionResult {
    std::vector<StageRule> stages;
};

/// Requires every trajectory to have exactly `horizon` transitions.
BackwardInductionResult backward_induction(const OfflineDataset& ds, std::size_t horizon, const FeatureBasis& basis,
                                           const BackwardInductionConfig& config = {});

}  // namespace proxdtr
