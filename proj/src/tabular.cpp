#include "proxdtr/tabular.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace proxdtr {

namespace {

void check_stochastic(const std::vector<Matrix>& transition) {
    if (transition.empty()) throw ConfigError("MDP needs at least one action");
    const Eigen::Index S = transition.front().rows();
    if (S == 0) throw ConfigError("MDP needs at least one state");
    for (std::size_t a = 0; a < transition.size(); ++a) {
        const Matrix& P = transition[a];
        if (P.rows() != S || P.cols() != S) throw ConfigError("transition matrices must be S x S");
        for (Eigen::Index s = 0; s < S; ++s) {
            const auto row = P.row(s);
            if (!row.allFinite() || (row.array() < 0.0).any() || std::abs(row.sum() - 1.0) > 1e-12) {
                std::ostringstream msg;
                msg << "transition row (s=" << s << ", a=" << a << ") is not a probability vector";
                throw ConfigError(msg.str());
            }
        }
    }
}

}  // namespace

TabularMDP::TabularMDP(std::vector<Matrix> transition, std::vector<Matrix> reward)
    : transition_(std::move(transition)), reward_(std::move(reward)) {
    check_stochastic(transition_);
    if (reward_.size() != transition_.size()) throw ConfigError("one reward matrix per action is required");
    for (const auto& R : reward_) {
        if (R.rows() != transition_.front().rows() || R.cols() != transition_.front().cols()) {
            throw ConfigError("reward matrices must be S x S");
        }
        if (!R.allFinite()) throw ConfigError("rewards must be finite");
    }
}

TabularMDP::TabularMDP(std::vector<Matrix> transition, const Matrix& expected_reward)
    : transition_(std::move(transition)) {
    check_stochastic(transition_);
    const Eigen::Index S = transition_.front().rows();
    if (expected_reward.rows() != S || expected_reward.cols() != static_cast<Eigen::Index>(transition_.size())) {
        throw ConfigError("expected reward must be S x A");
    }
    if (!expected_reward.allFinite()) throw ConfigError("rewards must be finite");
    reward_.reserve(transition_.size());
    for (Eigen::Index a = 0; a < expected_reward.cols(); ++a) {
        reward_.push_back(expected_reward.col(a).replicate(1, S));
    }
}

double TabularMDP::probability(std::size_t s, ActionId a, std::size_t next) const {
    return transition(a)(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(next));
}

double TabularMDP::reward(std::size_t s, ActionId a, std::size_t next) const {
    return reward(a)(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(next));
}

Matrix TabularMDP::expected_reward() const {
    Matrix out(static_cast<Eigen::Index>(state_count()), static_cast<Eigen::Index>(action_count()));
    for (std::size_t a = 0; a < action_count(); ++a) {
        out.col(static_cast<Eigen::Index>(a)) = transition_[a].cwiseProduct(reward_[a]).rowwise().sum();
    }
    return out;
}

Matrix TabularMDP::q_values(const Vector& values, double gamma) const {
    if (static_cast<std::size_t>(values.size()) != state_count()) throw ConfigError("value vector has wrong size");
    Matrix q = expected_reward();
    for (std::size_t a = 0; a < action_count(); ++a) {
        q.col(static_cast<Eigen::Index>(a)) += gamma * (transition_[a] * values);
    }
    return q;
}

Matrix TabularMDP::policy_transition(const Matrix& policy) const {
    const auto S = static_cast<Eigen::Index>(state_count());
    if (policy.rows() != S || policy.cols() != static_cast<Eigen::Index>(action_count())) {
        throw ConfigError("policy table must be S x A");
    }
    Matrix P = Matrix::Zero(S, S);
    for (std::size_t a = 0; a < action_count(); ++a) {
        P += policy.col(static_cast<Eigen::Index>(a)).asDiagonal() * transition_[a];
    }
    return P;
}

Vector TabularMDP::policy_reward(const Matrix& policy) const {
    return expected_reward().cwiseProduct(policy).rowwise().sum();
}

Vector bellman_optimality_operator(const TabularMDP& mdp, const Vector& values, double gamma) {
    return mdp.q_values(values, gamma).rowwise().maxCoeff();
}

Matrix greedy_table(const Matrix& q) {
    Matrix out = Matrix::Zero(q.rows(), q.cols());
    for (Eigen::Index s = 0; s < q.rows(); ++s) out(s, argmax_lowest(q.row(s).transpose())) = 1.0;
    return out;
}

ValueIterationResult value_iteration(const TabularMDP& mdp, double gamma, double tol, std::size_t max_iter) {
    require_discount(gamma);
    if (!(tol > 0.0)) throw ConfigError("value iteration tolerance must be positive");

    ValueIterationResult result;
    Vector v = Vector::Zero(static_cast<Eigen::Index>(mdp.state_count()));
    for (std::size_t k = 0; k < max_iter; ++k) {
        Vector next = bellman_optimality_operator(mdp, v, gamma);
        const double residual = (next - v).lpNorm<Eigen::Infinity>();
        result.iterations = k;
        if (residual <= tol) {
            result.residual = residual;
            break;
        }
        v = std::move(next);
        result.residual = residual;
    }
    if (result.residual > tol) throw Error("value iteration did not reach the requested tolerance");

    result.values = v;
    result.q = mdp.q_values(v, gamma);
    result.greedy.reserve(mdp.state_count());
    for (Eigen::Index s = 0; s < result.q.rows(); ++s) result.greedy.push_back(argmax_lowest(result.q.row(s).transpose()));
    return result;
}

Vector policy_evaluation(const TabularMDP& mdp, const Matrix& policy, double gamma) {
    require_discount(gamma);
    for (Eigen::Index s = 0; s < policy.rows(); ++s) check_pmf(policy.row(s).transpose());
    const Matrix P = mdp.policy_transition(policy);
    const Vector r = mdp.policy_reward(policy);
    const Matrix A = Matrix::Identity(P.rows(), P.cols()) - gamma * P;
    Vector v = A.partialPivLu().solve(r);
    // One step of iterative refinement keeps the residual at machine precision.
    v += A.partialPivLu().solve(r - A * v);
    const double residual = (A * v - r).lpNorm<Eigen::Infinity>();
    if (!v.allFinite() || residual > 1e-10 * std::max(1.0, r.lpNorm<Eigen::Infinity>())) {
        throw Error("policy evaluation linear solve failed");
    }
    return v;
}

Vector policy_evaluation(const TabularMDP& mdp, const StochasticPolicy& policy, double gamma) {
    return policy_evaluation(mdp, policy.table(mdp.state_count()), gamma);
}

// ---------------------------------------------------------------------------
// Backward induction

StageRule::StageRule(std::size_t stage, std::size_t window, FeatureBasis basis, std::size_t action_count, Matrix coef)
    : stage_(stage), window_(window), basis_(std::move(basis)), action_count_(action_count), coef_(std::move(coef)) {}

Vector StageRule::history_features(std::span<const StateVector> states, std::span<const ActionId> actions) const {
    if (states.size() != stage_ + 1 || actions.size() != stage_) {
        throw ConfigError("history at stage " + std::to_string(stage_) + " needs " + std::to_string(stage_ + 1) +
                          " states and " + std::to_string(stage_) + " actions");
    }
    const std::size_t keep_states = window_ == 0 ? states.size() : std::min(window_, states.size());
    const std::size_t keep_actions = keep_states - 1;
    const auto width = static_cast<Eigen::Index>(basis_.state_features());
    const auto A = static_cast<Eigen::Index>(action_count_);

    Vector x(1 + static_cast<Eigen::Index>(keep_states) * width + static_cast<Eigen::Index>(keep_actions) * A);
    x.setZero();
    x[0] = 1.0;
    Eigen::Index pos = 1;
    for (std::size_t k = states.size() - keep_states; k < states.size(); ++k) {
        x.segment(pos, width) = basis_.evaluate(states[k]);
        pos += width;
    }
    for (std::size_t k = actions.size() - keep_actions; k < actions.size(); ++k) {
        x[pos + actions[k]] = 1.0;
        pos += A;
    }
    return x;
}

Vector StageRule::action_values(std::span<const StateVector> states, std::span<const ActionId> actions) const {
    return coef_ * history_features(states, actions);
}

ActionId StageRule::recommend(std::span<const StateVector> states, std::span<const ActionId> actions,
                              double tie_tol) const {
    return argmax_lowest(action_values(states, actions), tie_tol);
}

BackwardInductionResult backward_induction(const OfflineDataset& ds, std::size_t horizon, const FeatureBasis& basis,
                                           const BackwardInductionConfig& config) {
    if (horizon == 0) throw ConfigError("horizon must be positive");
    if (basis.is_state_action()) throw ConfigError("backward induction takes a state-only basis");
    for (const auto& traj : ds.trajectories()) {
        if (traj.transition_count() != horizon) {
            throw DatasetError("every trajectory must have exactly " + std::to_string(horizon) + " decision points");
        }
    }

    const std::size_t n = ds.size();
    const std::size_t A = ds.action_count();
    const auto& trajs = ds.trajectories();

    std::vector<StageRule> rules;
    rules.reserve(horizon);
    // Remaining-reward pseudo-outcome for each trajectory, built from the stage above.
    Vector pseudo(static_cast<Eigen::Index>(n));

    for (std::size_t step = 0; step < horizon; ++step) {
        const std::size_t t = horizon - 1 - step;
        StageRule probe(t, config.window, basis, A, Matrix());
        const auto dim = probe.history_features(std::span(trajs[0].states.data(), t + 1),
                                                std::span(trajs[0].actions.data(), t))
                             .size();
        if (n < A * static_cast<std::size_t>(dim)) {
            throw DatasetError("underdetermined stage regression at stage " + std::to_string(t));
        }

        Matrix X(static_cast<Eigen::Index>(n), dim);
        Vector y(static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) {
            const auto& traj = trajs[i];
            X.row(static_cast<Eigen::Index>(i)) =
                probe.history_features(std::span(traj.states.data(), t + 1), std::span(traj.actions.data(), t));
            // Last stage: cumulative reward minus the already-observed offset, i.e. R^t.
            y[static_cast<Eigen::Index>(i)] =
                traj.rewards[t] + (t + 1 < horizon ? pseudo[static_cast<Eigen::Index>(i)] : 0.0);
        }

        Matrix coef = Matrix::Zero(static_cast<Eigen::Index>(A), dim);
        for (std::size_t a = 0; a < A; ++a) {
            std::vector<Eigen::Index> rows;
            for (std::size_t i = 0; i < n; ++i) {
                if (static_cast<std::size_t>(trajs[i].actions[t]) == a) rows.push_back(static_cast<Eigen::Index>(i));
            }
            if (rows.empty()) continue;
            const Matrix Xa = X(rows, Eigen::all);
            const Vector ya = y(rows);
            coef.row(static_cast<Eigen::Index>(a)) = Xa.completeOrthogonalDecomposition().solve(ya).transpose();
        }

        StageRule rule(t, config.window, basis, A, std::move(coef));
        if (t > 0) {
            for (std::size_t i = 0; i < n; ++i) {
                const auto& traj = trajs[i];
                pseudo[static_cast<Eigen::Index>(i)] =
                    rule.action_values(std::span(traj.states.data(), t + 1), std::span(traj.actions.data(), t))
                        .maxCoeff();
            }
        }
        rules.push_back(std::move(rule));
    }

    std::reverse(rules.begin(), rules.end());
    return {std::move(rules)};
}

}  // namespace proxdtr
