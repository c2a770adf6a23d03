#include "proxdtr/simulators.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace proxdtr {

namespace {

// Inverse-CDF draw; the last positive entry absorbs rounding.
std::size_t draw_index(const Eigen::Ref<const Vector>& probs, Rng& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double u = unit(rng);
    double acc = 0.0;
    std::size_t last = 0;
    for (Eigen::Index i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0) continue;
        acc += probs[i];
        last = static_cast<std::size_t>(i);
        if (u < acc) return last;
    }
    return last;
}

}  // namespace

// ---------------------------------------------------------------------------
// ChainEnv

ChainEnv::ChainEnv(TabularMDP mdp, Vector initial) : mdp_(std::move(mdp)), initial_(std::move(initial)) {
    const auto S = static_cast<Eigen::Index>(mdp_.state_count());
    if (initial_.size() == 0) initial_ = Vector::Constant(S, 1.0 / static_cast<double>(S));
    if (initial_.size() != S) throw ConfigError("initial distribution must have one entry per state");
    check_pmf(initial_);
}

StateVector ChainEnv::initial_state(Rng& rng) const { return index_state(draw_index(initial_, rng)); }

StepResult ChainEnv::step(const StateVector& state, ActionId action, Rng& rng) const {
    if (state.size() != 1 || state[0] < 0.0 || state[0] >= static_cast<double>(mdp_.state_count()) ||
        state[0] != std::floor(state[0])) {
        throw Error("unenumerated state");
    }
    if (action < 0 || static_cast<std::size_t>(action) >= mdp_.action_count()) throw ConfigError("action out of range");
    const auto s = static_cast<Eigen::Index>(state[0]);
    const std::size_t next = draw_index(mdp_.transition(action).row(s).transpose(), rng);
    return {index_state(next), mdp_.reward(static_cast<std::size_t>(s), action, next)};
}

double ChainEnv::reward_bound() const {
    double bound = 0.0;
    for (std::size_t a = 0; a < mdp_.action_count(); ++a) {
        bound = std::max(bound, mdp_.reward(static_cast<ActionId>(a)).cwiseAbs().maxCoeff());
    }
    return bound;
}

TabularMDP chain_mdp(std::size_t states, double slip, double left_reward) {
    if (states < 2) throw ConfigError("a chain needs at least two states");
    if (!(slip >= 0.0 && slip < 1.0)) throw ConfigError("slip must lie in [0, 1)");
    const auto S = static_cast<Eigen::Index>(states);
    std::vector<Matrix> P(2, Matrix::Zero(S, S));
    std::vector<Matrix> R(2, Matrix::Zero(S, S));
    for (Eigen::Index s = 0; s < S; ++s) {
        const Eigen::Index left = std::max<Eigen::Index>(s - 1, 0);
        const Eigen::Index right = std::min<Eigen::Index>(s + 1, S - 1);
        P[0](s, left) += 1.0 - slip;
        P[0](s, right) += slip;
        P[1](s, right) += 1.0 - slip;
        P[1](s, left) += slip;
        for (int a = 0; a < 2; ++a) {
            R[a](s, S - 1) = 1.0;
            if (s == 0) R[a](0, 0) = left_reward;
        }
    }
    return TabularMDP(std::move(P), std::move(R));
}

TabularMDP random_mdp(std::size_t states, std::size_t actions, Rng& rng) {
    if (states == 0 || actions == 0) throw ConfigError("random MDP needs states and actions");
    const auto S = static_cast<Eigen::Index>(states);
    std::exponential_distribution<double> expo(1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<Matrix> P(actions, Matrix(S, S));
    Matrix R(S, static_cast<Eigen::Index>(actions));
    for (std::size_t a = 0; a < actions; ++a) {
        for (Eigen::Index s = 0; s < S; ++s) {
            for (Eigen::Index k = 0; k < S; ++k) P[a](s, k) = expo(rng);
            P[a].row(s) /= P[a].row(s).sum();
            R(s, static_cast<Eigen::Index>(a)) = unit(rng);
        }
    }
    return TabularMDP(std::move(P), R);
}

// ---------------------------------------------------------------------------
// Glucose

double glycemic_reward(double glucose) {
    if (!std::isfinite(glucose)) throw ConfigError("glucose must be finite");
    double penalty = 0.0;
    if (glucose > 140.0) penalty += std::pow(glucose - 140.0, 1.1);
    if (glucose < 80.0) penalty += (glucose - 80.0) * (glucose - 80.0);
    return -penalty / 30.0;
}

GlucoseEnv::GlucoseEnv(GlucoseParams params) : params_(params) {
    const double values[] = {params_.carb_effect, params_.dose_effect,  params_.activity_effect, params_.reversion,
                             params_.target,      params_.noise_sd,     params_.meal_prob,       params_.carb_min,
                             params_.carb_max,    params_.activity_mean, params_.activity_sd,    params_.initial_mean,
                             params_.initial_sd};
    for (double v : values) {
        if (!std::isfinite(v)) throw ConfigError("glucose dynamics parameters must be finite");
    }
    if (params_.doses < 1) throw ConfigError("glucose environment needs at least one dose level");
    if (!(params_.meal_prob >= 0.0 && params_.meal_prob <= 1.0)) throw ConfigError("meal probability must lie in [0, 1]");
    if (!(params_.carb_min <= params_.carb_max)) throw ConfigError("carb range is empty");
    if (params_.noise_sd < 0.0 || params_.activity_sd < 0.0 || params_.initial_sd < 0.0) {
        throw ConfigError("standard deviations must be nonnegative");
    }
}

StateVector GlucoseEnv::exogenous(double glucose, Rng& rng) const {
    std::normal_distribution<double> activity(params_.activity_mean, params_.activity_sd);
    std::bernoulli_distribution meal(params_.meal_prob);
    std::uniform_real_distribution<double> carbs(params_.carb_min, params_.carb_max);
    StateVector s(3);
    s[0] = glucose;
    s[1] = std::clamp(activity(rng), 0.0, 10.0);
    s[2] = meal(rng) ? carbs(rng) : 0.0;
    return s;
}

StateVector GlucoseEnv::initial_state(Rng& rng) const {
    std::normal_distribution<double> g0(params_.initial_mean, params_.initial_sd);
    return exogenous(std::clamp(g0(rng), 20.0, 600.0), rng);
}

StepResult GlucoseEnv::step(const StateVector& state, ActionId action, Rng& rng) const {
    if (state.size() != 3) throw ConfigError("glucose state has three entries");
    if (action < 0 || static_cast<std::size_t>(action) >= params_.doses) throw ConfigError("action out of range");
    std::normal_distribution<double> noise(0.0, params_.noise_sd);
    const double g = state[0];
    double next = g + params_.carb_effect * state[2] - params_.dose_effect * action -
                  params_.activity_effect * state[1] - params_.reversion * (g - params_.target) + noise(rng);
    next = std::clamp(next, 20.0, 600.0);
    return {exogenous(next, rng), glycemic_reward(next)};
}

double GlucoseEnv::reward_bound() const { return std::max(-glycemic_reward(20.0), -glycemic_reward(600.0)); }

ActionId glucose_heuristic_dose(const StateVector& state, std::size_t doses) {
    const double raw = std::round((state[0] - 120.0) / 16.0);
    return static_cast<ActionId>(std::clamp(raw, 0.0, static_cast<double>(doses - 1)));
}

StochasticPolicy glucose_behavior_policy(std::size_t doses, double epsilon) {
    const auto base = StochasticPolicy::deterministic(
        doses, [doses](const StateVector& s) { return glucose_heuristic_dose(s, doses); });
    return StochasticPolicy::epsilon_soft(base, epsilon);
}

// ---------------------------------------------------------------------------
// Data and Monte Carlo

OfflineDataset generate_dataset(const Environment& env, const StochasticPolicy& behavior, std::size_t n,
                                std::size_t T, std::uint64_t seed) {
    if (n < 1 || T < 1) throw ConfigError("need at least one trajectory and one stage");
    if (behavior.action_count() != env.action_count()) throw ConfigError("behavior policy has the wrong action count");
    std::vector<Trajectory> trajectories(n);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(mix_seed(seed, i));
        auto& traj = trajectories[i];
        traj.states.push_back(env.initial_state(rng));
        for (std::size_t t = 0; t < T; ++t) {
            const ActionId a = behavior.sample(traj.states.back(), rng);
            auto result = env.step(traj.states.back(), a, rng);
            traj.actions.push_back(a);
            traj.rewards.push_back(result.reward);
            traj.states.push_back(std::move(result.next_state));
        }
    }
    return OfflineDataset(std::move(trajectories), env.state_dim(), env.action_count());
}

std::size_t mc_horizon(double gamma, double reward_bound, double tol) {
    require_discount(gamma);
    if (!(tol > 0.0)) throw ConfigError("horizon tolerance must be positive");
    std::size_t H = 0;
    double weight = reward_bound;
    while (!(weight < tol)) {
        weight *= gamma;
        ++H;
        if (H > 100'000'000) throw ConfigError("Monte-Carlo horizon is unbounded");
    }
    return H;
}

MCEstimate mc_value(const Environment& env, const StochasticPolicy& policy, const std::optional<StateVector>& s0,
                    double gamma, std::size_t m, std::size_t horizon, std::uint64_t seed) {
    if (m < 1) throw ConfigError("Monte-Carlo evaluation needs at least one replication");
    require_discount(gamma);
    MCEstimate out;
    out.returns.reserve(m);
    for (std::size_t r = 0; r < m; ++r) {
        Rng rng(mix_seed(seed, r));
        StateVector s = s0 ? *s0 : env.initial_state(rng);
        double total = 0.0;
        double weight = 1.0;
        for (std::size_t t = 0; t < horizon; ++t) {
            auto result = env.step(s, policy.sample(s, rng), rng);
            total += weight * result.reward;
            weight *= gamma;
            s = std::move(result.next_state);
        }
        out.returns.push_back(total);
    }
    const auto count = static_cast<double>(m);
    double sum = 0.0;
    for (double g : out.returns) sum += g;
    out.mean = sum / count;
    if (m > 1) {
        double ss = 0.0;
        for (double g : out.returns) ss += (g - out.mean) * (g - out.mean);
        out.standard_error = std::sqrt(ss / (count - 1.0) / count);
    }
    return out;
}

double double_sample_msbe(const Environment& env, const LinearFunctional& values, const StochasticPolicy& policy,
                          std::span<const StateVector> states, double gamma, Rng& rng) {
    if (states.empty()) throw ConfigError("double-sample MSBE needs at least one state");
    double total = 0.0;
    for (const auto& s : states) {
        const double v = values.value(s);
        const auto first = env.step(s, policy.sample(s, rng), rng);
        const auto second = env.step(s, policy.sample(s, rng), rng);
        total += (first.reward + gamma * values.value(first.next_state) - v) *
                 (second.reward + gamma * values.value(second.next_state) - v);
    }
    return total / static_cast<double>(states.size());
}

// ---------------------------------------------------------------------------
// Online loop

GGQLearner::GGQLearner(FeatureBasis state_action_basis, double gamma, GGQConfig config)
    : model_{LinearFunctional(std::move(state_action_basis)), gamma}, config_(config) {
    if (!model_.q.basis.is_state_action()) throw ConfigError("GGQ learner needs a state-action basis");
    require_discount(gamma);
}

void GGQLearner::refit(const OfflineDataset& ds) { model_ = solve_ggq(ds, model_.q.basis, model_.gamma, config_).model; }

Vector GGQLearner::pmf(const StateVector& state) const {
    Vector p = Vector::Zero(static_cast<Eigen::Index>(model_.q.basis.action_count()));
    p[model_.greedy(state)] = 1.0;
    return p;
}

EpsilonSchedule decaying_epsilon(double scale) {
    if (!(scale > 0.0)) throw ConfigError("epsilon decay scale must be positive");
    return [scale](std::size_t k) { return 1.0 / (1.0 + static_cast<double>(k) / scale); };
}

EpsilonSchedule constant_epsilon(double epsilon) {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
    return [epsilon](std::size_t) { return epsilon; };
}

OnlineResult epsilon_greedy_online(const Environment& env, OnlineLearner& learner, const EpsilonSchedule& schedule,
                                   const OnlineConfig& config) {
    if (config.refit_interval == 0) throw ConfigError("refit interval must be positive");
    const std::size_t A = env.action_count();
    Rng rng(config.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> uniform_action(0, static_cast<int>(A) - 1);

    std::vector<Trajectory> buffer(1);
    buffer.back().states.push_back(env.initial_state(rng));
    std::vector<OnlineStep> history;
    history.reserve(config.steps);

    auto refit = [&] {
        std::vector<Trajectory> complete;
        for (const auto& traj : buffer) {
            if (traj.transition_count() > 0) complete.push_back(traj);
        }
        if (!complete.empty()) learner.refit(OfflineDataset(std::move(complete), env.state_dim(), A));
    };

    for (std::size_t k = 0; k < config.steps; ++k) {
        const double eps = schedule(k);
        if (!(eps >= 0.0 && eps <= 1.0)) {
            std::ostringstream msg;
            msg << "epsilon schedule returned " << eps << " at step " << k;
            throw ConfigError(msg.str());
        }
        auto& traj = buffer.back();
        const StateVector s = traj.states.back();
        const ActionId a = unit(rng) < eps ? static_cast<ActionId>(uniform_action(rng)) : argmax_lowest(learner.pmf(s));
        auto result = env.step(s, a, rng);
        traj.actions.push_back(a);
        traj.rewards.push_back(result.reward);
        traj.states.push_back(std::move(result.next_state));
        history.push_back({eps, a, result.reward});

        if (config.episode_length > 0 && traj.transition_count() >= config.episode_length) {
            buffer.emplace_back();
            buffer.back().states.push_back(env.initial_state(rng));
        }
        if ((k + 1) % config.refit_interval == 0) refit();
    }
    refit();
    return {std::move(history), learner.policy()};
}

}  // namespace proxdtr
