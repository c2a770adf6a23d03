#include "proxdtr/simulators.hpp"
#include "proxdtr/td.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <random>

using namespace proxdtr;

namespace {

TransitionSample sample(StateVector s, ActionId a, double r, StateVector next) {
    return TransitionSample{std::move(s), a, r, std::move(next)};
}

TransitionSample self_loop(double r) { return sample(index_state(0), 0, r, index_state(0)); }

}  // namespace

TEST_CASE("TD error") {
    const LinearFunctional zero(FeatureBasis::tabular(2));
    CHECK(td_error(zero, sample(index_state(0), 0, 0.0, index_state(1)), 0.9) == 0.0);
    CHECK(td_error(zero, sample(index_state(0), 0, 1.0, index_state(1)), 0.9) == -1.0);

    Vector theta(2);
    theta << 2.0, 1.0;
    const LinearFunctional model(theta, FeatureBasis::tabular(2));
    CHECK(td_error(model, sample(index_state(0), 0, 0.5, index_state(1)), 0.9) == doctest::Approx(0.6).epsilon(1e-14));
}

TEST_CASE("TD(0) update") {
    TDState state(LinearFunctional(FeatureBasis::tabular(1)), StepSchedule::constant(0.1), 0.9);
    state = td0_update(state, self_loop(0.0));
    CHECK(state.model.theta[0] == 0.0);
    state = td0_update(state, self_loop(1.0));
    CHECK(state.model.theta[0] == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(state.steps == 2);
}

TEST_CASE("TD(0) on a self-loop converges to the geometric series") {
    const double c = 0.7;
    const double gamma = 0.9;
    TDState state(LinearFunctional(FeatureBasis::tabular(1)), StepSchedule::constant(0.5), gamma);
    for (int k = 0; k < 2000; ++k) state = td0_update(state, self_loop(c));
    const TabularMDP mdp({Matrix::Ones(1, 1)}, Matrix::Constant(1, 1, c));
    const double exact = policy_evaluation(mdp, Matrix::Ones(1, 1), gamma)[0];
    CHECK(exact == doctest::Approx(c / (1.0 - gamma)).epsilon(1e-12));
    CHECK(std::abs(state.model.theta[0] - exact) <= 1e-3);
}

TEST_CASE("step schedules") {
    CHECK(StepSchedule::constant(0.3).at(100000) == 0.3);
    const auto rm = StepSchedule::robbins_monro(2.0, 4.0);
    for (std::size_t k : {0u, 1u, 10u, 1000u}) CHECK(rm.at(k) == doctest::Approx(2.0 / (k + 4.0)).epsilon(1e-14));
    CHECK_THROWS_AS(TDState(LinearFunctional(FeatureBasis::tabular(1)), StepSchedule::constant(0.0), 0.9), ConfigError);
}

TEST_CASE("importance ratios") {
    const auto uniform = StochasticPolicy::uniform(3);
    for (int s = 0; s < 3; ++s) {
        for (ActionId a = 0; a < 3; ++a) CHECK(importance_ratio(uniform, uniform, index_state(s), a) == 1.0);
    }

    const StochasticPolicy target(2, [](const StateVector&) { return Vector{{0.8, 0.2}}; });
    const StochasticPolicy behavior(2, [](const StateVector&) { return Vector{{0.2, 0.8}}; });
    CHECK(importance_ratio(target, behavior, index_state(0), 0) == doctest::Approx(4.0).epsilon(1e-14));
    CHECK(importance_ratio(target, behavior, index_state(0), 0, 3.0) == 3.0);
    CHECK(importance_ratio(StochasticPolicy::constant(2, 1), behavior, index_state(0), 0) == 0.0);

    CHECK_THROWS_WITH_AS(importance_ratio(uniform, StochasticPolicy::constant(3, 0), index_state(0), 2),
                         doctest::Contains("positivity violated at"), DatasetError);
}

TEST_CASE("off-policy update reduces to the on-policy update at ratio one") {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> normal;
    const auto uniform = StochasticPolicy::uniform(2);
    TDState on(LinearFunctional(FeatureBasis::tabular(4)), StepSchedule{0.3, 50.0}, 0.8);
    TDState off = on;
    std::uniform_int_distribution<int> cell(0, 3);
    for (int k = 0; k < 200; ++k) {
        const auto x = sample(index_state(cell(rng)), k % 2, normal(rng), index_state(cell(rng)));
        on = td0_update(on, x);
        off = td0_offpolicy_update(off, x, uniform, uniform);
        CHECK(on.model.theta == off.model.theta);
    }

    // Zero target mass on the observed action leaves theta alone.
    const auto before = off.model.theta;
    off = td0_offpolicy_update(off, sample(index_state(1), 0, 5.0, index_state(2)), StochasticPolicy::constant(2, 1),
                               uniform);
    CHECK(off.model.theta == before);
}

TEST_CASE("ratio cap clips and counts") {
    const StochasticPolicy behavior(2, [](const StateVector&) { return Vector{{0.01, 0.99}}; });
    TDState state(LinearFunctional(FeatureBasis::tabular(1)), StepSchedule::constant(0.01), 0.5);
    state.ratio_cap = 10.0;
    state = td0_offpolicy_update(state, self_loop(1.0), StochasticPolicy::constant(2, 0), behavior);
    CHECK(state.clipped == 1);
    CHECK(state.model.theta[0] == doctest::Approx(0.01 * 10.0).epsilon(1e-14));
}

TEST_CASE("TD reports divergence") {
    TDState state(LinearFunctional(FeatureBasis::tabular(1)), StepSchedule::constant(30.0), 0.9);
    CHECK_THROWS_AS(
        [&] {
            for (int k = 0; k < 1000; ++k) state = td0_update(state, self_loop(1.0));
        }(),
        DivergenceError);
}

TEST_CASE("squared-error Monte-Carlo loss") {
    const LinearFunctional constant(Vector::Constant(1, 2.5), FeatureBasis::tabular(1));
    const std::vector<double> same{2.5, 2.5, 2.5};
    CHECK(se_mc_loss(constant, index_state(0), same) == 0.0);

    const LinearFunctional zero(FeatureBasis::tabular(1));
    const std::vector<double> pm{1.0, -1.0};
    CHECK(se_mc_loss(zero, index_state(0), pm) == 1.0);

    const LinearFunctional one(Vector::Ones(1), FeatureBasis::tabular(1));
    const std::vector<double> ones{1.0, 1.0, 1.0};
    CHECK(se_mc_loss(one, index_state(0), ones) == 0.0);

    CHECK_THROWS_AS(se_mc_loss(zero, index_state(0), std::vector<double>{}), ConfigError);
}

TEST_CASE("off-policy TD recovers the target value on a small chain") {
    std::mt19937_64 rng(23);
    const auto mdp = oracle::random_mdp(3, 2, rng);
    const ChainEnv env(mdp);
    const auto behavior = StochasticPolicy::uniform(2);
    const StochasticPolicy target = StochasticPolicy::tabular(Matrix{{0.9, 0.1}, {0.2, 0.8}, {0.5, 0.5}});
    const double gamma = 0.8;
    const auto ds = generate_dataset(env, behavior, 200, 50, 5);

    TDRunConfig config;
    config.schedule = StepSchedule{0.05, 20000.0};
    config.passes = 5;
    const auto fit = run_td(ds, FeatureBasis::tabular(3), gamma, config, &target, &behavior);
    const Vector exact = policy_evaluation(mdp, target, gamma);
    CHECK((fit.model.theta - exact).cwiseAbs().maxCoeff() <= 0.1);

    const auto on = run_td(ds, FeatureBasis::tabular(3), gamma, config);
    const Vector uniform_value = policy_evaluation(mdp, behavior, gamma);
    CHECK((on.model.theta - uniform_value).cwiseAbs().maxCoeff() <= 0.1);

    CHECK_THROWS_AS(run_td(ds, FeatureBasis::tabular(3), gamma, config, &target, nullptr), ConfigError);
}
