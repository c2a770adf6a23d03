#include "proxdtr/core.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

using namespace proxdtr;

namespace {

Trajectory make_trajectory(std::vector<double> states, std::vector<ActionId> actions, std::vector<double> rewards) {
    Trajectory traj;
    for (double s : states) traj.states.push_back(Vector::Constant(1, s));
    traj.actions = std::move(actions);
    traj.rewards = std::move(rewards);
    return traj;
}

double loop_return(const std::vector<double>& rewards, double gamma) {
    double total = 0.0;
    double weight = 1.0;
    for (double r : rewards) {
        total += weight * r;
        weight *= gamma;
    }
    return total;
}

}  // namespace

TEST_CASE("discounted return") {
    CHECK(discounted_return(make_trajectory({0, 0, 0, 0}, {0, 0, 0}, {0, 0, 0}), 0.7) == 0.0);
    CHECK(discounted_return(make_trajectory({0, 0, 0, 0}, {0, 0, 0}, {1, 1, 1}), 0.0) == 1.0);
    const auto traj = make_trajectory({0, 0, 0, 0}, {0, 0, 0}, {1, 2, 3});
    CHECK(discounted_return(traj, 0.5) == doctest::Approx(2.75).epsilon(1e-15));
    CHECK(discounted_return(traj, 0.5) == doctest::Approx(loop_return({1, 2, 3}, 0.5)).epsilon(1e-15));

    Trajectory empty;
    empty.states.push_back(Vector::Zero(1));
    CHECK_THROWS_WITH_AS(discounted_return(empty, 0.5), "no rewards", DatasetError);
}

TEST_CASE("discounted return is linear in the rewards") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> normal;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> rewards(8);
        for (auto& r : rewards) r = normal(rng);
        const double scale = normal(rng);
        std::vector<double> scaled = rewards;
        for (auto& r : scaled) r *= scale;
        std::vector<double> states(9, 0.0);
        std::vector<ActionId> actions(8, 0);
        const double base = discounted_return(make_trajectory(states, actions, rewards), 0.9);
        const double other = discounted_return(make_trajectory(states, actions, scaled), 0.9);
        CHECK(other == doctest::Approx(scale * base).epsilon(1e-12));
    }
}

TEST_CASE("basis evaluation") {
    const auto tab = FeatureBasis::tabular(3);
    CHECK(tab.evaluate(index_state(1)) == Vector::Unit(3, 1));
    CHECK_THROWS_WITH_AS(tab.evaluate(index_state(3)), "unenumerated state", DatasetError);

    const auto poly = FeatureBasis::polynomial(1, 1);
    const Vector phi = poly.evaluate(Vector::Constant(1, 2.0));
    REQUIRE(phi.size() == 2);
    CHECK(phi[0] == 1.0);
    CHECK(phi[1] == 2.0);

    const auto radial = FeatureBasis::radial(Matrix::Zero(1, 1), 1.0);
    const Vector bump = radial.evaluate(Vector::Zero(1));
    REQUIRE(bump.size() == 1);
    CHECK(bump[0] == 1.0);
}

TEST_CASE("polynomial basis uses per-coordinate powers after standardization") {
    Vector center(2), scale(2);
    center << 1.0, -1.0;
    scale << 2.0, 0.5;
    const auto basis = FeatureBasis::polynomial(2, 2, center, scale);
    Vector s(2);
    s << 5.0, 0.0;
    const Vector phi = basis.evaluate(s);
    // Standardized state (2, 2).
    CHECK(phi.size() == 5);
    CHECK(phi.sum() == doctest::Approx(1.0 + 2.0 + 4.0 + 2.0 + 4.0));
}

TEST_CASE("state-action basis places the state block at the action") {
    const auto basis = FeatureBasis::tabular(4).with_actions(3);
    CHECK(basis.dimension() == 12);
    for (std::size_t s = 0; s < 4; ++s) {
        for (ActionId a = 0; a < 3; ++a) {
            const Vector phi = basis.evaluate(index_state(s), a);
            CHECK(phi.sum() == 1.0);
            CHECK(phi[static_cast<Eigen::Index>(a * 4 + s)] == 1.0);
        }
    }
}

TEST_CASE("tabular linear functional is a lookup table") {
    std::mt19937_64 rng(11);
    std::normal_distribution<double> normal;
    Vector theta(6);
    for (auto& x : theta) x = normal(rng);
    const LinearFunctional v(theta, FeatureBasis::tabular(6));
    for (std::size_t s = 0; s < 6; ++s) CHECK(v.value(index_state(s)) == theta[static_cast<Eigen::Index>(s)]);
}

TEST_CASE("dataset validation") {
    const auto full = make_trajectory({0, 1, 0, 1}, {0, 1, 2}, {1, 0, 1});
    const OfflineDataset ds({full}, 1, 3);
    const auto report = validate_dataset(ds);
    CHECK(report.clean());
    CHECK(report.transition_count == 3);
    CHECK(report.action_frequency[1] == doctest::Approx(1.0 / 3.0));

    const OfflineDataset missing({full}, 1, 4);
    const auto gap = validate_dataset(missing);
    REQUIRE(gap.unobserved_actions.size() == 1);
    CHECK(gap.unobserved_actions[0] == 3);
    REQUIRE(gap.warnings.size() == 1);
    CHECK(gap.warnings[0].find('3') != std::string::npos);

    const auto bad = make_trajectory({0, 1, 2, 3, 4}, {0, 1, 0}, {0, 0, 0});
    CHECK_THROWS_AS(OfflineDataset({bad}, 1, 2), DatasetError);
    try {
        OfflineDataset({bad}, 1, 2);
    } catch (const DatasetError& e) {
        CHECK(std::string(e.what()).find("length mismatch") != std::string::npos);
    }

    auto nan = full;
    nan.rewards[1] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(OfflineDataset({nan}, 1, 3), DatasetError);
    auto out_of_range = full;
    out_of_range.actions[0] = 3;
    CHECK_THROWS_AS(OfflineDataset({out_of_range}, 1, 3), DatasetError);
}

TEST_CASE("dataset subsets and transitions") {
    std::vector<Trajectory> trajs;
    for (int i = 0; i < 4; ++i) trajs.push_back(make_trajectory({double(i), 0, 1}, {0, 1}, {double(i), 0}));
    const OfflineDataset ds(trajs, 1, 2);
    CHECK(ds.transition_count() == 8);
    const auto samples = ds.transitions();
    CHECK(samples[2].reward == 1.0);
    CHECK(samples[2].state[0] == 1.0);
    const std::vector<std::size_t> pick{1, 3};
    const auto sub = ds.subset(pick);
    CHECK(sub.size() == 2);
    CHECK(sub.trajectories()[1].rewards[0] == 3.0);
}

TEST_CASE("policies produce probability vectors") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> normal;
    const auto deterministic = StochasticPolicy::deterministic(
        4, [](const StateVector& s) { return static_cast<ActionId>(s[0] > 0.0 ? 3 : 1); });
    const auto soft = StochasticPolicy::epsilon_soft(deterministic, 0.2);
    for (int i = 0; i < 100; ++i) {
        const StateVector s = Vector::Constant(1, normal(rng));
        for (const auto* pol : {&deterministic, &soft}) {
            const Vector p = pol->pmf(s);
            CHECK((p.array() >= 0.0).all());
            CHECK(std::abs(p.sum() - 1.0) <= 1e-9);
        }
        CHECK(soft.probability(s, deterministic.greedy(s)) == doctest::Approx(0.85));
    }
    CHECK(StochasticPolicy::uniform(5).pmf(Vector::Zero(1)).isApprox(Vector::Constant(5, 0.2)));
    CHECK(StochasticPolicy::constant(3, 2).pmf(Vector::Zero(1)) == Vector::Unit(3, 2));

    const StochasticPolicy broken(2, [](const StateVector&) { return Vector::Constant(2, 0.7); });
    CHECK_THROWS_AS(broken.pmf(Vector::Zero(1)), Error);
}

TEST_CASE("argmax ties go to the lowest index") {
    Vector v(4);
    v << 1.0, 3.0, 3.0, 2.0;
    CHECK(argmax_lowest(v) == 1);
    v << 1.0, 3.0, 3.0 + 1e-12, 2.0;
    CHECK(argmax_lowest(v) == 2);
    CHECK(argmax_lowest(v, 1e-9) == 1);
}

TEST_CASE("discount factor range") {
    CHECK_NOTHROW(require_discount(0.0));
    CHECK_NOTHROW(require_discount(0.99));
    CHECK_THROWS_AS(require_discount(1.0), ConfigError);
    CHECK_THROWS_AS(require_discount(-0.1), ConfigError);
}

TEST_CASE("seed mixing separates streams") {
    CHECK(mix_seed(1, 0) != mix_seed(1, 1));
    CHECK(mix_seed(1, 0) != mix_seed(2, 0));
    CHECK(mix_seed(7, 3) == mix_seed(7, 3));
}
