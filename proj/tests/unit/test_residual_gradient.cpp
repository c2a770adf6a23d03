#include "proxdtr/residual_gradient.hpp"
#include "proxdtr/simulators.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <random>

using namespace proxdtr;

namespace {

Trajectory single_step(std::size_t s, double r, std::size_t next) {
    Trajectory t;
    t.states = {index_state(s), index_state(next)};
    t.actions = {0};
    t.rewards = {r};
    return t;
}

// One action; every state moves to each state w.p. 1/2 and earns 1 on entering state 1.
TabularMDP coin_flip_mdp() {
    Matrix P = Matrix::Constant(2, 2, 0.5);
    Matrix R(2, 2);
    R << 0, 1, 0, 1;
    return TabularMDP({P}, std::vector<Matrix>{R});
}

// Every (s, s') pair of the coin-flip model once, so empirical averages equal exact expectations.
OfflineDataset coin_flip_enumeration() {
    return OfflineDataset({single_step(0, 0, 0), single_step(0, 1, 1), single_step(1, 0, 0), single_step(1, 1, 1)}, 1, 1);
}

}  // namespace

TEST_CASE("empirical MSBE") {
    const LinearFunctional zero(FeatureBasis::tabular(2));
    CHECK(empirical_msbe(zero, OfflineDataset({single_step(0, 0, 1), single_step(1, 0, 0)}, 1, 1), 0.9) == 0.0);
    CHECK(empirical_msbe(zero, OfflineDataset({single_step(0, 1, 1)}, 1, 1), 0.0) == 1.0);

    // Deterministic chain 0 -> 1 -> 1 with rewards 1 and 0.5.
    Matrix P(2, 2);
    P << 0, 1, 0, 1;
    Matrix R(2, 1);
    R << 1.0, 0.5;
    const TabularMDP mdp({P}, R);
    const Vector v = policy_evaluation(mdp, Matrix::Ones(2, 1), 0.9);
    const LinearFunctional exact(v, FeatureBasis::tabular(2));
    const OfflineDataset ds({single_step(0, 1.0, 1), single_step(1, 0.5, 1)}, 1, 1);
    CHECK(empirical_msbe(exact, ds, 0.9) <= 1e-12);
}

TEST_CASE("residual-gradient update") {
    const LinearFunctional zero(FeatureBasis::tabular(2));
    Vector theta(2);
    theta << 1.0, 0.0;
    const LinearFunctional fixed(theta, FeatureBasis::tabular(2));
    // r + gamma V(s') - V(s) = 1 + 0 - 1 = 0.
    CHECK(rg_update(fixed, single_step(0, 1.0, 1).transition(0), 0.1, 0.9).theta == theta);

    const Vector moved = rg_update(zero, single_step(0, 1.0, 1).transition(0), 0.1, 0.9).theta;
    CHECK(moved[0] == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(moved[1] == doctest::Approx(-0.09).epsilon(1e-15));

    const LinearFunctional one(FeatureBasis::tabular(1));
    CHECK(rg_update(one, single_step(0, 1.0, 0).transition(0), 0.1, 0.9).theta[0] == doctest::Approx(0.01).epsilon(1e-14));
}

TEST_CASE("residual-gradient update is the exact per-sample gradient") {
    std::mt19937_64 rng(31);
    std::normal_distribution<double> normal;
    const auto basis = FeatureBasis::polynomial(2, 2);
    for (int trial = 0; trial < 30; ++trial) {
        Vector theta(static_cast<Eigen::Index>(basis.dimension()));
        for (auto& x : theta) x = normal(rng);
        TransitionSample x{Vector{{normal(rng), normal(rng)}}, 0, normal(rng), Vector{{normal(rng), normal(rng)}}};
        const double gamma = 0.9;
        auto half_square = [&](const Vector& t) {
            const LinearFunctional f(t, basis);
            const double residual = x.reward + gamma * f.value(x.next_state) - f.value(x.state);
            return 0.5 * residual * residual;
        };
        const double alpha = 0.01;
        const Vector step = (theta - rg_update(LinearFunctional(theta, basis), x, alpha, gamma).theta) / alpha;
        CHECK(oracle::relative_error(step, oracle::central_difference(half_square, theta)) <= 1e-6);
    }
}

TEST_CASE("fit_rg on a deterministic model recovers the policy value") {
    std::mt19937_64 rng(37);
    const std::size_t S = 5;
    Matrix P = Matrix::Zero(S, S);
    Matrix R(S, 1);
    std::uniform_real_distribution<double> reward(-1.0, 1.0);
    std::vector<Trajectory> trajs;
    for (std::size_t s = 0; s < S; ++s) {
        P(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>((s * 3 + 1) % S)) = 1.0;
        R(static_cast<Eigen::Index>(s), 0) = reward(rng);
        trajs.push_back(single_step(s, R(static_cast<Eigen::Index>(s), 0), (s * 3 + 1) % S));
    }
    const TabularMDP mdp({P}, R);
    const OfflineDataset ds(trajs, 1, 1);
    const double gamma = 0.9;
    const auto fit = fit_rg(ds, FeatureBasis::tabular(S), gamma, RGConfig{std::nullopt, 500000, 1e-10});
    CHECK(fit.converged);
    const Vector exact = policy_evaluation(mdp, Matrix::Ones(S, 1), gamma);
    CHECK((fit.model.theta - exact).cwiseAbs().maxCoeff() <= 1e-3);
    const Vector residual = mdp.policy_reward(Matrix::Ones(S, 1)) +
                            gamma * mdp.policy_transition(Matrix::Ones(S, 1)) * fit.model.theta - fit.model.theta;
    CHECK(residual.cwiseAbs().maxCoeff() <= 1e-3);
    CHECK(fit.msbe == doctest::Approx(empirical_msbe(fit.model, ds, gamma)).epsilon(1e-9));
}

TEST_CASE("fit_rg with zero rewards stays at zero") {
    const OfflineDataset ds({single_step(0, 0, 1), single_step(1, 0, 2), single_step(2, 0, 0)}, 1, 1);
    const auto fit = fit_rg(ds, FeatureBasis::tabular(3), 0.9);
    CHECK(fit.converged);
    CHECK(fit.model.theta.isZero());
    CHECK(fit.msbe == 0.0);
}

TEST_CASE("fit_rg on a stochastic model minimizes MSBE plus variance") {
    const auto mdp = coin_flip_mdp();
    const auto ds = coin_flip_enumeration();
    const double gamma = 0.9;
    const Matrix policy = Matrix::Ones(2, 1);
    const auto fit = fit_rg(ds, FeatureBasis::tabular(2), gamma, RGConfig{std::nullopt, 500000, 1e-12});
    REQUIRE(fit.converged);

    const Vector exact = policy_evaluation(mdp, policy, gamma);
    const auto at_fit = double_sampling_decomposition(mdp, fit.model.theta, gamma, policy);
    const auto at_exact = double_sampling_decomposition(mdp, exact, gamma, policy);
    CHECK(at_exact.population_msbe <= 1e-20);
    // The enumerated dataset weights states uniformly, so its MSBE is the exact expectation.
    CHECK(fit.msbe == doctest::Approx(at_fit.expected_empirical_msbe).epsilon(1e-9));
    CHECK(at_fit.population_msbe >= at_exact.population_msbe);
    CHECK(at_fit.population_msbe > 1e-4);
    CHECK((fit.model.theta - exact).cwiseAbs().maxCoeff() > 1e-2);

    // The fit is stationary for the expected empirical MSBE.
    auto expected = [&](const Vector& v) {
        return double_sampling_decomposition(mdp, v, gamma, policy).expected_empirical_msbe;
    };
    CHECK(oracle::central_difference(expected, fit.model.theta).norm() <= 1e-6);
}

TEST_CASE("double-sampling decomposition") {
    // Deterministic transitions have no variance.
    std::mt19937_64 rng(41);
    Matrix P(3, 3);
    P << 0, 1, 0, 0, 0, 1, 1, 0, 0;
    const TabularMDP det({P}, Matrix{{0.3}, {-0.2}, {1.0}});
    const auto terms = double_sampling_decomposition(det, Vector{{1.0, -1.0, 0.5}}, 0.9, Matrix::Ones(3, 1));
    CHECK(terms.variance_term == 0.0);
    CHECK(terms.population_msbe == doctest::Approx(terms.expected_empirical_msbe).epsilon(1e-14));

    // One state, two successors w.p. 1/2 with values 0 and 2, zero reward.
    const TabularMDP fork({Matrix{{0.0, 0.5, 0.5}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}}}, Matrix::Zero(3, 1));
    const Vector v{{0.0, 0.0, 2.0}};
    const auto two_point = double_sampling_decomposition(fork, v, 0.9, Matrix::Ones(3, 1), Vector{{1.0, 0.0, 0.0}});
    CHECK(two_point.variance_term == doctest::Approx(0.81).epsilon(1e-14));

    // Homogeneity: scaling rewards and values by c scales every term by c^2.
    for (int trial = 0; trial < 10; ++trial) {
        const auto mdp = oracle::random_mdp(4, 2, rng);
        Vector values = Vector::Random(4);
        Matrix policy = Matrix::Random(4, 2).cwiseAbs();
        for (Eigen::Index s = 0; s < 4; ++s) policy.row(s) /= policy.row(s).sum();
        const auto base = double_sampling_decomposition(mdp, values, 0.8, policy);
        const double c = -2.5;
        const TabularMDP scaled({mdp.transition(0), mdp.transition(1)}, c * mdp.expected_reward());
        const auto big = double_sampling_decomposition(scaled, c * values, 0.8, policy);
        CHECK(big.population_msbe == doctest::Approx(c * c * base.population_msbe).epsilon(1e-10));
        CHECK(big.expected_empirical_msbe == doctest::Approx(c * c * base.expected_empirical_msbe).epsilon(1e-10));
        CHECK(big.variance_term == doctest::Approx(c * c * base.variance_term).epsilon(1e-10));
        CHECK(base.expected_empirical_msbe ==
              doctest::Approx(base.population_msbe + base.variance_term).epsilon(1e-12));
        CHECK(base.population_msbe == doctest::Approx(population_msbe(mdp, values, 0.8, policy, {})).epsilon(1e-12));
    }
}

TEST_CASE("optimality MSBE vanishes at the optimal values") {
    std::mt19937_64 rng(43);
    const auto mdp = oracle::random_mdp(4, 3, rng);
    const auto vi = value_iteration(mdp, 0.9, 1e-12);
    CHECK(optimality_msbe(mdp, vi.values, 0.9, {}) <= 1e-20);
    CHECK(optimality_msbe(mdp, Vector::Zero(4), 0.9, {}) > 0.0);
}
