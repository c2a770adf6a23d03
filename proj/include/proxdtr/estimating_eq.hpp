#pragma once

#include "proxdtr/core.hpp"

#include <optional>
#include <string>
#include <vector>

namespace proxdtr {

// ---------------------------------------------------------------------------
// Greedy gradient Q-learning

/// Q(s, a) = theta^T phi(s, a) over a state-action basis.
struct GGQModel {
    LinearFunctional q;
    double gamma = 0.9;

    Vector action_values(const StateVector& s) const { return q.action_values(s); }
    ActionId greedy(const StateVector& s) const { return argmax_lowest(action_values(s)); }
    StochasticPolicy policy() const;
};

/// r + gamma max_a' Q(s', a') - Q(s, a).
double ggq_td_error(const GGQModel& model, const TransitionSample& sample);

/// (1/N) sum over all transitions of delta * phi(s, a).
Vector ggq_residual(const GGQModel& model, const OfflineDataset& ds);

struct GGQConfig {
    double tol = 1e-8;
    std::size_t max_iter = 500;
    /// Fraction of the Newton step taken per iteration.
    double damping = 0.5;
};

struct GGQFit {
    GGQModel model;
    bool converged = false;
    std::size_t iterations = 0;
    double residual_norm = 0.0;
    std::vector<std::string> warnings;
};

/// Damped Newton iteration on the piecewise-linear estimating equation: the
/// Jacobian is taken with the argmax at each successor state held fixed.
/// Returns the iterate with the smallest residual and a warning when tol is
/// not reached. Positivity warnings from the dataset are propagated.
GGQFit solve_ggq(const OfflineDataset& ds, const FeatureBasis& basis, double gamma, const GGQConfig& config = {});

// ---------------------------------------------------------------------------
// Propensity scores

class PropensityModel {
public:
    enum class Kind { Known, EmpiricalTabular, MultinomialLogistic };

    static PropensityModel known(StochasticPolicy policy);

    Kind kind() const { return kind_; }
    double floor() const { return floor_; }
    std::size_t action_count() const;
    Vector pmf(const StateVector& s) const;
    double probability(const StateVector& s, ActionId a) const { return pmf(s)[a]; }
    StochasticPolicy as_policy() const;

    /// Cells (tabular) or training points (logistic) where the floor or the
    /// uniform fallback was applied.
    const std::vector<std::string>& flags() const { return flags_; }

    const Matrix& table() const { return table_; }
    const Matrix& coefficients() const { return coef_; }

private:
    friend PropensityModel estimate_propensity(const OfflineDataset&, Kind, const FeatureBasis&, double);

    PropensityModel(Kind kind, double floor) : kind_(kind), floor_(floor) {}

    Kind kind_;
    double floor_;
    std::optional<StochasticPolicy> known_;
    std::optional<FeatureBasis> basis_;
    Matrix table_;  // cells x actions
    Matrix coef_;   // actions x features (row 0 is the reference class)
    std::vector<std::string> flags_;
};

/// Raise every entry to at least `floor`, taking the mass from entries above
/// the floor in proportion to their excess. Entries already above the floor
/// keep their ratios of excess; a pmf with all entries >= floor is unchanged.
Vector apply_floor(const Vector& pmf, double floor);

/// EmpiricalTabular needs a tabular basis (cells). MultinomialLogistic fits
/// softmax regression on `basis` features by Newton's method. Known is not
/// estimable and throws.
PropensityModel estimate_propensity(const OfflineDataset& ds, PropensityModel::Kind kind, const FeatureBasis& basis,
                                    double floor = 0.01);

// ---------------------------------------------------------------------------
// V-learning

/// V(s) = theta^T phi(s).
using VLearnModel = LinearFunctional;

/// Lambda_n(pi, theta) = (1/n) sum_i sum_t (pi/mu)(r + gamma V(s') - V(s)) phi(s),
/// with n the number of trajectories.
Vector vlearn_residual(const StochasticPolicy& policy, const VLearnModel& model, const OfflineDataset& ds,
                       const PropensityModel& propensity, double gamma);

struct VLearnConfig {
    double ridge = 1e-8;
    /// Softmax class only: coordinate-ascent controls.
    double initial_step = 1.0;
    double min_step = 1e-3;
    std::size_t max_sweeps = 50;
};

struct VLearnSolve {
    VLearnModel model;
    std::vector<std::string> warnings;
};

/// Solves Lambda_n(pi, theta) = 0 for linear V (a p x p linear system).
/// A singular system is ridge-regularized and reported.
VLearnSolve solve_vlearn_theta(const StochasticPolicy& policy, const OfflineDataset& ds, const FeatureBasis& basis,
                               const PropensityModel& propensity, double gamma, double ridge = 1e-8);

/// Mean of V_theta over the observed initial states.
double initial_state_value(const VLearnModel& model, const OfflineDataset& ds);

struct VLearnResult {
    VLearnModel model;
    StochasticPolicy policy;
    std::size_t chosen = 0;
    std::vector<double> candidate_values;
    std::vector<std::string> warnings;
};

/// Finite policy class: the candidate with the largest estimated initial-state
/// value; ties keep the earliest candidate.
VLearnResult solve_vlearning(const OfflineDataset& ds, const std::vector<StochasticPolicy>& candidates,
                             const FeatureBasis& basis, double gamma, const PropensityModel& propensity,
                             const VLearnConfig& config = {});

/// pi(a|s) proportional to exp(beta_a^T psi(s)), beta_0 = 0.
struct SoftmaxPolicyClass {
    FeatureBasis features;
    std::size_t action_count = 0;

    std::size_t parameter_count() const { return (action_count - 1) * features.dimension(); }
    StochasticPolicy make(const Vector& beta) const;
};

struct SoftmaxVLearnResult {
    VLearnModel model;
    Vector beta;
    StochasticPolicy policy;
    double value = 0.0;
    std::size_t sweeps = 0;
    std::vector<std::string> warnings;
};

/// Coordinate ascent on the estimated value over the softmax parameters,
/// starting from beta = 0 (the uniform policy).
SoftmaxVLearnResult solve_vlearning_softmax(const OfflineDataset& ds, const SoftmaxPolicyClass& policy_class,
                                            const FeatureBasis& basis, double gamma,
                                            const PropensityModel& propensity, const VLearnConfig& config = {});

}  // namespace proxdtr
