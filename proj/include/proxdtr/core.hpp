#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

/// Offline policy learning for infinite-horizon treatment regimes.
namespace proxdtr {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Dense state features. Tabular problems encode state `s` as the 1-vector (s).
using StateVector = Eigen::VectorXd;

/// Zero-based action index. User-facing output shifts to one-based.
using ActionId = int;

using Rng = std::mt19937_64;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input data (structure, NaN, ranges).
class DatasetError : public Error {
public:
    using Error::Error;
};

/// Bad configuration or argument values.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// An iterative method blew up (semi-gradient divergence and similar).
class DivergenceError : public Error {
public:
    using Error::Error;
};

/// Throws ConfigError unless 0 <= gamma < 1.
void require_discount(double gamma);

/// Index of the largest entry. Entries within `tie_tol` of the maximum count
/// as ties, and ties go to the lowest index.
ActionId argmax_lowest(const Vector& values, double tie_tol = 0.0);

/// SplitMix64 step, used to derive independent per-replication seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

struct TransitionSample {
    StateVector state;
    ActionId action = 0;
    double reward = 0.0;
    StateVector next_state;
};

/// One patient trajectory: T+1 states, T actions, T rewards. Reward t is
/// earned moving from states[t] to states[t+1].
struct Trajectory {
    std::vector<StateVector> states;
    std::vector<ActionId> actions;
    std::vector<double> rewards;

    std::size_t transition_count() const { return actions.size(); }
    TransitionSample transition(std::size_t t) const;
};

/// Sum_t gamma^t R^t over the trajectory's rewards.
double discounted_return(const Trajectory& traj, double gamma);

struct ValidationReport {
    /// Empirical frequency of each action over all transitions.
    std::vector<double> action_frequency;
    /// Actions never observed (positivity warnings).
    std::vector<ActionId> unobserved_actions;
    std::vector<std::string> warnings;
    std::size_t trajectory_count = 0;
    std::size_t transition_count = 0;

    bool clean() const { return warnings.empty(); }
};

/// Checks structure and values. Length mismatches, NaN/infinite entries,
/// wrong state dimension and out-of-range actions throw DatasetError;
/// positivity problems are only reported as warnings.
ValidationReport validate_dataset(std::span<const Trajectory> trajectories, std::size_t state_dim,
                                  std::size_t action_count);

/// n i.i.d. trajectories. Construction validates, so a live object is
/// always structurally sound.
class OfflineDataset {
public:
    OfflineDataset(std::vector<Trajectory> trajectories, std::size_t state_dim, std::size_t action_count);

    const std::vector<Trajectory>& trajectories() const { return trajectories_; }
    std::size_t size() const { return trajectories_.size(); }
    std::size_t state_dim() const { return state_dim_; }
    std::size_t action_count() const { return action_count_; }
    std::size_t transition_count() const;

    /// All transitions, trajectory-major.
    std::vector<TransitionSample> transitions() const;

    /// Subset by trajectory index (cross-validation folds).
    OfflineDataset subset(std::span<const std::size_t> indices) const;

private:
    std::vector<Trajectory> trajectories_;
    std::size_t state_dim_;
    std::size_t action_count_;
};

ValidationReport validate_dataset(const OfflineDataset& ds);

/// Feature map phi(s) or phi(s, a).
///
/// State-action features are built by placing the state features in the
/// block of the chosen action (a one-hot cross product), so a tabular
/// indicator over (s, a) is one-hot at cell a * S + s. The `action_count`
/// of a state-only basis is zero.
///
/// An optional affine standardization (x - center) / scale is applied to the
/// state before polynomial or radial features.
class FeatureBasis {
public:
    enum class Kind { TabularIndicator, Polynomial, RadialGrid };

    /// One-hot over the enumerated states. Lookup is by exact equality.
    static FeatureBasis tabular(std::vector<StateVector> enumeration);
    /// One-hot over the scalar index states (0), (1), ..., (count - 1).
    static FeatureBasis tabular(std::size_t count);
    /// Intercept plus per-coordinate powers 1..degree (no cross terms).
    static FeatureBasis polynomial(std::size_t state_dim, int degree, Vector center = {}, Vector scale = {});
    /// Gaussian bumps exp(-|x - c|^2 / (2 h^2)), one per row of `centers`.
    static FeatureBasis radial(Matrix centers, double bandwidth, Vector center = {}, Vector scale = {});

    /// Same state features, replicated per action block.
    FeatureBasis with_actions(std::size_t action_count) const;

    Kind kind() const { return kind_; }
    std::size_t state_dim() const { return state_dim_; }
    std::size_t action_count() const { return action_count_; }
    bool is_state_action() const { return action_count_ > 0; }
    int degree() const { return degree_; }
    const std::vector<StateVector>& enumeration() const { return enumeration_; }
    const Matrix& centers() const { return centers_; }
    double bandwidth() const { return bandwidth_; }
    const Vector& center() const { return center_; }
    const Vector& scale() const { return scale_; }

    /// Dimension of the state block.
    std::size_t state_features() const;
    /// Total output dimension (state block times action count when paired).
    std::size_t dimension() const;

    /// Cell index of an enumerated state, or nullopt.
    std::optional<std::size_t> cell_of(const StateVector& state) const;

    Vector evaluate(const StateVector& state, std::optional<ActionId> action = std::nullopt) const;

private:
    FeatureBasis() = default;
    Vector state_block(const StateVector& state) const;
    Vector standardized(const StateVector& state) const;

    Kind kind_ = Kind::Polynomial;
    std::size_t state_dim_ = 0;
    std::size_t action_count_ = 0;
    int degree_ = 1;
    std::vector<StateVector> enumeration_;
    Matrix centers_;
    double bandwidth_ = 1.0;
    Vector center_;
    Vector scale_;
};

/// theta^T phi(.)
struct LinearFunctional {
    Vector theta;
    FeatureBasis basis;

    LinearFunctional(Vector theta, FeatureBasis basis);
    /// theta = 0.
    explicit LinearFunctional(FeatureBasis basis);

    double value(const StateVector& state) const;
    double value(const StateVector& state, ActionId action) const;
    /// Values over all actions of a state-action basis.
    Vector action_values(const StateVector& state) const;
};

/// Map from states to probability vectors over actions. The pmf is checked
/// (nonnegative, sums to one within 1e-9) on every call.
class StochasticPolicy {
public:
    using PmfFn = std::function<Vector(const StateVector&)>;

    StochasticPolicy(std::size_t action_count, PmfFn pmf);

    static StochasticPolicy uniform(std::size_t action_count);
    /// Always the same action.
    static StochasticPolicy constant(std::size_t action_count, ActionId action);
    static StochasticPolicy deterministic(std::size_t action_count, std::function<ActionId(const StateVector&)> rule);
    /// Rows of `table` are pmfs for the tabular states 0..S-1 (scalar index states).
    static StochasticPolicy tabular(Matrix table);
    /// Mixture (1 - epsilon) * base + epsilon * uniform.
    static StochasticPolicy epsilon_soft(const StochasticPolicy& base, double epsilon);

    std::size_t action_count() const { return action_count_; }
    Vector pmf(const StateVector& state) const;
    double probability(const StateVector& state, ActionId action) const;
    ActionId sample(const StateVector& state, Rng& rng) const;
    ActionId greedy(const StateVector& state) const;

    /// S x A table of the policy on scalar-index states 0..S-1.
    Matrix table(std::size_t state_count) const;

private:
    std::size_t action_count_;
    PmfFn pmf_;
};

/// Throws Error unless `pmf` is a probability vector within `tol`.
void check_pmf(const Vector& pmf, double tol = 1e-9);

/// Convenience: the scalar index state (s).
StateVector index_state(std::size_t s);

}  // namespace proxdtr
