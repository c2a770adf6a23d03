#include "proxdtr/core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace proxdtr {

void require_discount(double gamma) {
    if (!(gamma >= 0.0 && gamma < 1.0)) {
        std::ostringstream msg;
        msg << "discount factor must lie in [0, 1), got " << gamma;
        throw ConfigError(msg.str());
    }
}

ActionId argmax_lowest(const Vector& values, double tie_tol) {
    if (values.size() == 0) throw Error("argmax of an empty vector");
    const double best = values.maxCoeff();
    for (Eigen::Index a = 0; a < values.size(); ++a) {
        if (values[a] >= best - tie_tol) return static_cast<ActionId>(a);
    }
    return 0;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

TransitionSample Trajectory::transition(std::size_t t) const {
    return {states.at(t), actions.at(t), rewards.at(t), states.at(t + 1)};
}

double discounted_return(const Trajectory& traj, double gamma) {
    if (traj.rewards.empty()) throw DatasetError("no rewards");
    double total = 0.0;
    double weight = 1.0;
    for (double r : traj.rewards) {
        total += weight * r;
        weight *= gamma;
    }
    return total;
}

namespace {

bool all_finite(const StateVector& s) { return s.allFinite(); }

}  // namespace

ValidationReport validate_dataset(std::span<const Trajectory> trajectories, std::size_t state_dim,
                                  std::size_t action_count) {
    if (trajectories.empty()) throw DatasetError("dataset has no trajectories");
    if (action_count == 0) throw DatasetError("action count must be positive");

    ValidationReport report;
    report.trajectory_count = trajectories.size();
    std::vector<std::size_t> counts(action_count, 0);

    for (std::size_t i = 0; i < trajectories.size(); ++i) {
        const auto& traj = trajectories[i];
        if (traj.states.size() != traj.actions.size() + 1 || traj.rewards.size() != traj.actions.size()) {
            std::ostringstream msg;
            msg << "length mismatch in trajectory " << i << ": " << traj.states.size() << " states, "
                << traj.actions.size() << " actions, " << traj.rewards.size() << " rewards";
            throw DatasetError(msg.str());
        }
        if (traj.actions.empty()) {
            throw DatasetError("trajectory " + std::to_string(i) + " has no transitions");
        }
        for (std::size_t t = 0; t < traj.states.size(); ++t) {
            const auto& s = traj.states[t];
            if (static_cast<std::size_t>(s.size()) != state_dim) {
                std::ostringstream msg;
                msg << "state dimension " << s.size() << " != " << state_dim << " at trajectory " << i
                    << ", stage " << t;
                throw DatasetError(msg.str());
            }
            if (!all_finite(s)) {
                std::ostringstream msg;
                msg << "non-finite state entry at trajectory " << i << ", stage " << t;
                throw DatasetError(msg.str());
            }
        }
        for (std::size_t t = 0; t < traj.actions.size(); ++t) {
            const ActionId a = traj.actions[t];
            if (a < 0 || static_cast<std::size_t>(a) >= action_count) {
                std::ostringstream msg;
                msg << "action " << a << " out of range at trajectory " << i << ", stage " << t;
                throw DatasetError(msg.str());
            }
            if (!std::isfinite(traj.rewards[t])) {
                std::ostringstream msg;
                msg << "non-finite reward at trajectory " << i << ", stage " << t;
                throw DatasetError(msg.str());
            }
            ++counts[static_cast<std::size_t>(a)];
            ++report.transition_count;
        }
    }

    report.action_frequency.resize(action_count);
    for (std::size_t a = 0; a < action_count; ++a) {
        report.action_frequency[a] =
            static_cast<double>(counts[a]) / static_cast<double>(report.transition_count);
        if (counts[a] == 0) {
            report.unobserved_actions.push_back(static_cast<ActionId>(a));
            report.warnings.push_back("positivity: action " + std::to_string(a) + " never observed");
        }
    }
    return report;
}

OfflineDataset::OfflineDataset(std::vector<Trajectory> trajectories, std::size_t state_dim,
                               std::size_t action_count)
    : trajectories_(std::move(trajectories)), state_dim_(state_dim), action_count_(action_count) {
    validate_dataset(trajectories_, state_dim_, action_count_);
}

std::size_t OfflineDataset::transition_count() const {
    std::size_t total = 0;
    for (const auto& t : trajectories_) total += t.transition_count();
    return total;
}

std::vector<TransitionSample> OfflineDataset::transitions() const {
    std::vector<TransitionSample> out;
    out.reserve(transition_count());
    for (const auto& traj : trajectories_) {
        for (std::size_t t = 0; t < traj.transition_count(); ++t) out.push_back(traj.transition(t));
    }
    return out;
}

OfflineDataset OfflineDataset::subset(std::span<const std::size_t> indices) const {
    std::vector<Trajectory> picked;
    picked.reserve(indices.size());
    for (std::size_t i : indices) picked.push_back(trajectories_.at(i));
    return OfflineDataset(std::move(picked), state_dim_, action_count_);
}

ValidationReport validate_dataset(const OfflineDataset& ds) {
    return validate_dataset(ds.trajectories(), ds.state_dim(), ds.action_count());
}

// ---------------------------------------------------------------------------
// FeatureBasis

FeatureBasis FeatureBasis::tabular(std::vector<StateVector> enumeration) {
    if (enumeration.empty()) throw ConfigError("tabular basis needs at least one state");
    FeatureBasis b;
    b.kind_ = Kind::TabularIndicator;
    b.state_dim_ = static_cast<std::size_t>(enumeration.front().size());
    for (const auto& s : enumeration) {
        if (static_cast<std::size_t>(s.size()) != b.state_dim_) {
            throw ConfigError("tabular enumeration mixes state dimensions");
        }
    }
    b.enumeration_ = std::move(enumeration);
    return b;
}

FeatureBasis FeatureBasis::tabular(std::size_t count) {
    std::vector<StateVector> states;
    states.reserve(count);
    for (std::size_t s = 0; s < count; ++s) states.push_back(index_state(s));
    return tabular(std::move(states));
}

FeatureBasis FeatureBasis::polynomial(std::size_t state_dim, int degree, Vector center, Vector scale) {
    if (degree < 1) throw ConfigError("polynomial degree must be at least 1");
    FeatureBasis b;
    b.kind_ = Kind::Polynomial;
    b.state_dim_ = state_dim;
    b.degree_ = degree;
    b.center_ = center.size() ? std::move(center) : Vector::Zero(static_cast<Eigen::Index>(state_dim));
    b.scale_ = scale.size() ? std::move(scale) : Vector::Ones(static_cast<Eigen::Index>(state_dim));
    if (static_cast<std::size_t>(b.center_.size()) != state_dim ||
        static_cast<std::size_t>(b.scale_.size()) != state_dim || (b.scale_.array() <= 0.0).any()) {
        throw ConfigError("polynomial standardization must match the state dimension with positive scales");
    }
    return b;
}

FeatureBasis FeatureBasis::radial(Matrix centers, double bandwidth, Vector center, Vector scale) {
    if (centers.rows() == 0) throw ConfigError("radial basis needs at least one center");
    if (!(bandwidth > 0.0)) throw ConfigError("radial bandwidth must be positive");
    FeatureBasis b;
    b.kind_ = Kind::RadialGrid;
    b.state_dim_ = static_cast<std::size_t>(centers.cols());
    b.centers_ = std::move(centers);
    b.bandwidth_ = bandwidth;
    b.center_ = center.size() ? std::move(center) : Vector::Zero(b.centers_.cols());
    b.scale_ = scale.size() ? std::move(scale) : Vector::Ones(b.centers_.cols());
    if (b.center_.size() != b.centers_.cols() || b.scale_.size() != b.centers_.cols() ||
        (b.scale_.array() <= 0.0).any()) {
        throw ConfigError("radial standardization must match the state dimension with positive scales");
    }
    return b;
}

FeatureBasis FeatureBasis::with_actions(std::size_t action_count) const {
    if (action_count == 0) throw ConfigError("state-action basis needs a positive action count");
    FeatureBasis b = *this;
    b.action_count_ = action_count;
    return b;
}

std::size_t FeatureBasis::state_features() const {
    switch (kind_) {
        case Kind::TabularIndicator: return enumeration_.size();
        case Kind::Polynomial: return 1 + state_dim_ * static_cast<std::size_t>(degree_);
        case Kind::RadialGrid: return static_cast<std::size_t>(centers_.rows());
    }
    return 0;
}

std::size_t FeatureBasis::dimension() const {
    return action_count_ ? state_features() * action_count_ : state_features();
}

std::optional<std::size_t> FeatureBasis::cell_of(const StateVector& state) const {
    if (kind_ != Kind::TabularIndicator) return std::nullopt;
    for (std::size_t i = 0; i < enumeration_.size(); ++i) {
        if (enumeration_[i].size() == state.size() && enumeration_[i] == state) return i;
    }
    return std::nullopt;
}

Vector FeatureBasis::standardized(const StateVector& state) const {
    return (state - center_).cwiseQuotient(scale_);
}

Vector FeatureBasis::state_block(const StateVector& state) const {
    if (static_cast<std::size_t>(state.size()) != state_dim_) {
        std::ostringstream msg;
        msg << "state dimension " << state.size() << " does not match basis dimension " << state_dim_;
        throw ConfigError(msg.str());
    }
    switch (kind_) {
        case Kind::TabularIndicator: {
            const auto cell = cell_of(state);
            if (!cell) throw DatasetError("unenumerated state");
            Vector out = Vector::Zero(static_cast<Eigen::Index>(enumeration_.size()));
            out[static_cast<Eigen::Index>(*cell)] = 1.0;
            return out;
        }
        case Kind::Polynomial: {
            const Vector x = standardized(state);
            Vector out(static_cast<Eigen::Index>(state_features()));
            out[0] = 1.0;
            Eigen::Index k = 1;
            for (Eigen::Index j = 0; j < x.size(); ++j) {
                double power = 1.0;
                for (int d = 1; d <= degree_; ++d) {
                    power *= x[j];
                    out[k++] = power;
                }
            }
            return out;
        }
        case Kind::RadialGrid: {
            const Vector x = standardized(state);
            Vector out(centers_.rows());
            const double denom = 2.0 * bandwidth_ * bandwidth_;
            for (Eigen::Index c = 0; c < centers_.rows(); ++c) {
                out[c] = std::exp(-(x - centers_.row(c).transpose()).squaredNorm() / denom);
            }
            return out;
        }
    }
    return {};
}

Vector FeatureBasis::evaluate(const StateVector& state, std::optional<ActionId> action) const {
    Vector block = state_block(state);
    if (!action_count_) {
        if (action) throw ConfigError("state-only basis evaluated with an action");
        return block;
    }
    if (!action) throw ConfigError("state-action basis evaluated without an action");
    if (*action < 0 || static_cast<std::size_t>(*action) >= action_count_) {
        throw ConfigError("action " + std::to_string(*action) + " outside the basis action range");
    }
    const Eigen::Index width = block.size();
    Vector out = Vector::Zero(width * static_cast<Eigen::Index>(action_count_));
    out.segment(width * *action, width) = block;
    return out;
}

// ---------------------------------------------------------------------------
// LinearFunctional

LinearFunctional::LinearFunctional(Vector theta_in, FeatureBasis basis_in)
    : theta(std::move(theta_in)), basis(std::move(basis_in)) {
    if (static_cast<std::size_t>(theta.size()) != basis.dimension()) {
        throw ConfigError("parameter dimension does not match the basis dimension");
    }
}

LinearFunctional::LinearFunctional(FeatureBasis basis_in)
    : theta(Vector::Zero(static_cast<Eigen::Index>(basis_in.dimension()))), basis(std::move(basis_in)) {}

double LinearFunctional::value(const StateVector& state) const { return theta.dot(basis.evaluate(state)); }

double LinearFunctional::value(const StateVector& state, ActionId action) const {
    return theta.dot(basis.evaluate(state, action));
}

Vector LinearFunctional::action_values(const StateVector& state) const {
    if (!basis.is_state_action()) throw ConfigError("action values need a state-action basis");
    const Vector block = basis.evaluate(state, 0).head(static_cast<Eigen::Index>(basis.state_features()));
    const auto width = block.size();
    Vector q(static_cast<Eigen::Index>(basis.action_count()));
    for (Eigen::Index a = 0; a < q.size(); ++a) q[a] = theta.segment(a * width, width).dot(block);
    return q;
}

// ---------------------------------------------------------------------------
// StochasticPolicy

void check_pmf(const Vector& pmf, double tol) {
    if (pmf.size() == 0) throw Error("empty probability vector");
    if (!pmf.allFinite() || (pmf.array() < 0.0).any() || std::abs(pmf.sum() - 1.0) > tol) {
        std::ostringstream msg;
        msg << "invalid probability vector (sum " << pmf.sum() << ")";
        throw Error(msg.str());
    }
}

StateVector index_state(std::size_t s) {
    StateVector v(1);
    v[0] = static_cast<double>(s);
    return v;
}

StochasticPolicy::StochasticPolicy(std::size_t action_count, PmfFn pmf)
    : action_count_(action_count), pmf_(std::move(pmf)) {
    if (action_count_ == 0) throw ConfigError("policy needs at least one action");
}

StochasticPolicy StochasticPolicy::uniform(std::size_t action_count) {
    const Vector p = Vector::Constant(static_cast<Eigen::Index>(action_count), 1.0 / double(action_count));
    return StochasticPolicy(action_count, [p](const StateVector&) { return p; });
}

StochasticPolicy StochasticPolicy::constant(std::size_t action_count, ActionId action) {
    if (action < 0 || static_cast<std::size_t>(action) >= action_count) throw ConfigError("action out of range");
    Vector p = Vector::Zero(static_cast<Eigen::Index>(action_count));
    p[action] = 1.0;
    return StochasticPolicy(action_count, [p](const StateVector&) { return p; });
}

StochasticPolicy StochasticPolicy::deterministic(std::size_t action_count,
                                                 std::function<ActionId(const StateVector&)> rule) {
    return StochasticPolicy(action_count, [action_count, rule = std::move(rule)](const StateVector& s) {
        Vector p = Vector::Zero(static_cast<Eigen::Index>(action_count));
        p[rule(s)] = 1.0;
        return p;
    });
}

StochasticPolicy StochasticPolicy::tabular(Matrix table) {
    for (Eigen::Index s = 0; s < table.rows(); ++s) check_pmf(table.row(s).transpose());
    const auto actions = static_cast<std::size_t>(table.cols());
    return StochasticPolicy(actions, [table = std::move(table)](const StateVector& s) -> Vector {
        const double raw = s[0];
        const auto idx = static_cast<Eigen::Index>(std::llround(raw));
        if (s.size() != 1 || idx < 0 || idx >= table.rows() || static_cast<double>(idx) != raw) {
            throw DatasetError("unenumerated state");
        }
        return table.row(idx).transpose();
    });
}

StochasticPolicy StochasticPolicy::epsilon_soft(const StochasticPolicy& base, double epsilon) {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in [0, 1]");
    const double k = static_cast<double>(base.action_count());
    return StochasticPolicy(base.action_count(), [base, epsilon, k](const StateVector& s) -> Vector {
        return ((1.0 - epsilon) * base.pmf(s).array() + epsilon / k).matrix();
    });
}

Vector StochasticPolicy::pmf(const StateVector& state) const {
    Vector p = pmf_(state);
    if (static_cast<std::size_t>(p.size()) != action_count_) throw Error("policy returned a pmf of the wrong size");
    check_pmf(p);
    return p;
}

double StochasticPolicy::probability(const StateVector& state, ActionId action) const {
    return pmf(state)[action];
}

ActionId StochasticPolicy::sample(const StateVector& state, Rng& rng) const {
    const Vector p = pmf(state);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double u = unit(rng);
    double acc = 0.0;
    ActionId last_positive = 0;
    for (Eigen::Index a = 0; a < p.size(); ++a) {
        if (p[a] <= 0.0) continue;
        last_positive = static_cast<ActionId>(a);
        acc += p[a];
        if (u < acc) return static_cast<ActionId>(a);
    }
    return last_positive;
}

ActionId StochasticPolicy::greedy(const StateVector& state) const { return argmax_lowest(pmf(state)); }

Matrix StochasticPolicy::table(std::size_t state_count) const {
    Matrix out(static_cast<Eigen::Index>(state_count), static_cast<Eigen::Index>(action_count_));
    for (std::size_t s = 0; s < state_count; ++s) {
        out.row(static_cast<Eigen::Index>(s)) = pmf(index_state(s)).transpose();
    }
    return out;
}

}  // namespace proxdtr
