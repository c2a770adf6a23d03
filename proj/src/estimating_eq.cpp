#include "proxdtr/estimating_eq.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace proxdtr {

StochasticPolicy GGQModel::policy() const {
    const LinearFunctional qf = q;
    return StochasticPolicy::deterministic(q.basis.action_count(),
                                           [qf](const StateVector& s) { return argmax_lowest(qf.action_values(s)); });
}

double ggq_td_error(const GGQModel& model, const TransitionSample& sample) {
    const double next_best = model.action_values(sample.next_state).maxCoeff();
    return sample.reward + model.gamma * next_best - model.q.value(sample.state, sample.action);
}

Vector ggq_residual(const GGQModel& model, const OfflineDataset& ds) {
    Vector total = Vector::Zero(static_cast<Eigen::Index>(model.q.basis.dimension()));
    for (const auto& traj : ds.trajectories()) {
        for (std::size_t t = 0; t < traj.transition_count(); ++t) {
            const auto sample = traj.transition(t);
            total += ggq_td_error(model, sample) * model.q.basis.evaluate(sample.state, sample.action);
        }
    }
    return total / static_cast<double>(ds.transition_count());
}

GGQFit solve_ggq(const OfflineDataset& ds, const FeatureBasis& basis, double gamma, const GGQConfig& config) {
    require_discount(gamma);
    if (!basis.is_state_action()) throw ConfigError("GGQ needs a state-action basis");
    if (basis.action_count() != ds.action_count()) throw ConfigError("basis and dataset disagree on action count");
    if (!(config.damping > 0.0 && config.damping <= 1.0)) throw ConfigError("GGQ damping must lie in (0, 1]");

    const auto samples = ds.transitions();
    const auto p = static_cast<Eigen::Index>(basis.dimension());
    const auto n = static_cast<double>(samples.size());
    std::vector<Vector> phi;
    phi.reserve(samples.size());
    for (const auto& smp : samples) phi.push_back(basis.evaluate(smp.state, smp.action));

    GGQFit fit{GGQModel{LinearFunctional(basis), gamma}, false, 0, 0.0, {}};
    fit.warnings = validate_dataset(ds).warnings;

    GGQModel current = fit.model;
    double best_norm = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0;; ++k) {
        Vector residual = Vector::Zero(p);
        Matrix jac = Matrix::Zero(p, p);
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const Vector next_q = current.action_values(samples[i].next_state);
            const ActionId best = argmax_lowest(next_q);
            const double delta = samples[i].reward + gamma * next_q[best] - current.q.theta.dot(phi[i]);
            residual += delta * phi[i];
            jac += phi[i] * (gamma * basis.evaluate(samples[i].next_state, best) - phi[i]).transpose();
        }
        residual /= n;
        jac /= n;

        const double norm = residual.norm();
        if (norm < best_norm) {
            best_norm = norm;
            fit.model = current;
            fit.iterations = k;
        }
        if (norm <= config.tol) {
            fit.converged = true;
            break;
        }
        if (k >= config.max_iter) break;

        const Vector step = jac.completeOrthogonalDecomposition().solve(residual);
        current.q.theta -= config.damping * step;
        if (!current.q.theta.allFinite()) break;
    }
    fit.residual_norm = best_norm;
    if (!fit.converged) {
        std::ostringstream msg;
        msg << "GGQ did not converge: best residual norm " << best_norm << " > tol " << config.tol;
        fit.warnings.push_back(msg.str());
    }
    return fit;
}

// ---------------------------------------------------------------------------

Vector apply_floor(const Vector& pmf, double floor) {
    const auto k = static_cast<double>(pmf.size());
    if (!(floor >= 0.0) || floor * k > 1.0) throw ConfigError("propensity floor must satisfy 0 <= floor <= 1/|A|");
    if (pmf.minCoeff() >= floor) return pmf;
    const Vector excess = (pmf.array() - floor).max(0.0).matrix();
    const double total = excess.sum();
    if (!(total > 0.0)) return Vector::Constant(pmf.size(), 1.0 / k);
    return (floor + (1.0 - k * floor) * excess.array() / total).matrix();
}

PropensityModel PropensityModel::known(StochasticPolicy policy) {
    PropensityModel model(Kind::Known, 0.0);
    model.known_ = std::move(policy);
    return model;
}

std::size_t PropensityModel::action_count() const {
    if (known_) return known_->action_count();
    return kind_ == Kind::EmpiricalTabular ? static_cast<std::size_t>(table_.cols())
                                           : static_cast<std::size_t>(coef_.rows());
}

Vector PropensityModel::pmf(const StateVector& s) const {
    switch (kind_) {
    case Kind::Known:
        return known_->pmf(s);
    case Kind::EmpiricalTabular: {
        const auto cell = basis_->cell_of(s);
        if (!cell) throw Error("unenumerated state");
        return table_.row(static_cast<Eigen::Index>(*cell)).transpose();
    }
    case Kind::MultinomialLogistic: {
        const Vector eta = coef_ * basis_->evaluate(s);
        const Vector w = (eta.array() - eta.maxCoeff()).exp().matrix();
        return apply_floor(w / w.sum(), floor_);
    }
    }
    return {};
}

StochasticPolicy PropensityModel::as_policy() const {
    if (known_) return *known_;
    const PropensityModel self = *this;
    return StochasticPolicy(action_count(), [self](const StateVector& s) { return self.pmf(s); });
}

namespace {

// Softmax regression by Newton's method with a small ridge so that separable
// data (deterministic behavior) still gives finite coefficients.
Matrix fit_multinomial(const std::vector<Vector>& x, const std::vector<ActionId>& y, std::size_t actions) {
    const auto p = x.front().size();
    const auto k = static_cast<Eigen::Index>(actions) - 1;
    Matrix coef = Matrix::Zero(static_cast<Eigen::Index>(actions), p);
    if (k == 0) return coef;
    const Eigen::Index dim = k * p;
    const double ridge = 1e-4;
    const auto n = static_cast<double>(x.size());

    auto loss = [&](const Matrix& c) {
        double total = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const Vector eta = c * x[i];
            const double m = eta.maxCoeff();
            total += m + std::log((eta.array() - m).exp().sum()) - eta[y[i]];
        }
        return total / n + 0.5 * ridge * c.squaredNorm();
    };

    double current = loss(coef);
    for (int iter = 0; iter < 100; ++iter) {
        Vector grad = Vector::Zero(dim);
        Matrix hess = Matrix::Zero(dim, dim);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const Vector eta = coef * x[i];
            Vector prob = (eta.array() - eta.maxCoeff()).exp().matrix();
            prob /= prob.sum();
            const Matrix xx = x[i] * x[i].transpose();
            for (Eigen::Index a = 0; a < k; ++a) {
                const double ya = (y[i] == a + 1) ? 1.0 : 0.0;
                grad.segment(a * p, p) += (prob[a + 1] - ya) * x[i];
                for (Eigen::Index b = 0; b < k; ++b) {
                    const double w = prob[a + 1] * ((a == b ? 1.0 : 0.0) - prob[b + 1]);
                    hess.block(a * p, b * p, p, p) += w * xx;
                }
            }
        }
        grad /= n;
        hess /= n;
        for (Eigen::Index a = 0; a < k; ++a) {
            grad.segment(a * p, p) += ridge * coef.row(a + 1).transpose();
        }
        hess.diagonal().array() += ridge;
        if (grad.norm() < 1e-10) break;

        const Vector step = hess.ldlt().solve(grad);
        double t = 1.0;
        Matrix trial = coef;
        for (int half = 0; half < 30; ++half, t *= 0.5) {
            trial = coef;
            for (Eigen::Index a = 0; a < k; ++a) trial.row(a + 1) -= t * step.segment(a * p, p).transpose();
            if (loss(trial) <= current) break;
        }
        const double next = loss(trial);
        if (next > current) break;
        coef = trial;
        const bool stalled = current - next < 1e-14;
        current = next;
        if (stalled) break;
    }
    return coef;
}

}  // namespace

PropensityModel estimate_propensity(const OfflineDataset& ds, PropensityModel::Kind kind, const FeatureBasis& basis,
                                    double floor) {
    using Kind = PropensityModel::Kind;
    if (kind == Kind::Known) throw ConfigError("a known propensity is supplied, not estimated");
    const std::size_t A = ds.action_count();
    if (!(floor >= 0.0) || floor * static_cast<double>(A) > 1.0) {
        throw ConfigError("propensity floor must satisfy 0 <= floor <= 1/|A|");
    }
    if (basis.is_state_action()) throw ConfigError("propensity features must be a state-only basis");

    PropensityModel model(kind, floor);
    model.basis_ = basis;

    if (kind == Kind::EmpiricalTabular) {
        if (basis.kind() != FeatureBasis::Kind::TabularIndicator) {
            throw ConfigError("empirical-tabular propensity needs a tabular basis");
        }
        const auto cells = static_cast<Eigen::Index>(basis.state_features());
        Matrix counts = Matrix::Zero(cells, static_cast<Eigen::Index>(A));
        for (const auto& traj : ds.trajectories()) {
            for (std::size_t t = 0; t < traj.transition_count(); ++t) {
                const auto cell = basis.cell_of(traj.states[t]);
                if (!cell) throw DatasetError("unenumerated state");
                counts(static_cast<Eigen::Index>(*cell), traj.actions[t]) += 1.0;
            }
        }
        model.table_.resize(cells, static_cast<Eigen::Index>(A));
        for (Eigen::Index c = 0; c < cells; ++c) {
            const double total = counts.row(c).sum();
            if (total == 0.0) {
                model.table_.row(c).setConstant(1.0 / static_cast<double>(A));
                model.flags_.push_back("cell " + std::to_string(c) + ": no visits, uniform fallback");
                continue;
            }
            const Vector raw = counts.row(c).transpose() / total;
            if (raw.minCoeff() < floor) model.flags_.push_back("cell " + std::to_string(c) + ": floor applied");
            model.table_.row(c) = apply_floor(raw, floor).transpose();
        }
        return model;
    }

    std::vector<Vector> x;
    std::vector<ActionId> y;
    for (const auto& traj : ds.trajectories()) {
        for (std::size_t t = 0; t < traj.transition_count(); ++t) {
            x.push_back(basis.evaluate(traj.states[t]));
            y.push_back(traj.actions[t]);
        }
    }
    model.coef_ = fit_multinomial(x, y, A);
    std::size_t floored = 0;
    for (const auto& xi : x) {
        const Vector eta = model.coef_ * xi;
        const Vector w = (eta.array() - eta.maxCoeff()).exp().matrix();
        if ((w / w.sum()).minCoeff() < floor) ++floored;
    }
    if (floored > 0) {
        model.flags_.push_back("floor applied at " + std::to_string(floored) + " of " + std::to_string(x.size()) +
                               " training points");
    }
    return model;
}

// ---------------------------------------------------------------------------

namespace {

double importance_weight(const StochasticPolicy& policy, const PropensityModel& propensity, const StateVector& s,
                         ActionId a) {
    const double target = policy.probability(s, a);
    if (target == 0.0) return 0.0;
    const double mu = propensity.probability(s, a);
    if (!(mu > 0.0)) throw DatasetError("propensity is zero at an observed action");
    return target / mu;
}

// Lambda_n(theta) = b - A theta.
void vlearn_system(const StochasticPolicy& policy, const OfflineDataset& ds, const FeatureBasis& basis,
                   const PropensityModel& propensity, double gamma, Matrix& A, Vector& b) {
    const auto p = static_cast<Eigen::Index>(basis.dimension());
    A = Matrix::Zero(p, p);
    b = Vector::Zero(p);
    for (const auto& traj : ds.trajectories()) {
        for (std::size_t t = 0; t < traj.transition_count(); ++t) {
            const double w = importance_weight(policy, propensity, traj.states[t], traj.actions[t]);
            if (w == 0.0) continue;
            const Vector phi = basis.evaluate(traj.states[t]);
            const Vector phi_next = basis.evaluate(traj.states[t + 1]);
            A += (w * phi) * (phi - gamma * phi_next).transpose();
            b += (w * traj.rewards[t]) * phi;
        }
    }
    const auto n = static_cast<double>(ds.size());
    A /= n;
    b /= n;
}

}  // namespace

Vector vlearn_residual(const StochasticPolicy& policy, const VLearnModel& model, const OfflineDataset& ds,
                       const PropensityModel& propensity, double gamma) {
    Vector total = Vector::Zero(model.theta.size());
    for (const auto& traj : ds.trajectories()) {
        for (std::size_t t = 0; t < traj.transition_count(); ++t) {
            const double w = importance_weight(policy, propensity, traj.states[t], traj.actions[t]);
            if (w == 0.0) continue;
            const double delta =
                traj.rewards[t] + gamma * model.value(traj.states[t + 1]) - model.value(traj.states[t]);
            total += (w * delta) * model.basis.evaluate(traj.states[t]);
        }
    }
    return total / static_cast<double>(ds.size());
}

VLearnSolve solve_vlearn_theta(const StochasticPolicy& policy, const OfflineDataset& ds, const FeatureBasis& basis,
                               const PropensityModel& propensity, double gamma, double ridge) {
    require_discount(gamma);
    if (basis.is_state_action()) throw ConfigError("V-learning needs a state-only basis");
    Matrix A;
    Vector b;
    vlearn_system(policy, ds, basis, propensity, gamma, A, b);

    VLearnSolve out{LinearFunctional(basis), {}};
    Eigen::FullPivLU<Matrix> lu(A);
    if (lu.isInvertible()) {
        out.model.theta = lu.solve(b);
    } else {
        A.diagonal().array() += ridge;
        out.model.theta = A.fullPivLu().solve(b);
        std::ostringstream msg;
        msg << "V-learning system is singular (rank " << lu.rank() << " of " << A.rows() << "); ridge " << ridge
            << " added";
        out.warnings.push_back(msg.str());
    }
    return out;
}

double initial_state_value(const VLearnModel& model, const OfflineDataset& ds) {
    double total = 0.0;
    for (const auto& traj : ds.trajectories()) total += model.value(traj.states.front());
    return total / static_cast<double>(ds.size());
}

VLearnResult solve_vlearning(const OfflineDataset& ds, const std::vector<StochasticPolicy>& candidates,
                             const FeatureBasis& basis, double gamma, const PropensityModel& propensity,
                             const VLearnConfig& config) {
    if (candidates.empty()) throw ConfigError("V-learning needs at least one candidate policy");
    std::optional<VLearnResult> best;
    std::vector<double> values;
    std::vector<std::string> warnings;
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        auto solved = solve_vlearn_theta(candidates[c], ds, basis, propensity, gamma, config.ridge);
        const double value = initial_state_value(solved.model, ds);
        values.push_back(value);
        for (auto& w : solved.warnings) warnings.push_back("candidate " + std::to_string(c) + ": " + w);
        if (!best || value > values[best->chosen]) {
            best.emplace(VLearnResult{solved.model, candidates[c], c, {}, {}});
        }
    }
    best->candidate_values = std::move(values);
    best->warnings = std::move(warnings);
    return std::move(*best);
}

StochasticPolicy SoftmaxPolicyClass::make(const Vector& beta) const {
    if (action_count < 1) throw ConfigError("softmax policy class needs at least one action");
    if (static_cast<std::size_t>(beta.size()) != parameter_count()) throw ConfigError("softmax parameter size mismatch");
    const auto p = static_cast<Eigen::Index>(features.dimension());
    Matrix coef = Matrix::Zero(static_cast<Eigen::Index>(action_count), p);
    for (Eigen::Index a = 1; a < coef.rows(); ++a) coef.row(a) = beta.segment((a - 1) * p, p).transpose();
    const FeatureBasis psi = features;
    return StochasticPolicy(action_count, [coef, psi](const StateVector& s) {
        const Vector eta = coef * psi.evaluate(s);
        Vector w = (eta.array() - eta.maxCoeff()).exp().matrix();
        return Vector(w / w.sum());
    });
}

SoftmaxVLearnResult solve_vlearning_softmax(const OfflineDataset& ds, const SoftmaxPolicyClass& policy_class,
                                            const FeatureBasis& basis, double gamma,
                                            const PropensityModel& propensity, const VLearnConfig& config) {
    if (!(config.initial_step > 0.0) || !(config.min_step > 0.0)) throw ConfigError("step sizes must be positive");
    const auto dim = static_cast<Eigen::Index>(policy_class.parameter_count());

    auto evaluate = [&](const Vector& beta, std::vector<std::string>* warnings) {
        auto solved = solve_vlearn_theta(policy_class.make(beta), ds, basis, propensity, gamma, config.ridge);
        if (warnings) warnings->insert(warnings->end(), solved.warnings.begin(), solved.warnings.end());
        return std::make_pair(initial_state_value(solved.model, ds), solved.model);
    };

    SoftmaxVLearnResult out{LinearFunctional(basis), Vector::Zero(dim), policy_class.make(Vector::Zero(dim)), 0.0, 0, {}};
    auto [value, model] = evaluate(out.beta, &out.warnings);
    out.value = value;
    out.model = model;

    double step = config.initial_step;
    while (out.sweeps < config.max_sweeps && step >= config.min_step) {
        ++out.sweeps;
        bool improved = false;
        for (Eigen::Index j = 0; j < dim; ++j) {
            for (double sign : {1.0, -1.0}) {
                Vector trial = out.beta;
                trial[j] += sign * step;
                auto [v, m] = evaluate(trial, nullptr);
                if (v > out.value) {
                    out.beta = trial;
                    out.value = v;
                    out.model = m;
                    improved = true;
                    break;
                }
            }
        }
        if (!improved) step *= 0.5;
    }
    out.policy = policy_class.make(out.beta);
    return out;
}

}  // namespace proxdtr
