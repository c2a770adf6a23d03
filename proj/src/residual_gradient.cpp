#include "proxdtr/residual_gradient.hpp"

#include <cmath>
#include <sstream>

namespace proxdtr {

double empirical_msbe(const LinearFunctional& model, const OfflineDataset& ds, double gamma) {
    double total = 0.0;
    std::size_t m = 0;
    for (const auto& traj : ds.trajectories()) {
        for (std::size_t t = 0; t < traj.transition_count(); ++t) {
            const double residual = -td_error(model, traj.transition(t), gamma);
            total += residual * residual;
            ++m;
        }
    }
    if (m == 0) throw DatasetError("empirical MSBE needs at least one transition");
    return total / static_cast<double>(m);
}

LinearFunctional rg_update(LinearFunctional model, const TransitionSample& sample, double alpha, double gamma) {
    const Vector phi = model.basis.evaluate(sample.state);
    const Vector phi_next = model.basis.evaluate(sample.next_state);
    const double residual = sample.reward + gamma * model.theta.dot(phi_next) - model.theta.dot(phi);
    model.theta -= alpha * residual * (gamma * phi_next - phi);
    return model;
}

RGFit fit_rg(const OfflineDataset& ds, const FeatureBasis& basis, double gamma, const RGConfig& config) {
    require_discount(gamma);
    const auto p = static_cast<Eigen::Index>(basis.dimension());
    const auto m = static_cast<double>(ds.transition_count());

    // MSBE(theta) = (1/m) sum (r + d^T theta)^2 with d = gamma phi(s') - phi(s),
    // so the gradient is H theta + g.
    Matrix H = Matrix::Zero(p, p);
    Vector g = Vector::Zero(p);
    double r2 = 0.0;
    for (const auto& traj : ds.trajectories()) {
        for (std::size_t t = 0; t < traj.transition_count(); ++t) {
            const Vector d = gamma * basis.evaluate(traj.states[t + 1]) - basis.evaluate(traj.states[t]);
            const double r = traj.rewards[t];
            H.selfadjointView<Eigen::Lower>().rankUpdate(d, 2.0 / m);
            g += (2.0 * r / m) * d;
            r2 += r * r / m;
        }
    }
    H = H.selfadjointView<Eigen::Lower>();

    double step = 0.0;
    if (config.step) {
        step = *config.step;
    } else {
        const double top = Eigen::SelfAdjointEigenSolver<Matrix>(H, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
        step = top > 0.0 ? 1.0 / top : 1.0;
    }
    if (!(step > 0.0)) throw ConfigError("residual-gradient step must be positive");

    RGFit fit{LinearFunctional(basis)};
    Vector& theta = fit.model.theta;
    Vector grad = g;
    for (std::size_t k = 0; k < config.max_iter; ++k) {
        grad = H * theta + g;
        fit.gradient_norm = grad.norm();
        fit.iterations = k;
        if (fit.gradient_norm <= config.tol) {
            fit.converged = true;
            break;
        }
        theta -= step * grad;
        if (!theta.allFinite()) throw DivergenceError("residual gradient diverged; reduce the step size");
    }
    if (!fit.converged) {
        grad = H * theta + g;
        fit.gradient_norm = grad.norm();
        fit.iterations = config.max_iter;
        fit.converged = fit.gradient_norm <= config.tol;
    }
    fit.msbe = theta.dot(0.5 * H * theta + g) + r2;
    return fit;
}

namespace {

Vector resolve_weights(const Vector& weights, std::size_t S) {
    if (weights.size() == 0) return Vector::Constant(static_cast<Eigen::Index>(S), 1.0 / double(S));
    if (static_cast<std::size_t>(weights.size()) != S) throw ConfigError("state weights must have one entry per state");
    return weights;
}

}  // namespace

double population_msbe(const TabularMDP& mdp, const Vector& values, double gamma, const Matrix& policy,
                       const Vector& state_weights) {
    const Vector w = resolve_weights(state_weights, mdp.state_count());
    const Vector backup = mdp.policy_reward(policy) + gamma * mdp.policy_transition(policy) * values;
    return w.dot((backup - values).array().square().matrix());
}

double optimality_msbe(const TabularMDP& mdp, const Vector& values, double gamma, const Vector& state_weights) {
    const Vector w = resolve_weights(state_weights, mdp.state_count());
    return w.dot((bellman_optimality_operator(mdp, values, gamma) - values).array().square().matrix());
}

DoubleSamplingTerms double_sampling_decomposition(const TabularMDP& mdp, const Vector& values, double gamma,
                                                  const Matrix& policy, const Vector& state_weights) {
    const std::size_t S = mdp.state_count();
    const std::size_t A = mdp.action_count();
    if (static_cast<std::size_t>(values.size()) != S) throw ConfigError("value vector has wrong size");
    for (Eigen::Index s = 0; s < policy.rows(); ++s) check_pmf(policy.row(s).transpose());
    const Vector w = resolve_weights(state_weights, S);

    DoubleSamplingTerms out;
    for (std::size_t s = 0; s < S; ++s) {
        const auto si = static_cast<Eigen::Index>(s);
        // Conditional mean of the one-sample backup.
        double mean = 0.0;
        for (std::size_t a = 0; a < A; ++a) {
            const double pa = policy(si, static_cast<Eigen::Index>(a));
            for (std::size_t next = 0; next < S; ++next) {
                const double pr = pa * mdp.probability(s, static_cast<ActionId>(a), next);
                if (pr == 0.0) continue;
                mean += pr * (mdp.reward(s, static_cast<ActionId>(a), next) +
                              gamma * values[static_cast<Eigen::Index>(next)]);
            }
        }
        double second = 0.0;
        double variance = 0.0;
        for (std::size_t a = 0; a < A; ++a) {
            const double pa = policy(si, static_cast<Eigen::Index>(a));
            for (std::size_t next = 0; next < S; ++next) {
                const double pr = pa * mdp.probability(s, static_cast<ActionId>(a), next);
                if (pr == 0.0) continue;
                const double backup =
                    mdp.reward(s, static_cast<ActionId>(a), next) + gamma * values[static_cast<Eigen::Index>(next)];
                second += pr * (backup - values[si]) * (backup - values[si]);
                variance += pr * (backup - mean) * (backup - mean);
            }
        }
        out.population_msbe += w[si] * (mean - values[si]) * (mean - values[si]);
        out.expected_empirical_msbe += w[si] * second;
        out.variance_term += w[si] * variance;
    }

    const double gap = std::abs(out.expected_empirical_msbe - out.population_msbe - out.variance_term);
    if (gap > 1e-12 * std::max(1.0, out.expected_empirical_msbe)) {
        std::ostringstream msg;
        msg << "double-sampling identity violated by " << gap;
        throw Error(msg.str());
    }
    return out;
}

}  // namespace proxdtr
