#pragma once

#include "proxdtr/tabular.hpp"
#include "proxdtr/td.hpp"

#include <optional>

namespace proxdtr {

/// One-sample empirical MSBE: mean over all transitions of (r + gamma V(s') - V(s))^2.
/// This is the policy-evaluation residual of the behavior stream (no max over actions).
double empirical_msbe(const LinearFunctional& model, const OfflineDataset& ds, double gamma);

/// theta <- theta - alpha (r + gamma V(s') - V(s)) (gamma phi(s') - phi(s)).
LinearFunctional rg_update(LinearFunctional model, const TransitionSample& sample, double alpha, double gamma);

struct RGConfig {
    /// Fixed gradient step; when empty, 1 / L with L the largest Hessian eigenvalue.
    std::optional<double> step;
    std::size_t max_iter = 200'000;
    double tol = 1e-8;
};

struct RGFit {
    LinearFunctional model;
    bool converged = false;
    std::size_t iterations = 0;
    double gradient_norm = 0.0;
    double msbe = 0.0;
};

/// Full-batch gradient descent on the empirical MSBE. Stops when the gradient
/// 2-norm is at most tol or after max_iter steps; `converged` says which.
RGFit fit_rg(const OfflineDataset& ds, const FeatureBasis& basis, double gamma, const RGConfig& config = {});

/// Exact terms of E[empirical MSBE] = MSBE + E_s[var(B^ V(s) | s)] on a
/// tabular MDP, with B^ V(s) = r + gamma V(s') for (a, s') drawn from the
/// policy and the transition kernel.
struct DoubleSamplingTerms {
    double population_msbe = 0.0;
    double expected_empirical_msbe = 0.0;
    double variance_term = 0.0;
};

/// `state_weights` defaults to uniform. Throws if the identity fails by more
/// than 1e-12 (relative to the magnitude of the terms).
DoubleSamplingTerms double_sampling_decomposition(const TabularMDP& mdp, const Vector& values, double gamma,
                                                  const Matrix& policy, const Vector& state_weights = {});

/// Population MSBE of the evaluation residual under `policy` and state weights.
double population_msbe(const TabularMDP& mdp, const Vector& values, double gamma, const Matrix& policy,
                       const Vector& state_weights);

/// sum_s w(s) (BV(s) - V(s))^2 with the optimality operator (needs the model).
double optimality_msbe(const TabularMDP& mdp, const Vector& values, double gamma, const Vector& state_weights);

}  // namespace proxdtr
