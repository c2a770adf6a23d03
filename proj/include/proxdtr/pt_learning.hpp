#pragma once

#include "proxdtr/core.hpp"
#include "proxdtr/tabular.hpp"

#include <optional>
#include <string>
#include <vector>

namespace proxdtr {

/// Proximity d(x) = x(1 - x)/2 with phi(x) = d(x)/x = (1 - x)/2, scaled by lambda.
struct ProximitySpec {
    double lambda = 1.0;

    explicit ProximitySpec(double lambda_in);

    static double d(double x) { return 0.5 * x * (1.0 - x); }
    /// d'(x), the slope that enters the stationarity conditions.
    static double d_prime(double x) { return 0.5 - x; }
    /// Continuous extension, so phi(0) = 1/2.
    static double phi(double x) { return 0.5 * (1.0 - x); }
};

/// Actions with nonzero sparse-policy mass, ordered by descending q (ties:
/// lowest index first).
std::vector<ActionId> support_set(const Vector& q, double lambda);

/// pi(a) = (q(a)/lambda - mean_K(q)/lambda + 1/|K|)^+, zero off the support K.
Vector sparse_policy(const Vector& q, double lambda);

/// max over the simplex of <q, pi> + lambda sum_a d(pi(a)), in closed form.
double proximal_bellman_value(const Vector& q, double lambda);

/// lambda/2 - lambda/(2k). Upper bound on proximal_bellman_value - max(q)
/// for support size k, attained when q is constant on the support.
double bias_bound(double lambda, std::size_t support_size);

/// Multipliers of the simplex constraints at the sparse policy. With them,
/// q(a) + lambda d'(pi(a)) - Psi + psi(a) equals proximal_bellman_value for
/// every action.
struct KKTMultipliers {
    /// Equality multiplier, -lambda/2 sum_a pi(a)^2, in [-lambda/2, 0).
    double Psi = 0.0;
    /// Nonnegativity multipliers; zero on the support.
    Vector psi;
};

KKTMultipliers kkt_multipliers(const Vector& q, double lambda);

/// Gaussian kernel on the embedding ((s - center) / scale, action_scale * onehot(a)).
///
/// Unset fields are resolved from data: center and scale from the state
/// moments, bandwidth from the median pairwise embedding distance.
struct KernelSpec {
    std::optional<double> bandwidth;
    double zeta = 1.0;
    double action_scale = 1.0;
    Vector center;
    Vector scale;

    bool resolved() const { return bandwidth.has_value() && center.size() > 0; }
    Vector embed(const StateVector& s, ActionId a, std::size_t action_count) const;
    double operator()(const Vector& z1, const Vector& z2) const;
};

/// Fills in the data-dependent parts of `spec`.
KernelSpec resolve_kernel(KernelSpec spec, const OfflineDataset& ds);

/// Features of the Q surrogate. ActionBlocks copies the state basis once per
/// action; OrdinalAction treats the action index as one more numeric
/// coordinate of a polynomial basis (needs a polynomial state basis).
enum class QFeatures { ActionBlocks, OrdinalAction };

/// Fitted pT model. V is linear over a state basis. Q is a linear surrogate
/// whose coefficients are the ridge regression of r + gamma V(s') on the
/// state-action features, or (tabular mode) R + gamma P V from an attached MDP.
struct PTModel {
    LinearFunctional v_model;
    /// Surrogate coefficients over q_basis. For ActionBlocks this is the
    /// state basis crossed with actions.
    LinearFunctional q_model;
    QFeatures q_features_kind = QFeatures::ActionBlocks;
    double gamma = 0.9;
    double lambda = 1.0;
    KernelSpec kernel;
    std::optional<TabularMDP> mdp;

    PTModel(FeatureBasis state_basis, std::size_t action_count, double gamma, double lambda,
            QFeatures q_features = QFeatures::ActionBlocks);

    std::size_t action_count() const { return action_count_; }
    /// A x dim(q_basis): row a holds the surrogate features of (s, a).
    Matrix q_features(const StateVector& s) const;
    Vector q_values(const StateVector& s) const;
    Vector policy(const StateVector& s) const { return sparse_policy(q_values(s), lambda); }
    KKTMultipliers multipliers(const StateVector& s) const { return kkt_multipliers(q_values(s), lambda); }
    StochasticPolicy as_policy() const;

private:
    std::size_t action_count_ = 0;
};

/// Sets q_model.theta to the ridge regression of r + gamma V(s') on the
/// surrogate features of the observed (s, a), using the current V:
/// minimize (1/m) sum (x_j' beta - y_j)^2 + ridge |beta|^2.
void fit_q_surrogate(PTModel& model, const OfflineDataset& ds, double ridge);

/// One-sample pT-error at (s, a, r, s') given pi(a|s):
/// r + gamma V(s') + lambda d'(pi) - Psi(s) + psi(a|s) - V(s), with the
/// multipliers taken from the model's Q at s.
double pt_error(const PTModel& model, const TransitionSample& sample, double pi_prob);

/// Trajectory-based order-2 U-statistic: per trajectory, the mean over
/// ordered pairs t != u of zeta e_t K(z_t, z_u) e_u, then the mean over
/// trajectories with at least two transitions. The kernel must be resolved.
double kernel_u_loss(const PTModel& model, const OfflineDataset& ds);

/// Gradient of kernel_u_loss with respect to (theta_V, theta_Q), stacked in
/// that order, with theta_Q treated as free. In tabular mode the Q block is absent.
Vector kernel_u_loss_gradient(const PTModel& model, const OfflineDataset& ds);

/// Same loss from precomputed pT-errors and per-trajectory Gram matrices.
double u_statistic(const std::vector<Vector>& errors, const std::vector<Matrix>& grams, double zeta);

/// How the Q surrogate follows V during fitting. Regression re-solves the
/// ridge regression of r + gamma V(s') at every step; Joint treats the Q
/// coefficients as free parameters descended with their own step size,
/// starting from zero.
enum class QFit { Regression, Joint };

/// The within-trajectory U-statistic is not bounded below in general, so plain
/// descent can run off along a direction of negative curvature. Newton solves
/// grad = 0 with step halving on the gradient norm, falling back to a
/// continuation from large lambda when the direct solve from zero stalls.
enum class PTSolver { Newton, GradientDescent };

struct PTConfig {
    std::vector<double> lambda_grid{1.0};
    PTSolver solver = PTSolver::Newton;
    /// Gradient-descent steps.
    double step_value = 1e-3;
    /// Step for the Q block under QFit::Joint.
    double step_policy = 1e-3;
    /// Ridge penalty of the Q surrogate regression.
    double ridge = 1e-3;
    QFeatures q_features = QFeatures::ActionBlocks;
    QFit q_fit = QFit::Regression;
    /// step_k = step / (1 + decay k).
    double decay = 1e-3;
    std::size_t max_iter = 3000;
    /// Stop when the gradient norm falls below this.
    double tol = 1e-8;
    KernelSpec kernel;
    bool cross_validate = true;
    std::size_t folds = 5;
    /// Exact Q from a known MDP (tabular states only).
    std::optional<TabularMDP> mdp;
};

struct PTFit {
    PTModel model;
    /// Loss at the returned iterate.
    double loss = 0.0;
    std::size_t iterations = 0;
    bool converged = false;
    /// Held-out loss per grid entry (empty without cross-validation).
    std::vector<double> cv_loss;
    std::vector<std::string> warnings;
};

/// Finds a stationary point of kernel_u_loss. Under QFit::Regression the
/// parameters are theta_V alone and derivatives flow through the surrogate
/// regression; under QFit::Joint theta_V and theta_Q move together. Without
/// convergence the best iterate is kept (smallest gradient norm for Newton,
/// smallest loss for descent). A Newton root whose fitted values leave the range
/// attainable from the observed rewards triggers the continuation, and a warning
/// if the final fit is still outside it.
/// With several lambdas, the one with the smallest cross-validated loss
/// (folds by trajectory) is refit on all data.
PTFit fit_pt(const OfflineDataset& ds, const FeatureBasis& state_basis, double gamma, const PTConfig& config);

/// Fit for a single lambda (no cross-validation).
PTFit fit_pt_lambda(const OfflineDataset& ds, const FeatureBasis& state_basis, double gamma, double lambda,
                    const PTConfig& config);

struct PTPrediction {
    Vector pmf;
    ActionId recommended = 0;
};

/// pmf = sparse_policy(Q(s, .), lambda); recommended = argmax of pmf, lowest index on ties.
PTPrediction predict(const PTModel& model, const StateVector& s);

/// V-hat - lambda phi(0) / (1 - gamma), the value lower bound reported for pT policies.
double pt_value_lower_bound(double value, double lambda, double gamma);

struct ProximalVIResult {
    Vector values;
    Matrix q;
    Matrix policy;  // S x A sparse policy table
    std::size_t iterations = 0;
    double residual = 0.0;
};

/// Iterates V <- B_lambda V from V = 0 until ||B_lambda V - V||_inf <= tol.
ProximalVIResult proximal_value_iteration(const TabularMDP& mdp, double gamma, double lambda, double tol = 1e-12,
                                          std::size_t max_iter = 1'000'000);

/// (B_lambda V)(s) = proximal_bellman_value(Q_V(s, .), lambda) for every state.
Vector proximal_bellman_operator(const TabularMDP& mdp, const Vector& values, double gamma, double lambda);

}  // namespace proxdtr
