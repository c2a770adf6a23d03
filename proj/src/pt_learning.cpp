#include "proxdtr/pt_learning.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace proxdtr {

ProximitySpec::ProximitySpec(double lambda_in) : lambda(lambda_in) {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be positive and finite");
}

namespace {

void require_lambda(double lambda) {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be positive and finite");
}

struct SortedSupport {
    std::vector<ActionId> order;  // all actions, descending q, ties by index
    std::size_t size = 0;         // |K|
    double mean = 0.0;            // mean of q over K
};

SortedSupport analyze(const Vector& q, double lambda) {
    require_lambda(lambda);
    if (q.size() == 0) throw ConfigError("empty action-value vector");
    if (!q.allFinite()) throw ConfigError("action values must be finite");
    SortedSupport out;
    out.order.resize(static_cast<std::size_t>(q.size()));
    std::iota(out.order.begin(), out.order.end(), 0);
    std::stable_sort(out.order.begin(), out.order.end(), [&](ActionId a, ActionId b) { return q[a] > q[b]; });

    double cumulative = 0.0;
    for (std::size_t i = 0; i < out.order.size(); ++i) {
        const double qi = q[out.order[i]];
        const auto count = static_cast<double>(i + 1);
        if (!(lambda + count * qi > cumulative + qi)) break;
        cumulative += qi;
        out.size = i + 1;
    }
    out.mean = cumulative / static_cast<double>(out.size);
    return out;
}

}  // namespace

std::vector<ActionId> support_set(const Vector& q, double lambda) {
    auto sorted = analyze(q, lambda);
    sorted.order.resize(sorted.size);
    return sorted.order;
}

Vector sparse_policy(const Vector& q, double lambda) {
    const auto sorted = analyze(q, lambda);
    const double base = 1.0 / static_cast<double>(sorted.size);
    Vector pi = Vector::Zero(q.size());
    for (std::size_t i = 0; i < sorted.size; ++i) {
        const ActionId a = sorted.order[i];
        pi[a] = std::max(0.0, (q[a] - sorted.mean) / lambda + base);
    }
    return pi / pi.sum();
}

double proximal_bellman_value(const Vector& q, double lambda) {
    const Vector pi = sparse_policy(q, lambda);
    double value = q.dot(pi);
    for (Eigen::Index a = 0; a < pi.size(); ++a) value += lambda * ProximitySpec::d(pi[a]);
    return value;
}

double bias_bound(double lambda, std::size_t support_size) {
    require_lambda(lambda);
    if (support_size < 1) throw ConfigError("support size must be at least 1");
    return 0.5 * lambda - 0.5 * lambda / static_cast<double>(support_size);
}

KKTMultipliers kkt_multipliers(const Vector& q, double lambda) {
    const auto sorted = analyze(q, lambda);
    const Vector pi = sparse_policy(q, lambda);
    KKTMultipliers out;
    out.Psi = -0.5 * lambda * pi.squaredNorm();
    out.psi = Vector::Zero(q.size());
    const double level = sorted.mean - lambda / static_cast<double>(sorted.size);
    for (std::size_t i = sorted.size; i < sorted.order.size(); ++i) {
        const ActionId a = sorted.order[i];
        out.psi[a] = std::max(0.0, level - q[a]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Kernel

Vector KernelSpec::embed(const StateVector& s, ActionId a, std::size_t action_count) const {
    if (center.size() != s.size() || scale.size() != s.size()) throw ConfigError("kernel is not resolved for this state");
    Vector z = Vector::Zero(s.size() + static_cast<Eigen::Index>(action_count));
    z.head(s.size()) = ((s - center).array() / scale.array()).matrix();
    z[s.size() + a] = action_scale;
    return z;
}

double KernelSpec::operator()(const Vector& z1, const Vector& z2) const {
    const double h = *bandwidth;
    return std::exp(-(z1 - z2).squaredNorm() / (2.0 * h * h));
}

KernelSpec resolve_kernel(KernelSpec spec, const OfflineDataset& ds) {
    if (!(spec.zeta > 0.0)) throw ConfigError("kernel scale zeta must be positive");
    if (!(spec.action_scale >= 0.0)) throw ConfigError("kernel action scale must be nonnegative");
    if (spec.bandwidth && !(*spec.bandwidth > 0.0)) throw ConfigError("kernel bandwidth must be positive");
    const auto d = static_cast<Eigen::Index>(ds.state_dim());

    std::vector<const StateVector*> states;
    std::vector<ActionId> actions;
    for (const auto& traj : ds.trajectories()) {
        for (std::size_t t = 0; t < traj.transition_count(); ++t) {
            states.push_back(&traj.states[t]);
            actions.push_back(traj.actions[t]);
        }
    }
    const auto m = static_cast<double>(states.size());

    if (spec.center.size() == 0) {
        spec.center = Vector::Zero(d);
        for (const auto* s : states) spec.center += *s;
        spec.center /= m;
    }
    if (spec.scale.size() == 0) {
        spec.scale = Vector::Zero(d);
        for (const auto* s : states) spec.scale += (*s - spec.center).array().square().matrix();
        spec.scale = (spec.scale / m).array().sqrt().matrix();
        for (Eigen::Index j = 0; j < d; ++j) {
            if (!(spec.scale[j] > 1e-12)) spec.scale[j] = 1.0;
        }
    }
    if (spec.center.size() != d || spec.scale.size() != d) throw ConfigError("kernel center/scale dimension mismatch");

    if (!spec.bandwidth) {
        // Median pairwise distance over at most 1000 evenly strided transitions.
        const std::size_t stride = std::max<std::size_t>(1, (states.size() + 999) / 1000);
        std::vector<Vector> z;
        for (std::size_t i = 0; i < states.size(); i += stride) {
            z.push_back(spec.embed(*states[i], actions[i], ds.action_count()));
        }
        std::vector<double> dist;
        for (std::size_t i = 0; i < z.size(); ++i) {
            for (std::size_t j = i + 1; j < z.size(); ++j) dist.push_back((z[i] - z[j]).norm());
        }
        double median = 0.0;
        if (!dist.empty()) {
            auto mid = dist.begin() + static_cast<std::ptrdiff_t>(dist.size() / 2);
            std::nth_element(dist.begin(), mid, dist.end());
            median = *mid;
        }
        spec.bandwidth = median > 1e-12 ? median : 1.0;
    }
    return spec;
}

// ---------------------------------------------------------------------------
// Model

namespace {

FeatureBasis make_q_basis(const FeatureBasis& state_basis, std::size_t action_count, QFeatures kind) {
    if (kind == QFeatures::ActionBlocks) return state_basis.with_actions(action_count);
    if (state_basis.kind() != FeatureBasis::Kind::Polynomial) {
        throw ConfigError("ordinal action features need a polynomial state basis");
    }
    const auto d = static_cast<Eigen::Index>(state_basis.state_dim());
    Vector center = Vector::Zero(d + 1);
    Vector scale = Vector::Ones(d + 1);
    if (state_basis.center().size() == d) center.head(d) = state_basis.center();
    if (state_basis.scale().size() == d) scale.head(d) = state_basis.scale();
    // Moments of the uniform distribution on {0, ..., A-1}.
    const auto A = static_cast<double>(action_count);
    center[d] = 0.5 * (A - 1.0);
    scale[d] = std::max(1.0, std::sqrt((A * A - 1.0) / 12.0));
    return FeatureBasis::polynomial(state_basis.state_dim() + 1, state_basis.degree(), center, scale);
}

}  // namespace

PTModel::PTModel(FeatureBasis state_basis, std::size_t action_count, double gamma_in, double lambda_in,
                 QFeatures q_features)
    : v_model(state_basis),
      q_model(make_q_basis(state_basis, action_count, q_features)),
      q_features_kind(q_features),
      gamma(gamma_in),
      lambda(lambda_in),
      action_count_(action_count) {
    if (state_basis.is_state_action()) throw ConfigError("pT value basis must be state-only");
    if (action_count < 1) throw ConfigError("pT needs at least one action");
    require_discount(gamma);
    require_lambda(lambda);
}

namespace {

std::size_t tabular_index(const StateVector& s, std::size_t state_count) {
    if (s.size() != 1 || s[0] < 0.0 || s[0] != std::floor(s[0]) || s[0] >= static_cast<double>(state_count)) {
        throw Error("unenumerated state");
    }
    return static_cast<std::size_t>(s[0]);
}

Matrix state_feature_matrix(const FeatureBasis& basis, std::size_t S) {
    Matrix phi(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(basis.dimension()));
    for (std::size_t s = 0; s < S; ++s) phi.row(static_cast<Eigen::Index>(s)) = basis.evaluate(index_state(s)).transpose();
    return phi;
}

}  // namespace

Matrix PTModel::q_features(const StateVector& s) const {
    const auto A = static_cast<Eigen::Index>(action_count_);
    const auto q = static_cast<Eigen::Index>(q_model.basis.dimension());
    Matrix out(A, q);
    if (q_features_kind == QFeatures::ActionBlocks) {
        for (Eigen::Index a = 0; a < A; ++a) out.row(a) = q_model.basis.evaluate(s, static_cast<ActionId>(a)).transpose();
        return out;
    }
    Vector x(s.size() + 1);
    x.head(s.size()) = s;
    for (Eigen::Index a = 0; a < A; ++a) {
        x[s.size()] = static_cast<double>(a);
        out.row(a) = q_model.basis.evaluate(x).transpose();
    }
    return out;
}

Vector PTModel::q_values(const StateVector& s) const {
    if (!mdp) return q_features(s) * q_model.theta;
    const std::size_t S = mdp->state_count();
    const std::size_t idx = tabular_index(s, S);
    Vector values(static_cast<Eigen::Index>(S));
    for (std::size_t k = 0; k < S; ++k) values[static_cast<Eigen::Index>(k)] = v_model.value(index_state(k));
    Vector q(static_cast<Eigen::Index>(mdp->action_count()));
    for (std::size_t a = 0; a < mdp->action_count(); ++a) {
        double total = 0.0;
        for (std::size_t next = 0; next < S; ++next) {
            const double pr = mdp->probability(idx, static_cast<ActionId>(a), next);
            if (pr != 0.0) total += pr * (mdp->reward(idx, static_cast<ActionId>(a), next) + gamma * values[static_cast<Eigen::Index>(next)]);
        }
        q[static_cast<Eigen::Index>(a)] = total;
    }
    return q;
}

StochasticPolicy PTModel::as_policy() const {
    const PTModel self = *this;
    return StochasticPolicy(action_count(), [self](const StateVector& s) { return self.policy(s); });
}

double pt_error(const PTModel& model, const TransitionSample& sample, double pi_prob) {
    if (!(pi_prob >= 0.0 && pi_prob <= 1.0)) throw ConfigError("policy probability must lie in [0, 1]");
    const auto mult = model.multipliers(sample.state);
    return sample.reward + model.gamma * model.v_model.value(sample.next_state) +
           model.lambda * ProximitySpec::d_prime(pi_prob) - mult.Psi + mult.psi[sample.action] -
           model.v_model.value(sample.state);
}

PTPrediction predict(const PTModel& model, const StateVector& s) {
    PTPrediction out;
    out.pmf = model.policy(s);
    out.recommended = argmax_lowest(out.pmf);
    return out;
}

double pt_value_lower_bound(double value, double lambda, double gamma) {
    require_discount(gamma);
    return value - lambda * ProximitySpec::phi(0.0) / (1.0 - gamma);
}

// ---------------------------------------------------------------------------
// Loss

double u_statistic(const std::vector<Vector>& errors, const std::vector<Matrix>& grams, double zeta) {
    if (errors.size() != grams.size()) throw ConfigError("one Gram matrix per trajectory is required");
    double total = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < errors.size(); ++i) {
        const Vector& e = errors[i];
        const Eigen::Index m = e.size();
        if (m < 2) continue;
        const double quad = e.dot(grams[i] * e) - (grams[i].diagonal().array() * e.array().square()).sum();
        total += zeta * quad / static_cast<double>(m * (m - 1));
        ++used;
    }
    if (used == 0) throw DatasetError("kernel U-statistic needs a trajectory with at least two transitions");
    return total / static_cast<double>(used);
}

namespace {

// Transitions of the usable trajectories with everything the loss and its
// gradient need that does not depend on the parameters.
struct Workspace {
    std::vector<std::size_t> begin;  // per usable trajectory, into the flat arrays
    std::vector<Matrix> grams;
    Matrix feat;       // m x p, V features of s_t
    Matrix feat_next;  // m x p, V features of s_{t+1}
    std::vector<ActionId> actions;
    Vector rewards;
    std::vector<Matrix> q_feat;       // per transition, A x dim(q_basis)
    std::vector<std::size_t> cells;  // tabular mode
    // Tabular mode: Q(s, .) = r_bar(s) + gamma M(s) theta_V.
    Matrix r_bar;             // S x A
    std::vector<Matrix> m_s;  // per state, A x p
    double zeta = 1.0;
    double gamma = 0.9;
    double lambda = 1.0;
    std::size_t action_count = 0;
    bool tabular = false;
};

Workspace prepare(const PTModel& model, const OfflineDataset& ds) {
    if (!model.kernel.resolved()) throw ConfigError("kernel must be resolved before evaluating the loss");
    if (ds.action_count() != model.action_count()) throw ConfigError("dataset and model disagree on action count");
    Workspace w;
    w.zeta = model.kernel.zeta;
    w.gamma = model.gamma;
    w.lambda = model.lambda;
    w.action_count = model.action_count();
    w.tabular = model.mdp.has_value();
    const auto& basis = model.v_model.basis;
    const auto p = static_cast<Eigen::Index>(basis.dimension());

    std::size_t m = 0;
    for (const auto& traj : ds.trajectories()) {
        if (traj.transition_count() >= 2) m += traj.transition_count();
    }
    if (m == 0) throw DatasetError("kernel U-statistic needs a trajectory with at least two transitions");
    w.feat.resize(static_cast<Eigen::Index>(m), p);
    w.feat_next.resize(static_cast<Eigen::Index>(m), p);
    w.rewards.resize(static_cast<Eigen::Index>(m));

    std::size_t row = 0;
    for (const auto& traj : ds.trajectories()) {
        const std::size_t len = traj.transition_count();
        if (len < 2) continue;
        w.begin.push_back(row);
        std::vector<Vector> z;
        for (std::size_t t = 0; t < len; ++t, ++row) {
            const auto r = static_cast<Eigen::Index>(row);
            w.feat.row(r) = basis.evaluate(traj.states[t]).transpose();
            w.feat_next.row(r) = basis.evaluate(traj.states[t + 1]).transpose();
            w.actions.push_back(traj.actions[t]);
            w.rewards[r] = traj.rewards[t];
            z.push_back(model.kernel.embed(traj.states[t], traj.actions[t], w.action_count));
            if (w.tabular) {
                w.cells.push_back(tabular_index(traj.states[t], model.mdp->state_count()));
            } else {
                w.q_feat.push_back(model.q_features(traj.states[t]));
            }
        }
        Matrix gram(static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(len));
        for (std::size_t t = 0; t < len; ++t) {
            for (std::size_t u = 0; u <= t; ++u) {
                const double k = model.kernel(z[t], z[u]);
                gram(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(u)) = k;
                gram(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(t)) = k;
            }
        }
        w.grams.push_back(std::move(gram));
    }
    w.begin.push_back(row);

    if (w.tabular) {
        const auto& mdp = *model.mdp;
        const std::size_t S = mdp.state_count();
        const Matrix phi = state_feature_matrix(basis, S);
        w.r_bar = mdp.expected_reward();
        w.m_s.assign(S, Matrix(static_cast<Eigen::Index>(w.action_count), p));
        for (std::size_t a = 0; a < w.action_count; ++a) {
            const Matrix pphi = mdp.transition(static_cast<ActionId>(a)) * phi;
            for (std::size_t s = 0; s < S; ++s) {
                w.m_s[s].row(static_cast<Eigen::Index>(a)) = pphi.row(static_cast<Eigen::Index>(s));
            }
        }
    }
    return w;
}

struct Evaluation {
    double loss = 0.0;
    Vector grad_v;
    Vector grad_q;  // unused in tabular mode
};

// e_t = r + gamma V(s') - V(s) + B_lambda Q(s) - Q(s, a_t), which equals the
// pT-error once pi, Psi and psi are taken from the same Q. B_lambda has
// gradient pi with respect to Q.
Evaluation evaluate(const Workspace& w, const Vector& theta_v, const Vector& theta_q, bool with_gradient) {
    const Eigen::Index m = w.feat.rows();
    const auto A = static_cast<Eigen::Index>(w.action_count);
    Vector errors(m);
    Matrix pis(m, A);
    const Vector v = w.feat * theta_v;
    const Vector v_next = w.feat_next * theta_v;
    for (Eigen::Index j = 0; j < m; ++j) {
        Vector q;
        if (w.tabular) {
            const std::size_t s = w.cells[static_cast<std::size_t>(j)];
            q = w.r_bar.row(static_cast<Eigen::Index>(s)).transpose() + w.gamma * (w.m_s[s] * theta_v);
        } else {
            q = w.q_feat[static_cast<std::size_t>(j)] * theta_q;
        }
        const Vector pi = sparse_policy(q, w.lambda);
        double backup = q.dot(pi);
        for (Eigen::Index a = 0; a < A; ++a) backup += w.lambda * ProximitySpec::d(pi[a]);
        errors[j] = w.rewards[j] + w.gamma * v_next[j] - v[j] + backup - q[w.actions[static_cast<std::size_t>(j)]];
        pis.row(j) = pi.transpose();
    }

    Evaluation out;
    const std::size_t usable = w.grams.size();
    Vector weight = Vector::Zero(m);  // d loss / d e
    for (std::size_t i = 0; i < usable; ++i) {
        const auto b = static_cast<Eigen::Index>(w.begin[i]);
        const auto len = static_cast<Eigen::Index>(w.begin[i + 1]) - b;
        const Vector e = errors.segment(b, len);
        const Matrix& K = w.grams[i];
        const Vector ke = K * e - (K.diagonal().array() * e.array()).matrix();
        const double norm = w.zeta / static_cast<double>(len * (len - 1)) / static_cast<double>(usable);
        out.loss += norm * e.dot(ke);
        weight.segment(b, len) = 2.0 * norm * ke;
    }
    if (!with_gradient) return out;

    out.grad_v = (w.gamma * w.feat_next - w.feat).transpose() * weight;
    out.grad_q = Vector::Zero(theta_q.size());
    for (Eigen::Index j = 0; j < m; ++j) {
        if (weight[j] == 0.0) continue;
        Vector dq = pis.row(j).transpose();
        dq[w.actions[static_cast<std::size_t>(j)]] -= 1.0;
        if (w.tabular) {
            out.grad_v += (weight[j] * w.gamma) * (w.m_s[w.cells[static_cast<std::size_t>(j)]].transpose() * dq);
        } else {
            out.grad_q += weight[j] * (w.q_feat[static_cast<std::size_t>(j)].transpose() * dq);
        }
    }
    return out;
}

// theta_Q = base + slope theta_V solves the surrogate regression for every theta_V.
struct SurrogateMap {
    Vector base;
    Matrix slope;
};

SurrogateMap surrogate_map(const Workspace& w, double ridge) {
    if (!(ridge >= 0.0)) throw ConfigError("surrogate ridge must be nonnegative");
    const Eigen::Index m = w.feat.rows();
    const Eigen::Index q = w.q_feat.front().cols();
    Matrix X(m, q);
    for (Eigen::Index j = 0; j < m; ++j) X.row(j) = w.q_feat[static_cast<std::size_t>(j)].row(w.actions[static_cast<std::size_t>(j)]);
    const double inv_m = 1.0 / static_cast<double>(m);
    Matrix gram = inv_m * (X.transpose() * X);
    gram.diagonal().array() += ridge;
    const Eigen::CompleteOrthogonalDecomposition<Matrix> solver(gram);
    SurrogateMap out;
    out.base = solver.solve(inv_m * (X.transpose() * w.rewards));
    out.slope = solver.solve((inv_m * w.gamma) * (X.transpose() * w.feat_next));
    return out;
}

}  // namespace

void fit_q_surrogate(PTModel& model, const OfflineDataset& ds, double ridge) {
    if (model.mdp) return;
    KernelSpec saved = model.kernel;
    if (!model.kernel.resolved()) model.kernel = resolve_kernel(model.kernel, ds);
    const Workspace w = prepare(model, ds);
    model.kernel = saved;
    const auto map = surrogate_map(w, ridge);
    model.q_model.theta = map.base + map.slope * model.v_model.theta;
}

double kernel_u_loss(const PTModel& model, const OfflineDataset& ds) {
    const Workspace w = prepare(model, ds);
    return evaluate(w, model.v_model.theta, model.q_model.theta, false).loss;
}

Vector kernel_u_loss_gradient(const PTModel& model, const OfflineDataset& ds) {
    const Workspace w = prepare(model, ds);
    const auto ev = evaluate(w, model.v_model.theta, model.q_model.theta, true);
    if (w.tabular) return ev.grad_v;
    Vector out(ev.grad_v.size() + ev.grad_q.size());
    out << ev.grad_v, ev.grad_q;
    return out;
}

// ---------------------------------------------------------------------------
// Fitting

namespace {

enum class Mode { Tabular, Regression, Joint };

struct SecondOrder {
    double loss = 0.0;
    Vector grad;
    Matrix hess;
};

// Gradient and Hessian of the loss in the free parameters: theta_V, or (theta_V, theta_Q)
// under Mode::Joint. Each e_j depends on the parameters through V (linearly) and through
// Q(s_j, .) = G_j x, where B_lambda has gradient pi and Hessian (I_K - 11'/|K|) / lambda
// on the support K.
// Spread of the observed rewards over 1 - gamma, a bound on the action-value gaps.
double value_spread(const Workspace& w) {
    if (w.rewards.size() == 0) return 0.0;
    return (w.rewards.maxCoeff() - w.rewards.minCoeff()) / (1.0 - w.gamma);
}

// Every fixed point of B_lambda lies in [min r, max r + lambda (1 - 1/|A|) / 2] / (1 - gamma).
// A root whose fitted values at the observed states leave that range by more than half its
// width is an artifact of the indefinite loss.
bool admissible(const Workspace& w, const Vector& theta_v) {
    if (w.rewards.size() == 0) return true;
    const double bonus = 0.5 * w.lambda * (1.0 - 1.0 / static_cast<double>(w.action_count));
    const double lo = w.rewards.minCoeff() / (1.0 - w.gamma);
    const double hi = (w.rewards.maxCoeff() + bonus) / (1.0 - w.gamma);
    const double margin = 0.5 * (hi - lo);
    const Vector v = w.feat * theta_v;
    return v.minCoeff() >= lo - margin && v.maxCoeff() <= hi + margin;
}

SecondOrder second_order(const Workspace& w, const Vector& theta_v, const Vector& theta_q, Mode mode,
                         const SurrogateMap& map) {
    const Eigen::Index m = w.feat.rows();
    const auto A = static_cast<Eigen::Index>(w.action_count);
    const Eigen::Index p = w.feat.cols();
    const Eigen::Index dim = mode == Mode::Joint ? p + theta_q.size() : p;

    Vector errors(m);
    Matrix jac = Matrix::Zero(m, dim);
    std::vector<Matrix> dq(static_cast<std::size_t>(m));  // A x dim
    std::vector<Vector> pis(static_cast<std::size_t>(m));
    jac.leftCols(p) = w.gamma * w.feat_next - w.feat;
    const Vector v = w.feat * theta_v;
    const Vector v_next = w.feat_next * theta_v;
    for (Eigen::Index j = 0; j < m; ++j) {
        const auto ju = static_cast<std::size_t>(j);
        Matrix g;
        Vector q;
        if (mode == Mode::Tabular) {
            const std::size_t s = w.cells[ju];
            g = w.gamma * w.m_s[s];
            q = w.r_bar.row(static_cast<Eigen::Index>(s)).transpose() + g * theta_v;
        } else if (mode == Mode::Regression) {
            g = w.q_feat[ju] * map.slope;
            q = w.q_feat[ju] * theta_q;
        } else {
            g = Matrix::Zero(A, dim);
            g.rightCols(theta_q.size()) = w.q_feat[ju];
            q = w.q_feat[ju] * theta_q;
        }
        const Vector pi = sparse_policy(q, w.lambda);
        double backup = q.dot(pi);
        for (Eigen::Index a = 0; a < A; ++a) backup += w.lambda * ProximitySpec::d(pi[a]);
        const ActionId taken = w.actions[ju];
        errors[j] = w.rewards[j] + w.gamma * v_next[j] - v[j] + backup - q[taken];
        Vector de_dq = pi;
        de_dq[taken] -= 1.0;
        jac.row(j) += (g.transpose() * de_dq).transpose();
        dq[ju] = g;
        pis[ju] = pi;
    }

    SecondOrder out;
    out.hess = Matrix::Zero(dim, dim);
    Vector weight = Vector::Zero(m);
    const std::size_t usable = w.grams.size();
    for (std::size_t i = 0; i < usable; ++i) {
        const auto b = static_cast<Eigen::Index>(w.begin[i]);
        const auto len = static_cast<Eigen::Index>(w.begin[i + 1]) - b;
        Matrix k = w.grams[i];
        k.diagonal().setZero();
        const double norm = w.zeta / static_cast<double>(len * (len - 1)) / static_cast<double>(usable);
        const Vector e = errors.segment(b, len);
        const Vector ke = k * e;
        out.loss += norm * e.dot(ke);
        weight.segment(b, len) = 2.0 * norm * ke;
        const auto block = jac.middleRows(b, len);
        out.hess.noalias() += (2.0 * norm) * (block.transpose() * k * block);
    }
    out.grad = jac.transpose() * weight;
    for (Eigen::Index j = 0; j < m; ++j) {
        if (weight[j] == 0.0) continue;
        const auto ju = static_cast<std::size_t>(j);
        const Vector& pi = pis[ju];
        const auto support = (pi.array() > 0.0).count();
        if (support < 2) continue;
        // (I_K - 11'/|K|) / lambda applied through the rows of dq on the support.
        Matrix rows(support, dim);
        Eigen::Index r = 0;
        for (Eigen::Index a = 0; a < A; ++a) {
            if (pi[a] > 0.0) rows.row(r++) = dq[ju].row(a);
        }
        const Vector mean = rows.colwise().mean().transpose();
        rows.rowwise() -= mean.transpose();
        out.hess.noalias() += (weight[j] / w.lambda) * (rows.transpose() * rows);
    }
    return out;
}

}  // namespace

PTFit fit_pt_lambda(const OfflineDataset& ds, const FeatureBasis& state_basis, double gamma, double lambda,
                    const PTConfig& config) {
    if (!(config.step_value > 0.0) || !(config.step_policy > 0.0)) throw ConfigError("step sizes must be positive");
    if (!(config.decay >= 0.0)) throw ConfigError("decay rate must be nonnegative");

    PTModel model(state_basis, ds.action_count(), gamma, lambda, config.q_features);
    model.mdp = config.mdp;
    if (model.mdp && model.mdp->action_count() != ds.action_count()) {
        throw ConfigError("MDP and dataset disagree on action count");
    }
    model.kernel = config.kernel.resolved() ? config.kernel : resolve_kernel(config.kernel, ds);
    Workspace w = prepare(model, ds);
    const Mode mode = w.tabular ? Mode::Tabular : config.q_fit == QFit::Regression ? Mode::Regression : Mode::Joint;
    const SurrogateMap map = mode == Mode::Regression ? surrogate_map(w, config.ridge) : SurrogateMap{};
    const auto p = model.v_model.theta.size();

    Vector theta_v = model.v_model.theta;
    Vector theta_q = model.q_model.theta;
    auto sync = [&] {
        if (mode == Mode::Regression) theta_q = map.base + map.slope * theta_v;
    };

    PTFit fit{model, 0.0, 0, false, {}, {}};
    // Newton keeps the iterate with the smallest gradient; descent the one with the smallest loss.
    double best = std::numeric_limits<double>::infinity();
    auto keep = [&](double score, std::size_t k, double loss) {
        if (!(score < best)) return;
        best = score;
        fit.model.v_model.theta = theta_v;
        fit.model.q_model.theta = theta_q;
        fit.iterations = k;
        fit.loss = loss;
    };

    if (config.solver == PTSolver::Newton) {
        // Newton iterations at the workspace's lambda from the current parameters. Only
        // iterates at the requested lambda are candidates for the returned fit.
        auto newton = [&](std::size_t& k, std::size_t budget) {
            sync();
            auto so = second_order(w, theta_v, theta_q, mode, map);
            for (std::size_t iter = 0;; ++iter, ++k) {
                if (!std::isfinite(so.loss) || !so.grad.allFinite()) return false;
                const double norm = so.grad.norm();
                if (w.lambda == lambda) keep(norm, k, so.loss);
                if (norm <= config.tol) return true;
                if (iter >= budget) return false;
                const Vector step = so.hess.completeOrthogonalDecomposition().solve(so.grad);
                // Halve the step until the gradient norm drops. At kinks, where the support of pi
                // changes, no fraction may help; the full step is then taken.
                const Vector base_v = theta_v;
                const Vector base_q = theta_q;
                auto trial = [&](double t) {
                    theta_v = base_v - t * step.head(p);
                    if (mode == Mode::Joint) theta_q = base_q - t * step.tail(step.size() - p);
                    sync();
                    return second_order(w, theta_v, theta_q, mode, map);
                };
                auto better = [&](const SecondOrder& c) { return std::isfinite(c.loss) && c.grad.norm() < norm; };
                double t = 1.0;
                auto next = trial(t);
                while (!better(next) && t > 1e-6) {
                    t *= 0.5;
                    next = trial(t);
                }
                if (!better(next)) next = trial(1.0);
                so = std::move(next);
            }
        };
        // Newton either converges within a few dozen steps or cycles, so the direct attempt is short.
        std::size_t k = 0;
        fit.converged = newton(k, std::min<std::size_t>(config.max_iter, 100));
        if (!fit.converged || !admissible(w, fit.model.v_model.theta)) {
            const PTFit direct = fit;
            const double direct_best = best;
            best = std::numeric_limits<double>::infinity();
            // Continuation: at large lambda every action is in the support and B_lambda is
            // smooth, so Newton converges from zero; halve lambda with warm starts from there.
            const double top = std::max(lambda, 2.0 * value_spread(w));
            int levels = 0;
            while (levels < 60 && lambda * std::ldexp(1.0, levels) < top) ++levels;
            theta_v.setZero();
            theta_q = model.q_model.theta;
            for (int j = levels; j >= 1; --j) {
                w.lambda = lambda * std::ldexp(1.0, j);
                newton(k, std::min<std::size_t>(config.max_iter, 100));
            }
            w.lambda = lambda;
            fit.converged = newton(k, config.max_iter);
            if (direct.converged && !fit.converged) {
                fit = direct;
                best = direct_best;
            }
        }
        if (fit.converged && !admissible(w, fit.model.v_model.theta)) {
            fit.warnings.push_back("pT fit (lambda " + std::to_string(lambda) +
                                   ") converged to values outside the range attainable from the observed rewards");
        }
    } else {
        for (std::size_t k = 0;; ++k) {
            sync();
            const auto ev = evaluate(w, theta_v, theta_q, true);
            if (!std::isfinite(ev.loss)) break;
            Vector grad_v = ev.grad_v;
            if (mode == Mode::Regression) grad_v += map.slope.transpose() * ev.grad_q;
            const bool joint = mode == Mode::Joint;
            const double grad_norm = std::sqrt(grad_v.squaredNorm() + (joint ? ev.grad_q.squaredNorm() : 0.0));
            if (grad_norm <= config.tol) {
                best = -std::numeric_limits<double>::infinity();
                fit.model.v_model.theta = theta_v;
                fit.model.q_model.theta = theta_q;
                fit.iterations = k;
                fit.loss = ev.loss;
                fit.converged = true;
                break;
            }
            keep(ev.loss, k, ev.loss);
            if (k >= config.max_iter) break;
            const double shrink = 1.0 / (1.0 + config.decay * static_cast<double>(k));
            theta_v -= (config.step_value * shrink) * grad_v;
            if (joint) theta_q -= (config.step_policy * shrink) * ev.grad_q;
        }
    }
    if (!fit.converged) {
        std::ostringstream msg;
        msg << "pT fit (lambda " << lambda << ") stopped without reaching gradient tolerance " << config.tol << "; best "
            << (config.solver == PTSolver::Newton ? "gradient norm " : "loss ") << best << " kept";
        fit.warnings.push_back(msg.str());
    }
    return fit;
}

PTFit fit_pt(const OfflineDataset& ds, const FeatureBasis& state_basis, double gamma, const PTConfig& config) {
    require_discount(gamma);
    if (config.lambda_grid.empty()) throw ConfigError("lambda grid is empty");
    for (double lambda : config.lambda_grid) require_lambda(lambda);

    PTConfig resolved = config;
    resolved.kernel = config.kernel.resolved() ? config.kernel : resolve_kernel(config.kernel, ds);

    if (config.lambda_grid.size() == 1) return fit_pt_lambda(ds, state_basis, gamma, config.lambda_grid[0], resolved);

    std::vector<std::string> warnings;
    std::vector<double> scores(config.lambda_grid.size(), 0.0);
    const std::size_t folds = std::min(config.folds, ds.size());
    if (config.cross_validate && folds >= 2) {
        for (std::size_t g = 0; g < config.lambda_grid.size(); ++g) {
            std::size_t counted = 0;
            for (std::size_t f = 0; f < folds; ++f) {
                std::vector<std::size_t> train, held;
                for (std::size_t i = 0; i < ds.size(); ++i) (i % folds == f ? held : train).push_back(i);
                const auto held_ds = ds.subset(held);
                bool usable = false;
                for (const auto& traj : held_ds.trajectories()) usable = usable || traj.transition_count() >= 2;
                if (!usable) continue;
                const auto part = fit_pt_lambda(ds.subset(train), state_basis, gamma, config.lambda_grid[g], resolved);
                scores[g] += kernel_u_loss(part.model, held_ds);
                ++counted;
            }
            if (counted == 0) throw DatasetError("no cross-validation fold has a usable held-out trajectory");
            scores[g] /= static_cast<double>(counted);
        }
    } else {
        if (config.cross_validate) warnings.push_back("too few trajectories for cross-validation; in-sample loss used");
        for (std::size_t g = 0; g < config.lambda_grid.size(); ++g) {
            scores[g] = fit_pt_lambda(ds, state_basis, gamma, config.lambda_grid[g], resolved).loss;
        }
    }

    std::size_t chosen = 0;
    for (std::size_t g = 1; g < scores.size(); ++g) {
        if (scores[g] < scores[chosen]) chosen = g;
    }
    PTFit fit = fit_pt_lambda(ds, state_basis, gamma, config.lambda_grid[chosen], resolved);
    if (config.cross_validate && folds >= 2) fit.cv_loss = scores;
    fit.warnings.insert(fit.warnings.begin(), warnings.begin(), warnings.end());
    return fit;
}

// ---------------------------------------------------------------------------
// Proximal value iteration

Vector proximal_bellman_operator(const TabularMDP& mdp, const Vector& values, double gamma, double lambda) {
    const Matrix q = mdp.q_values(values, gamma);
    Vector out(q.rows());
    for (Eigen::Index s = 0; s < q.rows(); ++s) out[s] = proximal_bellman_value(q.row(s).transpose(), lambda);
    return out;
}

ProximalVIResult proximal_value_iteration(const TabularMDP& mdp, double gamma, double lambda, double tol,
                                          std::size_t max_iter) {
    require_discount(gamma);
    require_lambda(lambda);
    ProximalVIResult out;
    out.values = Vector::Zero(static_cast<Eigen::Index>(mdp.state_count()));
    for (std::size_t k = 0;; ++k) {
        const Vector next = proximal_bellman_operator(mdp, out.values, gamma, lambda);
        out.residual = (next - out.values).lpNorm<Eigen::Infinity>();
        out.iterations = k;
        if (out.residual <= tol) break;
        if (k >= max_iter) {
            std::ostringstream msg;
            msg << "proximal value iteration did not reach tolerance " << tol << " (residual " << out.residual << ")";
            throw Error(msg.str());
        }
        out.values = next;
    }
    out.q = mdp.q_values(out.values, gamma);
    out.policy.resize(out.q.rows(), out.q.cols());
    for (Eigen::Index s = 0; s < out.q.rows(); ++s) out.policy.row(s) = sparse_policy(out.q.row(s).transpose(), lambda).transpose();
    return out;
}

}  // namespace proxdtr
