#include "proxdtr/cli.hpp"

#include "proxdtr/estimating_eq.hpp"
#include "proxdtr/pt_learning.hpp"
#include "proxdtr/residual_gradient.hpp"
#include "proxdtr/tabular.hpp"
#include "proxdtr/td.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace proxdtr::cli {

using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path);
    out << text;
    if (!out) throw ConfigError("write failed for " + path);
}

std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return "";
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, sep)) out.push_back(trim(cell));
    if (!line.empty() && line.back() == sep) out.emplace_back();
    return out;
}

std::optional<double> to_double(const std::string& text) {
    if (text.empty()) return std::nullopt;
    double value = 0.0;
    const char* begin = text.data();
    const char* end = begin + text.size();
    if (*begin == '+') ++begin;
    const auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end) return std::nullopt;
    return value;
}

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;
};

Table parse_table(const std::string& text, const std::string& block) {
    Table table;
    std::istringstream in(text);
    std::string line;
    bool have_header = false;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        if (!have_header) {
            table.header = split(trim(line), ',');
            for (const auto& name : table.header) {
                if (name.empty()) throw DatasetError(block + ": empty column name in header");
                if (to_double(name)) throw DatasetError(block + ": header row is mandatory (got numeric '" + name + "')");
            }
            have_header = true;
            continue;
        }
        ++row;
        const auto cells = split(trim(line), ',');
        if (cells.size() != table.header.size()) {
            std::ostringstream msg;
            msg << block << ": row " << row << " has " << cells.size() << " cells, expected " << table.header.size();
            throw DatasetError(msg.str());
        }
        std::vector<double> values;
        for (std::size_t c = 0; c < cells.size(); ++c) {
            const auto v = to_double(cells[c]);
            if (!v) {
                std::ostringstream msg;
                msg << block << ": non-numeric cell '" << cells[c] << "' at row " << row << ", column " << (c + 1)
                    << " (" << table.header[c] << ")";
                throw DatasetError(msg.str());
            }
            values.push_back(*v);
        }
        table.rows.push_back(std::move(values));
    }
    if (!have_header) throw DatasetError(block + ": file is empty");
    return table;
}

void require_rows(const Table& table, std::size_t expected, const std::string& block) {
    if (table.rows.size() != expected) {
        std::ostringstream msg;
        msg << block << ": count mismatch, " << table.rows.size() << " rows but " << expected << " expected";
        throw DatasetError(msg.str());
    }
}

}  // namespace

std::string format_number(double x) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
    if (ec != std::errc()) throw Error("number formatting failed");
    return std::string(buf, ptr);
}

// ---------------------------------------------------------------------------
// Stacked files

StackedData parse_stacked(const std::string& states_csv, const std::string& actions_csv,
                          const std::string& rewards_csv, std::size_t n, std::size_t stages,
                          std::optional<std::size_t> action_count) {
    if (n < 1) throw ConfigError("number of trajectories must be positive");
    if (stages < 1) throw ConfigError("number of stages must be positive");
    const Table states = parse_table(states_csv, "states");
    const Table actions = parse_table(actions_csv, "actions");
    const Table rewards = parse_table(rewards_csv, "rewards");
    require_rows(states, n * (stages + 1), "states");
    require_rows(actions, n * stages, "actions");
    require_rows(rewards, n * stages, "rewards");
    if (actions.header.size() != 1) throw DatasetError("actions: expected exactly one column");
    if (rewards.header.size() != 1) throw DatasetError("rewards: expected exactly one column");

    std::size_t max_action = 0;
    for (std::size_t r = 0; r < actions.rows.size(); ++r) {
        const double a = actions.rows[r][0];
        if (a < 0.0 || a != std::floor(a)) {
            std::ostringstream msg;
            msg << "actions: row " << (r + 1) << " is not a nonnegative integer action index";
            throw DatasetError(msg.str());
        }
        max_action = std::max(max_action, static_cast<std::size_t>(a));
    }
    const std::size_t A = action_count.value_or(max_action + 1);
    for (std::size_t r = 0; r < actions.rows.size(); ++r) {
        if (static_cast<std::size_t>(actions.rows[r][0]) >= A) {
            throw DatasetError("action out of range at row " + std::to_string(r + 1));
        }
    }

    const auto d = static_cast<Eigen::Index>(states.header.size());
    std::vector<Trajectory> trajs(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto& traj = trajs[i];
        for (std::size_t t = 0; t <= stages; ++t) {
            const auto& row = states.rows[t * n + i];
            traj.states.push_back(Eigen::Map<const Vector>(row.data(), d));
        }
        for (std::size_t t = 0; t < stages; ++t) {
            traj.actions.push_back(static_cast<ActionId>(actions.rows[t * n + i][0]));
            traj.rewards.push_back(rewards.rows[t * n + i][0]);
        }
    }
    OfflineDataset ds(std::move(trajs), static_cast<std::size_t>(d), A);
    auto report = validate_dataset(ds);
    return {states.header, std::move(ds), std::move(report)};
}

StackedData ingest(const std::string& states_path, const std::string& actions_path, const std::string& rewards_path,
                   std::size_t n, std::size_t stages, std::optional<std::size_t> action_count) {
    return parse_stacked(read_file(states_path), read_file(actions_path), read_file(rewards_path), n, stages,
                         action_count);
}

StackedText format_stacked(const OfflineDataset& ds, const std::vector<std::string>& state_columns) {
    const std::size_t n = ds.size();
    const std::size_t T = ds.trajectories().front().transition_count();
    for (const auto& traj : ds.trajectories()) {
        if (traj.transition_count() != T) throw DatasetError("stacked layout needs equal-length trajectories");
    }
    if (state_columns.size() != ds.state_dim()) throw ConfigError("one column name per state coordinate is required");

    StackedText out;
    std::ostringstream s, a, r;
    for (std::size_t j = 0; j < state_columns.size(); ++j) s << (j ? "," : "") << state_columns[j];
    s << '\n';
    a << "action\n";
    r << "reward\n";
    for (std::size_t t = 0; t <= T; ++t) {
        for (std::size_t i = 0; i < n; ++i) {
            const auto& st = ds.trajectories()[i].states[t];
            for (Eigen::Index j = 0; j < st.size(); ++j) s << (j ? "," : "") << format_number(st[j]);
            s << '\n';
        }
    }
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t i = 0; i < n; ++i) {
            a << ds.trajectories()[i].actions[t] << '\n';
            r << format_number(ds.trajectories()[i].rewards[t]) << '\n';
        }
    }
    out.states = s.str();
    out.actions = a.str();
    out.rewards = r.str();
    return out;
}

void write_stacked(const OfflineDataset& ds, const std::vector<std::string>& state_columns,
                   const std::string& states_path, const std::string& actions_path, const std::string& rewards_path) {
    const auto text = format_stacked(ds, state_columns);
    write_file(states_path, text.states);
    write_file(actions_path, text.actions);
    write_file(rewards_path, text.rewards);
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

const std::set<std::string>& common_keys() {
    static const std::set<std::string> keys = {
        "method", "gamma", "seed", "basis", "degree", "states", "radial_centers", "radial_bandwidth",
        "action_count", "n_trajectories", "stages", "env", "chain_states", "chain_slip", "chain_left_reward",
        "mdp_file", "behavior_epsilon", "mc_reps", "glucose_carb_effect", "glucose_dose_effect",
        "glucose_activity_effect", "glucose_reversion", "glucose_target", "glucose_noise_sd", "glucose_meal_prob",
        "glucose_carb_min", "glucose_carb_max", "glucose_activity_mean", "glucose_activity_sd",
        "glucose_initial_mean", "glucose_initial_sd", "glucose_doses"};
    return keys;
}

const std::map<std::string, std::set<std::string>>& method_keys() {
    static const std::map<std::string, std::set<std::string>> keys = {
        {"backward_induction", {"window", "tie_tol"}},
        {"td_on", {"step", "decay_steps", "passes"}},
        {"td_off", {"step", "decay_steps", "passes", "ratio_cap", "target", "propensity", "floor"}},
        {"rg", {"step", "max_iter", "tol"}},
        {"ggq", {"max_iter", "tol", "damping"}},
        {"vlearn", {"propensity", "floor", "ridge", "initial_step", "min_step", "max_sweeps"}},
        {"pt", {"lambda_grid", "solver", "step_value", "step_policy", "ridge", "q_actions", "q_fit", "decay", "max_iter", "tol", "bandwidth", "zeta",
                "action_scale", "cv", "folds"}},
    };
    return keys;
}

bool known_key(const std::string& key) {
    if (common_keys().count(key)) return true;
    for (const auto& [method, keys] : method_keys()) {
        if (keys.count(key)) return true;
    }
    return false;
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
    RunConfig config;
    std::istringstream in(text);
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(number) + ": expected key=value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (!known_key(key)) throw ConfigError("config line " + std::to_string(number) + ": unknown key '" + key + "'");
        if (config.entries_.count(key)) {
            throw ConfigError("config line " + std::to_string(number) + ": duplicate key '" + key + "'");
        }
        config.entries_[key] = value;
    }
    return config;
}

RunConfig RunConfig::load(const std::string& path) { return parse(read_file(path)); }

std::string RunConfig::method() const { return get_string("method", ""); }

std::string RunConfig::get_string(const std::string& key, const std::string& fallback) const {
    const auto it = entries_.find(key);
    return it == entries_.end() ? fallback : it->second;
}

double RunConfig::get_double(const std::string& key, double fallback) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    const auto v = to_double(it->second);
    if (!v || !std::isfinite(*v)) throw ConfigError("config key '" + key + "' needs a number, got '" + it->second + "'");
    return *v;
}

std::size_t RunConfig::get_size(const std::string& key, std::size_t fallback) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    std::size_t value = 0;
    const auto& s = it->second;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
        throw ConfigError("config key '" + key + "' needs a nonnegative integer, got '" + s + "'");
    }
    return value;
}

bool RunConfig::get_bool(const std::string& key, bool fallback) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    const auto& s = it->second;
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("config key '" + key + "' needs true or false, got '" + s + "'");
}

std::vector<double> RunConfig::get_doubles(const std::string& key, std::vector<double> fallback) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    std::vector<double> out;
    for (const auto& cell : split(it->second, ',')) {
        const auto v = to_double(cell);
        if (!v || !std::isfinite(*v)) throw ConfigError("config key '" + key + "' needs a comma-separated number list");
        out.push_back(*v);
    }
    if (out.empty()) throw ConfigError("config key '" + key + "' is empty");
    return out;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (!known_key(key)) throw ConfigError("unknown key '" + key + "'");
    entries_[key] = value;
}

std::string RunConfig::canonical() const {
    std::string out;
    for (const auto& [key, value] : entries_) out += key + "=" + value + "\n";
    return out;
}

std::uint64_t fnv1a(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string RunConfig::hash() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(canonical())));
    return buf;
}

void RunConfig::check_method() const {
    const std::string m = method();
    if (m.empty()) throw ConfigError("config needs a method");
    const auto it = method_keys().find(m);
    if (it == method_keys().end()) throw ConfigError("unknown method '" + m + "'");
    for (const auto& [key, value] : entries_) {
        if (common_keys().count(key) || it->second.count(key)) continue;
        throw ConfigError("config key '" + key + "' does not apply to method " + m);
    }
    const double gamma = get_double("gamma", m == "backward_induction" ? 1.0 : 0.9);
    if (m == "backward_induction") {
        if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
    } else {
        require_discount(gamma);
    }
    for (const char* key : {"step", "step_value", "step_policy", "damping", "tol", "initial_step", "min_step",
                            "decay_steps", "ratio_cap", "zeta"}) {
        if (has(key) && !(get_double(key, 1.0) > 0.0)) throw ConfigError(std::string("config key '") + key + "' must be positive");
    }
    if (has("decay") && !(get_double("decay", 0.0) >= 0.0)) throw ConfigError("config key 'decay' must be nonnegative");
    if (has("lambda_grid")) {
        for (double l : get_doubles("lambda_grid", {})) {
            if (!(l > 0.0)) throw ConfigError("lambda_grid entries must be positive");
        }
    }
    if (has("bandwidth") && get_string("bandwidth", "") != "median" && !(get_double("bandwidth", 1.0) > 0.0)) {
        throw ConfigError("bandwidth must be positive or 'median'");
    }
}

// ---------------------------------------------------------------------------
// Environments

TabularMDP parse_mdp(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::optional<std::size_t> S, A;
    std::vector<Matrix> P, R;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream fields(line);
        std::string head;
        if (!(fields >> head)) continue;
        const std::string where = "MDP line " + std::to_string(number);
        if (head == "states" || head == "actions") {
            long long count = 0;
            if (!(fields >> count) || count <= 0) throw ConfigError(where + ": expected a positive count");
            (head == "states" ? S : A) = static_cast<std::size_t>(count);
            if (S && A && P.empty()) {
                P.assign(*A, Matrix::Zero(static_cast<Eigen::Index>(*S), static_cast<Eigen::Index>(*S)));
                R.assign(*A, Matrix::Zero(static_cast<Eigen::Index>(*S), static_cast<Eigen::Index>(*S)));
            }
            continue;
        }
        if (!S || !A) throw ConfigError(where + ": 'states' and 'actions' must come first");
        std::istringstream row(line);
        long long s = 0, a = 0, next = 0;
        double prob = 0.0, reward = 0.0;
        if (!(row >> s >> a >> next >> prob >> reward)) throw ConfigError(where + ": expected s a s' probability reward");
        if (s < 0 || next < 0 || a < 0 || static_cast<std::size_t>(s) >= *S || static_cast<std::size_t>(next) >= *S ||
            static_cast<std::size_t>(a) >= *A) {
            throw ConfigError(where + ": index out of range");
        }
        P[static_cast<std::size_t>(a)](s, next) += prob;
        R[static_cast<std::size_t>(a)](s, next) = reward;
    }
    if (!S || !A) throw ConfigError("MDP file needs 'states' and 'actions' lines");
    return TabularMDP(std::move(P), std::move(R));
}

TabularMDP load_mdp(const std::string& path) { return parse_mdp(read_file(path)); }

std::unique_ptr<Environment> make_environment(const RunConfig& config) {
    const std::string env = config.get_string("env", "glucose");
    if (env == "glucose") {
        GlucoseParams p;
        p.carb_effect = config.get_double("glucose_carb_effect", p.carb_effect);
        p.dose_effect = config.get_double("glucose_dose_effect", p.dose_effect);
        p.activity_effect = config.get_double("glucose_activity_effect", p.activity_effect);
        p.reversion = config.get_double("glucose_reversion", p.reversion);
        p.target = config.get_double("glucose_target", p.target);
        p.noise_sd = config.get_double("glucose_noise_sd", p.noise_sd);
        p.meal_prob = config.get_double("glucose_meal_prob", p.meal_prob);
        p.carb_min = config.get_double("glucose_carb_min", p.carb_min);
        p.carb_max = config.get_double("glucose_carb_max", p.carb_max);
        p.activity_mean = config.get_double("glucose_activity_mean", p.activity_mean);
        p.activity_sd = config.get_double("glucose_activity_sd", p.activity_sd);
        p.initial_mean = config.get_double("glucose_initial_mean", p.initial_mean);
        p.initial_sd = config.get_double("glucose_initial_sd", p.initial_sd);
        p.doses = config.get_size("glucose_doses", p.doses);
        return std::make_unique<GlucoseEnv>(p);
    }
    if (env == "chain") {
        return std::make_unique<ChainEnv>(chain_mdp(config.get_size("chain_states", 5),
                                                    config.get_double("chain_slip", 0.1),
                                                    config.get_double("chain_left_reward", 0.2)));
    }
    if (env == "mdp") {
        if (!config.has("mdp_file")) throw ConfigError("env=mdp needs mdp_file");
        return std::make_unique<ChainEnv>(load_mdp(config.get_string("mdp_file", "")));
    }
    throw ConfigError("unknown env '" + env + "' (expected glucose, chain or mdp)");
}

StochasticPolicy behavior_policy(const RunConfig& config, const Environment& env) {
    const double eps = config.get_double("behavior_epsilon", 0.3);
    if (dynamic_cast<const GlucoseEnv*>(&env)) return glucose_behavior_policy(env.action_count(), eps);
    return StochasticPolicy::uniform(env.action_count());
}

std::vector<std::string> state_columns(const RunConfig&, const Environment& env) {
    if (dynamic_cast<const GlucoseEnv*>(&env)) return {"glucose", "activity", "carbs"};
    return {"state"};
}

// ---------------------------------------------------------------------------
// Bases and models

namespace {

json to_json(const Vector& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
    return out;
}

json to_json(const Matrix& m) {
    json out = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) out.push_back(to_json(Vector(m.row(r).transpose())));
    return out;
}

Vector vector_from(const json& j) {
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j.at(i).get<double>();
    return v;
}

Matrix matrix_from(const json& j) {
    if (j.empty()) return Matrix();
    Matrix m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(j.at(0).size()));
    for (std::size_t r = 0; r < j.size(); ++r) m.row(static_cast<Eigen::Index>(r)) = vector_from(j.at(r)).transpose();
    return m;
}

void state_moments(const OfflineDataset& ds, Vector& mean, Vector& sd) {
    const auto d = static_cast<Eigen::Index>(ds.state_dim());
    mean = Vector::Zero(d);
    sd = Vector::Zero(d);
    double count = 0.0;
    for (const auto& traj : ds.trajectories()) {
        for (const auto& s : traj.states) {
            mean += s;
            count += 1.0;
        }
    }
    mean /= count;
    for (const auto& traj : ds.trajectories()) {
        for (const auto& s : traj.states) sd += (s - mean).array().square().matrix();
    }
    sd = (sd / count).array().sqrt().matrix();
    for (Eigen::Index j = 0; j < d; ++j) {
        if (!(sd[j] > 1e-12)) sd[j] = 1.0;
    }
}

FeatureBasis make_basis(const RunConfig& config, const OfflineDataset& ds) {
    const std::string kind = config.get_string("basis", "polynomial");
    if (kind == "tabular") {
        if (ds.state_dim() != 1) throw ConfigError("tabular basis needs scalar index states");
        std::size_t S = 0;
        for (const auto& traj : ds.trajectories()) {
            for (const auto& s : traj.states) {
                if (s[0] < 0.0 || s[0] != std::floor(s[0])) throw DatasetError("tabular states must be nonnegative integers");
                S = std::max(S, static_cast<std::size_t>(s[0]) + 1);
            }
        }
        const std::size_t declared = config.get_size("states", S);
        if (declared < S) throw ConfigError("config 'states' is smaller than the largest observed state");
        return FeatureBasis::tabular(declared);
    }
    Vector mean, sd;
    state_moments(ds, mean, sd);
    if (kind == "polynomial") {
        const auto degree = static_cast<int>(config.get_size("degree", 2));
        if (degree < 1) throw ConfigError("polynomial degree must be at least 1");
        return FeatureBasis::polynomial(ds.state_dim(), degree, mean, sd);
    }
    if (kind == "radial") {
        const std::size_t k = config.get_size("radial_centers", 3);
        if (k < 1) throw ConfigError("radial_centers must be at least 1");
        const auto d = static_cast<Eigen::Index>(ds.state_dim());
        std::size_t total = 1;
        for (Eigen::Index j = 0; j < d; ++j) total *= k;
        Matrix centers(static_cast<Eigen::Index>(total), d);
        for (std::size_t c = 0; c < total; ++c) {
            std::size_t rest = c;
            for (Eigen::Index j = 0; j < d; ++j) {
                const std::size_t idx = rest % k;
                rest /= k;
                centers(static_cast<Eigen::Index>(c), j) =
                    k == 1 ? 0.0 : -1.5 + 3.0 * static_cast<double>(idx) / static_cast<double>(k - 1);
            }
        }
        return FeatureBasis::radial(centers, config.get_double("radial_bandwidth", 1.0), mean, sd);
    }
    throw ConfigError("unknown basis '" + kind + "' (expected tabular, polynomial or radial)");
}

json basis_to_json(const FeatureBasis& b) {
    json out;
    switch (b.kind()) {
    case FeatureBasis::Kind::TabularIndicator:
        out["kind"] = "tabular";
        out["states"] = b.state_features();
        break;
    case FeatureBasis::Kind::Polynomial:
        out["kind"] = "polynomial";
        out["state_dim"] = b.state_dim();
        out["degree"] = b.degree();
        out["center"] = to_json(b.center());
        out["scale"] = to_json(b.scale());
        break;
    case FeatureBasis::Kind::RadialGrid:
        out["kind"] = "radial";
        out["centers"] = to_json(b.centers());
        out["bandwidth"] = b.bandwidth();
        out["center"] = to_json(b.center());
        out["scale"] = to_json(b.scale());
        break;
    }
    return out;
}

FeatureBasis basis_from_json(const json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "tabular") return FeatureBasis::tabular(j.at("states").get<std::size_t>());
    if (kind == "polynomial") {
        return FeatureBasis::polynomial(j.at("state_dim").get<std::size_t>(), j.at("degree").get<int>(),
                                        vector_from(j.at("center")), vector_from(j.at("scale")));
    }
    if (kind == "radial") {
        return FeatureBasis::radial(matrix_from(j.at("centers")), j.at("bandwidth").get<double>(),
                                    vector_from(j.at("center")), vector_from(j.at("scale")));
    }
    throw ConfigError("model file has unknown basis kind '" + kind + "'");
}

PropensityModel make_propensity(const RunConfig& config, const OfflineDataset& ds, const FeatureBasis& basis) {
    const bool tabular = basis.kind() == FeatureBasis::Kind::TabularIndicator;
    const std::string kind = config.get_string("propensity", tabular ? "empirical" : "logistic");
    const double floor = config.get_double("floor", 0.01);
    if (kind == "empirical") return estimate_propensity(ds, PropensityModel::Kind::EmpiricalTabular, basis, floor);
    if (kind == "logistic") return estimate_propensity(ds, PropensityModel::Kind::MultinomialLogistic, basis, floor);
    throw ConfigError("unknown propensity '" + kind + "' (expected empirical or logistic)");
}

StochasticPolicy parse_target(const std::string& text, std::size_t actions) {
    if (text == "uniform") return StochasticPolicy::uniform(actions);
    const std::string prefix = "constant:";
    if (text.rfind(prefix, 0) == 0) {
        const auto v = to_double(text.substr(prefix.size()));
        if (!v || *v < 0.0 || *v != std::floor(*v)) throw ConfigError("target constant:K needs an action index");
        return StochasticPolicy::constant(actions, static_cast<ActionId>(*v));
    }
    throw ConfigError("unknown target policy '" + text + "' (expected uniform or constant:K)");
}

QFeatures q_features_from(const std::string& text) {
    if (text == "blocks") return QFeatures::ActionBlocks;
    if (text == "ordinal") return QFeatures::OrdinalAction;
    throw ConfigError("unknown q_actions '" + text + "' (expected blocks or ordinal)");
}

json config_echo(const RunConfig& config) {
    json out = json::object();
    for (const auto& [key, value] : config.entries()) out[key] = value;
    return out;
}

}  // namespace

json fit_model(const RunConfig& config, const OfflineDataset& ds, const std::vector<std::string>& columns,
               bool& converged) {
    config.check_method();
    const std::string method = config.method();
    const double gamma = config.get_double("gamma", method == "backward_induction" ? 1.0 : 0.9);
    const FeatureBasis basis = make_basis(config, ds);
    const std::size_t A = ds.action_count();

    json doc;
    doc["tool"] = kToolName;
    doc["version"] = kToolVersion;
    doc["config_hash"] = config.hash();
    doc["method"] = method;
    doc["config"] = config_echo(config);
    doc["state_dim"] = ds.state_dim();
    doc["state_columns"] = columns;
    doc["action_count"] = A;
    doc["gamma"] = gamma;
    doc["basis"] = basis_to_json(basis);

    json params;
    json diag;
    std::vector<std::string> warnings = validate_dataset(ds).warnings;
    converged = true;

    if (method == "backward_induction") {
        const std::size_t horizon = ds.trajectories().front().transition_count();
        BackwardInductionConfig bic;
        bic.window = config.get_size("window", 0);
        bic.tie_tol = config.get_double("tie_tol", 1e-9);
        const auto result = backward_induction(ds, horizon, basis, bic);
        params["horizon"] = horizon;
        params["window"] = bic.window;
        params["tie_tol"] = bic.tie_tol;
        json stages = json::array();
        for (const auto& rule : result.stages) stages.push_back(to_json(rule.coefficients()));
        params["stages"] = stages;
    } else if (method == "td_on" || method == "td_off") {
        TDRunConfig tdc;
        tdc.schedule.scale = config.get_double("step", 0.05);
        tdc.schedule.decay_steps = config.get_double("decay_steps", 1000.0);
        tdc.passes = config.get_size("passes", 1);
        tdc.ratio_cap = config.get_double("ratio_cap", 100.0);
        std::optional<TDState> state;
        if (method == "td_on") {
            state.emplace(run_td(ds, basis, gamma, tdc));
        } else {
            const auto target = parse_target(config.get_string("target", "uniform"), A);
            const auto prop = make_propensity(config, ds, basis);
            for (const auto& f : prop.flags()) warnings.push_back("propensity " + f);
            const auto behavior = prop.as_policy();
            state.emplace(run_td(ds, basis, gamma, tdc, &target, &behavior));
            params["target"] = config.get_string("target", "uniform");
            diag["clipped_ratios"] = state->clipped;
        }
        params["theta"] = to_json(state->model.theta);
        diag["updates"] = state->steps;
        diag["msbe"] = empirical_msbe(state->model, ds, gamma);
    } else if (method == "rg") {
        RGConfig rgc;
        if (config.has("step")) rgc.step = config.get_double("step", 1.0);
        rgc.max_iter = config.get_size("max_iter", rgc.max_iter);
        rgc.tol = config.get_double("tol", rgc.tol);
        const auto fit = fit_rg(ds, basis, gamma, rgc);
        params["theta"] = to_json(fit.model.theta);
        diag["iterations"] = fit.iterations;
        diag["gradient_norm"] = fit.gradient_norm;
        diag["msbe"] = fit.msbe;
        converged = fit.converged;
    } else if (method == "ggq") {
        GGQConfig gc;
        gc.max_iter = config.get_size("max_iter", gc.max_iter);
        gc.tol = config.get_double("tol", gc.tol);
        gc.damping = config.get_double("damping", gc.damping);
        const auto fit = solve_ggq(ds, basis.with_actions(A), gamma, gc);
        params["theta"] = to_json(fit.model.q.theta);
        diag["iterations"] = fit.iterations;
        diag["residual_norm"] = fit.residual_norm;
        converged = fit.converged;
        warnings = fit.warnings;
    } else if (method == "vlearn") {
        VLearnConfig vc;
        vc.ridge = config.get_double("ridge", vc.ridge);
        vc.initial_step = config.get_double("initial_step", vc.initial_step);
        vc.min_step = config.get_double("min_step", vc.min_step);
        vc.max_sweeps = config.get_size("max_sweeps", vc.max_sweeps);
        const auto prop = make_propensity(config, ds, basis);
        for (const auto& f : prop.flags()) warnings.push_back("propensity " + f);
        const auto fit = solve_vlearning_softmax(ds, SoftmaxPolicyClass{basis, A}, basis, gamma, prop, vc);
        params["theta"] = to_json(fit.model.theta);
        params["beta"] = to_json(fit.beta);
        diag["value"] = fit.value;
        diag["sweeps"] = fit.sweeps;
        for (const auto& w : fit.warnings) warnings.push_back(w);
    } else if (method == "pt") {
        PTConfig pc;
        pc.lambda_grid = config.get_doubles("lambda_grid", {1.0});
        const std::string solver = config.get_string("solver", "newton");
        if (solver == "newton") {
            pc.solver = PTSolver::Newton;
        } else if (solver == "gd") {
            pc.solver = PTSolver::GradientDescent;
        } else {
            throw ConfigError("unknown solver '" + solver + "' (expected newton or gd)");
        }
        pc.step_value = config.get_double("step_value", pc.step_value);
        pc.step_policy = config.get_double("step_policy", pc.step_policy);
        pc.ridge = config.get_double("ridge", pc.ridge);
        const std::string q_fit = config.get_string("q_fit", "regression");
        if (q_fit == "regression") {
            pc.q_fit = QFit::Regression;
        } else if (q_fit == "joint") {
            pc.q_fit = QFit::Joint;
        } else {
            throw ConfigError("unknown q_fit '" + q_fit + "' (expected regression or joint)");
        }
        pc.q_features = q_features_from(config.get_string("q_actions", "blocks"));
        pc.decay = config.get_double("decay", pc.decay);
        pc.max_iter = config.get_size("max_iter", pc.max_iter);
        pc.tol = config.get_double("tol", pc.tol);
        if (config.has("bandwidth") && config.get_string("bandwidth", "") != "median") {
            pc.kernel.bandwidth = config.get_double("bandwidth", 1.0);
        }
        pc.kernel.zeta = config.get_double("zeta", 1.0);
        pc.kernel.action_scale = config.get_double("action_scale", 1.0);
        pc.cross_validate = config.get_bool("cv", true);
        pc.folds = config.get_size("folds", 5);
        const auto fit = fit_pt(ds, basis, gamma, pc);
        params["lambda"] = fit.model.lambda;
        params["lambda_grid"] = pc.lambda_grid;
        params["theta_v"] = to_json(fit.model.v_model.theta);
        params["q_actions"] = config.get_string("q_actions", "blocks");
        params["theta_q"] = to_json(fit.model.q_model.theta);
        json kernel;
        kernel["bandwidth"] = *fit.model.kernel.bandwidth;
        kernel["zeta"] = fit.model.kernel.zeta;
        kernel["action_scale"] = fit.model.kernel.action_scale;
        kernel["center"] = to_json(fit.model.kernel.center);
        kernel["scale"] = to_json(fit.model.kernel.scale);
        params["kernel"] = kernel;
        diag["loss"] = fit.loss;
        diag["iterations"] = fit.iterations;
        if (!fit.cv_loss.empty()) diag["cv_loss"] = fit.cv_loss;
        converged = fit.converged;
        for (const auto& w : fit.warnings) warnings.push_back(w);
    }

    diag["converged"] = converged;
    diag["warnings"] = warnings;
    doc["parameters"] = params;
    doc["diagnostics"] = diag;
    return doc;
}

LoadedModel::LoadedModel(const json& doc) : doc_(doc) {
    try {
        if (doc.at("tool").get<std::string>() != kToolName) throw ConfigError("not a model file of this tool");
        method_ = doc.at("method").get<std::string>();
        state_dim_ = doc.at("state_dim").get<std::size_t>();
        action_count_ = doc.at("action_count").get<std::size_t>();
        gamma_ = doc.at("gamma").get<double>();
        const FeatureBasis basis = basis_from_json(doc.at("basis"));
        const json& params = doc.at("parameters");
        const std::size_t A = action_count_;

        if (method_ == "backward_induction") {
            const auto window = params.at("window").get<std::size_t>();
            const auto tie_tol = params.at("tie_tol").get<double>();
            StageRule first(0, window, basis, A, matrix_from(params.at("stages").at(0)));
            policy_ = StochasticPolicy::deterministic(A, [first, tie_tol](const StateVector& s) {
                const std::vector<StateVector> states{s};
                return first.recommend(states, {}, tie_tol);
            });
        } else if (method_ == "td_on" || method_ == "td_off" || method_ == "rg") {
            values_ = LinearFunctional(vector_from(params.at("theta")), basis);
        } else if (method_ == "ggq") {
            const GGQModel model{LinearFunctional(vector_from(params.at("theta")), basis.with_actions(A)), gamma_};
            policy_ = model.policy();
        } else if (method_ == "vlearn") {
            policy_ = SoftmaxPolicyClass{basis, A}.make(vector_from(params.at("beta")));
            values_ = LinearFunctional(vector_from(params.at("theta")), basis);
        } else if (method_ == "pt") {
            lambda_ = params.at("lambda").get<double>();
            PTModel model(basis, A, gamma_, *lambda_, q_features_from(params.at("q_actions").get<std::string>()));
            model.v_model.theta = vector_from(params.at("theta_v"));
            model.q_model.theta = vector_from(params.at("theta_q"));
            if (static_cast<std::size_t>(model.v_model.theta.size()) != basis.dimension() ||
                static_cast<std::size_t>(model.q_model.theta.size()) != model.q_model.basis.dimension()) {
                throw ConfigError("model parameters do not match the basis");
            }
            const json& k = params.at("kernel");
            model.kernel.bandwidth = k.at("bandwidth").get<double>();
            model.kernel.zeta = k.at("zeta").get<double>();
            model.kernel.action_scale = k.at("action_scale").get<double>();
            model.kernel.center = vector_from(k.at("center"));
            model.kernel.scale = vector_from(k.at("scale"));
            policy_ = model.as_policy();
        } else {
            throw ConfigError("model file has unknown method '" + method_ + "'");
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed model file: ") + e.what());
    }
}

const StochasticPolicy& LoadedModel::policy() const {
    if (!policy_) throw ConfigError("method " + method_ + " produces a value estimate, not a policy");
    return *policy_;
}

std::optional<double> LoadedModel::value(const StateVector& s) const {
    if (!values_) return std::nullopt;
    return values_->value(s);
}

json read_json(const std::string& path) {
    try {
        return json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw ConfigError("cannot parse " + path + ": " + e.what());
    }
}

std::string dump_json(const json& doc) { return doc.dump(2) + "\n"; }

void write_json(const json& doc, const std::string& path) { write_file(path, dump_json(doc)); }

StateVector parse_state(const std::string& text) {
    std::vector<double> values;
    for (const auto& cell : split(text, ',')) {
        const auto v = to_double(cell);
        if (!v || !std::isfinite(*v)) throw ConfigError("state entries must be finite numbers, got '" + cell + "'");
        values.push_back(*v);
    }
    if (values.empty()) throw ConfigError("empty state");
    return Eigen::Map<const Vector>(values.data(), static_cast<Eigen::Index>(values.size()));
}

json predict_record(const LoadedModel& model, const StateVector& s) {
    if (static_cast<std::size_t>(s.size()) != model.state_dim()) {
        throw ConfigError("state has " + std::to_string(s.size()) + " entries, model expects " +
                          std::to_string(model.state_dim()));
    }
    json out;
    out["tool"] = kToolName;
    out["version"] = kToolVersion;
    out["config_hash"] = model.document().at("config_hash");
    out["method"] = model.method();
    if (model.has_policy()) {
        const Vector pmf = model.policy().pmf(s);
        out["prob"] = to_json(pmf);
        out["recommend_trt"] = argmax_lowest(pmf) + 1;
    }
    if (const auto v = model.value(s)) out["value"] = *v;
    return out;
}

std::vector<EvaluationRow> evaluate_model(const LoadedModel& model, const RunConfig& env_config, std::size_t m,
                                          std::uint64_t seed) {
    if (!model.has_policy()) throw ConfigError("method " + model.method() + " has no policy to evaluate");
    if (model.method() == "backward_induction") {
        throw ConfigError("backward-induction rules are finite-horizon; evaluate needs an infinite-horizon policy");
    }
    const auto env = make_environment(env_config);
    if (env->state_dim() != model.state_dim() || env->action_count() != model.action_count()) {
        throw ConfigError("environment does not match the model's state dimension or action count");
    }
    const double gamma = model.gamma();
    const std::size_t horizon = mc_horizon(gamma, env->reward_bound());
    const auto behavior = behavior_policy(env_config, *env);

    const auto base = mc_value(*env, behavior, std::nullopt, gamma, m, horizon, seed);
    const auto learned = mc_value(*env, model.policy(), std::nullopt, gamma, m, horizon, seed);

    std::vector<EvaluationRow> rows;
    rows.push_back({"behavior", base.mean, base.standard_error, 0.0, std::nullopt});
    EvaluationRow row{model.method(), learned.mean, learned.standard_error, learned.mean - base.mean, std::nullopt};
    if (model.lambda()) row.lower_bound = pt_value_lower_bound(learned.mean, *model.lambda(), gamma);
    rows.push_back(row);
    return rows;
}

std::string format_evaluation(const std::vector<EvaluationRow>& rows, const std::string& config_hash) {
    bool any_bound = false;
    for (const auto& r : rows) any_bound = any_bound || r.lower_bound.has_value();
    std::ostringstream out;
    out << "tool,version,config_hash,policy,mean_return,se,improvement";
    if (any_bound) out << ",pt_lower_bound";
    out << '\n';
    for (const auto& r : rows) {
        out << kToolName << ',' << kToolVersion << ',' << config_hash << ',' << r.policy << ','
            << format_number(r.mean) << ',' << format_number(r.se) << ',' << format_number(r.improvement);
        if (any_bound) out << ',' << (r.lower_bound ? format_number(*r.lower_bound) : "");
        out << '\n';
    }
    return out.str();
}

}  // namespace proxdtr::cli
