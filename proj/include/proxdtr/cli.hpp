#pragma once

// Support code for the command-line tool: stacked CSV files, run
// configuration, model files, and the command implementations.

#include "proxdtr/core.hpp"
#include "proxdtr/simulators.hpp"

#include <json.hpp>

#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace proxdtr::cli {

inline constexpr const char* kToolName = "proxdtr";
inline constexpr const char* kToolVersion = "0.1.0";

/// Process exit codes.
enum ExitCode : int { kSuccess = 0, kValidationError = 1, kConvergenceFailure = 2 };

// ---------------------------------------------------------------------------
// Stacked trajectory files
//
// The state file has a header and n (T + 1) rows: rows 1..n hold stage 0 of
// trajectories 1..n, the next n rows stage 1, and so on. The action and
// reward files have one column each and n T rows in the same layout. Actions
// are 0-based in files.

struct StackedData {
    std::vector<std::string> state_columns;
    OfflineDataset dataset;
    ValidationReport report;
};

/// `action_count` defaults to the largest observed action + 1.
StackedData ingest(const std::string& states_path, const std::string& actions_path, const std::string& rewards_path,
                   std::size_t n, std::size_t stages, std::optional<std::size_t> action_count = std::nullopt);

/// Parses the three tables from in-memory text (used by ingest).
StackedData parse_stacked(const std::string& states_csv, const std::string& actions_csv,
                          const std::string& rewards_csv, std::size_t n, std::size_t stages,
                          std::optional<std::size_t> action_count = std::nullopt);

struct StackedText {
    std::string states;
    std::string actions;
    std::string rewards;
};

/// Inverse of parse_stacked. Every trajectory must have the same length.
StackedText format_stacked(const OfflineDataset& ds, const std::vector<std::string>& state_columns);

void write_stacked(const OfflineDataset& ds, const std::vector<std::string>& state_columns,
                   const std::string& states_path, const std::string& actions_path, const std::string& rewards_path);

/// Shortest decimal text that reads back to the same double.
std::string format_number(double x);

// ---------------------------------------------------------------------------
// Configuration

/// Flat key=value settings; '#' starts a comment. Unknown keys and keys that
/// do not apply to the chosen method are errors.
class RunConfig {
public:
    static RunConfig parse(const std::string& text);
    static RunConfig load(const std::string& path);

    const std::map<std::string, std::string>& entries() const { return entries_; }
    bool has(const std::string& key) const { return entries_.count(key) > 0; }
    std::string method() const;

    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    std::size_t get_size(const std::string& key, std::size_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const;

    void set(const std::string& key, const std::string& value);

    /// "key=value\n" lines in key order.
    std::string canonical() const;
    /// FNV-1a 64 of canonical(), as 16 hex digits.
    std::string hash() const;

    /// Throws ConfigError for a method/key mismatch or an invalid value.
    void check_method() const;

private:
    std::map<std::string, std::string> entries_;
};

/// 64-bit FNV-1a.
std::uint64_t fnv1a(const std::string& text);

// ---------------------------------------------------------------------------
// Environments

/// Builds the environment named by `env` (glucose, chain or mdp).
std::unique_ptr<Environment> make_environment(const RunConfig& config);

/// Observed-behavior policy used for data generation and as the evaluation baseline.
StochasticPolicy behavior_policy(const RunConfig& config, const Environment& env);

/// Text MDP format: "states N", "actions M", then lines "s a s' probability reward".
TabularMDP parse_mdp(const std::string& text);
TabularMDP load_mdp(const std::string& path);

/// Default state column names for an environment.
std::vector<std::string> state_columns(const RunConfig& config, const Environment& env);

// ---------------------------------------------------------------------------
// Models

/// Fits the configured method and returns the model document. `converged`
/// is false when the method reported non-convergence.
nlohmann::json fit_model(const RunConfig& config, const OfflineDataset& ds, const std::vector<std::string>& columns,
                         bool& converged);

/// A fitted model loaded from its document.
class LoadedModel {
public:
    explicit LoadedModel(const nlohmann::json& doc);

    const std::string& method() const { return method_; }
    std::size_t state_dim() const { return state_dim_; }
    std::size_t action_count() const { return action_count_; }
    double gamma() const { return gamma_; }
    bool has_policy() const { return policy_.has_value(); }
    /// Policy for infinite-horizon use (stage 0 rule for backward induction).
    const StochasticPolicy& policy() const;
    /// Value estimate for value-only models.
    std::optional<double> value(const StateVector& s) const;
    /// pT sparsity parameter, when the model is a pT model.
    std::optional<double> lambda() const { return lambda_; }
    const nlohmann::json& document() const { return doc_; }

private:
    nlohmann::json doc_;
    std::string method_;
    std::size_t state_dim_ = 0;
    std::size_t action_count_ = 0;
    double gamma_ = 0.0;
    std::optional<double> lambda_;
    std::optional<StochasticPolicy> policy_;
    std::optional<LinearFunctional> values_;
};

nlohmann::json read_json(const std::string& path);
/// Pretty-printed with a trailing newline, so equal documents give equal bytes.
void write_json(const nlohmann::json& doc, const std::string& path);
std::string dump_json(const nlohmann::json& doc);

/// Comma-separated state vector.
StateVector parse_state(const std::string& text);

/// Record with prob (full pmf) and recommend_trt (1-based), or value for value-only models.
nlohmann::json predict_record(const LoadedModel& model, const StateVector& s);

struct EvaluationRow {
    std::string policy;
    double mean = 0.0;
    double se = 0.0;
    double improvement = 0.0;
    std::optional<double> lower_bound;
};

/// Monte-Carlo comparison of the learned policy with the behavior policy.
std::vector<EvaluationRow> evaluate_model(const LoadedModel& model, const RunConfig& env_config, std::size_t m,
                                          std::uint64_t seed);

/// Delimited table with tool, version and config hash columns.
std::string format_evaluation(const std::vector<EvaluationRow>& rows, const std::string& config_hash);

}  // namespace proxdtr::cli
