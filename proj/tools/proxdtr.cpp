// Command-line front end. Actions are 0-based in data files and 1-based in
// prediction output (recommend_trt).

#include "proxdtr/cli.hpp"

#include <CLI11.hpp>

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace {

using namespace proxdtr;
using namespace proxdtr::cli;

struct Options {
    std::string data;
    std::string actions;
    std::string rewards;
    std::size_t n = 0;
    std::size_t stages = 0;
    std::string config;
    std::string model;
    std::string state;
    std::optional<std::uint64_t> seed;
    std::string out;
};

RunConfig load_config(const Options& opt) {
    RunConfig config = opt.config.empty() ? RunConfig() : RunConfig::load(opt.config);
    if (opt.seed) config.set("seed", std::to_string(*opt.seed));
    return config;
}

std::optional<std::size_t> configured_actions(const RunConfig& config) {
    if (!config.has("action_count")) return std::nullopt;
    return config.get_size("action_count", 0);
}

std::size_t resolve_count(std::size_t flag, const RunConfig& config, const std::string& key, const std::string& name) {
    if (flag > 0) return flag;
    const std::size_t value = config.get_size(key, 0);
    if (value == 0) throw ConfigError("pass --" + name + " or set " + key + " in the config");
    return value;
}

StackedData load_data(const Options& opt, const RunConfig& config) {
    return ingest(opt.data, opt.actions, opt.rewards, resolve_count(opt.n, config, "n_trajectories", "n"),
                  resolve_count(opt.stages, config, "stages", "stages"), configured_actions(config));
}

void emit(const std::string& text, const std::string& out) {
    if (out.empty()) {
        std::cout << text;
    } else {
        std::ofstream file(out, std::ios::binary);
        if (!file) throw ConfigError("cannot write " + out);
        file << text;
    }
}

int run_validate(const Options& opt) {
    const RunConfig config = load_config(opt);
    const auto data = load_data(opt, config);
    nlohmann::json report;
    report["tool"] = kToolName;
    report["version"] = kToolVersion;
    report["config_hash"] = config.hash();
    report["trajectories"] = data.report.trajectory_count;
    report["transitions"] = data.report.transition_count;
    report["state_columns"] = data.state_columns;
    report["action_frequency"] = data.report.action_frequency;
    report["unobserved_actions"] = data.report.unobserved_actions;
    report["warnings"] = data.report.warnings;
    emit(dump_json(report), opt.out);
    return kSuccess;
}

int run_fit(const Options& opt) {
    const RunConfig config = load_config(opt);
    config.check_method();
    const auto data = load_data(opt, config);
    for (const auto& w : data.report.warnings) std::cerr << "warning: " << w << '\n';
    bool converged = true;
    const auto doc = fit_model(config, data.dataset, data.state_columns, converged);
    if (opt.out.empty()) throw ConfigError("fit needs --out for the model file");
    write_json(doc, opt.out);
    if (!converged) {
        std::cerr << "warning: " << config.method() << " did not converge; model written to " << opt.out << '\n';
        return kConvergenceFailure;
    }
    return kSuccess;
}

int run_predict(const Options& opt) {
    const LoadedModel model(read_json(opt.model));
    emit(dump_json(predict_record(model, parse_state(opt.state))), opt.out);
    return kSuccess;
}

int run_evaluate(const Options& opt) {
    const RunConfig config = load_config(opt);
    const LoadedModel model(read_json(opt.model));
    const std::size_t reps = config.get_size("mc_reps", 200);
    if (reps < 2) throw ConfigError("mc_reps must be at least 2");
    const auto seed = static_cast<std::uint64_t>(config.get_size("seed", 0));
    const auto rows = evaluate_model(model, config, reps, seed);
    emit(format_evaluation(rows, model.document().at("config_hash").get<std::string>()), opt.out);
    return kSuccess;
}

int run_simulate(const Options& opt) {
    const RunConfig config = load_config(opt);
    if (opt.out.empty()) throw ConfigError("simulate needs --out as the output file prefix");
    const auto env = make_environment(config);
    const auto behavior = behavior_policy(config, *env);
    const auto seed = static_cast<std::uint64_t>(config.get_size("seed", 0));
    const auto ds = generate_dataset(*env, behavior, resolve_count(opt.n, config, "n_trajectories", "n"),
                                     resolve_count(opt.stages, config, "stages", "stages"), seed);
    write_stacked(ds, state_columns(config, *env), opt.out + "_states.csv", opt.out + "_actions.csv",
                  opt.out + "_rewards.csv");
    return kSuccess;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Offline dynamic treatment regime learning"};
    app.set_version_flag("--version", std::string(kToolName) + " " + kToolVersion);
    app.require_subcommand(1);
    Options opt;

    const auto data_flags = [&opt](CLI::App* cmd) {
        cmd->add_option("--data", opt.data, "Stacked state CSV")->required();
        cmd->add_option("--actions", opt.actions, "Action CSV (0-based indices)")->required();
        cmd->add_option("--rewards", opt.rewards, "Reward CSV")->required();
        cmd->add_option("--n", opt.n, "Number of trajectories");
        cmd->add_option("--stages", opt.stages, "Transitions per trajectory");
    };
    const auto seed_flag = [&opt](CLI::App* cmd) {
        cmd->add_option_function<std::uint64_t>("--seed", [&opt](const std::uint64_t& s) { opt.seed = s; },
                                                "Overrides the config seed");
    };

    auto* validate = app.add_subcommand("validate", "Check a stacked dataset and print its report");
    data_flags(validate);
    validate->add_option("--config", opt.config, "Run configuration");
    validate->add_option("--out", opt.out, "Report file (default stdout)");

    auto* fit = app.add_subcommand("fit", "Fit a model and write it as JSON");
    data_flags(fit);
    fit->add_option("--config", opt.config, "Run configuration")->required();
    fit->add_option("--out", opt.out, "Model file")->required();
    seed_flag(fit);

    auto* predict = app.add_subcommand("predict", "Action probabilities for one state");
    predict->add_option("--model", opt.model, "Model file")->required();
    predict->add_option("--state", opt.state, "Comma-separated state vector")->required();
    predict->add_option("--out", opt.out, "Output file (default stdout)");

    auto* evaluate = app.add_subcommand("evaluate", "Monte-Carlo comparison against the behavior policy");
    evaluate->add_option("--model", opt.model, "Model file")->required();
    evaluate->add_option("--config", opt.config, "Environment configuration");
    evaluate->add_option("--out", opt.out, "CSV file (default stdout)");
    seed_flag(evaluate);

    auto* simulate = app.add_subcommand("simulate", "Generate stacked trajectory files");
    simulate->add_option("--config", opt.config, "Environment configuration");
    simulate->add_option("--n", opt.n, "Number of trajectories");
    simulate->add_option("--stages", opt.stages, "Transitions per trajectory");
    simulate->add_option("--out", opt.out, "Output prefix")->required();
    seed_flag(simulate);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kSuccess : kValidationError;
    }

    try {
        if (*validate) return run_validate(opt);
        if (*fit) return run_fit(opt);
        if (*predict) return run_predict(opt);
        if (*evaluate) return run_evaluate(opt);
        if (*simulate) return run_simulate(opt);
    } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kConvergenceFailure;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kValidationError;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kValidationError;
    }
    return kValidationError;
}
