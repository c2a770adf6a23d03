#include "proxdtr/cli.hpp"
#include "proxdtr/pt_learning.hpp"
#include "proxdtr/tabular.hpp"

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

using namespace proxdtr;
using namespace proxdtr::cli;
namespace fs = std::filesystem;

namespace {

const char* kStates = "x,y\n1,10\n2,20\n3,30\n4,40\n";
const char* kActions = "action\n0\n1\n";
const char* kRewards = "reward\n0.5\n-1\n";

OfflineDataset chain_data(std::size_t n, std::size_t T, std::uint64_t seed) {
    return generate_dataset(ChainEnv(chain_mdp(5)), StochasticPolicy::uniform(2), n, T, seed);
}

RunConfig tabular_config(const std::string& method_lines) {
    return RunConfig::parse("basis=tabular\nstates=5\nenv=chain\n" + method_lines);
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

void spit(const fs::path& path, const std::string& text) { std::ofstream(path, std::ios::binary) << text; }

// Exit status of a shell command.
int run(const std::string& command) {
    const int status = std::system(command.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("proxdtr_cli_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("stacked layout") {
    const auto data = parse_stacked(kStates, kActions, kRewards, 2, 1);
    const auto& ds = data.dataset;
    REQUIRE(ds.size() == 2);
    CHECK(ds.state_dim() == 2);
    CHECK(ds.action_count() == 2);
    CHECK(data.state_columns == std::vector<std::string>{"x", "y"});
    // Rows 1..n hold stage 0, the next n rows stage 1.
    const auto& first = ds.trajectories()[0];
    const auto& second = ds.trajectories()[1];
    CHECK(first.transition_count() == 1);
    CHECK(first.states[0] == Vector{{1.0, 10.0}});
    CHECK(first.states[1] == Vector{{3.0, 30.0}});
    CHECK(second.states[0] == Vector{{2.0, 20.0}});
    CHECK(second.states[1] == Vector{{4.0, 40.0}});
    CHECK(first.actions[0] == 0);
    CHECK(second.actions[0] == 1);
    CHECK(first.rewards[0] == 0.5);
    CHECK(second.rewards[0] == -1.0);
    CHECK(data.report.transition_count == 2);

    CHECK(parse_stacked(kStates, kActions, kRewards, 2, 1, 4).dataset.action_count() == 4);
}

TEST_CASE("stacked file errors") {
    CHECK_THROWS_WITH_AS(parse_stacked(kStates, "action\n0\n3\n", kRewards, 2, 1, 2),
                         doctest::Contains("action out of range at row 2"), DatasetError);
    CHECK_THROWS_WITH_AS(parse_stacked(kStates, kActions, kRewards, 3, 1), doctest::Contains("states: count mismatch"),
                         DatasetError);
    CHECK_THROWS_WITH_AS(parse_stacked("x,y\n1,10\n2,20\n3,30\n", kActions, kRewards, 2, 1),
                         doctest::Contains("states"), DatasetError);
    CHECK_THROWS_WITH_AS(parse_stacked(kStates, kActions, "reward\n0.5\n", 2, 1), doctest::Contains("rewards"),
                         DatasetError);
    CHECK_THROWS_WITH_AS(parse_stacked("x,y\n1,10\n2,abc\n3,30\n4,40\n", kActions, kRewards, 2, 1),
                         doctest::Contains("row 2, column 2"), DatasetError);
    CHECK_THROWS_WITH_AS(parse_stacked("1,10\n2,20\n3,30\n4,40\n5,50\n", kActions, kRewards, 2, 1),
                         doctest::Contains("header row is mandatory"), DatasetError);
    CHECK_THROWS_AS(parse_stacked(kStates, "action\n0\n-1\n", kRewards, 2, 1), DatasetError);
    CHECK_THROWS_AS(parse_stacked(kStates, "action\n0\n0.5\n", kRewards, 2, 1), DatasetError);
    CHECK_THROWS_AS(parse_stacked(kStates, "action,extra\n0,1\n1,1\n", kRewards, 2, 1), DatasetError);
    CHECK_THROWS_AS(parse_stacked(kStates, kActions, kRewards, 0, 1), ConfigError);
}

TEST_CASE("stacked round trip") {
    const auto text = format_stacked(parse_stacked(kStates, kActions, kRewards, 2, 1).dataset, {"x", "y"});
    CHECK(text.states == kStates);
    CHECK(text.actions == kActions);
    CHECK(text.rewards == kRewards);

    // Continuous data survives exactly thanks to shortest round-trip formatting.
    const GlucoseEnv env;
    const auto ds = generate_dataset(env, glucose_behavior_policy(env.action_count()), 4, 6, 13);
    const auto out = format_stacked(ds, {"glucose", "activity", "carbs"});
    const auto back = parse_stacked(out.states, out.actions, out.rewards, 4, 6, env.action_count()).dataset;
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(back.trajectories()[i].actions == ds.trajectories()[i].actions);
        CHECK(back.trajectories()[i].rewards == ds.trajectories()[i].rewards);
        for (std::size_t t = 0; t <= 6; ++t) CHECK(back.trajectories()[i].states[t] == ds.trajectories()[i].states[t]);
    }
    const auto again = format_stacked(back, {"glucose", "activity", "carbs"});
    CHECK(again.states == out.states);

    for (double x : {0.1, 1.0 / 3.0, -2.5e-300, 123456789.125}) CHECK(std::stod(format_number(x)) == x);
}

TEST_CASE("run configuration") {
    const auto config = RunConfig::parse("# comment\nmethod = pt\n\ngamma=0.8  # trailing\nlambda_grid=0.1, 1\n");
    CHECK(config.method() == "pt");
    CHECK(config.get_double("gamma", 0.0) == 0.8);
    CHECK(config.get_doubles("lambda_grid", {}) == std::vector<double>{0.1, 1.0});
    CHECK(config.get_double("tol", 3.0) == 3.0);
    CHECK_NOTHROW(config.check_method());

    CHECK_THROWS_WITH_AS(RunConfig::parse("method=pt\nbogus=1\n"), doctest::Contains("unknown key 'bogus'"),
                         ConfigError);
    CHECK_THROWS_WITH_AS(RunConfig::parse("gamma=1\ngamma=2\n"), doctest::Contains("duplicate key"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("gamma\n"), ConfigError);
    CHECK_THROWS_WITH_AS(RunConfig::parse("method=td_on\nlambda_grid=0.1\n").check_method(),
                         doctest::Contains("does not apply to method td_on"), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("method=pt\ngamma=1\n").check_method(), ConfigError);
    CHECK_NOTHROW(RunConfig::parse("method=backward_induction\ngamma=1\n").check_method());
    CHECK_THROWS_AS(RunConfig::parse("method=pt\nstep_value=0\n").check_method(), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("method=pt\nlambda_grid=0.5,-1\n").check_method(), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("method=magic\n").check_method(), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("gamma=abc\n").get_double("gamma", 0.9), ConfigError);
    CHECK_THROWS_AS(RunConfig::parse("cv=maybe\n").get_bool("cv", true), ConfigError);
}

TEST_CASE("config hash") {
    CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
    CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a("foobar") == 0x85944171f73967e8ULL);

    const auto a = RunConfig::parse("method=pt\ngamma=0.9\n");
    const auto b = RunConfig::parse("gamma = 0.9\n# same settings\nmethod=pt\n");
    CHECK(a.canonical() == "gamma=0.9\nmethod=pt\n");
    CHECK(a.hash() == b.hash());
    CHECK(a.hash().size() == 16);
    CHECK(a.hash() != RunConfig::parse("method=pt\ngamma=0.8\n").hash());
}

TEST_CASE("text MDP format") {
    const auto mdp = parse_mdp("states 2\nactions 1\n0 0 1 1.0 2.5  # move\n1 0 1 1.0 0\n");
    CHECK(mdp.state_count() == 2);
    CHECK(mdp.probability(0, 0, 1) == 1.0);
    CHECK(mdp.reward(0, 0, 1) == 2.5);
    CHECK_THROWS_AS(parse_mdp("0 0 1 1.0 0\n"), ConfigError);
    CHECK_THROWS_AS(parse_mdp("states 2\nactions 1\n0 0 2 1.0 0\n1 0 1 1.0 0\n"), ConfigError);
    CHECK_THROWS_AS(parse_mdp("states 2\nactions 1\n0 0 1 0.5 0\n1 0 1 1.0 0\n"), Error);
}

TEST_CASE("fit documents") {
    const auto ds = chain_data(20, 15, 3);
    const std::vector<std::string> columns{"state"};

    const auto config = tabular_config("method=pt\nlambda_grid=0.1,1\nfolds=3\n");
    bool converged = false;
    const auto doc = fit_model(config, ds, columns, converged);
    CHECK(doc.at("tool") == kToolName);
    CHECK(doc.at("version") == kToolVersion);
    CHECK(doc.at("config_hash") == config.hash());
    CHECK(doc.at("method") == "pt");
    CHECK(doc.at("config").at("lambda_grid") == "0.1,1");
    const double lambda = doc.at("parameters").at("lambda").get<double>();
    CHECK((lambda == 0.1 || lambda == 1.0));
    CHECK(doc.at("parameters").at("theta_v").size() == 5);
    CHECK(doc.at("diagnostics").at("cv_loss").size() == 2);
    CHECK(doc.at("diagnostics").contains("loss"));
    CHECK(doc.at("diagnostics").contains("iterations"));
    CHECK(doc.at("diagnostics").at("converged").get<bool>() == converged);

    // Same data and configuration, same bytes.
    bool again = false;
    CHECK(dump_json(fit_model(config, ds, columns, again)) == dump_json(doc));

    // GGQ stopped after one iteration reports non-convergence in the document.
    const auto capped = fit_model(tabular_config("method=ggq\nmax_iter=1\n"), ds, columns, converged);
    CHECK_FALSE(converged);
    CHECK_FALSE(capped.at("diagnostics").at("converged").get<bool>());
    bool warned = false;
    for (const auto& w : capped.at("diagnostics").at("warnings")) {
        warned = warned || w.get<std::string>().find("did not converge") != std::string::npos;
    }
    CHECK(warned);

    for (const char* method : {"td_on", "rg", "ggq", "vlearn"}) {
        bool ok = false;
        const auto other = fit_model(tabular_config(std::string("method=") + method + "\n"), ds, columns, ok);
        CHECK(other.at("method") == method);
        CHECK_NOTHROW(LoadedModel{other});
    }
    CHECK_THROWS_AS(fit_model(tabular_config("method=td_on\nlambda_grid=0.1\n"), ds, columns, converged), ConfigError);
}

TEST_CASE("predict records") {
    const auto ds = chain_data(20, 15, 4);
    bool converged = false;
    auto doc = fit_model(tabular_config("method=pt\nlambda_grid=0.5\n"), ds, {"state"}, converged);
    const LoadedModel model(doc);
    for (int s = 0; s < 5; ++s) {
        const auto rec = predict_record(model, index_state(s));
        const auto prob = rec.at("prob").get<std::vector<double>>();
        REQUIRE(prob.size() == 2);
        CHECK(prob[0] + prob[1] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(rec.at("recommend_trt").get<int>() == (prob[1] > prob[0] ? 2 : 1));
        CHECK(rec.at("config_hash") == doc.at("config_hash"));
    }
    CHECK_THROWS_AS(predict_record(model, Vector{{0.0, 1.0}}), ConfigError);

    // A single-state pT model whose Q row has a two-action support.
    const auto one = generate_dataset(ChainEnv(TabularMDP({Matrix::Ones(1, 1), Matrix::Ones(1, 1), Matrix::Ones(1, 1)},
                                                          Matrix::Zero(1, 3))),
                                      StochasticPolicy::uniform(3), 6, 8, 5);
    auto single = fit_model(RunConfig::parse("method=pt\nbasis=tabular\nstates=1\nlambda_grid=0.8\n"), one, {"state"},
                            converged);
    const Vector q{{1.0, 0.5, 0.0}};
    single["parameters"]["theta_q"] = {q[0], q[1], q[2]};
    const auto rec = predict_record(LoadedModel(single), index_state(0));
    const auto prob = rec.at("prob").get<std::vector<double>>();
    const Vector expected = sparse_policy(q, 0.8);
    REQUIRE(prob.size() == 3);
    for (int a = 0; a < 3; ++a) CHECK(prob[static_cast<std::size_t>(a)] == expected[a]);
    CHECK(std::count_if(prob.begin(), prob.end(), [](double p) { return p > 0.0; }) == 2);
    CHECK(rec.at("recommend_trt") == 1);

    // GGQ policies are deterministic, so their pmfs are one-hot.
    const auto ggq = fit_model(tabular_config("method=ggq\n"), ds, {"state"}, converged);
    const auto hot = predict_record(LoadedModel(ggq), index_state(2)).at("prob").get<std::vector<double>>();
    CHECK(std::count(hot.begin(), hot.end(), 1.0) == 1);
    CHECK(std::count(hot.begin(), hot.end(), 0.0) == 1);

    // Value-only models report a value and no pmf.
    const auto td = fit_model(tabular_config("method=td_on\n"), ds, {"state"}, converged);
    const auto value = predict_record(LoadedModel(td), index_state(1));
    CHECK(value.contains("value"));
    CHECK_FALSE(value.contains("prob"));
}

TEST_CASE("evaluate") {
    const auto ds = chain_data(20, 15, 6);
    const auto env_config = RunConfig::parse("env=chain\nchain_states=5\n");
    bool converged = false;

    // Zero Q rows make the pT policy exactly uniform, which is the chain behavior policy.
    auto doc = fit_model(tabular_config("method=pt\nlambda_grid=0.5\n"), ds, {"state"}, converged);
    doc["parameters"]["theta_q"] = std::vector<double>(10, 0.0);
    const auto rows = evaluate_model(LoadedModel(doc), env_config, 400, 7);
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].policy == "behavior");
    CHECK(rows[1].policy == "pt");
    CHECK(std::abs(rows[1].improvement) <= 3.0 * rows[1].se);
    REQUIRE(rows[1].lower_bound.has_value());
    CHECK(*rows[1].lower_bound == doctest::Approx(rows[1].mean - 0.25 / 0.1).epsilon(1e-12));

    const std::string table = format_evaluation(rows, "abc");
    CHECK(table.rfind("tool,version,config_hash,policy,mean_return,se,improvement,pt_lower_bound\n", 0) == 0);

    // The oracle-optimal GGQ policy improves on behavior by the mean of V* - V^behavior.
    const auto mdp = chain_mdp(5);
    const auto vi = value_iteration(mdp, 0.9, 1e-12);
    auto ggq = fit_model(tabular_config("method=ggq\n"), ds, {"state"}, converged);
    std::vector<double> theta;
    for (Eigen::Index a = 0; a < 2; ++a) {
        for (Eigen::Index s = 0; s < 5; ++s) theta.push_back(vi.q(s, a));
    }
    ggq["parameters"]["theta"] = theta;
    const auto best = evaluate_model(LoadedModel(ggq), env_config, 2000, 8);
    const double gap = (vi.values - policy_evaluation(mdp, StochasticPolicy::uniform(2), 0.9)).mean();
    const double se = std::hypot(best[0].se, best[1].se);
    CHECK(std::abs(best[1].improvement - gap) <= 3.0 * se);
    CHECK_FALSE(best[1].lower_bound.has_value());
    CHECK(format_evaluation(best, "abc").find("pt_lower_bound") == std::string::npos);

    const auto td = fit_model(tabular_config("method=td_on\n"), ds, {"state"}, converged);
    CHECK_THROWS_AS(evaluate_model(LoadedModel(td), env_config, 10, 1), ConfigError);
}

TEST_CASE("command-line tool") {
    const std::string tool = PROXDTR_CLI_PATH;
    const TempDir dir;
    spit(dir / "env.cfg", "env=chain\nchain_states=5\nseed=11\n");
    spit(dir / "fit.cfg", "method=pt\nbasis=tabular\nstates=5\nlambda_grid=0.1,1\nfolds=3\n");
    const std::string quiet = " >" + (dir / "log.txt") + " 2>&1";
    const std::string data = " --data " + (dir / "d_states.csv") + " --actions " + (dir / "d_actions.csv") +
                             " --rewards " + (dir / "d_rewards.csv") + " --n 20 --stages 15";

    REQUIRE(run(tool + " simulate --config " + (dir / "env.cfg") + " --n 20 --stages 15 --out " + (dir / "d") + quiet) ==
            0);
    CHECK(run(tool + " validate" + data + " --out " + (dir / "report.json") + quiet) == 0);
    const auto report = nlohmann::json::parse(slurp(dir / "report.json"));
    CHECK(report.at("trajectories") == 20);
    CHECK(report.at("transitions") == 300);

    CHECK(run(tool + " fit" + data + " --config " + (dir / "fit.cfg") + " --out " + (dir / "m1.json") + quiet) == 0);
    CHECK(run(tool + " fit" + data + " --config " + (dir / "fit.cfg") + " --out " + (dir / "m2.json") + quiet) == 0);
    CHECK(slurp(dir / "m1.json") == slurp(dir / "m2.json"));

    CHECK(run(tool + " predict --model " + (dir / "m1.json") + " --state 2 --out " + (dir / "p.json") + quiet) == 0);
    const auto rec = nlohmann::json::parse(slurp(dir / "p.json"));
    const auto prob = rec.at("prob").get<std::vector<double>>();
    CHECK(prob.size() == 2);
    CHECK(prob[0] + prob[1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rec.at("recommend_trt").get<int>() >= 1);
    CHECK(rec.at("version") == kToolVersion);

    CHECK(run(tool + " evaluate --model " + (dir / "m1.json") + " --config " + (dir / "env.cfg") + " --out " +
              (dir / "e.csv") + quiet) == 0);
    CHECK(slurp(dir / "e.csv").find(",pt_lower_bound\n") != std::string::npos);

    // Exit codes: 1 for bad input, 2 for non-convergence (model still written).
    spit(dir / "bad.cfg", "method=td_on\nlambda_grid=0.1\n");
    CHECK(run(tool + " fit" + data + " --config " + (dir / "bad.cfg") + " --out " + (dir / "bad.json") + quiet) == 1);
    CHECK(run(tool + " predict --model " + (dir / "m1.json") + " --state 1,2" + quiet) == 1);
    CHECK(run(tool + " bogus" + quiet) == 1);
    spit(dir / "capped.cfg", "method=ggq\nbasis=tabular\nstates=5\nmax_iter=1\n");
    CHECK(run(tool + " fit" + data + " --config " + (dir / "capped.cfg") + " --out " + (dir / "capped.json") + quiet) ==
          2);
    CHECK(fs::exists(dir.path / "capped.json"));
    CHECK(run(tool + " --version" + quiet) == 0);
}
