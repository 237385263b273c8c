#include <CLI11.hpp>
#include <cstdint>
#include <string>
#include <vector>

#include "commands.hpp"

namespace cli = driftwatch::cli;

namespace {

void add_overrides(CLI::App* cmd, cli::Overrides& ov) {
    cmd->add_option_function<std::vector<std::string>>(
        "--set",
        [&ov](const std::vector<std::string>& kvs) {
            for (const auto& kv : kvs) {
                auto eq = kv.find('=');
                if (eq == std::string::npos) throw CLI::ValidationError("--set expects key=value");
                ov.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
            }
        },
        "override a config key (key=value, repeatable)");
}

void add_seed_override(CLI::App* cmd, cli::Overrides& ov) {
    cmd->add_option_function<std::uint64_t>(
        "--seed",
        [&ov](const std::uint64_t& s) { ov.emplace_back("scenario.seed", std::to_string(s)); },
        "override the configured seed");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"driftwatch: streaming uncalibration detector for sensor grids"};
    app.require_subcommand(1);

    cli::SimulateOptions sim;
    auto* simulate = app.add_subcommand("simulate", "generate a synthetic scenario bundle");
    simulate->add_option("scenario", sim.scenario, "scenario name")->required();
    simulate->add_option("--seed", sim.seed, "scenario seed");
    simulate->add_option("-o,--out", sim.out_dir, "output directory")->required();

    cli::TrainOptions tr;
    auto* train = app.add_subcommand("train", "preprocess, fit the regressor and residual model");
    train->add_option("-c,--config", tr.config_path, "config / manifest file")->required();
    train->add_option("-o,--out", tr.out_dir, "output directory (default: config directory)");
    add_seed_override(train, tr.overrides);
    add_overrides(train, tr.overrides);

    cli::DetectOptions de;
    auto* detect = app.add_subcommand("detect", "stream a CSV through the detector");
    detect->add_option("-c,--config", de.config_path, "config / manifest file")->required();
    detect->add_option("--input", de.input, "input CSV (default: files.test)");
    detect->add_option("--model", de.model, "model file (default: paths.model)");
    detect->add_option("--residual", de.residual, "residual file (default: paths.residual)");
    detect->add_option("--alerts", de.alerts, "alerts output (default: paths.alerts)");
    detect->add_option("--state", de.state, "checkpoint file; resumes when it exists");
    detect->add_option("-o,--out", de.out_dir, "output directory (default: config directory)");
    auto* follow = detect->add_flag("--follow", de.follow, "tail a growing input file");
    detect->add_flag("--replay", "process the file and exit (default mode)")->excludes(follow);
    detect->add_option("--poll-ms", de.poll_ms, "follow mode poll interval (ms)");
    detect->add_option("--idle-timeout-ms", de.idle_timeout_ms,
                       "follow mode: stop after this long without new data (0 = forever)");
    add_overrides(detect, de.overrides);

    cli::RetrainOptions re;
    auto* retrain = app.add_subcommand("retrain", "last-layer transfer learning on new data");
    retrain->add_option("-c,--config", re.config_path, "config / manifest file")->required();
    retrain->add_option("--model-in", re.model_in, "source model file")->required();
    retrain->add_option("--model-out", re.model_out, "retrained model file")->required();
    retrain->add_option("--residual-in", re.residual_in,
                        "source residual file (enables the baseline comparison)");
    retrain->add_option("--residual-out", re.residual_out,
                        "refitted residual file for the new condition");
    retrain->add_option("--report", re.report, "write the pre/post error report here");
    retrain->add_option("--data", re.data, "retrain CSV (default: files.retrain)");
    add_overrides(retrain, re.overrides);

    cli::EvaluateOptions ev;
    auto* evaluate =
        app.add_subcommand("evaluate", "score an alerts file against a scenario manifest");
    evaluate->add_option("dir", ev.scenario_dir, "scenario directory with manifest.cfg")->required();
    evaluate->add_option("--alerts", ev.alerts, "alerts file (default: <dir>/alerts.jsonl)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;  // usage problems exit 2
    }

    if (simulate->parsed()) return cli::run_simulate(sim);
    if (train->parsed()) return cli::run_train(tr);
    if (detect->parsed()) return cli::run_detect(de);
    if (retrain->parsed()) return cli::run_retrain(re);
    if (evaluate->parsed()) return cli::run_evaluate(ev);
    return 2;
}
