#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace driftwatch::cli {

using Overrides = std::vector<std::pair<std::string, std::string>>;

struct SimulateOptions {
    std::string scenario;
    std::uint64_t seed = 0;
    std::string out_dir;
};

struct TrainOptions {
    std::string config_path;
    Overrides overrides;
    std::optional<std::string> out_dir;
};

struct DetectOptions {
    std::string config_path;
    Overrides overrides;
    std::optional<std::string> input;     // default files.test
    std::optional<std::string> model;     // default paths.model
    std::optional<std::string> residual;  // default paths.residual
    std::optional<std::string> alerts;    // default paths.alerts
    std::optional<std::string> state;     // default paths.state (empty = no checkpointing)
    std::optional<std::string> out_dir;
    bool follow = false;
    int poll_ms = 200;
    int idle_timeout_ms = 0;  // 0 = follow forever
};

struct RetrainOptions {
    std::string config_path;
    Overrides overrides;
    std::string model_in;
    std::optional<std::string> residual_in;  // enables the baseline comparison
    std::string model_out;
    std::optional<std::string> residual_out;
    std::optional<std::string> report;
    std::optional<std::string> data;  // default files.retrain
};

struct EvaluateOptions {
    std::string scenario_dir;
    std::optional<std::string> alerts;  // default <dir>/alerts.jsonl
};

int run_simulate(const SimulateOptions& opt);
int run_train(const TrainOptions& opt);
int run_detect(const DetectOptions& opt);
int run_retrain(const RetrainOptions& opt);
int run_evaluate(const EvaluateOptions& opt);

}  // namespace driftwatch::cli
