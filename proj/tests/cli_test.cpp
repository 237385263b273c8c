#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "driftwatch/config.hpp"
#include "driftwatch/mlp.hpp"
#include "driftwatch/simulator.hpp"

using namespace driftwatch;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const fs::path& p, const std::string& content) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << content;
}

RunResult run_cli(const std::string& args, const fs::path& dir) {
    fs::path out = dir / "stdout.txt";
    fs::path err = dir / "stderr.txt";
    std::string cmd = std::string(DRIFTWATCH_CLI_PATH) + " " + args + " >" + out.string() + " 2>" +
                      err.string();
    int rc = std::system(cmd.c_str());
    RunResult r;
    r.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / "driftwatch-cli-tests" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// A small scenario that exercises the whole surface in seconds: 3 sensors,
// 4.5 days, short detector windows, a linear drift in the test span.
struct TinyScenario {
    fs::path dir;
    SensorGrid grid;
    std::string drift_sensor = "s2";

    explicit TinyScenario(const std::string& name, std::uint64_t seed = 11,
                          bool inject = true) {
        dir = fresh_dir(name);
        grid = SensorGrid::uniform(Magnitude::temperature, {"s0", "s1", "s2"});
        EnvironmentSpec env;
        env.grid = grid;
        env.duration_minutes = 7200;  // 5 days
        env.seed = seed;
        env.start = parse_timestamp("2021-03-01T00:00:00Z");
        env.setpoint_base = 22.0;
        env.daily_amplitude = 1.5;
        env.slow_drift_amplitude = 0.3;
        env.offset = {-0.3, 0.1, 0.4};
        env.gain = {0.95, 1.0, 1.05};
        env.noise_std = {0.05, 0.05, 0.05};
        TimeSeries all = generate_environment(env);
        auto parts = split_dataset(all, {4320.0 / 7200.0, 720.0 / 7200.0, 2160.0 / 7200.0});
        TimeSeries test = parts[2];
        if (inject) {
            DriftSpec d;
            d.target_sensor_ids = {drift_sensor};
            d.kind = DriftKind::linear;
            d.onset_minute = 300;
            d.magnitude = 0.5;
            d.duration_minutes = 600;
            test = inject_drift(test, d);
        }
        auto write_series = [&](const char* name2, const TimeSeries& s) {
            std::ofstream out(dir / name2, std::ios::binary);
            write_csv(s, out);
        };
        write_series("train.csv", parts[0]);
        write_series("val.csv", parts[1]);
        write_series("test.csv", test);
        std::ostringstream m;
        m << "scenario.name=tiny\n";
        m << "scenario.seed=" << seed << "\n";
        m << "grid.kind=temperature\n";
        m << "grid.sensor_ids=s0,s1,s2\n";
        m << "files.train=train.csv\nfiles.val=val.csv\nfiles.test=test.csv\n";
        m << "preprocess.sg_window=7\npreprocess.sg_polyorder=2\n";
        m << "train.max_epochs=3\ntrain.patience=3\n";
        m << "detector.window_minutes=60\n";
        m << "detector.persistence_minutes=120\n";
        if (inject) {
            m << "drift.count=1\n";
            m << "drift.0.sensors=" << drift_sensor << "\n";
            m << "drift.0.kind=linear\ndrift.0.onset_minute=300\n";
            m << "drift.0.magnitude=0.5\ndrift.0.duration_minutes=600\n";
            m << "drift.0.max_deviation=0.5\n";
        } else {
            m << "drift.count=0\n";
        }
        m << "expect.no_events=" << (inject ? "false" : "true") << "\n";
        spit(dir / "manifest.cfg", m.str());
    }

    std::string cfg() const { return (dir / "manifest.cfg").string(); }
};

std::size_t count_events(const std::string& alerts, const std::string& sensor = "") {
    std::istringstream in(alerts);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        if (line.find("\"type\":\"event\"") == std::string::npos) continue;
        if (!sensor.empty() && line.find("\"sensor_id\":\"" + sensor + "\"") == std::string::npos)
            continue;
        ++n;
    }
    return n;
}

}  // namespace

TEST(CliTest, EndToEndDetectsInjectedDrift) {
    TinyScenario sc("end_to_end");
    auto train = run_cli("train -c " + sc.cfg(), sc.dir);
    ASSERT_EQ(train.exit_code, 0) << train.err;
    EXPECT_TRUE(fs::exists(sc.dir / "model.dwm"));
    EXPECT_TRUE(fs::exists(sc.dir / "residual.dwr"));
    EXPECT_TRUE(fs::exists(sc.dir / "report.txt"));
    EXPECT_NE(train.out.find("sensor s0"), std::string::npos);

    auto detect = run_cli("detect -c " + sc.cfg(), sc.dir);
    ASSERT_EQ(detect.exit_code, 0) << detect.err;
    std::string alerts = slurp(sc.dir / "alerts.jsonl");
    EXPECT_EQ(count_events(alerts, sc.drift_sensor), 1u) << alerts;
    EXPECT_EQ(count_events(alerts), 1u);
    EXPECT_NE(alerts.find("\"direction\":\"high\""), std::string::npos);

    auto eval = run_cli("evaluate " + sc.dir.string(), sc.dir);
    EXPECT_EQ(eval.exit_code, 0) << eval.out << eval.err;
    EXPECT_NE(eval.out.find("result: PASS"), std::string::npos);
    EXPECT_NE(eval.out.find("false_positives=0"), std::string::npos);
}

TEST(CliTest, UnknownScenarioExitsTwoAndNamesValidOnes) {
    auto dir = fresh_dir("unknown_scenario");
    auto r = run_cli("simulate nonsense --seed 1 -o " + (dir / "out").string(), dir);
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_NE(r.err.find("detect_temperature"), std::string::npos);
    EXPECT_NE(r.err.find("driftwatch: error:"), std::string::npos);
}

TEST(CliTest, SimulateIsDeterministic) {
    auto dir = fresh_dir("simulate_determinism");
    ASSERT_EQ(run_cli("simulate recalib_single --seed 3 -o " + (dir / "a").string(), dir).exit_code, 0);
    ASSERT_EQ(run_cli("simulate recalib_single --seed 3 -o " + (dir / "b").string(), dir).exit_code, 0);
    for (const char* f : {"manifest.cfg", "train.csv", "retrain.csv", "baseline.csv", "eval.csv"})
        EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
}

TEST(CliTest, TrainIsDeterministic) {
    TinyScenario sc("train_determinism");
    ASSERT_EQ(run_cli("train -c " + sc.cfg(), sc.dir).exit_code, 0);
    std::string first = slurp(sc.dir / "model.dwm");
    ASSERT_EQ(run_cli("train -c " + sc.cfg(), sc.dir).exit_code, 0);
    EXPECT_EQ(first, slurp(sc.dir / "model.dwm"));
}

TEST(CliTest, UnknownConfigKeyExitsTwo) {
    TinyScenario sc("unknown_key");
    spit(sc.dir / "bad.cfg", slurp(sc.dir / "manifest.cfg") + "grid.sensorz=1\n");
    auto r = run_cli("train -c " + (sc.dir / "bad.cfg").string(), sc.dir);
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_NE(r.err.find("grid.sensorz"), std::string::npos);
}

TEST(CliTest, EmptyTrainCsvExitsTwo) {
    TinyScenario sc("empty_csv");
    spit(sc.dir / "train.csv", "timestamp,s0,s1,s2\n");
    auto r = run_cli("train -c " + sc.cfg(), sc.dir);
    EXPECT_EQ(r.exit_code, 2);
}

TEST(CliTest, MissingModelExitsTwoWithParsableError) {
    TinyScenario sc("missing_model");
    auto r = run_cli("detect -c " + sc.cfg(), sc.dir);
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_EQ(r.err.rfind("driftwatch: error: io:", 0), 0u) << r.err;
}

TEST(CliTest, ModelGridMismatchExitsTwo) {
    TinyScenario sc("grid_mismatch");
    ASSERT_EQ(run_cli("train -c " + sc.cfg(), sc.dir).exit_code, 0);
    // Detect against a config whose grid renames a sensor.
    std::string manifest = slurp(sc.dir / "manifest.cfg");
    auto pos = manifest.find("grid.sensor_ids=s0,s1,s2");
    manifest.replace(pos, 24, "grid.sensor_ids=s0,s1,sX");
    spit(sc.dir / "renamed.cfg", manifest);
    // The test CSV header no longer matches either, so rewrite it too.
    std::string csv = slurp(sc.dir / "test.csv");
    csv.replace(csv.find("s0,s1,s2"), 8, "s0,s1,sX");
    spit(sc.dir / "test.csv", csv);
    auto r = run_cli("detect -c " + (sc.dir / "renamed.cfg").string(), sc.dir);
    EXPECT_EQ(r.exit_code, 2);
    EXPECT_NE(r.err.find("schema"), std::string::npos);
}

TEST(CliTest, ReplayAndFollowProduceIdenticalAlerts) {
    TinyScenario sc("replay_follow");
    ASSERT_EQ(run_cli("train -c " + sc.cfg(), sc.dir).exit_code, 0);
    ASSERT_EQ(run_cli("detect -c " + sc.cfg() + " --replay --alerts " +
                          (sc.dir / "alerts_replay.jsonl").string(),
                      sc.dir)
                  .exit_code,
              0);
    ASSERT_EQ(run_cli("detect -c " + sc.cfg() + " --follow --poll-ms 50 --idle-timeout-ms 300 " +
                          "--alerts " + (sc.dir / "alerts_follow.jsonl").string(),
                      sc.dir)
                  .exit_code,
              0);
    EXPECT_EQ(slurp(sc.dir / "alerts_replay.jsonl"), slurp(sc.dir / "alerts_follow.jsonl"));
}

TEST(CliTest, FollowTailsAGrowingFile) {
    TinyScenario sc("follow_growing");
    ASSERT_EQ(run_cli("train -c " + sc.cfg(), sc.dir).exit_code, 0);
    ASSERT_EQ(run_cli("detect -c " + sc.cfg() + " --replay --alerts " +
                          (sc.dir / "alerts_replay.jsonl").string(),
                      sc.dir)
                  .exit_code,
              0);
    // Start with a truncated copy, grow it while --follow runs.
    std::string full = slurp(sc.dir / "test.csv");
    std::size_t cut = full.find('\n');
    for (int i = 0; i < 1000; ++i) cut = full.find('\n', cut + 1);
    spit(sc.dir / "grow.csv", full.substr(0, cut + 1));
    std::thread grower([&] {
        std::this_thread::sleep_for(std::chrono::milliseconds(400));
        std::ofstream out(sc.dir / "grow.csv", std::ios::binary | std::ios::app);
        out << full.substr(cut + 1);
    });
    auto r = run_cli("detect -c " + sc.cfg() + " --follow --poll-ms 50 --idle-timeout-ms 1500 " +
                         "--input " + (sc.dir / "grow.csv").string() + " --alerts " +
                         (sc.dir / "alerts_grow.jsonl").string(),
                     sc.dir);
    grower.join();
    ASSERT_EQ(r.exit_code, 0) << r.err;
    EXPECT_EQ(slurp(sc.dir / "alerts_replay.jsonl"), slurp(sc.dir / "alerts_grow.jsonl"));
}

TEST(CliTest, CheckpointResumeMatchesSingleRun) {
    TinyScenario sc("checkpoint_resume");
    ASSERT_EQ(run_cli("train -c " + sc.cfg(), sc.dir).exit_code, 0);
    ASSERT_EQ(run_cli("detect -c " + sc.cfg() + " --alerts " +
                          (sc.dir / "alerts_full.jsonl").string(),
                      sc.dir)
                  .exit_code,
              0);
    // First run sees only 1800 of the 2160 rows ("killed" partway); the file
    // then grows and the second run resumes from the checkpoint.
    std::string full = slurp(sc.dir / "test.csv");
    std::size_t cut = full.find('\n');
    for (int i = 0; i < 1800; ++i) cut = full.find('\n', cut + 1);
    spit(sc.dir / "partial.csv", full.substr(0, cut + 1));
    std::string state = (sc.dir / "detect.state").string();
    std::string alerts = (sc.dir / "alerts_resumed.jsonl").string();
    ASSERT_EQ(run_cli("detect -c " + sc.cfg() + " --input " + (sc.dir / "partial.csv").string() +
                          " --state " + state + " --alerts " + alerts,
                      sc.dir)
                  .exit_code,
              0);
    ASSERT_TRUE(fs::exists(state));
    spit(sc.dir / "partial.csv", full);  // the stream grew
    auto r = run_cli("detect -c " + sc.cfg() + " --input " + (sc.dir / "partial.csv").string() +
                         " --state " + state + " --alerts " + alerts,
                     sc.dir);
    ASSERT_EQ(r.exit_code, 0) << r.err;
    EXPECT_NE(r.err.find("resumed"), std::string::npos);
    EXPECT_EQ(slurp(sc.dir / "alerts_full.jsonl"), slurp(sc.dir / "alerts_resumed.jsonl"));
}

TEST(CliTest, EvaluateFlagsMissedDetection) {
    TinyScenario sc("missed_detection");
    spit(sc.dir / "alerts.jsonl", "");
    auto r = run_cli("evaluate " + sc.dir.string(), sc.dir);
    EXPECT_NE(r.exit_code, 0);
    EXPECT_NE(r.out.find("missed detection"), std::string::npos);
}

TEST(CliTest, EvaluateFlagsSpuriousEvent) {
    TinyScenario sc("spurious_event");
    spit(sc.dir / "alerts.jsonl",
         R"({"type":"event","sensor_id":"s0","onset":"2021-03-04T00:00:00Z",)"
         R"("confirmed_at":"2021-03-04T02:00:00Z","direction":"high",)"
         R"("estimated_deviation":0.4,"time_to_tolerance_minutes":null,)"
         R"("density_at_confirmation":1.0})"
         "\n");
    auto r = run_cli("evaluate " + sc.dir.string(), sc.dir);
    EXPECT_NE(r.exit_code, 0);
    EXPECT_NE(r.out.find("false_positives=1"), std::string::npos);
}

TEST(CliTest, EvaluateRejectsMalformedAlerts) {
    TinyScenario sc("malformed_alerts");
    spit(sc.dir / "alerts.jsonl", "this is not json\n");
    auto r = run_cli("evaluate " + sc.dir.string(), sc.dir);
    EXPECT_EQ(r.exit_code, 2);
}

TEST(CliTest, RetrainWarnsOnSmallDatasetAndFreezesHiddenLayers) {
    TinyScenario sc("retrain_small");
    ASSERT_EQ(run_cli("train -c " + sc.cfg(), sc.dir).exit_code, 0);
    // 500-frame "new condition": reuse the head of the test span.
    std::string full = slurp(sc.dir / "test.csv");
    std::size_t cut = full.find('\n');
    for (int i = 0; i < 500; ++i) cut = full.find('\n', cut + 1);
    spit(sc.dir / "retrain.csv", full.substr(0, cut + 1));
    std::string manifest = slurp(sc.dir / "manifest.cfg");
    spit(sc.dir / "manifest.cfg", manifest + "files.retrain=retrain.csv\n");
    auto r = run_cli("retrain -c " + sc.cfg() + " --model-in " + (sc.dir / "model.dwm").string() +
                         " --model-out " + (sc.dir / "model_b.dwm").string() + " --residual-out " +
                         (sc.dir / "residual_b.dwr").string(),
                     sc.dir);
    ASSERT_EQ(r.exit_code, 0) << r.err;
    EXPECT_NE(r.err.find("warning"), std::string::npos);
    std::ifstream ma(sc.dir / "model.dwm"), mb(sc.dir / "model_b.dwm");
    MlpModel a = load_model(ma), b = load_model(mb);
    for (std::size_t l = 0; l + 1 < a.weights.size(); ++l) {
        EXPECT_TRUE(detail::exact_equal(a.weights[l], b.weights[l]));
        EXPECT_TRUE(detail::exact_equal(a.biases[l], b.biases[l]));
    }
}

TEST(CliTest, RetrainRejectsArityShrink) {
    TinyScenario sc("retrain_shrink");
    ASSERT_EQ(run_cli("train -c " + sc.cfg(), sc.dir).exit_code, 0);
    std::string manifest = slurp(sc.dir / "manifest.cfg");
    auto pos = manifest.find("grid.sensor_ids=s0,s1,s2");
    manifest.replace(pos, 24, "grid.sensor_ids=s0,s1");
    manifest += "files.retrain=retrain.csv\n";
    spit(sc.dir / "shrunk.cfg", manifest);
    auto r = run_cli("retrain -c " + (sc.dir / "shrunk.cfg").string() + " --model-in " +
                         (sc.dir / "model.dwm").string() + " --model-out " +
                         (sc.dir / "model_b.dwm").string(),
                     sc.dir);
    EXPECT_EQ(r.exit_code, 2);
}
