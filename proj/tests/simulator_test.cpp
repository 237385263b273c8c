#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "driftwatch/simulator.hpp"
#include "driftwatch/stats.hpp"
#include "driftwatch/telemetry.hpp"

using namespace driftwatch;

namespace {

EnvironmentSpec flat_spec(std::size_t sensors, int minutes, std::uint64_t seed) {
    EnvironmentSpec e;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < sensors; ++i) ids.push_back("t" + std::to_string(i));
    e.grid = SensorGrid::uniform(Magnitude::temperature, ids);
    e.duration_minutes = minutes;
    e.seed = seed;
    e.setpoint_base = 22.0;
    e.offset.assign(sensors, 0.0);
    e.gain.assign(sensors, 1.0);
    e.noise_std.assign(sensors, 0.0);
    return e;
}

}  // namespace

TEST(GenerateTest, DegenerateSpecIsConstant) {
    auto s = generate_environment(flat_spec(3, 100, 1));
    for (const auto& f : s.frames)
        for (double v : f.values) EXPECT_DOUBLE_EQ(v, 22.0);
}

TEST(GenerateTest, DeterministicPerSeed) {
    auto spec = flat_spec(2, 2000, 99);
    spec.daily_amplitude = 1.5;
    spec.slow_drift_amplitude = 0.4;
    spec.noise_std = {0.05, 0.05};
    auto a = generate_environment(spec);
    auto b = generate_environment(spec);
    std::ostringstream sa, sb;
    write_csv(a, sa);
    write_csv(b, sb);
    EXPECT_EQ(sa.str(), sb.str());
    spec.seed = 100;
    auto c = generate_environment(spec);
    std::ostringstream sc;
    write_csv(c, sc);
    EXPECT_NE(sa.str(), sc.str());
}

TEST(GenerateTest, NoiseMomentsMatchSpec) {
    auto spec = flat_spec(3, 100000, 7);
    spec.daily_amplitude = 1.5;
    spec.slow_drift_amplitude = 0.3;
    spec.gain = {0.95, 1.0, 1.05};
    spec.offset = {-0.4, 0.1, 0.6};
    spec.noise_std = {0.05, 0.1, 0.2};
    std::vector<double> latent;
    auto s = generate_environment(spec, &latent);
    ASSERT_EQ(latent.size(), s.frames.size());
    for (std::size_t i = 0; i < 3; ++i) {
        std::vector<double> noise;
        noise.reserve(s.frames.size());
        for (std::size_t k = 0; k < s.frames.size(); ++k)
            noise.push_back(s.frames[k].values[i] - spec.gain[i] * latent[k] - spec.offset[i]);
        double sd = std::sqrt(sample_variance(noise));
        EXPECT_NEAR(sd, spec.noise_std[i], 0.02 * spec.noise_std[i]) << "sensor " << i;
        EXPECT_NEAR(mean_of(noise), 0.0, 3.0 * spec.noise_std[i] / std::sqrt(100000.0) * 3.0);
    }
}

TEST(GenerateTest, SlowWalkStaysBounded) {
    auto spec = flat_spec(1, 200000, 3);
    spec.slow_drift_amplitude = 0.4;
    std::vector<double> latent;
    generate_environment(spec, &latent);
    for (double s : latent) {
        EXPECT_LE(s, 22.4 + 1e-12);
        EXPECT_GE(s, 21.6 - 1e-12);
    }
}

TEST(InjectDriftTest, LinearMidpoint) {
    auto s = generate_environment(flat_spec(2, 200, 1));
    DriftSpec d;
    d.target_sensor_ids = {"t1"};
    d.kind = DriftKind::linear;
    d.onset_minute = 50;
    d.magnitude = 0.5;
    d.duration_minutes = 100;
    auto out = inject_drift(s, d);
    EXPECT_NEAR(out.frames[100].values[1] - s.frames[100].values[1], 0.25, 1e-12);
}

TEST(InjectDriftTest, StepOffsetExactFromOnset) {
    auto s = generate_environment(flat_spec(1, 100, 1));
    DriftSpec d;
    d.target_sensor_ids = {"t0"};
    d.kind = DriftKind::step_offset;
    d.onset_minute = 30;
    d.magnitude = 3.0;
    d.duration_minutes = 0;
    auto out = inject_drift(s, d);
    EXPECT_DOUBLE_EQ(out.frames[29].values[0], s.frames[29].values[0]);
    for (std::size_t t = 30; t < 100; ++t)
        EXPECT_DOUBLE_EQ(out.frames[t].values[0] - s.frames[t].values[0], 3.0);
}

TEST(InjectDriftTest, ShapeEndpointsExact) {
    for (auto kind : {DriftKind::linear, DriftKind::exponential, DriftKind::logarithmic}) {
        EXPECT_DOUBLE_EQ(drift_shape(kind, 0.0), 0.0) << drift_kind_name(kind);
        EXPECT_DOUBLE_EQ(drift_shape(kind, 1.0), 1.0) << drift_kind_name(kind);
        EXPECT_DOUBLE_EQ(drift_shape(kind, 2.0), 1.0) << drift_kind_name(kind);
        // Monotone within [0,1].
        for (double u = 0.0; u < 1.0; u += 0.05)
            EXPECT_LT(drift_shape(kind, u), drift_shape(kind, u + 0.05) + 1e-15);
    }
}

TEST(InjectDriftTest, AdditiveAndLocal) {
    auto spec = flat_spec(3, 400, 11);
    spec.daily_amplitude = 1.0;
    spec.noise_std = {0.05, 0.05, 0.05};
    auto s = generate_environment(spec);
    DriftSpec d;
    d.target_sensor_ids = {"t2"};
    d.kind = DriftKind::exponential;
    d.onset_minute = 100;
    d.magnitude = -0.7;
    d.duration_minutes = 200;
    auto out = inject_drift(s, d);
    for (std::size_t t = 0; t < 400; ++t) {
        for (std::size_t i = 0; i < 3; ++i) {
            double diff = out.frames[t].values[i] - s.frames[t].values[i];
            if (i != 2 || t < 100) {
                EXPECT_EQ(diff, 0.0);
            } else {
                double u = std::min(1.0, (static_cast<double>(t) - 100.0) / 200.0);
                EXPECT_NEAR(diff, -0.7 * drift_shape(DriftKind::exponential, u), 1e-12);
            }
        }
    }
}

TEST(InjectDriftTest, InvalidSpecsRejected) {
    auto s = generate_environment(flat_spec(1, 100, 1));
    DriftSpec d;
    d.target_sensor_ids = {"t0"};
    d.kind = DriftKind::linear;
    d.onset_minute = 50;
    d.magnitude = 0.5;
    d.duration_minutes = 60;  // exceeds series length
    EXPECT_THROW(inject_drift(s, d), Error);
    d.duration_minutes = 10;
    d.magnitude = 0.0;
    EXPECT_THROW(inject_drift(s, d), Error);
    d.magnitude = 0.5;
    d.target_sensor_ids = {"nope"};
    EXPECT_THROW(inject_drift(s, d), Error);
}

TEST(MakeExperimentTest, UnknownScenarioListsValidNames) {
    try {
        make_experiment("bogus", 1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::config);
        EXPECT_NE(std::string(e.what()).find("detect_temperature"), std::string::npos);
    }
}

TEST(MakeExperimentTest, DetectTemperatureArity) {
    auto b = make_experiment("detect_temperature", 5);
    EXPECT_EQ(b.grid.size(), 17u);
    EXPECT_EQ(b.train.size(), 80u * 1440u);
    EXPECT_EQ(b.val.size(), 10u * 1440u);
    EXPECT_EQ(b.test.size(), 30u * 1440u);
    ASSERT_EQ(b.drifts.size(), 1u);
    EXPECT_EQ(b.drifts[0].kind, DriftKind::linear);
    EXPECT_DOUBLE_EQ(b.drifts[0].magnitude, 0.5);
    EXPECT_FALSE(b.expect_no_events);
}

TEST(MakeExperimentTest, PressureArityAndSteps) {
    auto b = make_experiment("detect_pressure", 5);
    EXPECT_EQ(b.grid.size(), 24u);
    EXPECT_EQ(b.grid.sensors[0].kind.kind, Magnitude::pressure);
    EXPECT_DOUBLE_EQ(b.drift_max_deviation[0], 1.5);
}

TEST(MakeExperimentTest, AddSensorsGrids) {
    auto b = make_experiment("add_sensors", 5);
    EXPECT_EQ(b.model_a_grid.size(), 13u);
    EXPECT_EQ(b.grid.size(), 17u);
    ASSERT_TRUE(b.retrain.has_value());
    EXPECT_EQ(b.train.grid.size(), 13u);
    EXPECT_EQ(b.retrain->grid.size(), 17u);
    // Drift targets one of the four appended sensors.
    bool is_new = false;
    for (std::size_t i = 13; i < 17; ++i)
        if (b.grid.sensors[i].id == b.drifts[0].target_sensor_ids[0]) is_new = true;
    EXPECT_TRUE(is_new);
}

TEST(MakeExperimentTest, OffsetAllTargetsEverySensorAndExpectsSilence) {
    auto b = make_experiment("offset_all", 5);
    EXPECT_TRUE(b.expect_no_events);
    EXPECT_EQ(b.drifts[0].target_sensor_ids.size(), 17u);
    EXPECT_EQ(b.drifts[0].kind, DriftKind::step_offset);
}

TEST(MakeExperimentTest, NewEnvironmentRetrainSize) {
    auto b = make_experiment("new_environment", 5);
    ASSERT_TRUE(b.retrain.has_value());
    EXPECT_EQ(b.retrain->size(), 80000u);
    EXPECT_EQ(b.test.size(), 30u * 1440u);
}

TEST(MakeExperimentTest, RecalibSingleSlices) {
    auto b = make_experiment("recalib_single", 5);
    ASSERT_TRUE(b.retrain.has_value());
    ASSERT_TRUE(b.baseline.has_value());
    ASSERT_TRUE(b.eval.has_value());
    EXPECT_EQ(b.retrain->size(), 7u * 1440u);  // ~10k frames
    EXPECT_DOUBLE_EQ(b.drifts[0].magnitude, 3.0);
    // The offset lands inside the retrain/eval spans, not the baseline.
    Minute onset = b.train.frames.front().timestamp + b.drifts[0].onset_minute;
    EXPECT_EQ(onset, b.retrain->frames.front().timestamp);
}
