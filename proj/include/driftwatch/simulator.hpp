#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "driftwatch/detector.hpp"
#include "driftwatch/error.hpp"
#include "driftwatch/mlp.hpp"
#include "driftwatch/preprocess.hpp"
#include "driftwatch/rng.hpp"
#include "driftwatch/telemetry.hpp"
#include "driftwatch/time.hpp"

namespace driftwatch {

// Optional sudden set-point shifts (pressure rooms see them in practice).
struct SetpointSteps {
    bool enabled = false;
    int mean_interval_minutes = 2880;
    double magnitude_std = 1.5;
    double bound = 12.0;
};

struct EnvironmentSpec {
    SensorGrid grid;
    int duration_minutes = 0;
    std::uint64_t seed = 0;
    Minute start = 0;
    double setpoint_base = 0.0;
    double daily_amplitude = 0.0;
    double slow_drift_amplitude = 0.0;
    std::vector<double> offset;     // per sensor
    std::vector<double> gain;       // per sensor, in [0.8, 1.2]
    std::vector<double> noise_std;  // per sensor, >= 0
    SetpointSteps steps;

    void validate() const {
        grid.validate();
        if (duration_minutes < 1) throw Error(ErrorKind::config, "environment duration must be >= 1");
        if (offset.size() != grid.size() || gain.size() != grid.size() ||
            noise_std.size() != grid.size())
            throw Error(ErrorKind::config, "per-sensor environment vectors must match grid size");
        for (double g : gain)
            if (!(g >= 0.8 && g <= 1.2))
                throw Error(ErrorKind::config, "sensor gains must lie in [0.8, 1.2]");
        for (double n : noise_std)
            if (!(n >= 0.0)) throw Error(ErrorKind::config, "noise_std must be >= 0");
        if (slow_drift_amplitude < 0.0)
            throw Error(ErrorKind::config, "slow_drift_amplitude must be >= 0");
        if (steps.enabled && steps.mean_interval_minutes < 1)
            throw Error(ErrorKind::config, "step interval must be >= 1");
    }
};

namespace detail {

inline double reflect_into(double x, double bound) {
    if (bound <= 0.0) return 0.0;
    while (x > bound || x < -bound) {
        if (x > bound) x = 2.0 * bound - x;
        if (x < -bound) x = -2.0 * bound - x;
    }
    return x;
}

}  // namespace detail

// Latent set point: base + daily sinusoid + bounded slow random walk
// (+ optional seeded step shifts). Sensor i reads gain*s(t) + offset + noise.
// Bit-reproducible for a given spec.
inline TimeSeries generate_environment(const EnvironmentSpec& spec,
                                       std::vector<double>* latent_out = nullptr) {
    spec.validate();
    const std::size_t n = spec.grid.size();
    TimeSeries out;
    out.grid = spec.grid;
    out.frames.reserve(static_cast<std::size_t>(spec.duration_minutes));
    if (latent_out) {
        latent_out->clear();
        latent_out->reserve(static_cast<std::size_t>(spec.duration_minutes));
    }

    Rng env_rng = Rng::substream(spec.seed, 0);
    std::vector<Rng> sensor_rng;
    sensor_rng.reserve(n);
    for (std::size_t i = 0; i < n; ++i) sensor_rng.push_back(Rng::substream(spec.seed, 1 + i));

    // Per-minute walk increments scaled so a 30-day stretch wanders by about
    // the configured amplitude; reflection enforces the bound strictly.
    const double walk_step = spec.slow_drift_amplitude / std::sqrt(30.0 * 1440.0);
    double walk = 0.0;
    double step_acc = 0.0;

    for (int t = 0; t < spec.duration_minutes; ++t) {
        if (spec.slow_drift_amplitude > 0.0)
            walk = detail::reflect_into(walk + env_rng.gaussian() * walk_step,
                                        spec.slow_drift_amplitude);
        if (spec.steps.enabled &&
            env_rng.uniform() < 1.0 / static_cast<double>(spec.steps.mean_interval_minutes))
            step_acc = detail::reflect_into(step_acc + env_rng.gaussian() * spec.steps.magnitude_std,
                                            spec.steps.bound);
        double s = spec.setpoint_base +
                   spec.daily_amplitude * std::sin(2.0 * M_PI * static_cast<double>(t) / 1440.0) +
                   walk + step_acc;
        if (latent_out) latent_out->push_back(s);
        ReadingFrame f;
        f.timestamp = spec.start + t;
        f.values.resize(n);
        f.mask.assign(n, 1);
        for (std::size_t i = 0; i < n; ++i) {
            double v = spec.gain[i] * s + spec.offset[i];
            if (spec.noise_std[i] > 0.0) v += sensor_rng[i].gaussian() * spec.noise_std[i];
            f.values[i] = v;
        }
        out.frames.push_back(std::move(f));
    }
    return out;
}

enum class DriftKind { linear, exponential, logarithmic, step_offset };

inline const char* drift_kind_name(DriftKind k) {
    switch (k) {
        case DriftKind::linear: return "linear";
        case DriftKind::exponential: return "exponential";
        case DriftKind::logarithmic: return "logarithmic";
        case DriftKind::step_offset: return "step_offset";
    }
    return "?";
}

inline DriftKind drift_kind_from_name(std::string_view s) {
    if (s == "linear") return DriftKind::linear;
    if (s == "exponential") return DriftKind::exponential;
    if (s == "logarithmic") return DriftKind::logarithmic;
    if (s == "step_offset") return DriftKind::step_offset;
    throw Error(ErrorKind::config, "unknown drift kind '" + std::string(s) + "'");
}

// An injected anomaly: the target sensors gain magnitude * g(u) where
// u = (t - onset)/duration clamps at 1. Every shape starts at 0 and reaches
// exactly `magnitude` at onset + duration.
struct DriftSpec {
    std::vector<std::string> target_sensor_ids;
    DriftKind kind = DriftKind::linear;
    int onset_minute = 0;  // relative to the start of the series it is injected into
    double magnitude = 0.0;
    int duration_minutes = 0;

    void validate(std::size_t series_length) const {
        if (target_sensor_ids.empty())
            throw Error(ErrorKind::config, "drift needs at least one target sensor");
        if (magnitude == 0.0) throw Error(ErrorKind::config, "drift magnitude must be nonzero");
        if (onset_minute < 0) throw Error(ErrorKind::config, "drift onset must be >= 0");
        if (kind != DriftKind::step_offset && duration_minutes < 1)
            throw Error(ErrorKind::config, "ramp drifts need duration >= 1");
        if (duration_minutes < 0) throw Error(ErrorKind::config, "drift duration must be >= 0");
        if (static_cast<std::size_t>(onset_minute + duration_minutes) > series_length)
            throw Error(ErrorKind::config, "drift onset + duration exceeds series length");
    }
};

inline double drift_shape(DriftKind kind, double u) {
    if (u <= 0.0) return 0.0;
    if (u >= 1.0) u = 1.0;
    switch (kind) {
        case DriftKind::linear: return u;
        case DriftKind::exponential: {
            constexpr double k = 3.0;
            return (std::exp(k * u) - 1.0) / (std::exp(k) - 1.0);
        }
        case DriftKind::logarithmic: return std::log(1.0 + 9.0 * u) / std::log(10.0);
        case DriftKind::step_offset: return 1.0;
    }
    return 0.0;
}

inline TimeSeries inject_drift(const TimeSeries& series, const DriftSpec& drift) {
    drift.validate(series.frames.size());
    std::vector<std::size_t> targets;
    for (const auto& id : drift.target_sensor_ids) {
        bool found = false;
        for (std::size_t i = 0; i < series.grid.size(); ++i)
            if (series.grid.sensors[i].id == id) {
                targets.push_back(i);
                found = true;
                break;
            }
        if (!found)
            throw Error(ErrorKind::config, "drift target '" + id + "' is not in the grid");
    }
    TimeSeries out = series;
    for (std::size_t t = static_cast<std::size_t>(drift.onset_minute); t < out.frames.size(); ++t) {
        double u = drift.kind == DriftKind::step_offset
                       ? 1.0
                       : (static_cast<double>(t) - drift.onset_minute) /
                             static_cast<double>(drift.duration_minutes);
        double add = drift.magnitude * drift_shape(drift.kind, u);
        for (std::size_t i : targets) out.frames[t].values[i] += add;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Scenario bundles: desk-scale reproductions of the paper's experiments.

enum class Scenario {
    detect_temperature,
    detect_humidity,
    detect_pressure,
    recalib_single,
    offset_all,
    add_sensors,
    new_environment,
};

inline const std::vector<std::pair<std::string, Scenario>>& scenario_table() {
    static const std::vector<std::pair<std::string, Scenario>> table = {
        {"detect_temperature", Scenario::detect_temperature},
        {"detect_humidity", Scenario::detect_humidity},
        {"detect_pressure", Scenario::detect_pressure},
        {"recalib_single", Scenario::recalib_single},
        {"offset_all", Scenario::offset_all},
        {"add_sensors", Scenario::add_sensors},
        {"new_environment", Scenario::new_environment},
    };
    return table;
}

inline std::string scenario_names_joined() {
    std::string s;
    for (const auto& [name, _] : scenario_table()) {
        if (!s.empty()) s += ", ";
        s += name;
    }
    return s;
}

inline Scenario scenario_from_name(std::string_view name) {
    for (const auto& [n, s] : scenario_table())
        if (n == name) return s;
    throw Error(ErrorKind::config, "unknown scenario '" + std::string(name) +
                                       "'; valid scenarios: " + scenario_names_joined());
}

// Everything a scenario needs to run end to end, plus its expectations.
struct ExperimentBundle {
    std::string scenario;
    std::uint64_t seed = 0;
    SensorGrid grid;                  // detection grid
    SensorGrid model_a_grid;          // training grid (subset for add_sensors)
    TimeSeries train;                 // model A training span (model A grid)
    TimeSeries val;                   // model A validation span
    TimeSeries test;                  // detection span (full grid), drifts injected
    std::optional<TimeSeries> retrain;   // new-condition data (full grid)
    std::optional<TimeSeries> baseline;  // pre-offset evaluation slice (model A grid)
    std::optional<TimeSeries> eval;      // held-out post-condition slice (full grid)
    std::vector<DriftSpec> drifts;       // relative to `test`
    bool expect_no_events = false;
    std::vector<double> drift_max_deviation;  // per drift, event deviation bound
    PreprocessConfig pre_cfg;
    TrainConfig train_cfg;
    TrainConfig retrain_cfg{0.02, 256, 120, 8};
    DetectorConfig det_cfg;
    double residual_alpha = 0.01;
    int retrain_min_frames = 10000;
};

namespace detail {

inline TimeSeries slice_frames(const TimeSeries& s, std::size_t begin, std::size_t end) {
    TimeSeries out;
    out.grid = s.grid;
    out.frames.assign(s.frames.begin() + static_cast<std::ptrdiff_t>(begin),
                      s.frames.begin() + static_cast<std::ptrdiff_t>(end));
    return out;
}

inline TimeSeries project_grid(const TimeSeries& s, std::size_t n_first) {
    TimeSeries out;
    out.grid.cadence_minutes = s.grid.cadence_minutes;
    out.grid.sensors.assign(s.grid.sensors.begin(),
                            s.grid.sensors.begin() + static_cast<std::ptrdiff_t>(n_first));
    out.frames.reserve(s.frames.size());
    for (const auto& f : s.frames) {
        ReadingFrame g;
        g.timestamp = f.timestamp;
        g.values.assign(f.values.begin(), f.values.begin() + static_cast<std::ptrdiff_t>(n_first));
        g.mask.assign(f.mask.begin(), f.mask.begin() + static_cast<std::ptrdiff_t>(n_first));
        out.frames.push_back(std::move(g));
    }
    return out;
}

inline std::vector<std::string> numbered_ids(char prefix, std::size_t n) {
    std::vector<std::string> ids;
    ids.reserve(n);
    for (std::size_t i = 1; i <= n; ++i) {
        char buf[8];
        std::snprintf(buf, sizeof buf, "%c%02zu", prefix, i);
        ids.emplace_back(buf);
    }
    return ids;
}

struct ScenarioDefaults {
    double base, daily, slow, noise, offset_range;
};

inline EnvironmentSpec base_environment(const SensorGrid& grid, std::uint64_t seed, int days,
                                        const ScenarioDefaults& d, std::uint64_t param_stream) {
    EnvironmentSpec env;
    env.grid = grid;
    env.duration_minutes = days * 1440;
    env.seed = seed;
    env.start = parse_timestamp("2021-01-01T00:00:00Z");
    env.setpoint_base = d.base;
    env.daily_amplitude = d.daily;
    env.slow_drift_amplitude = d.slow;
    Rng rng = Rng::substream(seed, param_stream);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        env.offset.push_back(rng.uniform(-d.offset_range, d.offset_range));
        env.gain.push_back(rng.uniform(0.9, 1.1));
        env.noise_std.push_back(d.noise);
    }
    return env;
}

}  // namespace detail

// Scenario construction. Detection scenarios place the drift onset early in
// the 30-day test span so the two-week persistence can elapse inside it; the
// onset day is seed-jittered. Training epochs are scenario-tuned: the 1-D
// mapping converges within a handful of epochs.
inline ExperimentBundle make_experiment(std::string_view name, std::uint64_t seed) {
    const Scenario sc = scenario_from_name(name);
    ExperimentBundle b;
    b.scenario = std::string(name);
    b.seed = seed;
    b.train_cfg.max_epochs = 16;
    b.train_cfg.patience = 3;
    Rng pick = Rng::substream(seed, 0x5C40);

    auto detection_scenario = [&](Magnitude mag, char prefix, std::size_t sensors,
                                  detail::ScenarioDefaults d, double magnitude,
                                  double max_deviation, bool steps) {
        b.grid = SensorGrid::uniform(mag, detail::numbered_ids(prefix, sensors));
        b.model_a_grid = b.grid;
        auto env = detail::base_environment(b.grid, seed, 120, d, 0x9A7A);
        if (steps) {
            env.steps.enabled = true;
            env.steps.mean_interval_minutes = 2880;
            env.steps.magnitude_std = 1.5;
            env.steps.bound = 12.0;
        }
        TimeSeries all = generate_environment(env);
        auto parts = split_dataset(all, {80.0 / 120.0, 10.0 / 120.0, 30.0 / 120.0});
        b.train = std::move(parts[0]);
        b.val = std::move(parts[1]);
        DriftSpec drift;
        drift.target_sensor_ids = {b.grid.sensors[pick.below(sensors)].id};
        drift.kind = DriftKind::linear;
        drift.onset_minute = static_cast<int>((2 + pick.below(5)) * 1440);  // test day 2..6
        drift.magnitude = magnitude;
        drift.duration_minutes = 20 * 1440;
        b.test = inject_drift(parts[2], drift);
        b.drifts.push_back(std::move(drift));
        b.drift_max_deviation.push_back(max_deviation);
    };

    switch (sc) {
        case Scenario::detect_temperature:
            detection_scenario(Magnitude::temperature, 't', 17, {22.0, 1.5, 0.4, 0.05, 0.8}, 0.5,
                               0.5, false);
            break;
        case Scenario::detect_humidity:
            detection_scenario(Magnitude::humidity, 'h', 17, {45.0, 8.0, 2.0, 0.3, 5.0}, 3.0, 3.0,
                               false);
            break;
        case Scenario::detect_pressure:
            detection_scenario(Magnitude::pressure, 'p', 24, {10.0, 2.0, 1.0, 0.15, 3.0}, 1.5, 1.5,
                               true);
            break;
        case Scenario::recalib_single: {
            b.grid = SensorGrid::uniform(Magnitude::temperature, detail::numbered_ids('t', 17));
            b.model_a_grid = b.grid;
            auto env = detail::base_environment(b.grid, seed, 58, {22.0, 1.5, 0.4, 0.05, 0.8}, 0x9A7A);
            TimeSeries all = generate_environment(env);
            DriftSpec offset;
            offset.target_sensor_ids = {b.grid.sensors[pick.below(17)].id};
            offset.kind = DriftKind::step_offset;
            offset.onset_minute = 44 * 1440;  // the simulated maintenance recalibration
            offset.magnitude = 3.0;
            offset.duration_minutes = 0;
            all = inject_drift(all, offset);
            b.train = detail::slice_frames(all, 0, 35 * 1440);
            b.val = detail::slice_frames(all, 35 * 1440, 40 * 1440);
            b.baseline = detail::slice_frames(all, 40 * 1440, 44 * 1440);
            b.retrain = detail::slice_frames(all, 44 * 1440, 51 * 1440);  // ~10k frames
            b.eval = detail::slice_frames(all, 51 * 1440, 58 * 1440);
            b.test = *b.eval;  // detection not scored here; kept for completeness
            b.drifts.push_back(std::move(offset));
            b.drift_max_deviation.push_back(0.5);
            b.expect_no_events = true;  // model B should treat the new condition as calibrated
            break;
        }
        case Scenario::offset_all: {
            b.grid = SensorGrid::uniform(Magnitude::temperature, detail::numbered_ids('t', 17));
            b.model_a_grid = b.grid;
            auto env = detail::base_environment(b.grid, seed, 120, {22.0, 1.5, 0.4, 0.05, 0.8}, 0x9A7A);
            // The null result is about the joint behavior staying on the
            // learned manifold; unit gains keep an all-sensor offset on it.
            for (auto& g : env.gain) g = 1.0;
            TimeSeries all = generate_environment(env);
            auto parts = split_dataset(all, {80.0 / 120.0, 10.0 / 120.0, 30.0 / 120.0});
            b.train = std::move(parts[0]);
            b.val = std::move(parts[1]);
            DriftSpec offset;
            offset.target_sensor_ids = b.grid.ids();
            offset.kind = DriftKind::step_offset;
            offset.onset_minute = 3 * 1440;
            offset.magnitude = 0.8;  // below one training-range std (~1.1)
            offset.duration_minutes = 0;
            b.test = inject_drift(parts[2], offset);
            b.drifts.push_back(std::move(offset));
            b.drift_max_deviation.push_back(0.8);
            b.expect_no_events = true;
            break;
        }
        case Scenario::add_sensors: {
            b.grid = SensorGrid::uniform(Magnitude::temperature, detail::numbered_ids('t', 17));
            b.model_a_grid.cadence_minutes = b.grid.cadence_minutes;
            b.model_a_grid.sensors.assign(b.grid.sensors.begin(), b.grid.sensors.begin() + 13);
            auto env = detail::base_environment(b.grid, seed, 84, {22.0, 1.5, 0.4, 0.05, 0.8}, 0x9A7A);
            TimeSeries all = generate_environment(env);
            b.train = detail::project_grid(detail::slice_frames(all, 0, 35 * 1440), 13);
            b.val = detail::project_grid(detail::slice_frames(all, 35 * 1440, 40 * 1440), 13);
            b.retrain = detail::slice_frames(all, 40 * 1440, 54 * 1440);
            TimeSeries test = detail::slice_frames(all, 54 * 1440, 84 * 1440);
            DriftSpec drift;
            drift.target_sensor_ids = {b.grid.sensors[13 + pick.below(4)].id};  // a new sensor
            drift.kind = DriftKind::linear;
            drift.onset_minute = static_cast<int>((2 + pick.below(3)) * 1440);
            drift.magnitude = 0.5;
            drift.duration_minutes = 20 * 1440;
            b.test = inject_drift(test, drift);
            b.drifts.push_back(std::move(drift));
            b.drift_max_deviation.push_back(0.5);
            break;
        }
        case Scenario::new_environment: {
            b.grid = SensorGrid::uniform(Magnitude::temperature, detail::numbered_ids('t', 17));
            b.model_a_grid = b.grid;
            auto env_a = detail::base_environment(b.grid, seed, 50, {22.0, 1.5, 0.4, 0.05, 0.8}, 0x9A7A);
            TimeSeries a = generate_environment(env_a);
            b.train = detail::slice_frames(a, 0, 45 * 1440);
            b.val = detail::slice_frames(a, 45 * 1440, 50 * 1440);
            // Environment B: different base level, offsets, gains, noise.
            const int b_retrain_frames = 80000;
            const int b_days = (b_retrain_frames + 30 * 1440 + 1439) / 1440;
            EnvironmentSpec env_b =
                detail::base_environment(b.grid, splitmix64(seed ^ 0xBA5EULL), b_days,
                                         {20.0, 1.2, 0.4, 0.075, 1.2}, 0x9A7B);
            env_b.start = parse_timestamp("2022-01-01T00:00:00Z");
            TimeSeries bb = generate_environment(env_b);
            b.retrain = detail::slice_frames(bb, 0, b_retrain_frames);
            TimeSeries test = detail::slice_frames(bb, b_retrain_frames, b_retrain_frames + 30 * 1440);
            DriftSpec drift;
            drift.target_sensor_ids = {b.grid.sensors[pick.below(17)].id};
            drift.kind = DriftKind::linear;
            drift.onset_minute = static_cast<int>((2 + pick.below(3)) * 1440);
            drift.magnitude = 0.5;
            drift.duration_minutes = 20 * 1440;
            b.test = inject_drift(test, drift);
            b.drifts.push_back(std::move(drift));
            b.drift_max_deviation.push_back(0.5);
            break;
        }
    }
    return b;
}

}  // namespace driftwatch
