#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "driftwatch/error.hpp"
#include "driftwatch/simulator.hpp"
#include "driftwatch/telemetry.hpp"
#include "driftwatch/textio.hpp"

namespace driftwatch {

namespace detail {

inline std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split_commas(std::string_view s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= s.size(); ++i) {
        if (i == s.size() || s[i] == ',') {
            auto item = trim(s.substr(start, i - start));
            if (!item.empty()) out.push_back(item);
            start = i + 1;
        }
    }
    return out;
}

inline bool is_integer_token(std::string_view s) {
    if (s.empty()) return false;
    for (char c : s)
        if (c < '0' || c > '9') return false;
    return true;
}

}  // namespace detail

// The artifact-wide key=value format with dotted section prefixes. One
// schema serves run configs and scenario manifests; unknown keys are a hard
// error, never silently ignored.
class KeyValueFile {
public:
    static KeyValueFile parse_text(const std::string& text, const std::string& origin) {
        KeyValueFile kv;
        kv.origin_ = origin;
        std::istringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            std::string t = detail::trim(line);
            if (t.empty() || t[0] == '#') continue;
            auto eq = t.find('=');
            if (eq == std::string::npos)
                throw Error(ErrorKind::config, origin + ":" + std::to_string(lineno) +
                                                   ": expected key=value");
            std::string key = detail::trim(t.substr(0, eq));
            std::string value = detail::trim(t.substr(eq + 1));
            if (key.empty())
                throw Error(ErrorKind::config, origin + ":" + std::to_string(lineno) + ": empty key");
            if (kv.values_.count(key))
                throw Error(ErrorKind::config, origin + ": duplicate key '" + key + "'");
            kv.values_[key] = value;
        }
        return kv;
    }

    static KeyValueFile load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw Error(ErrorKind::io, "cannot open config file '" + path + "'");
        std::ostringstream ss;
        ss << in.rdbuf();
        return parse_text(ss.str(), path);
    }

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::optional<std::string> get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) return std::nullopt;
        return it->second;
    }

    std::string require(const std::string& key) const {
        auto v = get(key);
        if (!v) throw Error(ErrorKind::config, origin_ + ": missing required key '" + key + "'");
        return *v;
    }

    std::optional<double> get_double(const std::string& key) const {
        auto v = get(key);
        if (!v) return std::nullopt;
        return parse_double_strict(*v, "key " + key);
    }

    std::optional<std::int64_t> get_int(const std::string& key) const {
        auto v = get(key);
        if (!v) return std::nullopt;
        return parse_int_strict(*v, "key " + key);
    }

    std::optional<bool> get_bool(const std::string& key) const {
        auto v = get(key);
        if (!v) return std::nullopt;
        if (*v == "true" || *v == "1") return true;
        if (*v == "false" || *v == "0") return false;
        throw Error(ErrorKind::config, "key " + key + " must be true/false");
    }

    const std::map<std::string, std::string>& entries() const { return values_; }
    const std::string& origin() const { return origin_; }

private:
    std::map<std::string, std::string> values_;
    std::string origin_ = "<config>";
};

namespace detail {

inline bool key_in_schema(std::string_view key) {
    static const char* exact[] = {
        "scenario.name", "scenario.seed",
        "grid.kind", "grid.cadence_minutes", "grid.sensor_ids", "grid.tolerance",
        "grid.alarm_lo", "grid.alarm_hi", "grid.unit",
        "model_a.sensor_ids",
        "files.train", "files.val", "files.test", "files.retrain", "files.baseline", "files.eval",
        "paths.model", "paths.residual", "paths.alerts", "paths.state", "paths.report",
        "preprocess.sg_window", "preprocess.sg_polyorder", "preprocess.mahalanobis_alpha",
        "preprocess.covariance_ridge",
        "train.learning_rate", "train.batch_size", "train.max_epochs", "train.patience",
        "detector.window_minutes", "detector.density_threshold", "detector.persistence_minutes",
        "detector.alpha",
        "retrain.min_frames", "retrain.learning_rate", "retrain.batch_size",
        "retrain.max_epochs", "retrain.patience",
        "drift.count",
        "expect.no_events",
        "splits.train_frames", "splits.val_frames", "splits.test_frames",
        "splits.retrain_frames", "splits.baseline_frames", "splits.eval_frames",
        "env.duration_minutes", "env.setpoint_base", "env.daily_amplitude",
        "env.slow_drift_amplitude",
    };
    for (const char* k : exact)
        if (key == k) return true;
    // detector.threshold.<sensor_id>
    constexpr std::string_view thr = "detector.threshold.";
    if (key.substr(0, thr.size()) == thr && key.size() > thr.size()) return true;
    // drift.<i>.<field>
    constexpr std::string_view drift = "drift.";
    if (key.substr(0, drift.size()) == drift) {
        auto rest = key.substr(drift.size());
        auto dot = rest.find('.');
        if (dot != std::string_view::npos && is_integer_token(rest.substr(0, dot))) {
            auto field = rest.substr(dot + 1);
            return field == "sensors" || field == "kind" || field == "onset_minute" ||
                   field == "magnitude" || field == "duration_minutes" || field == "max_deviation";
        }
    }
    return false;
}

}  // namespace detail

// Typed view over a validated KeyValueFile.
struct ArtifactConfig {
    KeyValueFile kv;
    std::optional<std::string> scenario_name;
    std::uint64_t seed = 0;
    SensorGrid grid;
    bool has_grid = false;
    std::vector<std::string> model_a_ids;  // empty unless the scenario trains on a sub-grid
    PreprocessConfig preprocess;
    TrainConfig train;
    TrainConfig retrain_train{0.02, 256, 120, 8};  // linear head: larger steps
    DetectorConfig detector;
    double residual_alpha = 0.01;
    std::map<std::string, double> per_sensor_thresholds;
    int retrain_min_frames = 10000;
    std::vector<DriftSpec> drifts;
    std::vector<double> drift_max_deviation;
    bool expect_no_events = false;

    static ArtifactConfig from_kv(KeyValueFile kv) {
        for (const auto& [key, _] : kv.entries())
            if (!detail::key_in_schema(key))
                throw Error(ErrorKind::config,
                            kv.origin() + ": unknown config key '" + key + "'");
        ArtifactConfig c;
        c.kv = std::move(kv);
        const KeyValueFile& f = c.kv;

        c.scenario_name = f.get("scenario.name");
        if (auto s = f.get_int("scenario.seed")) c.seed = static_cast<std::uint64_t>(*s);

        if (f.has("grid.sensor_ids")) {
            auto kind = magnitude_from_name(f.require("grid.kind"));
            SensorKind sk = SensorKind::defaults(kind);
            if (auto v = f.get_double("grid.tolerance")) sk.tolerance = *v;
            if (auto v = f.get_double("grid.alarm_lo")) sk.alarm_lo = *v;
            if (auto v = f.get_double("grid.alarm_hi")) sk.alarm_hi = *v;
            if (auto v = f.get("grid.unit")) sk.unit = *v;
            for (const auto& id : detail::split_commas(f.require("grid.sensor_ids")))
                c.grid.sensors.push_back({id, sk});
            if (auto v = f.get_int("grid.cadence_minutes"))
                c.grid.cadence_minutes = static_cast<int>(*v);
            c.grid.validate();
            c.has_grid = true;
        }
        if (auto v = f.get("model_a.sensor_ids")) c.model_a_ids = detail::split_commas(*v);

        if (auto v = f.get_int("preprocess.sg_window")) c.preprocess.sg_window = static_cast<int>(*v);
        if (auto v = f.get_int("preprocess.sg_polyorder"))
            c.preprocess.sg_polyorder = static_cast<int>(*v);
        if (auto v = f.get_double("preprocess.mahalanobis_alpha"))
            c.preprocess.mahalanobis_alpha = *v;
        if (auto v = f.get_double("preprocess.covariance_ridge")) c.preprocess.covariance_ridge = *v;
        c.preprocess.validate();

        if (auto v = f.get_double("train.learning_rate")) c.train.learning_rate = *v;
        if (auto v = f.get_int("train.batch_size")) c.train.batch_size = static_cast<int>(*v);
        if (auto v = f.get_int("train.max_epochs")) c.train.max_epochs = static_cast<int>(*v);
        if (auto v = f.get_int("train.patience")) c.train.patience = static_cast<int>(*v);
        c.train.validate();

        if (auto v = f.get_int("detector.window_minutes"))
            c.detector.window_minutes = static_cast<int>(*v);
        if (auto v = f.get_double("detector.density_threshold")) c.detector.density_threshold = *v;
        if (auto v = f.get_int("detector.persistence_minutes"))
            c.detector.persistence_minutes = static_cast<int>(*v);
        c.detector.validate();
        if (auto v = f.get_double("detector.alpha")) {
            if (!(*v > 0.0 && *v < 1.0))
                throw Error(ErrorKind::config, "detector.alpha must be in (0,1)");
            c.residual_alpha = *v;
        }
        for (const auto& [key, value] : f.entries()) {
            constexpr std::string_view thr = "detector.threshold.";
            if (key.size() > thr.size() && std::string_view(key).substr(0, thr.size()) == thr)
                c.per_sensor_thresholds[key.substr(thr.size())] =
                    parse_double_strict(value, "key " + key);
        }
        if (auto v = f.get_int("retrain.min_frames")) c.retrain_min_frames = static_cast<int>(*v);
        if (auto v = f.get_double("retrain.learning_rate")) c.retrain_train.learning_rate = *v;
        if (auto v = f.get_int("retrain.batch_size")) c.retrain_train.batch_size = static_cast<int>(*v);
        if (auto v = f.get_int("retrain.max_epochs")) c.retrain_train.max_epochs = static_cast<int>(*v);
        if (auto v = f.get_int("retrain.patience")) c.retrain_train.patience = static_cast<int>(*v);
        c.retrain_train.validate();

        if (auto v = f.get_int("drift.count")) {
            for (std::int64_t i = 0; i < *v; ++i) {
                std::string p = "drift." + std::to_string(i) + ".";
                DriftSpec d;
                d.target_sensor_ids = detail::split_commas(f.require(p + "sensors"));
                d.kind = drift_kind_from_name(f.require(p + "kind"));
                d.onset_minute = static_cast<int>(parse_int_strict(f.require(p + "onset_minute"),
                                                                   p + "onset_minute"));
                d.magnitude = parse_double_strict(f.require(p + "magnitude"), p + "magnitude");
                d.duration_minutes = static_cast<int>(
                    parse_int_strict(f.require(p + "duration_minutes"), p + "duration_minutes"));
                c.drifts.push_back(std::move(d));
                double md = f.get_double(p + "max_deviation")
                                .value_or(std::fabs(c.drifts.back().magnitude));
                c.drift_max_deviation.push_back(md);
            }
        }
        if (auto v = f.get_bool("expect.no_events")) c.expect_no_events = *v;
        return c;
    }

    static ArtifactConfig load(const std::string& path,
                               const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
        KeyValueFile kv = KeyValueFile::load(path);
        for (const auto& [k, v] : overrides) kv.set(k, v);
        return from_kv(std::move(kv));
    }

    std::string file(const std::string& role) const {
        auto v = kv.get("files." + role);
        if (!v || v->empty())
            throw Error(ErrorKind::config, "config does not name a files." + role + " input");
        return *v;
    }
    std::optional<std::string> file_opt(const std::string& role) const {
        auto v = kv.get("files." + role);
        if (v && v->empty()) return std::nullopt;
        return v;
    }
    std::string path_or(const std::string& role, const std::string& fallback) const {
        auto v = kv.get("paths." + role);
        if (!v || v->empty()) return fallback;
        return *v;
    }

    std::vector<double> thresholds_for(const SensorGrid& g) const {
        std::vector<double> out;
        out.reserve(g.size());
        for (const auto& s : g.sensors) {
            auto it = per_sensor_thresholds.find(s.id);
            out.push_back(it == per_sensor_thresholds.end() ? detector.density_threshold
                                                            : it->second);
        }
        return out;
    }
};

// Serializes a scenario bundle to the manifest the other commands (and
// cmd_evaluate's expectations) consume. Deterministic field order.
inline std::string manifest_text(const ExperimentBundle& b) {
    std::ostringstream out;
    out << "# driftwatch scenario manifest\n";
    out << "scenario.name=" << b.scenario << '\n';
    out << "scenario.seed=" << b.seed << '\n';
    const SensorKind& sk = b.grid.sensors[0].kind;
    out << "grid.kind=" << magnitude_name(sk.kind) << '\n';
    out << "grid.cadence_minutes=" << b.grid.cadence_minutes << '\n';
    out << "grid.sensor_ids=";
    for (std::size_t i = 0; i < b.grid.size(); ++i)
        out << (i ? "," : "") << b.grid.sensors[i].id;
    out << '\n';
    out << "grid.tolerance=" << format_double(sk.tolerance) << '\n';
    out << "grid.alarm_lo=" << format_double(sk.alarm_lo) << '\n';
    out << "grid.alarm_hi=" << format_double(sk.alarm_hi) << '\n';
    out << "grid.unit=" << sk.unit << '\n';
    if (b.model_a_grid.size() != b.grid.size()) {
        out << "model_a.sensor_ids=";
        for (std::size_t i = 0; i < b.model_a_grid.size(); ++i)
            out << (i ? "," : "") << b.model_a_grid.sensors[i].id;
        out << '\n';
    }
    out << "files.train=train.csv\n";
    out << "files.val=val.csv\n";
    out << "files.test=test.csv\n";
    if (b.retrain) out << "files.retrain=retrain.csv\n";
    if (b.baseline) out << "files.baseline=baseline.csv\n";
    if (b.eval) out << "files.eval=eval.csv\n";
    out << "preprocess.sg_window=" << b.pre_cfg.sg_window << '\n';
    out << "preprocess.sg_polyorder=" << b.pre_cfg.sg_polyorder << '\n';
    out << "preprocess.mahalanobis_alpha=" << format_double(b.pre_cfg.mahalanobis_alpha) << '\n';
    out << "preprocess.covariance_ridge=" << format_double(b.pre_cfg.covariance_ridge) << '\n';
    out << "train.learning_rate=" << format_double(b.train_cfg.learning_rate) << '\n';
    out << "train.batch_size=" << b.train_cfg.batch_size << '\n';
    out << "train.max_epochs=" << b.train_cfg.max_epochs << '\n';
    out << "train.patience=" << b.train_cfg.patience << '\n';
    out << "detector.window_minutes=" << b.det_cfg.window_minutes << '\n';
    out << "detector.density_threshold=" << format_double(b.det_cfg.density_threshold) << '\n';
    out << "detector.persistence_minutes=" << b.det_cfg.persistence_minutes << '\n';
    out << "detector.alpha=" << format_double(b.residual_alpha) << '\n';
    out << "retrain.min_frames=" << b.retrain_min_frames << '\n';
    out << "retrain.learning_rate=" << format_double(b.retrain_cfg.learning_rate) << '\n';
    out << "retrain.batch_size=" << b.retrain_cfg.batch_size << '\n';
    out << "retrain.max_epochs=" << b.retrain_cfg.max_epochs << '\n';
    out << "retrain.patience=" << b.retrain_cfg.patience << '\n';
    out << "splits.train_frames=" << b.train.size() << '\n';
    out << "splits.val_frames=" << b.val.size() << '\n';
    out << "splits.test_frames=" << b.test.size() << '\n';
    if (b.retrain) out << "splits.retrain_frames=" << b.retrain->size() << '\n';
    if (b.baseline) out << "splits.baseline_frames=" << b.baseline->size() << '\n';
    if (b.eval) out << "splits.eval_frames=" << b.eval->size() << '\n';
    out << "drift.count=" << b.drifts.size() << '\n';
    for (std::size_t i = 0; i < b.drifts.size(); ++i) {
        const DriftSpec& d = b.drifts[i];
        std::string p = "drift." + std::to_string(i) + ".";
        out << p << "sensors=";
        for (std::size_t j = 0; j < d.target_sensor_ids.size(); ++j)
            out << (j ? "," : "") << d.target_sensor_ids[j];
        out << '\n';
        out << p << "kind=" << drift_kind_name(d.kind) << '\n';
        out << p << "onset_minute=" << d.onset_minute << '\n';
        out << p << "magnitude=" << format_double(d.magnitude) << '\n';
        out << p << "duration_minutes=" << d.duration_minutes << '\n';
        out << p << "max_deviation=" << format_double(b.drift_max_deviation[i]) << '\n';
    }
    out << "expect.no_events=" << (b.expect_no_events ? "true" : "false") << '\n';
    return out.str();
}

}  // namespace driftwatch
