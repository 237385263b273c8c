#include "commands.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "driftwatch/config.hpp"
#include "driftwatch/detector.hpp"
#include "driftwatch/mlp.hpp"
#include "driftwatch/preprocess.hpp"
#include "driftwatch/residual_store.hpp"
#include "driftwatch/simulator.hpp"
#include "driftwatch/telemetry.hpp"

namespace driftwatch::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string resolve(const std::string& base_dir, const std::string& path) {
    if (path.empty() || fs::path(path).is_absolute()) return path;
    return (fs::path(base_dir) / path).string();
}

std::string config_dir(const std::string& config_path) {
    auto p = fs::path(config_path).parent_path();
    return p.empty() ? std::string(".") : p.string();
}

TimeSeries read_series(const std::string& path, const SensorGrid& grid) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::io, "cannot open '" + path + "'");
    return parse_csv(in, grid);
}

void write_file_atomic(const std::string& path, const std::string& content) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorKind::io, "cannot write '" + tmp + "'");
        out << content;
        if (!out) throw Error(ErrorKind::io, "write failed for '" + tmp + "'");
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw Error(ErrorKind::io, "cannot rename '" + tmp + "' to '" + path + "'");
}

// Grid the model was (or will be) trained on: either the full grid or the
// model_a subset named in the config.
SensorGrid model_grid(const ArtifactConfig& cfg) {
    if (cfg.model_a_ids.empty()) return cfg.grid;
    SensorGrid g;
    g.cadence_minutes = cfg.grid.cadence_minutes;
    for (const auto& id : cfg.model_a_ids) {
        bool found = false;
        for (const auto& s : cfg.grid.sensors)
            if (s.id == id) {
                g.sensors.push_back(s);
                found = true;
                break;
            }
        if (!found)
            throw Error(ErrorKind::config, "model_a sensor '" + id + "' is not in the grid");
    }
    g.validate();
    return g;
}

// Supervised rows from a preprocessed span: one row per frame with a defined
// set point; targets are the smoothed values, masked slots excluded from loss.
TrainingSet to_training_set(const PipelineResult& pipe) {
    const std::size_t n = pipe.clean.grid.size();
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < pipe.clean.frames.size(); ++i)
        if (pipe.setpoints[i].has_value()) rows.push_back(i);
    if (rows.empty()) throw Error(ErrorKind::input, "no usable frames after preprocessing");
    TrainingSet set;
    set.inputs.resize(static_cast<Eigen::Index>(rows.size()));
    set.targets.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(n));
    set.mask.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(n));
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto& f = pipe.clean.frames[rows[k]];
        set.inputs(static_cast<Eigen::Index>(k)) = *pipe.setpoints[rows[k]];
        for (std::size_t j = 0; j < n; ++j) {
            set.targets(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = f.values[j];
            set.mask(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = f.mask[j];
        }
    }
    return set;
}

// Per-sensor residuals (measured - predicted) over a preprocessed span,
// batched through the network in chunks.
std::vector<std::vector<double>> collect_residuals(const MlpModel& model, const TrainingSet& set) {
    const auto n = static_cast<std::size_t>(set.targets.cols());
    std::vector<std::vector<double>> residuals(n);
    const Eigen::Index chunk = 8192;
    for (Eigen::Index begin = 0; begin < set.inputs.size(); begin += chunk) {
        Eigen::Index len = std::min<Eigen::Index>(chunk, set.inputs.size() - begin);
        Eigen::MatrixXd pred = forward_batch(model, set.inputs.segment(begin, len));
        for (Eigen::Index i = 0; i < len; ++i)
            for (Eigen::Index j = 0; j < pred.cols(); ++j)
                if (set.mask(begin + i, j))
                    residuals[static_cast<std::size_t>(j)].push_back(set.targets(begin + i, j) -
                                                                     pred(i, j));
    }
    return residuals;
}

std::vector<double> grid_tolerances(const SensorGrid& g) {
    std::vector<double> out;
    out.reserve(g.size());
    for (const auto& s : g.sensors) out.push_back(s.kind.tolerance);
    return out;
}

int report_error(const Error& e) {
    std::cerr << "driftwatch: error: " << e.kind_name() << ": " << e.what() << '\n';
    return e.exit_code();
}

}  // namespace

// ---------------------------------------------------------------------------
// simulate

int run_simulate(const SimulateOptions& opt) {
    try {
        ExperimentBundle b = make_experiment(opt.scenario, opt.seed);
        fs::path dir(opt.out_dir);
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) throw Error(ErrorKind::io, "cannot create output directory '" + opt.out_dir + "'");
        auto write_series = [&](const std::string& name, const TimeSeries& s) {
            std::ostringstream ss;
            write_csv(s, ss);
            write_file_atomic((dir / name).string(), ss.str());
        };
        write_series("train.csv", b.train);
        write_series("val.csv", b.val);
        write_series("test.csv", b.test);
        if (b.retrain) write_series("retrain.csv", *b.retrain);
        if (b.baseline) write_series("baseline.csv", *b.baseline);
        if (b.eval) write_series("eval.csv", *b.eval);
        write_file_atomic((dir / "manifest.cfg").string(), manifest_text(b));
        std::cerr << "simulate: wrote scenario '" << b.scenario << "' (seed " << b.seed << ") to "
                  << opt.out_dir << '\n';
        return 0;
    } catch (const Error& e) {
        return report_error(e);
    }
}

// ---------------------------------------------------------------------------
// train

int run_train(const TrainOptions& opt) {
    try {
        ArtifactConfig cfg = ArtifactConfig::load(opt.config_path, opt.overrides);
        if (!cfg.has_grid) throw Error(ErrorKind::config, "train requires a grid definition");
        const std::string base = config_dir(opt.config_path);
        const std::string out_dir = opt.out_dir.value_or(base);

        SensorGrid grid = model_grid(cfg);
        TimeSeries train_series = read_series(resolve(base, cfg.file("train")), grid);
        TimeSeries val_series = read_series(resolve(base, cfg.file("val")), grid);
        if (train_series.frames.empty()) throw Error(ErrorKind::input, "training CSV has no rows");
        if (val_series.frames.empty()) throw Error(ErrorKind::input, "validation CSV has no rows");

        TimeSeries thresholded = train_series;
        for (auto& f : thresholded.frames) f = threshold_filter(f, grid);
        GridStatistics stats = fit_grid_statistics(thresholded, cfg.preprocess);

        PipelineResult train_pipe = run_pipeline(train_series, stats, cfg.preprocess);
        PipelineResult val_pipe = run_pipeline(val_series, stats, cfg.preprocess);
        TrainingSet train_set = to_training_set(train_pipe);
        TrainingSet val_set = to_training_set(val_pipe);

        MlpModel model = init_model(static_cast<int>(grid.size()), cfg.seed);
        model.sensor_ids = grid.ids();
        auto [trained, history] = train(model, train_set, val_set, cfg.train);
        for (std::size_t e = 0; e < history.size(); ++e)
            std::cerr << "train: epoch " << (e + 1) << " train_mse " << history[e].train_mse
                      << " val_mse " << history[e].val_mse << '\n';

        auto residuals = collect_residuals(trained, train_set);
        ResidualModel residual = fit_residual_model(residuals, cfg.residual_alpha);

        std::ostringstream model_text;
        save_model(trained, model_text);
        write_file_atomic(resolve(out_dir, cfg.path_or("model", "model.dwm")), model_text.str());

        ResidualStore store{grid.ids(), residual, stats};
        std::ostringstream store_text;
        store.save(store_text);
        write_file_atomic(resolve(out_dir, cfg.path_or("residual", "residual.dwr")),
                          store_text.str());

        std::ostringstream rep;
        rep << "driftwatch train report\n";
        if (cfg.scenario_name) rep << "scenario " << *cfg.scenario_name << '\n';
        rep << "seed " << cfg.seed << '\n';
        rep << "sensors " << grid.size() << '\n';
        rep << "snapshot_epoch " << trained.trained_epochs << " of " << history.size() << '\n';
        rep << "final_val_mse " << format_double(history.empty() ? 0.0 : history.back().val_mse)
            << '\n';
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const SensorResidual& r = residual.sensors[i];
            rep << "sensor " << grid.sensors[i].id << " mu " << format_double(r.mu) << " sigma "
                << format_double(r.sigma) << " ci_lo " << format_double(r.ci_lo) << " ci_hi "
                << format_double(r.ci_hi) << " ks_stat " << format_double(r.ks_statistic) << " "
                << (r.ks_passed ? "normal" : "empirical-fallback") << '\n';
        }
        write_file_atomic(resolve(out_dir, cfg.path_or("report", "report.txt")), rep.str());
        std::cout << rep.str();
        return 0;
    } catch (const Error& e) {
        return report_error(e);
    }
}

// ---------------------------------------------------------------------------
// detect

namespace {

// Line source for replay and tail-follow over a growing file; complete lines
// only, so a partially flushed row is never parsed.
class LineSource {
public:
    LineSource(const std::string& path, bool follow, int poll_ms, int idle_timeout_ms)
        : in_(path, std::ios::binary), follow_(follow), poll_ms_(poll_ms),
          idle_timeout_ms_(idle_timeout_ms) {
        if (!in_) throw Error(ErrorKind::io, "cannot open input '" + path + "'");
    }

    std::optional<std::string> next() {
        int idle_ms = 0;
        for (;;) {
            std::string chunk;
            while (true) {
                int c = in_.get();
                if (c == std::char_traits<char>::eof()) break;
                if (c == '\n') {
                    buffer_ += chunk;
                    std::string line = std::move(buffer_);
                    buffer_.clear();
                    if (!line.empty() && line.back() == '\r') line.pop_back();
                    return line;
                }
                chunk.push_back(static_cast<char>(c));
            }
            buffer_ += chunk;
            if (!follow_) return std::nullopt;
            if (idle_timeout_ms_ > 0 && idle_ms >= idle_timeout_ms_) return std::nullopt;
            in_.clear();
            std::this_thread::sleep_for(std::chrono::milliseconds(poll_ms_));
            idle_ms += poll_ms_;
        }
    }

private:
    std::ifstream in_;
    std::string buffer_;
    bool follow_;
    int poll_ms_;
    int idle_timeout_ms_;
};

json event_json(const UncalibrationEvent& ev) {
    json j;
    j["type"] = "event";
    j["sensor_id"] = ev.sensor_id;
    j["onset"] = format_timestamp(ev.onset);
    j["confirmed_at"] = format_timestamp(ev.confirmed_at);
    j["direction"] = ev.direction == Direction::high ? "high" : "low";
    j["estimated_deviation"] = ev.estimated_deviation;
    if (ev.time_to_tolerance_minutes)
        j["time_to_tolerance_minutes"] = *ev.time_to_tolerance_minutes;
    else
        j["time_to_tolerance_minutes"] = nullptr;
    j["density_at_confirmation"] = ev.density_at_confirmation;
    return j;
}

}  // namespace

int run_detect(const DetectOptions& opt) {
    try {
        ArtifactConfig cfg = ArtifactConfig::load(opt.config_path, opt.overrides);
        if (!cfg.has_grid) throw Error(ErrorKind::config, "detect requires a grid definition");
        const std::string base = config_dir(opt.config_path);
        const std::string out_dir = opt.out_dir.value_or(base);
        const SensorGrid& grid = cfg.grid;

        std::string model_path =
            opt.model ? *opt.model : resolve(out_dir, cfg.path_or("model", "model.dwm"));
        std::ifstream model_in(model_path);
        if (!model_in) throw Error(ErrorKind::io, "cannot open model '" + model_path + "'");
        MlpModel model = load_model(model_in);
        if (model.sensor_ids != grid.ids())
            throw Error(ErrorKind::schema, "model sensors do not match the configured grid");

        std::string residual_path =
            opt.residual ? *opt.residual : resolve(out_dir, cfg.path_or("residual", "residual.dwr"));
        std::ifstream store_in(residual_path);
        if (!store_in) throw Error(ErrorKind::io, "cannot open residual file '" + residual_path + "'");
        ResidualStore store = ResidualStore::load(store_in);
        if (store.sensor_ids != grid.ids())
            throw Error(ErrorKind::schema, "residual file sensors do not match the configured grid");
        if (store.stats.dim() != grid.size())
            throw Error(ErrorKind::schema, "grid statistics dimension does not match the grid");

        std::string input_path = opt.input ? *opt.input : resolve(base, cfg.file("test"));
        std::string alerts_path =
            opt.alerts ? *opt.alerts : resolve(out_dir, cfg.path_or("alerts", "alerts.jsonl"));
        std::string state_path = opt.state ? *opt.state : resolve(out_dir, cfg.path_or("state", ""));

        PipelineStream pipeline(grid, store.stats, cfg.preprocess);
        DetectorState detector(grid.ids(), grid_tolerances(grid), cfg.detector,
                               cfg.thresholds_for(grid));
        std::int64_t consumed = 0;
        std::int64_t resume_consumed = 0;
        bool resumed = false;
        if (!state_path.empty() && fs::exists(state_path)) {
            std::ifstream st(state_path);
            if (!st) throw Error(ErrorKind::io, "cannot open state file '" + state_path + "'");
            TokenReader r(st, "checkpoint");
            r.expect("driftwatch-checkpoint v1");
            resume_consumed = r.labeled_int("consumed_frames");
            auto alert_bytes = r.labeled_int("alert_bytes");
            pipeline.restore(st);
            detector = DetectorState::load(st, grid.ids(), grid_tolerances(grid), cfg.detector,
                                           cfg.thresholds_for(grid));
            // Alerts written after the checkpoint are rolled back; the resumed
            // run reproduces them exactly.
            if (fs::exists(alerts_path)) {
                if (fs::file_size(alerts_path) < static_cast<std::uintmax_t>(alert_bytes))
                    throw Error(ErrorKind::corrupt, "alerts file is shorter than the checkpoint");
                fs::resize_file(alerts_path, static_cast<std::uintmax_t>(alert_bytes));
            } else if (alert_bytes != 0) {
                throw Error(ErrorKind::corrupt, "checkpoint references a missing alerts file");
            }
            resumed = true;
            std::cerr << "detect: resumed from checkpoint at frame " << resume_consumed << '\n';
        }

        std::ofstream alerts(alerts_path, resumed ? std::ios::app
                                                  : std::ios::trunc | std::ios::out);
        if (!alerts) throw Error(ErrorKind::io, "cannot open alerts output '" + alerts_path + "'");

        auto checkpoint = [&]() {
            if (state_path.empty()) return;
            alerts.flush();
            std::ostringstream ss;
            ss << "driftwatch-checkpoint v1\n";
            ss << "consumed_frames " << consumed << '\n';
            ss << "alert_bytes " << static_cast<std::int64_t>(fs::file_size(alerts_path)) << '\n';
            pipeline.save(ss);
            detector.save(ss);
            write_file_atomic(state_path, ss.str());
        };

        auto process_clean = [&](const CleanFrame& cf) {
            const std::size_t n = grid.size();
            std::vector<std::optional<Classification>> cls(n);
            std::vector<std::optional<double>> errs(n);
            if (cf.setpoint) {
                Eigen::VectorXd pred = forward(model, *cf.setpoint);
                for (std::size_t i = 0; i < n; ++i) {
                    if (!cf.frame.mask[i]) continue;
                    double err = cf.frame.values[i] - pred(static_cast<Eigen::Index>(i));
                    cls[i] = classify_residual(err, store.residual.sensors[i]);
                    errs[i] = err;
                }
            }
            auto events = detector.step(cf.frame.timestamp, cls, errs);
            for (const auto& ev : events) alerts << event_json(ev).dump() << '\n';
            if ((cf.frame.timestamp + 1) % 1440 == 0) {
                json j;
                j["type"] = "status";
                j["timestamp"] = format_timestamp(cf.frame.timestamp);
                json dens = json::object();
                for (std::size_t i = 0; i < n; ++i) {
                    json d;
                    auto up = detector.upper_density(i);
                    auto lo = detector.lower_density(i);
                    d["upper"] = up ? json(*up) : json(nullptr);
                    d["lower"] = lo ? json(*lo) : json(nullptr);
                    auto peaks = detector.take_peak_densities(i);
                    d["upper_peak"] = peaks.first;
                    d["lower_peak"] = peaks.second;
                    dens[grid.sensors[i].id] = std::move(d);
                }
                j["densities"] = std::move(dens);
                alerts << j.dump() << '\n';
            }
        };

        LineSource lines(input_path, opt.follow, opt.poll_ms, opt.idle_timeout_ms);
        auto header = lines.next();
        if (!header) throw Error(ErrorKind::schema, "input has no header row");
        check_csv_header(*header, grid);
        std::size_t row = 0;  // data rows; header is row 0
        std::optional<Minute> last_minute;
        while (auto line = lines.next()) {
            if (line->empty()) continue;
            ++row;
            ReadingFrame frame = parse_csv_row(*line, grid, row);
            if (last_minute && frame.timestamp <= *last_minute)
                throw Error(ErrorKind::ordering, "non-monotone timestamp at row " + std::to_string(row));
            last_minute = frame.timestamp;
            ++consumed;
            if (consumed <= resume_consumed) continue;
            for (const auto& cf : pipeline.feed(frame)) process_clean(cf);
            if (consumed % 1440 == 0) checkpoint();
        }
        for (const auto& cf : pipeline.finish()) process_clean(cf);
        alerts.flush();
        if (!alerts) throw Error(ErrorKind::io, "failed writing alerts to '" + alerts_path + "'");
        std::cerr << "detect: processed " << consumed << " frames\n";
        return 0;
    } catch (const Error& e) {
        return report_error(e);
    }
}

// ---------------------------------------------------------------------------
// retrain

namespace {

std::pair<TrainingSet, TrainingSet> split_rows(const TrainingSet& set, double train_fraction) {
    const auto n = set.inputs.size();
    auto cut = static_cast<Eigen::Index>(train_fraction * static_cast<double>(n));
    cut = std::max<Eigen::Index>(1, std::min(n - 1, cut));
    TrainingSet a, b;
    a.inputs = set.inputs.head(cut);
    a.targets = set.targets.topRows(cut);
    a.mask = set.mask.topRows(cut);
    b.inputs = set.inputs.tail(n - cut);
    b.targets = set.targets.bottomRows(n - cut);
    b.mask = set.mask.bottomRows(n - cut);
    return {std::move(a), std::move(b)};
}

// Per-sensor |error| samples of `model` on a preprocessed span; the model's
// sensors are mapped into the span's grid by id.
std::vector<std::vector<double>> abs_errors_by_id(const MlpModel& model, const SensorGrid& grid,
                                                  const PipelineResult& pipe) {
    std::vector<std::ptrdiff_t> slot(model.sensor_ids.size(), -1);
    for (std::size_t m = 0; m < model.sensor_ids.size(); ++m)
        for (std::size_t g = 0; g < grid.size(); ++g)
            if (grid.sensors[g].id == model.sensor_ids[m]) {
                slot[m] = static_cast<std::ptrdiff_t>(g);
                break;
            }
    std::vector<std::vector<double>> out(model.sensor_ids.size());
    for (std::size_t k = 0; k < pipe.clean.frames.size(); ++k) {
        if (!pipe.setpoints[k]) continue;
        Eigen::VectorXd pred = forward(model, *pipe.setpoints[k]);
        const auto& f = pipe.clean.frames[k];
        for (std::size_t m = 0; m < slot.size(); ++m) {
            if (slot[m] < 0) continue;
            auto g = static_cast<std::size_t>(slot[m]);
            if (!f.mask[g]) continue;
            out[m].push_back(std::fabs(f.values[g] - pred(static_cast<Eigen::Index>(m))));
        }
    }
    return out;
}

}  // namespace

int run_retrain(const RetrainOptions& opt) {
    try {
        ArtifactConfig cfg = ArtifactConfig::load(opt.config_path, opt.overrides);
        if (!cfg.has_grid) throw Error(ErrorKind::config, "retrain requires a grid definition");
        const std::string base = config_dir(opt.config_path);
        const SensorGrid& grid = cfg.grid;

        std::ifstream model_in(opt.model_in);
        if (!model_in) throw Error(ErrorKind::io, "cannot open model '" + opt.model_in + "'");
        MlpModel model_a = load_model(model_in);
        if (grid.size() < model_a.n_outputs())
            throw Error(ErrorKind::config,
                        "retrain grid has fewer sensors than the model; shrinking is unsupported");
        for (std::size_t i = 0; i < model_a.sensor_ids.size(); ++i)
            if (grid.sensors[i].id != model_a.sensor_ids[i])
                throw Error(ErrorKind::config,
                            "retrain grid must list the model's sensors first, in model order ('" +
                                grid.sensors[i].id + "' vs '" + model_a.sensor_ids[i] + "')");

        std::string data_path = opt.data ? *opt.data : resolve(base, cfg.file("retrain"));
        TimeSeries retrain_series = read_series(data_path, grid);
        if (retrain_series.frames.empty()) throw Error(ErrorKind::input, "retrain CSV has no rows");
        if (static_cast<int>(retrain_series.frames.size()) < cfg.retrain_min_frames)
            std::cerr << "retrain: warning: dataset has " << retrain_series.frames.size()
                      << " frames, below the recommended minimum of " << cfg.retrain_min_frames
                      << "; proceeding\n";

        // The retrain data is the new calibrated condition: grid statistics
        // and residual bounds are refitted on it.
        TimeSeries thresholded = retrain_series;
        for (auto& f : thresholded.frames) f = threshold_filter(f, grid);
        GridStatistics stats_b = fit_grid_statistics(thresholded, cfg.preprocess);
        PipelineResult pipe_b = run_pipeline(retrain_series, stats_b, cfg.preprocess);
        TrainingSet full = to_training_set(pipe_b);
        auto [new_train, new_val] = split_rows(full, 0.85);

        MlpModel model_b = retrain_last_layer(model_a, new_train, new_val, cfg.retrain_train);
        model_b.sensor_ids = grid.ids();

        std::ostringstream model_text;
        save_model(model_b, model_text);
        write_file_atomic(opt.model_out, model_text.str());

        auto residuals_b = collect_residuals(model_b, full);
        ResidualModel residual_b = fit_residual_model(residuals_b, cfg.residual_alpha);
        if (opt.residual_out) {
            ResidualStore store_b{grid.ids(), residual_b, stats_b};
            std::ostringstream ss;
            store_b.save(ss);
            write_file_atomic(*opt.residual_out, ss.str());
        }

        // Report: pre/post MAE on the held-out slice, plus the pre-offset
        // |error| 95th percentile when a baseline span is available.
        std::ostringstream rep;
        rep << "driftwatch retrain report\n";
        rep << "frames " << retrain_series.frames.size() << '\n';
        rep << "snapshot_epoch " << model_b.trained_epochs << '\n';

        std::optional<PipelineResult> held;
        if (auto eval_file = cfg.file_opt("eval"))
            held = run_pipeline(read_series(resolve(base, *eval_file), grid), stats_b, cfg.preprocess);
        std::vector<std::vector<double>> pre_abs, post_abs, baseline_abs;
        if (held) {
            pre_abs = abs_errors_by_id(model_a, grid, *held);
            post_abs = abs_errors_by_id(model_b, grid, *held);
        }
        if (opt.residual_in) {
            if (auto baseline_file = cfg.file_opt("baseline")) {
                std::ifstream rin(*opt.residual_in);
                if (!rin)
                    throw Error(ErrorKind::io, "cannot open residual file '" + *opt.residual_in + "'");
                ResidualStore store_a = ResidualStore::load(rin);
                SensorGrid grid_a;
                grid_a.cadence_minutes = grid.cadence_minutes;
                for (const auto& id : store_a.sensor_ids)
                    for (const auto& s : grid.sensors)
                        if (s.id == id) grid_a.sensors.push_back(s);
                PipelineResult pipe_base = run_pipeline(
                    read_series(resolve(base, *baseline_file), grid_a), store_a.stats, cfg.preprocess);
                baseline_abs = abs_errors_by_id(model_a, grid_a, pipe_base);
            }
        }
        for (std::size_t j = 0; j < grid.size(); ++j) {
            const std::string& id = grid.sensors[j].id;
            auto model_a_index = [&]() -> std::ptrdiff_t {
                for (std::size_t m = 0; m < model_a.sensor_ids.size(); ++m)
                    if (model_a.sensor_ids[m] == id) return static_cast<std::ptrdiff_t>(m);
                return -1;
            }();
            if (held) {
                if (model_a_index >= 0 && !pre_abs[static_cast<std::size_t>(model_a_index)].empty())
                    rep << "sensor." << id << ".pre_mae="
                        << format_double(mean_of(pre_abs[static_cast<std::size_t>(model_a_index)]))
                        << '\n';
                if (!post_abs[j].empty())
                    rep << "sensor." << id << ".post_mae=" << format_double(mean_of(post_abs[j]))
                        << '\n';
            }
            if (model_a_index >= 0 && static_cast<std::size_t>(model_a_index) < baseline_abs.size() &&
                !baseline_abs[static_cast<std::size_t>(model_a_index)].empty())
                rep << "sensor." << id << ".baseline_abs_p95="
                    << format_double(empirical_quantile(
                           baseline_abs[static_cast<std::size_t>(model_a_index)], 0.95))
                    << '\n';
        }
        std::string report_path = opt.report.value_or("");
        if (!report_path.empty()) write_file_atomic(report_path, rep.str());
        std::cout << rep.str();
        return 0;
    } catch (const Error& e) {
        return report_error(e);
    }
}

// ---------------------------------------------------------------------------
// evaluate

int run_evaluate(const EvaluateOptions& opt) {
    try {
        std::string manifest_path = (fs::path(opt.scenario_dir) / "manifest.cfg").string();
        ArtifactConfig cfg = ArtifactConfig::load(manifest_path);
        if (!cfg.has_grid) throw Error(ErrorKind::config, "manifest has no grid definition");
        std::string alerts_path =
            opt.alerts.value_or((fs::path(opt.scenario_dir) / "alerts.jsonl").string());

        // Start of the detection span, for latency computation.
        Minute test_start = 0;
        {
            std::ifstream tin(resolve(opt.scenario_dir, cfg.file("test")));
            if (!tin) throw Error(ErrorKind::io, "cannot open test CSV");
            std::string header, first;
            if (!std::getline(tin, header) || !std::getline(tin, first))
                throw Error(ErrorKind::input, "test CSV has no data rows");
            auto comma = first.find(',');
            test_start = parse_timestamp(std::string_view(first).substr(0, comma));
        }

        struct ParsedEvent {
            std::string sensor_id;
            Minute confirmed_at;
            std::string direction;
            double deviation;
        };
        std::vector<ParsedEvent> events;
        std::ifstream ain(alerts_path);
        if (!ain) throw Error(ErrorKind::io, "cannot open alerts file '" + alerts_path + "'");
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(ain, line)) {
            ++lineno;
            if (line.empty()) continue;
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& ex) {
                throw Error(ErrorKind::format, "malformed alerts line " + std::to_string(lineno) +
                                                   ": " + ex.what());
            }
            if (!j.contains("type"))
                throw Error(ErrorKind::format,
                            "alerts line " + std::to_string(lineno) + " has no type field");
            if (j["type"] == "status") continue;
            if (j["type"] != "event")
                throw Error(ErrorKind::format, "alerts line " + std::to_string(lineno) +
                                                   " has unknown type '" +
                                                   j["type"].get<std::string>() + "'");
            ParsedEvent ev;
            ev.sensor_id = j.at("sensor_id").get<std::string>();
            ev.confirmed_at = parse_timestamp(j.at("confirmed_at").get<std::string>());
            ev.direction = j.at("direction").get<std::string>();
            ev.deviation = j.at("estimated_deviation").get<double>();
            events.push_back(std::move(ev));
        }

        bool pass = true;
        std::size_t detected_count = 0;
        std::cout << "scenario " << cfg.scenario_name.value_or("?") << " seed " << cfg.seed << '\n';

        std::vector<std::string> drift_targets;
        for (const auto& d : cfg.drifts)
            for (const auto& id : d.target_sensor_ids) drift_targets.push_back(id);

        if (cfg.expect_no_events) {
            std::cout << "expected: no events; observed " << events.size() << " event(s)\n";
            if (!events.empty()) pass = false;
        } else {
            for (std::size_t i = 0; i < cfg.drifts.size(); ++i) {
                const DriftSpec& d = cfg.drifts[i];
                std::string want_dir = d.magnitude > 0 ? "high" : "low";
                const ParsedEvent* hit = nullptr;
                for (const auto& ev : events) {
                    bool on_target = false;
                    for (const auto& id : d.target_sensor_ids)
                        if (ev.sensor_id == id) on_target = true;
                    if (on_target && ev.direction == want_dir) {
                        hit = &ev;
                        break;
                    }
                }
                std::cout << "drift " << i << " sensor "
                          << (d.target_sensor_ids.size() == 1 ? d.target_sensor_ids[0] : "<multi>")
                          << " kind " << drift_kind_name(d.kind) << ": ";
                if (!hit) {
                    std::cout << "missed detection\n";
                    pass = false;
                    continue;
                }
                ++detected_count;
                double max_dev = cfg.drift_max_deviation[i];
                bool within = hit->deviation <= max_dev;
                std::int64_t latency = hit->confirmed_at - (test_start + d.onset_minute);
                std::cout << "detected direction=" << hit->direction << " deviation="
                          << format_double(hit->deviation) << " max_deviation="
                          << format_double(max_dev) << " within_tolerance=" << (within ? "yes" : "no")
                          << " latency_minutes=" << latency << '\n';
                if (!within) pass = false;
            }
        }

        std::size_t false_positives = 0;
        for (const auto& ev : events) {
            bool expected = false;
            if (!cfg.expect_no_events)
                for (const auto& id : drift_targets)
                    if (ev.sensor_id == id) expected = true;
            if (!expected) ++false_positives;
        }
        std::size_t clean_sensors = cfg.grid.size() - (cfg.expect_no_events ? 0 : drift_targets.size());
        std::cout << "clean sensors: " << clean_sensors << ", false_positives=" << false_positives
                  << '\n';
        if (false_positives > 0) pass = false;

        if (cfg.expect_no_events)
            std::cout << "result: " << (pass ? "PASS" : "FAIL") << " (expected no events)\n";
        else
            std::cout << "result: " << (pass ? "PASS" : "FAIL") << " (" << detected_count << "/"
                      << cfg.drifts.size() << " drifts detected, " << false_positives
                      << " false positives)\n";
        return pass ? 0 : 1;
    } catch (const Error& e) {
        return report_error(e);
    }
}

}  // namespace driftwatch::cli
