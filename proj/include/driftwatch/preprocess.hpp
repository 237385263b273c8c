#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstddef>
#include <deque>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <utility>
#include <vector>

#include "driftwatch/error.hpp"
#include "driftwatch/stats.hpp"
#include "driftwatch/telemetry.hpp"
#include "driftwatch/textio.hpp"

namespace driftwatch {

struct PreprocessConfig {
    int sg_window = 31;
    int sg_polyorder = 3;
    double mahalanobis_alpha = 0.01;
    double covariance_ridge = 1e-8;

    void validate() const {
        if (sg_window < 1 || sg_window % 2 == 0)
            throw Error(ErrorKind::config, "sg_window must be an odd positive integer");
        if (sg_polyorder < 0 || sg_polyorder >= sg_window)
            throw Error(ErrorKind::config, "sg_polyorder must satisfy 0 <= order < window");
        if (!(mahalanobis_alpha > 0.0 && mahalanobis_alpha < 1.0))
            throw Error(ErrorKind::config, "mahalanobis_alpha must be in (0,1)");
        if (covariance_ridge < 0.0)
            throw Error(ErrorKind::config, "covariance_ridge must be >= 0");
    }
};

// Joint statistics of the calibrated grid, fitted once on training data and
// frozen for detection.
struct GridStatistics {
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;  // ridge-regularized sample covariance
    double chi2_threshold = 0.0;

    std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
};

// Slots outside the alarm band get masked; bounds are inclusive (a value
// exactly on the bound is kept).
inline ReadingFrame threshold_filter(const ReadingFrame& frame, const SensorGrid& grid) {
    check_frame_matches_grid(frame, grid);
    ReadingFrame out = frame;
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        if (!out.mask[i]) continue;
        const auto& k = grid.sensors[i].kind;
        if (out.values[i] < k.alarm_lo || out.values[i] > k.alarm_hi) out.mask[i] = 0;
    }
    return out;
}

inline GridStatistics fit_grid_statistics(const TimeSeries& training, const PreprocessConfig& cfg) {
    cfg.validate();
    const std::size_t d = training.grid.size();
    std::vector<const ReadingFrame*> complete;
    for (const auto& f : training.frames) {
        check_frame_matches_grid(f, training.grid);
        if (f.fully_unmasked()) complete.push_back(&f);
    }
    if (complete.size() < d + 1)
        throw Error(ErrorKind::fit, "need at least " + std::to_string(d + 1) +
                                        " fully unmasked frames to fit grid statistics, got " +
                                        std::to_string(complete.size()));
    GridStatistics stats;
    stats.mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d));
    for (const auto* f : complete)
        for (std::size_t i = 0; i < d; ++i) stats.mean(static_cast<Eigen::Index>(i)) += f->values[i];
    stats.mean /= static_cast<double>(complete.size());

    stats.covariance = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    Eigen::VectorXd delta(static_cast<Eigen::Index>(d));
    for (const auto* f : complete) {
        for (std::size_t i = 0; i < d; ++i)
            delta(static_cast<Eigen::Index>(i)) = f->values[i] - stats.mean(static_cast<Eigen::Index>(i));
        stats.covariance.noalias() += delta * delta.transpose();
    }
    stats.covariance /= static_cast<double>(complete.size() - 1);
    stats.covariance += cfg.covariance_ridge *
                        Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));

    Eigen::LLT<Eigen::MatrixXd> llt(stats.covariance);
    if (llt.info() != Eigen::Success) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(stats.covariance);
        throw Error(ErrorKind::numeric,
                    "covariance not positive definite after ridge; smallest eigenvalue " +
                        std::to_string(es.eigenvalues().minCoeff()));
    }
    stats.chi2_threshold = chi_square_quantile(1.0 - cfg.mahalanobis_alpha, static_cast<double>(d));
    return stats;
}

struct MahalanobisOutcome {
    ReadingFrame frame;
    std::optional<double> distance_sq;  // absent when the test was skipped
    bool skipped = false;               // partially masked frame: untested
};

namespace detail {

inline double mahalanobis_d2(const GridStatistics& stats, const Eigen::LLT<Eigen::MatrixXd>& llt,
                             const ReadingFrame& frame) {
    Eigen::VectorXd delta(stats.mean.size());
    for (Eigen::Index i = 0; i < delta.size(); ++i)
        delta(i) = frame.values[static_cast<std::size_t>(i)] - stats.mean(i);
    return delta.dot(llt.solve(delta));
}

}  // namespace detail

// Joint outlier gate: a fully unmasked frame whose d^2 exceeds the chi-square
// threshold is masked whole (the statistic is joint, not per slot).
// Partially masked frames pass through untested and are flagged.
inline MahalanobisOutcome mahalanobis_filter(const ReadingFrame& frame, const GridStatistics& stats) {
    if (frame.values.size() != stats.dim())
        throw Error(ErrorKind::input, "frame width does not match fitted statistics");
    MahalanobisOutcome out{frame, std::nullopt, false};
    if (!frame.fully_unmasked()) {
        out.skipped = !frame.fully_masked();
        return out;
    }
    Eigen::LLT<Eigen::MatrixXd> llt(stats.covariance);
    double d2 = detail::mahalanobis_d2(stats, llt, frame);
    out.distance_sq = d2;
    if (d2 > stats.chi2_threshold)
        for (auto& m : out.frame.mask) m = 0;
    return out;
}

namespace detail {

// Projection matrix of the least-squares polynomial fit of degree `order`
// over `count` points: row i gives the fitted value at point i as a linear
// combination of all window values.
inline Eigen::MatrixXd savgol_projection(int count, int order) {
    Eigen::MatrixXd a(count, order + 1);
    const double center = (count - 1) / 2.0;
    for (int r = 0; r < count; ++r) {
        double x = static_cast<double>(r) - center;
        double p = 1.0;
        for (int c = 0; c <= order; ++c) {
            a(r, c) = p;
            p *= x;
        }
    }
    Eigen::MatrixXd ata = a.transpose() * a;
    return a * ata.ldlt().solve(a.transpose());
}

}  // namespace detail

// Central-point convolution weights of the Savitzky-Golay filter.
inline std::vector<double> savgol_coefficients(int window, int polyorder) {
    if (window < 1 || window % 2 == 0 || polyorder < 0 || polyorder >= window)
        throw Error(ErrorKind::config, "savgol needs odd window and 0 <= polyorder < window");
    Eigen::MatrixXd proj = detail::savgol_projection(window, polyorder);
    int h = window / 2;
    std::vector<double> w(static_cast<std::size_t>(window));
    for (int i = 0; i < window; ++i) w[static_cast<std::size_t>(i)] = proj(h, i);
    return w;
}

// Smooths one gap-free sequence. Interior points use the central weights;
// points within half a window of either end are evaluated from the
// least-squares fit over the first/last full window, which keeps every
// polynomial of degree <= polyorder exactly reproduced at all positions.
// Sequences shorter than the window get a single fit of reduced degree.
inline std::vector<double> savgol_smooth(std::span<const double> values, int window, int polyorder) {
    if (window < 1 || window % 2 == 0 || polyorder < 0 || polyorder >= window)
        throw Error(ErrorKind::config, "savgol needs odd window and 0 <= polyorder < window");
    const std::size_t n = values.size();
    std::vector<double> out(n, 0.0);
    if (n == 0) return out;
    if (n < static_cast<std::size_t>(window)) {
        int order = std::min<int>(polyorder, static_cast<int>(n) - 1);
        Eigen::MatrixXd proj = detail::savgol_projection(static_cast<int>(n), order);
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j)
                s += proj(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * values[j];
            out[i] = s;
        }
        return out;
    }
    Eigen::MatrixXd proj = detail::savgol_projection(window, polyorder);
    const std::size_t w = static_cast<std::size_t>(window);
    const std::size_t h = w / 2;
    auto apply_row = [&](std::size_t row, std::size_t start) {
        double s = 0.0;
        for (std::size_t j = 0; j < w; ++j)
            s += proj(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(j)) * values[start + j];
        return s;
    };
    for (std::size_t i = 0; i < h; ++i) out[i] = apply_row(i, 0);
    for (std::size_t i = h; i + h < n; ++i) out[i] = apply_row(h, i - h);
    for (std::size_t i = 0; i < h; ++i) out[n - 1 - i] = apply_row(w - 1 - i, n - w);
    return out;
}

inline std::vector<double> savgol_smooth(std::span<const double> values, const PreprocessConfig& cfg) {
    return savgol_smooth(values, cfg.sg_window, cfg.sg_polyorder);
}

// Cross-sensor mean of the unmasked slots; absent when everything is masked.
inline std::optional<double> estimate_set_point(const ReadingFrame& frame) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < frame.values.size(); ++i) {
        if (!frame.mask[i]) continue;
        sum += frame.values[i];
        ++count;
    }
    if (count == 0) return std::nullopt;
    return sum / static_cast<double>(count);
}

// One fully preprocessed frame: thresholded, outlier-gated, smoothed, with
// its set-point estimate.
struct CleanFrame {
    ReadingFrame frame;
    std::optional<double> setpoint;
    std::optional<double> mahalanobis_d2;
    bool mahalanobis_skipped = false;
};

// Streaming three-stage pipeline. Smoothing is a centered filter, so a frame
// is released only once every unmasked slot has enough lookahead (or its run
// closed); batch and tail-follow processing therefore produce identical
// values. Used both by run_pipeline and by the detect command.
class PipelineStream {
public:
    PipelineStream(const SensorGrid& grid, const GridStatistics& stats, const PreprocessConfig& cfg)
        : grid_(grid), stats_(stats), cfg_(cfg), llt_(stats.covariance), runs_(grid.size()) {
        cfg_.validate();
        grid_.validate();
        if (stats_.dim() != grid_.size())
            throw Error(ErrorKind::input, "grid statistics dimension does not match grid");
        proj_ = detail::savgol_projection(cfg_.sg_window, cfg_.sg_polyorder);
    }

    std::vector<CleanFrame> feed(const ReadingFrame& raw) {
        check_frame_matches_grid(raw, grid_);
        ReadingFrame frame = threshold_filter(raw, grid_);
        std::optional<double> d2;
        bool skipped = false;
        if (frame.fully_unmasked()) {
            double dist = detail::mahalanobis_d2(stats_, llt_, frame);
            d2 = dist;
            if (dist > stats_.chi2_threshold)
                for (auto& m : frame.mask) m = 0;
        } else {
            skipped = !frame.fully_masked();
        }

        Pending p;
        p.frame = frame;
        p.d2 = d2;
        p.skipped = skipped;
        for (auto m : frame.mask)
            if (m) ++p.remaining;
        pending_.push_back(std::move(p));
        const std::size_t idx = next_index_++;

        for (std::size_t s = 0; s < grid_.size(); ++s) {
            if (frame.mask[s]) {
                runs_[s].values.push_back(frame.values[s]);
                runs_[s].indices.push_back(idx);
                drain_run(s);
            } else {
                close_run(s);
            }
        }
        return pop_ready();
    }

    std::vector<CleanFrame> finish() {
        for (std::size_t s = 0; s < grid_.size(); ++s) close_run(s);
        auto out = pop_ready();
        if (!pending_.empty())
            throw Error(ErrorKind::numeric, "pipeline left incomplete frames at finish");
        return out;
    }

    // Checkpoint payload (smoothing lookahead and queued frames), so a
    // resumed detect run reproduces the uninterrupted byte stream.
    void save(std::ostream& out) const {
        out << "pipeline-state v1\n";
        out << "indices " << next_index_ << ' ' << base_index_ << '\n';
        out << "runs " << runs_.size() << '\n';
        for (std::size_t i = 0; i < runs_.size(); ++i) {
            const Run& r = runs_[i];
            out << "run " << i << ' ' << r.values.size() << ' ' << r.emitted << '\n';
            for (std::size_t k = 0; k < r.values.size(); ++k)
                out << format_double(r.values[k]) << ' ' << r.indices[k] << '\n';
        }
        out << "pending " << pending_.size() << '\n';
        for (const auto& p : pending_) {
            out << "frame " << p.frame.timestamp << ' ' << (p.skipped ? 1 : 0) << ' ' << p.remaining
                << ' ' << (p.d2 ? format_double(*p.d2) : "none") << '\n';
            out << "values";
            for (double v : p.frame.values) out << ' ' << format_double(v);
            out << '\n';
            out << "mask";
            for (auto m : p.frame.mask) out << ' ' << (m ? 1 : 0);
            out << '\n';
        }
        out << "end\n";
    }

    void restore(std::istream& in) {
        TokenReader r(in, "pipeline state");
        r.expect("pipeline-state v1");
        auto idx = r.tokens("indices");
        if (idx.size() != 3 || idx[0] != "indices")
            throw Error(ErrorKind::corrupt, "pipeline state: expected indices");
        next_index_ = static_cast<std::size_t>(parse_int_strict(idx[1], "next index"));
        base_index_ = static_cast<std::size_t>(parse_int_strict(idx[2], "base index"));
        auto nruns = static_cast<std::size_t>(r.labeled_int("runs"));
        if (nruns != runs_.size())
            throw Error(ErrorKind::corrupt, "pipeline state: run count mismatch");
        for (std::size_t i = 0; i < nruns; ++i) {
            auto head = r.tokens("run header");
            if (head.size() != 4 || head[0] != "run" ||
                parse_int_strict(head[1], "run index") != static_cast<std::int64_t>(i))
                throw Error(ErrorKind::corrupt, "pipeline state: bad run header");
            Run run;
            auto len = static_cast<std::size_t>(parse_int_strict(head[2], "run length"));
            run.emitted = static_cast<std::size_t>(parse_int_strict(head[3], "run emitted"));
            for (std::size_t k = 0; k < len; ++k) {
                auto toks = r.tokens("run value");
                if (toks.size() != 2)
                    throw Error(ErrorKind::corrupt, "pipeline state: bad run value line");
                run.values.push_back(parse_double_strict(toks[0], "run value"));
                run.indices.push_back(static_cast<std::size_t>(parse_int_strict(toks[1], "run frame index")));
            }
            runs_[i] = std::move(run);
        }
        auto npending = static_cast<std::size_t>(r.labeled_int("pending"));
        pending_.clear();
        for (std::size_t k = 0; k < npending; ++k) {
            auto head = r.tokens("pending frame header");
            if (head.size() != 5 || head[0] != "frame")
                throw Error(ErrorKind::corrupt, "pipeline state: bad pending frame header");
            Pending p;
            p.frame.timestamp = parse_int_strict(head[1], "pending timestamp");
            p.skipped = parse_int_strict(head[2], "pending skipped") != 0;
            p.remaining = static_cast<std::size_t>(parse_int_strict(head[3], "pending remaining"));
            if (head[4] != "none") p.d2 = parse_double_strict(head[4], "pending d2");
            auto values = r.labeled_doubles("values", grid_.size());
            auto mask = r.tokens("mask");
            if (mask.size() != grid_.size() + 1 || mask[0] != "mask")
                throw Error(ErrorKind::corrupt, "pipeline state: bad mask line");
            p.frame.values = std::move(values);
            p.frame.mask.resize(grid_.size());
            for (std::size_t i = 0; i < grid_.size(); ++i)
                p.frame.mask[i] = static_cast<std::uint8_t>(parse_int_strict(mask[i + 1], "mask bit"));
            pending_.push_back(std::move(p));
        }
        r.expect("end");
    }

private:
    struct Run {
        std::vector<double> values;
        std::vector<std::size_t> indices;
        std::size_t emitted = 0;
    };
    struct Pending {
        ReadingFrame frame;
        std::optional<double> d2;
        bool skipped = false;
        std::size_t remaining = 0;
    };

    double apply_row(const Run& run, std::size_t row, std::size_t start) const {
        double s = 0.0;
        const std::size_t w = static_cast<std::size_t>(cfg_.sg_window);
        for (std::size_t j = 0; j < w; ++j)
            s += proj_(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(j)) *
                 run.values[start + j];
        return s;
    }

    void store(std::size_t sensor, std::size_t frame_index, double value) {
        Pending& p = pending_[frame_index - base_index_];
        p.frame.values[sensor] = value;
        --p.remaining;
    }

    // Emits every smoothed position currently determined by lookahead.
    void drain_run(std::size_t sensor) {
        Run& run = runs_[sensor];
        const std::size_t w = static_cast<std::size_t>(cfg_.sg_window);
        const std::size_t h = w / 2;
        const std::size_t len = run.values.size();
        if (len < w) return;
        if (len == w && run.emitted == 0) {
            for (std::size_t i = 0; i <= h; ++i)
                store(sensor, run.indices[i], apply_row(run, i, 0));
            run.emitted = h + 1;
            return;
        }
        // One new interior point becomes determined per appended value.
        while (run.emitted + h < len) {
            std::size_t i = run.emitted;
            store(sensor, run.indices[i], apply_row(run, h, i - h));
            ++run.emitted;
        }
    }

    void close_run(std::size_t sensor) {
        Run& run = runs_[sensor];
        const std::size_t len = run.values.size();
        if (len == 0) return;
        const std::size_t w = static_cast<std::size_t>(cfg_.sg_window);
        if (len < w) {
            auto smoothed = savgol_smooth(run.values, cfg_.sg_window, cfg_.sg_polyorder);
            for (std::size_t i = 0; i < len; ++i) store(sensor, run.indices[i], smoothed[i]);
        } else {
            for (std::size_t i = run.emitted; i < len; ++i)
                store(sensor, run.indices[i], apply_row(run, w - (len - i), len - w));
        }
        run = Run{};
    }

    std::vector<CleanFrame> pop_ready() {
        std::vector<CleanFrame> out;
        while (!pending_.empty() && pending_.front().remaining == 0) {
            Pending& p = pending_.front();
            CleanFrame cf;
            cf.frame = std::move(p.frame);
            cf.setpoint = estimate_set_point(cf.frame);
            cf.mahalanobis_d2 = p.d2;
            cf.mahalanobis_skipped = p.skipped;
            out.push_back(std::move(cf));
            pending_.pop_front();
            ++base_index_;
        }
        return out;
    }

    SensorGrid grid_;
    GridStatistics stats_;
    PreprocessConfig cfg_;
    Eigen::LLT<Eigen::MatrixXd> llt_;
    Eigen::MatrixXd proj_;
    std::vector<Run> runs_;
    std::deque<Pending> pending_;
    std::size_t next_index_ = 0;
    std::size_t base_index_ = 0;
};

struct PipelineResult {
    TimeSeries clean;
    std::vector<std::optional<double>> setpoints;
    std::vector<std::optional<double>> mahalanobis_d2;
    std::vector<std::uint8_t> mahalanobis_skipped;
};

inline PipelineResult run_pipeline(const TimeSeries& series, const GridStatistics& stats,
                                   const PreprocessConfig& cfg) {
    PipelineStream stream(series.grid, stats, cfg);
    PipelineResult result;
    result.clean.grid = series.grid;
    auto absorb = [&](std::vector<CleanFrame>&& ready) {
        for (auto& cf : ready) {
            result.clean.frames.push_back(std::move(cf.frame));
            result.setpoints.push_back(cf.setpoint);
            result.mahalanobis_d2.push_back(cf.mahalanobis_d2);
            result.mahalanobis_skipped.push_back(cf.mahalanobis_skipped ? 1 : 0);
        }
    };
    for (const auto& f : series.frames) absorb(stream.feed(f));
    absorb(stream.finish());
    return result;
}

}  // namespace driftwatch
