#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "driftwatch/error.hpp"
#include "driftwatch/stats.hpp"
#include "driftwatch/textio.hpp"
#include "driftwatch/time.hpp"

namespace driftwatch {

struct SensorResidual {
    double mu = 0.0;
    double sigma = 1e-12;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    double ks_statistic = 0.0;
    bool ks_passed = false;
};

struct ResidualModel {
    std::vector<SensorResidual> sensors;
    double alpha = 0.01;
};

// Fits Normal(mu, sigma) per sensor and derives confidence bounds at
// significance alpha. When the Kolmogorov-Smirnov test rejects normality at
// the 0.05 level the parametric bounds are replaced by empirical
// alpha/2 .. 1-alpha/2 quantiles of the observed residuals.
inline ResidualModel fit_residual_model(const std::vector<std::vector<double>>& training_errors,
                                        double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0))
        throw Error(ErrorKind::config, "residual alpha must be in (0,1)");
    ResidualModel model;
    model.alpha = alpha;
    const double z = standard_normal_quantile(1.0 - alpha / 2.0);
    for (std::size_t s = 0; s < training_errors.size(); ++s) {
        const auto& errs = training_errors[s];
        if (errs.size() < 100)
            throw Error(ErrorKind::fit, "sensor " + std::to_string(s) + " has only " +
                                            std::to_string(errs.size()) +
                                            " residuals; need at least 100");
        SensorResidual r;
        r.mu = mean_of(errs);
        r.sigma = std::max(std::sqrt(sample_variance(errs)), 1e-12);
        auto ks = ks_test_normal(errs, r.mu, r.sigma);
        r.ks_statistic = ks.statistic;
        r.ks_passed = ks.passed;
        if (ks.passed) {
            r.ci_lo = r.mu - z * r.sigma;
            r.ci_hi = r.mu + z * r.sigma;
        } else {
            r.ci_lo = empirical_quantile(errs, alpha / 2.0);
            r.ci_hi = empirical_quantile(errs, 1.0 - alpha / 2.0);
        }
        if (!(r.ci_lo < r.ci_hi)) {
            double eps = 1e-12 * std::max(1.0, std::fabs(r.mu));
            r.ci_lo -= eps;
            r.ci_hi += eps;
        }
        model.sensors.push_back(r);
    }
    return model;
}

enum class Classification { within, reject_high, reject_low };

// Bounds are inclusive: an error exactly on a bound is within.
inline Classification classify_residual(double error, const SensorResidual& r) {
    if (!std::isfinite(error))
        throw Error(ErrorKind::input, "classify_residual: non-finite error");
    if (error > r.ci_hi) return Classification::reject_high;
    if (error < r.ci_lo) return Classification::reject_low;
    return Classification::within;
}

struct DetectorConfig {
    int window_minutes = 1440;
    double density_threshold = 0.8;
    int persistence_minutes = 20160;  // two weeks

    void validate() const {
        if (window_minutes < 1) throw Error(ErrorKind::config, "window_minutes must be >= 1");
        if (!(density_threshold > 0.0 && density_threshold <= 1.0))
            throw Error(ErrorKind::config, "density_threshold must be in (0,1]");
        if (persistence_minutes < window_minutes)
            throw Error(ErrorKind::config, "persistence_minutes must be >= window_minutes");
    }
};

enum class Direction { high, low };

struct UncalibrationEvent {
    std::string sensor_id;
    Minute onset = 0;         // first minute of the persistence run
    Minute confirmed_at = 0;  // onset + persistence_minutes (or later after dips)
    Direction direction = Direction::high;
    double estimated_deviation = 0.0;  // mean |error| over the trailing window
    std::optional<int> time_to_tolerance_minutes;
    double density_at_confirmation = 0.0;
};

// Mean absolute error of the trailing window.
inline double estimate_deviation(std::span<const double> errors) {
    if (errors.empty()) throw Error(ErrorKind::input, "estimate_deviation: empty window");
    double s = 0.0;
    for (double e : errors) s += std::fabs(e);
    return s / static_cast<double>(errors.size());
}

namespace detail {

// Least-squares extrapolation of |error| to the tolerance level. Returns the
// remaining minutes from the last observation, or nullopt when the trend is
// flat/decreasing or the tolerance is already reached.
inline std::optional<int> time_to_tolerance_core(std::span<const double> minutes,
                                                 std::span<const double> abs_errors,
                                                 double tolerance) {
    const std::size_t n = abs_errors.size();
    if (n < 2) throw Error(ErrorKind::input, "time-to-tolerance needs at least 2 samples");
    double mt = mean_of(minutes);
    double my = mean_of(abs_errors);
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (minutes[i] - mt) * (abs_errors[i] - my);
        sxx += (minutes[i] - mt) * (minutes[i] - mt);
    }
    if (sxx <= 0.0) return std::nullopt;
    double slope = sxy / sxx;
    if (slope <= 0.0) return std::nullopt;
    if (my >= tolerance) return std::nullopt;
    double level_now = my + slope * (minutes[n - 1] - mt);
    double remaining = (tolerance - level_now) / slope;
    if (remaining <= 0.0) return std::nullopt;
    return static_cast<int>(std::ceil(remaining));
}

}  // namespace detail

inline std::optional<int> estimate_time_to_tolerance(std::span<const double> errors,
                                                     double tolerance, int cadence_minutes) {
    std::vector<double> minutes(errors.size());
    std::vector<double> abs_errors(errors.size());
    for (std::size_t i = 0; i < errors.size(); ++i) {
        minutes[i] = static_cast<double>(i) * static_cast<double>(cadence_minutes);
        abs_errors[i] = std::fabs(errors[i]);
    }
    return detail::time_to_tolerance_core(minutes, abs_errors, tolerance);
}

// Streaming per-grid detector state. One step per minute; masked sensors
// contribute no observation, so their rings (and densities) hold, while
// persistence counters keep following wall-clock time. Densities are
// undefined until a sensor's ring first fills.
class DetectorState {
public:
    DetectorState(std::vector<std::string> sensor_ids, std::vector<double> tolerances,
                  DetectorConfig cfg, std::vector<double> per_sensor_thresholds = {})
        : ids_(std::move(sensor_ids)), tolerances_(std::move(tolerances)), cfg_(cfg) {
        cfg_.validate();
        if (tolerances_.size() != ids_.size())
            throw Error(ErrorKind::config, "detector: tolerance count != sensor count");
        if (per_sensor_thresholds.empty())
            per_sensor_thresholds.assign(ids_.size(), cfg_.density_threshold);
        if (per_sensor_thresholds.size() != ids_.size())
            throw Error(ErrorKind::config, "detector: threshold count != sensor count");
        thresholds_ = std::move(per_sensor_thresholds);
        sensors_.resize(ids_.size());
    }

    std::size_t size() const { return ids_.size(); }
    const DetectorConfig& config() const { return cfg_; }
    const std::vector<std::string>& sensor_ids() const { return ids_; }

    // One minute of the stream. classifications[i]/errors[i] are absent for
    // masked slots. Returns the events confirmed at this minute.
    std::vector<UncalibrationEvent> step(Minute minute,
                                         std::span<const std::optional<Classification>> classifications,
                                         std::span<const std::optional<double>> errors) {
        if (classifications.size() != sensors_.size() || errors.size() != sensors_.size())
            throw Error(ErrorKind::input, "detector step width does not match grid");
        if (have_last_ && minute <= last_minute_)
            throw Error(ErrorKind::ordering,
                        "detector step timestamps must be strictly increasing");
        last_minute_ = minute;
        have_last_ = true;

        std::vector<UncalibrationEvent> events;
        const std::size_t window = static_cast<std::size_t>(cfg_.window_minutes);
        for (std::size_t i = 0; i < sensors_.size(); ++i) {
            Sensor& s = sensors_[i];
            if (classifications[i].has_value()) {
                if (!errors[i].has_value())
                    throw Error(ErrorKind::input, "classification present without error value");
                Obs obs;
                obs.minute = minute;
                obs.upper = classifications[i] == Classification::reject_high;
                obs.lower = classifications[i] == Classification::reject_low;
                obs.error = *errors[i];
                if (s.ring.size() == window) {
                    const Obs& old = s.ring.front();
                    s.upper_count -= old.upper ? 1 : 0;
                    s.lower_count -= old.lower ? 1 : 0;
                    s.ring.pop_front();
                }
                s.upper_count += obs.upper ? 1 : 0;
                s.lower_count += obs.lower ? 1 : 0;
                s.ring.push_back(obs);
            }
            if (s.ring.size() < window) continue;  // warm-up: densities undefined

            const double du = static_cast<double>(s.upper_count) / static_cast<double>(window);
            const double dl = static_cast<double>(s.lower_count) / static_cast<double>(window);
            s.peak_upper = std::max(s.peak_upper, du);
            s.peak_lower = std::max(s.peak_lower, dl);
            if (std::max(du, dl) >= thresholds_[i]) {
                if (!s.run_active) {
                    s.run_active = true;
                    s.onset = minute;
                }
                if (!s.event_open && minute - s.onset >= cfg_.persistence_minutes) {
                    s.event_open = true;
                    events.push_back(make_event(i, minute, du, dl));
                }
            } else {
                s.run_active = false;
                s.event_open = false;
            }
        }
        return events;
    }

    // Current densities; nullopt during warm-up.
    std::optional<double> upper_density(std::size_t i) const { return density(i, true); }
    std::optional<double> lower_density(std::size_t i) const { return density(i, false); }

    // Peak densities since the last call (for periodic status records).
    std::pair<double, double> take_peak_densities(std::size_t i) {
        auto out = std::make_pair(sensors_[i].peak_upper, sensors_[i].peak_lower);
        sensors_[i].peak_upper = 0.0;
        sensors_[i].peak_lower = 0.0;
        return out;
    }

    std::optional<Minute> last_minute() const {
        if (!have_last_) return std::nullopt;
        return last_minute_;
    }

    // Checkpoint payload so a killed detect run resumes without losing
    // persistence progress. Exact decimals; a resumed run is byte-identical.
    void save(std::ostream& out) const {
        out << "detector-state v1\n";
        out << "sensors " << sensors_.size() << '\n';
        out << "last_minute " << (have_last_ ? std::to_string(last_minute_) : "none") << '\n';
        for (std::size_t i = 0; i < sensors_.size(); ++i) {
            const Sensor& s = sensors_[i];
            out << "sensor " << i << ' ' << s.ring.size() << ' ' << (s.run_active ? 1 : 0) << ' '
                << s.onset << ' ' << (s.event_open ? 1 : 0) << ' ' << format_double(s.peak_upper)
                << ' ' << format_double(s.peak_lower) << '\n';
            for (const auto& o : s.ring)
                out << o.minute << ' ' << (o.upper ? 1 : 0) << ' ' << (o.lower ? 1 : 0) << ' '
                    << format_double(o.error) << '\n';
        }
        out << "end\n";
    }

    static DetectorState load(std::istream& in, std::vector<std::string> sensor_ids,
                              std::vector<double> tolerances, DetectorConfig cfg,
                              std::vector<double> per_sensor_thresholds = {}) {
        DetectorState state(std::move(sensor_ids), std::move(tolerances), cfg,
                            std::move(per_sensor_thresholds));
        TokenReader r(in, "detector state");
        r.expect("detector-state v1");
        auto n = static_cast<std::size_t>(r.labeled_int("sensors"));
        if (n != state.sensors_.size())
            throw Error(ErrorKind::corrupt, "detector state sensor count mismatch");
        auto last = r.tokens("last_minute");
        if (last.size() != 2 || last[0] != "last_minute")
            throw Error(ErrorKind::corrupt, "detector state: expected last_minute");
        if (last[1] != "none") {
            state.last_minute_ = parse_int_strict(last[1], "last_minute");
            state.have_last_ = true;
        }
        for (std::size_t i = 0; i < n; ++i) {
            auto head = r.tokens("sensor header");
            if (head.size() != 8 || head[0] != "sensor" ||
                parse_int_strict(head[1], "sensor index") != static_cast<std::int64_t>(i))
                throw Error(ErrorKind::corrupt, "detector state: bad sensor header");
            Sensor& s = state.sensors_[i];
            auto len = static_cast<std::size_t>(parse_int_strict(head[2], "ring length"));
            if (len > static_cast<std::size_t>(cfg.window_minutes))
                throw Error(ErrorKind::corrupt, "detector state: ring longer than window");
            s.run_active = parse_int_strict(head[3], "run_active") != 0;
            s.onset = parse_int_strict(head[4], "onset");
            s.event_open = parse_int_strict(head[5], "event_open") != 0;
            s.peak_upper = parse_double_strict(head[6], "peak_upper");
            s.peak_lower = parse_double_strict(head[7], "peak_lower");
            for (std::size_t k = 0; k < len; ++k) {
                auto toks = r.tokens("observation");
                if (toks.size() != 4)
                    throw Error(ErrorKind::corrupt, "detector state: bad observation line");
                Obs o;
                o.minute = parse_int_strict(toks[0], "obs minute");
                o.upper = parse_int_strict(toks[1], "obs upper") != 0;
                o.lower = parse_int_strict(toks[2], "obs lower") != 0;
                o.error = parse_double_strict(toks[3], "obs error");
                s.upper_count += o.upper ? 1 : 0;
                s.lower_count += o.lower ? 1 : 0;
                s.ring.push_back(o);
            }
        }
        r.expect("end");
        return state;
    }

private:
    struct Obs {
        Minute minute = 0;
        bool upper = false;
        bool lower = false;
        double error = 0.0;
    };
    struct Sensor {
        std::deque<Obs> ring;
        int upper_count = 0;
        int lower_count = 0;
        bool run_active = false;
        Minute onset = 0;
        bool event_open = false;
        double peak_upper = 0.0;
        double peak_lower = 0.0;
    };

    std::optional<double> density(std::size_t i, bool upper) const {
        const Sensor& s = sensors_[i];
        if (s.ring.size() < static_cast<std::size_t>(cfg_.window_minutes)) return std::nullopt;
        int c = upper ? s.upper_count : s.lower_count;
        return static_cast<double>(c) / static_cast<double>(cfg_.window_minutes);
    }

    UncalibrationEvent make_event(std::size_t i, Minute minute, double du, double dl) const {
        const Sensor& s = sensors_[i];
        UncalibrationEvent ev;
        ev.sensor_id = ids_[i];
        ev.onset = s.onset;
        ev.confirmed_at = minute;
        // Direction comes from whichever density breached; ties go to the
        // larger one (upper on an exact tie).
        bool upper_breach = du >= thresholds_[i];
        bool lower_breach = dl >= thresholds_[i];
        if (upper_breach && lower_breach)
            ev.direction = du >= dl ? Direction::high : Direction::low;
        else
            ev.direction = upper_breach ? Direction::high : Direction::low;
        ev.density_at_confirmation = std::max(du, dl);
        std::vector<double> minutes, abs_errors, errs;
        minutes.reserve(s.ring.size());
        abs_errors.reserve(s.ring.size());
        errs.reserve(s.ring.size());
        for (const auto& o : s.ring) {
            minutes.push_back(static_cast<double>(o.minute));
            abs_errors.push_back(std::fabs(o.error));
            errs.push_back(o.error);
        }
        ev.estimated_deviation = estimate_deviation(errs);
        ev.time_to_tolerance_minutes =
            detail::time_to_tolerance_core(minutes, abs_errors, tolerances_[i]);
        return ev;
    }

    std::vector<std::string> ids_;
    std::vector<double> tolerances_;
    DetectorConfig cfg_;
    std::vector<double> thresholds_;
    std::vector<Sensor> sensors_;
    Minute last_minute_ = 0;
    bool have_last_ = false;
};

}  // namespace driftwatch
