#include <gtest/gtest.h>

#include <cmath>
#include <deque>
#include <optional>
#include <sstream>
#include <vector>

#include "driftwatch/detector.hpp"
#include "driftwatch/rng.hpp"

using namespace driftwatch;

namespace {

std::vector<std::vector<double>> one_sensor(std::vector<double> errs) {
    return {std::move(errs)};
}

DetectorConfig small_cfg(int window, double threshold, int persistence) {
    DetectorConfig cfg;
    cfg.window_minutes = window;
    cfg.density_threshold = threshold;
    cfg.persistence_minutes = persistence;
    return cfg;
}

DetectorState make_state(std::size_t sensors, DetectorConfig cfg) {
    std::vector<std::string> ids;
    std::vector<double> tol;
    for (std::size_t i = 0; i < sensors; ++i) {
        ids.push_back("s" + std::to_string(i));
        tol.push_back(0.5);
    }
    return DetectorState(std::move(ids), std::move(tol), cfg);
}

using StepCls = std::vector<std::optional<Classification>>;
using StepErr = std::vector<std::optional<double>>;

std::vector<UncalibrationEvent> step1(DetectorState& st, Minute t,
                                      std::optional<Classification> c,
                                      std::optional<double> e) {
    StepCls cls{c};
    StepErr errs{e};
    return st.step(t, cls, errs);
}

// Independent scalar re-simulation of the single-sensor contract: deque
// recount for densities, wall-clock persistence counter, exactly-once events.
struct ScalarOracle {
    int window, persistence;
    double threshold;
    std::deque<std::pair<bool, bool>> ring;
    bool run_active = false, event_open = false;
    Minute onset = 0;
    std::vector<std::pair<Minute, Minute>> events;  // (onset, confirmed)

    void step(Minute t, std::optional<Classification> c) {
        if (c) {
            ring.emplace_back(*c == Classification::reject_high, *c == Classification::reject_low);
            if (ring.size() > static_cast<std::size_t>(window)) ring.pop_front();
        }
        if (ring.size() < static_cast<std::size_t>(window)) return;
        int up = 0, lo = 0;
        for (auto [u, l] : ring) {
            up += u;
            lo += l;
        }
        double du = double(up) / window, dl = double(lo) / window;
        if (std::max(du, dl) >= threshold) {
            if (!run_active) {
                run_active = true;
                onset = t;
            }
            if (!event_open && t - onset >= persistence) {
                event_open = true;
                events.emplace_back(onset, t);
            }
        } else {
            run_active = false;
            event_open = false;
        }
    }
};

}  // namespace

// --- residual model -----------------------------------------------------------

TEST(ResidualModelTest, ConstantResidualsGiveDegenerateInterval) {
    std::vector<double> errs(200, 0.3);
    auto m = fit_residual_model(one_sensor(errs), 0.01);
    const auto& r = m.sensors[0];
    EXPECT_NEAR(r.mu, 0.3, 1e-12);
    EXPECT_DOUBLE_EQ(r.sigma, 1e-12);
    EXPECT_LT(r.ci_lo, r.ci_hi);
    EXPECT_NEAR(r.ci_lo, 0.3, 1e-6);
    EXPECT_NEAR(r.ci_hi, 0.3, 1e-6);
}

TEST(ResidualModelTest, NormalSamplesGiveParametricInterval) {
    Rng rng(1001);
    std::vector<double> errs(100000);
    for (auto& e : errs) e = rng.gaussian();
    auto m = fit_residual_model(one_sensor(errs), 0.05);
    const auto& r = m.sensors[0];
    EXPECT_TRUE(r.ks_passed);
    EXPECT_NEAR(r.ci_lo, -1.959964, 0.02);
    EXPECT_NEAR(r.ci_hi, 1.959964, 0.02);
}

TEST(ResidualModelTest, ExponentialSamplesFallBackToEmpiricalQuantiles) {
    Rng rng(1002);
    std::vector<double> errs(100000);
    for (auto& e : errs) e = -std::log(1.0 - rng.uniform());
    auto m = fit_residual_model(one_sensor(errs), 0.01);
    const auto& r = m.sensors[0];
    EXPECT_FALSE(r.ks_passed);
    // Empirical quantiles of Exp(1): 0.5% ~ 0.0050, 99.5% ~ 5.30.
    EXPECT_NEAR(r.ci_lo, -std::log(1.0 - 0.005), 0.002);
    EXPECT_NEAR(r.ci_hi, -std::log(1.0 - 0.995), 0.15);
}

TEST(ResidualModelTest, TooFewResidualsIsFitError) {
    std::vector<double> errs(99, 0.0);
    try {
        fit_residual_model(one_sensor(errs), 0.01);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::fit);
    }
}

TEST(ResidualModelTest, CalibratedRejectionRateNearAlpha) {
    Rng rng(1003);
    std::vector<double> errs(100000);
    for (auto& e : errs) e = rng.gaussian(0.02, 0.4);
    const double alpha = 0.01;
    auto m = fit_residual_model(one_sensor(errs), alpha);
    Rng probe_rng(1004);
    std::size_t rejections = 0;
    const std::size_t n = 100000;
    for (std::size_t i = 0; i < n; ++i) {
        double e = probe_rng.gaussian(m.sensors[0].mu, m.sensors[0].sigma);
        if (classify_residual(e, m.sensors[0]) != Classification::within) ++rejections;
    }
    double rate = static_cast<double>(rejections) / static_cast<double>(n);
    EXPECT_GT(rate, alpha * 0.7);
    EXPECT_LT(rate, alpha * 1.3);
}

// --- classification -------------------------------------------------------------

TEST(ClassifyTest, Within) {
    SensorResidual r{0.0, 1.0, -1.0, 1.0, 0.0, true};
    EXPECT_EQ(classify_residual(0.0, r), Classification::within);
}

TEST(ClassifyTest, RejectHigh) {
    SensorResidual r{0.0, 1.0, -1.0, 1.0, 0.0, true};
    EXPECT_EQ(classify_residual(1.5, r), Classification::reject_high);
    EXPECT_EQ(classify_residual(-1.5, r), Classification::reject_low);
}

TEST(ClassifyTest, BoundsInclusive) {
    SensorResidual r{0.0, 1.0, -1.0, 1.0, 0.0, true};
    EXPECT_EQ(classify_residual(1.0, r), Classification::within);
    EXPECT_EQ(classify_residual(-1.0, r), Classification::within);
}

TEST(ClassifyTest, NonFiniteRejected) {
    SensorResidual r{0.0, 1.0, -1.0, 1.0, 0.0, true};
    EXPECT_THROW(classify_residual(std::nan(""), r), Error);
}

// --- deviation and time-to-tolerance ---------------------------------------------

TEST(DeviationTest, ConstantQuarterDegree) {
    std::vector<double> errs(100, 0.25);
    EXPECT_DOUBLE_EQ(estimate_deviation(errs), 0.25);
}

TEST(DeviationTest, AlternatingSigns) {
    std::vector<double> errs;
    for (int i = 0; i < 50; ++i) errs.push_back(i % 2 ? 0.5 : -0.5);
    EXPECT_DOUBLE_EQ(estimate_deviation(errs), 0.5);
}

TEST(DeviationTest, MatchesDirectSumOracle) {
    Rng rng(77);
    std::vector<double> errs;
    for (int i = 0; i < 300; ++i) errs.push_back(0.001 * i + 0.05 * rng.gaussian());
    double sum = 0.0;
    for (double e : errs) sum += std::fabs(e);
    EXPECT_NEAR(estimate_deviation(errs), sum / 300.0, 1e-12);
}

TEST(TimeToToleranceTest, LinearRampExtrapolatesFromCurrentLevel) {
    std::vector<double> errs;
    for (int i = 0; i <= 200; ++i) errs.push_back(0.1 + 0.001 * i);
    auto r = estimate_time_to_tolerance(errs, 0.5, 1);
    ASSERT_TRUE(r.has_value());
    EXPECT_GE(*r, 199);
    EXPECT_LE(*r, 201);
}

TEST(TimeToToleranceTest, FlatIsAbsent) {
    std::vector<double> errs(100, 0.1);
    EXPECT_FALSE(estimate_time_to_tolerance(errs, 0.5, 1).has_value());
}

TEST(TimeToToleranceTest, AlreadyExceededIsAbsent) {
    std::vector<double> errs;
    for (int i = 0; i < 100; ++i) errs.push_back(0.6 + 0.0001 * i);
    EXPECT_FALSE(estimate_time_to_tolerance(errs, 0.5, 1).has_value());
}

// --- detector state ----------------------------------------------------------------

TEST(DetectorStateTest, AllWithinNoEvents) {
    auto st = make_state(1, small_cfg(10, 0.8, 20));
    for (Minute t = 0; t < 500; ++t) {
        auto ev = step1(st, t, Classification::within, 0.01);
        EXPECT_TRUE(ev.empty());
    }
    EXPECT_DOUBLE_EQ(*st.upper_density(0), 0.0);
}

TEST(DetectorStateTest, SustainedRejectionRampsToOneAndConfirmsOnce) {
    auto st = make_state(1, small_cfg(10, 0.8, 20));
    std::vector<UncalibrationEvent> all;
    for (Minute t = 0; t < 10; ++t) step1(st, t, Classification::within, 0.0);
    for (Minute t = 10; t < 120; ++t) {
        auto ev = step1(st, t, Classification::reject_high, 0.4);
        for (auto& e : ev) all.push_back(e);
        if (t >= 19) {
            EXPECT_DOUBLE_EQ(*st.upper_density(0), 1.0);
        }
    }
    // Density >= 0.8 first at minute 17 (8 of the last 10), confirm 20 later.
    ASSERT_EQ(all.size(), 1u);
    EXPECT_EQ(all[0].onset, 17);
    EXPECT_EQ(all[0].confirmed_at, 37);
    EXPECT_EQ(all[0].direction, Direction::high);
    EXPECT_GE(all[0].confirmed_at - all[0].onset, 20);
    EXPECT_NEAR(all[0].estimated_deviation, 0.4, 1e-12);
    EXPECT_DOUBLE_EQ(all[0].density_at_confirmation, 1.0);
}

TEST(DetectorStateTest, DipsBeforePersistenceResetTheCounter) {
    // Density oscillates above/below threshold with dips every persistence-1
    // minutes: no event may fire.
    auto cfg = small_cfg(4, 0.75, 8);
    auto st = make_state(1, cfg);
    Minute t = 0;
    for (; t < 4; ++t) step1(st, t, Classification::within, 0.0);
    std::size_t events = 0;
    for (int cycle = 0; cycle < 30; ++cycle) {
        for (int k = 0; k < 7; ++k) events += step1(st, t++, Classification::reject_high, 0.3).size();
        // One within-minute knocks density to 0.75... keep two to force < 0.75.
        events += step1(st, t++, Classification::within, 0.0).size();
        events += step1(st, t++, Classification::within, 0.0).size();
    }
    EXPECT_EQ(events, 0u);
}

TEST(DetectorStateTest, ExactlyOncePerExcursionAndReconfirms) {
    auto st = make_state(1, small_cfg(4, 0.75, 8));
    std::size_t events = 0;
    Minute t = 0;
    for (; t < 4; ++t) step1(st, t, Classification::within, 0.0);
    for (; t < 60; ++t) events += step1(st, t, Classification::reject_high, 0.3).size();
    EXPECT_EQ(events, 1u);  // no duplicates while the run persists
    for (; t < 70; ++t) events += step1(st, t, Classification::within, 0.0).size();
    EXPECT_EQ(events, 1u);
    for (; t < 130; ++t) events += step1(st, t, Classification::reject_high, 0.3).size();
    EXPECT_EQ(events, 2u);  // a new excursion confirms again
}

TEST(DetectorStateTest, MaskedMinutesFreezeDensityButPersistenceAdvances) {
    auto st = make_state(1, small_cfg(10, 0.8, 20));
    Minute t = 0;
    for (; t < 10; ++t) step1(st, t, Classification::within, 0.0);
    // Push density to 1.0.
    for (; t < 22; ++t) step1(st, t, Classification::reject_high, 0.35);
    ASSERT_DOUBLE_EQ(*st.upper_density(0), 1.0);
    // Fully masked stretch: density holds, wall clock runs, event confirms.
    std::vector<UncalibrationEvent> all;
    for (; t < 60; ++t) {
        auto ev = step1(st, t, std::nullopt, std::nullopt);
        for (auto& e : ev) all.push_back(e);
        EXPECT_DOUBLE_EQ(*st.upper_density(0), 1.0);
    }
    ASSERT_EQ(all.size(), 1u);
    EXPECT_EQ(all[0].onset, 17);
    EXPECT_EQ(all[0].confirmed_at, 37);
    // The deviation estimate carries the last observed errors.
    EXPECT_NEAR(all[0].estimated_deviation, 0.35, 1e-12);
}

TEST(DetectorStateTest, WarmupCannotTriggerEvents) {
    auto st = make_state(1, small_cfg(100, 0.8, 100));
    std::size_t events = 0;
    for (Minute t = 0; t < 99; ++t) {
        events += step1(st, t, Classification::reject_high, 1.0).size();
        EXPECT_FALSE(st.upper_density(0).has_value());
    }
    EXPECT_EQ(events, 0u);
}

TEST(DetectorStateTest, OutOfOrderTimestampRejected) {
    auto st = make_state(1, small_cfg(10, 0.8, 20));
    step1(st, 5, Classification::within, 0.0);
    EXPECT_THROW(step1(st, 5, Classification::within, 0.0), Error);
    EXPECT_THROW(step1(st, 4, Classification::within, 0.0), Error);
}

TEST(DetectorStateTest, DensityMatchesBruteForceRecountOnRandomStreams) {
    Rng rng(31337);
    auto cfg = small_cfg(7, 0.6, 7);
    auto st = make_state(3, cfg);
    std::vector<std::deque<std::pair<bool, bool>>> rings(3);
    for (Minute t = 0; t < 2000; ++t) {
        StepCls cls(3);
        StepErr errs(3);
        for (std::size_t i = 0; i < 3; ++i) {
            double u = rng.uniform();
            if (u < 0.2) continue;  // masked
            Classification c = u < 0.55   ? Classification::within
                               : u < 0.8 ? Classification::reject_high
                                         : Classification::reject_low;
            cls[i] = c;
            errs[i] = rng.gaussian();
            rings[i].emplace_back(c == Classification::reject_high,
                                  c == Classification::reject_low);
            if (rings[i].size() > 7) rings[i].pop_front();
        }
        st.step(t, cls, errs);
        for (std::size_t i = 0; i < 3; ++i) {
            if (rings[i].size() < 7) {
                EXPECT_FALSE(st.upper_density(i).has_value());
                continue;
            }
            int up = 0, lo = 0;
            for (auto [u2, l2] : rings[i]) {
                up += u2;
                lo += l2;
            }
            EXPECT_DOUBLE_EQ(*st.upper_density(i), up / 7.0);
            EXPECT_DOUBLE_EQ(*st.lower_density(i), lo / 7.0);
        }
    }
}

TEST(DetectorStateTest, MatchesScalarSimulationOracle) {
    Rng rng(90210);
    auto cfg = small_cfg(12, 0.7, 25);
    auto st = make_state(1, cfg);
    ScalarOracle oracle{12, 25, 0.7, {}, false, false, 0, {}};
    std::vector<std::pair<Minute, Minute>> got;
    for (Minute t = 0; t < 5000; ++t) {
        // Regime switches to produce several excursions.
        double p_reject = (t / 400) % 2 == 0 ? 0.05 : 0.95;
        std::optional<Classification> c;
        std::optional<double> e;
        if (rng.uniform() > 0.1) {
            c = rng.uniform() < p_reject ? Classification::reject_high : Classification::within;
            e = 0.1;
        }
        auto ev = st.step(t, StepCls{c}, StepErr{e});
        oracle.step(t, c);
        for (const auto& x : ev) got.emplace_back(x.onset, x.confirmed_at);
    }
    EXPECT_EQ(got, oracle.events);
    EXPECT_GT(got.size(), 0u);
}

TEST(DetectorStateTest, CheckpointRoundTripPreservesBehavior) {
    auto cfg = small_cfg(10, 0.8, 30);
    auto a = make_state(2, cfg);
    Rng rng(4);
    StepCls cls(2);
    StepErr errs(2);
    Minute t = 0;
    auto random_step = [&](DetectorState& st) {
        return st.step(t, cls, errs);
    };
    std::vector<UncalibrationEvent> direct;
    for (; t < 37; ++t) {
        for (std::size_t i = 0; i < 2; ++i) {
            cls[i] = rng.uniform() < 0.9 ? std::optional(Classification::reject_high) : std::nullopt;
            errs[i] = cls[i] ? std::optional(0.2) : std::nullopt;
        }
        random_step(a);
    }
    std::stringstream ss;
    a.save(ss);
    auto b = DetectorState::load(ss, {"s0", "s1"}, {0.5, 0.5}, cfg, {});
    // Continue both identically; events must match minute for minute.
    for (; t < 200; ++t) {
        for (std::size_t i = 0; i < 2; ++i) {
            cls[i] = Classification::reject_high;
            errs[i] = 0.2;
        }
        auto ea = a.step(t, cls, errs);
        // b was saved before this loop; replay the same step.
        auto eb = b.step(t, cls, errs);
        ASSERT_EQ(ea.size(), eb.size());
        for (std::size_t k = 0; k < ea.size(); ++k) {
            EXPECT_EQ(ea[k].onset, eb[k].onset);
            EXPECT_EQ(ea[k].confirmed_at, eb[k].confirmed_at);
            EXPECT_EQ(ea[k].estimated_deviation, eb[k].estimated_deviation);
        }
    }
}
