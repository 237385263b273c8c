#pragma once

#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "driftwatch/detector.hpp"
#include "driftwatch/preprocess.hpp"
#include "driftwatch/textio.hpp"

namespace driftwatch {

// The frozen training-stage statistics a detect run needs next to the model
// file: per-sensor residual fits plus the grid statistics the preprocessing
// pipeline was fitted with.
struct ResidualStore {
    std::vector<std::string> sensor_ids;
    ResidualModel residual;
    GridStatistics stats;

    void save(std::ostream& out) const {
        out << "driftwatch-residual v1\n";
        out << "sensors " << sensor_ids.size();
        for (const auto& id : sensor_ids) out << ' ' << id;
        out << '\n';
        out << "alpha " << format_double(residual.alpha) << '\n';
        for (std::size_t i = 0; i < residual.sensors.size(); ++i) {
            const SensorResidual& r = residual.sensors[i];
            out << "residual " << i << ' ' << format_double(r.mu) << ' ' << format_double(r.sigma)
                << ' ' << format_double(r.ci_lo) << ' ' << format_double(r.ci_hi) << ' '
                << format_double(r.ks_statistic) << ' ' << (r.ks_passed ? 1 : 0) << '\n';
        }
        out << "chi2_threshold " << format_double(stats.chi2_threshold) << '\n';
        out << "mean";
        for (Eigen::Index i = 0; i < stats.mean.size(); ++i) out << ' ' << format_double(stats.mean(i));
        out << '\n';
        out << "covariance " << stats.covariance.rows() << '\n';
        for (Eigen::Index r = 0; r < stats.covariance.rows(); ++r) {
            for (Eigen::Index c = 0; c < stats.covariance.cols(); ++c) {
                if (c) out << ' ';
                out << format_double(stats.covariance(r, c));
            }
            out << '\n';
        }
        out << "end\n";
    }

    static ResidualStore load(std::istream& in) {
        TokenReader r(in, "residual file");
        r.expect("driftwatch-residual v1");
        ResidualStore s;
        auto ids = r.tokens("sensors");
        if (ids.size() < 2 || ids[0] != "sensors")
            throw Error(ErrorKind::corrupt, "residual file: expected sensors line");
        auto n = static_cast<std::size_t>(parse_int_strict(ids[1], "sensor count"));
        if (ids.size() != n + 2)
            throw Error(ErrorKind::corrupt, "residual file: sensor id count mismatch");
        for (std::size_t i = 0; i < n; ++i) s.sensor_ids.push_back(ids[i + 2]);
        s.residual.alpha = r.labeled_doubles("alpha", 1)[0];
        for (std::size_t i = 0; i < n; ++i) {
            auto toks = r.tokens("residual line");
            if (toks.size() != 8 || toks[0] != "residual" ||
                parse_int_strict(toks[1], "residual index") != static_cast<std::int64_t>(i))
                throw Error(ErrorKind::corrupt, "residual file: bad residual line " + std::to_string(i));
            SensorResidual sr;
            sr.mu = parse_double_strict(toks[2], "mu");
            sr.sigma = parse_double_strict(toks[3], "sigma");
            sr.ci_lo = parse_double_strict(toks[4], "ci_lo");
            sr.ci_hi = parse_double_strict(toks[5], "ci_hi");
            sr.ks_statistic = parse_double_strict(toks[6], "ks_statistic");
            sr.ks_passed = parse_int_strict(toks[7], "ks_passed") != 0;
            s.residual.sensors.push_back(sr);
        }
        s.stats.chi2_threshold = r.labeled_doubles("chi2_threshold", 1)[0];
        auto mean = r.labeled_doubles("mean", n);
        s.stats.mean.resize(static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) s.stats.mean(static_cast<Eigen::Index>(i)) = mean[i];
        auto dim = static_cast<std::size_t>(r.labeled_int("covariance"));
        if (dim != n) throw Error(ErrorKind::corrupt, "residual file: covariance dim mismatch");
        s.stats.covariance.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
        for (std::size_t rr = 0; rr < n; ++rr) {
            auto toks = r.tokens("covariance row");
            if (toks.size() != n)
                throw Error(ErrorKind::corrupt, "residual file: covariance row arity mismatch");
            for (std::size_t cc = 0; cc < n; ++cc)
                s.stats.covariance(static_cast<Eigen::Index>(rr), static_cast<Eigen::Index>(cc)) =
                    parse_double_strict(toks[cc], "covariance value");
        }
        r.expect("end");
        return s;
    }
};

}  // namespace driftwatch
