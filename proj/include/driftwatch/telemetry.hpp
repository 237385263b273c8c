#pragma once

#include <charconv>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "driftwatch/error.hpp"
#include "driftwatch/textio.hpp"
#include "driftwatch/time.hpp"

namespace driftwatch {

enum class Magnitude { temperature, humidity, pressure };

inline const char* magnitude_name(Magnitude m) {
    switch (m) {
        case Magnitude::temperature: return "temperature";
        case Magnitude::humidity: return "humidity";
        case Magnitude::pressure: return "pressure";
    }
    return "?";
}

inline Magnitude magnitude_from_name(std::string_view s) {
    if (s == "temperature") return Magnitude::temperature;
    if (s == "humidity") return Magnitude::humidity;
    if (s == "pressure") return Magnitude::pressure;
    throw Error(ErrorKind::config, "unknown sensor magnitude '" + std::string(s) + "'");
}

struct SensorKind {
    Magnitude kind = Magnitude::temperature;
    std::string unit;
    double tolerance = 0.0;  // quality tolerance band, sensor units
    double alarm_lo = 0.0;   // alarm-system band used by the threshold filter
    double alarm_hi = 0.0;

    // Quality tolerances per magnitude: 0.5 degC, 3 %RH, 0.5 Pa. Alarm bands
    // default to plausible deployment settings and are configurable.
    static SensorKind defaults(Magnitude m) {
        switch (m) {
            case Magnitude::temperature: return {m, "degC", 0.5, 15.0, 30.0};
            case Magnitude::humidity: return {m, "%RH", 3.0, 20.0, 80.0};
            case Magnitude::pressure: return {m, "Pa", 0.5, -50.0, 50.0};
        }
        throw Error(ErrorKind::config, "bad magnitude");
    }

    void validate() const {
        if (!(alarm_lo < alarm_hi))
            throw Error(ErrorKind::config, "sensor alarm_lo must be < alarm_hi");
        if (!(tolerance > 0.0))
            throw Error(ErrorKind::config, "sensor tolerance must be positive");
    }
};

struct Sensor {
    std::string id;
    SensorKind kind;
};

// A fixed, ordered set of same-magnitude sensors. The order defines the
// output indexing of every model ever trained on the grid.
struct SensorGrid {
    std::vector<Sensor> sensors;
    int cadence_minutes = 1;

    std::size_t size() const { return sensors.size(); }

    void validate() const {
        if (sensors.empty()) throw Error(ErrorKind::config, "grid has no sensors");
        if (cadence_minutes < 1) throw Error(ErrorKind::config, "cadence must be >= 1 minute");
        for (std::size_t i = 0; i < sensors.size(); ++i) {
            const auto& s = sensors[i];
            if (s.id.empty()) throw Error(ErrorKind::config, "empty sensor id");
            for (char c : s.id) {
                bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                          (c >= '0' && c <= '9') || c == '_' || c == '-' || c == '.';
                if (!ok)
                    throw Error(ErrorKind::config, "sensor id '" + s.id + "' has invalid characters");
            }
            s.kind.validate();
            if (s.kind.kind != sensors[0].kind.kind)
                throw Error(ErrorKind::config, "grid mixes sensor magnitudes");
            for (std::size_t j = i + 1; j < sensors.size(); ++j)
                if (sensors[j].id == s.id)
                    throw Error(ErrorKind::config, "duplicate sensor id '" + s.id + "'");
        }
    }

    std::vector<std::string> ids() const {
        std::vector<std::string> out;
        out.reserve(sensors.size());
        for (const auto& s : sensors) out.push_back(s.id);
        return out;
    }

    // Convenience: n sensors of one magnitude with default kind settings.
    static SensorGrid uniform(Magnitude m, const std::vector<std::string>& ids) {
        SensorGrid g;
        for (const auto& id : ids) g.sensors.push_back({id, SensorKind::defaults(m)});
        g.validate();
        return g;
    }
};

// One timestamped vector of simultaneous measurements. Masked slots carry no
// numeric meaning and must never enter downstream statistics.
struct ReadingFrame {
    Minute timestamp = 0;
    std::vector<double> values;
    std::vector<std::uint8_t> mask;  // 1 = present, 0 = dropped

    bool fully_masked() const {
        for (auto m : mask)
            if (m) return false;
        return true;
    }
    bool fully_unmasked() const {
        for (auto m : mask)
            if (!m) return false;
        return true;
    }
};

struct TimeSeries {
    SensorGrid grid;
    std::vector<ReadingFrame> frames;

    std::size_t size() const { return frames.size(); }
};

inline void check_frame_matches_grid(const ReadingFrame& f, const SensorGrid& grid) {
    if (f.values.size() != grid.size() || f.mask.size() != grid.size())
        throw Error(ErrorKind::input, "frame width does not match grid size");
}

namespace detail {

inline double parse_double(std::string_view s, std::size_t row, std::size_t col) {
    double v;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
        throw Error(ErrorKind::format, "unparsable number '" + std::string(s) + "' at row " +
                                           std::to_string(row) + ", column " + std::to_string(col));
    return v;
}

inline std::vector<std::string_view> split_line(std::string_view line) {
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
        if (i == line.size() || line[i] == ',') {
            cells.push_back(line.substr(start, i - start));
            start = i + 1;
        }
    }
    return cells;
}

}  // namespace detail

// CSV header `timestamp,<id1>,...` must match grid order exactly.
inline void check_csv_header(std::string_view header, const SensorGrid& grid) {
    auto cells = detail::split_line(header);
    if (cells.empty() || cells[0] != "timestamp")
        throw Error(ErrorKind::schema, "first header column must be 'timestamp'");
    if (cells.size() != grid.size() + 1)
        throw Error(ErrorKind::schema,
                    "header has " + std::to_string(cells.size() - 1) + " sensor columns, grid has " +
                        std::to_string(grid.size()));
    for (std::size_t i = 0; i < grid.size(); ++i)
        if (cells[i + 1] != grid.sensors[i].id)
            throw Error(ErrorKind::schema, "header column " + std::to_string(i + 1) + " is '" +
                                               std::string(cells[i + 1]) + "', expected '" +
                                               grid.sensors[i].id + "'");
}

// One body row: ISO-8601 timestamp plus decimal cells; empty cell = masked.
inline ReadingFrame parse_csv_row(std::string_view line, const SensorGrid& grid, std::size_t row) {
    auto cells = detail::split_line(line);
    if (cells.size() != grid.size() + 1)
        throw Error(ErrorKind::format, "row " + std::to_string(row) + " has " +
                                           std::to_string(cells.size()) + " cells, expected " +
                                           std::to_string(grid.size() + 1));
    ReadingFrame f;
    f.timestamp = parse_timestamp(cells[0]);
    f.values.resize(grid.size(), 0.0);
    f.mask.resize(grid.size(), 0);
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (cells[i + 1].empty()) continue;
        f.values[i] = detail::parse_double(cells[i + 1], row, i + 1);
        f.mask[i] = 1;
    }
    return f;
}

// Incremental reader for the wide CSV format. Row numbers in errors count
// data rows (the header is row 0).
class CsvReader {
public:
    CsvReader(std::istream& in, const SensorGrid& grid) : in_(in), grid_(grid) {
        grid_.validate();
        std::string header;
        if (!std::getline(in_, header))
            throw Error(ErrorKind::schema, "missing CSV header");
        if (!header.empty() && header.back() == '\r') header.pop_back();
        check_csv_header(header, grid_);
        row_ = 0;
    }

    // Returns the next frame, or nullopt at end of stream.
    std::optional<ReadingFrame> next() {
        std::string line;
        if (!std::getline(in_, line)) return std::nullopt;
        ++row_;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        ReadingFrame f = parse_csv_row(line, grid_, row_);
        if (have_last_ && f.timestamp <= last_)
            throw Error(ErrorKind::ordering, "non-monotone timestamp at row " + std::to_string(row_));
        last_ = f.timestamp;
        have_last_ = true;
        return f;
    }

private:
    std::istream& in_;
    SensorGrid grid_;
    std::size_t row_ = 0;
    Minute last_ = 0;
    bool have_last_ = false;
};

inline TimeSeries parse_csv(std::istream& in, const SensorGrid& grid) {
    TimeSeries out;
    out.grid = grid;
    CsvReader reader(in, grid);
    while (auto f = reader.next()) out.frames.push_back(std::move(*f));
    return out;
}

// Values are rendered with shortest round-trip precision, so
// parse_csv(write_csv(s)) reproduces s exactly.
inline void write_csv(const TimeSeries& series, std::ostream& out) {
    out << "timestamp";
    for (const auto& s : series.grid.sensors) out << ',' << s.id;
    out << '\n';
    for (const auto& f : series.frames) {
        check_frame_matches_grid(f, series.grid);
        out << format_timestamp(f.timestamp);
        for (std::size_t i = 0; i < f.values.size(); ++i) {
            out << ',';
            if (f.mask[i]) out << format_double(f.values[i]);
        }
        out << '\n';
    }
}

// Contiguous chronological segments; lengths floor(fraction*N), remainder to
// the last segment. Never shuffles: this is temporal data.
inline std::vector<TimeSeries> split_dataset(const TimeSeries& series,
                                             const std::vector<double>& fractions) {
    if (fractions.empty())
        throw Error(ErrorKind::config, "split needs at least one fraction");
    double sum = 0.0;
    for (double f : fractions) {
        if (!(f > 0.0)) throw Error(ErrorKind::config, "split fractions must be positive");
        sum += f;
    }
    if (std::fabs(sum - 1.0) > 1e-9)
        throw Error(ErrorKind::config, "split fractions must sum to 1");
    const std::size_t n = series.frames.size();
    std::vector<TimeSeries> out;
    std::size_t start = 0;
    for (std::size_t k = 0; k < fractions.size(); ++k) {
        std::size_t len = (k + 1 == fractions.size())
                              ? n - start
                              : static_cast<std::size_t>(fractions[k] * static_cast<double>(n));
        TimeSeries part;
        part.grid = series.grid;
        part.frames.assign(series.frames.begin() + static_cast<std::ptrdiff_t>(start),
                           series.frames.begin() + static_cast<std::ptrdiff_t>(start + len));
        out.push_back(std::move(part));
        start += len;
    }
    return out;
}

}  // namespace driftwatch
