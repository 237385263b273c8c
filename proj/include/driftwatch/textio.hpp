#pragma once

#include <charconv>
#include <cstdint>
#include <istream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "driftwatch/error.hpp"

namespace driftwatch {

// Shortest decimal form that round-trips the exact double value.
inline std::string format_double(double v) {
    char buf[32];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline double parse_double_strict(std::string_view s, const std::string& what) {
    double v;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
        throw Error(ErrorKind::format, "unparsable number '" + std::string(s) + "' in " + what);
    return v;
}

inline std::int64_t parse_int_strict(std::string_view s, const std::string& what) {
    std::int64_t v;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size())
        throw Error(ErrorKind::format, "unparsable integer '" + std::string(s) + "' in " + what);
    return v;
}

// Line/token reader for the versioned text envelopes (model, residual,
// checkpoint files). Any structural surprise throws a corrupt-payload error
// naming the expected field.
class TokenReader {
public:
    TokenReader(std::istream& in, std::string file_kind)
        : in_(in), kind_(std::move(file_kind)) {}

    std::string line(const std::string& field) {
        std::string s;
        if (!std::getline(in_, s))
            throw Error(ErrorKind::corrupt, kind_ + ": truncated before " + field);
        if (!s.empty() && s.back() == '\r') s.pop_back();
        return s;
    }

    std::vector<std::string> tokens(const std::string& field) {
        std::istringstream ss(line(field));
        std::vector<std::string> out;
        std::string t;
        while (ss >> t) out.push_back(t);
        return out;
    }

    // Line of exactly `label v1 v2 ...` with count values.
    std::vector<double> labeled_doubles(const std::string& label, std::size_t count) {
        auto toks = tokens(label);
        if (toks.size() != count + 1 || toks[0] != label)
            throw Error(ErrorKind::corrupt, kind_ + ": expected '" + label + "' with " +
                                                std::to_string(count) + " values");
        std::vector<double> out;
        out.reserve(count);
        for (std::size_t i = 1; i < toks.size(); ++i)
            out.push_back(parse_double_strict(toks[i], kind_ + "." + label));
        return out;
    }

    std::int64_t labeled_int(const std::string& label) {
        auto toks = tokens(label);
        if (toks.size() != 2 || toks[0] != label)
            throw Error(ErrorKind::corrupt, kind_ + ": expected '" + label + " <int>'");
        return parse_int_strict(toks[1], kind_ + "." + label);
    }

    void expect(const std::string& exact) {
        auto s = line(exact);
        if (s != exact)
            throw Error(ErrorKind::corrupt, kind_ + ": expected '" + exact + "', got '" + s + "'");
    }

    const std::string& kind() const { return kind_; }

private:
    std::istream& in_;
    std::string kind_;
};

}  // namespace driftwatch
