#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

#include "driftwatch/error.hpp"

namespace driftwatch {

// Instants are UTC minutes since the Unix epoch. The whole pipeline is
// minute-indexed; sub-minute timestamps are rejected at parse time.
using Minute = std::int64_t;

namespace detail {

// Howard Hinnant's civil-date algorithms.
inline std::int64_t days_from_civil(int y, unsigned m, unsigned d) {
    y -= m <= 2;
    const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
    const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

inline void civil_from_days(std::int64_t z, int& y, unsigned& m, unsigned& d) {
    z += 719468;
    const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
    const unsigned doe = static_cast<unsigned>(z - era * 146097);
    const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    const int yr = static_cast<int>(yoe) + static_cast<int>(era) * 400;
    const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    const unsigned mp = (5 * doy + 2) / 153;
    d = doy - (153 * mp + 2) / 5 + 1;
    m = mp + (mp < 10 ? 3 : -9);
    y = yr + (m <= 2);
}

inline bool parse_fixed_uint(std::string_view s, std::size_t pos, std::size_t len, unsigned& out) {
    unsigned v = 0;
    for (std::size_t i = 0; i < len; ++i) {
        char c = s[pos + i];
        if (c < '0' || c > '9') return false;
        v = v * 10 + static_cast<unsigned>(c - '0');
    }
    out = v;
    return true;
}

}  // namespace detail

// Parses "YYYY-MM-DDTHH:MM:SSZ". Seconds must be zero (one-minute cadence).
inline Minute parse_timestamp(std::string_view s) {
    auto bad = [&](const char* why) -> Minute {
        throw Error(ErrorKind::format,
                    "bad timestamp '" + std::string(s) + "': " + why);
    };
    if (s.size() != 20) return bad("expected YYYY-MM-DDTHH:MM:SSZ");
    if (s[4] != '-' || s[7] != '-' || s[10] != 'T' || s[13] != ':' || s[16] != ':' || s[19] != 'Z')
        return bad("expected YYYY-MM-DDTHH:MM:SSZ");
    unsigned year, month, day, hour, minute, second;
    if (!detail::parse_fixed_uint(s, 0, 4, year) || !detail::parse_fixed_uint(s, 5, 2, month) ||
        !detail::parse_fixed_uint(s, 8, 2, day) || !detail::parse_fixed_uint(s, 11, 2, hour) ||
        !detail::parse_fixed_uint(s, 14, 2, minute) || !detail::parse_fixed_uint(s, 17, 2, second))
        return bad("non-digit field");
    if (month < 1 || month > 12) return bad("month out of range");
    static const unsigned mdays[] = {31, 29, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
    if (day < 1 || day > mdays[month - 1]) return bad("day out of range");
    if (month == 2 && day == 29) {
        bool leap = (year % 4 == 0 && year % 100 != 0) || year % 400 == 0;
        if (!leap) return bad("not a leap year");
    }
    if (hour > 23 || minute > 59) return bad("time out of range");
    if (second != 0) return bad("sub-minute timestamps are not supported");
    std::int64_t days = detail::days_from_civil(static_cast<int>(year), month, day);
    return days * 1440 + static_cast<std::int64_t>(hour) * 60 + minute;
}

inline std::string format_timestamp(Minute t) {
    std::int64_t days = t / 1440;
    std::int64_t rem = t % 1440;
    if (rem < 0) {
        rem += 1440;
        days -= 1;
    }
    int y;
    unsigned m, d;
    detail::civil_from_days(days, y, m, d);
    char buf[40];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02lld:%02lld:00Z", y, m, d,
                  static_cast<long long>(rem / 60), static_cast<long long>(rem % 60));
    return buf;
}

}  // namespace driftwatch
