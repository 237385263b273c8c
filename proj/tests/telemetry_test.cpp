#include <gtest/gtest.h>

#include <sstream>

#include "driftwatch/rng.hpp"
#include "driftwatch/telemetry.hpp"

using namespace driftwatch;

namespace {

SensorGrid grid1() { return SensorGrid::uniform(Magnitude::temperature, {"t1"}); }

TimeSeries parse(const std::string& text, const SensorGrid& g) {
    std::istringstream in(text);
    return parse_csv(in, g);
}

TimeSeries random_series(std::size_t n_sensors, std::size_t n_frames, std::uint64_t seed) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n_sensors; ++i) ids.push_back("s" + std::to_string(i));
    TimeSeries s;
    s.grid = SensorGrid::uniform(Magnitude::temperature, ids);
    Rng rng(seed);
    Minute t = parse_timestamp("2021-01-01T00:00:00Z");
    for (std::size_t k = 0; k < n_frames; ++k) {
        ReadingFrame f;
        f.timestamp = t;
        t += 1 + static_cast<Minute>(rng.below(3));  // leave gaps
        for (std::size_t i = 0; i < n_sensors; ++i) {
            if (rng.uniform() < 0.1) {
                f.values.push_back(0.0);
                f.mask.push_back(0);
            } else {
                // Mix magnitudes to stress the round-trip formatting.
                f.values.push_back((rng.uniform() - 0.5) * std::pow(10.0, rng.uniform(-6.0, 6.0)));
                f.mask.push_back(1);
            }
        }
        s.frames.push_back(std::move(f));
    }
    return s;
}

}  // namespace

TEST(ParseCsvTest, SingleRow) {
    auto s = parse("timestamp,t1\n2021-01-01T00:00:00Z,21.5\n", grid1());
    ASSERT_EQ(s.frames.size(), 1u);
    EXPECT_EQ(s.frames[0].values[0], 21.5);
    EXPECT_EQ(s.frames[0].mask[0], 1);
}

TEST(ParseCsvTest, EmptyCellMasks) {
    auto s = parse("timestamp,t1\n2021-01-01T00:00:00Z,\n", grid1());
    ASSERT_EQ(s.frames.size(), 1u);
    EXPECT_EQ(s.frames[0].mask[0], 0);
}

TEST(ParseCsvTest, EqualTimestampsAreOrderingError) {
    try {
        parse("timestamp,t1\n2021-01-01T00:00:00Z,1\n2021-01-01T00:00:00Z,2\n", grid1());
        FAIL() << "expected ordering error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::ordering);
        EXPECT_NE(std::string(e.what()).find("row 2"), std::string::npos);
    }
}

TEST(ParseCsvTest, HeaderMismatchNamesColumn) {
    try {
        parse("timestamp,tX\n", grid1());
        FAIL() << "expected schema error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::schema);
        EXPECT_NE(std::string(e.what()).find("tX"), std::string::npos);
    }
}

TEST(ParseCsvTest, BadNumberNamesRowAndColumn) {
    try {
        parse("timestamp,t1\n2021-01-01T00:00:00Z,12x\n", grid1());
        FAIL() << "expected format error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::format);
        EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
    }
}

TEST(WriteCsvTest, EmptySeriesIsHeaderOnly) {
    TimeSeries s;
    s.grid = grid1();
    std::ostringstream out;
    write_csv(s, out);
    EXPECT_EQ(out.str(), "timestamp,t1\n");
}

TEST(WriteCsvTest, MaskedValueIsEmptyCell) {
    TimeSeries s;
    s.grid = grid1();
    s.frames.push_back({parse_timestamp("2021-01-01T00:00:00Z"), {9.0}, {0}});
    std::ostringstream out;
    write_csv(s, out);
    EXPECT_EQ(out.str(), "timestamp,t1\n2021-01-01T00:00:00Z,\n");
}

TEST(WriteCsvTest, RoundTripIsByteExact) {
    auto s = random_series(4, 100, 12345);
    std::ostringstream first;
    write_csv(s, first);
    std::istringstream in(first.str());
    auto reparsed = parse_csv(in, s.grid);
    std::ostringstream second;
    write_csv(reparsed, second);
    EXPECT_EQ(first.str(), second.str());
    // And value-exact equality.
    ASSERT_EQ(reparsed.frames.size(), s.frames.size());
    for (std::size_t k = 0; k < s.frames.size(); ++k) {
        EXPECT_EQ(reparsed.frames[k].timestamp, s.frames[k].timestamp);
        EXPECT_EQ(reparsed.frames[k].mask, s.frames[k].mask);
        for (std::size_t i = 0; i < s.grid.size(); ++i)
            if (s.frames[k].mask[i]) EXPECT_EQ(reparsed.frames[k].values[i], s.frames[k].values[i]);
    }
}

TEST(SplitDatasetTest, PaperFractions) {
    auto s = random_series(2, 100, 7);
    auto parts = split_dataset(s, {0.6, 0.1, 0.3});
    ASSERT_EQ(parts.size(), 3u);
    EXPECT_EQ(parts[0].frames.size(), 60u);
    EXPECT_EQ(parts[1].frames.size(), 10u);
    EXPECT_EQ(parts[2].frames.size(), 30u);
}

TEST(SplitDatasetTest, IdentitySplit) {
    auto s = random_series(2, 10, 8);
    auto parts = split_dataset(s, {1.0});
    ASSERT_EQ(parts.size(), 1u);
    EXPECT_EQ(parts[0].frames.size(), 10u);
    for (std::size_t k = 0; k < 10; ++k)
        EXPECT_EQ(parts[0].frames[k].timestamp, s.frames[k].timestamp);
}

TEST(SplitDatasetTest, TransferFractions) {
    auto s = random_series(2, 10, 9);
    auto parts = split_dataset(s, {0.7, 0.2, 0.1});
    ASSERT_EQ(parts.size(), 3u);
    EXPECT_EQ(parts[0].frames.size(), 7u);
    EXPECT_EQ(parts[1].frames.size(), 2u);
    EXPECT_EQ(parts[2].frames.size(), 1u);
}

TEST(SplitDatasetTest, ConcatenationReproducesInput) {
    auto s = random_series(3, 137, 10);
    auto parts = split_dataset(s, {0.37, 0.21, 0.42});
    std::size_t k = 0;
    for (const auto& p : parts)
        for (const auto& f : p.frames) {
            EXPECT_EQ(f.timestamp, s.frames[k].timestamp);
            EXPECT_EQ(f.values, s.frames[k].values);
            ++k;
        }
    EXPECT_EQ(k, s.frames.size());
}

TEST(SplitDatasetTest, RejectsBadFractions) {
    auto s = random_series(1, 10, 11);
    EXPECT_THROW(split_dataset(s, {0.5, 0.4}), Error);
    EXPECT_THROW(split_dataset(s, {1.2, -0.2}), Error);
    EXPECT_THROW(split_dataset(s, {}), Error);
}

TEST(GridTest, MismatchedFrameFailsRatherThanTruncates) {
    ReadingFrame f{0, {1.0, 2.0}, {1, 1}};
    EXPECT_THROW(check_frame_matches_grid(f, grid1()), Error);
}

TEST(GridTest, RejectsDuplicateIdsAndMixedKinds) {
    EXPECT_THROW(SensorGrid::uniform(Magnitude::temperature, {"a", "a"}), Error);
    SensorGrid g = SensorGrid::uniform(Magnitude::temperature, {"a", "b"});
    g.sensors[1].kind = SensorKind::defaults(Magnitude::humidity);
    EXPECT_THROW(g.validate(), Error);
}
