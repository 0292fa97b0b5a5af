#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "aggext/dataset.hpp"
#include "aggext/errors.hpp"

using namespace aggext;

namespace {

const std::filesystem::path kTmp = "dataset_tmp";

std::string write_file(const std::string& name, const std::string& content) {
    std::filesystem::create_directories(kTmp);
    const std::string path = (kTmp / name).string();
    std::ofstream out(path);
    out << content;
    return path;
}

std::string two_cell_geometry() {
    return write_file("geom2.json", R"({
      "cells": [
        {"id": "c1", "xmin": 0, "xmax": 1, "ymin": 0, "ymax": 1, "covariates": {"alt": 100.0}},
        {"id": "c2", "xmin": 1, "xmax": 2, "ymin": 0, "ymax": 1, "covariates": {"alt": 200.0}}
      ],
      "stations": [{"id": "s1", "x": 0.5, "y": 0.5}]
    })");
}

}  // namespace

TEST_CASE("dates: strict ISO parsing and serial arithmetic") {
    const Date d = parse_date("2001-06-15");
    CHECK(d.year == 2001);
    CHECK(d.month == 6);
    CHECK(d.day == 15);
    CHECK(d.str() == "2001-06-15");

    // Serial numbers count civil days: consecutive dates differ by one.
    CHECK(parse_date("2001-06-16").serial() - d.serial() == 1);
    CHECK(parse_date("2001-07-01").serial() - parse_date("2001-06-30").serial() == 1);
    CHECK(parse_date("1970-01-01").serial() == 0);
    CHECK(parse_date("1970-01-02").serial() == 1);
    CHECK(parse_date("1969-12-31").serial() == -1);

    // Leap-year handling.
    CHECK(try_parse_date("2024-02-29").has_value());
    CHECK_FALSE(try_parse_date("2023-02-29").has_value());
    CHECK_FALSE(try_parse_date("2100-02-29").has_value());  // century, not leap
    CHECK(try_parse_date("2000-02-29").has_value());        // 400-year rule

    // Format violations.
    for (const char* bad : {"2001-6-15", "2001/06/15", "20010615", "2001-13-01", "2001-00-10",
                            "2001-01-32", "01-06-2001", "2001-06-15 ", "abcd-ef-gh", ""})
        CHECK_FALSE(try_parse_date(bad).has_value());
    CHECK_THROWS_AS(parse_date("2001-06-31"), data_error);
}

TEST_CASE("geometry: JSON reading, covariates, stations, rasters") {
    const std::string path = write_file("geom_full.json", R"({
      "cells": [
        {"id": "a", "xmin": 0, "xmax": 2, "ymin": 0, "ymax": 1,
         "covariates": {"alt": 440.5, "lon": 7.2}},
        {"id": "b", "xmin": 2, "xmax": 3, "ymin": 0, "ymax": 2}
      ],
      "stations": [{"id": "st", "x": 1.5, "y": 0.25}],
      "rasters": [
        {"name": "alt", "xs": [0.5, 1.5, 2.5], "ys": [0.5, 1.5], "values": [1, 2, 3, 4, 5, 6]},
        {"name": "slope", "x0": 0.0, "dx": 1.0, "nx": 2, "y0": 0.0, "dy": 0.5, "ny": 3,
         "values": [10, 11, 12, 13, 14, 15]}
      ]
    })");
    const Geometry g = read_geometry(path);
    REQUIRE(g.cells.size() == 2);
    CHECK(g.cells[0].id == "a");
    CHECK(g.cells[0].region.xmax == 2.0);
    CHECK(g.cells[0].covariates.at("alt") == 440.5);
    CHECK(g.cells[0].covariates.at("lon") == 7.2);
    CHECK(g.cells[1].covariates.empty());
    REQUIRE(g.stations.size() == 1);
    CHECK(g.stations[0].location.x == 1.5);
    REQUIRE(g.rasters.size() == 2);
    const SampledField& alt = g.rasters.at("alt");
    REQUIRE(alt.xs.size() == 3);
    REQUIRE(alt.ys.size() == 2);
    // Values are x-major: value[ix*ny + iy].
    CHECK(alt.values[alt.nearest_index({0.5, 0.5})] == 1.0);
    CHECK(alt.values[alt.nearest_index({2.5, 1.5})] == 6.0);
    const SampledField& slope = g.rasters.at("slope");
    CHECK(slope.xs == std::vector<double>{0.0, 1.0});
    CHECK(slope.ys == std::vector<double>{0.0, 0.5, 1.0});

    SECTION("schema violations are rejected with context") {
        CHECK_THROWS_AS(read_geometry(write_file("g_bad1.json", R"({"cells": []})")), data_error);
        CHECK_THROWS_AS(read_geometry(write_file("g_bad2.json", "not json at all")), data_error);
        CHECK_THROWS_AS(
            read_geometry(write_file(
                "g_bad3.json",
                R"({"cells": [{"id": "a", "xmin": 1, "xmax": 0, "ymin": 0, "ymax": 1}]})")),
            data_error);
        CHECK_THROWS_AS(
            read_geometry(write_file(
                "g_bad4.json", R"({"cells": [{"id": "a", "xmax": 1, "ymin": 0, "ymax": 1}]})")),
            data_error);
        const char* dup = R"({"cells": [
            {"id": "a", "xmin": 0, "xmax": 1, "ymin": 0, "ymax": 1},
            {"id": "a", "xmin": 1, "xmax": 2, "ymin": 0, "ymax": 1}]})";
        CHECK_THROWS_WITH(read_geometry(write_file("g_bad5.json", dup)),
                          Catch::Matchers::ContainsSubstring("duplicate cell id"));
        const char* collide = R"({"cells": [{"id": "a", "xmin": 0, "xmax": 1, "ymin": 0, "ymax": 1}],
                                  "stations": [{"id": "a", "x": 0, "y": 0}]})";
        CHECK_THROWS_WITH(read_geometry(write_file("g_bad6.json", collide)),
                          Catch::Matchers::ContainsSubstring("collides"));
        const char* badraster = R"({"cells": [{"id": "a", "xmin": 0, "xmax": 1, "ymin": 0, "ymax": 1}],
                                    "rasters": [{"name": "r", "xs": [0, 1], "ys": [0], "values": [1]}]})";
        CHECK_THROWS_AS(read_geometry(write_file("g_bad7.json", badraster)), data_error);
        CHECK_THROWS_AS(read_geometry((kTmp / "does_not_exist.json").string()), config_error);
    }
}

TEST_CASE("ingest: complete rows retained, incomplete dropped and counted") {
    const std::string geom = two_cell_geometry();
    const std::string csv = write_file("obs_happy.csv",
                                       "date,cell_id,value\n"
                                       "2001-06-01,c1,1.5\n"
                                       "2001-06-01,c2,2.5\n"
                                       "2001-06-01,s1,9\n"
                                       "2001-06-02,c1,0.25\n"
                                       "2001-06-02,c2,0.125\n"
                                       "2001-06-03,c1,3\n"
                                       "2001-06-04,c2,4\n"
                                       "2001-06-04,c1,1e-3\n");
    const IngestResult r = ingest(csv, geom, StudyConfig{});
    const AggDataset& d = r.data;

    REQUIRE(d.n() == 3);  // 2001-06-03 lacks c2 and is dropped
    REQUIRE(d.L() == 2);
    CHECK(d.cell_ids == std::vector<std::string>{"c1", "c2"});
    CHECK(d.dates[0].str() == "2001-06-01");
    CHECK(d.dates[1].str() == "2001-06-02");
    CHECK(d.dates[2].str() == "2001-06-04");
    CHECK(d.obs(0, 0) == 1.5);
    CHECK(d.obs(0, 1) == 2.5);
    CHECK(d.obs(1, 0) == 0.25);
    CHECK(d.obs(1, 1) == 0.125);
    CHECK(d.obs(2, 0) == 1e-3);  // within-date row order does not matter
    CHECK(d.obs(2, 1) == 4.0);
    CHECK(d.cell_covariates[1].at("alt") == 200.0);

    REQUIRE(d.station_ids == std::vector<std::string>{"s1"});
    CHECK(d.station_obs(0, 0) == 9.0);
    CHECK(std::isnan(d.station_obs(1, 0)));
    CHECK(std::isnan(d.station_obs(2, 0)));

    CHECK(r.report.lines_read == 8);
    CHECK(r.report.rows_seen == 4);
    CHECK(r.report.rows_retained == 3);
    CHECK(r.report.rows_dropped_missing == 1);
    CHECK(r.report.rows_filtered_month == 0);
    CHECK(r.report.malformed.empty());
    CHECK_FALSE(r.report.summary().empty());
}

TEST_CASE("ingest: malformed rows are rejected with their line numbers") {
    const std::string geom = two_cell_geometry();
    const std::string csv = write_file("obs_malformed.csv",
                                       "date,cell_id,value\n"    // line 1
                                       "2001-06-01,c1,1.0\n"     // line 2
                                       "2001-06-01,c2,2.0\n"     // line 3
                                       "2001-06-91,c1,3.0\n"     // line 4: invalid date
                                       "2001-06-02,c1,oops\n"    // line 5: bad value
                                       "2001-06-02,c2,1.25\n"    // line 6
                                       "2001-06-02,zz,3.5\n"     // line 7: unknown id
                                       "2001-06-02,c2,9.9\n"     // line 8: duplicate cell
                                       "bad line\n"              // line 9: field count
                                       "2001-06-03,c1,1.0\n"     // line 10
                                       "2001-06-03,c2,2.0\n");   // line 11
    const IngestResult r = ingest(csv, geom, StudyConfig{});

    std::vector<long> lines;
    for (const auto& [line, why] : r.report.malformed) lines.push_back(line);
    CHECK(lines == std::vector<long>{4, 5, 7, 8, 9});
    CHECK(r.report.malformed[0].second.find("invalid date") != std::string::npos);
    CHECK(r.report.malformed[1].second.find("unparseable value") != std::string::npos);
    CHECK(r.report.malformed[2].second.find("unknown id") != std::string::npos);
    CHECK(r.report.malformed[3].second.find("duplicate") != std::string::npos);
    CHECK(r.report.malformed[4].second.find("expected 3 fields") != std::string::npos);

    // 2001-06-02 lost c1 to the bad value and is dropped as incomplete;
    // the first duplicate value (line 6) wins over line 8.
    REQUIRE(r.data.n() == 2);
    CHECK(r.data.dates[0].str() == "2001-06-01");
    CHECK(r.data.dates[1].str() == "2001-06-03");
    CHECK(r.report.rows_dropped_missing == 1);
    CHECK(r.report.summary().find("line 7") != std::string::npos);
}

TEST_CASE("ingest: fatal errors") {
    const std::string geom = two_cell_geometry();
    SECTION("schema mismatch") {
        const std::string csv = write_file("obs_schema.csv", "day,cell,value\n2001-06-01,c1,1\n");
        CHECK_THROWS_WITH(ingest(csv, geom, StudyConfig{}),
                          Catch::Matchers::ContainsSubstring("schema mismatch"));
    }
    SECTION("non-monotone dates") {
        const std::string csv = write_file("obs_mono.csv",
                                           "date,cell_id,value\n"
                                           "2001-06-02,c1,1\n"
                                           "2001-06-01,c1,2\n");
        CHECK_THROWS_WITH(ingest(csv, geom, StudyConfig{}),
                          Catch::Matchers::ContainsSubstring("non-monotone dates at line 3"));
    }
    SECTION("empty and missing files") {
        CHECK_THROWS_AS(ingest(write_file("obs_empty.csv", ""), geom, StudyConfig{}), data_error);
        CHECK_THROWS_AS(ingest((kTmp / "nope.csv").string(), geom, StudyConfig{}), config_error);
    }
    SECTION("no retained rows") {
        const std::string csv = write_file("obs_none.csv",
                                           "date,cell_id,value\n"
                                           "2001-06-01,c1,1\n");
        CHECK_THROWS_AS(ingest(csv, geom, StudyConfig{}), data_error);
    }
}

TEST_CASE("ingest: month filter") {
    const std::string geom = two_cell_geometry();
    const std::string csv = write_file("obs_months.csv",
                                       "date,cell_id,value\n"
                                       "2001-05-31,c1,1\n"
                                       "2001-05-31,c2,2\n"
                                       "2001-06-15,c1,3\n"
                                       "2001-06-15,c2,4\n"
                                       "2001-07-01,c1,5\n"
                                       "2001-07-01,c2,6\n");
    StudyConfig cfg;
    cfg.months = {6};
    const IngestResult r = ingest(csv, geom, cfg);
    REQUIRE(r.data.n() == 1);
    CHECK(r.data.dates[0].month == 6);
    CHECK(r.report.rows_filtered_month == 2);

    // An empty month list keeps every row.
    const IngestResult all = ingest(csv, geom, StudyConfig{});
    CHECK(all.data.n() == 3);
    CHECK(all.report.rows_filtered_month == 0);

    StudyConfig bad;
    bad.months = {13};
    CHECK_THROWS_AS(ingest(csv, geom, bad), config_error);
}

TEST_CASE("StudyConfig validation") {
    StudyConfig c;
    CHECK_NOTHROW(c.validate());
    c.threshold_quantile = 0.5;
    CHECK_THROWS_AS(c.validate(), config_error);
    c = StudyConfig{};
    c.gap_days = -1;
    CHECK_THROWS_AS(c.validate(), config_error);
    c = StudyConfig{};
    c.jackknife_blocks = 1;
    CHECK_THROWS_AS(c.validate(), config_error);
    c = StudyConfig{};
    c.t = -2.0;
    CHECK_THROWS_AS(c.validate(), config_error);
}

TEST_CASE("round trip: ingest -> export -> ingest is bit-exact") {
    const std::string geom = two_cell_geometry();
    // Values chosen to stress the formatter: non-terminating binaries,
    // extreme magnitudes, negatives, and a denormal.
    const double vals[4][2] = {{0.1, 1.0 / 3.0},
                               {-123456789.123456789, 2.2250738585072014e-308},
                               {6.62607015e-34, 1.0 + std::pow(2.0, -52)},
                               {-0.0, 9.87654321e17}};
    std::string csv = "date,cell_id,value\n";
    const char* days[4] = {"2001-06-01", "2001-06-02", "2001-06-03", "2001-06-04"};
    char buf[64];
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 2; ++j) {
            std::snprintf(buf, sizeof(buf), "%s,c%d,%.17g\n", days[i], j + 1, vals[i][j]);
            csv += buf;
        }
        if (i == 1) csv += "2001-06-02,s1,0.30000000000000004\n";
    }
    const std::string path = write_file("obs_round.csv", csv);

    const IngestResult r1 = ingest(path, geom, StudyConfig{});
    const std::string exported = (kTmp / "obs_export.csv").string();
    export_csv(r1.data, exported);
    const IngestResult r2 = ingest(exported, geom, StudyConfig{});

    REQUIRE(r2.data.n() == r1.data.n());
    REQUIRE(r2.data.L() == r1.data.L());
    for (long i = 0; i < r1.data.n(); ++i)
        for (int j = 0; j < r1.data.L(); ++j) CHECK(r2.data.obs(i, j) == r1.data.obs(i, j));
    for (long i = 0; i < r1.data.n(); ++i) {
        const bool f1 = std::isfinite(r1.data.station_obs(i, 0));
        const bool f2 = std::isfinite(r2.data.station_obs(i, 0));
        CHECK(f1 == f2);
        if (f1) CHECK(r2.data.station_obs(i, 0) == r1.data.station_obs(i, 0));
    }
    // Double-check one awkward value survived exactly.
    CHECK(r2.data.obs(0, 0) == 0.1);
    CHECK(r2.data.station_obs(1, 0) == 0.30000000000000004);
}

TEST_CASE("decluster: greedy score ordering with a separation gap") {
    // One cell, ten days.  A ramp keeps the quantiles low while three spikes
    // on days 1, 3 and 9 (of June 2001) are the only positive scores, ordered
    // day 3 > day 1 > day 9.
    const int n = 10;
    Eigen::MatrixXd obs(n, 1);
    std::vector<Date> dates;
    const long day0 = parse_date("2001-06-01").serial();
    const double ramp[7] = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
    int k = 0;
    for (int day = 1; day <= 10; ++day) {
        Date d = parse_date("2001-06-01");
        d.day = day;
        dates.push_back(d);
        double v;
        if (day == 1)
            v = 50.0;
        else if (day == 3)
            v = 90.0;
        else if (day == 9)
            v = 20.0;
        else
            v = ramp[k++];
        obs(day - 1, 0) = v;
    }
    REQUIRE(dates[0].serial() == day0);

    const DeclusterResult r = decluster(obs, dates, 0.7, 5);
    // Sanity on the score construction: exactly the three spikes exceed.
    int positive = 0;
    for (int i = 0; i < n; ++i) positive += r.scores[i] > 0.0;
    REQUIRE(positive == 3);
    REQUIRE(r.scores[2] > r.scores[0]);
    REQUIRE(r.scores[0] > r.scores[8]);
    REQUIRE(r.scores[8] > 0.0);

    // Greedy: day 3 wins, day 1 is within 5 days of it, day 9 is 6 days away.
    CHECK(r.event_rows == std::vector<long>{2, 8});

    // gap 0 keeps every exceedance row.
    const DeclusterResult r0 = decluster(obs, dates, 0.7, 0);
    CHECK(r0.event_rows == std::vector<long>{0, 2, 8});

    // Thresholds and scales agree with the marginal quantile helper.
    std::vector<double> col(obs.col(0).data(), obs.col(0).data() + n);
    CHECK(r.thresholds[0] == empirical_quantile(col, 0.7));
    CHECK(r.scales[0] == empirical_quantile(col, 0.98) - empirical_quantile(col, 0.5));
}

TEST_CASE("decluster: all exceedances on one day collapse to a single event") {
    Eigen::MatrixXd obs(6, 1);
    obs.col(0) << 0.0, 1.0, 2.0, 3.0, 10.0, 4.0;
    const std::vector<Date> dates(6, parse_date("2001-05-05"));

    const DeclusterResult r = decluster(obs, dates, 0.7, 5);
    REQUIRE((r.scores.array() > 0.0).count() >= 2);  // at least rows 4 and 5 exceed
    CHECK(r.event_rows == std::vector<long>{4});     // highest score wins

    const DeclusterResult r0 = decluster(obs, dates, 0.7, 0);
    CHECK(r0.event_rows.size() == static_cast<std::size_t>((r0.scores.array() > 0.0).count()));
}

TEST_CASE("decluster: validation and degenerate scales") {
    Eigen::MatrixXd obs = Eigen::MatrixXd::Constant(20, 1, 3.0);
    std::vector<Date> dates;
    for (int i = 0; i < 20; ++i) {
        Date d = parse_date("2001-06-01");
        d.day = i + 1;
        dates.push_back(d);
    }
    CHECK_THROWS_AS(decluster(obs, dates, 0.7, 5), data_error);  // constant column

    Eigen::MatrixXd ok(20, 1);
    for (int i = 0; i < 20; ++i) ok(i, 0) = i;
    CHECK_THROWS_AS(decluster(ok, dates, 0.4, 5), config_error);
    CHECK_THROWS_AS(decluster(ok, dates, 0.7, -1), config_error);
    std::vector<Date> short_dates(dates.begin(), dates.end() - 1);
    CHECK_THROWS_AS(decluster(ok, short_dates, 0.7, 5), config_error);
    CHECK_THROWS_AS(decluster(Eigen::MatrixXd(), dates, 0.7, 5), data_error);
}

TEST_CASE("dataset validation catches structural damage") {
    const std::string geom = two_cell_geometry();
    const std::string csv = write_file("obs_valid.csv",
                                       "date,cell_id,value\n"
                                       "2001-06-01,c1,1\n"
                                       "2001-06-01,c2,2\n"
                                       "2001-06-02,c1,3\n"
                                       "2001-06-02,c2,4\n");
    AggDataset d = ingest(csv, geom, StudyConfig{}).data;
    CHECK_NOTHROW(d.validate());
    CHECK(d.cell_functionals().size() == 2);

    AggDataset broken = d;
    broken.dates[1] = broken.dates[0];
    CHECK_THROWS_AS(broken.validate(), data_error);

    broken = d;
    broken.obs(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(broken.validate(), data_error);

    broken = d;
    broken.cell_ids.pop_back();
    CHECK_THROWS_AS(broken.validate(), data_error);
}
