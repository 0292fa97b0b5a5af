#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "aggext/covariates.hpp"
#include "aggext/errors.hpp"
#include "aggext/geometry.hpp"
#include "aggext/margins.hpp"

#include "json.hpp"  // vendored single-header JSON parser

namespace aggext {

// ---------------------------------------------------------------------------
// Calendar dates
// ---------------------------------------------------------------------------

namespace detail {

// Days since 1970-01-01 for a civil date (proleptic Gregorian).
inline long days_from_civil(int y, int m, int d) {
    y -= m <= 2;
    const int era = (y >= 0 ? y : y - 399) / 400;
    const unsigned yoe = static_cast<unsigned>(y - era * 400);
    const unsigned mp = static_cast<unsigned>(m + (m > 2 ? -3 : 9));
    const unsigned doy = (153u * mp + 2u) / 5u + static_cast<unsigned>(d) - 1u;
    const unsigned doe = yoe * 365u + yoe / 4u - yoe / 100u + doy;
    return static_cast<long>(era) * 146097L + static_cast<long>(doe) - 719468L;
}

inline bool is_leap_year(int y) { return y % 4 == 0 && (y % 100 != 0 || y % 400 == 0); }

inline int days_in_month(int y, int m) {
    static constexpr int k[12] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
    return (m == 2 && is_leap_year(y)) ? 29 : k[m - 1];
}

}  // namespace detail

// Civil date with ISO text form YYYY-MM-DD.
struct Date {
    int year = 1970;
    int month = 1;
    int day = 1;

    long serial() const { return detail::days_from_civil(year, month, day); }

    std::string str() const {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", year, month, day);
        return buf;
    }

    friend bool operator==(const Date& a, const Date& b) = default;
};

// Strict ISO-8601 parse; nullopt on any format or calendar violation.
inline std::optional<Date> try_parse_date(std::string_view s) {
    if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
    const auto digits = [](std::string_view part, int& out) {
        int v = 0;
        for (char c : part) {
            if (c < '0' || c > '9') return false;
            v = v * 10 + (c - '0');
        }
        out = v;
        return true;
    };
    Date d;
    if (!digits(s.substr(0, 4), d.year) || !digits(s.substr(5, 2), d.month) ||
        !digits(s.substr(8, 2), d.day))
        return std::nullopt;
    if (d.year < 1 || d.month < 1 || d.month > 12 || d.day < 1 ||
        d.day > detail::days_in_month(d.year, d.month))
        return std::nullopt;
    return d;
}

inline Date parse_date(std::string_view s) {
    const auto d = try_parse_date(s);
    if (!d) throw data_error("invalid date '" + std::string(s) + "' (expected YYYY-MM-DD)");
    return *d;
}

// ---------------------------------------------------------------------------
// Study geometry (cells, optional stations, optional covariate rasters)
// ---------------------------------------------------------------------------

struct CellSpec {
    std::string id;
    Region region;
    std::map<std::string, double> covariates;
};

struct StationSpec {
    std::string id;
    Point location;
};

struct Geometry {
    std::vector<CellSpec> cells;
    std::vector<StationSpec> stations;
    std::map<std::string, SampledField> rasters;
};

namespace detail {

inline double json_number(const nlohmann::json& j, const char* key, const std::string& ctx) {
    if (!j.contains(key) || !j[key].is_number())
        throw data_error("geometry: " + ctx + " is missing numeric field '" + key + "'");
    return j[key].get<double>();
}

inline std::string json_string(const nlohmann::json& j, const char* key, const std::string& ctx) {
    if (!j.contains(key) || !j[key].is_string())
        throw data_error("geometry: " + ctx + " is missing string field '" + key + "'");
    return j[key].get<std::string>();
}

inline std::vector<double> json_number_array(const nlohmann::json& j, const std::string& ctx) {
    if (!j.is_array() || j.empty()) throw data_error("geometry: " + ctx + " must be a non-empty array");
    std::vector<double> out;
    out.reserve(j.size());
    for (const auto& v : j) {
        if (!v.is_number()) throw data_error("geometry: " + ctx + " must contain only numbers");
        out.push_back(v.get<double>());
    }
    return out;
}

}  // namespace detail

// Reads the study geometry from JSON:
//   {
//     "cells": [{"id": "...", "xmin": 0, "xmax": 1, "ymin": 0, "ymax": 1,
//                "covariates": {"alt": 440.0}}, ...],
//     "stations": [{"id": "...", "x": 0.4, "y": 0.7}, ...],          (optional)
//     "rasters": [{"name": "alt", "xs": [...], "ys": [...],          (optional)
//                  "values": [...x-major: value[ix*ny+iy]...]}]
//   }
// Raster axes may also be given as {"x0","dx","nx","y0","dy","ny"}.
inline Geometry read_geometry(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("geometry: cannot open '" + path + "'");
    nlohmann::json root;
    try {
        in >> root;
    } catch (const std::exception& e) {
        throw data_error("geometry: invalid JSON in '" + path + "': " + e.what());
    }
    if (!root.is_object() || !root.contains("cells") || !root["cells"].is_array() ||
        root["cells"].empty())
        throw data_error("geometry: expected a top-level object with a non-empty 'cells' array");

    Geometry g;
    for (const auto& jc : root["cells"]) {
        CellSpec c;
        c.id = detail::json_string(jc, "id", "cell");
        const std::string ctx = "cell '" + c.id + "'";
        c.region = Region{detail::json_number(jc, "xmin", ctx), detail::json_number(jc, "xmax", ctx),
                          detail::json_number(jc, "ymin", ctx), detail::json_number(jc, "ymax", ctx)};
        try {
            c.region.validate();
        } catch (const error& e) {
            throw data_error("geometry: " + ctx + ": " + e.what());
        }
        if (jc.contains("covariates")) {
            if (!jc["covariates"].is_object())
                throw data_error("geometry: " + ctx + ": 'covariates' must be an object");
            for (const auto& [k, v] : jc["covariates"].items()) {
                if (!v.is_number())
                    throw data_error("geometry: " + ctx + ": covariate '" + k + "' must be numeric");
                c.covariates[k] = v.get<double>();
            }
        }
        for (const CellSpec& prev : g.cells)
            if (prev.id == c.id) throw data_error("geometry: duplicate cell id '" + c.id + "'");
        g.cells.push_back(std::move(c));
    }

    if (root.contains("stations")) {
        if (!root["stations"].is_array())
            throw data_error("geometry: 'stations' must be an array");
        for (const auto& js : root["stations"]) {
            StationSpec s;
            s.id = detail::json_string(js, "id", "station");
            const std::string ctx = "station '" + s.id + "'";
            s.location = Point{detail::json_number(js, "x", ctx), detail::json_number(js, "y", ctx)};
            for (const CellSpec& c : g.cells)
                if (c.id == s.id)
                    throw data_error("geometry: station id '" + s.id + "' collides with a cell id");
            for (const StationSpec& prev : g.stations)
                if (prev.id == s.id) throw data_error("geometry: duplicate station id '" + s.id + "'");
            g.stations.push_back(std::move(s));
        }
    }

    if (root.contains("rasters")) {
        if (!root["rasters"].is_array()) throw data_error("geometry: 'rasters' must be an array");
        for (const auto& jr : root["rasters"]) {
            const std::string name = detail::json_string(jr, "name", "raster");
            const std::string ctx = "raster '" + name + "'";
            SampledField f;
            if (jr.contains("xs") || jr.contains("ys")) {
                if (!jr.contains("xs") || !jr.contains("ys"))
                    throw data_error("geometry: " + ctx + " needs both 'xs' and 'ys'");
                f.xs = detail::json_number_array(jr["xs"], ctx + " xs");
                f.ys = detail::json_number_array(jr["ys"], ctx + " ys");
            } else {
                const double x0 = detail::json_number(jr, "x0", ctx);
                const double dx = detail::json_number(jr, "dx", ctx);
                const long nx = static_cast<long>(detail::json_number(jr, "nx", ctx));
                const double y0 = detail::json_number(jr, "y0", ctx);
                const double dy = detail::json_number(jr, "dy", ctx);
                const long ny = static_cast<long>(detail::json_number(jr, "ny", ctx));
                if (nx < 1 || ny < 1 || !(dx > 0.0) || !(dy > 0.0))
                    throw data_error("geometry: " + ctx + " has an invalid axis specification");
                for (long i = 0; i < nx; ++i) f.xs.push_back(x0 + dx * static_cast<double>(i));
                for (long i = 0; i < ny; ++i) f.ys.push_back(y0 + dy * static_cast<double>(i));
            }
            if (!jr.contains("values"))
                throw data_error("geometry: " + ctx + " is missing 'values'");
            f.values = detail::json_number_array(jr["values"], ctx + " values");
            try {
                f.validate();
            } catch (const error& e) {
                throw data_error("geometry: " + ctx + ": " + e.what());
            }
            if (g.rasters.count(name)) throw data_error("geometry: duplicate raster '" + name + "'");
            g.rasters.emplace(name, std::move(f));
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Study configuration
// ---------------------------------------------------------------------------

struct StudyConfig {
    std::vector<int> months;           // empty: keep all months
    double threshold_quantile = 0.98;  // per-cell threshold level, in (0.5, 1)
    int gap_days = 5;                  // declustering separation, >= 0
    double t = 0.0;                    // extremal level; 0: use the number of retained rows
    int jackknife_blocks = 10;
    std::uint64_t seed = 20260816ULL;
    std::string outdir = ".";

    void validate() const {
        for (int m : months)
            if (m < 1 || m > 12) throw config_error("StudyConfig: months must be within 1..12");
        if (!(threshold_quantile > 0.5 && threshold_quantile < 1.0))
            throw config_error("StudyConfig: threshold quantile must lie in (0.5, 1)");
        if (gap_days < 0) throw config_error("StudyConfig: gap_days must be >= 0");
        if (!(t >= 0.0) || !std::isfinite(t))
            throw config_error("StudyConfig: level t must be finite and >= 0");
        if (jackknife_blocks < 2) throw config_error("StudyConfig: need at least 2 jackknife blocks");
    }
};

// ---------------------------------------------------------------------------
// Aggregated dataset
// ---------------------------------------------------------------------------

// Daily (or otherwise indexed) aggregated observations: an n x L matrix of
// cell averages with no missing entries, plus optional station series that
// may contain gaps (NaN).
struct AggDataset {
    Eigen::MatrixXd obs;  // n x L, complete
    std::vector<Date> dates;
    std::vector<std::string> cell_ids;
    std::vector<Region> cell_regions;
    std::vector<std::map<std::string, double>> cell_covariates;
    std::map<std::string, SampledField> rasters;

    std::vector<std::string> station_ids;
    std::vector<Point> station_locations;
    Eigen::MatrixXd station_obs;  // n x P, NaN where unobserved

    long n() const { return obs.rows(); }
    int L() const { return static_cast<int>(obs.cols()); }

    void validate() const {
        if (obs.rows() == 0 || obs.cols() == 0) throw data_error("AggDataset: empty observations");
        if (static_cast<long>(dates.size()) != obs.rows())
            throw data_error("AggDataset: date index does not match the observation rows");
        if (cell_ids.size() != static_cast<std::size_t>(obs.cols()) ||
            cell_regions.size() != cell_ids.size() || cell_covariates.size() != cell_ids.size())
            throw data_error("AggDataset: cell metadata does not match the observation columns");
        for (std::size_t i = 1; i < dates.size(); ++i)
            if (dates[i].serial() <= dates[i - 1].serial())
                throw data_error("AggDataset: dates must be strictly increasing");
        if (!obs.allFinite()) throw data_error("AggDataset: missing values after ingestion");
        if (!station_ids.empty()) {
            if (station_locations.size() != station_ids.size() ||
                station_obs.rows() != obs.rows() ||
                station_obs.cols() != static_cast<long>(station_ids.size()))
                throw data_error("AggDataset: station metadata does not match the station series");
        }
    }

    std::vector<Functional> cell_functionals() const {
        std::vector<Functional> out;
        out.reserve(cell_regions.size());
        for (const Region& r : cell_regions) out.push_back(Functional::cell_average(r));
        return out;
    }
};

struct IngestReport {
    long lines_read = 0;           // data lines scanned (header excluded)
    long rows_seen = 0;            // distinct dates encountered
    long rows_retained = 0;        // dates kept in the final matrix
    long rows_filtered_month = 0;  // dates outside the month filter
    long rows_dropped_missing = 0; // dates dropped because a cell value was missing
    std::vector<std::pair<long, std::string>> malformed;  // (line number, reason)

    std::string summary() const {
        std::ostringstream os;
        os << "lines read:            " << lines_read << "\n"
           << "dates seen:            " << rows_seen << "\n"
           << "dates retained:        " << rows_retained << "\n"
           << "filtered by month:     " << rows_filtered_month << "\n"
           << "dropped (missing):     " << rows_dropped_missing << "\n"
           << "malformed rows:        " << malformed.size() << "\n";
        for (const auto& [line, why] : malformed) os << "  line " << line << ": " << why << "\n";
        return os.str();
    }
};

struct IngestResult {
    AggDataset data;
    IngestReport report;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            out.push_back(trim(line.substr(start)));
            break;
        }
        out.push_back(trim(line.substr(start, pos - start)));
        start = pos + 1;
    }
    return out;
}

// Parses a full numeric field; empty/NA/NaN mean "missing" (NaN result),
// anything else unparseable or non-finite is an error (nullopt).
inline std::optional<double> parse_value_field(std::string_view s) {
    if (s.empty() || s == "NA" || s == "na" || s == "NaN" || s == "nan")
        return std::numeric_limits<double>::quiet_NaN();
    double v = 0.0;
    const char* first = s.data();
    const char* last = s.data() + s.size();
    const auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc{} || ptr != last || !std::isfinite(v)) return std::nullopt;
    return v;
}

}  // namespace detail

// Reads a long-format observation file (header `date,cell_id,value`, one
// value per row) against a geometry, applying the month filter and dropping
// dates with missing cell values.  Individual malformed rows are rejected
// and reported with their line number; a wrong header or a date running
// backwards is an error.
inline IngestResult ingest(const std::string& data_csv, const std::string& geometry_json,
                           const StudyConfig& config) {
    config.validate();
    const Geometry geom = read_geometry(geometry_json);

    std::ifstream in(data_csv);
    if (!in) throw config_error("ingest: cannot open '" + data_csv + "'");

    IngestResult out;
    IngestReport& rep = out.report;
    AggDataset& ds = out.data;

    const std::size_t L = geom.cells.size();
    const std::size_t P = geom.stations.size();
    std::map<std::string, std::size_t> cell_index, station_index;
    for (std::size_t j = 0; j < L; ++j) cell_index.emplace(geom.cells[j].id, j);
    for (std::size_t p = 0; p < P; ++p) station_index.emplace(geom.stations[p].id, p);

    std::string line;
    long line_no = 0;
    if (!std::getline(in, line)) throw data_error("ingest: '" + data_csv + "' is empty");
    ++line_no;
    {
        const auto header = detail::split_csv(line);
        if (header.size() != 3 || header[0] != "date" || header[1] != "cell_id" ||
            header[2] != "value")
            throw data_error("ingest: schema mismatch, expected header 'date,cell_id,value'");
    }

    const double nan = std::numeric_limits<double>::quiet_NaN();
    const auto month_ok = [&](const Date& d) {
        if (config.months.empty()) return true;
        return std::find(config.months.begin(), config.months.end(), d.month) !=
               config.months.end();
    };

    std::vector<Eigen::RowVectorXd> rows, station_rows;
    std::vector<Date> kept_dates;

    std::optional<Date> cur;
    Eigen::RowVectorXd cur_cells, cur_stations;
    const auto flush = [&]() {
        if (!cur) return;
        ++rep.rows_seen;
        if (!month_ok(*cur)) {
            ++rep.rows_filtered_month;
        } else if (!cur_cells.allFinite()) {
            ++rep.rows_dropped_missing;
        } else {
            kept_dates.push_back(*cur);
            rows.push_back(cur_cells);
            station_rows.push_back(cur_stations);
        }
        cur.reset();
    };

    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        ++rep.lines_read;
        const auto fields = detail::split_csv(line);
        if (fields.size() != 3) {
            rep.malformed.emplace_back(line_no, "expected 3 fields 'date,cell_id,value'");
            continue;
        }
        const auto date = try_parse_date(fields[0]);
        if (!date) {
            rep.malformed.emplace_back(line_no, "invalid date '" + std::string(fields[0]) + "'");
            continue;
        }
        if (cur && date->serial() < cur->serial())
            throw data_error("ingest: non-monotone dates at line " + std::to_string(line_no) +
                             " ('" + date->str() + "' after '" + cur->str() + "')");
        if (!cur || !(*date == *cur)) {
            flush();
            cur = *date;
            cur_cells = Eigen::RowVectorXd::Constant(static_cast<long>(L), nan);
            cur_stations = Eigen::RowVectorXd::Constant(std::max<long>(1, static_cast<long>(P)), nan);
        }

        const std::string id(fields[1]);
        const auto value = detail::parse_value_field(fields[2]);
        if (!value) {
            rep.malformed.emplace_back(line_no, "unparseable value '" + std::string(fields[2]) + "'");
            continue;
        }
        if (const auto it = cell_index.find(id); it != cell_index.end()) {
            if (std::isfinite(cur_cells[static_cast<long>(it->second)])) {
                rep.malformed.emplace_back(line_no,
                                           "duplicate value for cell '" + id + "' on " + cur->str());
                continue;
            }
            cur_cells[static_cast<long>(it->second)] = *value;
        } else if (const auto is = station_index.find(id); is != station_index.end()) {
            if (std::isfinite(cur_stations[static_cast<long>(is->second)])) {
                rep.malformed.emplace_back(
                    line_no, "duplicate value for station '" + id + "' on " + cur->str());
                continue;
            }
            cur_stations[static_cast<long>(is->second)] = *value;
        } else {
            rep.malformed.emplace_back(line_no, "unknown id '" + id + "'");
        }
    }
    flush();

    if (kept_dates.empty())
        throw data_error("ingest: no complete rows retained from '" + data_csv + "'");

    ds.obs.resize(static_cast<long>(rows.size()), static_cast<long>(L));
    for (std::size_t i = 0; i < rows.size(); ++i) ds.obs.row(static_cast<long>(i)) = rows[i];
    ds.dates = std::move(kept_dates);
    for (const CellSpec& c : geom.cells) {
        ds.cell_ids.push_back(c.id);
        ds.cell_regions.push_back(c.region);
        ds.cell_covariates.push_back(c.covariates);
    }
    ds.rasters = geom.rasters;
    if (P > 0) {
        for (const StationSpec& s : geom.stations) {
            ds.station_ids.push_back(s.id);
            ds.station_locations.push_back(s.location);
        }
        ds.station_obs.resize(ds.obs.rows(), static_cast<long>(P));
        for (std::size_t i = 0; i < station_rows.size(); ++i)
            ds.station_obs.row(static_cast<long>(i)) = station_rows[i].head(static_cast<long>(P));
    }
    rep.rows_retained = ds.obs.rows();
    ds.validate();
    return out;
}

// Writes a dataset back to the long CSV format, preserving every double
// bit-exactly (17 significant digits round-trip binary64).  Station values
// are emitted only where observed.
inline void export_csv(const AggDataset& ds, const std::string& path) {
    ds.validate();
    std::ofstream outf(path);
    if (!outf) throw config_error("export_csv: cannot open '" + path + "' for writing");
    outf << "date,cell_id,value\n";
    char buf[40];
    for (long i = 0; i < ds.n(); ++i) {
        const std::string date = ds.dates[static_cast<std::size_t>(i)].str();
        for (int j = 0; j < ds.L(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g", ds.obs(i, j));
            outf << date << ',' << ds.cell_ids[static_cast<std::size_t>(j)] << ',' << buf << '\n';
        }
        for (long p = 0; p < ds.station_obs.cols(); ++p) {
            const double v = ds.station_obs(i, p);
            if (!std::isfinite(v)) continue;
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            outf << date << ',' << ds.station_ids[static_cast<std::size_t>(p)] << ',' << buf << '\n';
        }
    }
    if (!outf) throw config_error("export_csv: write to '" + path + "' failed");
}

// ---------------------------------------------------------------------------
// Declustering
// ---------------------------------------------------------------------------

struct DeclusterResult {
    std::vector<long> event_rows;  // ascending row indices of retained events
    Eigen::VectorXd thresholds;    // per-cell threshold at the configured quantile
    Eigen::VectorXd scales;        // per-cell spread between the 0.98 and 0.5 quantiles
    Eigen::VectorXd scores;        // per-row max normalized exceedance
};

// Greedy temporal declustering.  Each row gets the score
//   max_j (x_ij - u_j) / s_j
// with u_j the per-cell threshold at `quantile` and s_j the per-cell spread
// between the 0.98 and 0.5 empirical quantiles.  Rows with positive score
// are visited in descending score order; a row is kept only when it lies at
// least gap_days away from every event already kept, so retained events are
// pairwise >= gap_days apart.  gap_days == 0 keeps every exceedance row.
inline DeclusterResult decluster(const Eigen::MatrixXd& obs, const std::vector<Date>& dates,
                                 double quantile, int gap_days) {
    if (obs.rows() == 0 || obs.cols() == 0) throw data_error("decluster: empty observations");
    if (static_cast<long>(dates.size()) != obs.rows())
        throw config_error("decluster: date index does not match the observation rows");
    if (!(quantile > 0.5 && quantile < 1.0))
        throw config_error("decluster: quantile must lie in (0.5, 1)");
    if (gap_days < 0) throw config_error("decluster: gap_days must be >= 0");

    const long n = obs.rows();
    const int L = static_cast<int>(obs.cols());
    DeclusterResult out;
    out.thresholds.resize(L);
    out.scales.resize(L);
    for (int j = 0; j < L; ++j) {
        std::vector<double> col(obs.col(j).data(), obs.col(j).data() + n);
        out.thresholds[j] = empirical_quantile(col, quantile);
        out.scales[j] = empirical_quantile(col, 0.98) - empirical_quantile(col, 0.5);
        if (!(out.scales[j] > 0.0))
            throw data_error("decluster: degenerate scale in cell " + std::to_string(j));
    }

    out.scores.resize(n);
    std::vector<long> candidates;
    for (long i = 0; i < n; ++i) {
        double sc = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < L; ++j)
            sc = std::max(sc, (obs(i, j) - out.thresholds[j]) / out.scales[j]);
        out.scores[i] = sc;
        if (sc > 0.0) candidates.push_back(i);
    }
    std::sort(candidates.begin(), candidates.end(), [&](long a, long b) {
        if (out.scores[a] != out.scores[b]) return out.scores[a] > out.scores[b];
        return a < b;
    });

    std::vector<long> kept_days;
    for (long i : candidates) {
        const long day = dates[static_cast<std::size_t>(i)].serial();
        bool blocked = false;
        for (long kd : kept_days)
            if (std::labs(day - kd) < gap_days) {
                blocked = true;
                break;
            }
        if (blocked) continue;
        kept_days.push_back(day);
        out.event_rows.push_back(i);
    }
    std::sort(out.event_rows.begin(), out.event_rows.end());
    return out;
}

}  // namespace aggext
