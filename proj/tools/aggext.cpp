// aggext: batch front end for the aggregated-extremes library.
//
// Verbs: ingest-check, fit, return-levels, simulate (--conditional or
// --unconditional), diagnostics, simstudy.  All settings come from one JSON
// configuration file; no environment variables are consulted.

#include <Eigen/Dense>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "aggext/dataset.hpp"
#include "aggext/errors.hpp"
#include "aggext/fit.hpp"
#include "aggext/model.hpp"
#include "aggext/pipeline.hpp"
#include "aggext/simulate.hpp"

namespace {

using nlohmann::json;

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw aggext::data_error("cannot open '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw aggext::data_error("'" + path + "' is not valid JSON: " + e.what());
    }
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw aggext::data_error("cannot write '" + path + "'");
    out << content;
    if (!out) throw aggext::data_error("short write to '" + path + "'");
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// Configuration parsing
// ---------------------------------------------------------------------------

struct AppConfig {
    json root;
    std::string data_csv;
    std::string geometry_json;
    std::string outdir = ".";
    aggext::StudyConfig study;
    aggext::PipelineOptions pipeline;
};

template <class T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.is_object() || !j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw aggext::config_error(std::string("config field '") + key + "': " + e.what());
    }
}

AppConfig parse_config(const std::string& path) {
    AppConfig cfg;
    cfg.root = load_json_file(path);
    if (!cfg.root.is_object()) throw aggext::config_error("config root must be a JSON object");
    cfg.data_csv = get_or<std::string>(cfg.root, "data_csv", "");
    cfg.geometry_json = get_or<std::string>(cfg.root, "geometry_json", "");
    cfg.outdir = get_or<std::string>(cfg.root, "outdir", ".");

    const json study = cfg.root.value("study", json::object());
    cfg.study.months = get_or<std::vector<int>>(study, "months", {});
    cfg.study.threshold_quantile = get_or<double>(study, "threshold_quantile", 0.98);
    cfg.study.gap_days = get_or<int>(study, "gap_days", 5);
    cfg.study.t = get_or<double>(study, "t", 0.0);
    cfg.study.jackknife_blocks = get_or<int>(study, "jackknife_blocks", 10);
    cfg.study.seed = get_or<std::uint64_t>(study, "seed", cfg.study.seed);
    cfg.study.outdir = cfg.outdir;
    cfg.study.validate();

    const json model = cfg.root.value("model", json::object());
    cfg.pipeline.basis.a = get_or<std::vector<std::string>>(model, "basis_a", {"const"});
    cfg.pipeline.basis.b = get_or<std::vector<std::string>>(model, "basis_b", {"const"});
    cfg.pipeline.quad.nodes_per_axis = get_or<int>(model, "quad_nodes_per_axis", 12);
    cfg.pipeline.mask.eta = get_or<bool>(model, "fit_eta", false);
    cfg.pipeline.mask.aniso = get_or<bool>(model, "fit_aniso", false);
    cfg.pipeline.run_jackknife = get_or<bool>(model, "run_jackknife", true);
    cfg.pipeline.jackknife_block_size = get_or<int>(model, "jackknife_block_size", 0);
    const json vario = model.value("init_variogram", json::object());
    cfg.pipeline.init_variogram.alpha = get_or<double>(vario, "alpha", 1.0);
    cfg.pipeline.init_variogram.lambda = get_or<double>(vario, "lambda", 1.0);
    cfg.pipeline.init_variogram.eta = get_or<double>(vario, "eta", 0.0);
    cfg.pipeline.init_variogram.aniso = get_or<double>(vario, "aniso", 1.0);
    cfg.pipeline.ls.restarts = get_or<int>(model, "ls_restarts", cfg.pipeline.ls.restarts);
    cfg.pipeline.ls.nm.max_iter = get_or<long>(model, "ls_max_iter", cfg.pipeline.ls.nm.max_iter);
    cfg.pipeline.ls.nm.tol = get_or<double>(model, "ls_tol", cfg.pipeline.ls.nm.tol);
    cfg.pipeline.cens.restarts =
        get_or<int>(model, "censored_restarts", cfg.pipeline.cens.restarts);
    cfg.pipeline.cens.nm.max_iter =
        get_or<long>(model, "censored_max_iter", cfg.pipeline.cens.nm.max_iter);
    cfg.pipeline.cens.nm.tol = get_or<double>(model, "censored_tol", cfg.pipeline.cens.nm.tol);
    return cfg;
}

aggext::IngestResult run_ingest(const AppConfig& cfg) {
    if (cfg.data_csv.empty() || cfg.geometry_json.empty())
        throw aggext::config_error("config needs 'data_csv' and 'geometry_json'");
    return aggext::ingest(cfg.data_csv, cfg.geometry_json, cfg.study);
}

std::string out_path(const AppConfig& cfg, const std::string& name) {
    std::filesystem::create_directories(cfg.outdir);
    return (std::filesystem::path(cfg.outdir) / name).string();
}

// ---------------------------------------------------------------------------
// Fit serialization
// ---------------------------------------------------------------------------

json fit_to_json(const aggext::PipelineResult& r, const AppConfig& cfg) {
    const int ka = static_cast<int>(r.scheme.basis_a.size());
    const int kb = static_cast<int>(r.scheme.basis_b.size());
    const Eigen::VectorXd est = aggext::flatten_params(r.censored.params);

    json out;
    out["tool"] = "aggext";
    out["verb"] = "fit";
    out["t"] = r.t;
    out["n_rows"] = r.n_rows;
    out["n_events"] = r.n_events;
    out["n_censored"] = r.n_censored;
    out["converged"] = r.censored.converged;
    out["objective"] = r.censored.objective;
    out["ls_objective"] = r.ls.objective;
    out["threshold_quantile"] = cfg.study.threshold_quantile;
    out["basis_a"] = cfg.pipeline.basis.a;
    out["basis_b"] = cfg.pipeline.basis.b;
    out["quad_nodes_per_axis"] = cfg.pipeline.quad.nodes_per_axis;
    out["mask"] = {{"eta", r.mask.eta}, {"aniso", r.mask.aniso}};

    json params;
    params["names"] = aggext::param_names(ka, kb);
    params["estimate"] = std::vector<double>(est.data(), est.data() + est.size());
    if (r.censored.jackknife_sd.size() == est.size())
        params["jackknife_sd"] = std::vector<double>(
            r.censored.jackknife_sd.data(), r.censored.jackknife_sd.data() + est.size());
    else
        params["jackknife_sd"] = nullptr;
    out["params"] = params;

    if (r.jackknife.n_used > 0) {
        json jk;
        jk["n_used"] = r.jackknife.n_used;
        jk["n_failed"] = r.jackknife.n_failed;
        std::vector<std::vector<double>> cov;
        for (Eigen::Index i = 0; i < r.jackknife.cov.rows(); ++i)
            cov.emplace_back(r.jackknife.cov.row(i).data(),
                             r.jackknife.cov.row(i).data() + r.jackknife.cov.cols());
        jk["cov"] = cov;
        out["jackknife"] = jk;
    } else {
        out["jackknife"] = nullptr;
    }
    return out;
}

struct LoadedFit {
    aggext::BasisSpec basis;
    aggext::QuadratureRule quad;
    double t = 0.0;
    Eigen::VectorXd flat;
    aggext::JackknifeResult jackknife;
    bool converged = false;
    double objective = 0.0;
};

LoadedFit load_fit(const std::string& path) {
    const json j = load_json_file(path);
    LoadedFit f;
    f.basis.a = get_or<std::vector<std::string>>(j, "basis_a", {"const"});
    f.basis.b = get_or<std::vector<std::string>>(j, "basis_b", {"const"});
    f.quad.nodes_per_axis = get_or<int>(j, "quad_nodes_per_axis", 12);
    f.t = get_or<double>(j, "t", 0.0);
    f.converged = get_or<bool>(j, "converged", false);
    f.objective = get_or<double>(j, "objective", 0.0);
    if (!j.contains("params") || !j.at("params").contains("estimate"))
        throw aggext::data_error("'" + path + "' has no parameter estimates");
    const auto est = j.at("params").at("estimate").get<std::vector<double>>();
    f.flat = Eigen::Map<const Eigen::VectorXd>(est.data(), static_cast<long>(est.size()));
    if (j.contains("jackknife") && j.at("jackknife").is_object()) {
        const json& jk = j.at("jackknife");
        f.jackknife.n_used = get_or<int>(jk, "n_used", 0);
        f.jackknife.n_failed = get_or<int>(jk, "n_failed", 0);
        const auto cov = jk.at("cov").get<std::vector<std::vector<double>>>();
        const long d = static_cast<long>(cov.size());
        f.jackknife.cov.resize(d, d);
        for (long i = 0; i < d; ++i) {
            if (static_cast<long>(cov[static_cast<std::size_t>(i)].size()) != d)
                throw aggext::data_error("'" + path + "': jackknife covariance is not square");
            for (long k = 0; k < d; ++k)
                f.jackknife.cov(i, k) = cov[static_cast<std::size_t>(i)][static_cast<std::size_t>(k)];
        }
        f.jackknife.sd = f.jackknife.cov.diagonal().cwiseSqrt();
    }
    return f;
}

// Rebuild the fitted model against a dataset: scheme from the stored basis
// names, parameters from the stored flat vector.
struct RebuiltFit {
    aggext::AggregationScheme scheme;
    aggext::ModelParams params;
    aggext::PipelineResult as_pipeline;  // the subset diagnostics consumes
};

RebuiltFit rebuild_fit(const LoadedFit& f, const aggext::AggDataset& ds) {
    RebuiltFit r;
    r.scheme = aggext::build_scheme(ds, f.basis, f.quad);
    r.params = aggext::unflatten_params(f.flat, r.scheme);
    r.params.validate();
    r.as_pipeline.scheme = r.scheme;
    r.as_pipeline.censored.params = r.params;
    r.as_pipeline.censored.converged = f.converged;
    r.as_pipeline.censored.objective = f.objective;
    r.as_pipeline.jackknife = f.jackknife;
    r.as_pipeline.t = f.t;
    return r;
}

std::string fit_json_path(const AppConfig& cfg) {
    const std::string explicit_path = get_or<std::string>(cfg.root, "fit_json", "");
    if (!explicit_path.empty()) return explicit_path;
    return (std::filesystem::path(cfg.outdir) / "fit.json").string();
}

// ---------------------------------------------------------------------------
// Verbs
// ---------------------------------------------------------------------------

int verb_ingest_check(const AppConfig& cfg) {
    const aggext::IngestResult res = run_ingest(cfg);
    std::cout << res.report.summary();
    std::cout << "cells: " << res.data.L() << "  rows: " << res.data.n() << "  span: "
              << res.data.dates.front().str() << " .. " << res.data.dates.back().str() << "\n";
    return 0;
}

int verb_fit(const AppConfig& cfg) {
    const aggext::IngestResult res = run_ingest(cfg);
    const aggext::PipelineResult fit = aggext::pipeline_fit(res.data, cfg.study, cfg.pipeline);
    const std::string report = aggext::fit_report(fit);
    write_text_file(out_path(cfg, "fit.json"), fit_to_json(fit, cfg).dump(2) + "\n");
    write_text_file(out_path(cfg, "fit_report.txt"), report);
    std::cout << report;
    if (!fit.censored.converged)
        std::cerr << "warning: censored fit did not converge; treat estimates with caution\n";
    return 0;
}

int verb_return_levels(const AppConfig& cfg) {
    const aggext::IngestResult res = run_ingest(cfg);
    const LoadedFit lf = load_fit(fit_json_path(cfg));
    const RebuiltFit rf = rebuild_fit(lf, res.data);

    const json rl = cfg.root.value("return_levels", json::object());
    const auto periods = get_or<std::vector<double>>(rl, "periods_years", {2, 10, 50, 100});
    const double opy = get_or<double>(rl, "obs_per_year", 62.0);

    std::vector<aggext::Point> pts;
    if (rl.contains("points")) {
        for (const auto& p : rl.at("points")) {
            if (!p.is_array() || p.size() != 2)
                throw aggext::config_error("return_levels.points entries must be [x, y]");
            pts.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
        }
    } else {
        // Regular grid over the bounding box of the cells.
        const int nx = get_or<int>(rl, "grid_nx", 50);
        const int ny = get_or<int>(rl, "grid_ny", 50);
        if (nx < 2 || ny < 2) throw aggext::config_error("return_levels grid must be >= 2x2");
        double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
        for (const aggext::Region& r : res.data.cell_regions) {
            x0 = std::min(x0, r.xmin);
            x1 = std::max(x1, r.xmax);
            y0 = std::min(y0, r.ymin);
            y1 = std::max(y1, r.ymax);
        }
        for (int i = 0; i < nx; ++i)
            for (int k = 0; k < ny; ++k)
                pts.push_back({x0 + (x1 - x0) * i / (nx - 1.0),
                               y0 + (y1 - y0) * k / (ny - 1.0)});
    }

    const Eigen::MatrixXd levels =
        aggext::return_levels(rf.params, rf.scheme, pts, periods, lf.t, opy);
    std::string csv = "x,y,period_years,level\n";
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (std::size_t k = 0; k < periods.size(); ++k)
            csv += fmt(pts[i].x) + "," + fmt(pts[i].y) + "," + fmt(periods[k]) + "," +
                   fmt(levels(static_cast<long>(i), static_cast<long>(k))) + "\n";
    const std::string path = out_path(cfg, "return_levels.csv");
    write_text_file(path, csv);
    std::cout << "wrote " << path << " (" << pts.size() << " points x " << periods.size()
              << " periods)\n";
    return 0;
}

// Downscaling targets: explicit config points, else the geometry's stations.
std::vector<aggext::Point> target_points(const json& sim, const aggext::AggDataset& ds) {
    std::vector<aggext::Point> pts;
    if (sim.contains("points")) {
        for (const auto& p : sim.at("points")) {
            if (!p.is_array() || p.size() != 2)
                throw aggext::config_error("simulate.points entries must be [x, y]");
            pts.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
        }
    } else {
        pts = ds.station_locations;
    }
    if (pts.empty())
        throw aggext::config_error(
            "simulate: no target points (give simulate.points or geometry stations)");
    return pts;
}

std::string simulation_csv(const std::vector<aggext::ConditionalDraw>& draws,
                           const aggext::AggDataset& ds,
                           const std::vector<aggext::Point>& pts,
                           const aggext::AggregationScheme& scheme) {
    std::string csv = "draw,type,label,x,y,value\n";
    const int L = ds.L();
    for (std::size_t d = 0; d < draws.size(); ++d) {
        const aggext::ConditionalDraw& ev = draws[d];
        for (int j = 0; j < L; ++j) {
            const aggext::Point c = scheme.functionals[static_cast<std::size_t>(j)].region.centroid();
            csv += std::to_string(d) + ",aggregate," + ds.cell_ids[static_cast<std::size_t>(j)] +
                   "," + fmt(c.x) + "," + fmt(c.y) + "," + fmt(ev.aggregates[j]) + "\n";
        }
        for (std::size_t k = 0; k < pts.size(); ++k)
            csv += std::to_string(d) + ",point,p" + std::to_string(k) + "," + fmt(pts[k].x) +
                   "," + fmt(pts[k].y) + "," + fmt(ev.point_values[static_cast<long>(k)]) + "\n";
    }
    return csv;
}

int verb_simulate(const AppConfig& cfg, bool conditional) {
    const aggext::IngestResult res = run_ingest(cfg);
    const aggext::AggDataset& ds = res.data;
    const LoadedFit lf = load_fit(fit_json_path(cfg));
    const RebuiltFit rf = rebuild_fit(lf, ds);

    const json sim = cfg.root.value("simulate", json::object());
    const long n_draws = get_or<long>(sim, "n_draws", 100);
    const std::uint64_t seed = get_or<std::uint64_t>(sim, "seed", 0xa99e57ULL);
    const std::vector<aggext::Point> pts = target_points(sim, ds);

    aggext::AggregationScheme scheme = rf.scheme;
    for (const aggext::Point& p : pts)
        scheme.functionals.push_back(aggext::Functional::point_eval(p));
    scheme.validate();
    const aggext::ModelEngine engine(scheme);

    if (!conditional) {
        const aggext::SimulationBatch batch =
            aggext::unconditional_extreme_simulate(rf.params, engine, lf.t, n_draws, seed);
        const std::string path = out_path(cfg, "sim_unconditional.csv");
        write_text_file(path, simulation_csv(batch.events, ds, pts, rf.scheme));
        std::cout << "wrote " << path << " (" << batch.events.size() << " events, acceptance "
                  << batch.acceptance_rate << ")\n";
        if (batch.low_acceptance)
            std::cerr << "warning: low acceptance rate; the fitted tail is very dependent\n";
        return 0;
    }

    // Conditioning event: a configured date, else the strongest declustered
    // event; conditioning cell: configured id, else the largest normalized
    // exceedance within that event under the fitted margins.
    const aggext::DeclusterResult events = aggext::decluster(
        ds.obs, ds.dates, cfg.study.threshold_quantile, cfg.study.gap_days);
    if (events.event_rows.empty()) throw aggext::data_error("simulate: no exceedance events");
    long row = events.event_rows.front();
    double best = -std::numeric_limits<double>::infinity();
    for (long r : events.event_rows)
        if (events.scores[r] > best) {
            best = events.scores[r];
            row = r;
        }
    const std::string want_date = get_or<std::string>(sim, "event_date", "");
    if (!want_date.empty()) {
        const aggext::Date d = aggext::parse_date(want_date);
        bool found = false;
        for (long r : events.event_rows)
            if (ds.dates[static_cast<std::size_t>(r)] == d) {
                row = r;
                found = true;
                break;
            }
        if (!found)
            throw aggext::config_error("simulate.event_date '" + want_date +
                                       "' is not a declustered event");
    }

    const Eigen::VectorXd y = ds.obs.row(row).transpose();
    int cond_j = -1;
    const std::string want_cell = get_or<std::string>(sim, "conditional_cell", "");
    if (!want_cell.empty()) {
        for (int j = 0; j < ds.L(); ++j)
            if (ds.cell_ids[static_cast<std::size_t>(j)] == want_cell) cond_j = j;
        if (cond_j < 0)
            throw aggext::config_error("simulate.conditional_cell '" + want_cell + "' not found");
    } else {
        const aggext::ModelEngine::Eval ev = engine.evaluate(rf.params, false);
        double top = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < ds.L(); ++j) {
            const double z = (y[j] - ev.mu[j]) / ev.sigma[j];
            if (z > top) {
                top = z;
                cond_j = j;
            }
        }
    }

    const std::vector<aggext::ConditionalDraw> draws =
        aggext::conditional_simulate(rf.params, engine, y, cond_j, lf.t, n_draws, seed);
    const std::string path = out_path(cfg, "sim_conditional.csv");
    write_text_file(path, simulation_csv(draws, ds, pts, rf.scheme));
    std::cout << "wrote " << path << " (" << draws.size() << " draws conditioned on cell '"
              << ds.cell_ids[static_cast<std::size_t>(cond_j)] << "', "
              << ds.dates[static_cast<std::size_t>(row)].str() << ")\n";
    return 0;
}

int verb_diagnostics(const AppConfig& cfg) {
    const aggext::IngestResult res = run_ingest(cfg);
    const LoadedFit lf = load_fit(fit_json_path(cfg));
    const RebuiltFit rf = rebuild_fit(lf, res.data);

    const json dg = cfg.root.value("diagnostics", json::object());
    aggext::DiagnosticsOptions opt;
    opt.quantile = get_or<double>(dg, "quantile", 0.98);
    opt.n_boot = get_or<int>(dg, "n_boot", 500);
    opt.seed = get_or<std::uint64_t>(dg, "seed", opt.seed);

    const aggext::DiagnosticsResult d = aggext::diagnostics(res.data, rf.as_pipeline, opt);

    std::string qq = "cell,cell_id,p,empirical,model,lo,hi\n";
    for (const aggext::QqRow& r : d.qq)
        qq += std::to_string(r.cell) + "," +
              res.data.cell_ids[static_cast<std::size_t>(r.cell)] + "," + fmt(r.p) + "," +
              fmt(r.empirical) + "," + fmt(r.model) + "," + fmt(r.lo) + "," + fmt(r.hi) + "\n";
    const std::string qq_path = out_path(cfg, "qq.csv");
    write_text_file(qq_path, qq);

    std::string xg = "cell_j,cell_k,distance,direction,empirical,theoretical,n_cond\n";
    for (const aggext::ExtremogramRow& r : d.extremogram)
        xg += res.data.cell_ids[static_cast<std::size_t>(r.cell_j)] + "," +
              res.data.cell_ids[static_cast<std::size_t>(r.cell_k)] + "," + fmt(r.distance) +
              "," + fmt(r.direction) + "," + fmt(r.empirical) + "," + fmt(r.theoretical) + "," +
              std::to_string(r.n_cond) + "\n";
    const std::string xg_path = out_path(cfg, "extremogram.csv");
    write_text_file(xg_path, xg);

    std::cout << "wrote " << qq_path << " (" << d.qq.size() << " rows) and " << xg_path << " ("
              << d.extremogram.size() << " pairs)\n";
    return 0;
}

int verb_simstudy(const AppConfig& cfg) {
    const json ss = cfg.root.value("simstudy", json::object());
    aggext::SimStudyConfig sim;
    sim.reps = get_or<int>(ss, "reps", sim.reps);
    sim.n = get_or<long>(ss, "n", sim.n);
    sim.grid_side = get_or<int>(ss, "grid_side", sim.grid_side);
    sim.bm_block = get_or<int>(ss, "bm_block", sim.bm_block);
    sim.n_exceed = get_or<long>(ss, "n_exceed", sim.n_exceed);
    sim.seed = get_or<std::uint64_t>(ss, "seed", sim.seed);
    sim.verbose = get_or<bool>(ss, "verbose", false);
    sim.ls.restarts = get_or<int>(ss, "ls_restarts", sim.ls.restarts);
    sim.ls.nm.max_iter = get_or<long>(ss, "ls_max_iter", sim.ls.nm.max_iter);
    sim.ls.nm.tol = get_or<double>(ss, "ls_tol", sim.ls.nm.tol);
    sim.cens.restarts = get_or<int>(ss, "censored_restarts", sim.cens.restarts);
    sim.cens.nm.max_iter = get_or<long>(ss, "censored_max_iter", sim.cens.nm.max_iter);
    sim.cens.nm.tol = get_or<double>(ss, "censored_tol", sim.cens.nm.tol);

    const aggext::SimStudyResult r = aggext::simstudy(sim);
    const std::string csv = r.table_csv();
    const std::string path = out_path(cfg, "simstudy.csv");
    write_text_file(path, csv);
    std::cout << csv;
    std::cout << "replicates: " << r.reps_requested << "  censored used/failed: "
              << r.used_censored << "/" << r.failed_censored << "  least-squares used/failed: "
              << r.used_ls << "/" << r.failed_ls << "\n";
    std::cout << "wrote " << path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"aggext: spatial extremes of aggregated data — fit, downscale, simulate"};
    app.require_subcommand(1);

    std::string config_path;
    int workers = 1;
    app.add_option("--workers", workers, "parallelism cap (this build computes serially)")
        ->check(CLI::PositiveNumber);

    const auto add_verb = [&](const char* name, const char* desc) {
        CLI::App* sub = app.add_subcommand(name, desc);
        sub->add_option("--config", config_path, "JSON configuration file")
            ->required()
            ->check(CLI::ExistingFile);
        return sub;
    };

    CLI::App* v_ingest = add_verb("ingest-check", "parse and validate the input data");
    CLI::App* v_fit = add_verb("fit", "run the full fitting pipeline");
    CLI::App* v_rl = add_verb("return-levels", "downscaled point return-level maps");
    CLI::App* v_sim = add_verb("simulate", "simulate extreme events at target points");
    bool sim_conditional = false, sim_unconditional = false;
    v_sim->add_flag("--conditional", sim_conditional, "condition on an observed event");
    v_sim->add_flag("--unconditional", sim_unconditional, "draw unconditional extreme events");
    CLI::App* v_diag = add_verb("diagnostics", "QQ tables and pairwise extremograms");
    CLI::App* v_study = add_verb("simstudy", "synthetic recovery study (censored vs LS)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (v_ingest->parsed()) return verb_ingest_check(parse_config(config_path));
        if (v_fit->parsed()) return verb_fit(parse_config(config_path));
        if (v_rl->parsed()) return verb_return_levels(parse_config(config_path));
        if (v_sim->parsed()) {
            if (sim_conditional == sim_unconditional)
                throw aggext::config_error(
                    "simulate needs exactly one of --conditional / --unconditional");
            return verb_simulate(parse_config(config_path), sim_conditional);
        }
        if (v_diag->parsed()) return verb_diagnostics(parse_config(config_path));
        if (v_study->parsed()) return verb_simstudy(parse_config(config_path));
    } catch (const aggext::error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
