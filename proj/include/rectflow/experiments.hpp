#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rectflow/asymptotics.hpp"
#include "rectflow/closedform.hpp"
#include "rectflow/core.hpp"
#include "rectflow/csvio.hpp"
#include "rectflow/errors.hpp"
#include "rectflow/estimators.hpp"
#include "rectflow/flow.hpp"
#include "rectflow/kde.hpp"
#include "rectflow/parallel.hpp"
#include "rectflow/svg.hpp"

namespace rectflow::experiments {

using nlohmann::json;

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

/// Fully resolved experiment configuration: defaults overlaid with user
/// overrides; unknown keys are rejected.
struct ResolvedConfig {
    std::string experiment;
    json values;

    double num(const std::string& key) const { return values.at(key).get<double>(); }
    std::int64_t integer(const std::string& key) const {
        return values.at(key).get<std::int64_t>();
    }
    std::string str(const std::string& key) const {
        return values.at(key).get<std::string>();
    }
    std::vector<double> list(const std::string& key) const {
        return values.at(key).get<std::vector<double>>();
    }
    std::uint64_t seed() const { return values.at("seed").get<std::uint64_t>(); }

    std::uint64_t hash() const { return fnv1a64(experiment + "|" + values.dump()); }
};

inline const std::map<std::string, json>& experiment_defaults() {
    static const std::map<std::string, json> defaults = {
        {"fig1_velocity_paths",
         {{"seed", 7}, {"T", 200}, {"t_points", 201}}},
        {"fig2_mixture_paths",
         {{"seed", 7}, {"T", 200}, {"starts_min", -3.0}, {"starts_max", 3.0},
          {"n_starts", 13}}},
        {"fig3_trajectories_1d",
         {{"seed", 7}, {"n", 200}, {"M", 1000}, {"T", 100},
          {"bandwidths", json::array({0.1, 0.3, 1.0})},
          {"starts", json::array({-2.0, -1.0, -0.5, 0.5, 1.0, 2.0})}}},
        {"fig4_identity_d50",
         {{"seed", 29}, {"n", 100}, {"d", 50}, {"T", 50}, {"h", 1.0},
          {"grid_points", 41}, {"block", 6}}},
        {"clt_1d",
         {{"seed", 7}, {"n", 2000}, {"M", 200}, {"h", 0.0}, {"x", 0.0}, {"T", 200},
          {"estimator", "reg2"}}},
        {"estimator_bench",
         {{"seed", 7}, {"ns", json::array({500, 2000, 8000})}, {"seeds", 10},
          {"t_grid", json::array({0.35, 0.65})},
          {"z_grid", json::array({-0.5, 0.5})}}},
        {"boundary_kde_bench",
         {{"seed", 7}, {"n", 100000}, {"h", 0.05}, {"m", 1}, {"z", 0.0}}},
    };
    return defaults;
}

inline ResolvedConfig resolve_config(const std::string& experiment, const json& overrides) {
    const auto& all = experiment_defaults();
    auto it = all.find(experiment);
    if (it == all.end()) throw ParameterError("unknown experiment: " + experiment);
    ResolvedConfig cfg;
    cfg.experiment = experiment;
    cfg.values = it->second;
    for (const auto& [key, value] : overrides.items()) {
        if (!cfg.values.contains(key))
            throw ParameterError("unknown config key '" + key + "' for " + experiment);
        cfg.values[key] = value;
    }
    return cfg;
}

struct RunOutput {
    std::filesystem::path dir;
    std::vector<std::pair<std::string, std::size_t>> files;  // name, row count
    std::vector<std::string> warnings;
    bool checks_passed = true;
};

namespace detail {

struct Emitter {
    std::filesystem::path dir;
    RunOutput* out;

    io::CsvWriter csv(const std::string& name, const std::vector<std::string>& header) {
        out->files.emplace_back(name, 0);
        return io::CsvWriter(dir / name, header);
    }
    void done(const std::string& name, const io::CsvWriter& w) {
        for (auto& f : out->files)
            if (f.first == name) f.second = w.rows();
    }
    void file(const std::string& name, std::size_t rows = 0) {
        out->files.emplace_back(name, rows);
    }
};

inline GaussianParams standard_1d() { return GaussianParams::scalar(0.0, 1.0, 0.0, 1.0); }

inline MixtureParams figure_mixture() {
    MixtureHalf half;
    half.weights.resize(2);
    half.weights << 0.5, 0.5;
    Vec plus(1), minus(1);
    plus << 1.0;
    minus << -1.0;
    half.components = {{plus, SquareMat::Identity(1, 1)},
                       {minus, SquareMat::Identity(1, 1)}};
    return MixtureParams(half, half);
}

}  // namespace detail

// ---- figure reproductions -------------------------------------------------------

inline void run_fig1(const ResolvedConfig& cfg, detail::Emitter& em) {
    const int T = static_cast<int>(cfg.integer("T"));
    const int t_points = static_cast<int>(cfg.integer("t_points"));
    const auto widening = GaussianParams::scalar(0.0, 1.0, 0.0, 9.0);

    auto velocity = em.csv("velocity.csv", {"z", "t", "v"});
    std::vector<io::Series> vel_series;
    for (double z : {1.0, 0.5, 0.25}) {
        io::Series s;
        s.color = z == 1.0 ? "#000000" : (z == 0.5 ? "#d62728" : "#1f77b4");
        s.dashed = z == 0.25;
        Vec zv(1);
        zv << z;
        for (int i = 0; i < t_points; ++i) {
            const double t = static_cast<double>(i) / (t_points - 1);
            const double v = closedform::gaussian_velocity(t, zv, widening)[0];
            velocity.row({z, t, v});
            s.x.push_back(t);
            s.y.push_back(v);
        }
        vel_series.push_back(std::move(s));
    }
    em.done("velocity.csv", velocity);

    auto paths = em.csv("paths.csv", {"x", "t", "z"});
    const auto field = closedform::gaussian_velocity_field(detail::standard_1d());
    std::vector<io::Series> path_series;
    for (double x : {-2.0, -1.5, -1.0, -0.5, 0.5, 1.0, 1.5, 2.0}) {
        Vec xv(1);
        xv << x;
        const auto traj = flow::integrate_flow(field, xv, {flow::Method::rk4, T});
        io::Series s;
        s.color = "#2ca02c";
        for (Eigen::Index i = 0; i < traj.size(); ++i) {
            paths.row({x, traj.times[i], traj.states(i, 0)});
            s.x.push_back(traj.times[i]);
            s.y.push_back(traj.states(i, 0));
        }
        path_series.push_back(std::move(s));
    }
    em.done("paths.csv", paths);
    io::write_svg_panels(em.dir / "plot.svg", {vel_series, path_series}, 2);
    em.file("plot.svg");
}

inline void run_fig2(const ResolvedConfig& cfg, detail::Emitter& em) {
    const int T = static_cast<int>(cfg.integer("T"));
    const int n_starts = static_cast<int>(cfg.integer("n_starts"));
    const double lo = cfg.num("starts_min"), hi = cfg.num("starts_max");
    if (std::abs(lo) > 10.0 || std::abs(hi) > 10.0)
        throw FarFieldError("fig2: start points beyond +-10");
    const auto field = closedform::mixture_velocity_field(detail::figure_mixture());

    auto starts_csv = em.csv("starts.csv", {"start_index", "x"});
    std::vector<Trajectory> trajectories;
    std::vector<std::pair<std::int64_t, std::int64_t>> ids;
    std::vector<io::Series> fan;
    for (int k = 0; k < n_starts; ++k) {
        const double x = n_starts == 1 ? lo : lo + (hi - lo) * k / (n_starts - 1);
        starts_csv.row({static_cast<std::int64_t>(k), x});
        Vec xv(1);
        xv << x;
        auto traj = flow::integrate_flow(field, xv, {flow::Method::rk4, T});
        io::Series s;
        s.color = "#1f77b4";
        for (Eigen::Index i = 0; i < traj.size(); ++i) {
            s.x.push_back(traj.times[i]);
            s.y.push_back(traj.states(i, 0));
        }
        fan.push_back(std::move(s));
        trajectories.push_back(std::move(traj));
        ids.emplace_back(0, k);
    }
    em.done("starts.csv", starts_csv);
    em.file("trajectories.csv",
            flow::write_trajectory_csv(em.dir / "trajectories.csv", trajectories, ids));
    io::write_svg_panels(em.dir / "plot.svg", {fan}, 1);
    em.file("plot.svg");
}

inline void run_fig3(const ResolvedConfig& cfg, detail::Emitter& em, int workers) {
    const int n = static_cast<int>(cfg.integer("n"));
    const int M = static_cast<int>(cfg.integer("M"));
    const int T = static_cast<int>(cfg.integer("T"));
    const auto bandwidths = cfg.list("bandwidths");
    const auto starts = cfg.list("starts");
    const std::uint64_t seed = cfg.seed();
    const auto p = detail::standard_1d();

    // states[r] is a (bw, start) x (T+1) stack for replicate r
    const std::size_t curves = bandwidths.size() * starts.size();
    std::vector<Mat> states(static_cast<std::size_t>(M));
    parallel_for(
        M,
        [&](int r) {
            const auto x0 = sample_gaussian(p.m0, p.S0, n,
                                            RngSpec{seed, 2ULL * static_cast<std::uint64_t>(r)},
                                            SampleLabel::source);
            const auto x1 = sample_gaussian(
                p.m1, p.S1, n, RngSpec{seed, 2ULL * static_cast<std::uint64_t>(r) + 1},
                SampleLabel::target);
            Mat rows(static_cast<Eigen::Index>(curves), T + 1);
            for (std::size_t b = 0; b < bandwidths.size(); ++b) {
                estimators::EstimatorConfig ecfg;
                ecfg.h = bandwidths[b];
                const auto field = estimators::reg2_velocity_field(
                    estimators::PairedData(x0, x1, estimators::Pairing::index_paired), ecfg);
                for (std::size_t s = 0; s < starts.size(); ++s) {
                    Vec xv(1);
                    xv << starts[s];
                    const auto traj =
                        flow::integrate_flow(field, xv, {flow::Method::rk4, T});
                    rows.row(static_cast<Eigen::Index>(b * starts.size() + s)) =
                        traj.states.col(0).transpose();
                }
            }
            states[static_cast<std::size_t>(r)] = std::move(rows);
        },
        workers);

    auto truth = em.csv("truth.csv", {"start", "t", "z"});
    for (double x : starts)
        for (int i = 0; i <= T; ++i) {
            const double t = static_cast<double>(i) / T;
            truth.row({x, t, x * std::sqrt(t * t + (1.0 - t) * (1.0 - t))});
        }
    em.done("truth.csv", truth);

    auto traj_csv = em.csv("trajectories.csv", {"bandwidth", "start", "t", "z_mean", "z_sample"});
    auto bands = em.csv("bands.csv", {"bandwidth", "start", "t", "lo", "hi"});
    std::vector<std::vector<io::Series>> panels(bandwidths.size());
    std::vector<double> replicate_values(static_cast<std::size_t>(M));
    for (std::size_t b = 0; b < bandwidths.size(); ++b) {
        for (std::size_t s = 0; s < starts.size(); ++s) {
            const auto row = static_cast<Eigen::Index>(b * starts.size() + s);
            io::Series mean_s, lo_s, hi_s, truth_s;
            mean_s.color = "#d62728";
            lo_s.color = hi_s.color = "#ff9896";
            lo_s.width = hi_s.width = 0.8;
            truth_s.color = "#000000";
            for (int i = 0; i <= T; ++i) {
                const double t = static_cast<double>(i) / T;
                double mean = 0.0;
                for (int r = 0; r < M; ++r) {
                    replicate_values[static_cast<std::size_t>(r)] =
                        states[static_cast<std::size_t>(r)](row, i);
                    mean += replicate_values[static_cast<std::size_t>(r)];
                }
                mean /= M;
                std::sort(replicate_values.begin(), replicate_values.end());
                const auto qlo = static_cast<std::size_t>(std::floor(0.025 * (M - 1)));
                const auto qhi = static_cast<std::size_t>(std::ceil(0.975 * (M - 1)));
                traj_csv.row({bandwidths[b], starts[s], t, mean, states[0](row, i)});
                bands.row({bandwidths[b], starts[s], t, replicate_values[qlo],
                           replicate_values[qhi]});
                mean_s.x.push_back(t);
                mean_s.y.push_back(mean);
                lo_s.x.push_back(t);
                lo_s.y.push_back(replicate_values[qlo]);
                hi_s.x.push_back(t);
                hi_s.y.push_back(replicate_values[qhi]);
                truth_s.x.push_back(t);
                truth_s.y.push_back(starts[s] *
                                    std::sqrt(t * t + (1.0 - t) * (1.0 - t)));
            }
            panels[b].push_back(truth_s);
            panels[b].push_back(lo_s);
            panels[b].push_back(hi_s);
            panels[b].push_back(mean_s);
        }
    }
    em.done("trajectories.csv", traj_csv);
    em.done("bands.csv", bands);
    io::write_svg_panels(em.dir / "plot.svg", panels, static_cast<int>(bandwidths.size()));
    em.file("plot.svg");
}

/// The four fitted transport maps of the d = 50 identity experiment, kept in
/// memory so the acceptance suite can score them without re-parsing CSVs.
struct Fig4Result {
    closedform::AffineMap plugin;
    estimators::LinearVelocityField linear;
    estimators::LinearVelocityField lasso;
    Mat curves;  // estimator-major stack of curve values, one row per (est, i, j)
    std::vector<double> xs;
    int block = 6;
    std::vector<std::string> estimator_names;
    std::vector<std::string> warnings;
};

inline Fig4Result fig4_core(const ResolvedConfig& cfg) {
    const int n = static_cast<int>(cfg.integer("n"));
    const int d = static_cast<int>(cfg.integer("d"));
    const int T = static_cast<int>(cfg.integer("T"));
    const double h = cfg.num("h");
    const int grid_points = static_cast<int>(cfg.integer("grid_points"));
    const int block = static_cast<int>(cfg.integer("block"));
    const std::uint64_t seed = cfg.seed();

    const Vec zero = Vec::Zero(d);
    const SquareMat eye = SquareMat::Identity(d, d);
    const auto x0 = sample_gaussian(zero, eye, n, RngSpec{seed, 0}, SampleLabel::source);
    const auto x1 = sample_gaussian(zero, eye, n, RngSpec{seed, 1}, SampleLabel::target);
    const estimators::PairedData data(x0, x1, estimators::Pairing::index_paired);

    Fig4Result res;
    res.block = block;
    res.estimator_names = {"plugin", "linear", "lasso", "reg2"};

    const auto mom0 = empirical_moments(x0);
    const auto mom1 = empirical_moments(x1);
    res.plugin = closedform::gaussian_rectified_map(
        GaussianParams(mom0.mean, mom0.cov, mom1.mean, mom1.cov));

    std::vector<double> t_grid(static_cast<std::size_t>(T));
    for (int k = 0; k < T; ++k) t_grid[static_cast<std::size_t>(k)] = static_cast<double>(k) / T;
    res.linear = estimators::fit_linear_velocity(data, t_grid);
    estimators::Penalty l1;
    l1.kind = estimators::PenaltyKind::l1_cv;
    res.lasso = estimators::fit_linear_velocity(data, t_grid, l1);
    for (const auto& m : res.lasso.models)
        if (!m.converged)
            res.warnings.push_back("lasso coordinate descent hit the sweep cap at t = " +
                                   io::format_double(m.t) + "; kept the smallest-objective fit");

    estimators::EstimatorConfig rcfg;
    rcfg.h = h;
    const auto reg2_field = estimators::reg2_velocity_field(data, rcfg);
    const auto linear_field = res.linear.field();
    const auto lasso_field = res.lasso.field();

    res.xs.resize(static_cast<std::size_t>(grid_points));
    for (int g = 0; g < grid_points; ++g)
        res.xs[static_cast<std::size_t>(g)] = -3.0 + 6.0 * g / (grid_points - 1);

    const flow::IntegratorSpec spec{flow::Method::euler, T};
    res.curves.resize(4 * block * block, grid_points);
    for (int e = 0; e < 4; ++e) {
        for (int j = 0; j < block; ++j) {
            for (int g = 0; g < grid_points; ++g) {
                Vec start = Vec::Zero(d);
                start[j] = res.xs[static_cast<std::size_t>(g)];
                Vec endpoint;
                if (e == 0) {
                    endpoint = res.plugin(start);
                } else {
                    const VelocityField& f =
                        e == 1 ? linear_field : (e == 2 ? lasso_field : reg2_field);
                    endpoint = flow::integrate_flow(f, start, spec).endpoint();
                }
                for (int i = 0; i < block; ++i)
                    res.curves((e * block + i) * block + j, g) = endpoint[i];
            }
        }
    }
    return res;
}

inline void run_fig4(const ResolvedConfig& cfg, detail::Emitter& em) {
    const auto res = fig4_core(cfg);
    const int block = res.block;

    auto curves = em.csv("curves.csv", {"estimator", "i", "j", "x", "value"});
    for (int e = 0; e < 4; ++e)
        for (int i = 0; i < block; ++i)
            for (int j = 0; j < block; ++j)
                for (std::size_t g = 0; g < res.xs.size(); ++g)
                    curves.row({res.estimator_names[static_cast<std::size_t>(e)],
                                static_cast<std::int64_t>(i + 1),
                                static_cast<std::int64_t>(j + 1), res.xs[g],
                                res.curves((e * block + i) * block + j,
                                           static_cast<Eigen::Index>(g))});
    em.done("curves.csv", curves);

    auto coeffs = em.csv("coeffs.csv", {"estimator", "t", "i", "j", "value"});
    for (const auto* fitted : {&res.linear, &res.lasso}) {
        const std::string name = fitted == &res.linear ? "linear" : "lasso";
        for (const auto& model : fitted->models)
            for (int i = 0; i < fitted->dim; ++i)
                for (int j = 0; j < fitted->dim; ++j)
                    coeffs.row({name, model.t, static_cast<std::int64_t>(i + 1),
                                static_cast<std::int64_t>(j + 1), model.slope(i, j)});
    }
    em.done("coeffs.csv", coeffs);

    const std::vector<std::string> colors = {"#9467bd", "#ff7f0e", "#1f77b4", "#2ca02c"};
    std::vector<std::vector<io::Series>> panels(static_cast<std::size_t>(block * block));
    for (int i = 0; i < block; ++i)
        for (int j = 0; j < block; ++j) {
            auto& panel = panels[static_cast<std::size_t>(i * block + j)];
            io::Series truth;
            truth.color = "#000000";
            truth.dashed = true;
            for (double x : res.xs) {
                truth.x.push_back(x);
                truth.y.push_back(i == j ? x : 0.0);
            }
            panel.push_back(std::move(truth));
            for (int e = 0; e < 4; ++e) {
                io::Series s;
                s.color = colors[static_cast<std::size_t>(e)];
                for (std::size_t g = 0; g < res.xs.size(); ++g) {
                    s.x.push_back(res.xs[g]);
                    s.y.push_back(res.curves((e * block + i) * block + j,
                                             static_cast<Eigen::Index>(g)));
                }
                panel.push_back(std::move(s));
            }
        }
    io::write_svg_panels(em.dir / "plot.svg", panels, block);
    em.file("plot.svg");
    for (const auto& w : res.warnings) em.out->warnings.push_back(w);
}

// ---- benchmark drivers ------------------------------------------------------------

inline void run_clt(const ResolvedConfig& cfg, detail::Emitter& em, int workers) {
    const int n = static_cast<int>(cfg.integer("n"));
    const int M = static_cast<int>(cfg.integer("M"));
    double h = cfg.num("h");
    if (h <= 0.0) h = std::pow(n, -0.25);
    const double x = cfg.num("x");
    const int T = static_cast<int>(cfg.integer("T"));
    const auto estimator = cfg.str("estimator") == "reg0" ? asymptotics::CltEstimator::reg0
                                                          : asymptotics::CltEstimator::reg2;
    const auto res = asymptotics::clt_experiment(detail::standard_1d(), x, n, h, M, estimator,
                                                 {flow::Method::rk4, T},
                                                 RngSpec{cfg.seed(), 0}, workers);
    auto errors = em.csv("errors.csv", {"replicate", "error"});
    for (std::size_t i = 0; i < res.errors.size(); ++i)
        errors.row({static_cast<std::int64_t>(i), res.errors[i]});
    em.done("errors.csv", errors);

    json summary = {{"n", n},
                    {"h", h},
                    {"M", M},
                    {"scaled_variance", res.scaled_variance},
                    {"sigma_reference", res.reference},
                    {"ratio", res.scaled_variance / res.reference},
                    {"failures", res.failures}};
    std::ofstream(em.dir / "summary.json", std::ios::binary) << summary.dump(2) << "\n";
    em.file("summary.json");
}

struct BenchRow {
    std::string estimator;
    int n = 0;
    double median_rmse = 0.0;
};

/// Grid-RMSE of every velocity estimator against the Gaussian closed form,
/// medianed over seeds; the consistency flag checks decrease across n.
inline std::vector<BenchRow> estimator_bench_core(const ResolvedConfig& cfg, int workers,
                                                  bool* monotone) {
    const auto ns = cfg.list("ns");
    const int seeds = static_cast<int>(cfg.integer("seeds"));
    const auto t_grid = cfg.list("t_grid");
    const auto z_grid = cfg.list("z_grid");
    const std::uint64_t seed0 = cfg.seed();
    const auto p = detail::standard_1d();
    const std::vector<std::string> names = {"reg0", "reg2", "reg3", "den",
                                            "sub3", "sub4", "onestep", "smoothed"};

    // rmse[e][ni][s]
    std::vector<std::vector<std::vector<double>>> rmse(
        names.size(), std::vector<std::vector<double>>(
                          ns.size(), std::vector<double>(static_cast<std::size_t>(seeds))));
    const int jobs = static_cast<int>(ns.size()) * seeds;
    parallel_for(
        jobs,
        [&](int job) {
            const std::size_t ni = static_cast<std::size_t>(job) / seeds;
            const int s = job % seeds;
            const int n = static_cast<int>(ns[ni]);
            const std::uint64_t stream = 2ULL * static_cast<std::uint64_t>(job);
            const auto x0 = sample_gaussian(p.m0, p.S0, n, RngSpec{seed0, stream},
                                            SampleLabel::source);
            const auto x1 = sample_gaussian(p.m1, p.S1, n, RngSpec{seed0, stream + 1},
                                            SampleLabel::target);
            const estimators::PairedData paired(x0, x1, estimators::Pairing::index_paired);
            estimators::EstimatorConfig ecfg;
            ecfg.h = std::pow(n, -0.2);
            const double sigma = std::pow(n, -0.2);
            const auto p0_kde = estimators::make_kde_density(
                std::make_shared<SampleSet>(x0), ecfg.kernel, ecfg.h);
            const auto p1_kde = estimators::make_kde_density(
                std::make_shared<SampleSet>(x1), ecfg.kernel, ecfg.h);

            std::vector<double> acc(names.size(), 0.0);
            int count = 0;
            for (double t : t_grid)
                for (double z : z_grid) {
                    Vec zv(1);
                    zv << z;
                    const double truth = closedform::gaussian_velocity(t, zv, p)[0];
                    const std::vector<double> est = {
                        estimators::v_reg0(t, zv, paired, ecfg)[0],
                        estimators::v_reg2(t, zv, paired, ecfg)[0],
                        estimators::v_reg3(t, zv, paired, ecfg)[0],
                        estimators::v_den(t, zv, p0_kde, p1_kde, ecfg)[0],
                        estimators::v_sub3(t, zv, x0, p1_kde, ecfg)[0],
                        estimators::v_sub4(t, zv, x1, p0_kde, ecfg)[0],
                        estimators::v_onestep(t, zv, paired, ecfg).estimate[0],
                        estimators::v_smoothed(t, zv, paired, sigma)[0]};
                    for (std::size_t e = 0; e < names.size(); ++e)
                        acc[e] += (est[e] - truth) * (est[e] - truth);
                    ++count;
                }
            for (std::size_t e = 0; e < names.size(); ++e)
                rmse[e][ni][static_cast<std::size_t>(s)] = std::sqrt(acc[e] / count);
        },
        workers);

    std::vector<BenchRow> rows;
    if (monotone) *monotone = true;
    for (std::size_t e = 0; e < names.size(); ++e) {
        double prev = std::numeric_limits<double>::infinity();
        for (std::size_t ni = 0; ni < ns.size(); ++ni) {
            auto vals = rmse[e][ni];
            std::nth_element(vals.begin(), vals.begin() + seeds / 2, vals.end());
            const double median = vals[static_cast<std::size_t>(seeds / 2)];
            rows.push_back({names[e], static_cast<int>(ns[ni]), median});
            if (monotone && median >= prev) *monotone = false;
            prev = median;
        }
    }
    return rows;
}

inline void run_estimator_bench(const ResolvedConfig& cfg, detail::Emitter& em, int workers) {
    bool monotone = true;
    const auto rows = estimator_bench_core(cfg, workers, &monotone);
    auto table = em.csv("bench.csv", {"estimator", "n", "median_rmse"});
    for (const auto& r : rows)
        table.row({r.estimator, static_cast<std::int64_t>(r.n), r.median_rmse});
    em.done("bench.csv", table);
    json summary = {{"monotone_in_n", monotone}};
    std::ofstream(em.dir / "summary.json", std::ios::binary) << summary.dump(2) << "\n";
    em.file("summary.json");
    em.out->checks_passed = monotone;
}

inline void run_boundary_kde_bench(const ResolvedConfig& cfg, detail::Emitter& em) {
    const int n = static_cast<int>(cfg.integer("n"));
    const double h = cfg.num("h");
    const int m = static_cast<int>(cfg.integer("m"));
    const double z = cfg.num("z");
    Vec lo(1), hi(1), zv(1);
    lo << 0.0;
    hi << 1.0;
    zv << z;
    const auto body = geometry::ConvexBody::unit_interval();
    const auto samples = sample_uniform_box(lo, hi, n, RngSpec{cfg.seed(), 0});

    const double corrected = kde::boundary_kde_eval(samples, body, h, m, zv);
    const double uncorrected =
        kde::kde_eval(samples, {kde::KernelFamily::epanechnikov, 1}, h, zv);
    const double err_corrected = std::abs(corrected - 1.0);
    const double err_uncorrected = std::abs(uncorrected - 1.0);

    auto table = em.csv("results.csv",
                        {"z", "h", "m", "corrected", "uncorrected", "abs_err_corrected",
                         "abs_err_uncorrected"});
    table.row({z, h, static_cast<std::int64_t>(m), corrected, uncorrected, err_corrected,
               err_uncorrected});
    em.done("results.csv", table);

    const bool pass = err_corrected < 0.5 * err_uncorrected;
    json summary = {{"n", n},
                    {"corrected_error", err_corrected},
                    {"uncorrected_error", err_uncorrected},
                    {"ratio", err_corrected / err_uncorrected},
                    {"pass", pass}};
    std::ofstream(em.dir / "summary.json", std::ios::binary) << summary.dump(2) << "\n";
    em.file("summary.json");
    em.out->checks_passed = pass;
}

// ---- top-level runner ---------------------------------------------------------------

struct ExperimentRequest {
    std::string experiment;
    json overrides = json::object();
    std::filesystem::path out_root = "out";
    int workers = 0;
};

/// Run one experiment into <out_root>/<experiment>/: data CSVs, plot.svg for
/// the figures, resolved_config.json, and manifest.json written last. Partial
/// outputs are removed on failure.
inline RunOutput run_experiment(const ExperimentRequest& req) {
    const ResolvedConfig cfg = resolve_config(req.experiment, req.overrides);
    RunOutput out;
    out.dir = req.out_root / req.experiment;
    std::filesystem::create_directories(out.dir);
    detail::Emitter em{out.dir, &out};
    const auto start = std::chrono::steady_clock::now();
    try {
        {
            std::ofstream rc(out.dir / "resolved_config.json", std::ios::binary);
            rc << json{{"experiment", cfg.experiment}, {"values", cfg.values}}.dump(2) << "\n";
        }
        em.file("resolved_config.json");
        if (cfg.experiment == "fig1_velocity_paths")
            run_fig1(cfg, em);
        else if (cfg.experiment == "fig2_mixture_paths")
            run_fig2(cfg, em);
        else if (cfg.experiment == "fig3_trajectories_1d")
            run_fig3(cfg, em, req.workers);
        else if (cfg.experiment == "fig4_identity_d50")
            run_fig4(cfg, em);
        else if (cfg.experiment == "clt_1d")
            run_clt(cfg, em, req.workers);
        else if (cfg.experiment == "estimator_bench")
            run_estimator_bench(cfg, em, req.workers);
        else if (cfg.experiment == "boundary_kde_bench")
            run_boundary_kde_bench(cfg, em);
        else
            throw ParameterError("unknown experiment: " + cfg.experiment);
    } catch (...) {
        for (const auto& [name, rows] : out.files)
            std::filesystem::remove(out.dir / name);
        throw;
    }
    const auto wall =
        std::chrono::duration_cast<std::chrono::milliseconds>(
            std::chrono::steady_clock::now() - start)
            .count();

    json manifest;
    manifest["config_hash"] = cfg.hash();
    manifest["wall_clock_ms"] = wall;
    manifest["warnings"] = out.warnings;
    manifest["checks_passed"] = out.checks_passed;
    json files = json::array();
    for (const auto& [name, rows] : out.files)
        files.push_back({{"name", name}, {"rows", rows}});
    manifest["files"] = files;
    if (cfg.experiment == "fig3_trajectories_1d")
        manifest["bandwidths"] = cfg.values.at("bandwidths");
    std::ofstream(out.dir / "manifest.json", std::ios::binary) << manifest.dump(2) << "\n";
    return out;
}

}  // namespace rectflow::experiments
