#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rectflow/experiments.hpp"

using namespace rectflow;
using namespace rectflow::experiments;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const fs::path& p) {
    CsvTable t;
    std::ifstream in(p);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (first) {
            t.header = cells;
            first = false;
        } else {
            t.rows.push_back(cells);
        }
    }
    return t;
}

fs::path temp_dir(const std::string& tag) {
    const fs::path dir = fs::temp_directory_path() / ("rectflow_test_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("config resolution: defaults, overrides, unknown keys") {
    const auto cfg = resolve_config("fig1_velocity_paths", {{"T", 50}});
    REQUIRE(cfg.integer("T") == 50);
    REQUIRE(cfg.integer("t_points") == 201);
    REQUIRE_THROWS_AS(resolve_config("fig1_velocity_paths", {{"bogus", 1}}), ParameterError);
    REQUIRE_THROWS_AS(resolve_config("nope", {}), ParameterError);

    const auto a = resolve_config("clt_1d", {});
    auto b = resolve_config("clt_1d", {});
    REQUIRE(a.hash() == b.hash());
    b.values["n"] = 500;
    REQUIRE(a.hash() != b.hash());
}

TEST_CASE("fig1: endpoint velocity identities and the self-transport path") {
    const auto root = temp_dir("fig1");
    ExperimentRequest req{"fig1_velocity_paths", {{"T", 128}}, root, 2};
    const auto out = run_experiment(req);
    const auto velocity = read_csv(out.dir / "velocity.csv");
    REQUIRE(velocity.header == std::vector<std::string>{"z", "t", "v"});

    double v_at_0 = 0.0, v_at_1 = 0.0;
    for (const auto& row : velocity.rows) {
        if (row[0] == "1" && std::stod(row[1]) == 0.0) v_at_0 = std::stod(row[2]);
        if (row[0] == "1" && std::stod(row[1]) == 1.0) v_at_1 = std::stod(row[2]);
    }
    REQUIRE(v_at_0 == Catch::Approx(-1.0));  // E[X1] - z with m1 = 0
    REQUIRE(v_at_1 == Catch::Approx(1.0));   // z - E[X0]

    const auto paths = read_csv(out.dir / "paths.csv");
    bool found = false;
    for (const auto& row : paths.rows)
        if (row[0] == "1" && std::stod(row[1]) == 0.5) {
            REQUIRE(std::stod(row[2]) == Catch::Approx(0.70710678).margin(1e-7));
            found = true;
        }
    REQUIRE(found);
    REQUIRE(fs::exists(out.dir / "plot.svg"));
    REQUIRE(fs::exists(out.dir / "manifest.json"));
    fs::remove_all(root);
}

TEST_CASE("fig2: odd symmetry of the mixture fan") {
    const auto root = temp_dir("fig2");
    ExperimentRequest req{"fig2_mixture_paths", {{"T", 100}, {"n_starts", 7}}, root, 2};
    const auto out = run_experiment(req);
    const auto traj = read_csv(out.dir / "trajectories.csv");
    REQUIRE(traj.header ==
            std::vector<std::string>{"replicate", "start_index", "t", "z_1"});
    const auto starts = read_csv(out.dir / "starts.csv");
    std::map<std::string, std::string> start_of;  // index -> x
    for (const auto& row : starts.rows) start_of[row[0]] = row[1];

    // the start at 0 stays identically at 0; endpoints are odd in the start
    std::map<std::string, double> endpoint;
    for (const auto& row : traj.rows) {
        const std::string x = start_of.at(row[1]);
        if (x == "0" || x == "-0") REQUIRE(std::abs(std::stod(row[3])) < 1e-12);
        if (std::stod(row[2]) == 1.0) endpoint[x] = std::stod(row[3]);
    }
    REQUIRE(endpoint.at("3") == Catch::Approx(-endpoint.at("-3")).margin(1e-8));
    REQUIRE(endpoint.at("2") == Catch::Approx(-endpoint.at("-2")).margin(1e-8));
    fs::remove_all(root);

    ExperimentRequest far{"fig2_mixture_paths", {{"starts_max", 12.0}}, root, 2};
    REQUIRE_THROWS_AS(run_experiment(far), FarFieldError);
}

TEST_CASE("fig3: truth values and band coverage at the widest bandwidth") {
    const auto root = temp_dir("fig3");
    ExperimentRequest req{"fig3_trajectories_1d",
                          {{"M", 150}, {"T", 50}, {"starts", {-1.0, 0.5, 1.0}}},
                          root,
                          2};
    const auto out = run_experiment(req);
    const auto truth = read_csv(out.dir / "truth.csv");
    bool found = false;
    for (const auto& row : truth.rows)
        if (row[0] == "1" && std::stod(row[1]) == 0.5) {
            REQUIRE(std::stod(row[2]) == Catch::Approx(0.70710678).margin(1e-7));
            found = true;
        }
    REQUIRE(found);

    // the large-bandwidth estimate is biased at intermediate times, but the
    // map value itself recovers: at t = 1 the band contains the truth for the
    // smallest |start| (and indeed every start); the smaller bandwidths cover
    // the whole curve
    const auto bands = read_csv(out.dir / "bands.csv");
    std::map<std::string, std::pair<int, int>> coverage;  // bw -> (covered, total)
    int endpoint_hits = 0, endpoint_total = 0;
    for (const auto& row : bands.rows) {
        const double t = std::stod(row[2]);
        const double start = std::stod(row[1]);
        const double z = start * std::sqrt(t * t + (1.0 - t) * (1.0 - t));
        const bool inside = std::stod(row[3]) <= z && z <= std::stod(row[4]);
        if (row[1] == "0.5") {
            auto& c = coverage[row[0]];
            c.first += inside;
            ++c.second;
        }
        if (t == 1.0 && row[0] == "1") {
            ++endpoint_total;
            endpoint_hits += inside;
        }
    }
    REQUIRE(endpoint_total == 3);
    REQUIRE(endpoint_hits == 3);
    for (const auto& [bw, c] : coverage) {
        REQUIRE(c.second == 51);
        if (bw != "1") REQUIRE(c.first >= static_cast<int>(0.9 * c.second));
    }
    fs::remove_all(root);
}

TEST_CASE("experiments: identical config and seed give byte-identical CSVs") {
    const auto root1 = temp_dir("det1");
    const auto root2 = temp_dir("det2");
    const json overrides = {{"M", 40}, {"T", 30}, {"n", 100}, {"starts", {0.5, 1.0}}};
    const auto out1 =
        run_experiment({"fig3_trajectories_1d", overrides, root1, 2});
    const auto out2 =
        run_experiment({"fig3_trajectories_1d", overrides, root2, 1});  // different workers
    for (const std::string name : {"trajectories.csv", "bands.csv", "truth.csv",
                                   "resolved_config.json"})
        REQUIRE(slurp(out1.dir / name) == slurp(out2.dir / name));
    fs::remove_all(root1);
    fs::remove_all(root2);
}

TEST_CASE("clt_1d driver emits the summary with the variance ratio") {
    const auto root = temp_dir("clt");
    ExperimentRequest req{"clt_1d", {{"n", 400}, {"M", 60}, {"T", 100}}, root, 2};
    const auto out = run_experiment(req);
    const auto summary = nlohmann::json::parse(slurp(out.dir / "summary.json"));
    REQUIRE(summary.at("M") == 60);
    REQUIRE(summary.at("ratio").get<double>() > 0.0);
    REQUIRE(summary.at("sigma_reference").get<double>() == Catch::Approx(M_PI));
    const auto errors = read_csv(out.dir / "errors.csv");
    REQUIRE(errors.rows.size() == 60);
    fs::remove_all(root);
}

TEST_CASE("estimator_bench: median grid-RMSE falls as n grows (desk scale)") {
    const auto root = temp_dir("bench");
    // one 8x jump in n keeps the decrease robust at a 5-seed desk scale; the
    // CLI default runs the full {500, 2000, 8000} x 10-seed sweep
    ExperimentRequest req{"estimator_bench",
                          {{"ns", {500, 4000}}, {"seeds", 5}},
                          root,
                          2};
    const auto out = run_experiment(req);
    REQUIRE(out.checks_passed);
    const auto summary = nlohmann::json::parse(slurp(out.dir / "summary.json"));
    REQUIRE(summary.at("monotone_in_n").get<bool>());
    const auto table = read_csv(out.dir / "bench.csv");
    REQUIRE(table.rows.size() == 8 * 2);
    fs::remove_all(root);
}

TEST_CASE("boundary_kde_bench: the corrected estimator halves the edge error") {
    const auto root = temp_dir("bkde");
    ExperimentRequest req{"boundary_kde_bench", {{"n", 50000}}, root, 2};
    const auto out = run_experiment(req);
    REQUIRE(out.checks_passed);
    const auto summary = nlohmann::json::parse(slurp(out.dir / "summary.json"));
    REQUIRE(summary.at("ratio").get<double>() < 0.5);
    fs::remove_all(root);
}
