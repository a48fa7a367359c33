#include <cstdio>
#include <exception>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rectflow/experiments.hpp"

namespace {

using nlohmann::json;

json parse_override_value(const std::string& raw) {
    // numbers, booleans, and arrays parse as JSON; anything else is a string
    try {
        return json::parse(raw);
    } catch (const json::parse_error&) {
        return json(raw);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rectified-flow experiment harness"};
    app.require_subcommand(0, 0);

    std::string experiment;
    std::string config_path;
    std::string out_dir = "out";
    std::vector<std::string> sets;
    std::uint64_t seed = 0;
    bool seed_given = false;
    int workers = 0;

    app.add_option("experiment", experiment,
                   "one of: fig1_velocity_paths fig2_mixture_paths fig3_trajectories_1d "
                   "fig4_identity_d50 clt_1d estimator_bench boundary_kde_bench")
        ->required();
    app.add_option("--config", config_path, "JSON config file (flat key/value map)");
    app.add_option("--seed", seed, "seed override")->each([&](const std::string&) {
        seed_given = true;
    });
    app.add_option("--out", out_dir, "output root directory");
    app.add_option("--workers", workers, "worker threads (default: logical cores)");
    app.add_option("--set", sets, "key=value config overrides")->take_all();

    CLI11_PARSE(app, argc, argv);

    try {
        rectflow::experiments::ExperimentRequest req;
        req.experiment = experiment;
        req.out_root = out_dir;
        req.workers = workers;

        if (!config_path.empty()) {
            std::ifstream in(config_path);
            if (!in) throw rectflow::ParameterError("cannot read config " + config_path);
            json file_cfg = json::parse(in);
            for (const auto& [key, value] : file_cfg.items()) {
                if (key == "experiment") {
                    if (value.get<std::string>() != experiment)
                        throw rectflow::ParameterError(
                            "config file experiment does not match the command line");
                    continue;
                }
                req.overrides[key] = value;
            }
        }
        for (const auto& kv : sets) {
            const auto pos = kv.find('=');
            if (pos == std::string::npos)
                throw rectflow::ParameterError("--set expects key=value, got " + kv);
            req.overrides[kv.substr(0, pos)] = parse_override_value(kv.substr(pos + 1));
        }
        if (seed_given) req.overrides["seed"] = seed;

        const auto out = rectflow::experiments::run_experiment(req);
        std::printf("wrote %zu artifacts to %s\n", out.files.size() + 1,
                    out.dir.string().c_str());
        for (const auto& w : out.warnings) std::printf("warning: %s\n", w.c_str());
        if (!out.checks_passed) {
            std::printf("FAIL: experiment-level check failed (see summary.json)\n");
            return 1;
        }
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
