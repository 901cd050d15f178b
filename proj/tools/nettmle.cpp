#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "nettmle/config.hpp"
#include "nettmle/experiment.hpp"

using namespace nettmle;

namespace {

int run_sweep(const std::string& config, int jobs, bool resume, bool truth_only) {
    const ExperimentSpec spec = parse_config(config);
    ExperimentOptions opt;
    opt.jobs = jobs;
    opt.resume = resume;
    opt.truth_only = truth_only;
    const ExperimentResult r = run_experiment(spec, opt);
    std::cerr << "wrote " << r.runs_written << " runs (" << r.runs_failed << " failed) over " << r.units << " units to "
              << r.output_dir.string() << '\n';
    return r.exit_code;
}

FacetFilter parse_facets(const std::vector<std::string>& items) {
    FacetFilter f;
    for (const auto& it : items) {
        const auto eq = it.find('=');
        if (eq == std::string::npos || eq == 0) throw std::invalid_argument("facet must be key=value: " + it);
        f.equals[it.substr(0, eq)] = it.substr(eq + 1);
    }
    return f;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Network TMLE simulation and estimation"};
    app.require_subcommand(1);

    std::string config;
    int jobs = 1;
    bool resume = false;
    auto* run = app.add_subcommand("run", "Run an experiment sweep");
    run->add_option("--config", config, "Experiment config file")->required()->check(CLI::ExistingFile);
    run->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
    run->add_flag("--resume", resume, "Skip runs already present in the output");

    std::string truth_config;
    bool truth_resume = false;
    auto* truth = app.add_subcommand("truth", "Compute counterfactual truths only");
    truth->add_option("--config", truth_config, "Experiment config file")->required()->check(CLI::ExistingFile);
    truth->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
    truth->add_flag("--resume", truth_resume, "Skip truths already present in the output");

    std::string summary, metric, out_dir;
    std::vector<std::string> facets;
    auto* series = app.add_subcommand("series", "Emit plot-ready series from a summary CSV");
    series->add_option("--summary", summary, "Summary CSV")->required()->check(CLI::ExistingFile);
    series->add_option("--metric", metric, "bias, ese, cover_direct or cover_latent")->required();
    series->add_option("--facet", facets, "Restrict to key=value (repeatable)");
    series->add_option("--out", out_dir, "Output directory (default: next to the summary)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) return run_sweep(config, jobs, resume, false);
        if (*truth) return run_sweep(truth_config, jobs, truth_resume, true);
        if (*series) {
            const fs::path dir = out_dir.empty() ? fs::path(summary).parent_path() : fs::path(out_dir);
            for (const auto& p : emit_series(summary, metric, dir.empty() ? fs::path(".") : dir, parse_facets(facets)))
                std::cout << p.string() << '\n';
            return 0;
        }
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
