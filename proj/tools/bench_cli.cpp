#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "adjvar/bench.hpp"

namespace {

using namespace adjvar;

struct CliArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<int> trials;
    std::optional<std::string> methods;
    std::optional<std::string> alpha;
};

ExperimentConfig build_config(const CliArgs& args) {
    ExperimentConfig cfg =
        args.config_path.empty() ? ExperimentConfig{} : load_config(args.config_path);
    if (args.seed) cfg.seed = *args.seed;
    if (args.out) cfg.out_dir = *args.out;
    if (args.trials) cfg.trials = *args.trials;
    if (args.methods) cfg.methods = parse_method_list(*args.methods);
    if (args.alpha)
        for (const auto& [m, a] : parse_alpha_overrides(*args.alpha)) cfg.alpha_overrides[m] = a;
    validate_config(cfg);
    return cfg;
}

void print_cell_block(const std::string& label, const std::vector<Method>& methods,
                      const std::map<Method, CellStat>& stats) {
    bool any = false;
    for (Method m : methods) {
        const auto it = stats.find(m);
        if (it == stats.end() || it->second.n == 0) continue;
        if (!any) std::cout << label << "\n";
        any = true;
        std::printf("  %-9s %11.5g +- %-11.5g (n=%d)\n", method_name(m).c_str(), it->second.mean,
                    it->second.stddev, it->second.n);
    }
}

void print_summary(const RunReport& report) {
    print_cell_block("analysis rmse:", report.cfg.methods, report.rmse);
    print_cell_block("forward generalization rmse:", report.cfg.methods, report.fwd_gen);
    print_cell_block("adjoint generalization rmse:", report.cfg.methods, report.adj_gen);
    print_cell_block("mean window wall time (s):", report.cfg.methods, report.wall);
    if (!report.t_tests.empty()) {
        std::cout << "paired t-tests on analysis rmse:\n";
        for (const auto& [name, r] : report.t_tests)
            std::printf("  %-22s t=%-10.4g p=%.4g%s\n", name.c_str(), r.t, r.p,
                        r.zero_variance ? " (zero variance)" : "");
    }
    std::cout << "report written to " << report.cfg.out_dir << "\n";
}

void print_files(const std::string& out_dir, const std::vector<std::string>& files) {
    for (const std::string& f : files) std::cout << "wrote " << out_dir << "/" << f << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sequential 4D-Var surrogate benchmark: data generation, training, "
                 "assimilation, generalization tests, and CSV/JSON reports"};
    app.require_subcommand(1);

    CliArgs args;
    app.add_option("--config", args.config_path, "JSON config file")->check(CLI::ExistingFile);
    app.add_option("--seed", args.seed, "base RNG seed");
    app.add_option("--out", args.out, "output directory");
    app.add_option("--trials", args.trials, "number of independent trials");
    app.add_option("--methods", args.methods, "comma-separated method list");
    app.add_option("--alpha", args.alpha,
                   "per-method derivative loss weight overrides, Method=value[,...]");

    CLI::App* gen_data =
        app.add_subcommand("gen-data", "write trial-0 training sets and the generalization set");
    CLI::App* train_cmd =
        app.add_subcommand("train", "train trial-0 networks; write parameters and loss curves");
    CLI::App* assimilate =
        app.add_subcommand("assimilate", "sequential 4D-Var runs only (tables 4, 7, 8)");
    CLI::App* generalize =
        app.add_subcommand("generalize", "generalization metrics only (tables 5, 6)");
    CLI::App* report_cmd =
        app.add_subcommand("report", "rebuild aggregate tables from raw_*.csv files");
    CLI::App* full = app.add_subcommand("full", "end-to-end experiment with all reports");
    for (CLI::App* sub : {gen_data, train_cmd, assimilate, generalize, report_cmd, full})
        sub->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        const ExperimentConfig cfg = build_config(args);
        if (gen_data->parsed()) {
            print_files(cfg.out_dir, write_datasets(cfg));
        } else if (train_cmd->parsed()) {
            print_files(cfg.out_dir, write_trained_models(cfg));
        } else if (assimilate->parsed()) {
            print_summary(run_experiment(cfg, {true, false}, &std::cout));
        } else if (generalize->parsed()) {
            print_summary(run_experiment(cfg, {false, true}, &std::cout));
        } else if (report_cmd->parsed()) {
            print_summary(rebuild_report(cfg));
        } else if (full->parsed()) {
            print_summary(run_experiment(cfg, {}, &std::cout));
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
