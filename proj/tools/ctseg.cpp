// Command-line entry point for the tidemark segmentation pipeline. Every
// subcommand is driven by one JSON run configuration; outputs land under the
// configured run directory. Exit codes: 0 success, 1 partial data failure,
// 2 configuration error.
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ctseg/cli.hpp"
#include "ctseg/config.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string loss;
    std::string folds;
    bool force = false;
};

std::optional<ctseg::LossKind> parse_loss(const std::string& s) {
    if (s.empty()) return std::nullopt;
    return ctseg::loss_kind_from_name(s);
}

std::vector<int> parse_folds(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(std::stoi(tok));
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tidemark segmentation pipeline"};
    app.require_subcommand(1);

    CommonArgs args;
    const auto add_common = [&](CLI::App* cmd, bool with_loss, bool with_folds,
                                bool with_force) {
        cmd->add_option("--config", args.config_path, "run configuration (JSON)")
            ->required();
        if (with_loss)
            cmd->add_option("--loss", args.loss,
                            "override the configured loss kind "
                            "(bce|focal|jaccard|bce_log_jaccard)");
        if (with_folds)
            cmd->add_option("--folds", args.folds,
                            "comma-separated fold subset, e.g. 0,2,4");
        if (with_force)
            cmd->add_flag("--force", args.force, "redo work even if up to date");
    };

    CLI::App* preprocess = app.add_subcommand(
        "preprocess", "raw stacks -> canonical normalized volumes");
    add_common(preprocess, false, false, true);
    CLI::App* split =
        app.add_subcommand("split", "group-stratified k-fold assignment");
    add_common(split, false, false, false);
    CLI::App* train = app.add_subcommand("train", "train one model per fold");
    add_common(train, true, true, false);
    CLI::App* predict =
        app.add_subcommand("predict", "out-of-fold dual-plane prediction");
    add_common(predict, true, false, false);
    CLI::App* evaluate =
        app.add_subcommand("evaluate", "banded metrics at every pad level");
    add_common(evaluate, true, false, false);
    CLI::App* report = app.add_subcommand("report", "metric-vs-pad curves and table");
    add_common(report, false, false, false);

    CLI11_PARSE(app, argc, argv);

    try {
        ctseg::RunConfig cfg = ctseg::load_run_config(args.config_path);
        cfg.check_paths();
        const auto loss = parse_loss(args.loss);
        if (preprocess->parsed()) return ctseg::cmd_preprocess(cfg, args.force);
        if (split->parsed()) return ctseg::cmd_split(cfg);
        if (train->parsed())
            return ctseg::cmd_train(cfg, parse_folds(args.folds), loss);
        if (predict->parsed()) return ctseg::cmd_predict(cfg, loss);
        if (evaluate->parsed()) return ctseg::cmd_evaluate(cfg, loss);
        if (report->parsed()) return ctseg::cmd_report(cfg);
    } catch (const ctseg::ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;  // no subcommand matched (unreachable with require_subcommand)
}
