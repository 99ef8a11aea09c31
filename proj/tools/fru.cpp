#include <cstdint>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fru/experiment.hpp"

namespace {

fru::ExperimentConfig load_cli_config(const std::string& path, std::int64_t seed_override,
                                      std::int64_t workers_override, bool serial) {
    fru::ExperimentConfig cfg = fru::load_config(path);
    if (seed_override >= 0) {
        cfg.train.seed = static_cast<std::uint64_t>(seed_override);
        cfg.raw["seed"] = cfg.train.seed;
    }
    if (workers_override > 0) cfg.workers = static_cast<std::size_t>(workers_override);
    if (serial) cfg.workers = 1;
    return cfg;
}

fru::UnlearnMode parse_mode(const std::string& mode) {
    if (mode == "fru") return fru::UnlearnMode::fru;
    if (mode == "fru-no-ius") return fru::UnlearnMode::fru_without_ius;
    if (mode == "fedremove") return fru::UnlearnMode::fedremove;
    if (mode == "retrain") return fru::UnlearnMode::retrain;
    throw fru::ConfigError("unknown mode '" + mode + "'");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated recommendation training with rollback unlearning"};
    app.require_subcommand(1);

    std::string config_path, out_dir, run_dir, mode = "fru", targets = "auto";
    std::int64_t seed = -1, workers = -1;
    double lambda = 0.1;
    bool serial = false, force = false;
    std::vector<std::string> report_dirs;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_flag("--serial", serial, "single-threaded, bit-reproducible execution");
        cmd->add_option("--workers", workers, "worker thread count");
    };

    CLI::App* train_cmd = app.add_subcommand("train", "train a federated recommender");
    train_cmd->add_option("--config", config_path, "experiment config JSON")->required();
    train_cmd->add_option("--out", out_dir, "run output directory")->required();
    train_cmd->add_option("--seed", seed, "override the config seed");
    train_cmd->add_flag("--force", force, "overwrite a non-empty output directory");
    add_common(train_cmd);

    CLI::App* attack_cmd =
        app.add_subcommand("attack-train", "train with the poisoning attack active");
    attack_cmd->add_option("--config", config_path, "experiment config JSON")->required();
    attack_cmd->add_option("--out", out_dir, "run output directory")->required();
    attack_cmd->add_option("--seed", seed, "override the config seed");
    attack_cmd->add_flag("--force", force, "overwrite a non-empty output directory");
    add_common(attack_cmd);

    CLI::App* unlearn_cmd = app.add_subcommand("unlearn", "erase target clients from a run");
    unlearn_cmd->add_option("run_dir", run_dir, "completed training run directory")->required();
    unlearn_cmd->add_option("--mode", mode, "fru | fru-no-ius | fedremove | retrain");
    unlearn_cmd->add_option("--lambda", lambda, "speed-up factor");
    unlearn_cmd->add_option("--targets", targets, "'auto' or comma-separated client ids");
    add_common(unlearn_cmd);

    CLI::App* eval_cmd = app.add_subcommand("evaluate", "re-evaluate a run's checkpoint");
    eval_cmd->add_option("run_dir", run_dir, "run directory")->required();

    CLI::App* report_cmd = app.add_subcommand("report", "merge run evaluations into CSV");
    report_cmd->add_option("runs", report_dirs, "run directories")->required();
    report_cmd->add_option("--out", out_dir, "output prefix (writes <out>_table.csv and <out>_timing.csv)");

    CLI::App* storage_cmd =
        app.add_subcommand("predict-storage", "closed-form device storage accounting");
    storage_cmd->add_option("--config", config_path, "experiment config JSON")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed() || attack_cmd->parsed()) {
            auto cfg = load_cli_config(config_path, seed, workers, serial);
            fru::cmd_train(cfg, out_dir, attack_cmd->parsed(), force);
            std::cout << "run written to " << out_dir << "\n";
        } else if (unlearn_cmd->parsed()) {
            fru::RunArtifacts run = fru::open_run(run_dir);
            fru::UnlearnConfig ucfg;
            ucfg.mode = parse_mode(mode);
            ucfg.speedup_factor = lambda;
            if (targets != "auto") {
                std::stringstream ss(targets);
                std::string tok;
                while (std::getline(ss, tok, ','))
                    ucfg.targets.push_back(static_cast<std::uint32_t>(std::stoul(tok)));
            }
            std::size_t w = serial ? 1 : (workers > 0 ? std::size_t(workers) : run.config.workers);
            fru::UnlearnOutcome out = fru::cmd_unlearn(run, ucfg, w);
            std::cout << "mode=" << mode << " lambda=" << lambda
                      << " hit=" << out.eval.hit_percent << " ndcg=" << out.eval.ndcg_percent
                      << " seconds=" << out.result.seconds_total << "\n"
                      << "outputs in " << out.out_dir << "\n";
        } else if (eval_cmd->parsed()) {
            fru::RunArtifacts run = fru::open_run(run_dir);
            auto global = fru::load_checkpoint(run_dir + "/checkpoint.bin");
            auto users = fru::load_user_embeddings(run_dir + "/user_embeddings.bin");
            std::vector<std::uint32_t> honest;
            std::set<std::uint32_t> mal(run.malicious.begin(), run.malicious.end());
            for (std::uint32_t u = 0; u < run.split.user_count; ++u)
                if (!mal.count(u)) honest.push_back(u);
            fru::EvalResult r = fru::evaluate(run.config.train, global, users, run.split,
                                              run.config.train.seed, honest);
            std::cout << "hit=" << r.hit_percent << " ndcg=" << r.ndcg_percent
                      << " tasks=" << r.task_count << "\n";
        } else if (report_cmd->parsed()) {
            if (!out_dir.empty()) {
                std::ofstream table(out_dir + "_table.csv");
                std::ofstream timing(out_dir + "_timing.csv");
                fru::cmd_report(report_dirs, table, timing);
                std::cout << "wrote " << out_dir << "_table.csv and " << out_dir
                          << "_timing.csv\n";
            } else {
                fru::cmd_report(report_dirs, std::cout, std::cout);
            }
        } else if (storage_cmd->parsed()) {
            auto cfg = load_cli_config(config_path, seed, workers, serial);
            fru::SplitDataset split = fru::load_dataset(cfg);
            fru::StorageReport report =
                fru::predict_storage(cfg.train, cfg.log, cfg.sampling, split);
            nlohmann::json j = {{"avg_cost_units", report.avg_cost_units},
                                {"overhead_percent", report.overhead_percent},
                                {"avg_positive_count", fru::average_positive_count(split)},
                                {"item_count", split.item_count}};
            std::cout << j.dump(2) << "\n";
        }
    } catch (const fru::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const fru::ParseError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const fru::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
    return 0;
}
