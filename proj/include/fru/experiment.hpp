#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fru/adversary.hpp"
#include "fru/dataset.hpp"
#include "fru/devicelog.hpp"
#include "fru/evalkit.hpp"
#include "fru/federation.hpp"
#include "fru/model.hpp"
#include "fru/negsample.hpp"
#include "fru/unlearn.hpp"

namespace fru {

class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class DatasetKind { movielens, steam, snapshot };

struct ExperimentConfig {
    DatasetKind dataset_kind = DatasetKind::movielens;
    std::string dataset_path;
    TrainConfig train;
    SamplingConfig sampling;
    LogConfig log;
    AttackConfig attack;
    bool attack_configured = false;
    UnlearnConfig unlearn_cfg;
    bool unlearn_configured = false;
    std::size_t eval_every = 0;  // 0 = only final evaluation
    std::size_t workers = 1;
    nlohmann::json raw;  // the parsed config document, for manifests
};

namespace detail {

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
    ExperimentConfig cfg;
    cfg.raw = j;
    try {
        const auto& ds = j.at("dataset");
        std::string kind = ds.at("kind").get<std::string>();
        if (kind == "movielens") cfg.dataset_kind = DatasetKind::movielens;
        else if (kind == "steam") cfg.dataset_kind = DatasetKind::steam;
        else if (kind == "snapshot") cfg.dataset_kind = DatasetKind::snapshot;
        else throw ConfigError("unknown dataset kind '" + kind + "'");
        cfg.dataset_path = ds.at("path").get<std::string>();

        std::string model = detail::get_or<std::string>(j, "model", "ncf");
        if (model == "ncf") cfg.train.model = ModelKind::ncf;
        else if (model == "lightgcn") cfg.train.model = ModelKind::lightgcn;
        else throw ConfigError("unknown model '" + model + "'");
        if (cfg.train.model == ModelKind::lightgcn) cfg.train.negative_ratio = 1;

        if (j.contains("train")) {
            const auto& t = j.at("train");
            cfg.train.embedding_dim = detail::get_or<std::size_t>(t, "embedding_dim", cfg.train.embedding_dim);
            cfg.train.ffn_dims = detail::get_or<std::vector<std::size_t>>(t, "ffn_dims", cfg.train.ffn_dims);
            cfg.train.lightgcn_layers = detail::get_or<std::size_t>(t, "lightgcn_layers", cfg.train.lightgcn_layers);
            cfg.train.learning_rate = detail::get_or<double>(t, "learning_rate", cfg.train.learning_rate);
            cfg.train.batch_size = detail::get_or<std::size_t>(t, "batch_size", cfg.train.batch_size);
            cfg.train.local_epochs = detail::get_or<std::size_t>(t, "local_epochs", cfg.train.local_epochs);
            cfg.train.global_rounds = detail::get_or<std::size_t>(t, "global_rounds", cfg.train.global_rounds);
            cfg.train.client_fraction_percent = detail::get_or<double>(t, "client_fraction_percent", cfg.train.client_fraction_percent);
            cfg.train.negative_ratio = detail::get_or<std::size_t>(t, "negative_ratio", cfg.train.negative_ratio);
        }
        cfg.train.seed = detail::get_or<std::uint64_t>(j, "seed", cfg.train.seed);

        if (j.contains("sampling")) {
            const auto& s = j.at("sampling");
            cfg.sampling.pool_percent = detail::get_or<double>(s, "pool_percent", cfg.sampling.pool_percent);
            cfg.sampling.shrink_factor = detail::get_or<double>(s, "shrink_factor", cfg.sampling.shrink_factor);
            std::string strat = detail::get_or<std::string>(s, "strategy", "mixed");
            if (strat == "random") cfg.sampling.strategy = SamplingStrategy::random;
            else if (strat == "user_based") cfg.sampling.strategy = SamplingStrategy::user_based;
            else if (strat == "item_based") cfg.sampling.strategy = SamplingStrategy::item_based;
            else if (strat == "mixed") cfg.sampling.strategy = SamplingStrategy::mixed;
            else throw ConfigError("unknown sampling strategy '" + strat + "'");
        }
        if (j.contains("log")) {
            const auto& l = j.at("log");
            cfg.log.keep_fraction = detail::get_or<double>(l, "keep_fraction", cfg.log.keep_fraction);
            std::string mode = detail::get_or<std::string>(l, "selection_mode", "importance");
            if (mode == "importance") cfg.log.selection_mode = SelectionMode::importance;
            else if (mode == "random") cfg.log.selection_mode = SelectionMode::random;
            else throw ConfigError("unknown selection_mode '" + mode + "'");
        }
        if (j.contains("attack")) {
            const auto& a = j.at("attack");
            cfg.attack.malicious_fraction = detail::get_or<double>(a, "malicious_fraction", cfg.attack.malicious_fraction);
            cfg.attack.gamma_min = detail::get_or<double>(a, "gamma_min", cfg.attack.gamma_min);
            cfg.attack.gamma_max = detail::get_or<double>(a, "gamma_max", cfg.attack.gamma_max);
            cfg.attack.noise_scale = detail::get_or<double>(a, "noise_scale", cfg.attack.noise_scale);
            cfg.attack_configured = true;
        }
        if (j.contains("unlearn")) {
            const auto& u = j.at("unlearn");
            cfg.unlearn_cfg.speedup_factor = detail::get_or<double>(u, "lambda", cfg.unlearn_cfg.speedup_factor);
            std::string mode = detail::get_or<std::string>(u, "mode", "fru");
            if (mode == "fru") cfg.unlearn_cfg.mode = UnlearnMode::fru;
            else if (mode == "fru-no-ius") cfg.unlearn_cfg.mode = UnlearnMode::fru_without_ius;
            else if (mode == "fedremove") cfg.unlearn_cfg.mode = UnlearnMode::fedremove;
            else if (mode == "retrain") cfg.unlearn_cfg.mode = UnlearnMode::retrain;
            else throw ConfigError("unknown unlearn mode '" + mode + "'");
            if (u.contains("targets") && u.at("targets").is_array())
                cfg.unlearn_cfg.targets = u.at("targets").get<std::vector<std::uint32_t>>();
            cfg.unlearn_configured = true;
        }
        cfg.eval_every = detail::get_or<std::size_t>(j, "eval_every", 0);
        cfg.workers = detail::get_or<std::size_t>(j, "workers", 1);
        cfg.train.validate();
        cfg.sampling.validate();
        cfg.log.validate();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad config: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("bad config: ") + e.what());
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return parse_config(j);
}

inline std::uint64_t config_hash(const nlohmann::json& j) {
    std::string s = j.dump();
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline SplitDataset load_dataset(const ExperimentConfig& cfg) {
    switch (cfg.dataset_kind) {
        case DatasetKind::movielens: return load_movielens(cfg.dataset_path, cfg.train.seed);
        case DatasetKind::steam: return load_steam(cfg.dataset_path, cfg.train.seed);
        case DatasetKind::snapshot: {
            std::ifstream in(cfg.dataset_path);
            if (!in) throw DataError("cannot open snapshot " + cfg.dataset_path);
            nlohmann::json j;
            in >> j;
            return dataset_from_json(j);
        }
    }
    throw ConfigError("unreachable dataset kind");
}

// ---------------------------------------------------------------------------
// Run directory layout:
//   manifest.json, dataset.json, trace.json, checkpoint.bin,
//   user_embeddings.bin, metrics.csv, evaluation.json, devicelogs/client_K.bin
//   unlearn_<mode>[_<lambda>]/ {checkpoint.bin, user_embeddings.bin,
//                               timing.json, evaluation.json}

inline void save_user_embeddings(const std::string& path,
                                 const std::vector<PrivateParameters>& users) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write("FRUUSER1", 8);
    std::size_t e = users.empty() ? 0 : users.front().user_embedding.size();
    detail::write_u32(out, static_cast<std::uint32_t>(users.size()));
    detail::write_u32(out, static_cast<std::uint32_t>(e));
    for (const auto& u : users) detail::write_f32(out, u.user_embedding);
}

inline std::vector<PrivateParameters> load_user_embeddings(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "FRUUSER1", 8) != 0)
        throw std::runtime_error("bad user embedding file " + path);
    std::uint32_t count = detail::read_u32(in);
    std::uint32_t e = detail::read_u32(in);
    std::vector<PrivateParameters> users(count);
    for (auto& u : users) detail::read_f32(in, u.user_embedding, e);
    return users;
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << j.dump(2) << "\n";
}

inline nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    nlohmann::json j;
    in >> j;
    return j;
}

struct RunArtifacts {
    std::string dir;
    ExperimentConfig config;
    SplitDataset split;
    SelectionTrace trace;
    std::vector<std::uint32_t> malicious;
};

// Runs training (optionally with the attack active) and writes a
// self-describing run directory.
inline RunArtifacts cmd_train(const ExperimentConfig& cfg, const std::string& out_dir,
                              bool attack_active, bool force) {
    namespace fs = std::filesystem;
    if (fs::exists(out_dir) && !fs::is_empty(out_dir)) {
        if (!force) throw ConfigError("output directory " + out_dir +
                                      " is not empty (use --force)");
        fs::remove_all(out_dir);
    }
    fs::create_directories(out_dir);

    RunArtifacts run;
    run.dir = out_dir;
    run.config = cfg;
    run.split = load_dataset(cfg);
    write_json(out_dir + "/dataset.json", dataset_to_json(run.split));

    TrainHooks hooks;
    if (attack_active) {
        AttackConfig acfg = cfg.attack;
        acfg.validate();
        Rng rng(derive_seed(cfg.train.seed, "malicious"));
        run.malicious = designate_malicious(run.split.user_count, acfg.malicious_fraction, rng);
        hooks.transform = attack_transform(acfg, run.malicious, cfg.train.seed);
    }

    std::ofstream metrics(out_dir + "/metrics.csv", std::ios::trunc);
    metrics << "round,hit,ndcg\n";
    std::vector<std::uint32_t> honest;
    {
        std::set<std::uint32_t> mal(run.malicious.begin(), run.malicious.end());
        for (std::uint32_t u = 0; u < run.split.user_count; ++u)
            if (!mal.count(u)) honest.push_back(u);
    }
    if (cfg.eval_every > 0) {
        hooks.on_round_end = [&](std::uint32_t round, const GlobalParameters& g,
                                 const std::vector<PrivateParameters>& users) {
            if (round % cfg.eval_every != 0) return;
            EvalResult r = evaluate(cfg.train, g, users, run.split, cfg.train.seed, honest);
            metrics << round << "," << r.hit_percent << "," << r.ndcg_percent << "\n";
            metrics.flush();
        };
    }

    FederationRun result = train(run.split, cfg.train, cfg.sampling, cfg.log,
                                 out_dir + "/devicelogs", eligible_clients(run.split), hooks,
                                 cfg.workers);
    run.trace = result.trace;

    save_checkpoint(out_dir + "/checkpoint.bin", result.global);
    save_user_embeddings(out_dir + "/user_embeddings.bin", result.users);
    write_json(out_dir + "/trace.json", trace_to_json(result.trace));

    EvalResult final_eval =
        evaluate(cfg.train, result.global, result.users, run.split, cfg.train.seed, honest);
    nlohmann::json eval_json = {
        {"method", attack_active ? "attacked" : "trained"},
        {"dataset", cfg.raw.at("dataset").at("kind")},
        {"model", to_string(cfg.train.model)},
        {"malicious_fraction", attack_active ? cfg.attack.malicious_fraction : 0.0},
        {"hit", final_eval.hit_percent},
        {"ndcg", final_eval.ndcg_percent},
        {"tasks", final_eval.task_count}};
    write_json(out_dir + "/evaluation.json", eval_json);

    nlohmann::json manifest = {
        {"version", 1},
        {"config", cfg.raw},
        {"config_hash", config_hash(cfg.raw)},
        {"seed", cfg.train.seed},
        {"model", to_string(cfg.train.model)},
        {"attack_active", attack_active},
        {"malicious", run.malicious},
        {"user_count", run.split.user_count},
        {"item_count", run.split.item_count}};
    write_json(out_dir + "/manifest.json", manifest);
    return run;
}

// Reopens a run directory written by cmd_train. The snapshot inside the run
// directory is used, so the original dataset files are not needed.
inline RunArtifacts open_run(const std::string& run_dir) {
    RunArtifacts run;
    run.dir = run_dir;
    nlohmann::json manifest = read_json(run_dir + "/manifest.json");
    run.config = parse_config(manifest.at("config"));
    run.malicious = manifest.at("malicious").get<std::vector<std::uint32_t>>();
    run.split = dataset_from_json(read_json(run_dir + "/dataset.json"));
    run.trace = trace_from_json(read_json(run_dir + "/trace.json"));
    return run;
}

struct UnlearnOutcome {
    UnlearnResult result;
    EvalResult eval;
    std::string out_dir;
};

inline std::string unlearn_subdir(const UnlearnConfig& ucfg) {
    std::string name = "unlearn_" + to_string(ucfg.mode);
    if (ucfg.mode == UnlearnMode::fru || ucfg.mode == UnlearnMode::fru_without_ius) {
        std::ostringstream ss;
        ss << "_" << std::setprecision(4) << ucfg.speedup_factor;
        name += ss.str();
    }
    return name;
}

inline UnlearnOutcome cmd_unlearn(const RunArtifacts& run, UnlearnConfig ucfg,
                                  std::size_t workers = 1, bool write_outputs = true) {
    if (ucfg.targets.empty()) ucfg.targets = run.malicious;
    if (ucfg.targets.empty())
        throw ConfigError("no unlearn targets: run has no malicious set and none given");

    std::vector<std::unique_ptr<DeviceLog>> cache(run.split.user_count);
    LogAccessor logs = [&](std::uint32_t k) -> const DeviceLog* {
        if (!cache[k]) {
            std::string path = run.dir + "/devicelogs/client_" + std::to_string(k) + ".bin";
            if (!std::filesystem::exists(path)) return nullptr;
            cache[k] = std::make_unique<DeviceLog>(path, k, run.config.train.embedding_dim);
        }
        return cache[k].get();
    };

    UnlearnOutcome out;
    out.result = unlearn(run.split, run.config.train, run.config.sampling, run.config.log,
                         run.trace, logs, ucfg, workers);

    std::set<std::uint32_t> removed(ucfg.targets.begin(), ucfg.targets.end());
    std::vector<std::uint32_t> remaining;
    for (std::uint32_t u = 0; u < run.split.user_count; ++u)
        if (!removed.count(u)) remaining.push_back(u);
    out.eval = evaluate(run.config.train, out.result.global, out.result.users, run.split,
                        run.config.train.seed, remaining);

    if (write_outputs) {
        out.out_dir = run.dir + "/" + unlearn_subdir(ucfg);
        std::filesystem::create_directories(out.out_dir);
        save_checkpoint(out.out_dir + "/checkpoint.bin", out.result.global);
        save_user_embeddings(out.out_dir + "/user_embeddings.bin", out.result.users);
        write_json(out.out_dir + "/timing.json",
                   {{"mode", to_string(ucfg.mode)},
                    {"lambda", ucfg.speedup_factor},
                    {"seconds_total", out.result.seconds_total},
                    {"seconds_per_round", out.result.seconds_per_round}});
        write_json(out.out_dir + "/evaluation.json",
                   {{"method", to_string(ucfg.mode)},
                    {"dataset", run.config.raw.at("dataset").at("kind")},
                    {"model", to_string(run.config.train.model)},
                    {"malicious_fraction",
                     run.malicious.empty() ? 0.0 : run.config.attack.malicious_fraction},
                    {"lambda", ucfg.speedup_factor},
                    {"seconds_total", out.result.seconds_total},
                    {"hit", out.eval.hit_percent},
                    {"ndcg", out.eval.ndcg_percent},
                    {"tasks", out.eval.task_count}});
    }
    return out;
}

// Merges evaluation rows from run directories (and their unlearn
// subdirectories) into one accuracy CSV and one timing CSV.
inline void cmd_report(const std::vector<std::string>& run_dirs, std::ostream& table_csv,
                       std::ostream& timing_csv) {
    if (run_dirs.empty()) throw ConfigError("report: no run directories given");
    table_csv << "dataset,model,malicious_fraction,method,hit,ndcg\n";
    timing_csv << "dataset,model,method,lambda,seconds_total\n";
    std::string first_dataset;
    for (const std::string& dir : run_dirs) {
        std::vector<std::string> eval_files;
        if (std::filesystem::exists(dir + "/evaluation.json"))
            eval_files.push_back(dir + "/evaluation.json");
        for (const auto& entry : std::filesystem::directory_iterator(dir)) {
            if (entry.is_directory() &&
                std::filesystem::exists(entry.path() / "evaluation.json"))
                eval_files.push_back((entry.path() / "evaluation.json").string());
        }
        for (const std::string& file : eval_files) {
            nlohmann::json j = read_json(file);
            std::string dataset = j.at("dataset").get<std::string>();
            if (first_dataset.empty()) first_dataset = dataset;
            else if (dataset != first_dataset)
                std::cerr << "fru: warning: mixing datasets in one report ("
                          << first_dataset << " vs " << dataset << ")\n";
            table_csv << dataset << "," << j.at("model").get<std::string>() << ","
                      << j.value("malicious_fraction", 0.0) << ","
                      << j.at("method").get<std::string>() << "," << j.at("hit").get<double>()
                      << "," << j.at("ndcg").get<double>() << "\n";
            if (j.contains("seconds_total"))
                timing_csv << dataset << "," << j.at("model").get<std::string>() << ","
                           << j.at("method").get<std::string>() << ","
                           << j.value("lambda", 0.0) << ","
                           << j.at("seconds_total").get<double>() << "\n";
        }
    }
}

}  // namespace fru
