#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fru/dataset.hpp"
#include "fru/devicelog.hpp"
#include "fru/model.hpp"
#include "fru/negsample.hpp"
#include "fru/rng.hpp"
#include "fru/tensor.hpp"

namespace fru {

// One client's one-round delta. user_delta is private and must be stripped
// before the record reaches the server.
struct UpdateRecord {
    std::uint32_t round = 0;
    std::uint32_t client_id = 0;
    SparseRows item_deltas;
    std::vector<std::vector<double>> dense_deltas;
    std::vector<double> user_delta;
};

inline UpdateRecord strip_private(UpdateRecord rec) {
    rec.user_delta.clear();
    return rec;
}

struct SelectionTrace {
    struct Round {
        std::uint32_t round = 0;
        std::vector<std::uint32_t> clients;       // ascending
        std::vector<std::uint64_t> client_seeds;  // parallel to clients
    };
    std::uint64_t global_seed = 0;
    std::vector<Round> rounds;  // rounds contiguous from 1
};

inline nlohmann::json trace_to_json(const SelectionTrace& trace) {
    nlohmann::json j;
    j["global_seed"] = trace.global_seed;
    j["rounds"] = nlohmann::json::array();
    for (const auto& r : trace.rounds)
        j["rounds"].push_back({{"round", r.round}, {"clients", r.clients},
                               {"seeds", r.client_seeds}});
    return j;
}

inline SelectionTrace trace_from_json(const nlohmann::json& j) {
    SelectionTrace trace;
    trace.global_seed = j.at("global_seed").get<std::uint64_t>();
    for (const auto& r : j.at("rounds")) {
        SelectionTrace::Round round;
        round.round = r.at("round").get<std::uint32_t>();
        round.clients = r.at("clients").get<std::vector<std::uint32_t>>();
        round.client_seeds = r.at("seeds").get<std::vector<std::uint64_t>>();
        trace.rounds.push_back(std::move(round));
    }
    return trace;
}

// floor(b% * count) clients, at least one, uniform without replacement,
// returned in ascending order.
inline std::vector<std::uint32_t> select_clients(const std::vector<std::uint32_t>& eligible,
                                                 double fraction_percent, Rng& rng) {
    if (fraction_percent <= 0.0 || fraction_percent > 100.0)
        throw std::invalid_argument("fraction_percent must be in (0,100]");
    std::size_t count = static_cast<std::size_t>(
        std::floor(fraction_percent / 100.0 * double(eligible.size())));
    count = std::clamp<std::size_t>(count, 1, eligible.size());
    std::vector<std::uint32_t> pool = eligible;
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
        std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(count);
    std::sort(pool.begin(), pool.end());
    return pool;
}

// Local training pass: sample negatives, run `epochs` epochs of SGD on
// positives plus negatives, return the delta record. The caller applies
// user_delta to its private state.
inline UpdateRecord client_update(const TrainConfig& cfg, const SamplingConfig& sample_cfg,
                                  const LocalDataset& local, const GlobalParameters& received,
                                  const PrivateParameters& user, std::uint32_t round,
                                  std::uint64_t seed, std::size_t epochs,
                                  std::vector<std::uint32_t>* sampled_negatives = nullptr) {
    UpdateRecord rec;
    rec.round = round;
    rec.client_id = local.owner;

    GlobalParameters work = received;
    PrivateParameters priv = user;

    Rng rng(seed);
    std::vector<std::uint32_t> negatives =
        sample_negatives(local, received, user, cfg, sample_cfg, rng);
    if (sampled_negatives) *sampled_negatives = negatives;

    std::vector<BatchExample> examples;
    examples.reserve(local.positives.size() + negatives.size());
    for (std::uint32_t item : local.positives) examples.push_back({item, 1});
    for (std::uint32_t item : negatives) examples.push_back({item, 0});

    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        std::shuffle(examples.begin(), examples.end(), rng);
        for (std::size_t i = 0; i < examples.size(); i += cfg.batch_size) {
            std::size_t end = std::min(i + cfg.batch_size, examples.size());
            std::vector<BatchExample> batch(examples.begin() + i, examples.begin() + end);
            local_train_step(cfg, work, priv, local, batch);
        }
    }

    // Deltas are restricted to the touched rows (positives plus sampled
    // negatives); everything else is bitwise unchanged by construction.
    std::size_t e = received.embedding_dim;
    auto record_row = [&](std::uint32_t item) {
        std::vector<double> delta(e);
        const double* after = work.item_ptr(item);
        const double* before = received.item_ptr(item);
        for (std::size_t i = 0; i < e; ++i) delta[i] = after[i] - before[i];
        rec.item_deltas.emplace(item, std::move(delta));
    };
    for (std::uint32_t item : local.positives) record_row(item);
    for (std::uint32_t item : negatives) record_row(item);

    rec.dense_deltas.reserve(received.dense.size());
    for (std::size_t t = 0; t < received.dense.size(); ++t) {
        std::vector<double> delta(received.dense[t].size());
        for (std::size_t i = 0; i < delta.size(); ++i)
            delta[i] = work.dense[t].data[i] - received.dense[t].data[i];
        rec.dense_deltas.push_back(std::move(delta));
    }

    rec.user_delta.resize(e);
    for (std::size_t i = 0; i < e; ++i)
        rec.user_delta[i] = priv.user_embedding[i] - user.user_embedding[i];
    return rec;
}

// Sparse-aware average: each item row divides by the number of clients that
// touched it; dense tensors divide by the number of participants. Summation
// order is ascending client id.
struct AggregateDelta {
    SparseRows item_rows;
    std::vector<std::vector<double>> dense;
};

inline AggregateDelta aggregate(const std::vector<UpdateRecord>& updates) {
    if (updates.empty()) throw std::invalid_argument("aggregate: empty update list");
    std::vector<const UpdateRecord*> ordered;
    ordered.reserve(updates.size());
    for (const auto& u : updates) ordered.push_back(&u);
    std::sort(ordered.begin(), ordered.end(),
              [](const UpdateRecord* a, const UpdateRecord* b) {
                  return a->client_id < b->client_id;
              });

    AggregateDelta agg;
    std::map<std::uint32_t, std::size_t> touch_count;
    for (const UpdateRecord* u : ordered) {
        for (const auto& [item, delta] : u->item_deltas) {
            auto [it, inserted] = agg.item_rows.try_emplace(item, delta.size(), 0.0);
            axpy(1.0, delta, it->second);
            ++touch_count[item];
        }
    }
    for (auto& [item, sum] : agg.item_rows) scale(sum, 1.0 / double(touch_count[item]));

    agg.dense.resize(ordered.front()->dense_deltas.size());
    for (std::size_t t = 0; t < agg.dense.size(); ++t)
        agg.dense[t].assign(ordered.front()->dense_deltas[t].size(), 0.0);
    for (const UpdateRecord* u : ordered)
        for (std::size_t t = 0; t < agg.dense.size(); ++t) axpy(1.0, u->dense_deltas[t], agg.dense[t]);
    for (auto& tensor : agg.dense) scale(tensor, 1.0 / double(ordered.size()));
    return agg;
}

inline void apply_aggregate(GlobalParameters& g, const AggregateDelta& agg) {
    for (const auto& [item, delta] : agg.item_rows) {
        double* row = g.item_ptr(static_cast<std::uint32_t>(item));
        for (std::size_t i = 0; i < delta.size(); ++i) row[i] += delta[i];
    }
    for (std::size_t t = 0; t < agg.dense.size(); ++t)
        axpy(1.0, agg.dense[t], g.dense[t].data);
}

struct FederationRun {
    GlobalParameters global;
    std::vector<PrivateParameters> users;  // indexed by client id
    SelectionTrace trace;
};

struct TrainHooks {
    // Mutates a record before it is logged and sent (poisoning attackers).
    std::function<void(std::uint32_t round, std::uint32_t client, UpdateRecord&)> transform;
    // Called after each round with the new global parameters.
    std::function<void(std::uint32_t round, const GlobalParameters&,
                       const std::vector<PrivateParameters>&)> on_round_end;
};

// Full federated training: T rounds of select / local-train / log / aggregate.
// Device logs are written under log_dir when it is nonempty. Client work
// within a round is pure given its seed, so worker parallelism never changes
// the result; aggregation order is fixed.
inline FederationRun train(const SplitDataset& split, const TrainConfig& cfg,
                           const SamplingConfig& sample_cfg, const LogConfig& log_cfg,
                           const std::string& log_dir,
                           const std::vector<std::uint32_t>& eligible,
                           const TrainHooks& hooks = {}, std::size_t workers = 1) {
    cfg.validate();
    sample_cfg.validate();
    log_cfg.validate();
    for (std::uint32_t k : eligible)
        if (k >= split.user_count || split.train[k].positives.empty())
            throw DataError("client " + std::to_string(k) + " cannot participate");

    FederationRun run;
    run.global = init_global_parameters(cfg, split.item_count);
    run.users.resize(split.user_count);
    for (std::uint32_t k = 0; k < split.user_count; ++k)
        run.users[k] = init_user_embedding(cfg, k);
    run.trace.global_seed = cfg.seed;

    std::vector<std::unique_ptr<DeviceLog>> logs(split.user_count);
    auto log_for = [&](std::uint32_t k) -> DeviceLog& {
        if (!logs[k]) {
            std::string path;
            if (!log_dir.empty()) {
                std::filesystem::create_directories(log_dir);
                path = log_dir + "/client_" + std::to_string(k) + ".bin";
            }
            logs[k] = std::make_unique<DeviceLog>(path, k, cfg.embedding_dim);
        }
        return *logs[k];
    };

    for (std::uint32_t t = 1; t <= cfg.global_rounds; ++t) {
        Rng select_rng(derive_seed(cfg.seed, "select", t, 0));
        std::vector<std::uint32_t> participants =
            select_clients(eligible, cfg.client_fraction_percent, select_rng);

        SelectionTrace::Round round;
        round.round = t;
        round.clients = participants;
        for (std::uint32_t k : participants)
            round.client_seeds.push_back(derive_seed(cfg.seed, "client", t, k));

        std::vector<UpdateRecord> records(participants.size());
        auto run_client = [&](std::size_t idx) {
            std::uint32_t k = participants[idx];
            records[idx] = client_update(cfg, sample_cfg, split.train[k], run.global,
                                         run.users[k], t, round.client_seeds[idx],
                                         cfg.local_epochs);
            if (hooks.transform) hooks.transform(t, k, records[idx]);
        };
        if (workers <= 1) {
            for (std::size_t i = 0; i < participants.size(); ++i) run_client(i);
        } else {
            std::vector<std::future<void>> futures;
            std::size_t stride = (participants.size() + workers - 1) / workers;
            for (std::size_t w = 0; w < workers; ++w) {
                std::size_t begin = w * stride;
                std::size_t end = std::min(begin + stride, participants.size());
                if (begin >= end) break;
                futures.push_back(std::async(std::launch::async, [&, begin, end] {
                    for (std::size_t i = begin; i < end; ++i) run_client(i);
                }));
            }
            for (auto& f : futures) f.get();
        }

        std::vector<UpdateRecord> server_records;
        server_records.reserve(records.size());
        for (std::size_t i = 0; i < records.size(); ++i) {
            std::uint32_t k = participants[i];
            UpdateRecord& rec = records[i];
            // Private update is applied on-device before the server aggregates.
            axpy(1.0, rec.user_delta, run.users[k].user_embedding);

            SparseRows filtered;
            if (log_cfg.selection_mode == SelectionMode::importance) {
                filtered = select_important(rec.item_deltas, log_cfg.keep_fraction);
            } else {
                Rng sel_rng(derive_seed(cfg.seed, "logsel", t, k));
                filtered = select_random(rec.item_deltas, log_cfg.keep_fraction, sel_rng);
            }
            log_for(k).append(t, filtered, rec.dense_deltas, run.users[k].user_embedding);
            server_records.push_back(strip_private(rec));
        }

        apply_aggregate(run.global, aggregate(server_records));
        run.trace.rounds.push_back(std::move(round));
        if (hooks.on_round_end) hooks.on_round_end(t, run.global, run.users);
    }
    return run;
}

}  // namespace fru
