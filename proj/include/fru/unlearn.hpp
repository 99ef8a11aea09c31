#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "fru/devicelog.hpp"
#include "fru/federation.hpp"
#include "fru/model.hpp"
#include "fru/tensor.hpp"

namespace fru {

enum class UnlearnMode { fru, fru_without_ius, fedremove, retrain };

inline std::string to_string(UnlearnMode m) {
    switch (m) {
        case UnlearnMode::fru: return "fru";
        case UnlearnMode::fru_without_ius: return "fru-no-ius";
        case UnlearnMode::fedremove: return "fedremove";
        case UnlearnMode::retrain: return "retrain";
    }
    return "?";
}

struct UnlearnConfig {
    double speedup_factor = 0.1;  // lambda
    std::vector<std::uint32_t> targets;
    UnlearnMode mode = UnlearnMode::fru;

    std::size_t replay_epochs(std::size_t local_epochs) const {
        auto epochs = static_cast<std::size_t>(
            std::llround(speedup_factor * double(local_epochs)));
        return std::max<std::size_t>(epochs, 1);
    }

    void validate() const {
        if (targets.empty()) throw std::invalid_argument("unlearn targets must be nonempty");
        if (speedup_factor <= 0.0 || speedup_factor > 1.0)
            throw std::invalid_argument("speedup_factor must be in (0,1]");
    }
};

// New updates' direction with the original updates' length, per tensor. The
// item table is flattened over the union of touched rows; rows absent from
// one side count as zero.
inline AggregateDelta calibrate(const AggregateDelta& old_agg, const AggregateDelta& new_agg) {
    for (const auto& [item, row] : old_agg.item_rows)
        if (!all_finite(row)) throw std::invalid_argument("calibrate: non-finite input");
    for (const auto& [item, row] : new_agg.item_rows)
        if (!all_finite(row)) throw std::invalid_argument("calibrate: non-finite input");

    AggregateDelta out;
    double old_sq = 0.0, new_sq = 0.0;
    for (const auto& [item, row] : old_agg.item_rows) old_sq += squared_norm(row);
    for (const auto& [item, row] : new_agg.item_rows) new_sq += squared_norm(row);
    double item_scale = new_sq > 0.0 ? std::sqrt(old_sq / new_sq) : 0.0;
    for (const auto& [item, row] : new_agg.item_rows) {
        std::vector<double> scaled = row;
        scale(scaled, item_scale);
        out.item_rows.emplace(item, std::move(scaled));
    }
    // Rows only in the old aggregate correspond to zero rows in the new one;
    // their calibrated value is zero and applying them is a no-op, so they
    // are omitted.

    out.dense.resize(new_agg.dense.size());
    for (std::size_t t = 0; t < new_agg.dense.size(); ++t) {
        if (!all_finite(new_agg.dense[t]) ||
            (t < old_agg.dense.size() && !all_finite(old_agg.dense[t])))
            throw std::invalid_argument("calibrate: non-finite input");
        double old_norm = t < old_agg.dense.size() ? norm(old_agg.dense[t]) : 0.0;
        double new_norm = norm(new_agg.dense[t]);
        double s = new_norm > 0.0 ? old_norm / new_norm : 0.0;
        out.dense[t] = new_agg.dense[t];
        scale(out.dense[t], s);
    }
    return out;
}

struct UnlearnResult {
    GlobalParameters global;
    std::vector<PrivateParameters> users;
    std::vector<double> seconds_per_round;
    double seconds_total = 0.0;
    UnlearnMode mode = UnlearnMode::fru;
    double speedup_factor = 0.0;
};

inline std::vector<std::uint32_t> eligible_clients(const SplitDataset& split) {
    std::vector<std::uint32_t> out;
    for (std::uint32_t k = 0; k < split.user_count; ++k)
        if (!split.train[k].positives.empty()) out.push_back(k);
    return out;
}

// Log access during unlearning. Returns nullptr when the client has no log
// at all; removed clients are never queried.
using LogAccessor = std::function<const DeviceLog*(std::uint32_t client)>;

namespace detail {

inline UpdateRecord record_from_entry(std::uint32_t client, const LogEntry& entry) {
    UpdateRecord rec;
    rec.round = entry.round;
    rec.client_id = client;
    rec.item_deltas = entry.item_deltas;
    rec.dense_deltas = entry.dense_deltas;
    return rec;
}

}  // namespace detail

// Rollback-and-calibrate reconstruction (plus the Retrain and FedRemove
// baselines). Replays the original selection trace with the target clients
// removed; their logs are never read.
inline UnlearnResult unlearn(const SplitDataset& split, const TrainConfig& cfg,
                             const SamplingConfig& sample_cfg, const LogConfig& log_cfg,
                             const SelectionTrace& trace, const LogAccessor& logs,
                             const UnlearnConfig& ucfg, std::size_t workers = 1) {
    ucfg.validate();
    for (std::uint32_t k : ucfg.targets)
        if (k >= split.user_count)
            throw DataError("unknown unlearn target " + std::to_string(k));
    std::set<std::uint32_t> removed(ucfg.targets.begin(), ucfg.targets.end());

    UnlearnResult result;
    result.mode = ucfg.mode;
    result.speedup_factor = ucfg.speedup_factor;
    auto clock_start = std::chrono::steady_clock::now();

    if (ucfg.mode == UnlearnMode::retrain) {
        std::vector<std::uint32_t> eligible;
        for (std::uint32_t k : eligible_clients(split))
            if (!removed.count(k)) eligible.push_back(k);
        FederationRun run = train(split, cfg, sample_cfg, log_cfg, "", eligible, {}, workers);
        result.global = std::move(run.global);
        result.users = std::move(run.users);
        result.seconds_total = std::chrono::duration<double>(
            std::chrono::steady_clock::now() - clock_start).count();
        return result;
    }

    result.global = init_global_parameters(cfg, split.item_count);
    result.users.resize(split.user_count);
    for (std::uint32_t k = 0; k < split.user_count; ++k)
        result.users[k] = init_user_embedding(cfg, k);

    auto stored_records_for = [&](const SelectionTrace::Round& round) {
        std::vector<UpdateRecord> records;
        for (std::uint32_t k : round.clients) {
            if (removed.count(k)) continue;
            const DeviceLog* log = logs(k);
            if (!log)
                throw DataError("missing device log for client " + std::to_string(k));
            auto entry = log->fetch(round.round);
            if (!entry) continue;  // client state says it never participated
            records.push_back(detail::record_from_entry(k, *entry));
        }
        return records;
    };

    if (ucfg.mode == UnlearnMode::fedremove) {
        // Uncalibrated replay of the remaining clients' stored updates.
        for (const auto& round : trace.rounds) {
            auto t0 = std::chrono::steady_clock::now();
            auto records = stored_records_for(round);
            if (!records.empty()) apply_aggregate(result.global, aggregate(records));
            result.seconds_per_round.push_back(std::chrono::duration<double>(
                std::chrono::steady_clock::now() - t0).count());
        }
        // User embeddings follow the stored (uncalibrated) trajectory.
        for (std::uint32_t k = 0; k < split.user_count; ++k) {
            if (removed.count(k)) continue;
            const DeviceLog* log = logs(k);
            if (log && !log->entries().empty())
                result.users[k].user_embedding = log->entries().back().user_embedding;
        }
        result.seconds_total = std::chrono::duration<double>(
            std::chrono::steady_clock::now() - clock_start).count();
        return result;
    }

    // FRU proper (fru and fru_without_ius share the replay; the difference is
    // what the training-time log kept).
    std::size_t epochs = ucfg.replay_epochs(cfg.local_epochs);
    for (const auto& round : trace.rounds) {
        auto t0 = std::chrono::steady_clock::now();
        auto stored = stored_records_for(round);
        if (stored.empty()) {
            // Every participant was removed (or unlogged); the round is skipped.
            result.seconds_per_round.push_back(std::chrono::duration<double>(
                std::chrono::steady_clock::now() - t0).count());
            continue;
        }
        if (round.round == 1) {
            // Bootstrap: the initial parameters are clean, so stored round-1
            // deltas of the remaining clients apply directly.
            apply_aggregate(result.global, aggregate(stored));
            result.seconds_per_round.push_back(std::chrono::duration<double>(
                std::chrono::steady_clock::now() - t0).count());
            continue;
        }

        std::vector<std::uint32_t> participants;
        for (const UpdateRecord& rec : stored) participants.push_back(rec.client_id);

        std::vector<UpdateRecord> fresh(participants.size());
        auto run_client = [&](std::size_t idx) {
            std::uint32_t k = participants[idx];
            std::uint64_t seed = derive_seed(trace.global_seed, "unlearn", round.round, k);
            fresh[idx] = client_update(cfg, sample_cfg, split.train[k], result.global,
                                       result.users[k], round.round, seed, epochs);
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

        std::vector<UpdateRecord> fresh_server;
        fresh_server.reserve(fresh.size());
        for (std::size_t i = 0; i < fresh.size(); ++i) {
            // Private embeddings are rebuilt purely from the fresh updates.
            axpy(1.0, fresh[i].user_delta, result.users[participants[i]].user_embedding);
            fresh_server.push_back(strip_private(fresh[i]));
        }

        AggregateDelta calibrated = calibrate(aggregate(stored), aggregate(fresh_server));
        apply_aggregate(result.global, calibrated);
        result.seconds_per_round.push_back(std::chrono::duration<double>(
            std::chrono::steady_clock::now() - t0).count());
    }

    result.seconds_total = std::chrono::duration<double>(
        std::chrono::steady_clock::now() - clock_start).count();
    return result;
}

}  // namespace fru
