#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <unordered_set>
#include <vector>

#include "fru/dataset.hpp"
#include "fru/model.hpp"
#include "fru/rng.hpp"

namespace fru {

// One leave-one-out ranking task: the held-out positive against 99 seeded
// non-interacted candidates.
struct RankingTask {
    std::uint32_t user_id = 0;
    std::uint32_t target_item = 0;
    std::vector<std::uint32_t> candidates;  // distinct, includes the target
};

constexpr std::size_t kEvalNegatives = 99;
constexpr std::size_t kEvalK = 10;

inline RankingTask make_ranking_task(const SplitDataset& split, std::uint32_t user,
                                     std::uint32_t target, std::uint64_t seed) {
    RankingTask task;
    task.user_id = user;
    task.target_item = target;
    std::unordered_set<std::uint32_t> excluded(split.train[user].positives.begin(),
                                               split.train[user].positives.end());
    for (std::uint32_t t : split.test[user]) excluded.insert(t);

    Rng rng(derive_seed(seed, "eval", user, target));
    std::uniform_int_distribution<std::uint32_t> pick(0, split.item_count - 1);
    std::unordered_set<std::uint32_t> chosen;
    std::size_t want = std::min<std::size_t>(kEvalNegatives,
                                             split.item_count - excluded.size());
    while (chosen.size() < want) {
        std::uint32_t item = pick(rng);
        if (excluded.count(item) || chosen.count(item)) continue;
        chosen.insert(item);
        task.candidates.push_back(item);
    }
    task.candidates.push_back(target);
    return task;
}

struct RankOutcome {
    int hit = 0;       // target in top K
    double ndcg = 0.0; // 1/log2(rank+1) if rank <= K
    std::size_t rank = 0;  // 1-based
};

// Rank of the target among candidate scores; ties broken by ascending item id
// (an item that ties the target and has a smaller id outranks it).
inline RankOutcome rank_outcome(const std::vector<double>& scores,
                                const std::vector<std::uint32_t>& candidates,
                                std::uint32_t target, std::size_t k = kEvalK) {
    std::size_t target_idx = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i)
        if (candidates[i] == target) target_idx = i;
    double target_score = scores[target_idx];
    std::size_t rank = 1;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (i == target_idx) continue;
        if (scores[i] > target_score ||
            (scores[i] == target_score && candidates[i] < target))
            ++rank;
    }
    RankOutcome out;
    out.rank = rank;
    if (rank <= k) {
        out.hit = 1;
        out.ndcg = 1.0 / std::log2(double(rank) + 1.0);
    }
    return out;
}

inline RankOutcome rank_and_score(const TrainConfig& cfg, const GlobalParameters& g,
                                  const PrivateParameters& p, const LocalDataset& local,
                                  const RankingTask& task, std::size_t k = kEvalK) {
    std::vector<double> scores(task.candidates.size());
    LightGcnPropagation prop;
    const LightGcnPropagation* prop_ptr = nullptr;
    if (cfg.model == ModelKind::lightgcn) {
        prop = lightgcn_propagate(local, g, p, cfg.lightgcn_layers);
        prop_ptr = &prop;
    }
    for (std::size_t i = 0; i < task.candidates.size(); ++i)
        scores[i] = model_score(cfg, g, p, local, task.candidates[i], prop_ptr);
    return rank_outcome(scores, task.candidates, task.target_item, k);
}

struct EvalResult {
    double hit_percent = 0.0;
    double ndcg_percent = 0.0;
    std::size_t task_count = 0;
};

// Mean HR@10 / NDCG@10 over all (user, held-out positive) tasks of the given
// users, as percentages. Evaluation is read-only.
inline EvalResult evaluate(const TrainConfig& cfg, const GlobalParameters& g,
                           const std::vector<PrivateParameters>& users,
                           const SplitDataset& split, std::uint64_t seed,
                           const std::vector<std::uint32_t>& include_users) {
    EvalResult res;
    double hit_sum = 0.0, ndcg_sum = 0.0;
    for (std::uint32_t u : include_users) {
        if (!split.evaluable(u) || split.train[u].positives.empty()) continue;
        for (std::uint32_t target : split.test[u]) {
            RankingTask task = make_ranking_task(split, u, target, seed);
            RankOutcome out = rank_and_score(cfg, g, users[u], split.train[u], task);
            hit_sum += out.hit;
            ndcg_sum += out.ndcg;
            ++res.task_count;
        }
    }
    if (res.task_count > 0) {
        res.hit_percent = hit_sum / double(res.task_count) * 100.0;
        res.ndcg_percent = ndcg_sum / double(res.task_count) * 100.0;
    }
    return res;
}

inline EvalResult evaluate_all(const TrainConfig& cfg, const GlobalParameters& g,
                               const std::vector<PrivateParameters>& users,
                               const SplitDataset& split, std::uint64_t seed) {
    std::vector<std::uint32_t> all(split.user_count);
    for (std::uint32_t u = 0; u < split.user_count; ++u) all[u] = u;
    return evaluate(cfg, g, users, split, seed, all);
}

}  // namespace fru
