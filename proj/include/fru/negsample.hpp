#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <stdexcept>
#include <vector>

#include "fru/dataset.hpp"
#include "fru/model.hpp"
#include "fru/rng.hpp"
#include "fru/tensor.hpp"

namespace fru {

enum class SamplingStrategy { random, user_based, item_based, mixed };

inline std::string to_string(SamplingStrategy s) {
    switch (s) {
        case SamplingStrategy::random: return "random";
        case SamplingStrategy::user_based: return "user_based";
        case SamplingStrategy::item_based: return "item_based";
        case SamplingStrategy::mixed: return "mixed";
    }
    return "?";
}

struct SamplingConfig {
    double pool_percent = 10.0;  // R: each side pool is R% of |V|
    double shrink_factor = 0.5;  // beta
    SamplingStrategy strategy = SamplingStrategy::mixed;

    void validate() const {
        if (pool_percent <= 0.0 || pool_percent > 50.0)
            throw std::invalid_argument("pool_percent must be in (0,50]");
        if (shrink_factor <= 0.0 || shrink_factor > 1.0)
            throw std::invalid_argument("shrink_factor must be in (0,1]");
    }
};

// Element-wise mean of the user's interacted items' current embeddings.
inline std::vector<double> item_centroid(const LocalDataset& local, const GlobalParameters& g) {
    if (local.positives.empty()) throw DataError("item_centroid: no positives");
    std::vector<double> c(g.embedding_dim, 0.0);
    for (std::uint32_t j : local.positives) {
        const double* v = g.item_ptr(j);
        for (std::size_t i = 0; i < g.embedding_dim; ++i) c[i] += v[i];
    }
    scale(c, 1.0 / double(local.positives.size()));
    return c;
}

namespace detail {

// Non-interacted items nearest to `anchor` in Euclidean distance; ties broken
// by ascending item id.
inline std::vector<std::uint32_t> nearest_pool(const LocalDataset& local,
                                               const GlobalParameters& g,
                                               const std::vector<double>& anchor,
                                               std::size_t pool_size) {
    std::vector<std::pair<double, std::uint32_t>> dist;
    dist.reserve(g.item_count - local.positives.size());
    for (std::uint32_t item = 0; item < g.item_count; ++item) {
        if (local.is_positive(item)) continue;
        const double* v = g.item_ptr(item);
        double d2 = 0.0;
        for (std::size_t i = 0; i < g.embedding_dim; ++i) {
            double diff = v[i] - anchor[i];
            d2 += diff * diff;
        }
        dist.emplace_back(d2, item);
    }
    pool_size = std::min(pool_size, dist.size());
    std::partial_sort(dist.begin(), dist.begin() + pool_size, dist.end());
    std::vector<std::uint32_t> pool(pool_size);
    for (std::size_t i = 0; i < pool_size; ++i) pool[i] = dist[i].second;
    std::sort(pool.begin(), pool.end());
    return pool;
}

inline std::vector<std::uint32_t> sample_without_replacement(std::vector<std::uint32_t> pool,
                                                             std::size_t count, Rng& rng) {
    if (count >= pool.size()) {
        if (count > pool.size()) {
            static std::atomic<bool> warned{false};
            if (!warned.exchange(true))
                std::cerr << "fru: negative pool smaller than requested sample; "
                             "returning the whole pool\n";
        }
        std::sort(pool.begin(), pool.end());
        return pool;
    }
    // Partial Fisher-Yates over the pool (already in a deterministic order).
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
        std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(count);
    std::sort(pool.begin(), pool.end());
    return pool;
}

}  // namespace detail

// Number of negatives requested: round(N * beta) with N = n * |positives|.
inline std::size_t negative_sample_count(const LocalDataset& local, const TrainConfig& train_cfg,
                                         const SamplingConfig& cfg) {
    double n = double(train_cfg.negative_ratio) * double(local.positives.size());
    auto count = static_cast<std::size_t>(std::llround(n * cfg.shrink_factor));
    return std::max<std::size_t>(count, 1);
}

// Semi-hard negative sampling: build the user-side and centroid-side pools of
// the nearest non-interacted items (R% of |V| each) and draw uniformly from
// their union. Baseline strategies reuse the same machinery with one pool or
// the full complement.
inline std::vector<std::uint32_t> sample_negatives(const LocalDataset& local,
                                                   const GlobalParameters& g,
                                                   const PrivateParameters& p,
                                                   const TrainConfig& train_cfg,
                                                   const SamplingConfig& cfg, Rng& rng) {
    cfg.validate();
    std::size_t want = negative_sample_count(local, train_cfg, cfg);
    std::size_t pool_size = static_cast<std::size_t>(
        std::llround(cfg.pool_percent / 100.0 * double(g.item_count)));
    pool_size = std::max<std::size_t>(pool_size, 1);

    std::vector<std::uint32_t> pool;
    switch (cfg.strategy) {
        case SamplingStrategy::random: {
            pool.reserve(g.item_count - local.positives.size());
            for (std::uint32_t item = 0; item < g.item_count; ++item)
                if (!local.is_positive(item)) pool.push_back(item);
            break;
        }
        case SamplingStrategy::user_based:
            pool = detail::nearest_pool(local, g, p.user_embedding, pool_size);
            break;
        case SamplingStrategy::item_based:
            pool = detail::nearest_pool(local, g, item_centroid(local, g), pool_size);
            break;
        case SamplingStrategy::mixed: {
            auto user_pool = detail::nearest_pool(local, g, p.user_embedding, pool_size);
            auto item_pool = detail::nearest_pool(local, g, item_centroid(local, g), pool_size);
            pool.resize(user_pool.size() + item_pool.size());
            auto end = std::set_union(user_pool.begin(), user_pool.end(), item_pool.begin(),
                                      item_pool.end(), pool.begin());
            pool.erase(end, pool.end());
            break;
        }
    }
    return detail::sample_without_replacement(std::move(pool), want, rng);
}

}  // namespace fru
