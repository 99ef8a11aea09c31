#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <vector>

#include "fru/federation.hpp"
#include "fru/rng.hpp"
#include "fru/tensor.hpp"

namespace fru {

struct AttackConfig {
    double malicious_fraction = 0.10;  // of all clients, fixed at run start
    double gamma_min = 0.5;
    double gamma_max = 1.5;
    double noise_scale = 1.0;

    void validate() const {
        if (malicious_fraction <= 0.0 || malicious_fraction >= 1.0)
            throw std::invalid_argument("malicious_fraction must be in (0,1)");
        if (gamma_min <= 0.0 || gamma_max < gamma_min)
            throw std::invalid_argument("gamma bounds must be positive and ordered");
        if (noise_scale < 0.0) throw std::invalid_argument("noise_scale must be >= 0");
    }
};

namespace detail {

struct MeanStd {
    double mean = 0.0;
    double stddev = 0.0;
};

inline MeanStd tensor_stats(const std::vector<double>& v) {
    MeanStd s;
    if (v.empty()) return s;
    for (double x : v) s.mean += x;
    s.mean /= double(v.size());
    double var = 0.0;
    for (double x : v) var += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(var / double(v.size()));
    return s;
}

inline void flip_tensor(std::vector<double>& t, double gamma, double noise_scale, Rng& rng) {
    MeanStd s = tensor_stats(t);
    std::normal_distribution<double> noise(s.mean, s.stddev);
    for (double& x : t) {
        double mu = (noise_scale > 0.0 && s.stddev > 0.0) ? noise_scale * noise(rng)
                                                          : noise_scale * s.mean;
        x = -gamma * x + mu;
    }
}

}  // namespace detail

// Gradient-flipping poisoning: every global-parameter delta tensor M becomes
// -gamma*M + mu, one gamma per (round, client), mu element-wise normal with
// the honest tensor's own mean and stddev. The private user_delta stays
// honest. The item table counts as one tensor for the statistics, matching
// the calibration granularity.
inline void poison(UpdateRecord& rec, const AttackConfig& cfg, Rng& rng) {
    cfg.validate();
    std::uniform_real_distribution<double> gamma_dist(cfg.gamma_min, cfg.gamma_max);
    double gamma = gamma_dist(rng);

    std::vector<double> flat;
    for (const auto& [item, delta] : rec.item_deltas)
        flat.insert(flat.end(), delta.begin(), delta.end());
    detail::MeanStd s = detail::tensor_stats(flat);
    std::normal_distribution<double> noise(s.mean, s.stddev);
    for (auto& [item, delta] : rec.item_deltas) {
        for (double& x : delta) {
            double mu = (cfg.noise_scale > 0.0 && s.stddev > 0.0)
                            ? cfg.noise_scale * noise(rng)
                            : cfg.noise_scale * s.mean;
            x = -gamma * x + mu;
        }
    }
    for (auto& tensor : rec.dense_deltas)
        detail::flip_tensor(tensor, gamma, cfg.noise_scale, rng);

    for (const auto& [item, delta] : rec.item_deltas)
        if (!all_finite(delta)) throw std::runtime_error("poison produced non-finite delta");
}

// Fixed uniform subset chosen once per experiment; these clients both attack
// during training and become the unlearning targets.
inline std::vector<std::uint32_t> designate_malicious(std::uint32_t user_count, double fraction,
                                                      Rng& rng) {
    if (fraction <= 0.0 || fraction >= 1.0)
        throw std::invalid_argument("malicious fraction must be in (0,1)");
    std::size_t count = static_cast<std::size_t>(std::floor(fraction * double(user_count)));
    count = std::max<std::size_t>(count, 1);
    if (count >= user_count)
        throw std::invalid_argument("malicious set would cover all clients");
    std::vector<std::uint32_t> pool(user_count);
    for (std::uint32_t i = 0; i < user_count; ++i) pool[i] = i;
    for (std::size_t i = 0; i < count; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
        std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(count);
    std::sort(pool.begin(), pool.end());
    return pool;
}

// Training hook: poisons exactly the designated clients' records.
inline std::function<void(std::uint32_t, std::uint32_t, UpdateRecord&)>
attack_transform(const AttackConfig& cfg, std::vector<std::uint32_t> malicious,
                 std::uint64_t global_seed) {
    std::set<std::uint32_t> mal(malicious.begin(), malicious.end());
    return [cfg, mal, global_seed](std::uint32_t round, std::uint32_t client,
                                   UpdateRecord& rec) {
        if (!mal.count(client)) return;
        Rng rng(derive_seed(global_seed, "attack", round, client));
        poison(rec, cfg, rng);
    };
}

}  // namespace fru
