#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <unistd.h>

#include "fru/dataset.hpp"
#include "fru/model.hpp"

namespace testutil {

// Fresh temp directory per call, removed on destruction.
struct TempDir {
    std::filesystem::path path;

    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path = std::filesystem::temp_directory_path() /
               ("fru_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
                std::to_string(counter.fetch_add(1)));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::string str() const { return path.string(); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

// Synthetic implicit-feedback data in MovieLens u.data layout. Users and
// items carry latent clusters; a user mostly interacts inside its cluster,
// which gives the recommender real structure to learn.
inline void write_synthetic_movielens(const std::string& path, std::size_t users,
                                      std::size_t items, std::size_t per_user,
                                      unsigned seed, std::size_t clusters = 8,
                                      double in_cluster_prob = 0.8) {
    std::mt19937_64 rng(seed);
    std::ofstream out(path, std::ios::trunc);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::vector<std::size_t> item_cluster(items);
    for (std::size_t i = 0; i < items; ++i) item_cluster[i] = i % clusters;
    std::vector<std::vector<std::uint32_t>> by_cluster(clusters);
    for (std::size_t i = 0; i < items; ++i)
        by_cluster[item_cluster[i]].push_back(static_cast<std::uint32_t>(i));

    // Zipf-like popularity within each cluster, as in real interaction data:
    // a few head items are seen by nearly every user of the cluster.
    std::vector<std::discrete_distribution<std::size_t>> pick(clusters);
    for (std::size_t c = 0; c < clusters; ++c) {
        std::vector<double> w(by_cluster[c].size());
        for (std::size_t r = 0; r < w.size(); ++r) w[r] = 1.0 / std::pow(double(r + 1), 1.2);
        pick[c] = std::discrete_distribution<std::size_t>(w.begin(), w.end());
    }

    for (std::size_t u = 0; u < users; ++u) {
        std::size_t uc = u % clusters;
        std::set<std::uint32_t> chosen;
        long ts = 874000000 + long(u);
        while (chosen.size() < per_user) {
            std::size_t c = coin(rng) < in_cluster_prob
                                ? uc
                                : std::uniform_int_distribution<std::size_t>(0, clusters - 1)(rng);
            std::uint32_t item = by_cluster[c][pick[c](rng)];
            if (!chosen.insert(item).second) continue;
            out << (u + 1) << "\t" << (item + 1) << "\t" << 5 << "\t" << ts << "\n";
            ts += 1000;
        }
    }
}

inline fru::SplitDataset synthetic_split(std::size_t users, std::size_t items,
                                         std::size_t per_user, unsigned seed) {
    TempDir tmp("synth");
    std::string path = tmp.file("u.data");
    write_synthetic_movielens(path, users, items, per_user, seed);
    return fru::load_movielens(path, seed);
}

// Flattened view of every trainable parameter, for finite-difference checks.
struct ParamView {
    std::vector<double*> slots;

    ParamView(fru::GlobalParameters& g, fru::PrivateParameters& p) {
        for (double& x : p.user_embedding) slots.push_back(&x);
        for (double& x : g.item_embeddings) slots.push_back(&x);
        for (auto& t : g.dense)
            for (double& x : t.data) slots.push_back(&x);
    }
    std::size_t size() const { return slots.size(); }
    double get(std::size_t i) const { return *slots[i]; }
    void set(std::size_t i, double v) { *slots[i] = v; }
};

// Batch loss as a pure function of the parameters, matching what
// local_train_step differentiates.
inline double batch_loss(const fru::TrainConfig& cfg, const fru::GlobalParameters& g,
                         const fru::PrivateParameters& p, const fru::LocalDataset& local,
                         const std::vector<fru::BatchExample>& batch) {
    std::vector<double> scores;
    std::vector<int> labels;
    const fru::LightGcnPropagation* prop_ptr = nullptr;
    fru::LightGcnPropagation prop;
    if (cfg.model == fru::ModelKind::lightgcn) {
        prop = fru::lightgcn_propagate(local, g, p, cfg.lightgcn_layers);
        prop_ptr = &prop;
    }
    for (const auto& ex : batch) {
        scores.push_back(fru::model_score(cfg, g, p, local, ex.item, prop_ptr));
        labels.push_back(ex.label);
    }
    return fru::local_loss(scores, labels);
}

// Central finite differences of batch_loss over every parameter.
inline std::vector<double> fd_gradient(const fru::TrainConfig& cfg, fru::GlobalParameters g,
                                       fru::PrivateParameters p, const fru::LocalDataset& local,
                                       const std::vector<fru::BatchExample>& batch,
                                       double h = 1e-4) {
    ParamView view(g, p);
    std::vector<double> grad(view.size());
    for (std::size_t i = 0; i < view.size(); ++i) {
        double orig = view.get(i);
        view.set(i, orig + h);
        double up = batch_loss(cfg, g, p, local, batch);
        view.set(i, orig - h);
        double down = batch_loss(cfg, g, p, local, batch);
        view.set(i, orig);
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

// Analytic gradient recovered from one SGD step: grad = (before - after) / lr.
inline std::vector<double> analytic_gradient(const fru::TrainConfig& cfg,
                                             fru::GlobalParameters g, fru::PrivateParameters p,
                                             const fru::LocalDataset& local,
                                             const std::vector<fru::BatchExample>& batch) {
    fru::GlobalParameters g2 = g;
    fru::PrivateParameters p2 = p;
    fru::local_train_step(cfg, g2, p2, local, batch);
    ParamView before(g, p);
    ParamView after(g2, p2);
    std::vector<double> grad(before.size());
    for (std::size_t i = 0; i < before.size(); ++i)
        grad[i] = (before.get(i) - after.get(i)) / cfg.learning_rate;
    return grad;
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::vector<unsigned char>((std::istreambuf_iterator<char>(in)),
                                      std::istreambuf_iterator<char>());
}

}  // namespace testutil
