#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fru/dataset.hpp"
#include "fru/rng.hpp"
#include "fru/tensor.hpp"

namespace fru {

enum class ModelKind { ncf, lightgcn };

inline std::string to_string(ModelKind m) { return m == ModelKind::ncf ? "ncf" : "lightgcn"; }

struct TrainConfig {
    ModelKind model = ModelKind::ncf;
    std::size_t embedding_dim = 64;
    std::vector<std::size_t> ffn_dims = {128, 256, 128, 64};
    std::size_t lightgcn_layers = 1;
    double learning_rate = 0.001;
    std::size_t batch_size = 64;
    std::size_t local_epochs = 20;            // L
    std::size_t global_rounds = 200;          // T
    double client_fraction_percent = 10.0;    // b%
    std::size_t negative_ratio = 4;           // n (4 for NCF, 1 for LightGCN)
    std::uint64_t seed = 1;

    void validate() const {
        if (client_fraction_percent <= 0.0 || client_fraction_percent > 100.0)
            throw std::invalid_argument("client_fraction_percent must be in (0,100]");
        if (local_epochs < 1) throw std::invalid_argument("local_epochs must be >= 1");
        if (negative_ratio < 1) throw std::invalid_argument("negative_ratio must be >= 1");
        if (embedding_dim < 1) throw std::invalid_argument("embedding_dim must be >= 1");
        if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    }
};

// Parameters shared through the server: the item embedding table plus the
// NCF feedforward stack (weights, biases, output vector h). LightGCN has no
// dense part.
struct GlobalParameters {
    std::size_t item_count = 0;
    std::size_t embedding_dim = 0;
    std::vector<double> item_embeddings;  // item_count x e, row-major
    std::vector<Tensor> dense;            // W1,b1, ..., Wk,bk, h

    std::vector<double> item_row(std::uint32_t item) const {
        if (item >= item_count) throw std::out_of_range("item id out of range");
        auto begin = item_embeddings.begin() + std::size_t(item) * embedding_dim;
        return std::vector<double>(begin, begin + embedding_dim);
    }
    double* item_ptr(std::uint32_t item) {
        return item_embeddings.data() + std::size_t(item) * embedding_dim;
    }
    const double* item_ptr(std::uint32_t item) const {
        return item_embeddings.data() + std::size_t(item) * embedding_dim;
    }
};

// Per-client private parameters; never transmitted.
struct PrivateParameters {
    std::vector<double> user_embedding;
};

inline GlobalParameters init_global_parameters(const TrainConfig& cfg, std::size_t item_count) {
    GlobalParameters g;
    g.item_count = item_count;
    g.embedding_dim = cfg.embedding_dim;
    g.item_embeddings.resize(item_count * cfg.embedding_dim);
    Rng rng(derive_seed(cfg.seed, "init_items"));
    std::normal_distribution<double> gauss(0.0, 0.01);
    for (double& x : g.item_embeddings) x = gauss(rng);

    if (cfg.model == ModelKind::ncf) {
        Rng wrng(derive_seed(cfg.seed, "init_dense"));
        std::size_t prev = 2 * cfg.embedding_dim;
        for (std::size_t dim : cfg.ffn_dims) {
            Tensor w({dim, prev});
            double bound = 1.0 / std::sqrt(double(prev));
            std::uniform_real_distribution<double> uni(-bound, bound);
            for (double& x : w.data) x = uni(wrng);
            g.dense.push_back(std::move(w));
            g.dense.push_back(Tensor({dim}));  // bias, zero-init
            prev = dim;
        }
        Tensor h({prev});
        double bound = 1.0 / std::sqrt(double(prev));
        std::uniform_real_distribution<double> uni(-bound, bound);
        for (double& x : h.data) x = uni(wrng);
        g.dense.push_back(std::move(h));
    }
    return g;
}

inline PrivateParameters init_user_embedding(const TrainConfig& cfg, std::uint32_t user) {
    PrivateParameters p;
    p.user_embedding.resize(cfg.embedding_dim);
    Rng rng(derive_seed(cfg.seed, "init_user", 0, user));
    std::normal_distribution<double> gauss(0.0, 0.01);
    for (double& x : p.user_embedding) x = gauss(rng);
    return p;
}

// ---------------------------------------------------------------------------
// NCF: r = sigmoid(h . FFN([u, v])), ReLU on every FFN layer.

struct NcfCache {
    std::vector<std::vector<double>> preact;  // z per layer
    std::vector<std::vector<double>> act;     // act[0] = [u, v], then ReLU(z)
    double logit = 0.0;
};

inline double ncf_logit(const GlobalParameters& g, const std::vector<double>& user_emb,
                        std::uint32_t item, NcfCache* cache = nullptr) {
    if (item >= g.item_count) throw std::out_of_range("item id out of range");
    std::size_t e = g.embedding_dim;
    std::vector<double> x(2 * e);
    std::copy(user_emb.begin(), user_emb.end(), x.begin());
    std::copy(g.item_ptr(item), g.item_ptr(item) + e, x.begin() + e);

    std::size_t n_layers = (g.dense.size() - 1) / 2;
    if (cache) {
        cache->preact.clear();
        cache->act.clear();
        cache->act.push_back(x);
    }
    for (std::size_t k = 0; k < n_layers; ++k) {
        const Tensor& w = g.dense[2 * k];
        const Tensor& b = g.dense[2 * k + 1];
        std::size_t rows = w.shape[0], cols = w.shape[1];
        std::vector<double> z(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            double s = b.data[r];
            const double* wr = w.data.data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) s += wr[c] * x[c];
            z[r] = s;
        }
        if (cache) cache->preact.push_back(z);
        for (double& v : z) v = v > 0.0 ? v : 0.0;
        x = std::move(z);
        if (cache) cache->act.push_back(x);
    }
    const Tensor& h = g.dense.back();
    double logit = dot(h.data, x);
    if (cache) cache->logit = logit;
    return logit;
}

inline double ncf_score(const GlobalParameters& g, const PrivateParameters& p,
                        std::uint32_t item) {
    return sigmoid(ncf_logit(g, p.user_embedding, item));
}

// ---------------------------------------------------------------------------
// LightGCN on the client's local bipartite graph: one user node connected to
// its positives. With d = |positives|, Eq. 2 reduces to
//   u^l = (1/sqrt(d)) * sum_j v_j^{l-1},   v_j^l = (1/sqrt(d)) * u^{l-1}.
// Every layer is therefore a linear combination of u^0 and s^0 = sum_j v_j^0,
// which the coefficients below track exactly. Items outside the local graph
// have no neighbors, so their higher layers are zero.

struct LightGcnCoeffs {
    std::size_t layers = 0;
    double cu = 1.0, cs = 0.0;            // user_final = cu*u0 + cs*s0
    double p = 1.0, qu = 0.0, qs = 0.0;   // pos item final = p*v0 + qu*u0 + qs*s0
    double p0 = 1.0;                      // non-pos item final = p0*v0
};

inline LightGcnCoeffs lightgcn_coeffs(std::size_t degree, std::size_t layers) {
    LightGcnCoeffs c;
    c.layers = layers;
    if (layers == 0) return c;
    double inv_sqrt_d = 1.0 / std::sqrt(double(degree));
    // Per-layer coefficients: user = (cu, cs); positive item = (pv, vu, vs).
    double cu = 1.0, cs = 0.0;
    double pv = 1.0, vu = 0.0, vs = 0.0;
    double sum_cu = 1.0, sum_cs = 0.0;
    double sum_pv = 1.0, sum_vu = 0.0, sum_vs = 0.0;
    for (std::size_t l = 1; l <= layers; ++l) {
        // u^l = (1/sqrt(d)) * sum_j v_j^{l-1};  sum_j v_j^{l-1} = pv*s0 + d*vu*u0 + d*vs*s0
        double ncu = inv_sqrt_d * double(degree) * vu;
        double ncs = inv_sqrt_d * (pv + double(degree) * vs);
        // v_j^l = (1/sqrt(d)) * u^{l-1}
        double npv = 0.0;
        double nvu = inv_sqrt_d * cu;
        double nvs = inv_sqrt_d * cs;
        cu = ncu; cs = ncs; pv = npv; vu = nvu; vs = nvs;
        sum_cu += cu; sum_cs += cs;
        sum_pv += pv; sum_vu += vu; sum_vs += vs;
    }
    double inv = 1.0 / double(layers + 1);
    c.cu = sum_cu * inv;
    c.cs = sum_cs * inv;
    c.p = sum_pv * inv;
    c.qu = sum_vu * inv;
    c.qs = sum_vs * inv;
    c.p0 = inv;  // only layer 0 is nonzero for off-graph items
    return c;
}

struct LightGcnPropagation {
    LightGcnCoeffs coeffs;
    std::vector<double> sum_pos;     // s0
    std::vector<double> user_final;  // mean of layers 0..l
    std::vector<std::uint32_t> positives;
};

inline LightGcnPropagation lightgcn_propagate(const LocalDataset& local,
                                              const GlobalParameters& g,
                                              const PrivateParameters& p,
                                              std::size_t layers) {
    if (local.positives.empty())
        throw DataError("lightgcn_propagate: client has no positives");
    LightGcnPropagation out;
    out.positives = local.positives;
    out.coeffs = lightgcn_coeffs(local.positives.size(), layers);
    std::size_t e = g.embedding_dim;
    out.sum_pos.assign(e, 0.0);
    for (std::uint32_t j : local.positives) {
        const double* v = g.item_ptr(j);
        for (std::size_t i = 0; i < e; ++i) out.sum_pos[i] += v[i];
    }
    out.user_final.assign(e, 0.0);
    for (std::size_t i = 0; i < e; ++i)
        out.user_final[i] = out.coeffs.cu * p.user_embedding[i] + out.coeffs.cs * out.sum_pos[i];
    return out;
}

inline std::vector<double> lightgcn_item_final(const LightGcnPropagation& prop,
                                               const GlobalParameters& g,
                                               const PrivateParameters& p, std::uint32_t item) {
    std::size_t e = g.embedding_dim;
    std::vector<double> v(e);
    const double* v0 = g.item_ptr(item);
    bool in_graph = std::binary_search(prop.positives.begin(), prop.positives.end(), item);
    const LightGcnCoeffs& c = prop.coeffs;
    for (std::size_t i = 0; i < e; ++i) {
        v[i] = in_graph
                   ? c.p * v0[i] + c.qu * p.user_embedding[i] + c.qs * prop.sum_pos[i]
                   : c.p0 * v0[i];
    }
    return v;
}

inline double lightgcn_score(const std::vector<double>& user_vec,
                             const std::vector<double>& item_vec) {
    return sigmoid(dot(user_vec, item_vec));
}

// ---------------------------------------------------------------------------

constexpr double kLossEps = 1e-7;

inline double local_loss(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size())
        throw std::invalid_argument("local_loss: size mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        double y = std::clamp(scores[i], kLossEps, 1.0 - kLossEps);
        total += labels[i] ? -std::log(y) : -std::log(1.0 - y);
    }
    return total / double(scores.size());
}

struct BatchExample {
    std::uint32_t item;
    int label;  // {0,1}
};

// Unified scoring for evaluation; LightGCN callers pass the precomputed
// propagation to avoid redoing it per candidate.
inline double model_score(const TrainConfig& cfg, const GlobalParameters& g,
                          const PrivateParameters& p, const LocalDataset& local,
                          std::uint32_t item, const LightGcnPropagation* prop = nullptr) {
    if (cfg.model == ModelKind::ncf) return ncf_score(g, p, item);
    LightGcnPropagation tmp;
    if (!prop) {
        tmp = lightgcn_propagate(local, g, p, cfg.lightgcn_layers);
        prop = &tmp;
    }
    return lightgcn_score(prop->user_final, lightgcn_item_final(*prop, g, p, item));
}

// One SGD step on a batch at learning rate lr. Gradients are the exact
// analytic gradients of the mean clamped BCE over the batch. Only item rows
// touched by the batch change (for LightGCN the client's positives are part
// of the propagation and count as touched).
inline void local_train_step(const TrainConfig& cfg, GlobalParameters& g, PrivateParameters& p,
                             const LocalDataset& local, const std::vector<BatchExample>& batch) {
    if (batch.empty()) return;
    std::size_t e = g.embedding_dim;
    double inv_b = 1.0 / double(batch.size());
    std::vector<double> grad_user(e, 0.0);
    SparseRows grad_items;
    auto item_grad = [&](std::uint32_t item) -> std::vector<double>& {
        auto [it, inserted] = grad_items.try_emplace(item);
        if (inserted) it->second.assign(e, 0.0);
        return it->second;
    };

    if (cfg.model == ModelKind::ncf) {
        std::size_t n_layers = (g.dense.size() - 1) / 2;
        std::vector<Tensor> grad_dense;
        grad_dense.reserve(g.dense.size());
        for (const Tensor& t : g.dense) grad_dense.emplace_back(t.shape);

        NcfCache cache;
        for (const BatchExample& ex : batch) {
            double logit = ncf_logit(g, p.user_embedding, ex.item, &cache);
            double score = sigmoid(logit);
            double gl;  // dLoss/dlogit for this example
            if (score <= kLossEps || score >= 1.0 - kLossEps)
                gl = 0.0;  // clamped region of the loss
            else
                gl = (score - double(ex.label)) * inv_b;
            if (gl == 0.0) continue;

            const Tensor& h = g.dense.back();
            Tensor& gh = grad_dense.back();
            const std::vector<double>& top = cache.act.back();
            std::vector<double> da(top.size());
            for (std::size_t i = 0; i < top.size(); ++i) {
                gh.data[i] += gl * top[i];
                da[i] = gl * h.data[i];
            }
            for (std::size_t k = n_layers; k-- > 0;) {
                const Tensor& w = g.dense[2 * k];
                Tensor& gw = grad_dense[2 * k];
                Tensor& gb = grad_dense[2 * k + 1];
                const std::vector<double>& z = cache.preact[k];
                const std::vector<double>& a_prev = cache.act[k];
                std::size_t rows = w.shape[0], cols = w.shape[1];
                std::vector<double> da_prev(cols, 0.0);
                for (std::size_t r = 0; r < rows; ++r) {
                    double dz = z[r] > 0.0 ? da[r] : 0.0;
                    if (dz == 0.0) continue;
                    gb.data[r] += dz;
                    double* gwr = gw.data.data() + r * cols;
                    const double* wr = w.data.data() + r * cols;
                    for (std::size_t c = 0; c < cols; ++c) {
                        gwr[c] += dz * a_prev[c];
                        da_prev[c] += dz * wr[c];
                    }
                }
                da = std::move(da_prev);
            }
            std::vector<double>& gv = item_grad(ex.item);
            for (std::size_t i = 0; i < e; ++i) {
                grad_user[i] += da[i];
                gv[i] += da[e + i];
            }
        }
        for (const Tensor& t : grad_dense)
            if (!all_finite(t.data)) throw std::runtime_error("non-finite gradient");
        double lr = cfg.learning_rate;
        for (std::size_t i = 0; i < g.dense.size(); ++i)
            axpy(-lr, grad_dense[i].data, g.dense[i].data);
        for (auto& [item, gv] : grad_items) {
            if (!all_finite(gv)) throw std::runtime_error("non-finite gradient");
            double* row = g.item_ptr(item);
            for (std::size_t i = 0; i < e; ++i) row[i] -= lr * gv[i];
        }
        if (!all_finite(grad_user)) throw std::runtime_error("non-finite gradient");
        axpy(-lr, grad_user, p.user_embedding);
        return;
    }

    // LightGCN. Propagation is a fixed linear map for the step, so gradients
    // split into per-example item terms plus one shared term over positives.
    LightGcnPropagation prop = lightgcn_propagate(local, g, p, cfg.lightgcn_layers);
    const LightGcnCoeffs& c = prop.coeffs;
    std::vector<double> shared_pos(e, 0.0);  // gradient added to every positive row
    for (const BatchExample& ex : batch) {
        std::vector<double> vf = lightgcn_item_final(prop, g, p, ex.item);
        double score = lightgcn_score(prop.user_final, vf);
        double gl;
        if (score <= kLossEps || score >= 1.0 - kLossEps)
            gl = 0.0;
        else
            gl = (score - double(ex.label)) * inv_b;
        if (gl == 0.0) continue;

        bool in_graph = local.is_positive(ex.item);
        const double* v0 = g.item_ptr(ex.item);
        std::vector<double>& gv = item_grad(ex.item);
        if (in_graph) {
            for (std::size_t i = 0; i < e; ++i) {
                grad_user[i] += gl * (c.cu * vf[i] + c.qu * prop.user_final[i]);
                shared_pos[i] += gl * (c.cs * vf[i] + c.qs * prop.user_final[i]);
                gv[i] += gl * c.p * prop.user_final[i];
            }
        } else {
            for (std::size_t i = 0; i < e; ++i) {
                grad_user[i] += gl * c.cu * c.p0 * v0[i];
                shared_pos[i] += gl * c.cs * c.p0 * v0[i];
                gv[i] += gl * c.p0 * prop.user_final[i];
            }
        }
    }
    for (std::uint32_t j : local.positives) axpy(1.0, shared_pos, item_grad(j));

    double lr = cfg.learning_rate;
    for (auto& [item, gv] : grad_items) {
        if (!all_finite(gv)) throw std::runtime_error("non-finite gradient");
        double* row = g.item_ptr(item);
        for (std::size_t i = 0; i < e; ++i) row[i] -= lr * gv[i];
    }
    if (!all_finite(grad_user)) throw std::runtime_error("non-finite gradient");
    axpy(-lr, grad_user, p.user_embedding);
}

// ---------------------------------------------------------------------------
// Checkpoint format: "FRUCKPT1", u32 version, u32 e, u32 item_count,
// u32 tensor_count, per tensor (u32 ndims, u32 dims...), then row-major
// little-endian f32 data for the item table and each dense tensor.

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("checkpoint truncated");
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

inline void write_f32(std::ostream& out, const std::vector<double>& v) {
    for (double x : v) {
        float f = static_cast<float>(x);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        write_u32(out, bits);
    }
}

inline void read_f32(std::istream& in, std::vector<double>& v, std::size_t n) {
    v.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t bits = read_u32(in);
        float f;
        std::memcpy(&f, &bits, 4);
        v[i] = double(f);
    }
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const GlobalParameters& g) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write("FRUCKPT1", 8);
    detail::write_u32(out, 1);
    detail::write_u32(out, static_cast<std::uint32_t>(g.embedding_dim));
    detail::write_u32(out, static_cast<std::uint32_t>(g.item_count));
    detail::write_u32(out, static_cast<std::uint32_t>(g.dense.size()));
    for (const Tensor& t : g.dense) {
        detail::write_u32(out, static_cast<std::uint32_t>(t.shape.size()));
        for (std::size_t d : t.shape) detail::write_u32(out, static_cast<std::uint32_t>(d));
    }
    detail::write_f32(out, g.item_embeddings);
    for (const Tensor& t : g.dense) detail::write_f32(out, t.data);
}

inline GlobalParameters load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "FRUCKPT1", 8) != 0)
        throw std::runtime_error("bad checkpoint magic in " + path);
    if (detail::read_u32(in) != 1) throw std::runtime_error("unsupported checkpoint version");
    GlobalParameters g;
    g.embedding_dim = detail::read_u32(in);
    g.item_count = detail::read_u32(in);
    std::uint32_t n_tensors = detail::read_u32(in);
    std::vector<std::vector<std::size_t>> shapes(n_tensors);
    for (auto& s : shapes) {
        std::uint32_t nd = detail::read_u32(in);
        s.resize(nd);
        for (auto& d : s) d = detail::read_u32(in);
    }
    detail::read_f32(in, g.item_embeddings, g.item_count * g.embedding_dim);
    for (auto& s : shapes) {
        Tensor t(s);
        detail::read_f32(in, t.data, t.size());
        g.dense.push_back(std::move(t));
    }
    return g;
}

}  // namespace fru
