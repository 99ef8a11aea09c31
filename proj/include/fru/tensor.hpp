#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace fru {

// Dense tensor with an explicit shape. Data is row-major.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        data.assign(n, 0.0);
    }

    std::size_t size() const { return data.size(); }
    double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }
};

using SparseRows = std::map<std::uint32_t, std::vector<double>>;

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double squared_norm(const std::vector<double>& v) { return dot(v, v); }

inline double norm(const std::vector<double>& v) { return std::sqrt(squared_norm(v)); }

inline void axpy(double alpha, const std::vector<double>& x, std::vector<double>& y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline void scale(std::vector<double>& v, double alpha) {
    for (double& x : v) x *= alpha;
}

inline bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace fru
