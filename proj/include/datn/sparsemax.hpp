#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "datn/tensor.hpp"

namespace datn {

// Euclidean projection onto the probability simplex via sort-and-threshold.
// Support size k* is the largest k with 1 + k*z_(k) > sum_{j<=k} z_(j);
// tau = (sum_{j<=k*} z_(j) - 1) / k*; p_i = max(z_i - tau, 0).

struct SparsemaxResult {
    Tensor probs;                   // same shape as the input
    std::vector<char> support;      // 1 iff probs > 0, per entry
    std::vector<double> tau;        // one threshold per projected row
};

namespace detail {

inline double sparsemax_row(const double* z, double* p, char* support, std::size_t n) {
    std::vector<double> sorted(z, z + n);
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());

    double cum = 0.0, cum_at_k = 0.0;
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i) {
        cum += sorted[i];
        if (1.0 + double(i + 1) * sorted[i] > cum) {
            k = i + 1;
            cum_at_k = cum;
        }
    }
    const double tau = (cum_at_k - 1.0) / double(k);
    for (std::size_t i = 0; i < n; ++i) {
        const double v = z[i] - tau;
        p[i] = v > 0.0 ? v : 0.0;
        support[i] = v > 0.0 ? 1 : 0;
    }
    return tau;
}

}  // namespace detail

// Row-wise projection of a vector or matrix of row scores.
inline SparsemaxResult sparsemax(const Tensor& z) {
    if (z.numel() == 0) throw std::invalid_argument("sparsemax: empty input");
    check_finite(z, "sparsemax");

    SparsemaxResult r;
    r.probs = Tensor(z.shape);
    r.support.assign(z.numel(), 0);
    const std::size_t rows = z.rows(), cols = z.cols();
    if (cols == 0) throw std::invalid_argument("sparsemax: empty rows");
    r.tau.resize(rows);
    for (std::size_t i = 0; i < rows; ++i)
        r.tau[i] = detail::sparsemax_row(z.data.data() + i * cols, r.probs.data.data() + i * cols,
                                         r.support.data() + i * cols, cols);
    return r;
}

// Jacobian-vector product of the projection, conditioned on the support:
// grad_i = u_i - mean_{j in S}(u_j) for i in S, and 0 off the support.
inline Tensor sparsemax_backward(const Tensor& upstream, const SparsemaxResult& result) {
    if (!upstream.same_shape(result.probs))
        throw std::invalid_argument("sparsemax_backward: shape mismatch");
    Tensor grad(upstream.shape);
    const std::size_t rows = upstream.rows(), cols = upstream.cols();
    for (std::size_t i = 0; i < rows; ++i) {
        const double* u = upstream.data.data() + i * cols;
        const char* s = result.support.data() + i * cols;
        double sum = 0.0;
        std::size_t k = 0;
        for (std::size_t j = 0; j < cols; ++j)
            if (s[j]) {
                sum += u[j];
                ++k;
            }
        if (k == 0) throw std::runtime_error("sparsemax_backward: empty support");
        const double mean = sum / double(k);
        double* g = grad.data.data() + i * cols;
        for (std::size_t j = 0; j < cols; ++j) g[j] = s[j] ? u[j] - mean : 0.0;
    }
    return grad;
}

}  // namespace datn
