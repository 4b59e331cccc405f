#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "bdae/tensor.hpp"

namespace bdae {

// Softmax with max-subtraction, one row.
template <typename T>
inline void softmax_row(const T* logits, T* probs, int64_t k) {
    T mx = logits[0];
    for (int64_t i = 1; i < k; ++i) mx = std::max(mx, logits[i]);
    T sum = T(0);
    for (int64_t i = 0; i < k; ++i) {
        probs[i] = std::exp(logits[i] - mx);
        sum += probs[i];
    }
    for (int64_t i = 0; i < k; ++i) probs[i] /= sum;
}

// [N,K] logits -> [N,K] row-stochastic probabilities.
template <typename T>
inline Tensor<T> softmax_rows(const Tensor<T>& logits) {
    if (logits.ndim() != 2) throw ValueError("softmax: expected [batch, classes] logits");
    Tensor<T> probs(logits.shape);
    int64_t n = logits.extent(0), k = logits.extent(1);
    for (int64_t r = 0; r < n; ++r) softmax_row(logits.ptr() + r * k, probs.ptr() + r * k, k);
    return probs;
}

// Single-sample cross entropy: loss = -log softmax(logits)[label],
// gradient = softmax(logits) - onehot(label).
template <typename T>
inline std::pair<double, std::vector<T>> softmax_cross_entropy(const std::vector<T>& logits,
                                                               int label) {
    int64_t k = static_cast<int64_t>(logits.size());
    if (label < 0 || label >= k) throw ValueError("cross-entropy: label out of range");
    for (T v : logits)
        if (!std::isfinite(static_cast<double>(v))) throw NumericError("cross-entropy: non-finite logit");
    std::vector<T> grad(logits.size());
    softmax_row(logits.data(), grad.data(), k);
    // log-sum-exp form keeps the loss exact even when the true-class
    // probability underflows.
    T mx = logits[0];
    for (T v : logits) mx = std::max(mx, v);
    double lse = 0.0;
    for (T v : logits) lse += std::exp(static_cast<double>(v - mx));
    double loss = std::log(lse) - static_cast<double>(logits[static_cast<size_t>(label)] - mx);
    grad[static_cast<size_t>(label)] -= T(1);
    return {loss, std::move(grad)};
}

// Batched mean cross entropy. Returns (mean loss, dLoss/dLogits [N,K]).
template <typename T>
inline std::pair<double, Tensor<T>> softmax_cross_entropy_batch(const Tensor<T>& logits,
                                                                const std::vector<int>& labels) {
    if (logits.ndim() != 2) throw ValueError("cross-entropy: expected [batch, classes] logits");
    int64_t n = logits.extent(0), k = logits.extent(1);
    if (static_cast<int64_t>(labels.size()) != n)
        throw ValueError("cross-entropy: label count != batch size");
    Tensor<T> grad(logits.shape);
    double total = 0.0;
    std::vector<T> row(static_cast<size_t>(k));
    for (int64_t r = 0; r < n; ++r) {
        std::copy(logits.ptr() + r * k, logits.ptr() + (r + 1) * k, row.begin());
        auto [loss, g] = softmax_cross_entropy(row, labels[static_cast<size_t>(r)]);
        total += loss;
        for (int64_t i = 0; i < k; ++i) grad[r * k + i] = g[static_cast<size_t>(i)] / static_cast<T>(n);
    }
    return {total / static_cast<double>(n), std::move(grad)};
}

}  // namespace bdae
