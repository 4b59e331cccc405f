#pragma once

#include <cmath>
#include <vector>

#include "bdae/layers.hpp"

namespace bdae {

struct AdamConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected Adam. Moments are kept in 64-bit regardless of the
// parameter precision so long runs don't drift between precisions.
template <typename T>
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {
        if (!(cfg_.lr > 0.0) && cfg_.lr != 0.0) throw ValueError("adam: lr must be >= 0");
    }

    void attach(const std::vector<ParamView<T>>& params) {
        m_.clear();
        v_.clear();
        for (const auto& p : params) {
            m_.emplace_back(static_cast<size_t>(p.value->numel()), 0.0);
            v_.emplace_back(static_cast<size_t>(p.value->numel()), 0.0);
        }
        t_ = 0;
    }

    void step(const std::vector<ParamView<T>>& params) {
        if (params.size() != m_.size()) throw ValueError("adam: parameter set changed under optimizer");
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t pi = 0; pi < params.size(); ++pi) {
            const auto& p = params[pi];
            auto& m = m_[pi];
            auto& v = v_[pi];
            T* w = p.value->ptr();
            const T* g = p.grad->ptr();
            const int64_t n = p.value->numel();
            for (int64_t i = 0; i < n; ++i) {
                double gi = static_cast<double>(g[i]);
                if (!std::isfinite(gi))
                    throw NumericError("adam: non-finite gradient in parameter '" + p.name + "'");
                m[static_cast<size_t>(i)] = cfg_.beta1 * m[static_cast<size_t>(i)] + (1.0 - cfg_.beta1) * gi;
                v[static_cast<size_t>(i)] = cfg_.beta2 * v[static_cast<size_t>(i)] + (1.0 - cfg_.beta2) * gi * gi;
                double mhat = m[static_cast<size_t>(i)] / c1;
                double vhat = v[static_cast<size_t>(i)] / c2;
                w[i] -= static_cast<T>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
            }
        }
    }

    const AdamConfig& config() const { return cfg_; }
    uint64_t t() const { return t_; }
    std::vector<std::vector<double>>& first_moments() { return m_; }
    std::vector<std::vector<double>>& second_moments() { return v_; }
    void set_t(uint64_t t) { t_ = t; }

private:
    AdamConfig cfg_;
    uint64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace bdae
