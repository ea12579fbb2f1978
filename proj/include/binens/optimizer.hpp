#pragma once

// Adam and SGD-with-momentum over a fixed list of named parameters.
// Binary/ternary latent weights are updated like any other parameter;
// their quantized views are re-derived on the next forward.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "binens/tensor.hpp"

namespace binens {

enum class OptKind { sgd_momentum, adam };

inline const char* opt_kind_name(OptKind k) { return k == OptKind::adam ? "adam" : "sgd_momentum"; }

inline OptKind opt_kind_from_name(const std::string& s) {
    if (s == "adam") return OptKind::adam;
    if (s == "sgd_momentum" || s == "sgd") return OptKind::sgd_momentum;
    throw ConfigError("unknown optimizer '" + s + "'");
}

template <class T>
class OptimizerT {
public:
    OptimizerT(std::vector<std::pair<std::string, TensorT<T>>> params, OptKind kind, T lr)
        : params_(std::move(params)), kind_(kind), lr_(lr) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].second.numel(), T(0));
            if (kind_ == OptKind::adam) v_[i].assign(params_[i].second.numel(), T(0));
        }
    }

    void set_lr(T lr) { lr_ = lr; }
    T lr() const { return lr_; }

    // Applies one update from the gradients currently held by the parameters,
    // then clears them.
    void step() {
        ++t_;
        if (kind_ == OptKind::adam) {
            const T b1 = T(0.9), b2 = T(0.999), eps = T(1e-8);
            const T bc1 = T(1) - static_cast<T>(std::pow(0.9, t_));
            const T bc2 = T(1) - static_cast<T>(std::pow(0.999, t_));
            for (std::size_t i = 0; i < params_.size(); ++i) {
                auto& p = params_[i].second;
                if (!p.has_grad()) continue;
                auto& g = p.grad();
                for (std::size_t k = 0; k < g.size(); ++k) {
                    m_[i][k] = b1 * m_[i][k] + (T(1) - b1) * g[k];
                    v_[i][k] = b2 * v_[i][k] + (T(1) - b2) * g[k] * g[k];
                    const T mhat = m_[i][k] / bc1;
                    const T vhat = v_[i][k] / bc2;
                    p[k] -= lr_ * mhat / (std::sqrt(vhat) + eps);
                }
            }
        } else {
            const T mu = T(0.9);
            for (std::size_t i = 0; i < params_.size(); ++i) {
                auto& p = params_[i].second;
                if (!p.has_grad()) continue;
                auto& g = p.grad();
                for (std::size_t k = 0; k < g.size(); ++k) {
                    m_[i][k] = mu * m_[i][k] + g[k];
                    p[k] -= lr_ * m_[i][k];
                }
            }
        }
        for (auto& [name, p] : params_) p.zero_grad();
    }

private:
    std::vector<std::pair<std::string, TensorT<T>>> params_;
    OptKind kind_;
    T lr_;
    long t_ = 0;
    std::vector<std::vector<T>> m_;
    std::vector<std::vector<T>> v_;
};

using Optimizer = OptimizerT<float>;

}  // namespace binens
