#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "simple/params.hpp"
#include "simple/tensor.hpp"

namespace simple {

/// Adam over a ParamStore. Moment buffers are aligned with the store order
/// and serialize alongside the parameters so training can resume exactly.
template <typename T>
class Adam {
public:
    Adam() = default;
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void init(const ParamStore<T>& store) {
        m_.clear();
        v_.clear();
        for (size_t i = 0; i < store.count(); ++i) {
            m_.emplace_back(store.tensor(i).shape);
            v_.emplace_back(store.tensor(i).shape);
        }
        step_ = 0;
    }

    /// grads[i] pairs with store.tensor(i); missing (empty) grads are skipped.
    void apply(ParamStore<T>& store, const std::vector<Tensor<T>>& grads) {
        if (m_.size() != store.count()) throw std::logic_error("Adam not initialized for this store");
        ++step_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
        for (size_t i = 0; i < store.count(); ++i) {
            if (i >= grads.size() || grads[i].numel() == 0) continue;
            Tensor<T>& p = store.tensor(i);
            const Tensor<T>& g = grads[i];
            Tensor<T>& m = m_[i];
            Tensor<T>& v = v_[i];
            for (int64_t k = 0; k < p.numel(); ++k) {
                m[k] = T(beta1_) * m[k] + T(1.0 - beta1_) * g[k];
                v[k] = T(beta2_) * v[k] + T(1.0 - beta2_) * g[k] * g[k];
                const double mhat = static_cast<double>(m[k]) / bc1;
                const double vhat = static_cast<double>(v[k]) / bc2;
                p[k] -= T(lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    int64_t step_count() const { return step_; }
    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }

    void to_arrays(ArrayFile& f, const ParamStore<T>& store, const std::string& prefix) const {
        for (size_t i = 0; i < store.count(); ++i) {
            f.add_tensor(prefix + "m/" + store.name(i), m_[i]);
            f.add_tensor(prefix + "v/" + store.name(i), v_[i]);
        }
        f.add_scalar_i64(prefix + "step", step_);
    }

    void from_arrays(const ArrayFile& f, const ParamStore<T>& store, const std::string& prefix) {
        init(store);
        for (size_t i = 0; i < store.count(); ++i) {
            m_[i] = f.template tensor<T>(prefix + "m/" + store.name(i));
            v_[i] = f.template tensor<T>(prefix + "v/" + store.name(i));
        }
        step_ = f.scalar_i64(prefix + "step");
    }

private:
    double lr_ = 1e-4, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    int64_t step_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

}  // namespace simple
