#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "porl/tensor.hpp"

namespace porl {

struct NamedTensor {
    std::string name;
    ad::Tensor tensor;
};

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One bias-corrected Adam update applied in place. t is 1-based.
inline void adam_step(std::vector<double>& param, const std::vector<double>& grad,
                      std::vector<double>& m, std::vector<double>& v, const AdamConfig& cfg,
                      long t, const std::string& param_name = "") {
    if (t < 1) throw std::invalid_argument("adam_step: step index must be >= 1");
    if (grad.size() != param.size() || m.size() != param.size() || v.size() != param.size())
        throw std::invalid_argument("adam_step: size mismatch for " + param_name);
    for (double g : grad)
        if (!std::isfinite(g))
            throw std::runtime_error("adam_step: non-finite gradient in parameter '" +
                                     param_name + "'");
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < param.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

// Scales all gradients by max_norm/g when the global L2 norm g exceeds
// max_norm; returns the pre-clip norm.
inline double clip_global_norm(std::vector<NamedTensor>& params, double max_norm) {
    if (max_norm <= 0.0) throw std::invalid_argument("clip_global_norm: max_norm must be > 0");
    double sq = 0.0;
    for (auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& p : params) {
            if (!p.tensor.has_grad()) continue;
            for (double& g : p.tensor.grad()) g *= s;
        }
    }
    return norm;
}

// Adam over a named parameter registry; first/second moments are kept per
// parameter and the step counter is shared.
class Adam {
public:
    Adam(std::vector<NamedTensor>* params, AdamConfig cfg) : params_(params), cfg_(cfg) {
        for (auto& p : *params_) {
            m_.emplace_back(p.tensor.size(), 0.0);
            v_.emplace_back(p.tensor.size(), 0.0);
        }
    }

    void zero_grad() {
        for (auto& p : *params_) p.tensor.zero_grad();
    }

    void step() {
        ++t_;
        for (std::size_t i = 0; i < params_->size(); ++i) {
            auto& p = (*params_)[i];
            p.tensor.ensure_grad();
            adam_step(p.tensor.values(), p.tensor.grad(), m_[i], v_[i], cfg_, t_, p.name);
        }
    }

    long step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

private:
    std::vector<NamedTensor>* params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

}  // namespace porl
