#pragma once

#include <cmath>
#include <vector>

#include "ctseg/errors.hpp"
#include "ctseg/nn/layers.hpp"

namespace ctseg::nn {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;  // L2-style: added to the gradient

    void validate() const {
        if (lr <= 0) throw ConfigError("adam lr must be positive");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw ConfigError("adam betas must lie in [0,1)");
        if (weight_decay < 0) throw ConfigError("adam weight_decay must be >= 0");
    }
};

class Adam {
public:
    Adam() = default;

    Adam(std::vector<Param> params, const AdamConfig& cfg) { init(std::move(params), cfg); }

    void init(std::vector<Param> params, const AdamConfig& cfg) {
        cfg.validate();
        cfg_ = cfg;
        params_.clear();
        for (Param& p : params)
            if (p.grad) params_.push_back(p);
        m_.assign(params_.size(), {});
        v_.assign(params_.size(), {});
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].value->size(), 0.0f);
            v_[i].assign(params_[i].value->size(), 0.0f);
        }
        t_ = 0;
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            std::vector<float>& w = *params_[i].value;
            const std::vector<float>& g = *params_[i].grad;
            std::vector<float>& m = m_[i];
            std::vector<float>& v = v_[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double gj = double(g[j]) + cfg_.weight_decay * double(w[j]);
                const double mj = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
                const double vj = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
                m[j] = float(mj);
                v[j] = float(vj);
                w[j] -= float(cfg_.lr * (mj / bc1) / (std::sqrt(vj / bc2) + cfg_.eps));
            }
        }
    }

    long steps_taken() const { return t_; }

private:
    AdamConfig cfg_;
    std::vector<Param> params_;
    std::vector<std::vector<float>> m_, v_;
    long t_ = 0;
};

}  // namespace ctseg::nn
