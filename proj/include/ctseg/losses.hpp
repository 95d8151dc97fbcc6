#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ctseg/errors.hpp"

namespace ctseg {

enum class LossKind { Bce, Focal, Jaccard, BceLogJaccard };

inline const char* loss_name(LossKind k) {
    switch (k) {
        case LossKind::Bce: return "bce";
        case LossKind::Focal: return "focal";
        case LossKind::Jaccard: return "jaccard";
        case LossKind::BceLogJaccard: return "bce_log_jaccard";
    }
    return "?";
}

inline LossKind loss_kind_from_name(const std::string& s) {
    if (s == "bce") return LossKind::Bce;
    if (s == "focal") return LossKind::Focal;
    if (s == "jaccard") return LossKind::Jaccard;
    if (s == "bce_log_jaccard") return LossKind::BceLogJaccard;
    throw ConfigError("unknown loss kind '" + s + "'");
}

struct LossConfig {
    LossKind kind = LossKind::BceLogJaccard;
    double alpha = 0.25;    // focal only
    double gamma = 2.0;     // focal only
    double epsilon = 1e-7;  // Jaccard smoothing and log clamp

    void validate() const {
        if (epsilon <= 0) throw ConfigError("loss.epsilon must be > 0");
        if (alpha <= 0 || alpha >= 1) throw ConfigError("loss.alpha must be in (0,1)");
        if (gamma < 0) throw ConfigError("loss.gamma must be >= 0");
    }
};

// All losses consume probabilities (post-sigmoid) and binary targets, and
// reduce by the mean over every element. Accumulation runs in double so spot
// values are stable regardless of tensor size.

namespace detail {

inline void check_loss_shapes(std::size_t p, std::size_t y) {
    if (p != y)
        throw ShapeMismatchError("loss inputs: " + std::to_string(p) + " vs " +
                                 std::to_string(y) + " elements");
    if (p == 0) throw Error("loss inputs are empty");
}

}  // namespace detail

inline double bce_loss(std::span<const float> p, std::span<const float> y,
                       double eps = 1e-7) {
    detail::check_loss_shapes(p.size(), y.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double pc = std::clamp(double(p[i]), eps, 1.0 - eps);
        acc -= y[i] * std::log(pc) + (1.0 - y[i]) * std::log(1.0 - pc);
    }
    return acc / double(p.size());
}

// d(bce)/dp elementwise. Clamped elements sit on the flat part of the clamp,
// so their gradient is zero, matching what finite differences see.
inline void bce_grad(std::span<const float> p, std::span<const float> y,
                     std::span<float> grad, double eps = 1e-7, double scale = 1.0) {
    detail::check_loss_shapes(p.size(), y.size());
    const double inv_n = scale / double(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double pd = p[i];
        if (pd < eps || pd > 1.0 - eps) {
            grad[i] = 0.0f;
            continue;
        }
        grad[i] = float(inv_n * (-double(y[i]) / pd + (1.0 - y[i]) / (1.0 - pd)));
    }
}

inline double focal_loss(std::span<const float> p, std::span<const float> y,
                         double alpha = 0.25, double gamma = 2.0, double eps = 1e-7) {
    detail::check_loss_shapes(p.size(), y.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const bool pos = y[i] > 0.5f;
        const double pt = std::clamp(pos ? double(p[i]) : 1.0 - double(p[i]), eps,
                                     1.0 - eps);
        const double at = pos ? alpha : 1.0 - alpha;
        acc -= at * std::pow(1.0 - pt, gamma) * std::log(pt);
    }
    return acc / double(p.size());
}

inline void focal_grad(std::span<const float> p, std::span<const float> y,
                       std::span<float> grad, double alpha = 0.25, double gamma = 2.0,
                       double eps = 1e-7) {
    detail::check_loss_shapes(p.size(), y.size());
    const double inv_n = 1.0 / double(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        const bool pos = y[i] > 0.5f;
        const double pt_raw = pos ? double(p[i]) : 1.0 - double(p[i]);
        if (pt_raw < eps || pt_raw > 1.0 - eps) {
            grad[i] = 0.0f;
            continue;
        }
        const double pt = pt_raw;
        const double at = pos ? alpha : 1.0 - alpha;
        // d/dpt of -at (1-pt)^g log(pt)
        double d = at * std::pow(1.0 - pt, gamma) / pt;
        if (gamma > 0.0)
            d -= at * gamma * std::pow(1.0 - pt, gamma - 1.0) * std::log(pt);
        d = -d;
        grad[i] = float(inv_n * (pos ? d : -d));
    }
}

// Soft-Jaccard index over the whole batch: one global ratio, not a per-image
// average.
inline double soft_jaccard_index(std::span<const float> p, std::span<const float> y,
                                 double eps = 1e-7) {
    detail::check_loss_shapes(p.size(), y.size());
    double inter = 0.0, sum_p = 0.0, sum_y = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        inter += double(p[i]) * y[i];
        sum_p += p[i];
        sum_y += y[i];
    }
    return (inter + eps) / (sum_p + sum_y - inter + eps);
}

// dJ/dp elementwise, scaled by `scale` (callers chain d(total)/dJ through it).
inline void soft_jaccard_grad(std::span<const float> p, std::span<const float> y,
                              std::span<float> grad, double eps = 1e-7,
                              double scale = 1.0) {
    detail::check_loss_shapes(p.size(), y.size());
    double inter = 0.0, sum_p = 0.0, sum_y = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        inter += double(p[i]) * y[i];
        sum_p += p[i];
        sum_y += y[i];
    }
    const double I = inter + eps;
    const double U = sum_p + sum_y - inter + eps;
    const double inv_u2 = 1.0 / (U * U);
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double yi = y[i];
        grad[i] = float(scale * (yi * U - I * (1.0 - yi)) * inv_u2);
    }
}

// BCE - log(J), the compound loss. J inside the log is clamped below at eps
// to stay finite.
inline double combined_loss(std::span<const float> p, std::span<const float> y,
                            double eps = 1e-7) {
    const double j = soft_jaccard_index(p, y, eps);
    return bce_loss(p, y, eps) - std::log(std::max(j, eps));
}

inline void combined_grad(std::span<const float> p, std::span<const float> y,
                          std::span<float> grad, double eps = 1e-7) {
    bce_grad(p, y, grad, eps);
    const double j = soft_jaccard_index(p, y, eps);
    if (j > eps) {
        std::vector<float> jg(p.size());
        soft_jaccard_grad(p, y, jg, eps, -1.0 / j);
        for (std::size_t i = 0; i < p.size(); ++i) grad[i] += jg[i];
    }
}

inline double loss_value(const LossConfig& cfg, std::span<const float> p,
                         std::span<const float> y) {
    switch (cfg.kind) {
        case LossKind::Bce: return bce_loss(p, y, cfg.epsilon);
        case LossKind::Focal: return focal_loss(p, y, cfg.alpha, cfg.gamma, cfg.epsilon);
        case LossKind::Jaccard: return 1.0 - soft_jaccard_index(p, y, cfg.epsilon);
        case LossKind::BceLogJaccard: return combined_loss(p, y, cfg.epsilon);
    }
    throw Error("unreachable loss kind");
}

inline void loss_grad(const LossConfig& cfg, std::span<const float> p,
                      std::span<const float> y, std::span<float> grad) {
    if (grad.size() != p.size())
        throw ShapeMismatchError("loss gradient buffer: " +
                                 std::to_string(grad.size()) + " vs " +
                                 std::to_string(p.size()) + " elements");
    switch (cfg.kind) {
        case LossKind::Bce: bce_grad(p, y, grad, cfg.epsilon); return;
        case LossKind::Focal:
            focal_grad(p, y, grad, cfg.alpha, cfg.gamma, cfg.epsilon);
            return;
        case LossKind::Jaccard: soft_jaccard_grad(p, y, grad, cfg.epsilon, -1.0); return;
        case LossKind::BceLogJaccard: combined_grad(p, y, grad, cfg.epsilon); return;
    }
    throw Error("unreachable loss kind");
}

}  // namespace ctseg
