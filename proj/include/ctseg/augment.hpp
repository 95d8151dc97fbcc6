#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "ctseg/errors.hpp"
#include "ctseg/nn/tensor.hpp"

namespace ctseg {

// Training-time augmentation: zero-pad to a fixed canvas, take a uniformly
// random crop, flip horizontally with probability 1/2, then gamma-correct the
// image (never the mask). Geometry is applied in lock-step to image and mask.
struct AugmentConfig {
    int pad_h = 800, pad_w = 800;    // canvas the slice is centered on
    int crop_h = 768, crop_w = 448;  // window handed to the network
    double hflip_prob = 0.5;
    float gamma_lo = 0.5f, gamma_hi = 2.0f;

    void validate() const {
        if (crop_h < 1 || crop_w < 1) throw ConfigError("augment crop must be positive");
        if (crop_h > pad_h || crop_w > pad_w)
            throw ConfigError("augment crop exceeds the padded canvas");
        if (hflip_prob < 0.0 || hflip_prob > 1.0)
            throw ConfigError("hflip_prob must lie in [0,1]");
        if (!(gamma_lo > 0.0f) || gamma_hi < gamma_lo)
            throw ConfigError("gamma range must satisfy 0 < lo <= hi");
    }
};

// One realized set of augmentation parameters. Drawing is split from applying
// so the transform itself stays deterministic and directly testable.
struct AugmentDraw {
    int row0 = 0, col0 = 0;  // crop origin on the padded canvas
    bool hflip = false;
    float gamma = 1.0f;
};

// The draw that reproduces the input exactly (for aligned pad/crop geometry).
inline AugmentDraw centered_draw(const AugmentConfig& cfg) {
    return {(cfg.pad_h - cfg.crop_h) / 2, (cfg.pad_w - cfg.crop_w) / 2, false, 1.0f};
}

// Draw order is fixed (crop row, crop col, flip, gamma) so a seeded stream
// reproduces batches exactly.
inline AugmentDraw draw_augment(const AugmentConfig& cfg, std::mt19937_64& rng) {
    AugmentDraw d;
    d.row0 = int(std::uniform_int_distribution<int>(0, cfg.pad_h - cfg.crop_h)(rng));
    d.col0 = int(std::uniform_int_distribution<int>(0, cfg.pad_w - cfg.crop_w)(rng));
    d.hflip = std::bernoulli_distribution(cfg.hflip_prob)(rng);
    d.gamma = float(std::uniform_real_distribution<double>(cfg.gamma_lo, cfg.gamma_hi)(rng));
    return d;
}

namespace detail {

// Copies the crop window out of the virtual padded canvas. The input slice of
// size rows x cols sits centered on the pad_h x pad_w canvas; everything else
// is zero, so the canvas is never materialized.
template <typename T>
void crop_from_padded(const std::vector<T>& src, int rows, int cols,
                      const AugmentConfig& cfg, const AugmentDraw& d,
                      std::vector<T>& dst) {
    dst.assign(std::size_t(cfg.crop_h) * cfg.crop_w, T(0));
    const int oy = (cfg.pad_h - rows) / 2, ox = (cfg.pad_w - cols) / 2;
    for (int r = 0; r < cfg.crop_h; ++r) {
        const int sr = d.row0 + r - oy;
        if (sr < 0 || sr >= rows) continue;
        // columns of the output that land inside the content region
        const int c_lo = std::max(0, ox - d.col0);
        const int c_hi = std::min(cfg.crop_w, ox + cols - d.col0);
        if (c_lo >= c_hi) continue;
        const T* s = src.data() + std::size_t(sr) * cols + (d.col0 + c_lo - ox);
        T* o = dst.data() + std::size_t(r) * cfg.crop_w + c_lo;
        std::copy(s, s + (c_hi - c_lo), o);
    }
    if (d.hflip)
        for (int r = 0; r < cfg.crop_h; ++r) {
            T* row = dst.data() + std::size_t(r) * cfg.crop_w;
            std::reverse(row, row + cfg.crop_w);
        }
}

}  // namespace detail

// Applies one drawn augmentation to an image/mask slice pair (both rows x
// cols, image in [0,1], mask binary). Outputs are crop_h x crop_w.
inline void apply_augment(const std::vector<float>& image,
                          const std::vector<std::uint8_t>& mask, int rows, int cols,
                          const AugmentConfig& cfg, const AugmentDraw& d,
                          std::vector<float>& out_image,
                          std::vector<std::uint8_t>& out_mask) {
    cfg.validate();
    if (int(image.size()) != rows * cols || int(mask.size()) != rows * cols)
        throw ShapeMismatchError("augment input is not rows*cols");
    if (rows > cfg.pad_h || cols > cfg.pad_w)
        throw ShapeMismatchError("augment input larger than the padded canvas");
    if (d.row0 < 0 || d.row0 + cfg.crop_h > cfg.pad_h || d.col0 < 0 ||
        d.col0 + cfg.crop_w > cfg.pad_w)
        throw Error("augment crop window outside the padded canvas");

    detail::crop_from_padded(image, rows, cols, cfg, d, out_image);
    detail::crop_from_padded(mask, rows, cols, cfg, d, out_mask);
    if (d.gamma != 1.0f)
        for (float& v : out_image) v = std::pow(v, d.gamma);
}

// Convenience wrapper: draw then apply with an rng keyed by the caller
// (training keys it to (seed, epoch, slice) for scheduling-independent runs).
inline AugmentDraw augment(const std::vector<float>& image,
                           const std::vector<std::uint8_t>& mask, int rows, int cols,
                           const AugmentConfig& cfg, std::mt19937_64& rng,
                           std::vector<float>& out_image,
                           std::vector<std::uint8_t>& out_mask) {
    const AugmentDraw d = draw_augment(cfg, rng);
    apply_augment(image, mask, rows, cols, cfg, d, out_image, out_mask);
    return d;
}

}  // namespace ctseg
