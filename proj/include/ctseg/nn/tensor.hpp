#pragma once

#include <cstdint>
#include <cstring>
#include <vector>

#include <Eigen/Dense>

#include "ctseg/errors.hpp"

namespace ctseg::nn {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

// Batch of 2D feature maps in NHWC with a one-pixel zero border around every
// image plane and zero guard margins at both buffer ends. The layout lets a
// 3x3 convolution run as nine contiguous GEMMs: shifting the flat buffer by
// (dy*wp + dx) pixel slots shifts every image's view uniformly, and whatever
// garbage accumulates on border pixels is re-zeroed afterwards.
class FeatureMap {
public:
    int n = 0, h = 0, w = 0, c = 0;

    int hp() const { return h + 2; }
    int wp() const { return w + 2; }
    long plane_px() const { return long(hp()) * wp(); }
    // GEMM row count: every padded pixel of every image
    long rows() const { return long(n) * plane_px(); }
    long interior_px() const { return long(n) * h * w; }

    void resize(int n_, int h_, int w_, int c_) {
        if (n == n_ && h == h_ && w == w_ && c == c_) return;
        n = n_; h = h_; w = w_; c = c_;
        margin_ = (long(wp()) + 2) * c;
        buf_.assign(std::size_t(2 * margin_ + rows() * long(c)), 0.0f);
    }

    bool same_shape(const FeatureMap& o) const {
        return n == o.n && h == o.h && w == o.w && c == o.c;
    }

    float* base() { return buf_.data() + margin_; }
    const float* base() const { return buf_.data() + margin_; }

    float* shifted(int dy, int dx) { return base() + (long(dy) * wp() + dx) * c; }
    const float* shifted(int dy, int dx) const {
        return base() + (long(dy) * wp() + dx) * c;
    }

    // interior pixel (y, x) of image i; y in [0,h), x in [0,w)
    float* px(int i, int y, int x) {
        return base() + ((long(i) * hp() + y + 1) * wp() + x + 1) * c;
    }
    const float* px(int i, int y, int x) const {
        return base() + ((long(i) * hp() + y + 1) * wp() + x + 1) * c;
    }

    // start of interior row y (w contiguous pixels)
    float* row(int i, int y) { return px(i, y, 0); }
    const float* row(int i, int y) const { return px(i, y, 0); }

    void zero_rows() { std::memset(base(), 0, std::size_t(rows()) * c * sizeof(float)); }

    void zero_border() {
        const long row_f = long(wp()) * c;
        for (int i = 0; i < n; ++i) {
            float* plane = base() + long(i) * plane_px() * c;
            std::memset(plane, 0, std::size_t(row_f) * sizeof(float));
            std::memset(plane + (long(hp()) - 1) * row_f, 0,
                        std::size_t(row_f) * sizeof(float));
            for (int y = 1; y < hp() - 1; ++y) {
                std::memset(plane + long(y) * row_f, 0, std::size_t(c) * sizeof(float));
                std::memset(plane + long(y) * row_f + (long(wp()) - 1) * c, 0,
                            std::size_t(c) * sizeof(float));
            }
        }
    }

    // Copies a dense (h*w) single-channel image into the interior of image i.
    void pack_channel(int i, const float* src) {
        if (c != 1) throw Error("pack_channel expects c == 1");
        for (int y = 0; y < h; ++y)
            std::memcpy(row(i, y), src + std::size_t(y) * w, std::size_t(w) * sizeof(float));
    }

    // Extracts the interior of image i (c must be 1) into a dense buffer.
    void unpack_channel(int i, float* dst) const {
        if (c != 1) throw Error("unpack_channel expects c == 1");
        for (int y = 0; y < h; ++y)
            std::memcpy(dst + std::size_t(y) * w, row(i, y), std::size_t(w) * sizeof(float));
    }

private:
    std::vector<float> buf_;
    long margin_ = 0;
};

// splitmix64; used to derive independent RNG streams from (seed, fold, epoch,
// slice) so batch composition never depends on worker scheduling.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0,
                              std::uint64_t c = 0, std::uint64_t d = 0) {
    std::uint64_t x = a * 0x9E3779B97F4A7C15ULL + b * 0xBF58476D1CE4E5B9ULL +
                      c * 0x94D049BB133111EBULL + d * 0xD6E8FEB86659FD93ULL + 1;
    x ^= x >> 30; x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27; x *= 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
}

}  // namespace ctseg::nn
