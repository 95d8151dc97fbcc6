#pragma once

// Independent reference implementations used to cross-check the library.
// Everything here favors clarity over speed: plain triple loops, double
// accumulation, no shared code with the headers under test.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "ctseg/metrics.hpp"
#include "ctseg/nn/layers.hpp"
#include "ctseg/volume.hpp"

namespace testsupport {

// ---------------------------------------------------------------- metrics ---

struct RefCounts {
    long long tp = 0, fp = 0, fn = 0, tn = 0;
};

// Banded confusion from first principles: per-column min-z interface depth,
// then every voxel within |z - depth| <= pad of a present column is scored.
inline RefCounts ref_banded_confusion(const ctseg::MaskVolume& pred,
                                      const ctseg::MaskVolume& gt, int pad) {
    const ctseg::Shape3 s = gt.shape();
    RefCounts r;
    for (int y = 0; y < s.y; ++y)
        for (int x = 0; x < s.x; ++x) {
            int depth = -1;
            for (int z = 0; z < s.z; ++z)
                if (gt.at(z, y, x)) { depth = z; break; }
            if (depth < 0) continue;
            for (int z = 0; z < s.z; ++z) {
                if (std::abs(z - depth) > pad) continue;
                const bool p = pred.at(z, y, x) != 0;
                const bool g = gt.at(z, y, x) != 0;
                if (p && g) ++r.tp;
                else if (p && !g) ++r.fp;
                else if (!p && g) ++r.fn;
                else ++r.tn;
            }
        }
    return r;
}

inline double ref_iou(const RefCounts& c) {
    const long long den = c.tp + c.fp + c.fn;
    return den == 0 ? 1.0 : double(c.tp) / double(den);
}

inline double ref_dice(const RefCounts& c) {
    const long long den = 2 * c.tp + c.fp + c.fn;
    return den == 0 ? 1.0 : 2.0 * double(c.tp) / double(den);
}

inline double ref_vs(const RefCounts& c) {
    const long long den = 2 * c.tp + c.fp + c.fn;
    return den == 0 ? 1.0 : 1.0 - double(std::llabs(c.fp - c.fn)) / double(den);
}

// ---------------------------------------------------------------- NN refs ---

// Interior values of a FeatureMap as a dense [n][h][w][c] vector.
inline std::vector<float> dense(const ctseg::nn::FeatureMap& m) {
    std::vector<float> out(std::size_t(m.n) * m.h * m.w * m.c);
    std::size_t k = 0;
    for (int i = 0; i < m.n; ++i)
        for (int y = 0; y < m.h; ++y) {
            const float* r = m.row(i, y);
            for (int x = 0; x < m.w * m.c; ++x) out[k++] = r[x];
        }
    return out;
}

inline void fill_dense(ctseg::nn::FeatureMap& m, const std::vector<float>& v) {
    std::size_t k = 0;
    for (int i = 0; i < m.n; ++i)
        for (int y = 0; y < m.h; ++y) {
            float* r = m.row(i, y);
            for (int x = 0; x < m.w * m.c; ++x) r[x] = v[k++];
        }
    m.zero_border();
}

// Naive 3x3 convolution over (possibly several) concatenated inputs,
// zero padding by one pixel, weights laid out [offset][cin][cout].
inline std::vector<float> ref_conv3x3_forward(
    const std::vector<const ctseg::nn::FeatureMap*>& ins,
    const ctseg::nn::Conv3x3& cv) {
    const ctseg::nn::FeatureMap& f0 = *ins[0];
    std::vector<float> out(std::size_t(f0.n) * f0.h * f0.w * cv.cout, 0.0f);
    for (int i = 0; i < f0.n; ++i)
        for (int y = 0; y < f0.h; ++y)
            for (int x = 0; x < f0.w; ++x)
                for (int oc = 0; oc < cv.cout; ++oc) {
                    double s = cv.has_bias ? cv.bias[oc] : 0.0;
                    for (int o = 0; o < 9; ++o) {
                        const int yy = y + o / 3 - 1, xx = x + o % 3 - 1;
                        if (yy < 0 || yy >= f0.h || xx < 0 || xx >= f0.w) continue;
                        int coff = 0;
                        for (const ctseg::nn::FeatureMap* in : ins) {
                            const float* px = in->row(i, yy) + std::size_t(xx) * in->c;
                            for (int ch = 0; ch < in->c; ++ch)
                                s += double(px[ch]) *
                                     cv.weight[(std::size_t(o) * cv.cin + coff + ch) *
                                                   cv.cout + oc];
                            coff += in->c;
                        }
                    }
                    out[((std::size_t(i) * f0.h + y) * f0.w + x) * cv.cout + oc] =
                        float(s);
                }
    return out;
}

struct RefConvGrads {
    std::vector<double> wgrad;               // matches cv.weight layout
    std::vector<double> bgrad;               // per output channel
    std::vector<std::vector<double>> dins;   // dense per input map
};

inline RefConvGrads ref_conv3x3_backward(
    const std::vector<const ctseg::nn::FeatureMap*>& ins,
    const ctseg::nn::Conv3x3& cv, const ctseg::nn::FeatureMap& dout) {
    const int n = dout.n, h = dout.h, w = dout.w, cout = cv.cout;
    RefConvGrads g;
    g.wgrad.assign(cv.weight.size(), 0.0);
    g.bgrad.assign(cout, 0.0);
    g.dins.resize(ins.size());
    for (std::size_t j = 0; j < ins.size(); ++j)
        g.dins[j].assign(std::size_t(n) * h * w * ins[j]->c, 0.0);
    for (int i = 0; i < n; ++i)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const float* dpx = dout.row(i, y) + std::size_t(x) * cout;
                for (int oc = 0; oc < cout; ++oc) g.bgrad[oc] += dpx[oc];
                for (int o = 0; o < 9; ++o) {
                    const int yy = y + o / 3 - 1, xx = x + o % 3 - 1;
                    if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                    int coff = 0;
                    for (std::size_t j = 0; j < ins.size(); ++j) {
                        const float* px = ins[j]->row(i, yy) + std::size_t(xx) * ins[j]->c;
                        for (int ch = 0; ch < ins[j]->c; ++ch)
                            for (int oc = 0; oc < cout; ++oc) {
                                const std::size_t wi =
                                    (std::size_t(o) * cv.cin + coff + ch) * cout + oc;
                                g.wgrad[wi] += double(px[ch]) * dpx[oc];
                                g.dins[j][((std::size_t(i) * h + yy) * w + xx) *
                                              ins[j]->c + ch] +=
                                    double(cv.weight[wi]) * dpx[oc];
                            }
                        coff += ins[j]->c;
                    }
                }
            }
    return g;
}

// Naive 1x1 convolution (channel mixing only).
inline std::vector<float> ref_conv1x1_forward(const ctseg::nn::FeatureMap& in,
                                              const ctseg::nn::Conv1x1& cv) {
    std::vector<float> out(std::size_t(in.n) * in.h * in.w * cv.cout);
    std::size_t k = 0;
    for (int i = 0; i < in.n; ++i)
        for (int y = 0; y < in.h; ++y)
            for (int x = 0; x < in.w; ++x) {
                const float* px = in.row(i, y) + std::size_t(x) * in.c;
                for (int oc = 0; oc < cv.cout; ++oc) {
                    double s = cv.has_bias ? cv.bias[oc] : 0.0;
                    for (int ch = 0; ch < in.c; ++ch)
                        s += double(px[ch]) * cv.weight[std::size_t(ch) * cv.cout + oc];
                    out[k++] = float(s);
                }
            }
    return out;
}

// Naive batch norm + ReLU in training mode. Biased variance normalizes the
// batch; running stats blend with momentum, variance stored unbiased.
struct RefBnOut {
    std::vector<float> out;            // dense, already through ReLU
    std::vector<double> mean, invstd;  // per channel
};

inline RefBnOut ref_bn_relu_forward(const ctseg::nn::FeatureMap& in,
                                    const std::vector<float>& gamma,
                                    const std::vector<float>& beta, double eps) {
    const int c = in.c;
    const double cnt = double(in.n) * in.h * in.w;
    RefBnOut r;
    r.mean.assign(c, 0.0);
    r.invstd.assign(c, 0.0);
    std::vector<double> var(c, 0.0);
    for (int i = 0; i < in.n; ++i)
        for (int y = 0; y < in.h; ++y) {
            const float* row = in.row(i, y);
            for (int x = 0; x < in.w; ++x)
                for (int ch = 0; ch < c; ++ch)
                    r.mean[ch] += row[std::size_t(x) * c + ch];
        }
    for (int ch = 0; ch < c; ++ch) r.mean[ch] /= cnt;
    for (int i = 0; i < in.n; ++i)
        for (int y = 0; y < in.h; ++y) {
            const float* row = in.row(i, y);
            for (int x = 0; x < in.w; ++x)
                for (int ch = 0; ch < c; ++ch) {
                    const double d = row[std::size_t(x) * c + ch] - r.mean[ch];
                    var[ch] += d * d;
                }
        }
    for (int ch = 0; ch < c; ++ch)
        r.invstd[ch] = 1.0 / std::sqrt(var[ch] / cnt + eps);
    r.out.resize(std::size_t(in.n) * in.h * in.w * c);
    std::size_t k = 0;
    for (int i = 0; i < in.n; ++i)
        for (int y = 0; y < in.h; ++y) {
            const float* row = in.row(i, y);
            for (int x = 0; x < in.w; ++x)
                for (int ch = 0; ch < c; ++ch) {
                    const double xh =
                        (row[std::size_t(x) * c + ch] - r.mean[ch]) * r.invstd[ch];
                    const double y2 = double(gamma[ch]) * xh + double(beta[ch]);
                    r.out[k++] = float(std::max(0.0, y2));
                }
        }
    return r;
}

// Analytic batch-norm backward through the ReLU, all in double.
struct RefBnGrads {
    std::vector<double> dgamma, dbeta;
    std::vector<double> din;  // dense
};

inline RefBnGrads ref_bn_relu_backward(const ctseg::nn::FeatureMap& in,
                                       const std::vector<float>& gamma,
                                       const RefBnOut& fw,
                                       const std::vector<float>& dout_dense) {
    const int c = in.c;
    const double cnt = double(in.n) * in.h * in.w;
    const std::vector<float> x = dense(in);
    RefBnGrads g;
    g.dgamma.assign(c, 0.0);
    g.dbeta.assign(c, 0.0);
    g.din.assign(x.size(), 0.0);
    // dy = dout masked by the ReLU; reduce per channel
    std::vector<double> sdy(c, 0.0), sdyx(c, 0.0);
    std::vector<double> dy(x.size());
    for (std::size_t k = 0; k < x.size(); ++k) {
        const int ch = int(k % c);
        dy[k] = fw.out[k] > 0.0f ? double(dout_dense[k]) : 0.0;
        const double xh = (double(x[k]) - fw.mean[ch]) * fw.invstd[ch];
        g.dgamma[ch] += dy[k] * xh;
        g.dbeta[ch] += dy[k];
        sdy[ch] += dy[k];
        sdyx[ch] += dy[k] * xh;
    }
    for (std::size_t k = 0; k < x.size(); ++k) {
        const int ch = int(k % c);
        const double xh = (double(x[k]) - fw.mean[ch]) * fw.invstd[ch];
        g.din[k] = double(gamma[ch]) * fw.invstd[ch] *
                   (dy[k] - sdy[ch] / cnt - xh * sdyx[ch] / cnt);
    }
    return g;
}

// Naive 2x2 max pool with first-wins ties (row-major window order).
inline std::vector<float> ref_maxpool_forward(const ctseg::nn::FeatureMap& in) {
    const int ho = in.h / 2, wo = in.w / 2, c = in.c;
    std::vector<float> out(std::size_t(in.n) * ho * wo * c);
    std::size_t k = 0;
    for (int i = 0; i < in.n; ++i)
        for (int yo = 0; yo < ho; ++yo)
            for (int xo = 0; xo < wo; ++xo)
                for (int ch = 0; ch < c; ++ch) {
                    float best = in.row(i, 2 * yo)[std::size_t(2 * xo) * c + ch];
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const float v =
                                in.row(i, 2 * yo + dy)[std::size_t(2 * xo + dx) * c + ch];
                            if (v > best) best = v;
                        }
                    out[k++] = best;
                }
    return out;
}

// Naive bilinear 2x upsampling with half-pixel sampling, derived from the
// source-coordinate formula src = (dst + 0.5)/2 - 0.5 with edge clamping.
inline std::vector<float> ref_upsample2x_forward(const ctseg::nn::FeatureMap& in) {
    const int ho = 2 * in.h, wo = 2 * in.w, c = in.c;
    auto tap = [](int o, int n, int& i0, int& i1, double& w0) {
        double src = (o + 0.5) / 2.0 - 0.5;
        if (src < 0) src = 0;
        i0 = std::min(int(std::floor(src)), n - 1);
        i1 = std::min(i0 + 1, n - 1);
        const double f = src - std::floor(src);
        w0 = 1.0 - f;
    };
    std::vector<float> out(std::size_t(in.n) * ho * wo * c);
    std::size_t k = 0;
    for (int i = 0; i < in.n; ++i)
        for (int yo = 0; yo < ho; ++yo) {
            int y0, y1; double wy;
            tap(yo, in.h, y0, y1, wy);
            for (int xo = 0; xo < wo; ++xo) {
                int x0, x1; double wx;
                tap(xo, in.w, x0, x1, wx);
                for (int ch = 0; ch < c; ++ch) {
                    const double v =
                        wy * wx * in.row(i, y0)[std::size_t(x0) * c + ch] +
                        wy * (1 - wx) * in.row(i, y0)[std::size_t(x1) * c + ch] +
                        (1 - wy) * wx * in.row(i, y1)[std::size_t(x0) * c + ch] +
                        (1 - wy) * (1 - wx) * in.row(i, y1)[std::size_t(x1) * c + ch];
                    out[k++] = float(v);
                }
            }
        }
    return out;
}

// ------------------------------------------------------------- FD helpers ---

// Central finite difference d f / d x[i] with float-exact step: both probe
// points are rounded to float and the divisor uses their actual spacing, so
// representation error cancels out of the quotient.
template <typename F>
double fd_partial(std::vector<float>& x, std::size_t i, double h, F&& f) {
    const float x0 = x[i];
    const float xp = float(double(x0) + h);
    const float xm = float(double(x0) - h);
    x[i] = xp;
    const double fp = f(x);
    x[i] = xm;
    const double fm = f(x);
    x[i] = x0;
    return (fp - fm) / (double(xp) - double(xm));
}

}  // namespace testsupport
