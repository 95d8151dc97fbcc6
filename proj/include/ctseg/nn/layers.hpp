#pragma once

#include <cmath>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ctseg/errors.hpp"
#include "ctseg/nn/smallgemm.hpp"
#include "ctseg/nn/tensor.hpp"

namespace ctseg::nn {

// One named parameter tensor. Buffers (running stats) have no gradient but
// still serialize into checkpoints.
struct Param {
    std::string name;
    std::vector<float>* value = nullptr;
    std::vector<float>* grad = nullptr;  // null for non-trainable buffers
};

// 3x3 convolution, stride 1, one-pixel zero padding. Runs as nine contiguous
// accumulate-GEMMs over the padded NHWC planes; supports a split input
// (decoder skip concatenation) without materializing the concatenated map.
class Conv3x3 {
public:
    int cin = 0, cout = 0;
    bool has_bias = false;
    std::vector<float> weight;  // [offset 0..8][cin][cout]
    std::vector<float> bias;
    std::vector<float> wgrad, bgrad;

    void init(int cin_, int cout_, bool bias_, std::mt19937& rng) {
        cin = cin_;
        cout = cout_;
        has_bias = bias_;
        weight.resize(std::size_t(9) * cin * cout);
        wgrad.assign(weight.size(), 0.0f);
        // Kaiming normal, fan-in mode, for the ReLU nets this feeds
        std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / (9.0f * cin)));
        for (auto& v : weight) v = dist(rng);
        if (has_bias) {
            bias.assign(cout, 0.0f);
            bgrad.assign(cout, 0.0f);
        }
    }

    // Row-tile size targeting ~L2 residency: the tile of the output and of
    // every input stays hot across the nine shifted accumulate-GEMMs instead
    // of streaming whole feature maps from DRAM nine times.
    static long tile_rows(int bytes_per_row) {
        const long budget = 448 * 1024;
        long t = budget / std::max(bytes_per_row, 1);
        return std::max<long>(1024, t - t % 64);
    }

    void forward(std::span<const FeatureMap* const> ins, FeatureMap& out) const {
        const FeatureMap& in0 = *ins[0];
        out.resize(in0.n, in0.h, in0.w, cout);
        const long M = out.rows();
        if (smallgemm::handles(cout)) {
            // single fused sweep per input; the first initializes the output
            int coff = 0;
            for (const FeatureMap* in : ins) {
                long delta[9];
                for (int o = 0; o < 9; ++o)
                    delta[o] = in->shifted(o / 3 - 1, o % 3 - 1) - in->base();
                smallgemm::conv_fused(in->base(), M, in->c, delta,
                                      weight.data() + std::size_t(coff) * cout,
                                      std::size_t(cin) * cout, out.base(), cout,
                                      coff == 0);
                coff += in->c;
            }
        } else {
            out.zero_rows();
            const long tile = tile_rows(int(sizeof(float)) * (cin + cout));
            for (long r0 = 0; r0 < M; r0 += tile) {
                const long m = std::min(tile, M - r0);
                MapRM C(out.base() + r0 * cout, m, cout);
                for (int o = 0; o < 9; ++o) {
                    const int dy = o / 3 - 1, dx = o % 3 - 1;
                    int coff = 0;
                    for (const FeatureMap* in : ins) {
                        CMapRM A(in->shifted(dy, dx) + r0 * in->c, m, in->c);
                        CMapRM Wo(weight.data() + (std::size_t(o) * cin + coff) * cout,
                                  in->c, cout);
                        C.noalias() += A * Wo;
                        coff += in->c;
                    }
                }
            }
        }
        if (has_bias) {
            Eigen::Map<const Eigen::RowVectorXf> b(bias.data(), cout);
            for (int i = 0; i < out.n; ++i)
                for (int y = 0; y < out.h; ++y) {
                    MapRM R(out.row(i, y), out.w, cout);
                    R.rowwise() += b;
                }
        }
        out.zero_border();
    }

    void forward(const FeatureMap& in, FeatureMap& out) const {
        const FeatureMap* p = &in;
        forward(std::span<const FeatureMap* const>(&p, 1), out);
    }

    // dins[j] may be null to skip a branch (e.g. no gradient into the input
    // image). accumulate_din adds into existing grads instead of overwriting.
    void backward(std::span<const FeatureMap* const> ins, const FeatureMap& dout,
                  std::span<FeatureMap* const> dins, bool accumulate_din = false) {
        const long M = dout.rows();
        const bool narrow_w = smallgemm::handles(cout);
        for (std::size_t j = 0; j < dins.size(); ++j) {
            if (!dins[j]) continue;
            dins[j]->resize(ins[j]->n, ins[j]->h, ins[j]->w, ins[j]->c);
            // narrow input grads run as fused sweeps that initialize in-place
            if (!accumulate_din && !smallgemm::handles(ins[j]->c)) dins[j]->zero_rows();
        }
        // weight/bias grads: row tiles keep dout and the shifted inputs hot
        const long tile = tile_rows(int(sizeof(float)) * (cin + cout));
        for (long r0 = 0; r0 < M; r0 += tile) {
            const long m = std::min(tile, M - r0);
            CMapRM DOut(dout.base() + r0 * cout, m, cout);
            for (int o = 0; o < 9; ++o) {
                const int dy = o / 3 - 1, dx = o % 3 - 1;
                int coff = 0;
                for (const FeatureMap* in : ins) {
                    float* wg = wgrad.data() + (std::size_t(o) * cin + coff) * cout;
                    const float* a = in->shifted(dy, dx) + r0 * in->c;
                    if (narrow_w) {
                        smallgemm::weight(a, m, in->c, in->c, dout.base() + r0 * cout,
                                          wg, cout, cout);
                    } else {
                        MapRM Wg(wg, in->c, cout);
                        CMapRM A(a, m, in->c);
                        Wg.noalias() += A.transpose() * DOut;
                    }
                    coff += in->c;
                }
            }
            if (has_bias) {
                // border rows of dout are zero, so the full-row sum is exact
                Eigen::Map<Eigen::RowVectorXf> bg(bgrad.data(), cout);
                bg += DOut.colwise().sum();
            }
        }
        // input grads: transposed-weight convolution of dout
        int coff = 0;
        for (std::size_t j = 0; j < dins.size(); ++j) {
            FeatureMap* din = dins[j];
            if (din) {
                const int ci = ins[j]->c;
                if (smallgemm::handles(ci)) {
                    wt_.resize(std::size_t(9) * cout * ci);
                    for (int o = 0; o < 9; ++o)
                        for (int i = 0; i < ci; ++i)
                            for (int oc = 0; oc < cout; ++oc)
                                wt_[(std::size_t(o) * cout + oc) * ci + i] =
                                    weight[(std::size_t(o) * cin + coff + i) * cout + oc];
                    long delta[9];
                    for (int o = 0; o < 9; ++o)
                        delta[o] = dout.shifted(-(o / 3 - 1), -(o % 3 - 1)) - dout.base();
                    smallgemm::conv_fused(dout.base(), M, cout, delta, wt_.data(),
                                          std::size_t(cout) * ci, din->base(), ci,
                                          !accumulate_din);
                } else {
                    const long dtile = tile_rows(int(sizeof(float)) * (ci + cout));
                    for (long r0 = 0; r0 < M; r0 += dtile) {
                        const long m = std::min(dtile, M - r0);
                        MapRM DIn(din->base() + r0 * ci, m, ci);
                        for (int o = 0; o < 9; ++o) {
                            const int dy = o / 3 - 1, dx = o % 3 - 1;
                            CMapRM DOutShift(dout.shifted(-dy, -dx) + r0 * cout, m, cout);
                            CMapRM Wo(weight.data() + (std::size_t(o) * cin + coff) * cout,
                                      ci, cout);
                            DIn.noalias() += DOutShift * Wo.transpose();
                        }
                    }
                }
                din->zero_border();
            }
            coff += ins[j]->c;
        }
    }

    void zero_grad() {
        std::fill(wgrad.begin(), wgrad.end(), 0.0f);
        std::fill(bgrad.begin(), bgrad.end(), 0.0f);
    }

    void collect_params(const std::string& prefix, std::vector<Param>& out) {
        out.push_back({prefix + ".weight", &weight, &wgrad});
        if (has_bias) out.push_back({prefix + ".bias", &bias, &bgrad});
    }

    std::size_t param_count() const { return weight.size() + bias.size(); }

private:
    std::vector<float> wt_;  // scratch for transposed weight blocks
};

// Batch normalization with the ReLU fused into the apply pass. Training mode
// uses batch statistics over the interior pixels and maintains running
// estimates for inference.
class BatchNormRelu {
public:
    using ArrRow = Eigen::Array<float, 1, Eigen::Dynamic>;

    int c = 0;
    double eps = 1e-5;
    double momentum = 0.1;
    std::vector<float> gamma, beta, running_mean, running_var;
    std::vector<float> ggrad, bgrad;

    void init(int c_) {
        c = c_;
        gamma.assign(c, 1.0f);
        beta.assign(c, 0.0f);
        running_mean.assign(c, 0.0f);
        running_var.assign(c, 1.0f);
        ggrad.assign(c, 0.0f);
        bgrad.assign(c, 0.0f);
    }

    // Border pixels are zero and contribute nothing to the sums; the divisor
    // is the interior pixel count, so all passes sweep the flat buffer. The
    // channel of flat index j is j % c, so per-channel coefficients are
    // replicated to a small vector-friendly period.
    void forward(const FeatureMap& in, FeatureMap& out, bool training) {
        out.resize(in.n, in.h, in.w, in.c);
        const double count = double(in.interior_px());
        std::vector<float> sa(c), sb(c);
        if (training) {
            std::vector<double> sum(c), sumsq(c);
            reduce2(in.base(), nullptr, nullptr, in.rows() * c, sum, sumsq);
            mean_.resize(c);
            invstd_.resize(c);
            for (int ch = 0; ch < c; ++ch) {
                const double m = sum[ch] / count;
                double var = sumsq[ch] / count - m * m;
                if (var < 0) var = 0;
                mean_[ch] = float(m);
                invstd_[ch] = float(1.0 / std::sqrt(var + eps));
                running_mean[ch] = float((1 - momentum) * running_mean[ch] + momentum * m);
                const double unbiased = count > 1 ? var * count / (count - 1) : var;
                running_var[ch] = float((1 - momentum) * running_var[ch] + momentum * unbiased);
                sa[ch] = gamma[ch] * invstd_[ch];
                sb[ch] = beta[ch] - gamma[ch] * mean_[ch] * invstd_[ch];
            }
            saved_in_ = &in;
            saved_out_ = &out;
        } else {
            for (int ch = 0; ch < c; ++ch) {
                const float inv = float(1.0 / std::sqrt(double(running_var[ch]) + eps));
                sa[ch] = gamma[ch] * inv;
                sb[ch] = beta[ch] - gamma[ch] * running_mean[ch] * inv;
            }
        }
        const int L = rep_len();
        std::vector<float> sa_r(L), sb_r(L);
        replicate(sa, sa_r);
        replicate(sb, sb_r);
        const float* __restrict__ p = in.base();
        float* __restrict__ q = out.base();
        const long total = in.rows() * c;
        const long vend = total - total % L;
        for (long j = 0; j < vend; j += L)
            for (int k = 0; k < L; ++k) {
                const float v = p[j + k] * sa_r[k] + sb_r[k];
                q[j + k] = v > 0.0f ? v : 0.0f;
            }
        for (long j = vend; j < total; ++j) {
            const float v = p[j] * sa[j % c] + sb[j % c];
            q[j] = v > 0.0f ? v : 0.0f;
        }
        out.zero_border();  // the affine shift leaked sb into the border ring
    }

    // din is fully rewritten; borders end up zero.
    void backward(const FeatureMap& dout, FeatureMap& din) {
        const FeatureMap& in = *saved_in_;
        const FeatureMap& out = *saved_out_;
        din.resize(in.n, in.h, in.w, in.c);
        const double count = double(in.interior_px());
        const long total = in.rows() * c;

        // ReLU-off elements pass no dout, but still receive the batch-stat
        // coupling terms below
        std::vector<double> sdy(c), sdyx(c);
        reduce_backward(in.base(), out.base(), dout.base(), total, sdy, sdyx);

        std::vector<float> k_dy(c), k_dyx(c), a(c);
        for (int ch = 0; ch < c; ++ch) {
            ggrad[ch] += float(sdyx[ch]);
            bgrad[ch] += float(sdy[ch]);
            k_dy[ch] = float(sdy[ch] / count);
            k_dyx[ch] = float(sdyx[ch] / count);
            a[ch] = gamma[ch] * invstd_[ch];
        }
        const int L = rep_len();
        std::vector<float> m_r(L), i_r(L), k1_r(L), k2_r(L), a_r(L);
        replicate(mean_, m_r);
        replicate(invstd_, i_r);
        replicate(k_dy, k1_r);
        replicate(k_dyx, k2_r);
        replicate(a, a_r);
        const float* __restrict__ x = in.base();
        const float* __restrict__ o = out.base();
        const float* __restrict__ d = dout.base();
        float* __restrict__ g = din.base();
        const long vend = total - total % L;
        for (long j = 0; j < vend; j += L)
            for (int k = 0; k < L; ++k) {
                const float dy = o[j + k] > 0.0f ? d[j + k] : 0.0f;
                const float xhat = (x[j + k] - m_r[k]) * i_r[k];
                g[j + k] = a_r[k] * (dy - k1_r[k] - xhat * k2_r[k]);
            }
        for (long j = vend; j < total; ++j) {
            const int ch = int(j % c);
            const float dy = o[j] > 0.0f ? d[j] : 0.0f;
            const float xhat = (x[j] - mean_[ch]) * invstd_[ch];
            g[j] = a[ch] * (dy - k_dy[ch] - xhat * k_dyx[ch]);
        }
        din.zero_border();
    }

    void zero_grad() {
        std::fill(ggrad.begin(), ggrad.end(), 0.0f);
        std::fill(bgrad.begin(), bgrad.end(), 0.0f);
    }

    void collect_params(const std::string& prefix, std::vector<Param>& out) {
        out.push_back({prefix + ".gamma", &gamma, &ggrad});
        out.push_back({prefix + ".beta", &beta, &bgrad});
        out.push_back({prefix + ".running_mean", &running_mean, nullptr});
        out.push_back({prefix + ".running_var", &running_var, nullptr});
    }

    std::size_t param_count() const { return gamma.size() + beta.size(); }

private:
    std::vector<float> mean_, invstd_;
    const FeatureMap* saved_in_ = nullptr;
    const FeatureMap* saved_out_ = nullptr;

    // Coefficient replication period: a multiple of c wide enough to fill
    // vector registers even for small channel counts.
    int rep_len() const { return c >= 64 ? c : c * ((63 + c) / c); }

    void replicate(const std::vector<float>& per_c, std::vector<float>& rep) const {
        for (std::size_t k = 0; k < rep.size(); ++k) rep[k] = per_c[k % std::size_t(c)];
    }

    // Per-channel sum and sum-of-squares of x (o/d unused), or — when o and d
    // are given — of the ReLU-masked gradient dy and dy*x. Float accumulators
    // are flushed into doubles often enough to keep rounding in check.
    void reduce2(const float* __restrict__ x, const float* o, const float* d, long total,
                 std::vector<double>& out1, std::vector<double>& out2) const {
        const int L = rep_len();
        std::vector<float> acc1(L, 0.0f), acc2(L, 0.0f);
        std::fill(out1.begin(), out1.end(), 0.0);
        std::fill(out2.begin(), out2.end(), 0.0);
        long done = 0;
        while (done < total) {
            const long chunk = std::min(total - done, long(1) << 20);
            const long vend = done + chunk - chunk % L;
            if (!o) {
                for (long j = done; j < vend; j += L)
                    for (int k = 0; k < L; ++k) {
                        const float v = x[j + k];
                        acc1[k] += v;
                        acc2[k] += v * v;
                    }
                for (long j = vend; j < done + chunk; ++j) {
                    out1[j % c] += x[j];
                    out2[j % c] += double(x[j]) * x[j];
                }
            } else {
                for (long j = done; j < vend; j += L)
                    for (int k = 0; k < L; ++k) {
                        const float dy = o[j + k] > 0.0f ? d[j + k] : 0.0f;
                        acc1[k] += dy;
                        acc2[k] += dy * x[j + k];
                    }
                for (long j = vend; j < done + chunk; ++j) {
                    const float dy = o[j] > 0.0f ? d[j] : 0.0f;
                    out1[j % c] += dy;
                    out2[j % c] += double(dy) * x[j];
                }
            }
            for (int k = 0; k < L; ++k) {
                out1[k % c] += acc1[k];
                out2[k % c] += acc2[k];
                acc1[k] = acc2[k] = 0.0f;
            }
            done += chunk;
        }
    }

    // Reduction for backward: sdy[ch] = sum(dy), sdyx[ch] = sum(dy * xhat).
    // The xhat factor is applied after the raw dy*x sums: since
    // sum(dy*xhat) = (sum(dy*x) - mean*sum(dy)) * invstd, accumulating raw
    // products keeps the hot loop to one fma.
    void reduce_backward(const float* x, const float* o, const float* d, long total,
                         std::vector<double>& sdy, std::vector<double>& sdyx) const {
        reduce2(x, o, d, total, sdy, sdyx);
        for (int ch = 0; ch < c; ++ch)
            sdyx[ch] = (sdyx[ch] - double(mean_[ch]) * sdy[ch]) * double(invstd_[ch]);
    }
};

// 2x2 max pooling, stride 2. Input spatial dims must be even.
class MaxPool2 {
public:
    void forward(const FeatureMap& in, FeatureMap& out) {
        if (in.h % 2 || in.w % 2)
            throw Error("max-pool input dims must be even, got " +
                        std::to_string(in.h) + "x" + std::to_string(in.w));
        const int ho = in.h / 2, wo = in.w / 2, c = in.c;
        out.resize(in.n, ho, wo, c);
        argmax_.resize(std::size_t(in.n) * ho * wo * c);
        std::uint8_t* am = argmax_.data();
        for (int i = 0; i < in.n; ++i)
            for (int yo = 0; yo < ho; ++yo) {
                const float* r0 = in.row(i, 2 * yo);
                const float* r1 = in.row(i, 2 * yo + 1);
                float* o = out.row(i, yo);
                for (int xo = 0; xo < wo; ++xo, r0 += 2 * c, r1 += 2 * c, o += c, am += c)
                    for (int ch = 0; ch < c; ++ch) {
                        // branch-free so the channel loop vectorizes; strict >
                        // keeps first-wins tie behavior
                        const float a0 = r0[ch], a1 = r0[c + ch];
                        const float a2 = r1[ch], a3 = r1[c + ch];
                        float best = a1 > a0 ? a1 : a0;
                        int code = a1 > a0 ? 1 : 0;
                        code = a2 > best ? 2 : code;
                        best = a2 > best ? a2 : best;
                        code = a3 > best ? 3 : code;
                        best = a3 > best ? a3 : best;
                        o[ch] = best;
                        am[ch] = std::uint8_t(code);
                    }
            }
    }

    void backward(const FeatureMap& dout, FeatureMap& din, int in_h, int in_w,
                  bool accumulate) {
        din.resize(dout.n, in_h, in_w, dout.c);
        if (!accumulate) din.zero_rows();
        const int c = dout.c;
        const std::uint8_t* am = argmax_.data();
        for (int i = 0; i < dout.n; ++i)
            for (int yo = 0; yo < dout.h; ++yo) {
                const float* d = dout.row(i, yo);
                float* g0 = din.row(i, 2 * yo);
                float* g1 = din.row(i, 2 * yo + 1);
                for (int xo = 0; xo < dout.w; ++xo, d += c, g0 += 2 * c, g1 += 2 * c, am += c)
                    for (int ch = 0; ch < c; ++ch) {
                        const float dv = d[ch];
                        const int code = am[ch];
                        g0[ch] += code == 0 ? dv : 0.0f;
                        g0[c + ch] += code == 1 ? dv : 0.0f;
                        g1[ch] += code == 2 ? dv : 0.0f;
                        g1[c + ch] += code == 3 ? dv : 0.0f;
                    }
            }
    }

private:
    std::vector<std::uint8_t> argmax_;
};

// Bilinear 2x upsampling with half-pixel (align_corners=false) sampling.
// The two-tap weights alternate 0.25/0.75 by output parity; edge taps clamp.
class UpsampleBilinear2x {
public:
    void forward(const FeatureMap& in, FeatureMap& out) const {
        const int c = in.c;
        out.resize(in.n, 2 * in.h, 2 * in.w, c);
        for (int i = 0; i < in.n; ++i)
            for (int yo = 0; yo < out.h; ++yo) {
                const auto [y0, y1, wy0] = taps(yo, in.h);
                const float* ra = in.row(i, y0);
                const float* rb = in.row(i, y1);
                float* o = out.row(i, yo);
                for (int xo = 0; xo < out.w; ++xo, o += c) {
                    const auto [x0, x1, wx0] = taps(xo, in.w);
                    const float w00 = wy0 * wx0, w01 = wy0 * (1 - wx0);
                    const float w10 = (1 - wy0) * wx0, w11 = (1 - wy0) * (1 - wx0);
                    const float* a0 = ra + std::size_t(x0) * c;
                    const float* a1 = ra + std::size_t(x1) * c;
                    const float* b0 = rb + std::size_t(x0) * c;
                    const float* b1 = rb + std::size_t(x1) * c;
                    for (int ch = 0; ch < c; ++ch)
                        o[ch] = w00 * a0[ch] + w01 * a1[ch] + w10 * b0[ch] + w11 * b1[ch];
                }
            }
    }

    void backward(const FeatureMap& dout, FeatureMap& din, int in_h, int in_w) const {
        const int c = dout.c;
        din.resize(dout.n, in_h, in_w, c);
        din.zero_rows();
        for (int i = 0; i < dout.n; ++i)
            for (int yo = 0; yo < dout.h; ++yo) {
                const auto [y0, y1, wy0] = taps(yo, in_h);
                float* ra = din.row(i, y0);
                float* rb = din.row(i, y1);
                const float* d = dout.row(i, yo);
                for (int xo = 0; xo < dout.w; ++xo, d += c) {
                    const auto [x0, x1, wx0] = taps(xo, in_w);
                    const float w00 = wy0 * wx0, w01 = wy0 * (1 - wx0);
                    const float w10 = (1 - wy0) * wx0, w11 = (1 - wy0) * (1 - wx0);
                    float* a0 = ra + std::size_t(x0) * c;
                    float* a1 = ra + std::size_t(x1) * c;
                    float* b0 = rb + std::size_t(x0) * c;
                    float* b1 = rb + std::size_t(x1) * c;
                    for (int ch = 0; ch < c; ++ch) {
                        const float g = d[ch];
                        a0[ch] += w00 * g;
                        a1[ch] += w01 * g;
                        b0[ch] += w10 * g;
                        b1[ch] += w11 * g;
                    }
                }
            }
        din.zero_border();
    }

private:
    // source taps for output index: lo index, hi index, weight of lo
    static std::tuple<int, int, float> taps(int oi, int in_len) {
        if (oi % 2 == 0) {
            const int j = oi / 2;
            return {std::max(j - 1, 0), j, 0.25f};
        }
        const int j = oi / 2;
        return {j, std::min(j + 1, in_len - 1), 0.75f};
    }
};

// 1x1 convolution (pure channel mixing); a single GEMM over all pixels.
class Conv1x1 {
public:
    int cin = 0, cout = 0;
    bool has_bias = false;
    std::vector<float> weight;  // [cin][cout]
    std::vector<float> bias;
    std::vector<float> wgrad, bgrad;

    void init(int cin_, int cout_, bool bias_, std::mt19937& rng) {
        cin = cin_;
        cout = cout_;
        has_bias = bias_;
        weight.resize(std::size_t(cin) * cout);
        wgrad.assign(weight.size(), 0.0f);
        std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / cin));
        for (auto& v : weight) v = dist(rng);
        if (has_bias) {
            bias.assign(cout, 0.0f);
            bgrad.assign(cout, 0.0f);
        }
    }

    void forward(const FeatureMap& in, FeatureMap& out) const {
        out.resize(in.n, in.h, in.w, cout);
        const long M = out.rows();
        if (smallgemm::handles(cout)) {
            out.zero_rows();  // border rows of the input are zero, so the
                              // accumulate kernel leaves the border zero
            smallgemm::acc(in.base(), M, cin, cin, weight.data(), out.base(), cout);
        } else {
            CMapRM A(in.base(), M, cin);
            CMapRM W(weight.data(), cin, cout);
            MapRM C(out.base(), M, cout);
            C.noalias() = A * W;
        }
        if (has_bias) {
            Eigen::Map<const Eigen::RowVectorXf> b(bias.data(), cout);
            for (int i = 0; i < out.n; ++i)
                for (int y = 0; y < out.h; ++y) {
                    MapRM R(out.row(i, y), out.w, cout);
                    R.rowwise() += b;
                }
        }
    }

    void backward(const FeatureMap& in, const FeatureMap& dout, FeatureMap* din,
                  bool accumulate_din = false) {
        const long M = dout.rows();
        CMapRM DOut(dout.base(), M, cout);
        if (smallgemm::handles(cout)) {
            smallgemm::weight(in.base(), M, cin, cin, dout.base(), wgrad.data(), cout, cout);
        } else {
            CMapRM A(in.base(), M, cin);
            MapRM Wg(wgrad.data(), cin, cout);
            Wg.noalias() += A.transpose() * DOut;
        }
        if (has_bias) {
            Eigen::Map<Eigen::RowVectorXf> bg(bgrad.data(), cout);
            bg += DOut.colwise().sum();
        }
        if (din) {
            din->resize(in.n, in.h, in.w, cin);
            if (!accumulate_din) din->zero_rows();
            if (smallgemm::handles(cin)) {
                wt_.resize(weight.size());
                for (int i = 0; i < cin; ++i)
                    for (int oc = 0; oc < cout; ++oc)
                        wt_[std::size_t(oc) * cin + i] = weight[std::size_t(i) * cout + oc];
                smallgemm::acc(dout.base(), M, cout, cout, wt_.data(), din->base(), cin);
            } else {
                CMapRM W(weight.data(), cin, cout);
                MapRM DIn(din->base(), M, cin);
                DIn.noalias() += DOut * W.transpose();
            }
            din->zero_border();
        }
    }

    void zero_grad() {
        std::fill(wgrad.begin(), wgrad.end(), 0.0f);
        std::fill(bgrad.begin(), bgrad.end(), 0.0f);
    }

    void collect_params(const std::string& prefix, std::vector<Param>& out) {
        out.push_back({prefix + ".weight", &weight, &wgrad});
        if (has_bias) out.push_back({prefix + ".bias", &bias, &bgrad});
    }

    std::size_t param_count() const { return weight.size() + bias.size(); }

private:
    std::vector<float> wt_;  // scratch for the transposed weight
};

// 1x1 projection to a single logit per pixel plus the sigmoid output head.
class SigmoidHead {
public:
    int cin = 0;
    std::vector<float> weight, bias;   // [cin], [1]
    std::vector<float> wgrad, bgrad;

    void init(int cin_, std::mt19937& rng) {
        cin = cin_;
        weight.resize(cin);
        std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / cin));
        for (auto& v : weight) v = dist(rng);
        bias.assign(1, 0.0f);
        wgrad.assign(cin, 0.0f);
        bgrad.assign(1, 0.0f);
    }

    void forward(const FeatureMap& in, FeatureMap& prob) {
        prob.resize(in.n, in.h, in.w, 1);
        for (int i = 0; i < in.n; ++i)
            for (int y = 0; y < in.h; ++y) {
                const float* r = in.row(i, y);
                float* o = prob.row(i, y);
                for (int x = 0; x < in.w; ++x, r += cin, ++o) {
                    float z = bias[0];
                    for (int ch = 0; ch < cin; ++ch) z += weight[ch] * r[ch];
                    *o = 1.0f / (1.0f + std::exp(-z));
                }
            }
        saved_in_ = &in;
        saved_prob_ = &prob;
    }

    void backward(const FeatureMap& dprob, FeatureMap& din) {
        const FeatureMap& in = *saved_in_;
        const FeatureMap& prob = *saved_prob_;
        din.resize(in.n, in.h, in.w, cin);
        din.zero_rows();
        double bg = 0.0;
        std::vector<double> wg(cin, 0.0);
        for (int i = 0; i < in.n; ++i)
            for (int y = 0; y < in.h; ++y) {
                const float* r = in.row(i, y);
                const float* p = prob.row(i, y);
                const float* dp = dprob.row(i, y);
                float* g = din.row(i, y);
                for (int x = 0; x < in.w; ++x, r += cin, ++p, ++dp, g += cin) {
                    const float dz = *dp * *p * (1.0f - *p);
                    bg += dz;
                    for (int ch = 0; ch < cin; ++ch) {
                        wg[ch] += double(dz) * r[ch];
                        g[ch] = dz * weight[ch];
                    }
                }
            }
        bgrad[0] += float(bg);
        for (int ch = 0; ch < cin; ++ch) wgrad[ch] += float(wg[ch]);
    }

    void zero_grad() {
        std::fill(wgrad.begin(), wgrad.end(), 0.0f);
        bgrad[0] = 0.0f;
    }

    void collect_params(const std::string& prefix, std::vector<Param>& out) {
        out.push_back({prefix + ".weight", &weight, &wgrad});
        out.push_back({prefix + ".bias", &bias, &bgrad});
    }

    std::size_t param_count() const { return weight.size() + 1; }

private:
    const FeatureMap* saved_in_ = nullptr;
    const FeatureMap* saved_prob_ = nullptr;
};

}  // namespace ctseg::nn
