#pragma once

#include <cstddef>

// Register-blocked GEMM kernels for the narrow matrices general BLAS paths
// handle poorly: C (m x N) accumulations where N is a small multiple of 8 and
// m is huge. Built on the GCC/Clang vector extension so the accumulator tiles
// stay in SIMD registers; the scalar fallback below keeps other compilers
// working.

namespace ctseg::nn::smallgemm {

inline constexpr int kMaxN = 32;  // widest column count the kernels cover

inline bool handles(int n) { return n == 8 || n == 16 || n == 24 || n == 32; }

#if defined(__GNUC__) || defined(__clang__)

using v8f = float __attribute__((vector_size(32), aligned(4)));
using v16f = float __attribute__((vector_size(64), aligned(4)));

inline v8f load8(const float* p) { return *reinterpret_cast<const v8f*>(p); }
inline void store8(float* p, v8f v) { *reinterpret_cast<v8f*>(p) = v; }
inline v8f splat8(float x) { return v8f{x, x, x, x, x, x, x, x}; }
inline v16f load16(const float* p) { return *reinterpret_cast<const v16f*>(p); }
inline void store16(float* p, v16f v) { *reinterpret_cast<v16f*>(p) = v; }
inline v16f splat16(float x) {
    return v16f{x, x, x, x, x, x, x, x, x, x, x, x, x, x, x, x};
}

// C (m x N, contiguous) += A (m x ka, row stride ka) * W (k x N, contiguous)
// with N = 8 * NB. Four-row unrolling amortizes the W loads.
template <int NB>
inline void acc_rows(const float* A, long m, int k, long ka, const float* W, float* C) {
    constexpr int N = 8 * NB;
    long r = 0;
    for (; r + 4 <= m; r += 4) {
        const float* a0 = A + r * ka;
        const float* a1 = a0 + ka;
        const float* a2 = a1 + ka;
        const float* a3 = a2 + ka;
        float* c0 = C + r * N;
        float* c1 = c0 + N;
        float* c2 = c1 + N;
        float* c3 = c2 + N;
        v8f acc0[NB], acc1[NB], acc2[NB], acc3[NB];
        for (int b = 0; b < NB; ++b) {
            acc0[b] = load8(c0 + 8 * b);
            acc1[b] = load8(c1 + 8 * b);
            acc2[b] = load8(c2 + 8 * b);
            acc3[b] = load8(c3 + 8 * b);
        }
        for (int kk = 0; kk < k; ++kk) {
            const float* w = W + std::size_t(kk) * N;
            const v8f b0 = splat8(a0[kk]);
            const v8f b1 = splat8(a1[kk]);
            const v8f b2 = splat8(a2[kk]);
            const v8f b3 = splat8(a3[kk]);
            for (int b = 0; b < NB; ++b) {
                const v8f wv = load8(w + 8 * b);
                acc0[b] += b0 * wv;
                acc1[b] += b1 * wv;
                acc2[b] += b2 * wv;
                acc3[b] += b3 * wv;
            }
        }
        for (int b = 0; b < NB; ++b) {
            store8(c0 + 8 * b, acc0[b]);
            store8(c1 + 8 * b, acc1[b]);
            store8(c2 + 8 * b, acc2[b]);
            store8(c3 + 8 * b, acc3[b]);
        }
    }
    for (; r < m; ++r) {
        const float* a = A + r * ka;
        float* cr = C + r * N;
        v8f acc[NB];
        for (int b = 0; b < NB; ++b) acc[b] = load8(cr + 8 * b);
        for (int kk = 0; kk < k; ++kk) {
            const float* w = W + std::size_t(kk) * N;
            const v8f bv = splat8(a[kk]);
            for (int b = 0; b < NB; ++b) acc[b] += bv * load8(w + 8 * b);
        }
        for (int b = 0; b < NB; ++b) store8(cr + 8 * b, acc[b]);
    }
}

// N = 8 with eight-row unrolling: one W load feeds eight fmas.
inline void acc_rows_n8(const float* A, long m, int k, long ka, const float* W, float* C) {
    long r = 0;
    for (; r + 8 <= m; r += 8) {
        const float* a[8];
        float* c[8];
        v8f acc[8];
        for (int i = 0; i < 8; ++i) {
            a[i] = A + (r + i) * ka;
            c[i] = C + (r + i) * 8;
            acc[i] = load8(c[i]);
        }
        for (int kk = 0; kk < k; ++kk) {
            const v8f wv = load8(W + std::size_t(kk) * 8);
            for (int i = 0; i < 8; ++i) acc[i] += splat8(a[i][kk]) * wv;
        }
        for (int i = 0; i < 8; ++i) store8(c[i], acc[i]);
    }
    for (; r < m; ++r) {
        const float* a = A + r * ka;
        float* cr = C + r * 8;
        v8f acc = load8(cr);
        for (int kk = 0; kk < k; ++kk) acc += splat8(a[kk]) * load8(W + std::size_t(kk) * 8);
        store8(cr, acc);
    }
}

// N = 16 * NB with 64-byte vectors; on AVX-512 this is one register per row
// block and measures well ahead of the 32-byte variant.
template <int NB>
inline void acc_rows_w(const float* A, long m, int k, long ka, const float* W, float* C) {
    constexpr int N = 16 * NB;
    long r = 0;
    for (; r + 4 <= m; r += 4) {
        const float* a0 = A + r * ka;
        const float* a1 = a0 + ka;
        const float* a2 = a1 + ka;
        const float* a3 = a2 + ka;
        float* c0 = C + r * N;
        float* c1 = c0 + N;
        float* c2 = c1 + N;
        float* c3 = c2 + N;
        v16f acc0[NB], acc1[NB], acc2[NB], acc3[NB];
        for (int b = 0; b < NB; ++b) {
            acc0[b] = load16(c0 + 16 * b);
            acc1[b] = load16(c1 + 16 * b);
            acc2[b] = load16(c2 + 16 * b);
            acc3[b] = load16(c3 + 16 * b);
        }
        for (int kk = 0; kk < k; ++kk) {
            const float* w = W + std::size_t(kk) * N;
            const v16f b0 = splat16(a0[kk]);
            const v16f b1 = splat16(a1[kk]);
            const v16f b2 = splat16(a2[kk]);
            const v16f b3 = splat16(a3[kk]);
            for (int b = 0; b < NB; ++b) {
                const v16f wv = load16(w + 16 * b);
                acc0[b] += b0 * wv;
                acc1[b] += b1 * wv;
                acc2[b] += b2 * wv;
                acc3[b] += b3 * wv;
            }
        }
        for (int b = 0; b < NB; ++b) {
            store16(c0 + 16 * b, acc0[b]);
            store16(c1 + 16 * b, acc1[b]);
            store16(c2 + 16 * b, acc2[b]);
            store16(c3 + 16 * b, acc3[b]);
        }
    }
    for (; r < m; ++r) {
        const float* a = A + r * ka;
        float* cr = C + r * N;
        v16f acc[NB];
        for (int b = 0; b < NB; ++b) acc[b] = load16(cr + 16 * b);
        for (int kk = 0; kk < k; ++kk) {
            const float* w = W + std::size_t(kk) * N;
            const v16f bv = splat16(a[kk]);
            for (int b = 0; b < NB; ++b) acc[b] += bv * load16(w + 16 * b);
        }
        for (int b = 0; b < NB; ++b) store16(cr + 16 * b, acc[b]);
    }
}

// Wg (K x N) += A (m x ka, columns koff..)^T * D (m x N): the K x N
// accumulator tile lives in registers across the whole m sweep.
template <int K, int NB>
inline void weight_rows(const float* A, long m, long ka, int koff, const float* D,
                        float* Wg, std::size_t wstride) {
    constexpr int N = 8 * NB;
    v8f acc[K][NB];
    for (int kk = 0; kk < K; ++kk)
        for (int b = 0; b < NB; ++b) acc[kk][b] = v8f{};
    for (long r = 0; r < m; ++r) {
        const float* a = A + r * ka + koff;
        const float* d = D + r * N;
        v8f dv[NB];
        for (int b = 0; b < NB; ++b) dv[b] = load8(d + 8 * b);
        for (int kk = 0; kk < K; ++kk) {
            const v8f bv = splat8(a[kk]);
            for (int b = 0; b < NB; ++b) acc[kk][b] += bv * dv[b];
        }
    }
    for (int kk = 0; kk < K; ++kk) {
        float* wg = Wg + std::size_t(kk) * wstride;
        for (int b = 0; b < NB; ++b) store8(wg + 8 * b, load8(wg + 8 * b) + acc[kk][b]);
    }
}

// As above with 64-byte vectors, N = 16 * NB.
template <int K, int NB>
inline void weight_rows_w(const float* A, long m, long ka, int koff, const float* D,
                          float* Wg, std::size_t wstride) {
    constexpr int N = 16 * NB;
    v16f acc[K][NB];
    for (int kk = 0; kk < K; ++kk)
        for (int b = 0; b < NB; ++b) acc[kk][b] = v16f{};
    for (long r = 0; r < m; ++r) {
        const float* a = A + r * ka + koff;
        const float* d = D + r * N;
        v16f dv[NB];
        for (int b = 0; b < NB; ++b) dv[b] = load16(d + 16 * b);
        for (int kk = 0; kk < K; ++kk) {
            const v16f bv = splat16(a[kk]);
            for (int b = 0; b < NB; ++b) acc[kk][b] += bv * dv[b];
        }
    }
    for (int kk = 0; kk < K; ++kk) {
        float* wg = Wg + std::size_t(kk) * wstride;
        for (int b = 0; b < NB; ++b) store16(wg + 16 * b, load16(wg + 16 * b) + acc[kk][b]);
    }
}

// Runtime-k dispatch over fixed K-blocks sized to keep the accumulator tile
// within the register file.
template <int NB>
inline void weight_acc(const float* A, long m, int k, long ka, const float* D,
                       float* Wg, std::size_t wstride) {
    constexpr int KB = NB <= 2 ? 8 : 4;
    int koff = 0;
    for (; koff + KB <= k; koff += KB)
        weight_rows<KB, NB>(A, m, ka, koff, D, Wg + std::size_t(koff) * wstride, wstride);
    for (; koff + 2 <= k; koff += 2)
        weight_rows<2, NB>(A, m, ka, koff, D, Wg + std::size_t(koff) * wstride, wstride);
    if (koff < k)
        weight_rows<1, NB>(A, m, ka, koff, D, Wg + std::size_t(koff) * wstride, wstride);
}

template <int NB>
inline void weight_acc_w(const float* A, long m, int k, long ka, const float* D,
                         float* Wg, std::size_t wstride) {
    constexpr int KB = NB == 1 ? 8 : 4;
    int koff = 0;
    for (; koff + KB <= k; koff += KB)
        weight_rows_w<KB, NB>(A, m, ka, koff, D, Wg + std::size_t(koff) * wstride, wstride);
    for (; koff + 2 <= k; koff += 2)
        weight_rows_w<2, NB>(A, m, ka, koff, D, Wg + std::size_t(koff) * wstride, wstride);
    if (koff < k)
        weight_rows_w<1, NB>(A, m, ka, koff, D, Wg + std::size_t(koff) * wstride, wstride);
}

inline void acc(const float* A, long m, int k, long ka, const float* W, float* C, int n) {
    switch (n) {
        case 8: acc_rows_n8(A, m, k, ka, W, C); break;
        case 16: acc_rows_w<1>(A, m, k, ka, W, C); break;
        case 24: acc_rows<3>(A, m, k, ka, W, C); break;
        case 32: acc_rows_w<2>(A, m, k, ka, W, C); break;
        default: break;
    }
}

// Whole 3x3 convolution in one sweep: for each output pixel the nine shifted
// input pixels sit at constant float offsets delta[o], so all 9*k rank-1
// updates accumulate in registers and C is touched once. Init=true starts
// from zero (replacing a separate clear pass), otherwise C accumulates.
template <int NB, bool Init>
inline void conv_fused8(const float* A, long m, int k, const long* delta,
                        const float* W, std::size_t wostride, float* C) {
    constexpr int N = 8 * NB;
    long r = 0;
    for (; r + 4 <= m; r += 4) {
        const float* a0 = A + r * k;
        const float* a1 = a0 + k;
        const float* a2 = a1 + k;
        const float* a3 = a2 + k;
        float* c0 = C + r * N;
        float* c1 = c0 + N;
        float* c2 = c1 + N;
        float* c3 = c2 + N;
        v8f acc0[NB], acc1[NB], acc2[NB], acc3[NB];
        for (int b = 0; b < NB; ++b) {
            acc0[b] = Init ? v8f{} : load8(c0 + 8 * b);
            acc1[b] = Init ? v8f{} : load8(c1 + 8 * b);
            acc2[b] = Init ? v8f{} : load8(c2 + 8 * b);
            acc3[b] = Init ? v8f{} : load8(c3 + 8 * b);
        }
        for (int o = 0; o < 9; ++o) {
            const float* p0 = a0 + delta[o];
            const float* p1 = a1 + delta[o];
            const float* p2 = a2 + delta[o];
            const float* p3 = a3 + delta[o];
            const float* w = W + o * wostride;
            for (int kk = 0; kk < k; ++kk, w += N) {
                const v8f b0 = splat8(p0[kk]);
                const v8f b1 = splat8(p1[kk]);
                const v8f b2 = splat8(p2[kk]);
                const v8f b3 = splat8(p3[kk]);
                for (int b = 0; b < NB; ++b) {
                    const v8f wv = load8(w + 8 * b);
                    acc0[b] += b0 * wv;
                    acc1[b] += b1 * wv;
                    acc2[b] += b2 * wv;
                    acc3[b] += b3 * wv;
                }
            }
        }
        for (int b = 0; b < NB; ++b) {
            store8(c0 + 8 * b, acc0[b]);
            store8(c1 + 8 * b, acc1[b]);
            store8(c2 + 8 * b, acc2[b]);
            store8(c3 + 8 * b, acc3[b]);
        }
    }
    for (; r < m; ++r) {
        const float* a = A + r * k;
        float* cr = C + r * N;
        v8f acc[NB];
        for (int b = 0; b < NB; ++b) acc[b] = Init ? v8f{} : load8(cr + 8 * b);
        for (int o = 0; o < 9; ++o) {
            const float* p = a + delta[o];
            const float* w = W + o * wostride;
            for (int kk = 0; kk < k; ++kk, w += N) {
                const v8f bv = splat8(p[kk]);
                for (int b = 0; b < NB; ++b) acc[b] += bv * load8(w + 8 * b);
            }
        }
        for (int b = 0; b < NB; ++b) store8(cr + 8 * b, acc[b]);
    }
}

template <int NB, bool Init>
inline void conv_fused16(const float* A, long m, int k, const long* delta,
                         const float* W, std::size_t wostride, float* C) {
    constexpr int N = 16 * NB;
    long r = 0;
    for (; r + 4 <= m; r += 4) {
        const float* a0 = A + r * k;
        const float* a1 = a0 + k;
        const float* a2 = a1 + k;
        const float* a3 = a2 + k;
        float* c0 = C + r * N;
        float* c1 = c0 + N;
        float* c2 = c1 + N;
        float* c3 = c2 + N;
        v16f acc0[NB], acc1[NB], acc2[NB], acc3[NB];
        for (int b = 0; b < NB; ++b) {
            acc0[b] = Init ? v16f{} : load16(c0 + 16 * b);
            acc1[b] = Init ? v16f{} : load16(c1 + 16 * b);
            acc2[b] = Init ? v16f{} : load16(c2 + 16 * b);
            acc3[b] = Init ? v16f{} : load16(c3 + 16 * b);
        }
        for (int o = 0; o < 9; ++o) {
            const float* p0 = a0 + delta[o];
            const float* p1 = a1 + delta[o];
            const float* p2 = a2 + delta[o];
            const float* p3 = a3 + delta[o];
            const float* w = W + o * wostride;
            for (int kk = 0; kk < k; ++kk, w += N) {
                const v16f b0 = splat16(p0[kk]);
                const v16f b1 = splat16(p1[kk]);
                const v16f b2 = splat16(p2[kk]);
                const v16f b3 = splat16(p3[kk]);
                for (int b = 0; b < NB; ++b) {
                    const v16f wv = load16(w + 16 * b);
                    acc0[b] += b0 * wv;
                    acc1[b] += b1 * wv;
                    acc2[b] += b2 * wv;
                    acc3[b] += b3 * wv;
                }
            }
        }
        for (int b = 0; b < NB; ++b) {
            store16(c0 + 16 * b, acc0[b]);
            store16(c1 + 16 * b, acc1[b]);
            store16(c2 + 16 * b, acc2[b]);
            store16(c3 + 16 * b, acc3[b]);
        }
    }
    for (; r < m; ++r) {
        const float* a = A + r * k;
        float* cr = C + r * N;
        v16f acc[NB];
        for (int b = 0; b < NB; ++b) acc[b] = Init ? v16f{} : load16(cr + 16 * b);
        for (int o = 0; o < 9; ++o) {
            const float* p = a + delta[o];
            const float* w = W + o * wostride;
            for (int kk = 0; kk < k; ++kk, w += N) {
                const v16f bv = splat16(p[kk]);
                for (int b = 0; b < NB; ++b) acc[b] += bv * load16(w + 16 * b);
            }
        }
        for (int b = 0; b < NB; ++b) store16(cr + 16 * b, acc[b]);
    }
}

inline void conv_fused(const float* A, long m, int k, const long* delta, const float* W,
                       std::size_t wostride, float* C, int n, bool init) {
    switch (n) {
        case 8:
            init ? conv_fused8<1, true>(A, m, k, delta, W, wostride, C)
                 : conv_fused8<1, false>(A, m, k, delta, W, wostride, C);
            break;
        case 16:
            init ? conv_fused16<1, true>(A, m, k, delta, W, wostride, C)
                 : conv_fused16<1, false>(A, m, k, delta, W, wostride, C);
            break;
        case 24:
            init ? conv_fused8<3, true>(A, m, k, delta, W, wostride, C)
                 : conv_fused8<3, false>(A, m, k, delta, W, wostride, C);
            break;
        case 32:
            init ? conv_fused16<2, true>(A, m, k, delta, W, wostride, C)
                 : conv_fused16<2, false>(A, m, k, delta, W, wostride, C);
            break;
        default: break;
    }
}

inline void weight(const float* A, long m, int k, long ka, const float* D, float* Wg,
                   std::size_t wstride, int n) {
    switch (n) {
        case 8: weight_acc<1>(A, m, k, ka, D, Wg, wstride); break;
        case 16: weight_acc_w<1>(A, m, k, ka, D, Wg, wstride); break;
        case 24: weight_acc<3>(A, m, k, ka, D, Wg, wstride); break;
        case 32: weight_acc_w<2>(A, m, k, ka, D, Wg, wstride); break;
        default: break;
    }
}

#else  // scalar fallback

inline void acc(const float* A, long m, int k, long ka, const float* W, float* C, int n) {
    for (long r = 0; r < m; ++r) {
        const float* a = A + r * ka;
        float* cr = C + r * n;
        for (int kk = 0; kk < k; ++kk) {
            const float b = a[kk];
            const float* w = W + std::size_t(kk) * n;
            for (int j = 0; j < n; ++j) cr[j] += b * w[j];
        }
    }
}

inline void weight(const float* A, long m, int k, long ka, const float* D, float* Wg,
                   std::size_t wstride, int n) {
    for (long r = 0; r < m; ++r) {
        const float* a = A + r * ka;
        const float* d = D + r * n;
        for (int kk = 0; kk < k; ++kk) {
            const float b = a[kk];
            float* wg = Wg + std::size_t(kk) * wstride;
            for (int j = 0; j < n; ++j) wg[j] += b * d[j];
        }
    }
}

#endif

}  // namespace ctseg::nn::smallgemm
