#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ctseg/errors.hpp"
#include "ctseg/nn/layers.hpp"
#include "ctseg/nn/tensor.hpp"

namespace ctseg::nn {

struct UNetConfig {
    int base_width = 24;
    int depth = 6;  // resolution levels; depth-1 max-pools
    int in_channels = 1;
    // Kernel of the channel-halving conv applied to upsampled features before
    // the skip concatenation. 3 is the reference; 1 trades a little capacity
    // for speed and is exposed for constrained hardware.
    int halve_kernel = 3;
    std::uint64_t init_seed = 0x5eed;

    std::vector<int> widths() const {
        std::vector<int> w(depth);
        for (int l = 0; l < depth; ++l) w[l] = base_width << l;
        return w;
    }

    int spatial_divisor() const { return 1 << (depth - 1); }

    void validate() const {
        if (base_width < 1) throw ConfigError("unet base_width must be >= 1");
        if (depth < 1) throw ConfigError("unet depth must be >= 1");
        if (depth > 10) throw ConfigError("unet depth is implausibly large");
        if (in_channels < 1) throw ConfigError("unet in_channels must be >= 1");
        if (halve_kernel != 1 && halve_kernel != 3)
            throw ConfigError("unet halve_kernel must be 1 or 3");
    }
};

// Fully convolutional encoder/decoder segmentation network. Each level is a
// double conv(3x3)+BN+ReLU block; downsampling is 2x2 max-pool, upsampling is
// bilinear; upsampled features are channel-halved by a small conv and
// concatenated with the skip connection; a 1x1 sigmoid head emits per-pixel
// foreground probability.
class UNet {
public:
    UNetConfig cfg;

    void init(const UNetConfig& config) {
        config.validate();
        cfg = config;
        const auto w = cfg.widths();
        const int D = cfg.depth;
        std::mt19937 rng(std::uint32_t(cfg.init_seed));

        enc_.assign(D, Block{});
        for (int l = 0; l < D; ++l) {
            const int cin = l == 0 ? cfg.in_channels : w[l - 1];
            enc_[l].conv1.init(cin, w[l], false, rng);
            enc_[l].bn1.init(w[l]);
            enc_[l].conv2.init(w[l], w[l], false, rng);
            enc_[l].bn2.init(w[l]);
        }
        pool_.assign(std::max(D - 1, 0), MaxPool2{});
        pooled_.assign(std::max(D - 1, 0), FeatureMap{});
        gpooled_.assign(std::max(D - 1, 0), FeatureMap{});

        dec_.assign(std::max(D - 1, 0), DecLevel{});
        for (int l = 0; l < D - 1; ++l) {
            DecLevel& d = dec_[l];
            if (cfg.halve_kernel == 3)
                d.halve3.init(w[l + 1], w[l], true, rng);
            else
                d.halve1.init(w[l + 1], w[l], true, rng);
            d.block.conv1.init(2 * w[l], w[l], false, rng);
            d.block.bn1.init(w[l]);
            d.block.conv2.init(w[l], w[l], false, rng);
            d.block.bn2.init(w[l]);
        }
        head_.init(w[0], rng);
    }

    // Forward pass over a batch of slices (input.c must equal in_channels).
    // Returns the probability map; valid until the next forward call.
    const FeatureMap& forward(const FeatureMap& input, bool training) {
        const int D = cfg.depth, div = cfg.spatial_divisor();
        if (input.c != cfg.in_channels)
            throw ShapeMismatchError("unet input has " + std::to_string(input.c) +
                                     " channels, expected " +
                                     std::to_string(cfg.in_channels));
        if (input.h % div || input.w % div)
            throw ShapeMismatchError("unet input " + std::to_string(input.h) + "x" +
                                     std::to_string(input.w) +
                                     " not divisible by " + std::to_string(div));
        input_ = &input;
        for (int l = 0; l < D; ++l) {
            const FeatureMap& in = l == 0 ? input : pooled_[l - 1];
            Block& B = enc_[l];
            B.conv1.forward(in, B.a1);
            B.bn1.forward(B.a1, B.r1, training);
            B.conv2.forward(B.r1, B.a2);
            B.bn2.forward(B.a2, B.r2, training);
            if (l < D - 1) pool_[l].forward(B.r2, pooled_[l]);
        }
        for (int l = D - 2; l >= 0; --l) {
            DecLevel& d = dec_[l];
            const FeatureMap& below = l + 1 == D - 1 ? enc_[D - 1].r2 : dec_[l + 1].block.r2;
            up_.forward(below, d.up_out);
            if (cfg.halve_kernel == 3)
                d.halve3.forward(d.up_out, d.hv);
            else
                d.halve1.forward(d.up_out, d.hv);
            const FeatureMap* ins[2] = {&enc_[l].r2, &d.hv};
            Block& B = d.block;
            B.conv1.forward(std::span<const FeatureMap* const>(ins, 2), B.a1);
            B.bn1.forward(B.a1, B.r1, training);
            B.conv2.forward(B.r1, B.a2);
            B.bn2.forward(B.a2, B.r2, training);
        }
        head_.forward(D == 1 ? enc_[0].r2 : dec_[0].block.r2, prob_);
        return prob_;
    }

    // Accumulates parameter gradients for the last training-mode forward.
    // dprob must match the probability map's shape.
    void backward(const FeatureMap& dprob) {
        const int D = cfg.depth;
        head_.backward(dprob, D == 1 ? enc_[0].gr2 : dec_[0].block.gr2);
        for (int l = 0; l <= D - 2; ++l) {
            DecLevel& d = dec_[l];
            Block& B = d.block;
            backward_block_tail(B);
            const FeatureMap* ins[2] = {&enc_[l].r2, &d.hv};
            FeatureMap* dins[2] = {&enc_[l].gr2, &d.ghv};
            B.conv1.backward(std::span<const FeatureMap* const>(ins, 2), B.ga1,
                             std::span<FeatureMap* const>(dins, 2));
            if (cfg.halve_kernel == 3) {
                const FeatureMap* hins[1] = {&d.up_out};
                FeatureMap* hdins[1] = {&d.gup};
                d.halve3.backward(std::span<const FeatureMap* const>(hins, 1), d.ghv,
                                  std::span<FeatureMap* const>(hdins, 1));
            } else {
                d.halve1.backward(d.up_out, d.ghv, &d.gup);
            }
            const FeatureMap& below = l + 1 == D - 1 ? enc_[D - 1].r2 : dec_[l + 1].block.r2;
            FeatureMap& below_g = l + 1 == D - 1 ? enc_[D - 1].gr2 : dec_[l + 1].block.gr2;
            up_.backward(d.gup, below_g, below.h, below.w);
        }
        for (int l = D - 1; l >= 0; --l) {
            Block& B = enc_[l];
            backward_block_tail(B);
            if (l == 0) {
                const FeatureMap* ins[1] = {input_};
                FeatureMap* dins[1] = {nullptr};
                B.conv1.backward(std::span<const FeatureMap* const>(ins, 1), B.ga1,
                                 std::span<FeatureMap* const>(dins, 1));
            } else {
                const FeatureMap* ins[1] = {&pooled_[l - 1]};
                FeatureMap* dins[1] = {&gpooled_[l - 1]};
                B.conv1.backward(std::span<const FeatureMap* const>(ins, 1), B.ga1,
                                 std::span<FeatureMap* const>(dins, 1));
                // skip gradient is already in gr2; add the pooled path
                pool_[l - 1].backward(gpooled_[l - 1], enc_[l - 1].gr2,
                                      enc_[l - 1].r2.h, enc_[l - 1].r2.w,
                                      /*accumulate=*/true);
            }
        }
    }

    void zero_grad() {
        for (auto& b : enc_) zero_block(b);
        for (auto& d : dec_) {
            d.halve3.zero_grad();
            d.halve1.zero_grad();
            zero_block(d.block);
        }
        head_.zero_grad();
    }

    std::vector<Param> params() {
        std::vector<Param> out;
        for (int l = 0; l < cfg.depth; ++l)
            collect_block("encoder." + std::to_string(l), enc_[l], out);
        for (int l = 0; l < cfg.depth - 1; ++l) {
            const std::string p = "decoder." + std::to_string(l);
            if (cfg.halve_kernel == 3)
                dec_[l].halve3.collect_params(p + ".halve", out);
            else
                dec_[l].halve1.collect_params(p + ".halve", out);
            collect_block(p, dec_[l].block, out);
        }
        head_.collect_params("head", out);
        return out;
    }

    // Trainable parameter count (excludes running statistics).
    std::size_t param_count() {
        std::size_t n = 0;
        for (const Param& p : params())
            if (p.grad) n += p.value->size();
        return n;
    }

    const FeatureMap& probabilities() const { return prob_; }

private:
    struct Block {
        Conv3x3 conv1, conv2;
        BatchNormRelu bn1, bn2;
        FeatureMap a1, r1, a2, r2;
        FeatureMap ga1, gr1, ga2, gr2;
    };
    struct DecLevel {
        Conv3x3 halve3;
        Conv1x1 halve1;
        Block block;
        FeatureMap up_out, hv, gup, ghv;
    };

    // shared tail of block backward: bn2 -> conv2 -> bn1 (leaves ga1 ready)
    static void backward_block_tail(Block& B) {
        B.bn2.backward(B.gr2, B.ga2);
        const FeatureMap* ins[1] = {&B.r1};
        FeatureMap* dins[1] = {&B.gr1};
        B.conv2.backward(std::span<const FeatureMap* const>(ins, 1), B.ga2,
                         std::span<FeatureMap* const>(dins, 1));
        B.bn1.backward(B.gr1, B.ga1);
    }

    static void zero_block(Block& b) {
        b.conv1.zero_grad();
        b.bn1.zero_grad();
        b.conv2.zero_grad();
        b.bn2.zero_grad();
    }

    static void collect_block(const std::string& prefix, Block& b,
                              std::vector<Param>& out) {
        b.conv1.collect_params(prefix + ".conv1", out);
        b.bn1.collect_params(prefix + ".bn1", out);
        b.conv2.collect_params(prefix + ".conv2", out);
        b.bn2.collect_params(prefix + ".bn2", out);
    }

    std::vector<Block> enc_;
    std::vector<MaxPool2> pool_;
    std::vector<FeatureMap> pooled_, gpooled_;
    std::vector<DecLevel> dec_;
    UpsampleBilinear2x up_;
    SigmoidHead head_;
    FeatureMap prob_;
    const FeatureMap* input_ = nullptr;
};

}  // namespace ctseg::nn
