// Network-level checks: configuration arithmetic, parameter accounting,
// forward-pass contracts, end-to-end gradient verification against a
// directional finite difference, and checkpoint round-trips.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <span>
#include <vector>

#include "ctseg/losses.hpp"
#include "ctseg/nn/adam.hpp"
#include "ctseg/nn/checkpoint.hpp"
#include "ctseg/nn/unet.hpp"
#include "support/tempdir.hpp"

using ctseg::nn::FeatureMap;
using ctseg::nn::Param;
using ctseg::nn::UNet;
using ctseg::nn::UNetConfig;
using testsupport::TempDir;

namespace {

FeatureMap random_input(int n, int h, int w, std::mt19937& rng) {
    FeatureMap m;
    m.resize(n, h, w, 1);
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    std::vector<float> v(std::size_t(n) * h * w);
    for (auto& e : v) e = dist(rng);
    for (int i = 0; i < n; ++i) m.pack_channel(i, v.data() + std::size_t(i) * h * w);
    return m;
}

std::vector<float> flat_probs(const FeatureMap& prob) {
    std::vector<float> out(std::size_t(prob.n) * prob.h * prob.w);
    for (int i = 0; i < prob.n; ++i)
        prob.unpack_channel(i, out.data() + std::size_t(i) * prob.h * prob.w);
    return out;
}

}  // namespace

TEST_CASE("network config arithmetic and validation", "[unet]") {
    UNetConfig def;
    REQUIRE(def.widths() == std::vector<int>{24, 48, 96, 192, 384, 768});
    REQUIRE(def.spatial_divisor() == 32);

    UNetConfig tiny;
    tiny.base_width = 1;
    tiny.depth = 2;
    REQUIRE(tiny.widths() == std::vector<int>{1, 2});
    REQUIRE(tiny.spatial_divisor() == 2);

    UNetConfig bad = def;
    bad.base_width = 0;
    REQUIRE_THROWS_AS(bad.validate(), ctseg::ConfigError);
    bad = def;
    bad.depth = 0;
    REQUIRE_THROWS_AS(bad.validate(), ctseg::ConfigError);
    bad = def;
    bad.depth = 11;
    REQUIRE_THROWS_AS(bad.validate(), ctseg::ConfigError);
    bad = def;
    bad.halve_kernel = 2;
    REQUIRE_THROWS_AS(bad.validate(), ctseg::ConfigError);
    REQUIRE_NOTHROW(def.validate());
}

TEST_CASE("parameter count is exact and reproducible", "[unet]") {
    // Closed-form count for the default architecture. Per encoder level:
    // conv1 9*cin*w + 2w (bn) + conv2 9*w*w + 2w; per decoder level: a biased
    // halving conv 9*w[l+1]*w[l]+w[l], then the double conv on 2w channels;
    // head w[0]+1.
    auto expected = [](const UNetConfig& c) {
        const auto w = c.widths();
        std::size_t n = 0;
        for (int l = 0; l < c.depth; ++l) {
            const std::size_t cin = l == 0 ? c.in_channels : w[l - 1];
            n += 9 * cin * w[l] + 9 * std::size_t(w[l]) * w[l] + 4 * w[l];
        }
        for (int l = 0; l < c.depth - 1; ++l) {
            const std::size_t k = c.halve_kernel == 3 ? 9 : 1;
            n += k * std::size_t(w[l + 1]) * w[l] + w[l];
            n += 9 * std::size_t(2 * w[l]) * w[l] + 9 * std::size_t(w[l]) * w[l] +
                 4 * w[l];
        }
        return n + w[0] + 1;
    };

    UNet net;
    net.init(UNetConfig{});
    REQUIRE(net.param_count() == 19460377u);
    REQUIRE(net.param_count() == expected(UNetConfig{}));

    UNet again;
    again.init(UNetConfig{});
    REQUIRE(again.param_count() == net.param_count());

    UNetConfig small;
    small.base_width = 4;
    small.depth = 3;
    for (int hk : {1, 3}) {
        small.halve_kernel = hk;
        UNet s;
        s.init(small);
        REQUIRE(s.param_count() == expected(small));
    }
}

TEST_CASE("initialization is deterministic in the seed", "[unet]") {
    UNetConfig cfg;
    cfg.base_width = 4;
    cfg.depth = 3;
    cfg.init_seed = 123;
    UNet a, b;
    a.init(cfg);
    b.init(cfg);
    auto pa = a.params(), pb = b.params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i].name == pb[i].name);
        REQUIRE(*pa[i].value == *pb[i].value);  // bitwise
    }

    cfg.init_seed = 124;
    UNet c;
    c.init(cfg);
    auto pc = c.params();
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size() && !any_diff; ++i)
        any_diff = *pa[i].value != *pc[i].value;
    REQUIRE(any_diff);
}

TEST_CASE("forward emits probabilities of the input shape", "[unet]") {
    UNetConfig cfg;
    cfg.base_width = 4;
    cfg.depth = 3;
    UNet net;
    net.init(cfg);
    std::mt19937 rng(8);
    const FeatureMap in = random_input(2, 64, 64, rng);

    const FeatureMap& prob = net.forward(in, false);
    REQUIRE(prob.n == 2);
    REQUIRE(prob.h == 64);
    REQUIRE(prob.w == 64);
    REQUIRE(prob.c == 1);
    for (float p : flat_probs(prob)) {
        REQUIRE(p > 0.0f);
        REQUIRE(p < 1.0f);
    }

    // eval mode is a pure function of the weights: same input, same output
    const std::vector<float> first = flat_probs(prob);
    const FeatureMap& prob2 = net.forward(in, false);
    REQUIRE(flat_probs(prob2) == first);
}

TEST_CASE("forward rejects off-grid inputs", "[unet]") {
    // depth 6 divides by 32: the full-resolution padded slice passes, an
    // arbitrary size does not
    UNetConfig cfg;
    cfg.base_width = 1;
    cfg.depth = 6;
    UNet net;
    net.init(cfg);
    std::mt19937 rng(3);

    const FeatureMap ok = random_input(1, 800, 800, rng);
    REQUIRE_NOTHROW(net.forward(ok, false));

    const FeatureMap bad = random_input(1, 100, 100, rng);
    REQUIRE_THROWS_AS(net.forward(bad, false), ctseg::ShapeMismatchError);

    FeatureMap two_ch;
    two_ch.resize(1, 64, 64, 2);
    REQUIRE_THROWS_AS(net.forward(two_ch, false), ctseg::ShapeMismatchError);
}

TEST_CASE("backpropagated gradients match a directional finite difference",
          "[unet][grad]") {
    // Perturbing all weights along the normalized analytic gradient g/|g|
    // must change the loss at rate |g|. This probes every parameter at once
    // with a strong signal; per-coordinate FD on a float32 network drowns in
    // roundoff for weakly coupled layers.
    for (int hk : {1, 3}) {
        CAPTURE(hk);
        UNetConfig cfg;
        cfg.base_width = 4;
        cfg.depth = 3;
        cfg.halve_kernel = hk;
        cfg.init_seed = 77;
        UNet net;
        net.init(cfg);

        std::mt19937 rng(55);
        const FeatureMap in = random_input(2, 32, 32, rng);
        std::vector<float> target(2 * 32 * 32);
        std::bernoulli_distribution coin(0.4);
        for (auto& t : target) t = coin(rng) ? 1.0f : 0.0f;

        ctseg::LossConfig loss;
        loss.kind = ctseg::LossKind::BceLogJaccard;

        auto loss_of = [&]() {
            const FeatureMap& prob = net.forward(in, true);
            const std::vector<float> p = flat_probs(prob);
            return ctseg::loss_value(loss, std::span<const float>(p),
                                     std::span<const float>(target));
        };

        // analytic gradient
        net.zero_grad();
        const FeatureMap& prob = net.forward(in, true);
        const std::vector<float> p = flat_probs(prob);
        std::vector<float> dp(p.size());
        ctseg::loss_grad(loss, std::span<const float>(p),
                         std::span<const float>(target), dp);
        FeatureMap dprob;
        dprob.resize(2, 32, 32, 1);
        for (int i = 0; i < 2; ++i)
            dprob.pack_channel(i, dp.data() + std::size_t(i) * 32 * 32);
        net.backward(dprob);

        auto params = net.params();
        std::vector<std::vector<float>> grads;
        double norm_sq = 0.0;
        for (const Param& pr : params) {
            grads.push_back(pr.grad ? *pr.grad : std::vector<float>{});
            if (pr.grad)
                for (float g : *pr.grad) norm_sq += double(g) * g;
        }
        const double norm = std::sqrt(norm_sq);
        REQUIRE(norm > 0.0);

        // f(theta + eps*g/|g|) - f(theta - eps*g/|g|) over 2*eps vs |g|
        const double eps = 1e-3;
        std::vector<std::vector<float>> saved;
        for (const Param& pr : params) saved.push_back(*pr.value);
        auto nudge = [&](double scale) {
            for (std::size_t i = 0; i < params.size(); ++i) {
                if (!params[i].grad) continue;
                for (std::size_t k = 0; k < params[i].value->size(); ++k)
                    (*params[i].value)[k] = float(
                        double(saved[i][k]) + scale * double(grads[i][k]) / norm);
            }
        };
        nudge(eps);
        const double fp = loss_of();
        nudge(-eps);
        const double fm = loss_of();
        for (std::size_t i = 0; i < params.size(); ++i) *params[i].value = saved[i];

        const double fd = (fp - fm) / (2.0 * eps);
        const double rel = std::abs(fd - norm) / norm;
        CAPTURE(fd, norm, rel);
        REQUIRE(rel < 1e-2);
    }
}

TEST_CASE("checkpoints round-trip weights bit-exactly", "[unet][checkpoint]") {
    TempDir tmp;
    UNetConfig cfg;
    cfg.base_width = 4;
    cfg.depth = 2;
    cfg.halve_kernel = 1;
    cfg.init_seed = 9;
    UNet net;
    net.init(cfg);

    // push the net off its initial state so the round-trip is non-trivial:
    // one training step also moves BN running statistics
    std::mt19937 rng(4);
    const FeatureMap in = random_input(2, 16, 16, rng);
    std::vector<float> target(2 * 16 * 16, 1.0f);
    ctseg::LossConfig loss;
    net.zero_grad();
    const FeatureMap& prob = net.forward(in, true);
    const std::vector<float> p = flat_probs(prob);
    std::vector<float> dp(p.size());
    ctseg::loss_grad(loss, std::span<const float>(p), std::span<const float>(target),
                     dp);
    FeatureMap dprob;
    dprob.resize(2, 16, 16, 1);
    for (int i = 0; i < 2; ++i)
        dprob.pack_channel(i, dp.data() + std::size_t(i) * 16 * 16);
    net.backward(dprob);
    ctseg::nn::Adam opt(net.params(), ctseg::nn::AdamConfig{});
    opt.step();

    const auto path = tmp / "net.ckpt";
    nlohmann::json meta;
    meta["fold"] = 3;
    meta["val_loss"] = 0.25;
    meta["complete"] = false;
    ctseg::nn::save_checkpoint(path, net, meta);

    UNet loaded;
    const nlohmann::json back = ctseg::nn::load_checkpoint(path, loaded);
    REQUIRE(back.at("fold").get<int>() == 3);
    REQUIRE(back.at("val_loss").get<double>() == 0.25);
    REQUIRE(back.at("complete").get<bool>() == false);
    REQUIRE(back.at("unet").at("base_width").get<int>() == 4);
    REQUIRE(loaded.cfg.depth == 2);
    REQUIRE(loaded.cfg.halve_kernel == 1);

    auto pa = net.params(), pb = loaded.params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i].name == pb[i].name);
        REQUIRE(*pa[i].value == *pb[i].value);  // includes running stats
    }

    // identical eval-mode predictions after reload
    const std::vector<float> a = flat_probs(net.forward(in, false));
    const std::vector<float> b = flat_probs(loaded.forward(in, false));
    REQUIRE(a == b);

    SECTION("a non-checkpoint file is rejected") {
        const auto junk = tmp / "junk.ckpt";
        std::ofstream(junk) << "not a checkpoint\n";
        UNet victim;
        REQUIRE_THROWS_AS(ctseg::nn::load_checkpoint(junk, victim), ctseg::Error);
    }

    SECTION("a truncated payload is rejected") {
        std::ifstream src(path, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(src)),
                                std::istreambuf_iterator<char>());
        const auto cut = tmp / "cut.ckpt";
        std::ofstream dst(cut, std::ios::binary);
        dst.write(bytes.data(), std::streamsize(bytes.size() / 2));
        dst.close();
        UNet victim;
        REQUIRE_THROWS_AS(ctseg::nn::load_checkpoint(cut, victim), ctseg::Error);
    }
}
