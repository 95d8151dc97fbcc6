// Inference: per-plane sliding prediction, dual-plane ensembling with the
// loss-dependent operating point, and the out-of-fold prediction driver with
// its leakage guards.

#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <random>
#include <set>
#include <vector>

#include "ctseg/inference.hpp"
#include "ctseg/nn/checkpoint.hpp"
#include "support/tempdir.hpp"

using ctseg::DtypeClass;
using ctseg::FoldAssignment;
using ctseg::MaskVolume;
using ctseg::PlaneTag;
using ctseg::ProbabilityVolume;
using ctseg::Provenance;
using ctseg::SampleRecord;
using ctseg::Shape3;
using ctseg::VolumeStack;
using testsupport::TempDir;

namespace {

VolumeStack random_volume(Shape3 s, std::uint32_t seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    std::vector<float> v(s.voxels());
    for (auto& e : v) e = u(rng);
    return VolumeStack::normalized(s, std::move(v));
}

ctseg::nn::UNet small_net(std::uint64_t seed) {
    ctseg::nn::UNetConfig cfg;
    cfg.base_width = 2;
    cfg.depth = 2;
    cfg.init_seed = seed;
    ctseg::nn::UNet net;
    net.init(cfg);
    return net;
}

// All-zero weights collapse every activation, so the sigmoid head sees a zero
// logit everywhere and emits exactly one half.
ctseg::nn::UNet zero_net() {
    ctseg::nn::UNet net = small_net(1);
    for (auto& p : net.params())
        std::fill(p.value->begin(), p.value->end(), 0.0f);
    return net;
}

}  // namespace

TEST_CASE("a zero network predicts probability one half everywhere",
          "[inference]") {
    ctseg::nn::UNet net = zero_net();
    const VolumeStack vol = random_volume({8, 6, 4}, 31);

    const ProbabilityVolume zx = ctseg::predict_plane(net, vol, PlaneTag::ZX);
    const ProbabilityVolume zy = ctseg::predict_plane(net, vol, PlaneTag::ZY);
    REQUIRE(zx.prov == Provenance::ZX);
    REQUIRE(zy.prov == Provenance::ZY);
    REQUIRE(zx.shape == vol.shape());
    REQUIRE(zx.p.size() == vol.shape().voxels());
    for (float p : zx.p) REQUIRE(p == 0.5f);
    for (float p : zy.p) REQUIRE(p == 0.5f);

    SECTION("thresholding lands on the right side of one half") {
        const MaskVolume hi = ctseg::predict_sample(net, vol, 0.3);
        REQUIRE(hi.foreground_count() == vol.shape().voxels());
        const MaskVolume lo = ctseg::predict_sample(net, vol, 0.6);
        REQUIRE(lo.foreground_count() == 0);
    }
}

TEST_CASE("batch size does not change plane predictions", "[inference]") {
    ctseg::nn::UNet net = small_net(88);
    const VolumeStack vol = random_volume({8, 6, 4}, 17);

    const ProbabilityVolume one = ctseg::predict_plane(net, vol, PlaneTag::ZX, 1);
    const ProbabilityVolume three = ctseg::predict_plane(net, vol, PlaneTag::ZX, 3);
    const ProbabilityVolume big = ctseg::predict_plane(net, vol, PlaneTag::ZX, 64);
    REQUIRE(one.p.size() == three.p.size());
    for (std::size_t i = 0; i < one.p.size(); ++i) {
        REQUIRE(three.p[i] == Catch::Approx(one.p[i]).margin(1e-6));
        REQUIRE(big.p[i] == Catch::Approx(one.p[i]).margin(1e-6));
    }
}

TEST_CASE("a transpose-invariant volume yields transposed plane predictions",
          "[inference]") {
    // v(z,y,x) == v(z,x,y) makes the i-th ZX slice identical to the i-th ZY
    // slice, so the two probability volumes are (y,x) transposes of each other
    const Shape3 s{8, 6, 6};
    std::mt19937 rng(5);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    std::vector<float> v(s.voxels());
    for (int z = 0; z < s.z; ++z)
        for (int y = 0; y < s.y; ++y)
            for (int x = y; x < s.x; ++x) {
                const float val = u(rng);
                v[(std::size_t(z) * s.y + y) * s.x + x] = val;
                v[(std::size_t(z) * s.y + x) * s.x + y] = val;
            }
    const VolumeStack vol = VolumeStack::normalized(s, std::move(v));

    ctseg::nn::UNet net = small_net(4);
    const ProbabilityVolume zx = ctseg::predict_plane(net, vol, PlaneTag::ZX, 6);
    const ProbabilityVolume zy = ctseg::predict_plane(net, vol, PlaneTag::ZY, 6);
    for (int z = 0; z < s.z; ++z)
        for (int y = 0; y < s.y; ++y)
            for (int x = 0; x < s.x; ++x)
                REQUIRE(zy.p[(std::size_t(z) * s.y + y) * s.x + x] ==
                        zx.p[(std::size_t(z) * s.y + x) * s.x + y]);
}

TEST_CASE("ensembling averages the planes and applies the threshold",
          "[inference]") {
    const Shape3 s{1, 1, 3};
    ProbabilityVolume zx{s, Provenance::ZX, {0.4f, 0.6f, 0.1f}};
    ProbabilityVolume zy{s, Provenance::ZY, {0.4f, 0.2f, 0.1f}};

    // means are 0.4, 0.4, 0.1
    const MaskVolume at03 = ctseg::ensemble_and_threshold(zx, zy, 0.3);
    REQUIRE(at03.at(0, 0, 0) == 1);
    REQUIRE(at03.at(0, 0, 1) == 1);
    REQUIRE(at03.at(0, 0, 2) == 0);

    const MaskVolume at05 = ctseg::ensemble_and_threshold(zx, zy, 0.5);
    REQUIRE(at05.foreground_count() == 0);

    // the threshold itself is included (mean 0.4 >= 0.4)
    const MaskVolume at04 = ctseg::ensemble_and_threshold(zx, zy, 0.4);
    REQUIRE(at04.at(0, 0, 0) == 1);
    REQUIRE(at04.at(0, 0, 2) == 0);

    const ProbabilityVolume avg = ctseg::average_planes(zx, zy);
    REQUIRE(avg.prov == Provenance::Averaged);
    REQUIRE(avg.p == std::vector<float>{0.4f, 0.4f, 0.1f});
}

TEST_CASE("ensemble agrees with a brute-force voxel sweep", "[inference]") {
    const Shape3 s{5, 4, 3};
    std::mt19937 rng(12);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    ProbabilityVolume zx{s, Provenance::ZX, {}};
    ProbabilityVolume zy{s, Provenance::ZY, {}};
    zx.p.resize(s.voxels());
    zy.p.resize(s.voxels());
    for (auto& p : zx.p) p = u(rng);
    for (auto& p : zy.p) p = u(rng);

    const double t = 0.45;
    const MaskVolume m = ctseg::ensemble_and_threshold(zx, zy, t);
    for (std::size_t i = 0; i < zx.p.size(); ++i) {
        const int want = 0.5f * (zx.p[i] + zy.p[i]) >= float(t) ? 1 : 0;
        REQUIRE(int(m.voxels()[i]) == want);
    }
}

TEST_CASE("loss kinds pick their operating threshold", "[inference]") {
    REQUIRE(ctseg::threshold_for_loss(ctseg::LossKind::BceLogJaccard) == 0.3);
    REQUIRE(ctseg::threshold_for_loss(ctseg::LossKind::Bce) == 0.5);
    REQUIRE(ctseg::threshold_for_loss(ctseg::LossKind::Focal) == 0.5);
    REQUIRE(ctseg::threshold_for_loss(ctseg::LossKind::Jaccard) == 0.5);
}

TEST_CASE("ensemble input validation", "[inference]") {
    const Shape3 s{2, 2, 2};
    ProbabilityVolume zx{s, Provenance::ZX, std::vector<float>(8, 0.5f)};
    ProbabilityVolume zy{s, Provenance::ZY, std::vector<float>(8, 0.5f)};

    ProbabilityVolume other{Shape3{2, 2, 3}, Provenance::ZY,
                            std::vector<float>(12, 0.5f)};
    REQUIRE_THROWS_AS(ctseg::ensemble_and_threshold(zx, other, 0.5),
                      ctseg::ShapeMismatchError);
    // planes must arrive in ZX, ZY order
    REQUIRE_THROWS_AS(ctseg::ensemble_and_threshold(zy, zx, 0.5), ctseg::Error);
    REQUIRE_THROWS_AS(ctseg::ensemble_and_threshold(zx, zx, 0.5), ctseg::Error);
    REQUIRE_THROWS_AS(ctseg::ensemble_and_threshold(zx, zy, 0.0), ctseg::Error);
    REQUIRE_THROWS_AS(ctseg::ensemble_and_threshold(zx, zy, 1.0), ctseg::Error);
}

TEST_CASE("prediction rejects incompatible volumes", "[inference]") {
    ctseg::nn::UNet net = small_net(3);
    // depth-2 network needs slices divisible by 2; 7 columns are not
    const VolumeStack bad = random_volume({8, 6, 7}, 3);
    REQUIRE_THROWS_AS(ctseg::predict_plane(net, bad, PlaneTag::ZX),
                      ctseg::ShapeMismatchError);

    // a raw (un-normalized) volume is refused outright
    const VolumeStack raw = VolumeStack::raw(
        {4, 4, 4}, std::vector<std::uint16_t>(64, 100), 16);
    REQUIRE_THROWS_AS(ctseg::predict_plane(net, raw, PlaneTag::ZX), ctseg::Error);
}

TEST_CASE("out-of-fold prediction covers every sample exactly once",
          "[inference][oof]") {
    TempDir tmp;
    const Shape3 s{8, 6, 4};

    std::vector<SampleRecord> records;
    for (const auto& [sid, subj] : std::vector<std::pair<std::string, std::string>>{
             {"a1", "S0"}, {"a2", "S0"}, {"b1", "S1"}, {"b2", "S1"}}) {
        SampleRecord r;
        r.sample_id = sid;
        r.subject_id = subj;
        records.push_back(r);
    }
    FoldAssignment fa;
    fa.k = 2;
    fa.subject_fold = {{"S0", 0}, {"S1", 1}};

    // fold f's model legitimately trained on the other subject only
    std::map<int, std::filesystem::path> ckpts;
    for (int f = 0; f < 2; ++f) {
        ctseg::nn::UNet net = small_net(10 + f);
        nlohmann::json meta;
        meta["fold"] = f;
        meta["train_subjects"] = std::vector<std::string>{f == 0 ? "S1" : "S0"};
        const auto path = tmp / ("fold_" + std::to_string(f) + ".ckpt");
        ctseg::nn::save_checkpoint(path, net, meta);
        ckpts[f] = path;
    }

    auto load = [&](const SampleRecord& r) {
        return random_volume(s, std::uint32_t(std::hash<std::string>{}(r.sample_id)));
    };

    std::map<std::string, int> seen_fold;
    int calls = 0;
    ctseg::out_of_fold_predict(records, fa, ckpts, 0.5, load,
                               [&](const SampleRecord& r, int fold, MaskVolume m) {
                                   ++calls;
                                   seen_fold[r.sample_id] = fold;
                                   REQUIRE(m.shape() == s);
                               });
    REQUIRE(calls == 4);
    REQUIRE(seen_fold.size() == 4);
    REQUIRE(seen_fold.at("a1") == 0);
    REQUIRE(seen_fold.at("a2") == 0);
    REQUIRE(seen_fold.at("b1") == 1);
    REQUIRE(seen_fold.at("b2") == 1);

    SECTION("a model trained on the sample's subject is refused") {
        ctseg::nn::UNet net = small_net(99);
        nlohmann::json meta;
        meta["fold"] = 0;
        meta["train_subjects"] = std::vector<std::string>{"S0", "S1"};
        const auto leaky = tmp / "leaky.ckpt";
        ctseg::nn::save_checkpoint(leaky, net, meta);
        auto bad = ckpts;
        bad[0] = leaky;
        REQUIRE_THROWS_WITH(
            ctseg::out_of_fold_predict(records, fa, bad, 0.5, load,
                                       [](const SampleRecord&, int, MaskVolume) {}),
            Catch::Matchers::ContainsSubstring("out-of-fold violation"));
    }

    SECTION("a checkpoint stored under the wrong fold is refused") {
        auto swapped = ckpts;
        swapped[0] = ckpts.at(1);  // fold-1 checkpoint offered for fold 0
        REQUIRE_THROWS_WITH(
            ctseg::out_of_fold_predict(records, fa, swapped, 0.5, load,
                                       [](const SampleRecord&, int, MaskVolume) {}),
            Catch::Matchers::ContainsSubstring("belongs to fold"));
    }

    SECTION("a missing fold checkpoint is reported") {
        std::map<int, std::filesystem::path> partial{{0, ckpts.at(0)}};
        REQUIRE_THROWS_WITH(
            ctseg::out_of_fold_predict(records, fa, partial, 0.5, load,
                                       [](const SampleRecord&, int, MaskVolume) {}),
            Catch::Matchers::ContainsSubstring("missing checkpoint"));
    }

    SECTION("threshold bounds are enforced") {
        REQUIRE_THROWS_AS(
            ctseg::out_of_fold_predict(records, fa, ckpts, 1.5, load,
                                       [](const SampleRecord&, int, MaskVolume) {}),
            ctseg::Error);
    }
}
