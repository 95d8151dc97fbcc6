#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctseg/augment.hpp"
#include "ctseg/cvsplit.hpp"
#include "ctseg/errors.hpp"
#include "ctseg/losses.hpp"
#include "ctseg/manifest.hpp"
#include "ctseg/nn/adam.hpp"
#include "ctseg/nn/checkpoint.hpp"
#include "ctseg/nn/unet.hpp"
#include "ctseg/preprocess.hpp"
#include "ctseg/stack_io.hpp"
#include "ctseg/volume.hpp"

namespace ctseg {

// Everything a training run needs besides the data. Defaults are the
// reference recipe: Adam 1e-4 with weight decay 1e-4, batches of 32 slices,
// pad to 800x800 then random-crop 768x448, horizontal flip at 1/2, gamma in
// [0.5, 2]. crop_to must divide by the network's spatial reduction.
struct TrainConfig {
    nn::AdamConfig optimizer;            // lr 1e-4, weight_decay 1e-4
    int batch_size = 32;
    int epochs = 30;
    std::uint64_t seed = 0;
    std::array<int, 2> pad_to{800, 800};   // (rows, cols) canvas
    std::array<int, 2> crop_to{768, 448};  // (rows, cols) training window
    double hflip_prob = 0.5;
    std::array<float, 2> gamma_range{0.5f, 2.0f};
    // Validation loss may be computed on every k-th slice on machines where a
    // full per-epoch sweep is prohibitive. 1 (every slice) is the reference.
    int val_slice_stride = 1;
    LossConfig loss;
    nn::UNetConfig unet;

    AugmentConfig augment_config() const {
        AugmentConfig a;
        a.pad_h = pad_to[0];
        a.pad_w = pad_to[1];
        a.crop_h = crop_to[0];
        a.crop_w = crop_to[1];
        a.hflip_prob = hflip_prob;
        a.gamma_lo = gamma_range[0];
        a.gamma_hi = gamma_range[1];
        return a;
    }

    void validate() const {
        optimizer.validate();
        loss.validate();
        unet.validate();
        augment_config().validate();
        if (batch_size < 1) throw ConfigError("train batch_size must be >= 1");
        if (epochs < 1) throw ConfigError("train epochs must be >= 1");
        if (val_slice_stride < 1) throw ConfigError("val_slice_stride must be >= 1");
        const int div = unet.spatial_divisor();
        if (crop_to[0] % div || crop_to[1] % div)
            throw ConfigError("crop_to " + std::to_string(crop_to[0]) + "x" +
                              std::to_string(crop_to[1]) + " not divisible by " +
                              std::to_string(div));
    }
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {{"lr", c.optimizer.lr},
            {"weight_decay", c.optimizer.weight_decay},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"seed", c.seed},
            {"pad_to", c.pad_to},
            {"crop_to", c.crop_to},
            {"hflip_prob", c.hflip_prob},
            {"gamma_range", c.gamma_range},
            {"val_slice_stride", c.val_slice_stride},
            {"loss", std::string(loss_name(c.loss.kind))}};
}

// One sample resident in memory: the canonical normalized volume plus mask.
struct TrainSample {
    SampleRecord rec;
    VolumeStack vol;
    MaskVolume mask;
};

// Default loader: record paths point at preprocessed canonical stacks.
inline TrainSample load_canonical_sample(const SampleRecord& r, double voxel_um = 3.2) {
    TrainSample s{r, load_normalized_stack(r.volume_path, voxel_um),
                  load_mask_stack(r.mask_path)};
    require_same_shape(s.vol.shape(), s.mask.shape(), "canonical volume/mask");
    return s;
}

// Identity of one training slice. id is its position in the canonical
// enumeration (sample-major, ZX before ZY, ascending plane index); the
// augmentation stream is keyed to (seed, epoch, id), so batches are
// reproducible no matter how the work is scheduled.
struct SliceRef {
    int sample = 0;
    PlaneTag plane = PlaneTag::ZX;
    int index = 0;
    int id = 0;
};

inline std::vector<SliceRef> enumerate_slices(const std::vector<TrainSample>& samples) {
    std::vector<SliceRef> out;
    int id = 0;
    for (int si = 0; si < int(samples.size()); ++si) {
        const Shape3 s = samples[si].vol.shape();
        for (int y = 0; y < s.y; ++y) out.push_back({si, PlaneTag::ZX, y, id++});
        for (int x = 0; x < s.x; ++x) out.push_back({si, PlaneTag::ZY, x, id++});
    }
    return out;
}

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double seconds = 0.0;
};

struct FoldResult {
    int fold = 0;
    int best_epoch = -1;
    double best_val_loss = std::numeric_limits<double>::infinity();
    std::vector<EpochStats> history;
};

namespace detail {

inline void extract_ref(const TrainSample& s, const SliceRef& r,
                        std::vector<float>& img, std::vector<std::uint8_t>& msk) {
    extract_slice(s.vol.values(), s.vol.shape(), r.plane, r.index, img);
    extract_slice_t(s.mask.voxels(), s.mask.shape(), r.plane, r.index, msk);
}

inline void check_finite(double loss, int fold, int epoch, const char* where) {
    if (!std::isfinite(loss))
        throw NonFiniteLossError("fold " + std::to_string(fold) + " epoch " +
                                 std::to_string(epoch) + " " + where + ": loss = " +
                                 std::to_string(loss));
}

}  // namespace detail

// Mean loss over the validation slices, computed in eval mode without any
// augmentation on the native slice geometry. Deterministic given the weights.
inline double validation_loss(nn::UNet& net, const std::vector<TrainSample>& val,
                              const TrainConfig& cfg) {
    const auto slices = enumerate_slices(val);
    nn::FeatureMap batch;
    std::vector<float> img, probs, targets;
    std::vector<std::uint8_t> msk;
    double acc = 0.0;
    long count = 0;

    std::size_t i = 0;
    std::vector<SliceRef> picked;
    for (const SliceRef& r : slices)
        if (r.id % cfg.val_slice_stride == 0) picked.push_back(r);
    while (i < picked.size()) {
        const TrainSample& s0 = val[picked[i].sample];
        const int rows = s0.vol.shape().z;
        const int cols = picked[i].plane == PlaneTag::ZX ? s0.vol.shape().x
                                                         : s0.vol.shape().y;
        // batch as many same-shaped consecutive slices as allowed
        std::size_t j = i;
        while (j < picked.size() && int(j - i) < cfg.batch_size) {
            const TrainSample& s = val[picked[j].sample];
            const int rj = s.vol.shape().z;
            const int cj = picked[j].plane == PlaneTag::ZX ? s.vol.shape().x
                                                           : s.vol.shape().y;
            if (rj != rows || cj != cols) break;
            ++j;
        }
        const int n = int(j - i);
        batch.resize(n, rows, cols, 1);
        targets.assign(std::size_t(n) * rows * cols, 0.0f);
        for (int b = 0; b < n; ++b) {
            detail::extract_ref(val[picked[i + b].sample], picked[i + b], img, msk);
            batch.pack_channel(b, img.data());
            float* t = targets.data() + std::size_t(b) * rows * cols;
            for (std::size_t k = 0; k < msk.size(); ++k) t[k] = float(msk[k]);
        }
        const nn::FeatureMap& p = net.forward(batch, /*training=*/false);
        probs.resize(std::size_t(n) * rows * cols);
        for (int b = 0; b < n; ++b)
            p.unpack_channel(b, probs.data() + std::size_t(b) * rows * cols);
        acc += loss_value(cfg.loss, probs, targets) * n;
        count += n;
        i = j;
    }
    if (count == 0) throw Error("validation set has no slices");
    return acc / double(count);
}

// Trains one fold: every epoch walks all ZX+ZY slices of the training samples
// in a seeded shuffled order with fresh augmentation draws, then measures the
// validation loss; the checkpoint of the best validation epoch wins. The
// network is (re)initialized here with weights derived from cfg.seed, so a
// fold is a pure function of (data, config).
inline FoldResult train_fold(const std::vector<TrainSample>& train,
                             const std::vector<TrainSample>& val,
                             const TrainConfig& cfg, nn::UNet& net,
                             int fold_index = 0,
                             const std::function<void(const EpochStats&)>& on_epoch = {},
                             const std::filesystem::path& best_path = {},
                             nlohmann::json ckpt_meta = nlohmann::json::object()) {
    cfg.validate();
    if (train.empty()) throw Error("empty training set");
    if (val.empty()) throw Error("empty validation set");

    nn::UNetConfig ucfg = cfg.unet;
    ucfg.init_seed = nn::mix_seed(cfg.seed, 0x696e6974);  // per-fold weight init
    net.init(ucfg);
    nn::Adam opt(net.params(), cfg.optimizer);

    const AugmentConfig acfg = cfg.augment_config();
    const int ch = acfg.crop_h, cw = acfg.crop_w;
    const std::size_t hw = std::size_t(ch) * cw;
    const auto slices = enumerate_slices(train);
    if (slices.empty()) throw Error("empty training set");

    FoldResult result;
    result.fold = fold_index;
    std::vector<std::vector<float>> best_weights;

    nn::FeatureMap batch, dprob;
    std::vector<float> img, aug_img, probs, targets, grads;
    std::vector<std::uint8_t> msk, aug_msk;
    std::vector<int> order(slices.size());

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        for (std::size_t k = 0; k < order.size(); ++k) order[k] = int(k);
        std::mt19937_64 shuffle_rng(nn::mix_seed(cfg.seed, 0x501f, epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double loss_acc = 0.0;
        long seen = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const int n = int(std::min<std::size_t>(cfg.batch_size,
                                                    order.size() - start));
            batch.resize(n, ch, cw, 1);
            targets.assign(std::size_t(n) * hw, 0.0f);
            for (int b = 0; b < n; ++b) {
                const SliceRef& r = slices[order[start + b]];
                const TrainSample& s = train[r.sample];
                detail::extract_ref(s, r, img, msk);
                const int rows = s.vol.shape().z;
                const int cols = r.plane == PlaneTag::ZX ? s.vol.shape().x
                                                         : s.vol.shape().y;
                std::mt19937_64 rng(nn::mix_seed(cfg.seed, 0xa11f2, epoch, r.id));
                augment(img, msk, rows, cols, acfg, rng, aug_img, aug_msk);
                batch.pack_channel(b, aug_img.data());
                float* t = targets.data() + std::size_t(b) * hw;
                for (std::size_t k = 0; k < hw; ++k) t[k] = float(aug_msk[k]);
            }

            const nn::FeatureMap& p = net.forward(batch, /*training=*/true);
            probs.resize(std::size_t(n) * hw);
            for (int b = 0; b < n; ++b)
                p.unpack_channel(b, probs.data() + std::size_t(b) * hw);
            const double L = loss_value(cfg.loss, probs, targets);
            detail::check_finite(L, fold_index, epoch, "training batch");

            grads.resize(std::size_t(n) * hw);
            loss_grad(cfg.loss, probs, targets, grads);
            dprob.resize(n, ch, cw, 1);
            for (int b = 0; b < n; ++b)
                dprob.pack_channel(b, grads.data() + std::size_t(b) * hw);
            dprob.zero_border();
            net.zero_grad();
            net.backward(dprob);
            opt.step();
            loss_acc += L * n;
            seen += n;
        }

        const double vloss = validation_loss(net, val, cfg);
        detail::check_finite(vloss, fold_index, epoch, "validation");
        EpochStats st;
        st.epoch = epoch;
        st.train_loss = loss_acc / double(seen);
        st.val_loss = vloss;
        st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                   t0).count();
        result.history.push_back(st);

        if (vloss < result.best_val_loss) {
            result.best_val_loss = vloss;
            result.best_epoch = epoch;
            const auto params = net.params();
            best_weights.resize(params.size());
            for (std::size_t k = 0; k < params.size(); ++k)
                best_weights[k] = *params[k].value;
            if (!best_path.empty()) {
                nlohmann::json meta = ckpt_meta;
                meta["fold"] = fold_index;
                meta["epoch"] = epoch;
                meta["val_loss"] = vloss;
                meta["train"] = train_config_to_json(cfg);
                meta["complete"] = false;
                nn::save_checkpoint(best_path, net, std::move(meta));
            }
        }
        if (on_epoch) on_epoch(st);
    }

    // leave the best-validation weights in the network
    const auto params = net.params();
    for (std::size_t k = 0; k < params.size(); ++k) *params[k].value = best_weights[k];
    return result;
}

// Cross-validation driver: one checkpoint per fold under checkpoint_dir,
// seeds derived as seed + fold_index, per-epoch telemetry appended to a
// delimited log. Folds whose checkpoint is already marked complete are
// skipped, so an aborted run resumes where it stopped.
inline std::vector<std::filesystem::path> train_all_folds(
    const std::vector<SampleRecord>& records, const FoldAssignment& fa,
    const TrainConfig& cfg,
    const std::function<TrainSample(const SampleRecord&)>& load,
    const std::filesystem::path& checkpoint_dir,
    const std::filesystem::path& log_path,
    const std::vector<int>& folds_subset = {},
    const std::function<void(int fold, const EpochStats&)>& on_epoch = {}) {
    cfg.validate();
    std::vector<int> folds = folds_subset;
    if (folds.empty())
        for (int f = 0; f < fa.k; ++f) folds.push_back(f);

    std::filesystem::create_directories(checkpoint_dir);
    std::vector<std::filesystem::path> out;
    for (int f : folds) {
        auto [train_recs, val_recs] = fold_views(records, fa, f);
        // recheck the no-leakage invariant at launch
        std::set<std::string> train_subjects;
        for (const auto& r : train_recs) train_subjects.insert(r.subject_id);
        for (const auto& r : val_recs)
            if (train_subjects.count(r.subject_id))
                throw Error("subject leakage in fold " + std::to_string(f) + ": " +
                            r.subject_id);
        if (val_recs.empty())
            throw Error("fold " + std::to_string(f) + " has no validation samples");

        const auto ckpt = checkpoint_dir / ("fold_" + std::to_string(f) + ".ckpt");
        if (std::filesystem::exists(ckpt)) {
            nn::UNet probe;
            if (nn::load_checkpoint(ckpt, probe).value("complete", false)) {
                out.push_back(ckpt);
                continue;  // resume: this fold already finished
            }
        }

        std::vector<TrainSample> train, val;
        for (const auto& r : train_recs) train.push_back(load(r));
        for (const auto& r : val_recs) val.push_back(load(r));

        TrainConfig fold_cfg = cfg;
        fold_cfg.seed = cfg.seed + std::uint64_t(f);

        std::ofstream log(log_path, std::ios::app);
        if (!log) throw UnwritablePathError(log_path.string());
        if (log.tellp() == 0) log << "fold,epoch,train_loss,val_loss,wall_time_s\n";

        nlohmann::json meta;
        meta["train_subjects"] = std::vector<std::string>(train_subjects.begin(),
                                                          train_subjects.end());
        meta["loss"] = loss_name(cfg.loss.kind);
        nn::UNet net;
        FoldResult res = train_fold(
            train, val, fold_cfg, net, f,
            [&](const EpochStats& st) {
                log << f << ',' << st.epoch << ',' << st.train_loss << ','
                    << st.val_loss << ',' << st.seconds << '\n';
                log.flush();
                if (on_epoch) on_epoch(f, st);
            },
            ckpt, meta);

        meta["fold"] = f;
        meta["epoch"] = res.best_epoch;
        meta["val_loss"] = res.best_val_loss;
        meta["train"] = train_config_to_json(fold_cfg);
        meta["complete"] = true;
        nn::save_checkpoint(ckpt, net, std::move(meta));
        out.push_back(ckpt);
    }
    return out;
}

}  // namespace ctseg
