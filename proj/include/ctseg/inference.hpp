#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctseg/cvsplit.hpp"
#include "ctseg/errors.hpp"
#include "ctseg/losses.hpp"
#include "ctseg/manifest.hpp"
#include "ctseg/nn/checkpoint.hpp"
#include "ctseg/nn/unet.hpp"
#include "ctseg/preprocess.hpp"
#include "ctseg/volume.hpp"

namespace ctseg {

enum class Provenance { ZX, ZY, Averaged };

// Per-voxel foreground probability over a canonical volume, tagged with the
// slicing plane that produced it (or Averaged after ensembling).
struct ProbabilityVolume {
    Shape3 shape;
    Provenance prov = Provenance::ZX;
    std::vector<float> p;  // z-major, same layout as VolumeStack
};

// Paper operating points: 0.3 for the compound loss, 0.5 otherwise.
inline double threshold_for_loss(LossKind kind) {
    return kind == LossKind::BceLogJaccard ? 0.3 : 0.5;
}

// Runs the frozen model over every slice of one plane family and reassembles
// the per-slice probabilities into a volume. Slices are batched; the batch
// size only affects speed, not the result.
inline ProbabilityVolume predict_plane(nn::UNet& net, const VolumeStack& vol,
                                       PlaneTag plane, int batch_size = 8) {
    if (vol.dtype_class() != DtypeClass::NormalizedFloat)
        throw Error("predict_plane expects a normalized volume");
    if (batch_size < 1) throw Error("batch_size must be >= 1");
    const Shape3 s = vol.shape();
    const int count = plane == PlaneTag::ZX ? s.y : s.x;  // slices in the family
    const int rows = s.z;
    const int cols = plane == PlaneTag::ZX ? s.x : s.y;
    const int div = net.cfg.spatial_divisor();
    if (rows % div || cols % div)
        throw ShapeMismatchError("volume " + s.str() + " slices are " +
                                 std::to_string(rows) + "x" + std::to_string(cols) +
                                 ", not divisible by " + std::to_string(div));

    ProbabilityVolume out;
    out.shape = s;
    out.prov = plane == PlaneTag::ZX ? Provenance::ZX : Provenance::ZY;
    out.p.resize(s.voxels());

    nn::FeatureMap batch;
    std::vector<float> img, slice(std::size_t(rows) * cols);
    for (int start = 0; start < count; start += batch_size) {
        const int n = std::min(batch_size, count - start);
        batch.resize(n, rows, cols, 1);
        for (int b = 0; b < n; ++b) {
            extract_slice(vol.values(), s, plane, start + b, img);
            batch.pack_channel(b, img.data());
        }
        const nn::FeatureMap& p = net.forward(batch, /*training=*/false);
        for (int b = 0; b < n; ++b) {
            p.unpack_channel(b, slice.data());
            insert_slice(out.p, s, plane, start + b, slice);
        }
    }
    return out;
}

// Voxelwise mean of the two plane predictions, binarized at >= threshold.
inline MaskVolume ensemble_and_threshold(const ProbabilityVolume& pzx,
                                         const ProbabilityVolume& pzy,
                                         double threshold) {
    require_same_shape(pzx.shape, pzy.shape, "ensemble ZX/ZY");
    if (pzx.prov != Provenance::ZX || pzy.prov != Provenance::ZY)
        throw Error("ensemble expects a ZX and a ZY prediction, in that order");
    if (!(threshold > 0.0 && threshold < 1.0))
        throw Error("threshold must lie in (0,1), got " + std::to_string(threshold));
    std::vector<std::uint8_t> m(pzx.p.size());
    const float t = float(threshold);
    for (std::size_t i = 0; i < m.size(); ++i)
        m[i] = 0.5f * (pzx.p[i] + pzy.p[i]) >= t ? 1 : 0;
    return MaskVolume(pzx.shape, std::move(m));
}

inline ProbabilityVolume average_planes(const ProbabilityVolume& pzx,
                                        const ProbabilityVolume& pzy) {
    require_same_shape(pzx.shape, pzy.shape, "average ZX/ZY");
    ProbabilityVolume out;
    out.shape = pzx.shape;
    out.prov = Provenance::Averaged;
    out.p.resize(pzx.p.size());
    for (std::size_t i = 0; i < out.p.size(); ++i)
        out.p[i] = 0.5f * (pzx.p[i] + pzy.p[i]);
    return out;
}

// Full dual-plane prediction of one sample at its out-of-fold threshold.
inline MaskVolume predict_sample(nn::UNet& net, const VolumeStack& vol,
                                 double threshold, int batch_size = 8) {
    const ProbabilityVolume zx = predict_plane(net, vol, PlaneTag::ZX, batch_size);
    const ProbabilityVolume zy = predict_plane(net, vol, PlaneTag::ZY, batch_size);
    return ensemble_and_threshold(zx, zy, threshold);
}

// Out-of-fold prediction: every sample is predicted by the checkpoint of the
// fold that held it out. The guard is structural (fold lookup) plus explicit:
// a checkpoint that recorded its training subjects must not cover the sample.
// Results stream through the sink so volumes need not all be resident.
inline void out_of_fold_predict(
    const std::vector<SampleRecord>& records, const FoldAssignment& fa,
    const std::map<int, std::filesystem::path>& checkpoints, double threshold,
    const std::function<VolumeStack(const SampleRecord&)>& load,
    const std::function<void(const SampleRecord&, int fold, MaskVolume)>& sink,
    int batch_size = 8) {
    if (!(threshold > 0.0 && threshold < 1.0))
        throw Error("threshold must lie in (0,1), got " + std::to_string(threshold));

    // group samples by their holding fold so each model loads once
    std::map<int, std::vector<const SampleRecord*>> by_fold;
    for (const auto& r : records)
        by_fold[fa.fold_of(r.subject_id)].push_back(&r);

    std::set<std::string> predicted;
    for (const auto& [fold, recs] : by_fold) {
        auto it = checkpoints.find(fold);
        if (it == checkpoints.end())
            throw Error("missing checkpoint for fold " + std::to_string(fold));
        nn::UNet net;
        const nlohmann::json meta = nn::load_checkpoint(it->second, net);
        if (meta.contains("fold") && meta["fold"].get<int>() != fold)
            throw Error("checkpoint " + it->second.string() + " belongs to fold " +
                        meta["fold"].dump() + ", not " + std::to_string(fold));
        std::set<std::string> train_subjects;
        if (meta.contains("train_subjects"))
            for (const auto& s : meta["train_subjects"])
                train_subjects.insert(s.get<std::string>());

        for (const SampleRecord* r : recs) {
            if (train_subjects.count(r->subject_id))
                throw Error("out-of-fold violation: sample " + r->sample_id +
                            " of subject " + r->subject_id +
                            " would be predicted by a model trained on that subject");
            if (!predicted.insert(r->sample_id).second)
                throw Error("sample predicted twice: " + r->sample_id);
            sink(*r, fold, predict_sample(net, load(*r), threshold, batch_size));
        }
    }
}

}  // namespace ctseg
