#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ctseg/errors.hpp"
#include "ctseg/preprocess.hpp"
#include "ctseg/volume.hpp"

namespace ctseg {

// Interface depth per (y, x) column: smallest z with ground-truth foreground,
// -1 where the column is all background. The tidemark is the cartilage-facing
// edge of the calcified-tissue mask, so the min-z rule applies regardless of
// which plane family the slices came from.
struct TidemarkSurface {
    int ny = 0, nx = 0;
    std::vector<std::int32_t> depth;  // ny*nx, -1 = absent
    PlaneTag plane = PlaneTag::ZX;

    std::int32_t at(int y, int x) const { return depth[std::size_t(y) * nx + x]; }
};

struct BandMask {
    Shape3 shape;
    std::vector<std::uint8_t> voxels;  // 0/1
    int pad_voxels = 0;
    double pad_um = 0.0;

    std::uint8_t at(int z, int y, int x) const {
        return voxels[(std::size_t(z) * shape.y + y) * shape.x + x];
    }
};

struct ConfusionCounts {
    std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    std::int64_t band_voxels() const { return tp + fp + fn + tn; }
};

// One evaluation row: one sample at one pad level.
struct MetricRow {
    std::string sample_id;
    std::string subject_id;
    std::string loss_kind;
    double pad_um = 0.0;
    int pad_voxels = 0;
    ConfusionCounts counts;
    double iou = 0.0, dice = 0.0, vs = 0.0;
    bool band_empty = false;
};

// Micrometers to voxels: round half away from zero, never below 1.
inline int pad_um_to_voxels(double pad_um, double voxel_um) {
    if (pad_um <= 0 || voxel_um <= 0)
        throw Error("pad_um and voxel_um must be positive");
    const long long r = std::llround(pad_um / voxel_um);
    return int(std::max(1LL, r));
}

inline TidemarkSurface extract_tidemark(const MaskVolume& gt,
                                        PlaneTag plane = PlaneTag::ZX) {
    const Shape3 s = gt.shape();
    TidemarkSurface surf;
    surf.ny = s.y;
    surf.nx = s.x;
    surf.plane = plane;
    surf.depth.assign(std::size_t(s.y) * s.x, -1);
    const auto& v = gt.voxels();
    const std::size_t plane_sz = std::size_t(s.y) * s.x;
    for (int z = 0; z < s.z; ++z) {
        const std::uint8_t* p = v.data() + std::size_t(z) * plane_sz;
        for (std::size_t i = 0; i < plane_sz; ++i)
            if (p[i] && surf.depth[i] < 0) surf.depth[i] = z;
    }
    return surf;
}

// The +-pad region around the surface, 1D along Z per column, clipped to the
// volume. Columns without a surface contribute nothing.
inline BandMask build_band(const TidemarkSurface& surf, int pad_voxels, Shape3 shape) {
    if (pad_voxels < 1) throw Error("pad_voxels must be >= 1");
    if (surf.ny != shape.y || surf.nx != shape.x)
        throw ShapeMismatchError("band surface vs volume XY extent");
    BandMask band;
    band.shape = shape;
    band.pad_voxels = pad_voxels;
    band.voxels.assign(shape.voxels(), 0);
    const std::size_t plane_sz = std::size_t(shape.y) * shape.x;
    for (std::size_t i = 0; i < plane_sz; ++i) {
        const std::int32_t d = surf.depth[i];
        if (d < 0) continue;
        const int z0 = std::max(0, d - pad_voxels);
        const int z1 = std::min(shape.z - 1, d + pad_voxels);
        for (int z = z0; z <= z1; ++z) band.voxels[std::size_t(z) * plane_sz + i] = 1;
    }
    return band;
}

inline ConfusionCounts banded_confusion(const MaskVolume& pred, const MaskVolume& gt,
                                        const BandMask& band) {
    require_same_shape(pred.shape(), gt.shape(), "banded_confusion pred/gt");
    require_same_shape(pred.shape(), band.shape, "banded_confusion pred/band");
    ConfusionCounts c;
    const auto& p = pred.voxels();
    const auto& g = gt.voxels();
    const auto& b = band.voxels;
    for (std::size_t i = 0; i < b.size(); ++i) {
        if (!b[i]) continue;
        if (p[i]) {
            if (g[i]) ++c.tp; else ++c.fp;
        } else {
            if (g[i]) ++c.fn; else ++c.tn;
        }
    }
    return c;
}

// Ratio metrics with the empty-empty convention: a zero denominator scores 1.
inline double iou_score(const ConfusionCounts& c) {
    const std::int64_t den = c.tp + c.fp + c.fn;
    return den == 0 ? 1.0 : double(c.tp) / double(den);
}

inline double dice_score(const ConfusionCounts& c) {
    const std::int64_t den = 2 * c.tp + c.fp + c.fn;
    return den == 0 ? 1.0 : 2.0 * double(c.tp) / double(den);
}

inline double volumetric_similarity(const ConfusionCounts& c) {
    const std::int64_t den = 2 * c.tp + c.fp + c.fn;
    return den == 0 ? 1.0 : 1.0 - double(std::llabs(c.fp - c.fn)) / double(den);
}

// Bands are constructed once from the ground truth and reused per pad level;
// counts pool over the whole sample before the ratios (micro-averaging).
inline std::vector<MetricRow> evaluate_sample(const MaskVolume& pred,
                                              const MaskVolume& gt,
                                              const std::vector<double>& pads_um,
                                              double voxel_um) {
    require_same_shape(pred.shape(), gt.shape(), "evaluate_sample pred/gt");
    const TidemarkSurface surf = extract_tidemark(gt, PlaneTag::ZX);
    std::vector<MetricRow> rows;
    rows.reserve(pads_um.size());
    for (double pad_um : pads_um) {
        const int pv = pad_um_to_voxels(pad_um, voxel_um);
        const BandMask band = build_band(surf, pv, gt.shape());
        MetricRow row;
        row.pad_um = pad_um;
        row.pad_voxels = pv;
        row.counts = banded_confusion(pred, gt, band);
        row.iou = iou_score(row.counts);
        row.dice = dice_score(row.counts);
        row.vs = volumetric_similarity(row.counts);
        row.band_empty = row.counts.band_voxels() == 0;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace ctseg
