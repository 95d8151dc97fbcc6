#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "ctseg/errors.hpp"
#include "ctseg/volume.hpp"

namespace ctseg {

// Geometry of the fixed-size crop every sample is reduced to. Defaults match
// the 448x448x768 (XYZ) working volume; smaller variants keep the same rules.
struct CanonicalCrop {
    int center_x = 0;
    int center_y = 0;
    int z_origin = 0;      // start index into the trimmed volume
    Shape3 crop_shape{768, 448, 448};
    // padding applied on each side when the window overran the source
    int pad_x_lo = 0, pad_x_hi = 0, pad_y_lo = 0, pad_y_hi = 0, pad_z_hi = 0;
};

// Drops the deep-bone end of the scan: keeps the first ceil(Z*(1-fraction))
// slices. Z index 0 is the cartilage-surface end.
inline VolumeStack trim_bottom(const VolumeStack& vol, double fraction = 0.30) {
    if (fraction < 0.0 || fraction >= 1.0)
        throw Error("trim fraction must be in [0,1), got " + std::to_string(fraction));
    const Shape3 s = vol.shape();
    const int keep = int(std::ceil(double(s.z) * (1.0 - fraction)));
    if (keep == s.z) return vol;

    const std::size_t n = std::size_t(keep) * s.y * s.x;
    if (vol.dtype_class() == DtypeClass::RawInteger) {
        std::vector<std::uint16_t> v(vol.raw_voxels().begin(),
                                     vol.raw_voxels().begin() + n);
        return VolumeStack::raw({keep, s.y, s.x}, std::move(v), vol.bit_depth(),
                                vol.voxel_size_um());
    }
    std::vector<float> v(vol.values().begin(), vol.values().begin() + n);
    return VolumeStack::normalized({keep, s.y, s.x}, std::move(v), vol.voxel_size_um());
}

inline MaskVolume trim_bottom(const MaskVolume& mask, double fraction = 0.30) {
    if (fraction < 0.0 || fraction >= 1.0)
        throw Error("trim fraction must be in [0,1), got " + std::to_string(fraction));
    const Shape3 s = mask.shape();
    const int keep = int(std::ceil(double(s.z) * (1.0 - fraction)));
    std::vector<std::uint8_t> v(mask.voxels().begin(),
                                mask.voxels().begin() + std::size_t(keep) * s.y * s.x);
    return MaskVolume({keep, s.y, s.x}, std::move(v));
}

// Global min-max contrast normalization to [0,1]. Constant volumes map to all
// zeros.
inline VolumeStack normalize_global(const VolumeStack& vol) {
    const Shape3 s = vol.shape();
    std::vector<float> out(s.voxels());
    if (vol.dtype_class() == DtypeClass::RawInteger) {
        const auto& raw = vol.raw_voxels();
        std::uint16_t lo = raw[0], hi = raw[0];
        for (auto v : raw) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        if (hi == lo) {
            std::fill(out.begin(), out.end(), 0.0f);
        } else {
            const float scale = 1.0f / float(hi - lo);
            for (std::size_t i = 0; i < raw.size(); ++i)
                out[i] = float(raw[i] - lo) * scale;
        }
    } else {
        const auto& val = vol.values();
        float lo = val[0], hi = val[0];
        for (auto v : val) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        if (hi == lo) {
            std::fill(out.begin(), out.end(), 0.0f);
        } else {
            const float scale = 1.0f / (hi - lo);
            for (std::size_t i = 0; i < val.size(); ++i) out[i] = (val[i] - lo) * scale;
        }
    }
    return VolumeStack::normalized(s, std::move(out), vol.voxel_size_um());
}

namespace detail {

// Largest-area 8-connected foreground component of a binary image; returns
// its pixel count and centroid (unweighted mean, rounded half away from zero).
inline bool largest_component_centroid(const std::vector<std::uint8_t>& img, int h,
                                       int w, int* cx, int* cy) {
    std::vector<std::int32_t> label(std::size_t(h) * w, 0);
    std::vector<std::size_t> stack;
    std::int32_t next = 0;
    std::size_t best_area = 0;
    double best_sx = 0, best_sy = 0;

    for (std::size_t start = 0; start < img.size(); ++start) {
        if (!img[start] || label[start]) continue;
        ++next;
        std::size_t area = 0;
        double sx = 0, sy = 0;
        stack.clear();
        stack.push_back(start);
        label[start] = next;
        while (!stack.empty()) {
            std::size_t p = stack.back();
            stack.pop_back();
            int py = int(p / w), px = int(p % w);
            ++area;
            sx += px;
            sy += py;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (!dy && !dx) continue;
                    int ny = py + dy, nx = px + dx;
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                    std::size_t q = std::size_t(ny) * w + nx;
                    if (img[q] && !label[q]) {
                        label[q] = next;
                        stack.push_back(q);
                    }
                }
        }
        if (area > best_area) {
            best_area = area;
            best_sx = sx;
            best_sy = sy;
        }
    }
    if (best_area == 0) return false;
    auto round_half_away = [](double v) { return int(std::floor(std::abs(v) + 0.5)) * (v < 0 ? -1 : 1); };
    *cx = round_half_away(best_sx / double(best_area));
    *cy = round_half_away(best_sy / double(best_area));
    return true;
}

}  // namespace detail

// Finds the XY center of the sample: binarize at >= threshold, project the
// occupancy along Z, then take the centroid of the largest 8-connected
// component of the projected footprint.
inline std::pair<int, int> locate_center(const VolumeStack& vol,
                                         double threshold = 0.1) {
    if (vol.dtype_class() != DtypeClass::NormalizedFloat)
        throw Error("locate_center expects a normalized volume");
    const Shape3 s = vol.shape();
    const auto& v = vol.values();
    std::vector<std::uint8_t> footprint(std::size_t(s.y) * s.x, 0);
    const std::size_t plane = std::size_t(s.y) * s.x;
    for (int z = 0; z < s.z; ++z) {
        const float* p = v.data() + std::size_t(z) * plane;
        for (std::size_t i = 0; i < plane; ++i)
            if (p[i] >= float(threshold)) footprint[i] = 1;
    }
    int cx = 0, cy = 0;
    if (!detail::largest_component_centroid(footprint, s.y, s.x, &cx, &cy))
        throw EmptySampleError("no foreground above threshold " +
                               std::to_string(threshold));
    return {cx, cy};
}

namespace detail {

template <typename T>
void crop_grid(const std::vector<T>& src, Shape3 ss, std::vector<T>& dst, Shape3 ds,
               int x0, int y0, int z0) {
    // regions outside the source stay zero
    std::fill(dst.begin(), dst.end(), T(0));
    const int zs = std::max(z0, 0), ze = std::min(z0 + ds.z, ss.z);
    const int ys = std::max(y0, 0), ye = std::min(y0 + ds.y, ss.y);
    const int xs = std::max(x0, 0), xe = std::min(x0 + ds.x, ss.x);
    if (zs >= ze || ys >= ye || xs >= xe) return;
    const std::size_t run = std::size_t(xe - xs);
    for (int z = zs; z < ze; ++z)
        for (int y = ys; y < ye; ++y) {
            const T* s = src.data() + (std::size_t(z) * ss.y + y) * ss.x + xs;
            T* d = dst.data() +
                   (std::size_t(z - z0) * ds.y + (y - y0)) * ds.x + (xs - x0);
            std::copy(s, s + run, d);
        }
}

}  // namespace detail

// Cuts the fixed-size working volume around (cx, cy), anchored at the surface
// end in Z. Identical geometry is applied to the volume and its mask; any
// window overrun is zero-padded.
inline std::tuple<VolumeStack, MaskVolume, CanonicalCrop> crop_canonical(
    const VolumeStack& vol, const MaskVolume& mask, std::pair<int, int> center,
    Shape3 crop_shape = {768, 448, 448}) {
    require_same_shape(vol.shape(), mask.shape(), "crop_canonical volume/mask");
    if (vol.dtype_class() != DtypeClass::NormalizedFloat)
        throw Error("crop_canonical expects a normalized volume");
    const Shape3 ss = vol.shape();
    const auto [cx, cy] = center;
    if (cx < 0 || cx >= ss.x || cy < 0 || cy >= ss.y)
        throw Error("crop center outside source XY extent");

    CanonicalCrop crop;
    crop.center_x = cx;
    crop.center_y = cy;
    crop.crop_shape = crop_shape;
    crop.z_origin = 0;
    const int x0 = cx - crop_shape.x / 2;
    const int y0 = cy - crop_shape.y / 2;
    crop.pad_x_lo = std::max(0, -x0);
    crop.pad_x_hi = std::max(0, x0 + crop_shape.x - ss.x);
    crop.pad_y_lo = std::max(0, -y0);
    crop.pad_y_hi = std::max(0, y0 + crop_shape.y - ss.y);
    crop.pad_z_hi = std::max(0, crop_shape.z - ss.z);

    std::vector<float> cv(crop_shape.voxels());
    detail::crop_grid(vol.values(), ss, cv, crop_shape, x0, y0, 0);
    std::vector<std::uint8_t> cm(crop_shape.voxels());
    detail::crop_grid(mask.voxels(), ss, cm, crop_shape, x0, y0, 0);

    return {VolumeStack::normalized(crop_shape, std::move(cv), vol.voxel_size_um()),
            MaskVolume(crop_shape, std::move(cm)), crop};
}

enum class PlaneTag { ZX, ZY };

inline const char* plane_name(PlaneTag p) { return p == PlaneTag::ZX ? "ZX" : "ZY"; }

// One 2D training slice: rows are Z, columns are the lateral axis.
struct SlicePair {
    std::vector<float> image;   // z-major, lateral fastest
    std::vector<std::uint8_t> mask;
    int rows = 0;               // Z extent
    int cols = 0;               // lateral extent
    PlaneTag plane = PlaneTag::ZX;
    int index = 0;              // fixed-y (ZX) or fixed-x (ZY) coordinate
};

inline void extract_slice(const std::vector<float>& vox, Shape3 s, PlaneTag plane,
                          int index, std::vector<float>& out) {
    out.resize(std::size_t(s.z) * (plane == PlaneTag::ZX ? s.x : s.y));
    if (plane == PlaneTag::ZX) {
        for (int z = 0; z < s.z; ++z) {
            const float* src = vox.data() + (std::size_t(z) * s.y + index) * s.x;
            std::copy(src, src + s.x, out.data() + std::size_t(z) * s.x);
        }
    } else {
        for (int z = 0; z < s.z; ++z) {
            const float* base = vox.data() + std::size_t(z) * s.y * s.x + index;
            float* dst = out.data() + std::size_t(z) * s.y;
            for (int y = 0; y < s.y; ++y) dst[y] = base[std::size_t(y) * s.x];
        }
    }
}

template <typename T>
inline void extract_slice_t(const std::vector<T>& vox, Shape3 s, PlaneTag plane,
                            int index, std::vector<T>& out) {
    out.resize(std::size_t(s.z) * (plane == PlaneTag::ZX ? s.x : s.y));
    if (plane == PlaneTag::ZX) {
        for (int z = 0; z < s.z; ++z) {
            const T* src = vox.data() + (std::size_t(z) * s.y + index) * s.x;
            std::copy(src, src + s.x, out.data() + std::size_t(z) * s.x);
        }
    } else {
        for (int z = 0; z < s.z; ++z) {
            const T* base = vox.data() + std::size_t(z) * s.y * s.x + index;
            T* dst = out.data() + std::size_t(z) * s.y;
            for (int y = 0; y < s.y; ++y) dst[y] = base[std::size_t(y) * s.x];
        }
    }
}

// Splits a canonical volume into its ZX then ZY slices, ascending index.
// For the default canonical shape that is 448 + 448 slices of 768x448.
inline std::vector<SlicePair> slice_planes(const VolumeStack& vol,
                                           const MaskVolume& mask) {
    require_same_shape(vol.shape(), mask.shape(), "slice_planes volume/mask");
    if (vol.dtype_class() != DtypeClass::NormalizedFloat)
        throw Error("slice_planes expects a normalized volume");
    const Shape3 s = vol.shape();
    std::vector<SlicePair> out;
    out.reserve(std::size_t(s.y) + s.x);
    for (int y = 0; y < s.y; ++y) {
        SlicePair p;
        p.plane = PlaneTag::ZX;
        p.index = y;
        p.rows = s.z;
        p.cols = s.x;
        extract_slice(vol.values(), s, PlaneTag::ZX, y, p.image);
        extract_slice_t(mask.voxels(), s, PlaneTag::ZX, y, p.mask);
        out.push_back(std::move(p));
    }
    for (int x = 0; x < s.x; ++x) {
        SlicePair p;
        p.plane = PlaneTag::ZY;
        p.index = x;
        p.rows = s.z;
        p.cols = s.y;
        extract_slice(vol.values(), s, PlaneTag::ZY, x, p.image);
        extract_slice_t(mask.voxels(), s, PlaneTag::ZY, x, p.mask);
        out.push_back(std::move(p));
    }
    return out;
}

// Inverse of slice_planes for one plane family; used by inference reassembly
// and the round-trip tests.
inline void insert_slice(std::vector<float>& vox, Shape3 s, PlaneTag plane, int index,
                         const std::vector<float>& slice) {
    if (plane == PlaneTag::ZX) {
        for (int z = 0; z < s.z; ++z) {
            float* dst = vox.data() + (std::size_t(z) * s.y + index) * s.x;
            std::copy(slice.data() + std::size_t(z) * s.x,
                      slice.data() + std::size_t(z + 1) * s.x, dst);
        }
    } else {
        for (int z = 0; z < s.z; ++z) {
            float* base = vox.data() + std::size_t(z) * s.y * s.x + index;
            const float* src = slice.data() + std::size_t(z) * s.y;
            for (int y = 0; y < s.y; ++y) base[std::size_t(y) * s.x] = src[y];
        }
    }
}

// Flips a raw volume along Z in place; applied at ingestion when a sample is
// flagged as scanned bone-side first.
inline VolumeStack flip_z(const VolumeStack& vol) {
    const Shape3 s = vol.shape();
    const std::size_t plane = std::size_t(s.y) * s.x;
    if (vol.dtype_class() == DtypeClass::RawInteger) {
        std::vector<std::uint16_t> v(vol.raw_voxels());
        for (int z = 0; z < s.z / 2; ++z)
            std::swap_ranges(v.begin() + std::size_t(z) * plane,
                             v.begin() + std::size_t(z + 1) * plane,
                             v.begin() + std::size_t(s.z - 1 - z) * plane);
        return VolumeStack::raw(s, std::move(v), vol.bit_depth(), vol.voxel_size_um());
    }
    std::vector<float> v(vol.values());
    for (int z = 0; z < s.z / 2; ++z)
        std::swap_ranges(v.begin() + std::size_t(z) * plane,
                         v.begin() + std::size_t(z + 1) * plane,
                         v.begin() + std::size_t(s.z - 1 - z) * plane);
    return VolumeStack::normalized(s, std::move(v), vol.voxel_size_um());
}

inline MaskVolume flip_z(const MaskVolume& mask) {
    const Shape3 s = mask.shape();
    const std::size_t plane = std::size_t(s.y) * s.x;
    std::vector<std::uint8_t> v(mask.voxels());
    for (int z = 0; z < s.z / 2; ++z)
        std::swap_ranges(v.begin() + std::size_t(z) * plane,
                         v.begin() + std::size_t(z + 1) * plane,
                         v.begin() + std::size_t(s.z - 1 - z) * plane);
    return MaskVolume(s, std::move(v));
}

}  // namespace ctseg
