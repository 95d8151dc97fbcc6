#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctseg/errors.hpp"

namespace ctseg {

struct Shape3 {
    int z = 0;
    int y = 0;
    int x = 0;

    bool operator==(const Shape3&) const = default;
    std::size_t voxels() const {
        return std::size_t(z) * std::size_t(y) * std::size_t(x);
    }
    std::string str() const {
        return "(" + std::to_string(z) + "," + std::to_string(y) + "," +
               std::to_string(x) + ")";
    }
};

enum class DtypeClass { RawInteger, NormalizedFloat };

// 3D intensity grid indexed (z, y, x), x fastest. Raw scans keep their stored
// integers (8- or 16-bit); normalized volumes hold floats in [0, 1].
// Immutable by convention once built; cheap to move, expensive to copy.
class VolumeStack {
public:
    VolumeStack() = default;

    static VolumeStack raw(Shape3 shape, std::vector<std::uint16_t> voxels,
                           int bit_depth, double voxel_size_um = 3.2) {
        check_shape(shape);
        if (bit_depth != 8 && bit_depth != 16)
            throw UnsupportedBitDepthError(std::to_string(bit_depth) + " bit");
        if (voxels.size() != shape.voxels())
            throw ShapeMismatchError("voxel count " + std::to_string(voxels.size()) +
                                     " vs shape " + shape.str());
        if (voxel_size_um <= 0) throw Error("voxel_size_um must be positive");
        VolumeStack v;
        v.shape_ = shape;
        v.raw_ = std::move(voxels);
        v.bit_depth_ = bit_depth;
        v.voxel_size_um_ = voxel_size_um;
        v.dtype_ = DtypeClass::RawInteger;
        return v;
    }

    static VolumeStack normalized(Shape3 shape, std::vector<float> voxels,
                                  double voxel_size_um = 3.2) {
        check_shape(shape);
        if (voxels.size() != shape.voxels())
            throw ShapeMismatchError("voxel count " + std::to_string(voxels.size()) +
                                     " vs shape " + shape.str());
        if (voxel_size_um <= 0) throw Error("voxel_size_um must be positive");
        VolumeStack v;
        v.shape_ = shape;
        v.norm_ = std::move(voxels);
        v.voxel_size_um_ = voxel_size_um;
        v.dtype_ = DtypeClass::NormalizedFloat;
        return v;
    }

    Shape3 shape() const { return shape_; }
    DtypeClass dtype_class() const { return dtype_; }
    double voxel_size_um() const { return voxel_size_um_; }
    int bit_depth() const { return bit_depth_; }

    const std::vector<std::uint16_t>& raw_voxels() const { return raw_; }
    const std::vector<float>& values() const { return norm_; }

    std::size_t index(int z, int y, int x) const {
        return (std::size_t(z) * shape_.y + y) * shape_.x + x;
    }
    std::uint16_t raw_at(int z, int y, int x) const { return raw_[index(z, y, x)]; }
    float at(int z, int y, int x) const { return norm_[index(z, y, x)]; }

private:
    static void check_shape(Shape3 s) {
        if (s.z < 1 || s.y < 1 || s.x < 1)
            throw Error("volume shape components must be >= 1, got " + s.str());
    }

    Shape3 shape_;
    std::vector<std::uint16_t> raw_;
    std::vector<float> norm_;
    int bit_depth_ = 16;
    double voxel_size_um_ = 3.2;
    DtypeClass dtype_ = DtypeClass::RawInteger;
};

// Binary 3D grid aligned to a VolumeStack. Values are exactly 0 or 1.
class MaskVolume {
public:
    MaskVolume() = default;
    MaskVolume(Shape3 shape, std::vector<std::uint8_t> voxels)
        : shape_(shape), voxels_(std::move(voxels)) {
        if (shape.z < 1 || shape.y < 1 || shape.x < 1)
            throw Error("mask shape components must be >= 1, got " + shape.str());
        if (voxels_.size() != shape.voxels())
            throw ShapeMismatchError("mask voxel count vs shape " + shape.str());
        for (auto v : voxels_)
            if (v > 1) throw Error("mask voxels must be 0 or 1");
    }

    static MaskVolume zeros(Shape3 shape) {
        return MaskVolume(shape, std::vector<std::uint8_t>(shape.voxels(), 0));
    }

    Shape3 shape() const { return shape_; }
    const std::vector<std::uint8_t>& voxels() const { return voxels_; }
    std::vector<std::uint8_t>& voxels() { return voxels_; }

    std::size_t index(int z, int y, int x) const {
        return (std::size_t(z) * shape_.y + y) * shape_.x + x;
    }
    std::uint8_t at(int z, int y, int x) const { return voxels_[index(z, y, x)]; }
    void set(int z, int y, int x, std::uint8_t v) { voxels_[index(z, y, x)] = v; }

    std::size_t foreground_count() const {
        std::size_t n = 0;
        for (auto v : voxels_) n += v;
        return n;
    }

private:
    Shape3 shape_;
    std::vector<std::uint8_t> voxels_;
};

inline void require_same_shape(Shape3 a, Shape3 b, const char* what) {
    if (!(a == b))
        throw ShapeMismatchError(std::string(what) + ": " + a.str() + " vs " + b.str());
}

}  // namespace ctseg
