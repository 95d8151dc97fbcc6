#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "ctseg/errors.hpp"
#include "ctseg/volume.hpp"

namespace ctseg {

namespace detail {

// Longest run of digits anywhere in the stem; files without digits sort first
// by name. Robust to unpadded numbering like slice_2.png vs slice_10.png.
inline long long numeric_key(const std::string& stem) {
    long long best = -1;
    std::size_t best_len = 0;
    std::size_t i = 0;
    while (i < stem.size()) {
        if (std::isdigit(static_cast<unsigned char>(stem[i]))) {
            std::size_t j = i;
            while (j < stem.size() && std::isdigit(static_cast<unsigned char>(stem[j]))) ++j;
            if (j - i >= best_len) {
                best_len = j - i;
                best = std::stoll(stem.substr(i, std::min<std::size_t>(j - i, 18)));
            }
            i = j;
        } else {
            ++i;
        }
    }
    return best;
}

inline bool is_slice_file(const std::filesystem::path& p) {
    auto ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    return ext == ".png" || ext == ".pgm" || ext == ".tif" || ext == ".tiff" ||
           ext == ".bmp";
}

}  // namespace detail

// Lists slice files of a stack directory in explicit numeric order.
inline std::vector<std::filesystem::path> list_slice_files(
    const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw MissingDirectoryError(dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && detail::is_slice_file(e.path()))
            files.push_back(e.path());
    std::sort(files.begin(), files.end(),
              [](const fs::path& a, const fs::path& b) {
                  long long ka = detail::numeric_key(a.stem().string());
                  long long kb = detail::numeric_key(b.stem().string());
                  if (ka != kb) return ka < kb;
                  return a.filename().string() < b.filename().string();
              });
    return files;
}

// Reads a directory of lossless grayscale slices into a raw-integer volume.
// Z order follows the numeric sort of the filenames, not the listing order.
inline VolumeStack load_stack(const std::filesystem::path& dir,
                              double expected_voxel_um = 3.2) {
    auto files = list_slice_files(dir);
    if (files.empty()) throw EmptyStackError(dir.string());

    std::vector<std::uint16_t> voxels;
    int width = -1, height = -1, bit_depth = -1;
    int z = 0;
    for (const auto& f : files) {
        cv::Mat img = cv::imread(f.string(), cv::IMREAD_UNCHANGED);
        if (img.empty()) throw EmptyStackError("unreadable slice " + f.string());
        if (img.channels() != 1)
            throw UnsupportedBitDepthError(f.string() + " is not single-channel");
        int depth;
        if (img.depth() == CV_8U) depth = 8;
        else if (img.depth() == CV_16U) depth = 16;
        else throw UnsupportedBitDepthError(f.string());

        if (width < 0) {
            width = img.cols;
            height = img.rows;
            bit_depth = depth;
            voxels.reserve(std::size_t(files.size()) * width * height);
        } else if (img.cols != width || img.rows != height) {
            throw MixedSliceDimensionsError(f.string());
        } else if (depth != bit_depth) {
            throw UnsupportedBitDepthError("mixed bit depths in " + dir.string());
        }

        for (int r = 0; r < height; ++r) {
            if (depth == 8) {
                const std::uint8_t* row = img.ptr<std::uint8_t>(r);
                voxels.insert(voxels.end(), row, row + width);
            } else {
                const std::uint16_t* row = img.ptr<std::uint16_t>(r);
                voxels.insert(voxels.end(), row, row + width);
            }
        }
        ++z;
    }
    return VolumeStack::raw({z, height, width}, std::move(voxels), bit_depth,
                            expected_voxel_um);
}

// Full-scale fixed-point conversion for reloading stacks that were written
// from normalized volumes (16-bit, scaled by 65535). Not min-max: the stored
// scale is part of the format and must not be re-fit to the data.
inline VolumeStack to_normalized(const VolumeStack& vol) {
    if (vol.dtype_class() == DtypeClass::NormalizedFloat) return vol;
    const float scale = 1.0f / float((1u << vol.bit_depth()) - 1);
    const auto& raw = vol.raw_voxels();
    std::vector<float> v(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) v[i] = float(raw[i]) * scale;
    return VolumeStack::normalized(vol.shape(), std::move(v), vol.voxel_size_um());
}

inline VolumeStack load_normalized_stack(const std::filesystem::path& dir,
                                         double expected_voxel_um = 3.2) {
    return to_normalized(load_stack(dir, expected_voxel_um));
}

// Masks are stored as 0/255 in 8-bit files; anything >= 128 reads back as 1.
inline MaskVolume load_mask_stack(const std::filesystem::path& dir) {
    VolumeStack v = load_stack(dir);
    std::vector<std::uint8_t> m(v.shape().voxels());
    const std::uint16_t threshold = v.bit_depth() == 8 ? 128 : 32768;
    const auto& raw = v.raw_voxels();
    for (std::size_t i = 0; i < raw.size(); ++i) m[i] = raw[i] >= threshold ? 1 : 0;
    return MaskVolume(v.shape(), std::move(m));
}

namespace detail {

inline void write_slice(const cv::Mat& img, const std::filesystem::path& file) {
    if (!cv::imwrite(file.string(), img)) throw UnwritablePathError(file.string());
}

inline std::filesystem::path slice_name(const std::filesystem::path& dir, int z) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%06d.png", z);
    return dir / buf;
}

inline void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir))
        throw UnwritablePathError(dir.string());
}

}  // namespace detail

// Writes Z slices as zero-padded PNGs. Integer volumes round-trip bit-exactly;
// normalized floats are scaled by 65535 (round half up) into 16-bit files.
inline void save_stack(const VolumeStack& vol, const std::filesystem::path& dir) {
    detail::ensure_dir(dir);
    const Shape3 s = vol.shape();
    for (int z = 0; z < s.z; ++z) {
        cv::Mat img;
        if (vol.dtype_class() == DtypeClass::RawInteger) {
            if (vol.bit_depth() == 8) {
                img.create(s.y, s.x, CV_8UC1);
                for (int r = 0; r < s.y; ++r) {
                    auto* row = img.ptr<std::uint8_t>(r);
                    for (int c = 0; c < s.x; ++c)
                        row[c] = static_cast<std::uint8_t>(vol.raw_at(z, r, c));
                }
            } else {
                img.create(s.y, s.x, CV_16UC1);
                for (int r = 0; r < s.y; ++r) {
                    auto* row = img.ptr<std::uint16_t>(r);
                    for (int c = 0; c < s.x; ++c) row[c] = vol.raw_at(z, r, c);
                }
            }
        } else {
            img.create(s.y, s.x, CV_16UC1);
            for (int r = 0; r < s.y; ++r) {
                auto* row = img.ptr<std::uint16_t>(r);
                for (int c = 0; c < s.x; ++c) {
                    double v = std::floor(double(vol.at(z, r, c)) * 65535.0 + 0.5);
                    row[c] = static_cast<std::uint16_t>(std::clamp(v, 0.0, 65535.0));
                }
            }
        }
        detail::write_slice(img, detail::slice_name(dir, z));
    }
}

// Masks go out as 0/255 so any viewer shows them and rescaling re-encoders
// cannot destroy the labels.
inline void save_stack(const MaskVolume& mask, const std::filesystem::path& dir) {
    detail::ensure_dir(dir);
    const Shape3 s = mask.shape();
    for (int z = 0; z < s.z; ++z) {
        cv::Mat img(s.y, s.x, CV_8UC1);
        for (int r = 0; r < s.y; ++r) {
            auto* row = img.ptr<std::uint8_t>(r);
            for (int c = 0; c < s.x; ++c) row[c] = mask.at(z, r, c) ? 255 : 0;
        }
        detail::write_slice(img, detail::slice_name(dir, z));
    }
}

// Probability volumes are persisted the same way as normalized intensity
// stacks: 16-bit, scaled by 65535.
inline void save_probability_stack(const std::vector<float>& probs, Shape3 shape,
                                   const std::filesystem::path& dir,
                                   double voxel_um = 3.2) {
    save_stack(VolumeStack::normalized(shape, probs, voxel_um), dir);
}

}  // namespace ctseg
