#pragma once

#include <stdexcept>
#include <string>

namespace ctseg {

// Base for all library failures so callers can catch pipeline errors wholesale.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error("config: " + msg) {}
};

// volume / stack I/O
struct MissingDirectoryError : Error {
    explicit MissingDirectoryError(const std::string& dir)
        : Error("missing directory: " + dir) {}
};
struct MixedSliceDimensionsError : Error {
    explicit MixedSliceDimensionsError(const std::string& msg)
        : Error("mixed slice dimensions: " + msg) {}
};
struct UnsupportedBitDepthError : Error {
    explicit UnsupportedBitDepthError(const std::string& msg)
        : Error("unsupported bit depth: " + msg) {}
};
struct EmptyStackError : Error {
    explicit EmptyStackError(const std::string& dir)
        : Error("no readable slices in: " + dir) {}
};
struct UnwritablePathError : Error {
    explicit UnwritablePathError(const std::string& path)
        : Error("unwritable path: " + path) {}
};

// manifest
struct MissingColumnError : Error {
    explicit MissingColumnError(const std::string& col)
        : Error("manifest missing column: " + col) {}
};
struct DuplicateSampleError : Error {
    explicit DuplicateSampleError(const std::string& id)
        : Error("duplicate sample_id: " + id) {}
};
struct BadGradeError : Error {
    explicit BadGradeError(const std::string& msg)
        : Error("unparseable grade: " + msg) {}
};

// preprocessing
struct EmptySampleError : Error {
    explicit EmptySampleError(const std::string& msg)
        : Error("empty sample: " + msg) {}
};

struct ShapeMismatchError : Error {
    explicit ShapeMismatchError(const std::string& msg)
        : Error("shape mismatch: " + msg) {}
};

// training
struct NonFiniteLossError : Error {
    explicit NonFiniteLossError(const std::string& msg)
        : Error("non-finite loss: " + msg) {}
};

}  // namespace ctseg
