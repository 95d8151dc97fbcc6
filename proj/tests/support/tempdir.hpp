#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include <unistd.h>

namespace testsupport {

// Scoped scratch directory under the system temp root; removed on scope exit.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "ctseg") {
        std::string tmpl =
            (std::filesystem::temp_directory_path() / (tag + ".XXXXXX")).string();
        if (!mkdtemp(tmpl.data()))
            throw std::runtime_error("mkdtemp failed for " + tmpl);
        path_ = tmpl;
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& leaf) const {
        return path_ / leaf;
    }

private:
    std::filesystem::path path_;
};

}  // namespace testsupport
