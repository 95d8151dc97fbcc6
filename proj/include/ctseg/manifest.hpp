#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ctseg/errors.hpp"

namespace ctseg {

// Per-sample identity row from the dataset manifest.
struct SampleRecord {
    std::string sample_id;
    std::string subject_id;   // grouping key for cross-validation
    int grade = 0;            // calcified-zone histopathological grade
    std::filesystem::path volume_path;
    std::filesystem::path mask_path;
};

// DATA_ROOT (or an explicit root) prefixes relative dataset paths.
inline std::filesystem::path resolve_data_path(const std::filesystem::path& p,
                                               const std::filesystem::path& root = {}) {
    if (p.is_absolute()) return p;
    if (!root.empty()) return root / p;
    if (const char* env = std::getenv("DATA_ROOT"); env && *env)
        return std::filesystem::path(env) / p;
    return p;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::stringstream ss(line);
    while (std::getline(ss, field, ',')) {
        // trim surrounding whitespace
        auto b = field.find_first_not_of(" \t\r");
        auto e = field.find_last_not_of(" \t\r");
        out.push_back(b == std::string::npos ? "" : field.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') out.push_back("");
    return out;
}

}  // namespace detail

// Loads and validates the comma-delimited manifest. Required header columns:
// sample_id, subject_id, grade, volume_path, mask_path (any order).
inline std::vector<SampleRecord> load_manifest(const std::filesystem::path& file,
                                               const std::filesystem::path& data_root = {}) {
    std::ifstream in(file);
    if (!in) throw Error("cannot open manifest: " + file.string());

    std::string line;
    if (!std::getline(in, line)) throw MissingColumnError("sample_id (empty file)");
    auto header = detail::split_csv_line(line);
    std::map<std::string, int> col;
    for (int i = 0; i < int(header.size()); ++i) col[header[i]] = i;
    for (const char* required :
         {"sample_id", "subject_id", "grade", "volume_path", "mask_path"})
        if (!col.count(required)) throw MissingColumnError(required);

    std::vector<SampleRecord> records;
    std::set<std::string> seen;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto fields = detail::split_csv_line(line);
        if (int(fields.size()) < int(header.size()))
            throw Error("manifest line " + std::to_string(line_no) + ": too few fields");
        SampleRecord r;
        r.sample_id = fields[col["sample_id"]];
        r.subject_id = fields[col["subject_id"]];
        const std::string& g = fields[col["grade"]];
        try {
            std::size_t pos = 0;
            int grade = std::stoi(g, &pos);
            if (pos != g.size() || grade < 0) throw std::invalid_argument(g);
            r.grade = grade;
        } catch (const std::exception&) {
            throw BadGradeError("'" + g + "' at line " + std::to_string(line_no));
        }
        r.volume_path = resolve_data_path(fields[col["volume_path"]], data_root);
        r.mask_path = resolve_data_path(fields[col["mask_path"]], data_root);
        if (!seen.insert(r.sample_id).second) throw DuplicateSampleError(r.sample_id);
        records.push_back(std::move(r));
    }
    return records;
}

inline void save_manifest(const std::vector<SampleRecord>& records,
                          const std::filesystem::path& file) {
    std::ofstream out(file);
    if (!out) throw UnwritablePathError(file.string());
    out << "sample_id,subject_id,grade,volume_path,mask_path\n";
    for (const auto& r : records)
        out << r.sample_id << ',' << r.subject_id << ',' << r.grade << ','
            << r.volume_path.string() << ',' << r.mask_path.string() << '\n';
}

}  // namespace ctseg
