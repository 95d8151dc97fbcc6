#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "ctseg/errors.hpp"
#include "ctseg/manifest.hpp"

namespace ctseg {

// Group-k-fold assignment: every subject lands in exactly one fold, and per
// histopathological grade the subject counts across folds differ by at most 1.
struct FoldAssignment {
    int k = 5;
    unsigned seed = 0;
    std::map<std::string, int> subject_fold;

    int fold_of(const std::string& subject_id) const {
        auto it = subject_fold.find(subject_id);
        if (it == subject_fold.end())
            throw Error("subject without fold assignment: " + subject_id);
        return it->second;
    }
};

// Subject-level grade for stratification: majority grade over the subject's
// samples, ties broken toward the higher grade.
inline int subject_grade(const std::vector<int>& grades) {
    std::map<int, int> count;
    for (int g : grades) ++count[g];
    int best = -1, best_n = 0;
    for (auto [g, n] : count)
        if (n > best_n || (n == best_n && g > best)) {
            best = g;
            best_n = n;
        }
    return best;
}

// Shuffles subjects within each grade stratum, then deals them round-robin
// with a rolling fold index carried across strata. The rolling index keeps
// overall fold sizes balanced while the per-stratum contiguity keeps the
// per-grade imbalance at <= 1.
inline FoldAssignment group_stratified_kfold(const std::vector<SampleRecord>& records,
                                             int k = 5, unsigned seed = 0) {
    if (k < 2) throw Error("k must be >= 2");
    std::map<std::string, std::vector<int>> grades_by_subject;
    for (const auto& r : records) grades_by_subject[r.subject_id].push_back(r.grade);
    if (int(grades_by_subject.size()) < k)
        throw Error("fewer subjects (" + std::to_string(grades_by_subject.size()) +
                    ") than folds (" + std::to_string(k) + ")");

    std::map<int, std::vector<std::string>> strata;  // grade -> subjects (sorted)
    for (const auto& [subject, grades] : grades_by_subject)
        strata[subject_grade(grades)].push_back(subject);

    FoldAssignment fa;
    fa.k = k;
    fa.seed = seed;
    std::mt19937 rng(seed);
    int next_fold = 0;
    for (auto& [grade, subjects] : strata) {
        std::shuffle(subjects.begin(), subjects.end(), rng);
        for (const auto& s : subjects) {
            fa.subject_fold[s] = next_fold;
            next_fold = (next_fold + 1) % k;
        }
    }
    return fa;
}

// Validation samples are the fold's subjects; training is everything else.
inline std::pair<std::vector<SampleRecord>, std::vector<SampleRecord>> fold_views(
    const std::vector<SampleRecord>& records, const FoldAssignment& fa,
    int fold_index) {
    if (fold_index < 0 || fold_index >= fa.k)
        throw Error("fold index " + std::to_string(fold_index) + " out of range [0," +
                    std::to_string(fa.k - 1) + "]");
    std::vector<SampleRecord> train, val;
    for (const auto& r : records) {
        if (fa.fold_of(r.subject_id) == fold_index) val.push_back(r);
        else train.push_back(r);
    }
    return {std::move(train), std::move(val)};
}

inline void save_fold_assignment(const FoldAssignment& fa,
                                 const std::filesystem::path& file) {
    std::ofstream out(file);
    if (!out) throw UnwritablePathError(file.string());
    out << "subject_id,fold\n";
    for (const auto& [subject, fold] : fa.subject_fold)
        out << subject << ',' << fold << '\n';
}

inline FoldAssignment load_fold_assignment(const std::filesystem::path& file, int k) {
    std::ifstream in(file);
    if (!in) throw Error("cannot open fold assignment: " + file.string());
    FoldAssignment fa;
    fa.k = k;
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto comma = line.find(',');
        if (comma == std::string::npos)
            throw Error("bad fold assignment line: " + line);
        std::string subject = line.substr(0, comma);
        int fold = std::stoi(line.substr(comma + 1));
        if (fold < 0 || fold >= k) throw Error("fold out of range in: " + line);
        fa.subject_fold[subject] = fold;
    }
    return fa;
}

}  // namespace ctseg
