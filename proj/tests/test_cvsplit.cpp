#include <catch2/catch_amalgamated.hpp>

#include <map>
#include <random>
#include <set>

#include "ctseg/cvsplit.hpp"
#include "support/tempdir.hpp"

using namespace ctseg;
using testsupport::TempDir;

namespace {

std::vector<SampleRecord> make_manifest(int subjects, std::mt19937_64& rng) {
    std::uniform_int_distribution<int> samples_per(1, 4);
    std::uniform_int_distribution<int> grade(0, 3);
    std::vector<SampleRecord> recs;
    for (int s = 0; s < subjects; ++s) {
        const int n = samples_per(rng);
        for (int i = 0; i < n; ++i) {
            SampleRecord r;
            r.subject_id = "P" + std::to_string(s);
            r.sample_id = r.subject_id + "_" + std::to_string(i);
            r.grade = grade(rng);
            recs.push_back(r);
        }
    }
    return recs;
}

// The three split invariants: subjects partitioned over folds, every fold
// nonempty-consistent with k, and per-grade subject counts within one.
void check_invariants(const std::vector<SampleRecord>& recs, const FoldAssignment& fa) {
    std::map<std::string, int> subject_grades;  // subject -> stratum grade
    std::map<std::string, std::vector<int>> grades;
    for (const auto& r : recs) grades[r.subject_id].push_back(r.grade);
    for (auto& [s, g] : grades) subject_grades[s] = subject_grade(g);

    // every subject assigned exactly once, folds in range
    REQUIRE(fa.subject_fold.size() == grades.size());
    for (const auto& [subject, fold] : fa.subject_fold) {
        REQUIRE(grades.count(subject) == 1);
        REQUIRE(fold >= 0);
        REQUIRE(fold < fa.k);
    }

    // per-grade imbalance at most one subject
    std::map<int, std::map<int, int>> per_grade;  // grade -> fold -> count
    for (const auto& [subject, fold] : fa.subject_fold)
        ++per_grade[subject_grades[subject]][fold];
    for (const auto& [grade, folds] : per_grade) {
        int lo = INT_MAX, hi = 0;
        for (int f = 0; f < fa.k; ++f) {
            const auto it = folds.find(f);
            const int c = it == folds.end() ? 0 : it->second;
            lo = std::min(lo, c);
            hi = std::max(hi, c);
        }
        REQUIRE(hi - lo <= 1);
    }
}

}  // namespace

TEST_CASE("subject grade is the majority with ties to the higher grade", "[cvsplit]") {
    CHECK(subject_grade({2}) == 2);
    CHECK(subject_grade({1, 1, 3}) == 1);
    CHECK(subject_grade({0, 3}) == 3);       // tie -> higher
    CHECK(subject_grade({2, 2, 3, 3}) == 3); // tie -> higher
    CHECK(subject_grade({0, 0, 1}) == 0);
}

TEST_CASE("split satisfies its invariants over many random manifests", "[cvsplit]") {
    std::mt19937_64 rng(12345);
    std::uniform_int_distribution<int> nsubj(5, 40);
    for (int trial = 0; trial < 300; ++trial) {
        auto recs = make_manifest(nsubj(rng), rng);
        std::set<std::string> subjects;
        for (const auto& r : recs) subjects.insert(r.subject_id);
        std::uniform_int_distribution<int> kd(2, std::min<int>(5, int(subjects.size())));
        const int k = kd(rng);
        FoldAssignment fa = group_stratified_kfold(recs, k, unsigned(trial));
        check_invariants(recs, fa);
    }
}

TEST_CASE("splits are deterministic in the seed", "[cvsplit]") {
    std::mt19937_64 rng(7);
    auto recs = make_manifest(20, rng);
    FoldAssignment a = group_stratified_kfold(recs, 5, 42);
    FoldAssignment b = group_stratified_kfold(recs, 5, 42);
    REQUIRE(a.subject_fold == b.subject_fold);
    FoldAssignment c = group_stratified_kfold(recs, 5, 43);
    check_invariants(recs, c);  // different seed still valid
}

TEST_CASE("20 subjects over 5 folds gives 4 subjects per fold", "[cvsplit]") {
    std::mt19937_64 rng(8);
    auto recs = make_manifest(20, rng);
    FoldAssignment fa = group_stratified_kfold(recs, 5, 1);
    std::map<int, int> per_fold;
    for (const auto& [s, f] : fa.subject_fold) ++per_fold[f];
    for (int f = 0; f < 5; ++f) REQUIRE(per_fold[f] == 4);
}

TEST_CASE("fold views keep subjects on one side only", "[cvsplit]") {
    std::mt19937_64 rng(9);
    auto recs = make_manifest(12, rng);
    FoldAssignment fa = group_stratified_kfold(recs, 3, 5);
    std::set<std::string> seen_samples;
    for (int f = 0; f < 3; ++f) {
        auto [train, val] = fold_views(recs, fa, f);
        REQUIRE(train.size() + val.size() == recs.size());
        std::set<std::string> train_subjects, val_subjects;
        for (const auto& r : train) train_subjects.insert(r.subject_id);
        for (const auto& r : val) {
            val_subjects.insert(r.subject_id);
            REQUIRE(seen_samples.insert(r.sample_id).second);  // val sets disjoint
        }
        for (const auto& s : val_subjects) REQUIRE(train_subjects.count(s) == 0);
    }
    // the three validation sets cover the manifest
    REQUIRE(seen_samples.size() == recs.size());
    REQUIRE_THROWS_AS(fold_views(recs, fa, 3), Error);
    REQUIRE_THROWS_AS(fold_views(recs, fa, -1), Error);
}

TEST_CASE("multi-sample subjects never straddle the split", "[cvsplit]") {
    std::vector<SampleRecord> recs;
    for (int s = 0; s < 6; ++s)
        for (int i = 0; i < 3; ++i) {
            SampleRecord r;
            r.subject_id = "S" + std::to_string(s);
            r.sample_id = r.subject_id + "_" + std::to_string(i);
            r.grade = s % 2;
            recs.push_back(r);
        }
    FoldAssignment fa = group_stratified_kfold(recs, 3, 11);
    for (int f = 0; f < 3; ++f) {
        auto [train, val] = fold_views(recs, fa, f);
        // each subject's three samples travel together
        std::map<std::string, int> val_count;
        for (const auto& r : val) ++val_count[r.subject_id];
        for (const auto& [s, n] : val_count) REQUIRE(n == 3);
    }
}

TEST_CASE("split rejects degenerate requests", "[cvsplit]") {
    std::mt19937_64 rng(10);
    auto recs = make_manifest(3, rng);
    REQUIRE_THROWS_AS(group_stratified_kfold(recs, 4, 0), Error);  // k > subjects
    REQUIRE_THROWS_AS(group_stratified_kfold(recs, 1, 0), Error);  // k < 2
}

TEST_CASE("fold assignments round-trip through CSV", "[cvsplit]") {
    TempDir tmp;
    std::mt19937_64 rng(13);
    auto recs = make_manifest(10, rng);
    FoldAssignment fa = group_stratified_kfold(recs, 4, 77);
    save_fold_assignment(fa, tmp / "folds.csv");
    FoldAssignment back = load_fold_assignment(tmp / "folds.csv", 4);
    REQUIRE(back.k == 4);
    REQUIRE(back.subject_fold == fa.subject_fold);
    // unknown subject lookups fail loudly
    REQUIRE_THROWS_AS(back.fold_of("missing"), Error);
}
