#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "bdae/errors.hpp"

namespace bdae {

constexpr int kNumClasses = 4;

inline const char* age_class_name(int c) {
    static const char* names[kNumClasses] = {"newborn", "1yr", "2yr", "3yr"};
    if (c < 0 || c >= kNumClasses) return "?";
    return names[c];
}

// One imaging session: three co-registered sequences of one subject.
struct StudyRecord {
    std::string subject_id;
    std::string session_id;
    int age_class = 0;  // 0=newborn, 1=1yr, 2=2yr, 3=3yr
    std::string t1w_path;
    std::string t2w_path;
    std::string pdw_path;
};

struct StudyTable {
    std::vector<StudyRecord> studies;

    int64_t n_studies() const { return static_cast<int64_t>(studies.size()); }
    int64_t n_subjects() const;
    // Unique subject ids in first-appearance-stable sorted order.
    std::vector<std::string> subject_ids() const;
    // Stratum of a subject: the age class of its earliest session (sessions
    // ordered by session id). Equals the class itself for the common case of
    // a subject scanned within one cohort.
    int subject_stratum(const std::string& subject_id) const;
};

struct CohortSummary {
    std::array<int, kNumClasses> study_counts{};
    std::array<int, kNumClasses> subject_counts{};  // by subject stratum
    int multi_class_subjects = 0;  // subjects whose sessions span cohorts
    int total_studies = 0;
    int total_subjects = 0;
};

// Per-fold split by subject: a subject's studies are all-train or all-val.
struct FoldSplit {
    int k = 0;
    uint64_t seed = 0;
    std::vector<std::vector<std::string>> val_subjects;   // per fold, sorted
    std::vector<std::vector<int64_t>> train_studies;      // row indices
    std::vector<std::vector<int64_t>> val_studies;
};

// Loads and validates a manifest CSV with header
// subject_id,session_id,age_class,t1w,t2w,pdw. With check_files set, every
// referenced path must exist (disable for synthetic in-memory experiments).
StudyTable load_manifest(const std::string& path, bool check_files = true);

CohortSummary cohort_summary(const StudyTable& table);

// Stratified subject-exclusive k-fold assignment: subjects are grouped per
// stratum, shuffled by the seed, and dealt round-robin into folds.
FoldSplit make_folds(const StudyTable& table, int k, uint64_t seed);

// Audit export: the exact per-fold subject and study assignment.
std::string fold_split_json(const FoldSplit& split, const StudyTable& table);

}  // namespace bdae
