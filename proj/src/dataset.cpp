#include "bdae/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bdae/rng.hpp"

namespace bdae {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    fields.push_back(cur);
    for (auto& f : fields) {
        size_t b = f.find_first_not_of(" \t");
        size_t e = f.find_last_not_of(" \t");
        f = b == std::string::npos ? "" : f.substr(b, e - b + 1);
    }
    return fields;
}

}  // namespace

int64_t StudyTable::n_subjects() const {
    std::set<std::string> ids;
    for (const auto& s : studies) ids.insert(s.subject_id);
    return static_cast<int64_t>(ids.size());
}

std::vector<std::string> StudyTable::subject_ids() const {
    std::set<std::string> ids;
    for (const auto& s : studies) ids.insert(s.subject_id);
    return {ids.begin(), ids.end()};
}

int StudyTable::subject_stratum(const std::string& subject_id) const {
    const StudyRecord* earliest = nullptr;
    for (const auto& s : studies)
        if (s.subject_id == subject_id)
            if (!earliest || s.session_id < earliest->session_id) earliest = &s;
    if (!earliest) throw ValueError("unknown subject '" + subject_id + "'");
    return earliest->age_class;
}

StudyTable load_manifest(const std::string& path, bool check_files) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open manifest '" + path + "'");

    std::string line;
    if (!std::getline(in, line)) throw ValueError("manifest '" + path + "': no records");
    auto header = split_csv_line(line);
    const std::vector<std::string> expect{"subject_id", "session_id", "age_class",
                                          "t1w",        "t2w",        "pdw"};
    if (header != expect)
        throw ValueError("manifest '" + path +
                         "': header must be subject_id,session_id,age_class,t1w,t2w,pdw");

    StudyTable table;
    std::set<std::pair<std::string, std::string>> seen;
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        auto f = split_csv_line(line);
        auto where = [&] { return "manifest '" + path + "' row " + std::to_string(row); };
        if (f.size() != 6) throw ValueError(where() + ": expected 6 fields, got " + std::to_string(f.size()));
        StudyRecord rec;
        rec.subject_id = f[0];
        rec.session_id = f[1];
        if (rec.subject_id.empty() || rec.session_id.empty())
            throw ValueError(where() + ": empty subject or session id");
        try {
            size_t used = 0;
            rec.age_class = std::stoi(f[2], &used);
            if (used != f[2].size()) throw std::invalid_argument(f[2]);
        } catch (const std::exception&) {
            throw ValueError(where() + ": age_class '" + f[2] + "' is not an integer");
        }
        if (rec.age_class < 0 || rec.age_class >= kNumClasses)
            throw ValueError(where() + ": age_class " + std::to_string(rec.age_class) +
                             " outside 0..3");
        rec.t1w_path = f[3];
        rec.t2w_path = f[4];
        rec.pdw_path = f[5];
        if (rec.t1w_path.empty() || rec.t2w_path.empty() || rec.pdw_path.empty())
            throw ValueError(where() + ": all three sequence paths are required");
        // Relative image paths are taken relative to the manifest location.
        const auto base = std::filesystem::path(path).parent_path();
        for (std::string* p : {&rec.t1w_path, &rec.t2w_path, &rec.pdw_path})
            if (!std::filesystem::path(*p).is_absolute()) *p = (base / *p).string();
        if (!seen.insert({rec.subject_id, rec.session_id}).second)
            throw ValueError(where() + ": duplicate study (" + rec.subject_id + ", " +
                             rec.session_id + ")");
        if (check_files)
            for (const std::string* p : {&rec.t1w_path, &rec.t2w_path, &rec.pdw_path})
                if (!std::filesystem::exists(*p))
                    throw IoError(where() + " (" + rec.subject_id + ", " + rec.session_id +
                                  "): file not found '" + *p + "'");
        table.studies.push_back(std::move(rec));
    }
    if (table.studies.empty()) throw ValueError("manifest '" + path + "': no records");
    return table;
}

CohortSummary cohort_summary(const StudyTable& table) {
    CohortSummary sum;
    sum.total_studies = static_cast<int>(table.n_studies());
    for (const auto& s : table.studies) sum.study_counts[static_cast<size_t>(s.age_class)]++;

    std::map<std::string, std::set<int>> classes_of;
    for (const auto& s : table.studies) classes_of[s.subject_id].insert(s.age_class);
    for (const auto& [id, classes] : classes_of) {
        sum.subject_counts[static_cast<size_t>(table.subject_stratum(id))]++;
        if (classes.size() > 1) sum.multi_class_subjects++;
    }
    sum.total_subjects = static_cast<int>(classes_of.size());
    return sum;
}

FoldSplit make_folds(const StudyTable& table, int k, uint64_t seed) {
    if (k < 2) throw ValueError("make_folds: k must be >= 2");
    if (table.studies.empty()) throw ValueError("make_folds: empty study table");

    std::array<std::vector<std::string>, kNumClasses> strata;
    for (const auto& id : table.subject_ids())
        strata[static_cast<size_t>(table.subject_stratum(id))].push_back(id);
    for (int c = 0; c < kNumClasses; ++c)
        if (!strata[static_cast<size_t>(c)].empty() &&
            strata[static_cast<size_t>(c)].size() < static_cast<size_t>(k))
            throw ValueError("make_folds: class " + std::to_string(c) + " has only " +
                             std::to_string(strata[static_cast<size_t>(c)].size()) +
                             " subjects, need at least " + std::to_string(k));

    FoldSplit split;
    split.k = k;
    split.seed = seed;
    split.val_subjects.assign(static_cast<size_t>(k), {});
    for (int c = 0; c < kNumClasses; ++c) {
        auto& subjects = strata[static_cast<size_t>(c)];
        RngStream rng(mix_seed(mix_seed(seed, 0x666f6c64ULL), static_cast<uint64_t>(c)));
        rng.shuffle(subjects);
        for (size_t i = 0; i < subjects.size(); ++i)
            split.val_subjects[i % static_cast<size_t>(k)].push_back(subjects[i]);
    }
    for (auto& fold : split.val_subjects) std::sort(fold.begin(), fold.end());

    split.train_studies.assign(static_cast<size_t>(k), {});
    split.val_studies.assign(static_cast<size_t>(k), {});
    for (int f = 0; f < k; ++f) {
        const auto& val = split.val_subjects[static_cast<size_t>(f)];
        for (int64_t i = 0; i < table.n_studies(); ++i) {
            bool in_val = std::binary_search(val.begin(), val.end(),
                                             table.studies[static_cast<size_t>(i)].subject_id);
            (in_val ? split.val_studies : split.train_studies)[static_cast<size_t>(f)].push_back(i);
        }
    }
    return split;
}

std::string fold_split_json(const FoldSplit& split, const StudyTable& table) {
    nlohmann::ordered_json root;
    root["k"] = split.k;
    root["seed"] = split.seed;
    root["folds"] = nlohmann::ordered_json::array();
    for (int f = 0; f < split.k; ++f) {
        nlohmann::ordered_json fold;
        fold["fold"] = f;
        fold["val_subjects"] = split.val_subjects[static_cast<size_t>(f)];
        auto studies = nlohmann::ordered_json::array();
        for (int64_t i : split.val_studies[static_cast<size_t>(f)]) {
            const auto& s = table.studies[static_cast<size_t>(i)];
            studies.push_back({{"subject", s.subject_id},
                               {"session", s.session_id},
                               {"age_class", s.age_class}});
        }
        fold["val_studies"] = std::move(studies);
        fold["train_size"] = split.train_studies[static_cast<size_t>(f)].size();
        fold["val_size"] = split.val_studies[static_cast<size_t>(f)].size();
        root["folds"].push_back(std::move(fold));
    }
    return root.dump(2) + "\n";
}

}  // namespace bdae
