#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bdae/models.hpp"
#include "bdae/phantom.hpp"
#include "bdae/preprocess.hpp"
#include "bdae/trainer.hpp"

namespace bdae {

// Minimal INI dialect shared by run configs and phantom specs: [section]
// headers, `key = value` lines, `#`/`;` comments. Sections and keys keep
// file order; duplicate keys within a section are rejected.
struct IniSection {
    std::string name;
    std::vector<std::pair<std::string, std::string>> entries;

    const std::string* find(const std::string& key) const;
};

struct IniFile {
    std::vector<IniSection> sections;

    const IniSection* find(const std::string& name) const;
};

IniFile parse_ini(const std::string& text);

// [phantom] section -> spec, unknown keys rejected, absent keys keep
// defaults. The inverse of phantom_spec_ini().
PhantomSpec phantom_spec_from_ini(const std::string& text);
PhantomSpec load_phantom_spec(const std::string& path);

struct DataConfig {
    std::string manifest;             // study manifest csv
    std::string cache_dir;            // preprocessing cache, empty = off
    std::string sequences = "fusion"; // "fusion" | "t1w" | "t2w" | "pdw"
    bool check_files = true;
    PreprocessOptions preprocess;
};

struct OutputConfig {
    std::string dir;                // run-directory root; --out overrides
    bool checkpoints = true;        // write per-fold checkpoints
};

// Union of the five config-file sections. [augment] binds into
// train.augment; cross-validation fold count lives under [train].
struct RunConfig {
    DataConfig data;
    ModelConfig model = default_model_config(FuseMode::Mode2d);
    TrainConfig train;
    int folds = 5;
    OutputConfig output;
};

// Parse/serialize. Serialization is canonical: fixed key order, so equal
// configs produce identical text and therefore identical hashes.
RunConfig run_config_from_ini(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string run_config_ini(const RunConfig& config);

// CLI override: dotted "section.key" with the same names and value syntax
// as the file ("train.lr", "data.sequences", "model.kind", ...).
void apply_override(RunConfig& config, const std::string& dotted_key, const std::string& value);

// fnv1a over the canonical serialization, the run identity used for run
// directories and the printed provenance line.
uint64_t config_hash(const RunConfig& config);
std::string config_hash_hex(const RunConfig& config);

// Semantic checks beyond parsing: manifest present on disk, sequence name
// valid, model/train configs self-consistent.
void validate_run_config(const RunConfig& config);

}  // namespace bdae
