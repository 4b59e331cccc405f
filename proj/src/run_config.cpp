#include "bdae/run_config.hpp"

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bdae/errors.hpp"
#include "bdae/rng.hpp"

namespace bdae {

namespace {

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

std::vector<std::string> split_ws(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string tok;
    while (in >> tok) out.push_back(tok);
    return out;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& want) {
    throw ValueError("config: " + key + " = '" + value + "' is not " + want);
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "on" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "off" || value == "no") return false;
    bad_value(key, value, "a boolean (true/false)");
}

int64_t parse_int(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        int64_t v = std::stoll(value, &used);
        if (used == value.size()) return v;
    } catch (const std::exception&) {
    }
    bad_value(key, value, "an integer");
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        size_t used = 0;
        double v = std::stod(value, &used);
        if (used == value.size()) return v;
    } catch (const std::exception&) {
    }
    bad_value(key, value, "a number");
}

std::array<int64_t, 3> parse_int3(const std::string& key, const std::string& value) {
    auto toks = split_ws(value);
    if (toks.size() != 3) bad_value(key, value, "three integers");
    return {parse_int(key, toks[0]), parse_int(key, toks[1]), parse_int(key, toks[2])};
}

std::array<double, 3> parse_double3(const std::string& key, const std::string& value) {
    auto toks = split_ws(value);
    if (toks.size() != 3) bad_value(key, value, "three numbers");
    return {parse_double(key, toks[0]), parse_double(key, toks[1]), parse_double(key, toks[2])};
}

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
    std::vector<int> out;
    for (const auto& tok : split_ws(value)) out.push_back(static_cast<int>(parse_int(key, tok)));
    if (out.empty()) bad_value(key, value, "a list of integers");
    return out;
}

std::vector<double> parse_double_list(const std::string& key, const std::string& value) {
    std::vector<double> out;
    for (const auto& tok : split_ws(value)) out.push_back(parse_double(key, tok));
    if (out.empty()) bad_value(key, value, "a list of numbers");
    return out;
}

std::vector<bool> parse_bool_list(const std::string& key, const std::string& value) {
    std::vector<bool> out;
    for (const auto& tok : split_ws(value)) out.push_back(parse_bool(key, tok));
    if (out.empty()) bad_value(key, value, "a list of booleans");
    return out;
}

// Shortest decimal text that parses back to the same double, so the
// effective config both reads naturally and round-trips exactly.
std::string fmt_double(double v) {
    char buf[40];
    for (int prec = 6; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

std::string fmt_bool(bool v) { return v ? "true" : "false"; }

template <typename T, size_t N>
std::string fmt_triple(const std::array<T, N>& a) {
    std::string out;
    for (size_t i = 0; i < N; ++i) {
        if (i) out += ' ';
        if constexpr (std::is_integral_v<T>)
            out += std::to_string(a[i]);
        else
            out += fmt_double(a[i]);
    }
    return out;
}

}  // namespace

const std::string* IniSection::find(const std::string& key) const {
    for (const auto& [k, v] : entries)
        if (k == key) return &v;
    return nullptr;
}

const IniSection* IniFile::find(const std::string& name) const {
    for (const auto& s : sections)
        if (s.name == name) return &s;
    return nullptr;
}

IniFile parse_ini(const std::string& text) {
    IniFile file;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        std::string line = trim(raw);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3)
                throw ValueError("config line " + std::to_string(lineno) +
                                 ": malformed section header '" + line + "'");
            std::string name = trim(line.substr(1, line.size() - 2));
            if (file.find(name))
                throw ValueError("config line " + std::to_string(lineno) + ": duplicate section [" +
                                 name + "]");
            file.sections.push_back({name, {}});
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ValueError("config line " + std::to_string(lineno) + ": expected 'key = value', got '" +
                             line + "'");
        if (file.sections.empty())
            throw ValueError("config line " + std::to_string(lineno) + ": key before any [section]");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ValueError("config line " + std::to_string(lineno) + ": empty key");
        if (file.sections.back().find(key))
            throw ValueError("config line " + std::to_string(lineno) + ": duplicate key '" + key +
                             "' in [" + file.sections.back().name + "]");
        file.sections.back().entries.emplace_back(key, value);
    }
    return file;
}

// ---------------------------------------------------------------------------
// Phantom spec binding
// ---------------------------------------------------------------------------

PhantomSpec phantom_spec_from_ini(const std::string& text) {
    IniFile file = parse_ini(text);
    PhantomSpec spec;
    const IniSection* sec = file.find("phantom");
    if (!sec) throw ValueError("phantom spec: missing [phantom] section");
    for (const auto& s : file.sections)
        if (s.name != "phantom")
            throw ValueError("phantom spec: unknown section [" + s.name + "]");
    for (const auto& [key, value] : sec->entries) {
        std::string full = "phantom." + key;
        if (key == "extents") spec.extents = parse_int3(full, value);
        else if (key == "head_radii") spec.head_radii = parse_double3(full, value);
        else if (key == "core_radius_base") spec.core_radius_base = parse_double(full, value);
        else if (key == "core_radius_step") spec.core_radius_step = parse_double(full, value);
        else if (key == "base_intensity") spec.base_intensity = parse_double(full, value);
        else if (key == "core_contrast") spec.core_contrast = parse_double(full, value);
        else if (key == "class_amplitude") spec.class_amplitude = parse_double(full, value);
        else if (key == "sequence_weights") spec.sequence_weights = parse_double3(full, value);
        else if (key == "sequence_polarity") spec.sequence_polarity = parse_double3(full, value);
        else if (key == "contrast_jitter") spec.contrast_jitter = parse_double(full, value);
        else if (key == "noise_sigma") spec.noise_sigma = parse_double(full, value);
        else if (key == "center_jitter") spec.center_jitter = parse_double(full, value);
        else if (key == "radius_jitter") spec.radius_jitter = parse_double(full, value);
        else throw ValueError("phantom spec: unknown key '" + key + "'");
    }
    validate_phantom_spec(spec);
    return spec;
}

PhantomSpec load_phantom_spec(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("phantom spec: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return phantom_spec_from_ini(buf.str());
    } catch (const ValueError& e) {
        throw ValueError(path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Run config binding
// ---------------------------------------------------------------------------

namespace {

void bind_data(DataConfig& data, const std::string& key, const std::string& value) {
    std::string full = "data." + key;
    if (key == "manifest") data.manifest = value;
    else if (key == "cache_dir") data.cache_dir = value;
    else if (key == "sequences") data.sequences = value;
    else if (key == "check_files") data.check_files = parse_bool(full, value);
    else if (key == "resample") data.preprocess.resample_to = parse_int3(full, value);
    else if (key == "crop") data.preprocess.crop_to = parse_int3(full, value);
    else if (key == "normalize") data.preprocess.normalize = parse_bool(full, value);
    else if (key == "slab") data.preprocess.slab = static_cast<int>(parse_int(full, value));
    else throw ValueError("config: unknown key 'data." + key + "'");
}

// `blocks = 64 64 64 64 | 128 128`: channel widths, pipe-separated blocks.
std::vector<std::vector<int>> parse_blocks(const std::string& key, const std::string& value) {
    std::vector<std::vector<int>> out;
    std::string group;
    std::istringstream in(value);
    while (std::getline(in, group, '|')) out.push_back(parse_int_list(key, trim(group)));
    if (out.empty()) bad_value(key, value, "pipe-separated integer lists");
    return out;
}

std::string fmt_blocks(const std::vector<std::vector<int>>& blocks) {
    std::string out;
    for (size_t g = 0; g < blocks.size(); ++g) {
        if (g) out += " | ";
        for (size_t i = 0; i < blocks[g].size(); ++i) {
            if (i) out += ' ';
            out += std::to_string(blocks[g][i]);
        }
    }
    return out;
}

template <typename T>
std::string fmt_list(const std::vector<T>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ' ';
        if constexpr (std::is_same_v<T, bool>)
            out += fmt_bool(v[i]);
        else if constexpr (std::is_integral_v<T>)
            out += std::to_string(v[i]);
        else
            out += fmt_double(v[i]);
    }
    return out;
}

// `kind` swaps in that architecture's stock config before the section's
// remaining keys refine it, so key order in the file does not matter.
void bind_model(ModelConfig& model, const std::vector<std::pair<std::string, std::string>>& entries) {
    for (const auto& [key, value] : entries)
        if (key == "kind") model = default_model_config(parse_fuse_mode(value));
    for (const auto& [key, value] : entries) {
        std::string full = "model." + key;
        if (key == "kind") continue;
        else if (key == "in_channels") model.in_channels = static_cast<int>(parse_int(full, value));
        else if (key == "blocks") model.blocks = parse_blocks(full, value);
        else if (key == "kernel") model.kernel = parse_int_list(full, value);
        else if (key == "padding") model.padding = static_cast<int>(parse_int(full, value));
        else if (key == "pool_after") model.pool_after = parse_bool_list(full, value);
        else if (key == "pool_kernel") model.pool_kernel = parse_int_list(full, value);
        else if (key == "fc_widths") model.fc_widths = parse_int_list(full, value);
        else if (key == "fc_dropout") model.fc_dropout = parse_double_list(full, value);
        else if (key == "batchnorm") model.batchnorm = parse_bool(full, value);
        else throw ValueError("config: unknown key 'model." + key + "'");
    }
}

void bind_train(RunConfig& config, const std::string& key, const std::string& value) {
    TrainConfig& train = config.train;
    std::string full = "train." + key;
    if (key == "lr") train.lr = parse_double(full, value);
    else if (key == "max_epochs") train.max_epochs = static_cast<int>(parse_int(full, value));
    else if (key == "batch_size") train.batch_size = static_cast<int>(parse_int(full, value));
    else if (key == "patience") train.patience = static_cast<int>(parse_int(full, value));
    else if (key == "seed") train.seed = static_cast<uint64_t>(parse_int(full, value));
    else if (key == "precision") train.precision = value;
    else if (key == "class_weighting") train.class_weighting = parse_bool(full, value);
    else if (key == "eval_train_each_epoch") train.eval_train_each_epoch = parse_bool(full, value);
    else if (key == "folds") config.folds = static_cast<int>(parse_int(full, value));
    else throw ValueError("config: unknown key 'train." + key + "'");
}

void bind_augment(AugmentPolicy& augment, const std::string& key, const std::string& value) {
    std::string full = "augment." + key;
    if (key == "enabled") augment.enabled = parse_bool(full, value);
    else if (key == "static_angle") augment.static_angle = parse_double(full, value);
    else if (key == "random_min") augment.random_min = parse_double(full, value);
    else if (key == "random_max") augment.random_max = parse_double(full, value);
    else throw ValueError("config: unknown key 'augment." + key + "'");
}

void bind_output(OutputConfig& output, const std::string& key, const std::string& value) {
    std::string full = "output." + key;
    if (key == "dir") output.dir = value;
    else if (key == "checkpoints") output.checkpoints = parse_bool(full, value);
    else throw ValueError("config: unknown key 'output." + key + "'");
}

}  // namespace

RunConfig run_config_from_ini(const std::string& text) {
    IniFile file = parse_ini(text);
    RunConfig config;
    for (const auto& sec : file.sections) {
        if (sec.name == "data") {
            for (const auto& [k, v] : sec.entries) bind_data(config.data, k, v);
        } else if (sec.name == "model") {
            bind_model(config.model, sec.entries);
        } else if (sec.name == "train") {
            for (const auto& [k, v] : sec.entries) bind_train(config, k, v);
        } else if (sec.name == "augment") {
            for (const auto& [k, v] : sec.entries) bind_augment(config.train.augment, k, v);
        } else if (sec.name == "output") {
            for (const auto& [k, v] : sec.entries) bind_output(config.output, k, v);
        } else {
            throw ValueError("config: unknown section [" + sec.name + "]");
        }
    }
    return config;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return run_config_from_ini(buf.str());
    } catch (const ValueError& e) {
        throw ValueError(path + ": " + e.what());
    }
}

void apply_override(RunConfig& config, const std::string& dotted_key, const std::string& value) {
    size_t dot = dotted_key.find('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 == dotted_key.size())
        throw ValueError("config override: expected section.key, got '" + dotted_key + "'");
    std::string section = dotted_key.substr(0, dot);
    std::string key = dotted_key.substr(dot + 1);
    if (section == "data") bind_data(config.data, key, value);
    else if (section == "model") bind_model(config.model, {{key, value}});
    else if (section == "train") bind_train(config, key, value);
    else if (section == "augment") bind_augment(config.train.augment, key, value);
    else if (section == "output") bind_output(config.output, key, value);
    else throw ValueError("config override: unknown section '" + section + "'");
}

std::string run_config_ini(const RunConfig& c) {
    std::string out;
    out += "[data]\n";
    out += "manifest = " + c.data.manifest + "\n";
    out += "cache_dir = " + c.data.cache_dir + "\n";
    out += "sequences = " + c.data.sequences + "\n";
    out += "check_files = " + fmt_bool(c.data.check_files) + "\n";
    out += "resample = " + fmt_triple(c.data.preprocess.resample_to) + "\n";
    out += "crop = " + fmt_triple(c.data.preprocess.crop_to) + "\n";
    out += "normalize = " + fmt_bool(c.data.preprocess.normalize) + "\n";
    out += "slab = " + std::to_string(c.data.preprocess.slab) + "\n";
    out += "\n[model]\n";
    out += "kind = " + std::string(fuse_mode_name(c.model.kind)) + "\n";
    out += "in_channels = " + std::to_string(c.model.in_channels) + "\n";
    out += "blocks = " + fmt_blocks(c.model.blocks) + "\n";
    out += "kernel = " + fmt_list(c.model.kernel) + "\n";
    out += "padding = " + std::to_string(c.model.padding) + "\n";
    out += "pool_after = " + fmt_list(c.model.pool_after) + "\n";
    out += "pool_kernel = " + fmt_list(c.model.pool_kernel) + "\n";
    out += "fc_widths = " + fmt_list(c.model.fc_widths) + "\n";
    out += "fc_dropout = " + fmt_list(c.model.fc_dropout) + "\n";
    out += "batchnorm = " + fmt_bool(c.model.batchnorm) + "\n";
    out += "\n[train]\n";
    out += "lr = " + fmt_double(c.train.lr) + "\n";
    out += "max_epochs = " + std::to_string(c.train.max_epochs) + "\n";
    out += "batch_size = " + std::to_string(c.train.batch_size) + "\n";
    out += "patience = " + std::to_string(c.train.patience) + "\n";
    out += "seed = " + std::to_string(c.train.seed) + "\n";
    out += "precision = " + c.train.precision + "\n";
    out += "class_weighting = " + fmt_bool(c.train.class_weighting) + "\n";
    out += "eval_train_each_epoch = " + fmt_bool(c.train.eval_train_each_epoch) + "\n";
    out += "folds = " + std::to_string(c.folds) + "\n";
    out += "\n[augment]\n";
    out += "enabled = " + fmt_bool(c.train.augment.enabled) + "\n";
    out += "static_angle = " + fmt_double(c.train.augment.static_angle) + "\n";
    out += "random_min = " + fmt_double(c.train.augment.random_min) + "\n";
    out += "random_max = " + fmt_double(c.train.augment.random_max) + "\n";
    out += "\n[output]\n";
    out += "dir = " + c.output.dir + "\n";
    out += "checkpoints = " + fmt_bool(c.output.checkpoints) + "\n";
    return out;
}

uint64_t config_hash(const RunConfig& config) { return fnv1a(run_config_ini(config)); }

std::string config_hash_hex(const RunConfig& config) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(config_hash(config)));
    return buf;
}

void validate_run_config(const RunConfig& config) {
    if (config.data.manifest.empty()) throw ValueError("config: data.manifest is required");
    if (!std::filesystem::exists(config.data.manifest))
        throw ValueError("config: data.manifest '" + config.data.manifest + "' does not exist");
    const std::string& seq = config.data.sequences;
    if (seq != "fusion" && seq != "t1w" && seq != "t2w" && seq != "pdw")
        throw ValueError("config: data.sequences must be fusion, t1w, t2w or pdw, got '" + seq + "'");
    for (int64_t e : config.data.preprocess.resample_to)
        if (e < 1) throw ValueError("config: data.resample extents must be positive");
    for (int64_t e : config.data.preprocess.crop_to)
        if (e < 1) throw ValueError("config: data.crop extents must be positive");
    if (config.data.preprocess.slab < 1) throw ValueError("config: data.slab must be >= 1");
    if (config.folds < 2) throw ValueError("config: train.folds must be >= 2");
    validate_model_config(config.model);
    validate_train_config(config.train);
}

}  // namespace bdae
