#include "gmx/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "gmx/error.hpp"

namespace gmx {

namespace {

using json = nlohmann::json;

void reject_unknown_keys(const json& obj, const std::set<std::string>& allowed,
                         const std::string& path) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!allowed.count(it.key()))
            throw ConfigError("config: unknown key '" + path + it.key() + "'");
    }
}

int64_t get_int(const json& v, const std::string& path) {
    if (!v.is_number_integer())
        throw ConfigError("config: '" + path + "' must be an integer");
    return v.get<int64_t>();
}

double get_num(const json& v, const std::string& path) {
    if (!v.is_number())
        throw ConfigError("config: '" + path + "' must be a number");
    return v.get<double>();
}

bool get_bool(const json& v, const std::string& path) {
    if (!v.is_boolean())
        throw ConfigError("config: '" + path + "' must be a boolean");
    return v.get<bool>();
}

std::string get_str(const json& v, const std::string& path) {
    if (!v.is_string())
        throw ConfigError("config: '" + path + "' must be a string");
    return v.get<std::string>();
}

StageConfig parse_stage(const json& v, const std::string& path) {
    if (!v.is_object())
        throw ConfigError("config: '" + path + "' must be an object");
    reject_unknown_keys(v, {"dim", "ratio", "depth", "heads"}, path + ".");
    for (const char* req : {"dim", "ratio", "depth", "heads"}) {
        if (!v.contains(req))
            throw ConfigError("config: '" + path + "' is missing '" + req + "'");
    }
    StageConfig s;
    s.dim = get_int(v["dim"], path + ".dim");
    s.ratio = get_num(v["ratio"], path + ".ratio");
    s.depth = static_cast<int>(get_int(v["depth"], path + ".depth"));
    s.heads = static_cast<int>(get_int(v["heads"], path + ".heads"));
    return s;
}

BranchPlan parse_branches(const json& v) {
    if (!v.is_object()) throw ConfigError("config: 'branches' must be an object");
    reject_unknown_keys(v, {"enabled", "kind", "kernels", "non_att_kernel"},
                        "branches.");
    BranchPlan plan;
    if (v.contains("enabled")) {
        const json& e = v["enabled"];
        if (!e.is_array() || e.size() != 4)
            throw ConfigError("config: 'branches.enabled' must be an array of 4 booleans");
        for (int i = 0; i < 4; ++i)
            plan.enabled[static_cast<std::size_t>(i)] =
                get_bool(e[static_cast<std::size_t>(i)],
                         "branches.enabled[" + std::to_string(i) + "]");
    }
    if (v.contains("kind")) {
        const std::string name = get_str(v["kind"], "branches.kind");
        AggKind k;
        try {
            k = agg_kind_from_name(name);
        } catch (const ConfigError&) {
            throw ConfigError("config: 'branches.kind' has unknown value '" + name + "'");
        }
        if (k == AggKind::identity)
            throw ConfigError(
                "config: 'branches.kind' cannot be 'identity'; disable slots instead");
        plan.kind = k;
    }
    if (v.contains("kernels")) {
        const json& ks = v["kernels"];
        if (!ks.is_array() || ks.size() != 4)
            throw ConfigError("config: 'branches.kernels' must be an array of 4 stage entries");
        for (int s = 0; s < 4; ++s) {
            const json& row = ks[static_cast<std::size_t>(s)];
            const std::string row_path = "branches.kernels[" + std::to_string(s) + "]";
            if (!row.is_array() || row.size() != 3)
                throw ConfigError("config: '" + row_path + "' must be an array of 3 integers");
            for (int j = 0; j < 3; ++j)
                plan.kernels[static_cast<std::size_t>(s)][static_cast<std::size_t>(j)] =
                    static_cast<int>(get_int(row[static_cast<std::size_t>(j)],
                                             row_path + "[" + std::to_string(j) + "]"));
        }
    }
    if (v.contains("non_att_kernel"))
        plan.non_att_kernel =
            static_cast<int>(get_int(v["non_att_kernel"], "branches.non_att_kernel"));
    return plan;
}

}  // namespace

FileConfig parse_config_text(const std::string& text) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: JSON parse error: ") + e.what());
    }
    if (!root.is_object()) throw ConfigError("config: top level must be an object");

    reject_unknown_keys(root,
                        {"schema_version", "preset", "stages", "num_classes",
                         "drop_path_rate", "softmax_on_context", "branches", "seed"},
                        "");

    if (!root.contains("schema_version"))
        throw ConfigError("config: missing required key 'schema_version'");
    if (get_int(root["schema_version"], "schema_version") != 1)
        throw ConfigError("config: unsupported schema_version (expected 1)");

    const bool has_preset = root.contains("preset");
    const bool has_stages = root.contains("stages");
    if (has_preset == has_stages)
        throw ConfigError("config: exactly one of 'preset' or 'stages' is required");

    FileConfig fc;
    if (has_preset) {
        const std::string name = get_str(root["preset"], "preset");
        if (!ModelConfig::is_preset_name(name))
            throw ConfigError("config: unknown preset '" + name + "'");
        fc.model = ModelConfig::preset(name);
        fc.preset = name;
    } else {
        const json& stages = root["stages"];
        if (!stages.is_array() || stages.size() != 4)
            throw ConfigError("config: 'stages' must be an array of 4 stage objects");
        for (int i = 0; i < 4; ++i)
            fc.model.stages[static_cast<std::size_t>(i)] =
                parse_stage(stages[static_cast<std::size_t>(i)],
                            "stages[" + std::to_string(i) + "]");
    }

    if (root.contains("num_classes"))
        fc.model.num_classes = get_int(root["num_classes"], "num_classes");
    if (root.contains("drop_path_rate"))
        fc.model.drop_path_rate = get_num(root["drop_path_rate"], "drop_path_rate");
    if (root.contains("softmax_on_context"))
        fc.model.softmax_on_context =
            get_bool(root["softmax_on_context"], "softmax_on_context");
    if (root.contains("branches")) fc.model.branches = parse_branches(root["branches"]);
    if (root.contains("seed")) {
        const int64_t s = get_int(root["seed"], "seed");
        if (s < 0) throw ConfigError("config: 'seed' must be non-negative");
        fc.seed = static_cast<uint64_t>(s);
    }

    fc.model.validate();
    return fc;
}

FileConfig load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("config: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    try {
        return parse_config_text(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(std::string(e.what()) + " (in '" + path + "')");
    }
}

std::string config_to_json(const ModelConfig& cfg, std::optional<uint64_t> seed) {
    json root;
    root["schema_version"] = 1;
    json stages = json::array();
    for (const auto& s : cfg.stages) {
        stages.push_back({{"dim", s.dim},
                          {"ratio", s.ratio},
                          {"depth", s.depth},
                          {"heads", s.heads}});
    }
    root["stages"] = stages;
    root["num_classes"] = cfg.num_classes;
    root["drop_path_rate"] = cfg.drop_path_rate;
    root["softmax_on_context"] = cfg.softmax_on_context;
    json branches;
    branches["enabled"] = cfg.branches.enabled;
    branches["kind"] = agg_kind_name(cfg.branches.kind);
    json kernels = json::array();
    for (const auto& row : cfg.branches.kernels)
        kernels.push_back(json(row));
    branches["kernels"] = kernels;
    branches["non_att_kernel"] = cfg.branches.non_att_kernel;
    root["branches"] = branches;
    if (seed) root["seed"] = *seed;
    return root.dump(2) + "\n";
}

uint64_t resolve_seed(std::optional<uint64_t> flag_seed,
                      std::optional<uint64_t> file_seed, uint64_t fallback) {
    if (const char* env = std::getenv("GMX_SEED")) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (end == env || *end != '\0')
            throw ConfigError("config: GMX_SEED must be a non-negative integer");
        return static_cast<uint64_t>(v);
    }
    if (flag_seed) return *flag_seed;
    if (file_seed) return *file_seed;
    return fallback;
}

}  // namespace gmx
