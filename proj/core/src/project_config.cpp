#include "editlab/project_config.hpp"

#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "editlab/hash.hpp"

namespace editlab {

using json = nlohmann::json;

namespace {

void expect_keys(const json& j, const std::set<std::string>& allowed, const char* section) {
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key))
            throw ConfigError(std::string("config: unknown key '") + key + "' in " + section);
}

template <class T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

std::string join(const std::string& dir, const std::string& leaf) {
    if (leaf.empty()) return dir;
    if (leaf.front() == '/') return leaf;
    if (dir.empty() || dir == ".") return leaf;
    return dir.back() == '/' ? dir + leaf : dir + "/" + leaf;
}

EditorConfig editor_from_json(const json& j) {
    expect_keys(j,
                {"method", "epochs", "lr", "rank", "adapter_scaling", "target_layer", "ftl_clip",
                 "grace_layer", "deferral_radius", "orth_weight", "importance_decay",
                 "prune_every", "n_common", "n_specific", "api_tokens_only", "seed"},
                "editors[]");
    EditorConfig c = EditorConfig::defaults(method_from_name(j.at("method").get<std::string>()));
    maybe(j, "epochs", c.epochs);
    maybe(j, "lr", c.lr);
    maybe(j, "rank", c.rank);
    maybe(j, "adapter_scaling", c.adapter_scaling);
    maybe(j, "target_layer", c.target_layer);
    maybe(j, "ftl_clip", c.ftl_clip);
    maybe(j, "grace_layer", c.grace_layer);
    maybe(j, "deferral_radius", c.deferral_radius);
    maybe(j, "orth_weight", c.orth_weight);
    maybe(j, "importance_decay", c.importance_decay);
    maybe(j, "prune_every", c.prune_every);
    maybe(j, "n_common", c.n_common);
    maybe(j, "n_specific", c.n_specific);
    maybe(j, "api_tokens_only", c.api_tokens_only);
    maybe(j, "seed", c.seed);
    return c;
}

json editor_to_json(const EditorConfig& c) {
    return json{{"method", method_name(c.method)},
                {"epochs", c.epochs},
                {"lr", c.lr},
                {"rank", c.rank},
                {"adapter_scaling", c.adapter_scaling},
                {"target_layer", c.target_layer},
                {"ftl_clip", c.ftl_clip},
                {"grace_layer", c.grace_layer},
                {"deferral_radius", c.deferral_radius},
                {"orth_weight", c.orth_weight},
                {"importance_decay", c.importance_decay},
                {"prune_every", c.prune_every},
                {"n_common", c.n_common},
                {"n_specific", c.n_specific},
                {"api_tokens_only", c.api_tokens_only},
                {"seed", c.seed}};
}

}  // namespace

std::string ProjectConfig::checkpoint_path() const { return join(workdir, paths.checkpoint); }
std::string ProjectConfig::train_log_path() const { return join(workdir, paths.train_log); }
std::string ProjectConfig::benchmark_path() const { return join(workdir, paths.benchmark); }
std::string ProjectConfig::manifest_path() const { return join(workdir, paths.manifest); }
std::string ProjectConfig::layer_map_path() const { return join(workdir, paths.layer_map); }
std::string ProjectConfig::layer_scores_path() const { return join(workdir, paths.layer_scores); }
std::string ProjectConfig::reports_dir_path() const { return join(workdir, paths.reports_dir); }

ProjectConfig default_project_config() {
    ProjectConfig cfg;
    for (EditMethod m : {EditMethod::FTL, EditMethod::LoRA, EditMethod::AdaLoRA,
                         EditMethod::GRACE, EditMethod::AdaLoRA_L})
        cfg.editors.push_back(EditorConfig::defaults(m));
    return cfg;
}

ProjectConfig load_project_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: parse error: ") + e.what());
    }
    expect_keys(j,
                {"schema_version", "workdir", "paths", "model", "train", "bench", "quality",
                 "layers", "run", "editors"},
                "top level");
    ProjectConfig cfg = default_project_config();
    maybe(j, "schema_version", cfg.schema_version);
    if (cfg.schema_version != 1) throw ConfigError("config: unsupported schema_version");
    maybe(j, "workdir", cfg.workdir);
    if (j.contains("paths")) {
        const json& p = j.at("paths");
        expect_keys(p,
                    {"checkpoint", "train_log", "benchmark", "manifest", "layer_map",
                     "layer_scores", "reports_dir"},
                    "paths");
        maybe(p, "checkpoint", cfg.paths.checkpoint);
        maybe(p, "train_log", cfg.paths.train_log);
        maybe(p, "benchmark", cfg.paths.benchmark);
        maybe(p, "manifest", cfg.paths.manifest);
        maybe(p, "layer_map", cfg.paths.layer_map);
        maybe(p, "layer_scores", cfg.paths.layer_scores);
        maybe(p, "reports_dir", cfg.paths.reports_dir);
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        expect_keys(m, {"d_model", "n_heads", "n_layers", "d_ffn", "max_seq_len", "seed"},
                    "model");
        maybe(m, "d_model", cfg.model.d_model);
        maybe(m, "n_heads", cfg.model.n_heads);
        maybe(m, "n_layers", cfg.model.n_layers);
        maybe(m, "d_ffn", cfg.model.d_ffn);
        maybe(m, "max_seq_len", cfg.model.max_seq_len);
        maybe(m, "seed", cfg.model.seed);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        expect_keys(t, {"epochs", "lr", "batch", "seed", "holdout_per_api", "min_emission"},
                    "train");
        maybe(t, "epochs", cfg.train.epochs);
        maybe(t, "lr", cfg.train.lr);
        maybe(t, "batch", cfg.train.batch);
        maybe(t, "seed", cfg.train.seed);
        maybe(t, "holdout_per_api", cfg.train.holdout_per_api);
        maybe(t, "min_emission", cfg.train.min_emission);
    }
    if (j.contains("bench")) {
        const json& b = j.at("bench");
        expect_keys(b,
                    {"n_mappings", "n_libraries", "n_functions", "n_per_api", "pool_size",
                     "k_specificity", "max_new_tokens", "gen_attempts", "embed_dim", "seed"},
                    "bench");
        maybe(b, "n_mappings", cfg.bench.n_mappings);
        maybe(b, "n_libraries", cfg.bench.n_libraries);
        maybe(b, "n_functions", cfg.bench.n_functions);
        maybe(b, "n_per_api", cfg.bench.n_per_api);
        maybe(b, "pool_size", cfg.bench.pool_size);
        maybe(b, "k_specificity", cfg.bench.k_specificity);
        maybe(b, "max_new_tokens", cfg.bench.max_new_tokens);
        maybe(b, "gen_attempts", cfg.bench.gen_attempts);
        maybe(b, "embed_dim", cfg.bench.embed_dim);
        maybe(b, "seed", cfg.bench.seed);
    }
    if (j.contains("quality")) {
        const json& q = j.at("quality");
        expect_keys(q, {"min_mapping_coverage", "min_instances"}, "quality");
        maybe(q, "min_mapping_coverage", cfg.quality.min_mapping_coverage);
        maybe(q, "min_instances", cfg.quality.min_instances);
    }
    if (j.contains("layers")) {
        const json& l = j.at("layers");
        expect_keys(l, {"n_common", "n_specific"}, "layers");
        maybe(l, "n_common", cfg.layers.n_common);
        maybe(l, "n_specific", cfg.layers.n_specific);
    }
    if (j.contains("run")) {
        const json& r = j.at("run");
        expect_keys(r, {"n_runs", "base_seed", "workers", "revalidate", "max_new_tokens"}, "run");
        maybe(r, "n_runs", cfg.run.n_runs);
        maybe(r, "base_seed", cfg.run.base_seed);
        maybe(r, "workers", cfg.run.workers);
        maybe(r, "revalidate", cfg.run.revalidate);
        maybe(r, "max_new_tokens", cfg.run.max_new_tokens);
    }
    if (j.contains("editors")) {
        cfg.editors.clear();
        for (const json& e : j.at("editors")) cfg.editors.push_back(editor_from_json(e));
    }
    return cfg;
}

std::string project_config_to_json(const ProjectConfig& cfg) {
    json j{{"schema_version", cfg.schema_version},
           {"workdir", cfg.workdir},
           {"paths",
            json{{"checkpoint", cfg.paths.checkpoint},
                 {"train_log", cfg.paths.train_log},
                 {"benchmark", cfg.paths.benchmark},
                 {"manifest", cfg.paths.manifest},
                 {"layer_map", cfg.paths.layer_map},
                 {"layer_scores", cfg.paths.layer_scores},
                 {"reports_dir", cfg.paths.reports_dir}}},
           {"model",
            json{{"d_model", cfg.model.d_model},
                 {"n_heads", cfg.model.n_heads},
                 {"n_layers", cfg.model.n_layers},
                 {"d_ffn", cfg.model.d_ffn},
                 {"max_seq_len", cfg.model.max_seq_len},
                 {"seed", cfg.model.seed}}},
           {"train",
            json{{"epochs", cfg.train.epochs},
                 {"lr", cfg.train.lr},
                 {"batch", cfg.train.batch},
                 {"seed", cfg.train.seed},
                 {"holdout_per_api", cfg.train.holdout_per_api},
                 {"min_emission", cfg.train.min_emission}}},
           {"bench",
            json{{"n_mappings", cfg.bench.n_mappings},
                 {"n_libraries", cfg.bench.n_libraries},
                 {"n_functions", cfg.bench.n_functions},
                 {"n_per_api", cfg.bench.n_per_api},
                 {"pool_size", cfg.bench.pool_size},
                 {"k_specificity", cfg.bench.k_specificity},
                 {"max_new_tokens", cfg.bench.max_new_tokens},
                 {"gen_attempts", cfg.bench.gen_attempts},
                 {"embed_dim", cfg.bench.embed_dim},
                 {"seed", cfg.bench.seed}}},
           {"quality",
            json{{"min_mapping_coverage", cfg.quality.min_mapping_coverage},
                 {"min_instances", cfg.quality.min_instances}}},
           {"layers", json{{"n_common", cfg.layers.n_common}, {"n_specific", cfg.layers.n_specific}}},
           {"run",
            json{{"n_runs", cfg.run.n_runs},
                 {"base_seed", cfg.run.base_seed},
                 {"workers", cfg.run.workers},
                 {"revalidate", cfg.run.revalidate},
                 {"max_new_tokens", cfg.run.max_new_tokens}}}};
    json eds = json::array();
    for (const EditorConfig& e : cfg.editors) eds.push_back(editor_to_json(e));
    j["editors"] = std::move(eds);
    return j.dump(2);
}

std::string ProjectConfig::config_hash() const { return hex64(fnv64(project_config_to_json(*this))); }

EditorConfig editor_config_from_name(const ProjectConfig& cfg, const std::string& name) {
    const EditMethod m = method_from_name(name);
    for (const EditorConfig& e : cfg.editors)
        if (e.method == m) return e;
    EditorConfig e = EditorConfig::defaults(m);
    e.n_common = cfg.layers.n_common;
    e.n_specific = cfg.layers.n_specific;
    return e;
}

}  // namespace editlab
