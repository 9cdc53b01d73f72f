#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "editlab/benchgen.hpp"
#include "editlab/editors.hpp"
#include "editlab/harness.hpp"
#include "editlab/model.hpp"

namespace editlab {

// Single static config file driving every command; flag overrides on top.
// Unknown keys are rejected.
struct ProjectConfig {
    int schema_version = 1;
    std::string workdir = ".";

    struct Paths {
        std::string checkpoint = "model.ckpt";
        std::string train_log = "train_log.csv";
        std::string benchmark = "bench.jsonl";
        std::string manifest = "bench.manifest.json";
        std::string layer_map = "layer_map.json";
        std::string layer_scores = "layer_scores.csv";
        std::string reports_dir = "reports";
    } paths;

    ModelConfig model;  // vocab_size is derived from the mapping table

    struct Train {
        int epochs = 8;
        double lr = 1e-3;
        int batch = 16;
        std::uint64_t seed = 7;
        int holdout_per_api = 8;
        double min_emission = 0.95;
    } train;

    BenchParams bench;

    struct Quality {
        double min_mapping_coverage = 0.8;
        int min_instances = 160;
    } quality;

    struct Layers {
        int n_common = 4;
        int n_specific = 4;
    } layers;

    RunConfig run;
    std::vector<EditorConfig> editors;  // cmd_run defaults when --editors absent

    // resolved absolute-ish paths (workdir-joined)
    std::string checkpoint_path() const;
    std::string train_log_path() const;
    std::string benchmark_path() const;
    std::string manifest_path() const;
    std::string layer_map_path() const;
    std::string layer_scores_path() const;
    std::string reports_dir_path() const;

    std::string config_hash() const;  // content hash, embedded in outputs
};

ProjectConfig default_project_config();
ProjectConfig load_project_config(const std::string& path);
std::string project_config_to_json(const ProjectConfig& cfg);

EditorConfig editor_config_from_name(const ProjectConfig& cfg, const std::string& name);

}  // namespace editlab
