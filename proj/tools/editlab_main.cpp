// editlab: train a toy code LM, build the deprecated-API editing benchmark,
// localize per-API layers, and run the editor comparison experiments.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "editlab/benchgen.hpp"
#include "editlab/editors.hpp"
#include "editlab/harness.hpp"
#include "editlab/hash.hpp"
#include "editlab/layer_select.hpp"
#include "editlab/model.hpp"
#include "editlab/project_config.hpp"

namespace fs = std::filesystem;
using namespace editlab;

namespace {

struct GlobalFlags {
    std::string config_path;
    std::string workdir;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<int> runs;
    std::optional<int> workers;
    std::string editors_list;
    bool assert_gates = false;
    bool no_cache = false;
};

ProjectConfig resolve_config(const GlobalFlags& flags) {
    ProjectConfig cfg =
        flags.config_path.empty() ? default_project_config() : load_project_config(flags.config_path);
    if (const char* env = std::getenv("EDITLAB_WORKDIR"); env && cfg.workdir == ".")
        cfg.workdir = env;
    if (!flags.workdir.empty()) cfg.workdir = flags.workdir;
    if (flags.seed) {
        cfg.model.seed = *flags.seed;
        cfg.train.seed = *flags.seed + 1;
        cfg.bench.seed = *flags.seed + 2;
        cfg.run.base_seed = *flags.seed + 3;
    }
    if (flags.runs) cfg.run.n_runs = *flags.runs;
    if (flags.workers) {
        cfg.run.workers = *flags.workers;
        cfg.bench.workers = *flags.workers;
    } else {
        cfg.bench.workers = cfg.run.workers;
    }
    return cfg;
}

std::vector<std::string> split_list(const std::string& csv) {
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    for (const std::string& s : split_list(csv)) out.push_back(std::stoi(s));
    return out;
}

void write_file(const std::string& path, const std::string& body) {
    fs::create_directories(fs::path(path).parent_path().empty() ? "." : fs::path(path).parent_path().string());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << body;
}

std::string provenance_line(const ProjectConfig& cfg, const std::string& model_hash,
                            const std::string& bench_hash) {
    std::string line = "# config=" + cfg.config_hash();
    if (!model_hash.empty()) line += " model=" + model_hash;
    if (!bench_hash.empty()) line += " benchmark=" + bench_hash;
    line += "\n";
    return line;
}

// ---- train ----

int cmd_train(const ProjectConfig& cfg) {
    fs::create_directories(cfg.workdir);
    const auto mappings = default_mappings(cfg.bench.n_mappings, cfg.bench.n_libraries);
    SyntheticGenerator gen(mappings);
    Rng seeds(cfg.bench.seed);
    const auto corpus = gen.generate_corpus(cfg.bench.n_functions, seeds.fork(0).next_u64());
    std::printf("corpus: %zu functions, vocab %d tokens\n", corpus.size(), gen.vocab().size());

    ModelConfig mc = cfg.model;
    mc.vocab_size = gen.vocab().size();
    TransformerLM model(mc);

    TrainOptions opts;
    opts.epochs = cfg.train.epochs;
    opts.lr = cfg.train.lr;
    opts.batch = cfg.train.batch;
    opts.seed = cfg.train.seed;
    opts.workers = cfg.run.workers;
    opts.on_epoch = [](int epoch, double loss) {
        std::printf("epoch %d: loss %.6f\n", epoch, loss);
        std::fflush(stdout);
    };
    TrainStats stats;
    try {
        stats = model.train_lm(corpus, opts);
    } catch (const TrainingError& e) {
        std::fprintf(stderr, "training failed: %s\n", e.what());
        return 2;
    }

    // held-out prompts from a stream disjoint from the benchmark's
    const auto holdout = gen.collect_candidates(cfg.train.holdout_per_api, seeds.fork(97).next_u64());
    const double emission = deprecated_emission_rate(model, gen, holdout, cfg.run.workers,
                                                     cfg.bench.max_new_tokens);
    model.save_checkpoint(cfg.checkpoint_path());
    const std::string model_hash = hex64(model.params_hash());

    std::string log = provenance_line(cfg, model_hash, "");
    log += "epoch,loss\n";
    for (std::size_t e = 0; e < stats.epoch_losses.size(); ++e) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", e, stats.epoch_losses[e]);
        log += buf;
    }
    write_file(cfg.train_log_path(), log);

    std::printf("checkpoint: %s (hash %s)\n", cfg.checkpoint_path().c_str(), model_hash.c_str());
    std::printf("held-out deprecated-API emission rate: %.4f (threshold %.2f)\n", emission,
                cfg.train.min_emission);
    if (emission < cfg.train.min_emission) {
        std::fprintf(stderr, "emission rate below threshold\n");
        return 3;
    }
    return 0;
}

// ---- bench ----

int cmd_bench(const ProjectConfig& cfg) {
    TransformerLM model = TransformerLM::load_checkpoint(cfg.checkpoint_path());
    const auto mappings = default_mappings(cfg.bench.n_mappings, cfg.bench.n_libraries);
    Benchmark bench;
    try {
        bench = build_benchmark(model, mappings, cfg.bench);
        validate_quality(bench, cfg.quality.min_mapping_coverage, cfg.quality.min_instances);
    } catch (const QualityError& e) {
        std::fprintf(stderr, "benchmark quality error: %s\n", e.what());
        return 3;
    }
    save_benchmark(bench, cfg.benchmark_path(), cfg.manifest_path());
    const Manifest& man = bench.manifest;
    std::printf("benchmark: %d candidates -> %d filtered -> %d final (retention %.3f, "
                "%d flagged rephrase)\n",
                man.n_candidates, man.n_filtered, man.n_final, man.retention,
                man.n_flagged_generalization);
    std::printf("suite counts: eff=%d gen=%d port=%d spec=%d\n", man.count_effectiveness,
                man.count_generalization, man.count_portability, man.count_specificity);
    int covered = 0;
    for (const auto& [api, count] : man.per_api_effectiveness)
        if (count > 0) ++covered;
    std::printf("API coverage: %d/%zu\n", covered, bench.mappings.size());
    return 0;
}

// ---- layers ----

int cmd_layers(const ProjectConfig& cfg, bool no_cache) {
    TransformerLM model = TransformerLM::load_checkpoint(cfg.checkpoint_path());
    Benchmark bench = load_benchmark(cfg.benchmark_path(), cfg.manifest_path());
    if (hex64(model.params_hash()) != bench.manifest.model_hash) {
        std::fprintf(stderr, "layers: model hash does not match the benchmark manifest\n");
        return 3;
    }

    LayerMapResult result;
    bool cache_hit = false;
    if (!no_cache) {
        if (auto cached = load_layer_map(cfg.layer_map_path())) {
            if (cached->model_hash == hex64(model.params_hash()) &&
                cached->benchmark_hash == bench.manifest.benchmark_hash &&
                cached->map.n_common == cfg.layers.n_common &&
                cached->map.n_specific == cfg.layers.n_specific) {
                result = std::move(*cached);
                cache_hit = true;
            }
        }
    }
    if (!cache_hit) {
        result = build_layer_map(model, bench, cfg.layers.n_common, cfg.layers.n_specific,
                                 cfg.run.workers);
        save_layer_map(result, cfg.layer_map_path());
    }
    std::printf("layer map %s: common = {", cache_hit ? "(cache hit)" : "(computed)");
    for (std::size_t i = 0; i < result.map.common.size(); ++i)
        std::printf("%s%d", i ? "," : "", result.map.common[i]);
    std::printf("}\n");

    std::string csv = provenance_line(cfg, result.model_hash, result.benchmark_hash);
    csv += "api,layer,score\n";
    for (const LayerImportanceProfile& p : result.profiles)
        for (std::size_t l = 0; l < p.scores.size(); ++l) {
            char buf[128];
            std::snprintf(buf, sizeof(buf), "%s,%zu,%.17g\n", p.api_id.c_str(), l, p.scores[l]);
            csv += buf;
        }
    write_file(cfg.layer_scores_path(), csv);
    return 0;
}

// ---- run ----

struct GateFailure {
    std::string name;
    std::string expected;
    std::string observed;
};

const EditReport* find_report(const std::vector<EditReport>& reports, const std::string& name) {
    for (const EditReport& r : reports)
        if (r.editor == name) return &r;
    return nullptr;
}

std::vector<GateFailure> check_gates(const std::vector<EditReport>& reports) {
    std::vector<GateFailure> failures;
    auto expect = [&](bool ok, const std::string& name, const std::string& exp,
                      double observed) {
        if (!ok) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.4f", observed);
            failures.push_back({name, exp, buf});
        }
    };
    const EditReport* pre = find_report(reports, "pre_edit");
    const EditReport* ada = find_report(reports, "adalora");
    const EditReport* adal = find_report(reports, "adalora_l");
    const EditReport* grace = find_report(reports, "grace");
    if (pre) {
        expect(pre->effectiveness.aem <= 0.05, "pre_edit effectiveness AEM", "<= 0.05",
               pre->effectiveness.aem);
        expect(pre->specificity.aem == 1.0, "pre_edit specificity AEM", "== 1.0",
               pre->specificity.aem);
    }
    if (ada) {
        expect(ada->effectiveness.aem >= 0.90, "adalora effectiveness AEM", ">= 0.90",
               ada->effectiveness.aem);
        expect(ada->generalization.aem >= 0.70, "adalora generalization AEM", ">= 0.70",
               ada->generalization.aem);
    }
    if (grace) {
        expect(grace->effectiveness.aem >= 0.95, "grace effectiveness AEM", ">= 0.95",
               grace->effectiveness.aem);
        expect(grace->specificity.aem >= 0.99, "grace specificity AEM", ">= 0.99",
               grace->specificity.aem);
        if (pre)
            expect(grace->portability.aem <= 0.10 + pre->portability.aem, "grace portability AEM",
                   "<= pre_edit + 0.10", grace->portability.aem);
    }
    if (ada && adal) {
        expect(adal->specificity.aem > ada->specificity.aem, "adalora_l specificity AEM",
               "> adalora", adal->specificity.aem);
        expect(std::abs(adal->effectiveness.aem - ada->effectiveness.aem) <= 0.05,
               "adalora_l effectiveness AEM", "within 0.05 of adalora", adal->effectiveness.aem);
        expect(adal->mean_edit_ms <= ada->mean_edit_ms, "adalora_l mean edit ms", "<= adalora",
               adal->mean_edit_ms);
    }
    return failures;
}

int cmd_run(const ProjectConfig& cfg, const std::string& editors_list, bool assert_gates,
            const std::string& out_dir) {
    TransformerLM model = TransformerLM::load_checkpoint(cfg.checkpoint_path());
    Benchmark bench = load_benchmark(cfg.benchmark_path(), cfg.manifest_path());

    RunConfig run = cfg.run;
    run.editors.clear();
    std::vector<std::string> names = editors_list.empty()
                                         ? std::vector<std::string>{"pre_edit", "ft_l", "lora",
                                                                    "adalora", "grace", "adalora_l"}
                                         : split_list(editors_list);
    run.include_pre_edit = false;
    bool needs_layer_map = false;
    for (const std::string& name : names) {
        if (name == "pre_edit") {
            run.include_pre_edit = true;
            continue;
        }
        EditorConfig e = editor_config_from_name(cfg, name);
        e.n_common = cfg.layers.n_common;
        e.n_specific = cfg.layers.n_specific;
        needs_layer_map = needs_layer_map || e.method == EditMethod::AdaLoRA_L;
        run.editors.push_back(e);
    }

    std::optional<LayerMapResult> layer_map;
    if (needs_layer_map) {
        layer_map = load_layer_map(cfg.layer_map_path());
        if (!layer_map) {
            std::fprintf(stderr, "run: layer map cache missing; run `editlab layers` first\n");
            return 3;
        }
        if (layer_map->model_hash != hex64(model.params_hash()) ||
            layer_map->benchmark_hash != bench.manifest.benchmark_hash) {
            std::fprintf(stderr, "run: layer map cache does not match model/benchmark\n");
            return 3;
        }
        if (layer_map->map.n_common != cfg.layers.n_common ||
            layer_map->map.n_specific != cfg.layers.n_specific)
            layer_map->map = derive_layer_map(layer_map->profiles, cfg.layers.n_common,
                                              cfg.layers.n_specific, layer_map->n_layers);
    }

    std::vector<EditReport> reports;
    try {
        reports = run_experiment(model, bench, run, layer_map ? &layer_map->map : nullptr);
    } catch (const QualityError& e) {
        std::fprintf(stderr, "run: %s\n", e.what());
        return 3;
    }

    const std::string dir = out_dir.empty() ? cfg.reports_dir_path() : out_dir;
    fs::create_directories(dir);
    const std::string prov = provenance_line(cfg, bench.manifest.model_hash,
                                             bench.manifest.benchmark_hash);
    write_file(dir + "/report.csv", prov + report_csv(reports));
    write_file(dir + "/report.md", report_markdown(reports));
    write_file(dir + "/profile.csv", prov + profile_csv(reports));
    std::printf("%s", report_markdown(reports).c_str());
    for (const EditReport& r : reports)
        std::printf("%-10s mean edit %.1f ms, peak %.1f MB\n", r.editor.c_str(), r.mean_edit_ms,
                    r.mean_peak_bytes / 1e6);

    if (assert_gates) {
        const auto failures = check_gates(reports);
        for (const GateFailure& f : failures)
            std::fprintf(stderr, "GATE FAIL %s: expected %s, observed %s\n", f.name.c_str(),
                         f.expected.c_str(), f.observed.c_str());
        if (!failures.empty()) return 4;
        std::printf("all gates passed\n");
    }
    return 0;
}

// ---- sweep ----

int cmd_sweep(const ProjectConfig& cfg, const std::string& common_csv,
              const std::string& specific_csv, int sweep_runs, const std::string& out_dir) {
    TransformerLM model = TransformerLM::load_checkpoint(cfg.checkpoint_path());
    Benchmark bench = load_benchmark(cfg.benchmark_path(), cfg.manifest_path());
    auto layer_map = load_layer_map(cfg.layer_map_path());
    if (!layer_map) {
        std::fprintf(stderr, "sweep: layer map cache missing; run `editlab layers` first\n");
        return 3;
    }
    if (layer_map->model_hash != hex64(model.params_hash()) ||
        layer_map->benchmark_hash != bench.manifest.benchmark_hash) {
        std::fprintf(stderr, "sweep: layer map cache does not match model/benchmark\n");
        return 3;
    }

    std::vector<int> common_range = common_csv.empty() ? std::vector<int>{cfg.layers.n_common}
                                                       : parse_int_list(common_csv);
    std::vector<int> specific_range = specific_csv.empty()
                                          ? std::vector<int>{1, 2, 4, 6, 8, 10}
                                          : parse_int_list(specific_csv);

    RunConfig run = cfg.run;
    run.n_runs = sweep_runs;
    run.include_pre_edit = false;
    run.editors.clear();

    EditorConfig editor = editor_config_from_name(cfg, "adalora_l");
    const auto points = sweep_layers(model, bench, layer_map->profiles, editor, common_range,
                                     specific_range, run);
    for (const SweepPoint& p : points)
        if (p.skipped) std::printf("skipped grid point: %s\n", p.note.c_str());

    const std::string dir = out_dir.empty() ? cfg.reports_dir_path() : out_dir;
    fs::create_directories(dir);
    write_file(dir + "/sweep.csv",
               provenance_line(cfg, bench.manifest.model_hash, bench.manifest.benchmark_hash) +
                   sweep_csv(points));
    std::printf("sweep: %zu grid points written\n", points.size());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale model-editing laboratory for deprecated-API updates"};
    app.require_subcommand(1);

    GlobalFlags flags;
    app.add_option("--config", flags.config_path, "project config JSON");
    app.add_option("--workdir", flags.workdir, "working directory (env EDITLAB_WORKDIR)");
    app.add_option("--seed", flags.seed, "override base seeds");
    app.add_option("--runs", flags.runs, "override number of runs");
    app.add_option("--workers", flags.workers, "parallel worker count");
    app.add_option("--out", flags.out_dir, "output directory for reports");
    app.add_option("--editors", flags.editors_list, "comma-separated editor list");
    app.add_flag("--assert", flags.assert_gates, "enforce acceptance gates (nonzero exit)");
    app.add_flag("--no-cache", flags.no_cache, "recompute cached layer maps");

    auto* train = app.add_subcommand("train", "train the base model, write a checkpoint");
    auto* bench = app.add_subcommand("bench", "construct the four-suite benchmark");
    auto* layers = app.add_subcommand("layers", "compute the Common/Specific layer map");
    auto* runcmd = app.add_subcommand("run", "edit + evaluate all configured editors");
    auto* sweep = app.add_subcommand("sweep", "AdaLoRA-L layer-count sweeps");
    std::string common_csv, specific_csv;
    int sweep_runs = 1;
    sweep->add_option("--common", common_csv, "comma-separated n_common values");
    sweep->add_option("--specific", specific_csv, "comma-separated n_specific values");
    sweep->add_option("--sweep-runs", sweep_runs, "runs per grid point");

    CLI11_PARSE(app, argc, argv);

    try {
        const ProjectConfig cfg = resolve_config(flags);
        if (train->parsed()) return cmd_train(cfg);
        if (bench->parsed()) return cmd_bench(cfg);
        if (layers->parsed()) return cmd_layers(cfg, flags.no_cache);
        if (runcmd->parsed()) return cmd_run(cfg, flags.editors_list, flags.assert_gates, flags.out_dir);
        if (sweep->parsed()) return cmd_sweep(cfg, common_csv, specific_csv, sweep_runs, flags.out_dir);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "unexpected error: %s\n", e.what());
        return 1;
    }
    return 0;
}
