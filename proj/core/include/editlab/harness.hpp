#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "editlab/benchgen.hpp"
#include "editlab/editors.hpp"
#include "editlab/layer_select.hpp"
#include "editlab/metrics.hpp"
#include "editlab/model.hpp"

namespace editlab {

// Per-dimension scores for one instance under one (possibly edited) model.
struct InstanceScores {
    MetricRecord effectiveness;
    MetricRecord generalization;
    std::optional<MetricRecord> portability;  // absent when the suite has no entry
    MetricRecord specificity;
};

// One full pass over the benchmark with one editor seed.
struct RunResult {
    std::uint64_t seed = 0;
    MetricRecord effectiveness, generalization, portability, specificity;
    double mean_edit_ms = 0.0;
    double mean_peak_bytes = 0.0;
    int count_effectiveness = 0, count_generalization = 0, count_portability = 0,
        count_specificity = 0;
};

// Median-of-runs report for one editor, Tables 4-6 row shape.
struct EditReport {
    std::string editor;
    MetricRecord effectiveness, generalization, portability, specificity;
    double mean_edit_ms = 0.0;
    double mean_peak_bytes = 0.0;
    int n_runs = 0;
    std::vector<std::uint64_t> seeds;
    std::vector<RunResult> runs;  // retained per-run data
    int count_effectiveness = 0, count_generalization = 0, count_portability = 0,
        count_specificity = 0;
};

struct RunConfig {
    int n_runs = 5;
    std::uint64_t base_seed = 1234;  // run r uses base_seed + r
    int workers = 2;
    bool include_pre_edit = true;
    bool revalidate = true;
    int max_new_tokens = 16;
    std::vector<EditorConfig> editors;
};

// Greedy-decodes all four suites on a model that carries (at most) one edit.
InstanceScores evaluate_instance(const TransformerLM& model, const EditInstance& instance,
                                 const EvalSuite& suite, int newline_ix, int max_new);

// Per-instance edit -> evaluate -> rollback over the whole benchmark,
// aggregated as the elementwise median over n_runs passes.
EditReport evaluate_editor(const TransformerLM& base, const Benchmark& bench,
                           const EditorConfig& editor, const RunConfig& run,
                           const ApiLayerMap* layer_map);

// Baseline row: the unedited model evaluated as-if-edited.
EditReport evaluate_pre_edit(const TransformerLM& base, const Benchmark& bench,
                             const RunConfig& run);

// Refuses to run on a model/benchmark hash mismatch. The pre-edit baseline
// row comes first when requested.
std::vector<EditReport> run_experiment(const TransformerLM& base, const Benchmark& bench,
                                       const RunConfig& run, const ApiLayerMap* layer_map);

// Wall time (ms) and peak transient bytes around edit() only; the edit is
// rolled back before returning.
std::pair<double, double> profile_edit(TransformerLM& model, const EditInstance& instance,
                                       const EditorConfig& editor, const ApiLayerMap* layer_map);

struct SweepPoint {
    int n_common = 0;
    int n_specific = 0;
    bool skipped = false;
    std::string note;
    EditReport report;
};

// One AdaLoRA-L report per feasible (n_common, n_specific) grid point; the
// layer map is re-derived from the cached profiles at every point.
std::vector<SweepPoint> sweep_layers(const TransformerLM& base, const Benchmark& bench,
                                     const std::vector<LayerImportanceProfile>& profiles,
                                     const EditorConfig& editor, std::span<const int> common_range,
                                     std::span<const int> specific_range, const RunConfig& run);

// ---- small numeric helpers ----

double median(std::vector<double> values);
// Spearman rank correlation with average ranks on ties.
double spearman(std::span<const double> a, std::span<const double> b);

// Checks that the report's headline numbers equal the elementwise median of
// its retained per-run results; throws ContractError otherwise.
void verify_median_protocol(const EditReport& report);

// ---- renderers ----

// Deterministic metric outputs (no timing data).
std::string report_csv(std::span<const EditReport> reports);
std::string report_markdown(std::span<const EditReport> reports);
// RQ2 analog; wall times are inherently non-deterministic, kept separate.
std::string profile_csv(std::span<const EditReport> reports);
std::string sweep_csv(std::span<const SweepPoint> points);

}  // namespace editlab
