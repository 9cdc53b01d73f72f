#include "editlab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "editlab/hash.hpp"
#include "editlab/parallel.hpp"

namespace editlab {

namespace {

MetricRecord mean_records(std::span<const MetricRecord> records) {
    MetricRecord out;
    if (records.empty()) return out;
    for (const MetricRecord& r : records) {
        out.em += r.em;
        out.aem += r.aem;
        out.bleu += r.bleu;
        out.rouge_l += r.rouge_l;
    }
    const double n = static_cast<double>(records.size());
    out.em /= n;
    out.aem /= n;
    out.bleu /= n;
    out.rouge_l /= n;
    return out;
}

}  // namespace

InstanceScores evaluate_instance(const TransformerLM& model, const EditInstance& instance,
                                 const EvalSuite& suite, int newline_ix, int max_new) {
    InstanceScores s;
    const auto cx = complete_line(model, instance.input, newline_ix, max_new);
    s.effectiveness = score_line(cx, instance.target_line, instance.target);

    const auto cg = complete_line(model, suite.generalization, newline_ix, max_new);
    s.generalization = score_line(cg, suite.generalization_target_line, instance.target);

    if (!suite.portability.empty()) {
        std::vector<MetricRecord> recs;
        for (const PortRecord& p : suite.portability) {
            const auto cp = complete_line(model, p.input, newline_ix, max_new);
            recs.push_back(score_line(cp, p.target_line, instance.target));
        }
        s.portability = mean_records(recs);
    }

    std::vector<MetricRecord> recs;
    for (const SpecRecord& r : suite.specificity) {
        const auto cu = complete_line(model, r.input, newline_ix, max_new);
        recs.push_back(score_line(cu, r.truth, r.api));
    }
    s.specificity = mean_records(recs);
    return s;
}

namespace {

struct PassResult {
    std::vector<InstanceScores> scores;
    std::vector<double> edit_ms;
    std::vector<double> peak_bytes;
};

// One full pass: per instance edit -> evaluate four suites -> rollback, on
// cloned models, results joined in instance order.
PassResult run_pass(const TransformerLM& base, const Benchmark& bench,
                    const std::optional<EditorConfig>& editor, const RunConfig& run,
                    const ApiLayerMap* layer_map, int newline_ix) {
    PassResult out;
    out.scores.resize(bench.instances.size());
    out.edit_ms.assign(bench.instances.size(), 0.0);
    out.peak_bytes.assign(bench.instances.size(), 0.0);

    const std::uint64_t base_hash = base.params_hash();
    const int workers = std::max(1, run.workers);
    std::vector<TransformerLM> clones;
    for (int w = 0; w < workers; ++w) clones.push_back(base.clone());

    parallel_indices(bench.instances.size(), workers, [&](std::size_t i, int w) {
        TransformerLM& model = clones[static_cast<std::size_t>(w)];
        if (editor) {
            const std::size_t before_bytes = memtrack::live_bytes();
            memtrack::reset_peak();
            const auto t0 = std::chrono::steady_clock::now();
            EditHandle handle = edit(model, bench.instances[i], *editor, layer_map);
            const auto t1 = std::chrono::steady_clock::now();
            out.edit_ms[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
            out.peak_bytes[i] =
                static_cast<double>(memtrack::peak_bytes() - std::min(memtrack::peak_bytes(), before_bytes));
            out.scores[i] = evaluate_instance(model, bench.instances[i], bench.suites[i],
                                              newline_ix, run.max_new_tokens);
            rollback(model, handle);
            if (model.params_hash() != base_hash || model.has_hooks())
                throw EditError("run_pass: rollback corrupted the model for instance " +
                                bench.instances[i].id);
        } else {
            out.scores[i] = evaluate_instance(model, bench.instances[i], bench.suites[i],
                                              newline_ix, run.max_new_tokens);
        }
    });
    return out;
}

RunResult reduce_pass(const PassResult& pass, const Benchmark& bench, std::uint64_t seed) {
    RunResult r;
    r.seed = seed;
    std::vector<MetricRecord> eff, gen, port, spec;
    for (const InstanceScores& s : pass.scores) {
        eff.push_back(s.effectiveness);
        gen.push_back(s.generalization);
        if (s.portability) port.push_back(*s.portability);
        spec.push_back(s.specificity);
    }
    r.effectiveness = mean_records(eff);
    r.generalization = mean_records(gen);
    r.portability = mean_records(port);
    r.specificity = mean_records(spec);
    r.count_effectiveness = static_cast<int>(eff.size());
    r.count_generalization = static_cast<int>(gen.size());
    r.count_portability = static_cast<int>(port.size());
    r.count_specificity = 0;
    for (const EvalSuite& s : bench.suites)
        r.count_specificity += static_cast<int>(s.specificity.size());
    r.mean_edit_ms = pass.edit_ms.empty()
                         ? 0.0
                         : std::accumulate(pass.edit_ms.begin(), pass.edit_ms.end(), 0.0) /
                               static_cast<double>(pass.edit_ms.size());
    r.mean_peak_bytes = pass.peak_bytes.empty()
                            ? 0.0
                            : std::accumulate(pass.peak_bytes.begin(), pass.peak_bytes.end(), 0.0) /
                                  static_cast<double>(pass.peak_bytes.size());
    return r;
}

void check_counts(const RunResult& r, const Benchmark& bench) {
    const Manifest& man = bench.manifest;
    if (r.count_effectiveness != man.count_effectiveness ||
        r.count_generalization != man.count_generalization ||
        r.count_portability != man.count_portability ||
        r.count_specificity != man.count_specificity)
        throw ContractError("harness: per-dimension instance counts disagree with the manifest");
}

EditReport fold_runs(std::string editor_name, std::vector<RunResult> runs) {
    EditReport rep;
    rep.editor = std::move(editor_name);
    rep.n_runs = static_cast<int>(runs.size());
    for (const RunResult& r : runs) rep.seeds.push_back(r.seed);

    auto med = [&](auto getter) {
        std::vector<double> v;
        v.reserve(runs.size());
        for (const RunResult& r : runs) v.push_back(getter(r));
        return median(std::move(v));
    };
    auto med_rec = [&](auto member) {
        MetricRecord out;
        out.em = med([&](const RunResult& r) { return (r.*member).em; });
        out.aem = med([&](const RunResult& r) { return (r.*member).aem; });
        out.bleu = med([&](const RunResult& r) { return (r.*member).bleu; });
        out.rouge_l = med([&](const RunResult& r) { return (r.*member).rouge_l; });
        return out;
    };
    rep.effectiveness = med_rec(&RunResult::effectiveness);
    rep.generalization = med_rec(&RunResult::generalization);
    rep.portability = med_rec(&RunResult::portability);
    rep.specificity = med_rec(&RunResult::specificity);
    rep.mean_edit_ms = med([](const RunResult& r) { return r.mean_edit_ms; });
    rep.mean_peak_bytes = med([](const RunResult& r) { return r.mean_peak_bytes; });
    rep.count_effectiveness = runs.front().count_effectiveness;
    rep.count_generalization = runs.front().count_generalization;
    rep.count_portability = runs.front().count_portability;
    rep.count_specificity = runs.front().count_specificity;
    rep.runs = std::move(runs);
    return rep;
}

}  // namespace

EditReport evaluate_editor(const TransformerLM& base, const Benchmark& bench,
                           const EditorConfig& editor, const RunConfig& run,
                           const ApiLayerMap* layer_map) {
    SyntheticGenerator gen(bench.mappings);
    const int newline_ix = gen.vocab().newline();
    std::vector<RunResult> runs;
    for (int r = 0; r < run.n_runs; ++r) {
        EditorConfig cfg = editor;
        cfg.seed = run.base_seed + static_cast<std::uint64_t>(r);
        PassResult pass = run_pass(base, bench, cfg, run, layer_map, newline_ix);
        RunResult rr = reduce_pass(pass, bench, cfg.seed);
        check_counts(rr, bench);
        runs.push_back(std::move(rr));
    }
    return fold_runs(method_name(editor.method), std::move(runs));
}

EditReport evaluate_pre_edit(const TransformerLM& base, const Benchmark& bench,
                             const RunConfig& run) {
    SyntheticGenerator gen(bench.mappings);
    // deterministic greedy: a single pass is exact
    PassResult pass = run_pass(base, bench, std::nullopt, run, nullptr, gen.vocab().newline());
    RunResult rr = reduce_pass(pass, bench, run.base_seed);
    check_counts(rr, bench);
    return fold_runs("pre_edit", {std::move(rr)});
}

std::vector<EditReport> run_experiment(const TransformerLM& base, const Benchmark& bench,
                                       const RunConfig& run, const ApiLayerMap* layer_map) {
    if (hex64(base.params_hash()) != bench.manifest.model_hash)
        throw QualityError("run_experiment: model hash does not match the benchmark manifest");
    if (run.revalidate) revalidate_benchmark(base, bench, run.workers);

    std::vector<EditReport> reports;
    if (run.include_pre_edit) reports.push_back(evaluate_pre_edit(base, bench, run));
    for (const EditorConfig& editor : run.editors)
        reports.push_back(evaluate_editor(base, bench, editor, run, layer_map));
    return reports;
}

std::pair<double, double> profile_edit(TransformerLM& model, const EditInstance& instance,
                                       const EditorConfig& editor, const ApiLayerMap* layer_map) {
    const std::size_t before = memtrack::live_bytes();
    memtrack::reset_peak();
    const auto t0 = std::chrono::steady_clock::now();
    EditHandle handle = edit(model, instance, editor, layer_map);
    const auto t1 = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    const double bytes =
        static_cast<double>(memtrack::peak_bytes() - std::min(memtrack::peak_bytes(), before));
    rollback(model, handle);
    return {ms, bytes};
}

std::vector<SweepPoint> sweep_layers(const TransformerLM& base, const Benchmark& bench,
                                     const std::vector<LayerImportanceProfile>& profiles,
                                     const EditorConfig& editor, std::span<const int> common_range,
                                     std::span<const int> specific_range, const RunConfig& run) {
    const int n_layers = base.config().n_layers;
    std::vector<SweepPoint> out;
    for (int c : common_range) {
        for (int s : specific_range) {
            SweepPoint point;
            point.n_common = c;
            point.n_specific = s;
            if (c < 0 || c >= n_layers || s <= 0 || c + s > n_layers) {
                point.skipped = true;
                point.note = "infeasible: n_common=" + std::to_string(c) +
                             " n_specific=" + std::to_string(s) + " with " +
                             std::to_string(n_layers) + " layers";
                out.push_back(std::move(point));
                continue;
            }
            const ApiLayerMap map = derive_layer_map(profiles, c, s, n_layers);
            EditorConfig cfg = editor;
            cfg.method = EditMethod::AdaLoRA_L;
            cfg.n_common = c;
            cfg.n_specific = s;
            point.report = evaluate_editor(base, bench, cfg, run, &map);
            out.push_back(std::move(point));
        }
    }
    return out;
}

double median(std::vector<double> values) {
    if (values.empty()) throw ContractError("median: empty input");
    std::sort(values.begin(), values.end());
    const std::size_t n = values.size();
    if (n % 2 == 1) return values[n / 2];
    return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.size() < 2)
        throw ContractError("spearman: need two equally sized samples");
    auto ranks = [](std::span<const double> v) {
        const std::size_t n = v.size();
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
        std::vector<double> r(n, 0.0);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
            const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
            for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    const std::vector<double> ra = ranks(a);
    const std::vector<double> rb = ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0, va = 0, vb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (va == 0.0 || vb == 0.0) return 0.0;
    return cov / std::sqrt(va * vb);
}

void verify_median_protocol(const EditReport& report) {
    auto check = [&](double reported, auto getter) {
        std::vector<double> v;
        for (const RunResult& r : report.runs) v.push_back(getter(r));
        if (median(std::move(v)) != reported)
            throw ContractError("report: headline value is not the median of its runs");
    };
    check(report.effectiveness.aem, [](const RunResult& r) { return r.effectiveness.aem; });
    check(report.effectiveness.em, [](const RunResult& r) { return r.effectiveness.em; });
    check(report.generalization.aem, [](const RunResult& r) { return r.generalization.aem; });
    check(report.portability.aem, [](const RunResult& r) { return r.portability.aem; });
    check(report.specificity.aem, [](const RunResult& r) { return r.specificity.aem; });
    check(report.specificity.bleu, [](const RunResult& r) { return r.specificity.bleu; });
}

namespace {

std::string fmt_full(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_x100(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.1f", v * 100.0);
    return buf;
}

}  // namespace

std::string report_csv(std::span<const EditReport> reports) {
    std::string out = "editor,dimension,metric,value\n";
    const char* dims[] = {"effectiveness", "generalization", "portability", "specificity"};
    for (const EditReport& rep : reports) {
        const MetricRecord* recs[] = {&rep.effectiveness, &rep.generalization, &rep.portability,
                                      &rep.specificity};
        for (int d = 0; d < 4; ++d) {
            out += rep.editor;
            out += ',';
            out += dims[d];
            out += ",aem," + fmt_full(recs[d]->aem) + "\n";
            out += rep.editor;
            out += ',';
            out += dims[d];
            out += ",em," + fmt_full(recs[d]->em) + "\n";
            out += rep.editor;
            out += ',';
            out += dims[d];
            out += ",bleu," + fmt_full(recs[d]->bleu) + "\n";
            out += rep.editor;
            out += ',';
            out += dims[d];
            out += ",rouge_l," + fmt_full(recs[d]->rouge_l) + "\n";
        }
    }
    return out;
}

std::string report_markdown(std::span<const EditReport> reports) {
    std::string out;
    out += "| Editor | Effectiveness AEM | EM | BU | RL | Generalization AEM | EM | BU | RL |"
           " Portability AEM | EM | BU | RL | Specificity AEM | EM | BU | RL |\n";
    out += "|---|---|---|---|---|---|---|---|---|---|---|---|---|---|---|---|---|\n";
    for (const EditReport& rep : reports) {
        out += "| " + rep.editor + " |";
        for (const MetricRecord* rec : {&rep.effectiveness, &rep.generalization, &rep.portability,
                                        &rep.specificity}) {
            out += " " + fmt_x100(rec->aem) + " | " + fmt_x100(rec->em) + " | " +
                   fmt_x100(rec->bleu) + " | " + fmt_x100(rec->rouge_l) + " |";
        }
        out += "\n";
    }
    return out;
}

std::string profile_csv(std::span<const EditReport> reports) {
    std::string out = "editor,mean_edit_ms,mean_peak_bytes,n_runs\n";
    for (const EditReport& rep : reports) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%s,%.3f,%.0f,%d\n", rep.editor.c_str(), rep.mean_edit_ms,
                      rep.mean_peak_bytes, rep.n_runs);
        out += buf;
    }
    return out;
}

std::string sweep_csv(std::span<const SweepPoint> points) {
    std::string out = "n_common,n_specific,dimension,metric,value\n";
    const char* dims[] = {"effectiveness", "generalization", "portability", "specificity"};
    for (const SweepPoint& p : points) {
        if (p.skipped) continue;
        const MetricRecord* recs[] = {&p.report.effectiveness, &p.report.generalization,
                                      &p.report.portability, &p.report.specificity};
        for (int d = 0; d < 4; ++d) {
            const std::string prefix =
                std::to_string(p.n_common) + "," + std::to_string(p.n_specific) + "," + dims[d];
            out += prefix + ",aem," + fmt_full(recs[d]->aem) + "\n";
            out += prefix + ",em," + fmt_full(recs[d]->em) + "\n";
            out += prefix + ",bleu," + fmt_full(recs[d]->bleu) + "\n";
            out += prefix + ",rouge_l," + fmt_full(recs[d]->rouge_l) + "\n";
        }
    }
    return out;
}

}  // namespace editlab
