#include "editlab/benchgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "editlab/hash.hpp"
#include "editlab/parallel.hpp"

namespace editlab {

using json = nlohmann::json;

namespace {

const char* kLibraryNames[] = {"vex", "trax", "ocra", "plum", "kilo", "mira", "nolo"};

const char* kVerbs[] = {"svd",   "qr",   "norm", "fit",  "scale", "merge", "split", "stack",
                        "cast",  "pad",  "clip", "rank", "fold",  "trim",  "mask",  "bind",
                        "plan",  "walk", "tune", "sort", "join",  "probe", "score", "slice",
                        "weave", "pick", "drop", "wrap", "melt",  "spin",  "tag",   "lift"};

bool contains_subseq(std::span<const int> haystack, std::span<const int> needle) {
    if (needle.empty() || haystack.size() < needle.size()) return false;
    for (std::size_t i = 0; i + needle.size() <= haystack.size(); ++i)
        if (std::equal(needle.begin(), needle.end(), haystack.begin() + static_cast<std::ptrdiff_t>(i)))
            return true;
    return false;
}

}  // namespace

std::string api_id(const ApiMapping& m) {
    std::string id;
    for (const std::string& t : m.deprecated) id += t;
    return id;
}

std::vector<ApiMapping> default_mappings(int n_mappings, int n_libraries) {
    if (n_mappings <= 0 || n_libraries <= 0 || n_libraries > 7)
        throw ConfigError("default_mappings: need 1..7 libraries and a positive mapping count");
    if (n_mappings > static_cast<int>(std::size(kVerbs)))
        throw ConfigError("default_mappings: at most 32 mappings are supported");
    std::vector<ApiMapping> out;
    out.reserve(static_cast<std::size_t>(n_mappings));
    for (int j = 0; j < n_mappings; ++j) {
        const std::string lib = kLibraryNames[j % n_libraries];
        const std::string verb = kVerbs[j];
        ApiMapping m;
        m.library = lib;
        m.deprecated = {lib, ".", verb};
        // every third mapping moves into a submodule, like real API migrations
        if (j % 3 == 2)
            m.updated = {lib, ".", "core", ".", verb + "2"};
        else
            m.updated = {lib, ".", verb + "2"};
        out.push_back(std::move(m));
    }
    return out;
}

// ---- SyntheticGenerator ----

SyntheticGenerator::SyntheticGenerator(std::vector<ApiMapping> mappings)
    : mappings_(std::move(mappings)) {
    if (mappings_.empty()) throw ConfigError("generator: empty mapping table");
    // mappings must be pairwise disjoint and internally distinct
    std::set<std::vector<std::string>> seen;
    for (const ApiMapping& m : mappings_) {
        if (m.deprecated.empty() || m.updated.empty() || m.deprecated == m.updated)
            throw ConfigError("generator: malformed mapping " + api_id(m));
        if (!seen.insert(m.deprecated).second || !seen.insert(m.updated).second)
            throw ConfigError("generator: mappings are not pairwise disjoint");
    }

    // structural tokens
    def_ix_ = vocab_.add("def");
    lparen_ix_ = vocab_.add("(");
    rparen_ix_ = vocab_.add(")");
    colon_ix_ = vocab_.add(":");
    comma_ix_ = vocab_.add(",");
    assign_ix_ = vocab_.add("=");
    vocab_.add(".");
    return_ix_ = vocab_.add("return");
    res_ix_ = vocab_.add("res");
    use_ix_ = vocab_.add("use");
    vocab_.set_newline(vocab_.add("<NL>"));
    vocab_.set_end_fn(vocab_.add("<END>"));

    for (int i = 0; i < 10; ++i) lit_ixs_.push_back(vocab_.add(std::to_string(i)));
    for (int i = 0; i < 32; ++i) fn_ixs_.push_back(vocab_.add("fn" + std::to_string(i)));
    for (int i = 0; i < 8; ++i) param_ixs_.push_back(vocab_.add("p" + std::to_string(i)));
    for (int i = 0; i < 20; ++i) var_ixs_.push_back(vocab_.add("v" + std::to_string(i)));

    std::vector<std::string> libs;
    for (const ApiMapping& m : mappings_)
        if (std::find(libs.begin(), libs.end(), m.library) == libs.end()) libs.push_back(m.library);
    for (const std::string& lib : libs) vocab_.add(lib);
    vocab_.add("core");

    for (const ApiMapping& m : mappings_) {
        for (const std::string& t : m.deprecated) vocab_.add(t);
        for (const std::string& t : m.updated) vocab_.add(t);
    }

    helper_ixs_.reserve(mappings_.size());
    for (const ApiMapping& m : mappings_) {
        const std::string verb = m.deprecated.back();
        helper_ixs_.push_back({vocab_.add("prep_" + verb), vocab_.add("init_" + verb),
                               vocab_.add("load_" + verb)});
    }
    lib_helper_ixs_.reserve(libs.size());
    for (const std::string& lib : libs)
        lib_helper_ixs_.push_back({vocab_.add(lib + "_ctx"), vocab_.add(lib + "_cfg")});

    dep_ixs_.reserve(mappings_.size());
    upd_ixs_.reserve(mappings_.size());
    std::vector<std::string> lib_order = libs;
    for (const ApiMapping& m : mappings_) {
        std::vector<int> d, u;
        for (const std::string& t : m.deprecated) d.push_back(vocab_.index(t));
        for (const std::string& t : m.updated) u.push_back(vocab_.index(t));
        dep_ixs_.push_back(std::move(d));
        upd_ixs_.push_back(std::move(u));
    }
    // remap per-library helpers to per-mapping lookup order
    std::vector<std::array<int, 2>> by_lib = lib_helper_ixs_;
    lib_helper_ixs_.clear();
    for (const ApiMapping& m : mappings_) {
        const std::size_t li = static_cast<std::size_t>(
            std::find(lib_order.begin(), lib_order.end(), m.library) - lib_order.begin());
        lib_helper_ixs_.push_back(by_lib[li]);
    }
}

std::span<const int> SyntheticGenerator::deprecated_ixs(int mapping) const {
    return dep_ixs_[static_cast<std::size_t>(mapping)];
}
std::span<const int> SyntheticGenerator::updated_ixs(int mapping) const {
    return upd_ixs_[static_cast<std::size_t>(mapping)];
}

bool SyntheticGenerator::is_var(int ix) const {
    return std::find(var_ixs_.begin(), var_ixs_.end(), ix) != var_ixs_.end();
}
bool SyntheticGenerator::is_param(int ix) const {
    return std::find(param_ixs_.begin(), param_ixs_.end(), ix) != param_ixs_.end();
}
bool SyntheticGenerator::is_fn(int ix) const {
    return std::find(fn_ixs_.begin(), fn_ixs_.end(), ix) != fn_ixs_.end();
}

SyntheticGenerator::FuncTokens SyntheticGenerator::make_function(int mapping, bool deprecated_form,
                                                                 bool bench_templates,
                                                                 Rng& rng) const {
    const std::size_t mi = static_cast<std::size_t>(mapping);
    const int nl = vocab_.newline();
    FuncTokens out;
    auto& toks = out.tokens;

    const int fn_name = fn_ixs_[rng.uniform_int(fn_ixs_.size())];
    const int p0 = param_ixs_[rng.uniform_int(param_ixs_.size())];
    int p1 = p0;
    while (p1 == p0) p1 = param_ixs_[rng.uniform_int(param_ixs_.size())];

    toks.insert(toks.end(),
                {def_ix_, fn_name, lparen_ix_, p0, comma_ix_, p1, rparen_ix_, colon_ix_, nl});

    // A quarter of corpus functions mention the up-to-date API in a `use`
    // pragma right after the def line: the pre-edit model learns those token
    // vectors without ever invoking them (real corpora mention new APIs in
    // docs and imports while the code keeps calling the deprecated ones).
    // Benchmark prompts never carry pragmas, so completions are unaffected.
    if (!bench_templates && deprecated_form && rng.uniform_int(4) == 0) {
        toks.push_back(use_ix_);
        toks.insert(toks.end(), upd_ixs_[mi].begin(), upd_ixs_[mi].end());
        toks.push_back(nl);
    }

    // Context statements correlate with the API through prep_/init_/load_
    // helper tokens. Training draws shapes 0-4 (every helper token appears
    // there); benchmark prompts draw the held-out shapes 5-8, which reuse
    // the same tokens with different argument patterns. Corpus functions
    // carry 2..5 statements, benchmark prompts 2..3.
    const int n_stmts = bench_templates ? 2 + static_cast<int>(rng.uniform_int(2))
                                        : 2 + static_cast<int>(rng.uniform_int(4));
    std::vector<int> unused_vars = var_ixs_;
    rng.shuffle(unused_vars);
    int prev = rng.uniform_int(2) ? p0 : p1;
    const auto& helpers = helper_ixs_[mi];
    const auto& lib_helpers = lib_helper_ixs_[mi];

    for (int s = 0; s < n_stmts; ++s) {
        const int v_new = unused_vars.back();
        unused_vars.pop_back();
        // the first statement is always verb-specific so every prompt
        // carries an unambiguous API cue
        int tmpl;
        if (bench_templates)
            tmpl = s == 0 ? 5 + static_cast<int>(rng.uniform_int(3))
                          : 5 + static_cast<int>(rng.uniform_int(4));
        else
            tmpl = s == 0 ? static_cast<int>(rng.uniform_int(3))
                          : static_cast<int>(rng.uniform_int(5));
        int callee = 0;
        bool two_args = false;
        switch (tmpl) {
            case 0: callee = helpers[0]; two_args = false; break;      // prep(v)
            case 1: callee = helpers[1]; two_args = true; break;       // init(v, lit)
            case 2: callee = helpers[2]; two_args = false; break;      // load(v)
            case 3: callee = lib_helpers[0]; two_args = false; break;  // ctx(v)
            case 4: callee = lib_helpers[1]; two_args = true; break;   // cfg(v, lit)
            case 5: callee = helpers[0]; two_args = true; break;       // prep(v, lit)
            case 6: callee = helpers[1]; two_args = false; break;      // init(v)
            case 7: callee = helpers[2]; two_args = true; break;       // load(v, lit)
            case 8: callee = lib_helpers[0]; two_args = true; break;   // ctx(v, lit)
        }
        toks.insert(toks.end(), {v_new, assign_ix_, callee, lparen_ix_, prev});
        if (two_args) {
            toks.push_back(comma_ix_);
            toks.push_back(lit_ixs_[rng.uniform_int(lit_ixs_.size())]);
        }
        toks.insert(toks.end(), {rparen_ix_, nl});
        prev = v_new;
    }

    out.invocation_start = toks.size();
    const auto& api = deprecated_form ? dep_ixs_[mi] : upd_ixs_[mi];
    toks.insert(toks.end(), {res_ix_, assign_ix_});
    toks.insert(toks.end(), api.begin(), api.end());
    toks.insert(toks.end(), {lparen_ix_, prev, rparen_ix_, nl});
    toks.insert(toks.end(), {return_ix_, res_ix_, nl, vocab_.end_fn()});
    return out;
}

std::vector<std::vector<int>> SyntheticGenerator::generate_corpus(int n_functions,
                                                                  std::uint64_t seed) const {
    std::vector<std::vector<int>> out;
    if (n_functions <= 0) return out;
    out.reserve(static_cast<std::size_t>(n_functions));
    Rng rng(seed);
    // balanced mapping schedule keeps per-API counts uniform
    std::vector<int> schedule;
    schedule.reserve(static_cast<std::size_t>(n_functions));
    for (int i = 0; i < n_functions; ++i) schedule.push_back(i % static_cast<int>(mappings_.size()));
    rng.shuffle(schedule);
    for (int m : schedule) out.push_back(make_function(m, /*deprecated=*/true, /*bench=*/false, rng).tokens);
    return out;
}

std::vector<EditInstance> SyntheticGenerator::collect_candidates(int n_per_api,
                                                                 std::uint64_t seed) const {
    std::vector<EditInstance> out;
    Rng rng(seed);
    for (std::size_t m = 0; m < mappings_.size(); ++m) {
        for (int k = 0; k < n_per_api; ++k) {
            FuncTokens f = make_function(static_cast<int>(m), /*deprecated=*/false,
                                         /*bench=*/true, rng);
            EditInstance inst;
            inst.id = api_id(mappings_[m]) + "#" + std::to_string(k);
            inst.mapping = static_cast<int>(m);
            inst.input.assign(f.tokens.begin(),
                              f.tokens.begin() + static_cast<std::ptrdiff_t>(f.invocation_start));
            inst.target.assign(upd_ixs_[m].begin(), upd_ixs_[m].end());
            inst.deprecated.assign(dep_ixs_[m].begin(), dep_ixs_[m].end());
            // target line runs up to and including its <NL>
            std::size_t line_end = f.invocation_start;
            while (f.tokens[line_end] != vocab_.newline()) ++line_end;
            inst.target_line.assign(f.tokens.begin() + static_cast<std::ptrdiff_t>(f.invocation_start),
                                    f.tokens.begin() + static_cast<std::ptrdiff_t>(line_end) + 1);
            inst.target_offset_in_line = 2;  // after "res ="
            out.push_back(std::move(inst));
        }
    }
    return out;
}

std::vector<PoolEntry> SyntheticGenerator::generate_pool(int n, std::uint64_t seed) const {
    std::vector<PoolEntry> out;
    out.reserve(static_cast<std::size_t>(std::max(0, n)));
    Rng rng(seed);
    std::vector<int> schedule;
    for (int i = 0; i < n; ++i) schedule.push_back(i % static_cast<int>(mappings_.size()));
    rng.shuffle(schedule);
    for (int m : schedule) {
        FuncTokens f = make_function(m, /*deprecated=*/true, /*bench=*/true, rng);
        out.push_back({m, std::move(f.tokens), f.invocation_start});
    }
    return out;
}

// ---- shared helpers ----

std::vector<int> complete_line(const TransformerLM& model, std::span<const int> input,
                               int newline_ix, int max_new) {
    return model.greedy_complete(input, newline_ix, max_new);
}

double deprecated_emission_rate(const TransformerLM& model, const SyntheticGenerator& gen,
                                const std::vector<EditInstance>& instances, int workers,
                                int max_new) {
    if (instances.empty()) return 0.0;
    std::vector<TransformerLM> clones;
    for (int w = 0; w < std::max(1, workers); ++w) clones.push_back(model.clone());
    std::vector<std::uint8_t> hit(instances.size(), 0);
    parallel_indices(instances.size(), workers, [&](std::size_t i, int w) {
        const auto completion = complete_line(clones[static_cast<std::size_t>(w)],
                                              instances[i].input, gen.vocab().newline(), max_new);
        hit[i] = contains_subseq(completion, instances[i].deprecated) ? 1 : 0;
    });
    std::size_t n = 0;
    for (std::uint8_t h : hit) n += h;
    return static_cast<double>(n) / static_cast<double>(instances.size());
}

std::vector<int> extract_api_reference(std::span<const int> completion,
                                       const SyntheticGenerator& gen) {
    std::vector<std::span<const int>> known;
    for (std::size_t m = 0; m < gen.mappings().size(); ++m) {
        known.push_back(gen.deprecated_ixs(static_cast<int>(m)));
        known.push_back(gen.updated_ixs(static_cast<int>(m)));
    }
    std::stable_sort(known.begin(), known.end(),
                     [](const auto& a, const auto& b) { return a.size() > b.size(); });
    for (const auto& api : known)
        if (contains_subseq(completion, api)) return std::vector<int>(api.begin(), api.end());
    return std::vector<int>(completion.begin(), completion.end());
}

// ---- Step 2: filtering ----

FilterResult filter_instances(const TransformerLM& model, const SyntheticGenerator& gen,
                              const std::vector<EditInstance>& candidates, int workers,
                              int max_new) {
    FilterResult res;
    res.n_candidates = static_cast<int>(candidates.size());
    std::vector<TransformerLM> clones;
    for (int w = 0; w < std::max(1, workers); ++w) clones.push_back(model.clone());
    std::vector<std::uint8_t> keep(candidates.size(), 0);
    parallel_indices(candidates.size(), workers, [&](std::size_t i, int w) {
        const TransformerLM& m = clones[static_cast<std::size_t>(w)];
        // three greedy completions; with temperature 0 this doubles as a
        // determinism consistency check
        bool ok = true;
        std::vector<int> first;
        for (int run = 0; run < 3 && ok; ++run) {
            auto c = complete_line(m, candidates[i].input, gen.vocab().newline(), max_new);
            if (run == 0) first = c;
            ok = c == first && contains_subseq(c, candidates[i].deprecated);
        }
        keep[i] = ok ? 1 : 0;
    });
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const std::string api = api_id(gen.mappings()[static_cast<std::size_t>(candidates[i].mapping)]);
        ++res.per_api_total[api];
        if (keep[i]) {
            ++res.per_api_kept[api];
            res.kept.push_back(candidates[i]);
        }
    }
    res.retention = candidates.empty()
                        ? 0.0
                        : static_cast<double>(res.kept.size()) / static_cast<double>(candidates.size());
    if (res.kept.empty()) {
        std::string diag = "filter_instances: no candidate survived; per-API counts:";
        for (const auto& [api, total] : res.per_api_total)
            diag += " " + api + "=0/" + std::to_string(total);
        throw QualityError(diag);
    }
    return res;
}

// ---- Step 3.2: rewriter ----

namespace {

struct ParsedInput {
    // token index ranges of each context statement (excluding the def line),
    // each ending just past its <NL>
    std::vector<std::pair<std::size_t, std::size_t>> stmts;
    std::size_t def_end = 0;  // one past the def line's <NL>
};

ParsedInput parse_input(std::span<const int> input, int newline_ix) {
    ParsedInput p;
    std::size_t pos = 0;
    while (pos < input.size() && input[pos] != newline_ix) ++pos;
    if (pos == input.size()) throw ContractError("rewriter: malformed input (no def line)");
    p.def_end = pos + 1;
    std::size_t start = p.def_end;
    for (std::size_t i = p.def_end; i < input.size(); ++i) {
        if (input[i] == newline_ix) {
            p.stmts.emplace_back(start, i + 1);
            start = i + 1;
        }
    }
    if (start != input.size()) throw ContractError("rewriter: trailing tokens after last statement");
    return p;
}

int defined_var(std::span<const int> input, std::pair<std::size_t, std::size_t> stmt) {
    return input[stmt.first];
}

bool stmt_uses(std::span<const int> input, std::pair<std::size_t, std::size_t> stmt, int var) {
    for (std::size_t i = stmt.first + 1; i < stmt.second; ++i)
        if (input[i] == var) return true;
    return false;
}

}  // namespace

namespace {

// Maps each used token to its successor in a seeded shuffle of the full
// pool: injective by construction and never a fixed point.
void cyclic_renames(std::span<const int> input, std::span<const int> pool_in,
                    const std::function<bool(int)>& in_class, Rng& rng,
                    std::vector<std::pair<int, int>>& out) {
    std::vector<int> used;
    for (int t : input)
        if (in_class(t) && std::find(used.begin(), used.end(), t) == used.end()) used.push_back(t);
    if (used.empty()) return;
    std::vector<int> pool(pool_in.begin(), pool_in.end());
    rng.shuffle(pool);
    for (int u : used) {
        const auto pos = static_cast<std::size_t>(
            std::find(pool.begin(), pool.end(), u) - pool.begin());
        out.emplace_back(u, pool[(pos + 1) % pool.size()]);
    }
}

}  // namespace

RewritePlan plan_rewrite(const SyntheticGenerator& gen, std::span<const int> input, int attempt,
                         Rng rng) {
    RewritePlan plan;
    plan.attempt = attempt;
    const ParsedInput parsed = parse_input(input, gen.vocab().newline());

    // R1: bijective renaming of the used local vars
    cyclic_renames(input, gen.var_pool(), [&](int t) { return gen.is_var(t); }, rng,
                   plan.renames);

    // R2 (attempt >= 1): rename the function name and parameters as well
    if (attempt >= 1) {
        cyclic_renames(input, gen.param_pool(), [&](int t) { return gen.is_param(t); }, rng,
                       plan.renames);
        cyclic_renames(input, gen.fn_pool(), [&](int t) { return gen.is_fn(t); }, rng,
                       plan.renames);
    }

    // R3 (attempt >= 2): reorder independent context statements
    plan.stmt_order.resize(parsed.stmts.size());
    for (std::size_t i = 0; i < plan.stmt_order.size(); ++i)
        plan.stmt_order[i] = static_cast<int>(i);
    if (attempt >= 2 && parsed.stmts.size() >= 2) {
        // a swap of adjacent statements (i, i+1) is legal when statement i+1
        // does not consume the variable defined by statement i
        for (int pass = 0; pass < attempt; ++pass) {
            std::vector<std::size_t> swappable;
            for (std::size_t i = 0; i + 1 < parsed.stmts.size(); ++i) {
                const std::size_t a = static_cast<std::size_t>(plan.stmt_order[i]);
                const std::size_t b = static_cast<std::size_t>(plan.stmt_order[i + 1]);
                const int va = defined_var(input, parsed.stmts[a]);
                if (!stmt_uses(input, parsed.stmts[b], va)) swappable.push_back(i);
            }
            if (swappable.empty()) break;
            const std::size_t pick = swappable[rng.uniform_int(swappable.size())];
            std::swap(plan.stmt_order[pick], plan.stmt_order[pick + 1]);
        }
    }
    return plan;
}

std::vector<int> apply_rewrite(std::span<const int> input, const RewritePlan& plan,
                               const SyntheticGenerator& gen) {
    const ParsedInput parsed = parse_input(input, gen.vocab().newline());
    std::vector<int> out(input.begin(), input.begin() + static_cast<std::ptrdiff_t>(parsed.def_end));
    for (int s : plan.stmt_order) {
        const auto [lo, hi] = parsed.stmts[static_cast<std::size_t>(s)];
        out.insert(out.end(), input.begin() + static_cast<std::ptrdiff_t>(lo),
                   input.begin() + static_cast<std::ptrdiff_t>(hi));
    }
    for (int& t : out)
        for (const auto& [from, to] : plan.renames)
            if (t == from) {
                t = to;
                break;
            }
    return out;
}

std::vector<int> invert_rewrite(std::span<const int> rephrased, const RewritePlan& plan,
                                const SyntheticGenerator& gen) {
    if (plan.alias_inserted) throw ContractError("invert_rewrite: plan not invertible");
    std::vector<int> out(rephrased.begin(), rephrased.end());
    for (int& t : out)
        for (const auto& [from, to] : plan.renames)
            if (t == to) {
                t = from;
                break;
            }
    const ParsedInput parsed = parse_input(out, gen.vocab().newline());
    std::vector<int> restored(out.begin(), out.begin() + static_cast<std::ptrdiff_t>(parsed.def_end));
    std::vector<int> inverse(plan.stmt_order.size());
    for (std::size_t i = 0; i < plan.stmt_order.size(); ++i)
        inverse[static_cast<std::size_t>(plan.stmt_order[i])] = static_cast<int>(i);
    for (int s : inverse) {
        const auto [lo, hi] = parsed.stmts[static_cast<std::size_t>(s)];
        restored.insert(restored.end(), out.begin() + static_cast<std::ptrdiff_t>(lo),
                        out.begin() + static_cast<std::ptrdiff_t>(hi));
    }
    return restored;
}

std::vector<int> apply_renames(std::span<const int> tokens, const RewritePlan& plan) {
    std::vector<int> out(tokens.begin(), tokens.end());
    for (int& t : out)
        for (const auto& [from, to] : plan.renames)
            if (t == from) {
                t = to;
                break;
            }
    return out;
}

std::optional<GenResult> build_generalization(const TransformerLM& model,
                                              const SyntheticGenerator& gen,
                                              const EditInstance& instance, std::uint64_t seed,
                                              int attempts, int max_new) {
    Rng base(seed);
    for (int attempt = 0; attempt < attempts; ++attempt) {
        RewritePlan plan = plan_rewrite(gen, instance.input, attempt,
                                        base.fork(static_cast<std::uint64_t>(attempt)));
        std::vector<int> xg = apply_rewrite(instance.input, plan, gen);
        if (xg == instance.input) continue;
        bool ok = true;
        std::vector<int> first;
        for (int run = 0; run < 3 && ok; ++run) {
            auto c = complete_line(model, xg, gen.vocab().newline(), max_new);
            if (run == 0) first = c;
            ok = c == first && contains_subseq(c, instance.deprecated);
        }
        if (ok) return GenResult{std::move(xg), apply_renames(instance.target_line, plan)};
    }
    return std::nullopt;
}

// ---- Step 3.3 / 3.4 ----

std::vector<PortRecord> build_portability(const EditInstance& instance,
                                          const std::vector<EditInstance>& pool,
                                          std::uint64_t seed) {
    std::vector<const EditInstance*> same_api;
    for (const EditInstance& other : pool)
        if (other.mapping == instance.mapping && other.id != instance.id)
            same_api.push_back(&other);
    if (same_api.empty()) return {};
    Rng rng(seed);
    const EditInstance* pick = same_api[rng.uniform_int(same_api.size())];
    return {{pick->id, pick->input, pick->target_line}};
}

std::vector<double> embed_ngrams(std::span<const int> tokens, int dim, std::uint64_t seed) {
    std::vector<double> v(static_cast<std::size_t>(dim), 0.0);
    if (tokens.empty()) return v;
    for (int n = 1; n <= 3; ++n) {
        for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) {
            Fnv64 h;
            h.update_u64(seed).update_u64(static_cast<std::uint64_t>(n));
            for (int j = 0; j < n; ++j)
                h.update_u64(static_cast<std::uint64_t>(tokens[i + static_cast<std::size_t>(j)]));
            v[h.digest() % static_cast<std::uint64_t>(dim)] += 1.0;
        }
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    return v;
}

std::vector<SpecRecord> build_specificity(const TransformerLM& model,
                                          const SyntheticGenerator& gen,
                                          const EditInstance& instance,
                                          const std::vector<PoolEntry>& pool,
                                          const std::vector<std::vector<int>>& pool_completions,
                                          const std::vector<std::vector<double>>& pool_embeddings,
                                          int k, int embed_dim, std::uint64_t embed_seed) {
    (void)model;
    const std::vector<double> q = embed_ngrams(instance.input, embed_dim, embed_seed);
    std::vector<std::pair<double, std::size_t>> ranked;
    ranked.reserve(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
        // non-target inputs must involve neither y nor y_d anywhere
        if (contains_subseq(pool[i].tokens, instance.target) ||
            contains_subseq(pool[i].tokens, instance.deprecated))
            continue;
        double dot = 0.0;
        for (std::size_t d = 0; d < q.size(); ++d) dot += q[d] * pool_embeddings[i][d];
        ranked.emplace_back(1.0 - dot, i);
    }
    std::stable_sort(ranked.begin(), ranked.end());
    std::vector<SpecRecord> out;
    for (std::size_t r = 0; r < ranked.size() && static_cast<int>(out.size()) < k; ++r) {
        const PoolEntry& e = pool[ranked[r].second];
        SpecRecord rec;
        rec.input.assign(e.tokens.begin(),
                         e.tokens.begin() + static_cast<std::ptrdiff_t>(e.invocation_start));
        rec.truth = pool_completions[ranked[r].second];
        rec.api = extract_api_reference(rec.truth, gen);
        out.push_back(std::move(rec));
    }
    return out;
}

// ---- pipeline ----

Benchmark build_benchmark(const TransformerLM& model, const std::vector<ApiMapping>& mappings,
                          const BenchParams& params) {
    SyntheticGenerator gen(mappings);
    const int workers = std::max(1, params.workers);
    Rng seeds(params.seed);
    const std::uint64_t seed_candidates = seeds.fork(1).next_u64();
    const std::uint64_t seed_pool = seeds.fork(2).next_u64();
    const std::uint64_t seed_gen = seeds.fork(3).next_u64();
    const std::uint64_t seed_port = seeds.fork(4).next_u64();
    const std::uint64_t seed_embed = seeds.fork(5).next_u64();

    // Step 1 + 2
    auto candidates = gen.collect_candidates(params.n_per_api, seed_candidates);
    FilterResult filtered = filter_instances(model, gen, candidates, workers,
                                             params.max_new_tokens);

    // held-out pool: prompts, completions, embeddings
    auto pool = gen.generate_pool(params.pool_size, seed_pool);
    std::vector<std::vector<int>> pool_completions(pool.size());
    std::vector<std::vector<double>> pool_embeddings(pool.size());
    {
        std::vector<TransformerLM> clones;
        for (int w = 0; w < workers; ++w) clones.push_back(model.clone());
        parallel_indices(pool.size(), workers, [&](std::size_t i, int w) {
            const std::span<const int> prompt(pool[i].tokens.data(), pool[i].invocation_start);
            pool_completions[i] = complete_line(clones[static_cast<std::size_t>(w)], prompt,
                                                gen.vocab().newline(), params.max_new_tokens);
            pool_embeddings[i] = embed_ngrams(prompt, params.embed_dim, seed_embed);
        });
    }

    // Step 3.2: generalization (instances without a valid rephrase are
    // dropped so the Table 2 count relations hold on the persisted set)
    std::vector<std::optional<GenResult>> gens(filtered.kept.size());
    {
        std::vector<TransformerLM> clones;
        for (int w = 0; w < workers; ++w) clones.push_back(model.clone());
        Rng gen_rng(seed_gen);
        std::vector<std::uint64_t> per_instance_seed(filtered.kept.size());
        for (std::size_t i = 0; i < filtered.kept.size(); ++i)
            per_instance_seed[i] = gen_rng.fork(fnv64(filtered.kept[i].id)).next_u64();
        parallel_indices(filtered.kept.size(), workers, [&](std::size_t i, int w) {
            gens[i] = build_generalization(clones[static_cast<std::size_t>(w)], gen,
                                           filtered.kept[i], per_instance_seed[i],
                                           params.gen_attempts, params.max_new_tokens);
        });
    }

    Benchmark bench;
    bench.mappings = mappings;
    int flagged = 0;
    std::vector<EditInstance> final_instances;
    std::vector<GenResult> final_gens;
    for (std::size_t i = 0; i < filtered.kept.size(); ++i) {
        if (!gens[i]) {
            ++flagged;
            continue;
        }
        final_instances.push_back(filtered.kept[i]);
        final_gens.push_back(std::move(*gens[i]));
    }

    // Step 3.3 + 3.4
    Rng port_rng(seed_port);
    for (std::size_t i = 0; i < final_instances.size(); ++i) {
        const EditInstance& inst = final_instances[i];
        EvalSuite suite;
        suite.instance_id = inst.id;
        suite.generalization = final_gens[i].input;
        suite.generalization_target_line = final_gens[i].target_line;
        suite.portability =
            build_portability(inst, final_instances, port_rng.fork(fnv64(inst.id)).next_u64());
        suite.specificity =
            build_specificity(model, gen, inst, pool, pool_completions, pool_embeddings,
                              params.k_specificity, params.embed_dim, seed_embed);
        bench.suites.push_back(std::move(suite));
    }
    bench.instances = std::move(final_instances);

    Manifest& man = bench.manifest;
    man.params = params;
    man.mappings = mappings;
    man.model_hash = hex64(model.params_hash());
    man.n_candidates = filtered.n_candidates;
    man.n_filtered = static_cast<int>(filtered.kept.size());
    man.n_final = static_cast<int>(bench.instances.size());
    man.n_flagged_generalization = flagged;
    man.retention = filtered.retention;
    for (const EditInstance& inst : bench.instances)
        ++man.per_api_effectiveness[api_id(mappings[static_cast<std::size_t>(inst.mapping)])];
    man.count_effectiveness = man.n_final;
    man.count_generalization = man.n_final;
    for (std::size_t i = 0; i < bench.suites.size(); ++i) {
        man.count_portability += static_cast<int>(bench.suites[i].portability.size());
        man.count_specificity += static_cast<int>(bench.suites[i].specificity.size());
        if (!bench.suites[i].portability.empty())
            ++man.per_api_portability[api_id(
                mappings[static_cast<std::size_t>(bench.instances[i].mapping)])];
    }
    return bench;
}

// ---- persistence ----

namespace {

json mapping_to_json(const ApiMapping& m) {
    return json{{"library", m.library}, {"deprecated", m.deprecated}, {"updated", m.updated}};
}

ApiMapping mapping_from_json(const json& j) {
    ApiMapping m;
    m.library = j.at("library").get<std::string>();
    m.deprecated = j.at("deprecated").get<std::vector<std::string>>();
    m.updated = j.at("updated").get<std::vector<std::string>>();
    return m;
}

json tokens_to_json(const Vocabulary& v, std::span<const int> toks) {
    json arr = json::array();
    for (int t : toks) arr.push_back(v.token(t));
    return arr;
}

std::vector<int> tokens_from_json(const Vocabulary& v, const json& arr) {
    std::vector<int> out;
    out.reserve(arr.size());
    for (const auto& t : arr) out.push_back(v.index(t.get<std::string>()));
    return out;
}

json params_to_json(const BenchParams& p) {
    return json{{"n_mappings", p.n_mappings},
                {"n_libraries", p.n_libraries},
                {"n_functions", p.n_functions},
                {"n_per_api", p.n_per_api},
                {"pool_size", p.pool_size},
                {"k_specificity", p.k_specificity},
                {"max_new_tokens", p.max_new_tokens},
                {"gen_attempts", p.gen_attempts},
                {"embed_dim", p.embed_dim},
                {"seed", p.seed}};
}

BenchParams params_from_json(const json& j) {
    BenchParams p;
    p.n_mappings = j.at("n_mappings").get<int>();
    p.n_libraries = j.at("n_libraries").get<int>();
    p.n_functions = j.at("n_functions").get<int>();
    p.n_per_api = j.at("n_per_api").get<int>();
    p.pool_size = j.at("pool_size").get<int>();
    p.k_specificity = j.at("k_specificity").get<int>();
    p.max_new_tokens = j.at("max_new_tokens").get<int>();
    p.gen_attempts = j.at("gen_attempts").get<int>();
    p.embed_dim = j.at("embed_dim").get<int>();
    p.seed = j.at("seed").get<std::uint64_t>();
    return p;
}

std::string serialize_instances(const Benchmark& bench, const Vocabulary& vocab) {
    std::string out;
    for (std::size_t i = 0; i < bench.instances.size(); ++i) {
        const EditInstance& inst = bench.instances[i];
        const EvalSuite& suite = bench.suites[i];
        json rec{{"id", inst.id},
                 {"mapping", inst.mapping},
                 {"input", tokens_to_json(vocab, inst.input)},
                 {"target", tokens_to_json(vocab, inst.target)},
                 {"deprecated", tokens_to_json(vocab, inst.deprecated)},
                 {"target_line", tokens_to_json(vocab, inst.target_line)},
                 {"target_offset", inst.target_offset_in_line},
                 {"generalization", tokens_to_json(vocab, suite.generalization)},
                 {"generalization_target_line",
                  tokens_to_json(vocab, suite.generalization_target_line)}};
        json ports = json::array();
        for (const PortRecord& p : suite.portability)
            ports.push_back(json{{"source", p.source_id},
                                 {"input", tokens_to_json(vocab, p.input)},
                                 {"target_line", tokens_to_json(vocab, p.target_line)}});
        rec["portability"] = std::move(ports);
        json specs = json::array();
        for (const SpecRecord& s : suite.specificity)
            specs.push_back(json{{"input", tokens_to_json(vocab, s.input)},
                                 {"truth", tokens_to_json(vocab, s.truth)},
                                 {"api", tokens_to_json(vocab, s.api)}});
        rec["specificity"] = std::move(specs);
        out += rec.dump();
        out += '\n';
    }
    return out;
}

}  // namespace

void save_benchmark(const Benchmark& bench, const std::string& jsonl_path,
                    const std::string& manifest_path) {
    SyntheticGenerator gen(bench.mappings);
    const std::string body = serialize_instances(bench, gen.vocab());
    {
        std::ofstream out(jsonl_path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("save_benchmark: cannot write " + jsonl_path);
        out << body;
    }
    Manifest man = bench.manifest;
    man.benchmark_hash = hex64(fnv64(body));
    json j{{"schema_version", man.schema_version},
           {"model_hash", man.model_hash},
           {"benchmark_hash", man.benchmark_hash},
           {"params", params_to_json(man.params)},
           {"n_candidates", man.n_candidates},
           {"n_filtered", man.n_filtered},
           {"n_final", man.n_final},
           {"n_flagged_generalization", man.n_flagged_generalization},
           {"retention", man.retention},
           {"per_api_effectiveness", man.per_api_effectiveness},
           {"per_api_portability", man.per_api_portability},
           {"count_effectiveness", man.count_effectiveness},
           {"count_generalization", man.count_generalization},
           {"count_portability", man.count_portability},
           {"count_specificity", man.count_specificity}};
    json maps = json::array();
    for (const ApiMapping& m : man.mappings) maps.push_back(mapping_to_json(m));
    j["mappings"] = std::move(maps);
    std::ofstream out(manifest_path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_benchmark: cannot write " + manifest_path);
    out << j.dump(2) << '\n';
}

Benchmark load_benchmark(const std::string& jsonl_path, const std::string& manifest_path) {
    json mj;
    {
        std::ifstream in(manifest_path);
        if (!in) throw IoError("load_benchmark: cannot open " + manifest_path);
        in >> mj;
    }
    Benchmark bench;
    Manifest& man = bench.manifest;
    man.schema_version = mj.at("schema_version").get<int>();
    if (man.schema_version != 1) throw IoError("load_benchmark: unsupported schema version");
    man.model_hash = mj.at("model_hash").get<std::string>();
    man.benchmark_hash = mj.at("benchmark_hash").get<std::string>();
    man.params = params_from_json(mj.at("params"));
    man.n_candidates = mj.at("n_candidates").get<int>();
    man.n_filtered = mj.at("n_filtered").get<int>();
    man.n_final = mj.at("n_final").get<int>();
    man.n_flagged_generalization = mj.at("n_flagged_generalization").get<int>();
    man.retention = mj.at("retention").get<double>();
    man.per_api_effectiveness = mj.at("per_api_effectiveness").get<std::map<std::string, int>>();
    man.per_api_portability = mj.at("per_api_portability").get<std::map<std::string, int>>();
    man.count_effectiveness = mj.at("count_effectiveness").get<int>();
    man.count_generalization = mj.at("count_generalization").get<int>();
    man.count_portability = mj.at("count_portability").get<int>();
    man.count_specificity = mj.at("count_specificity").get<int>();
    for (const auto& m : mj.at("mappings")) man.mappings.push_back(mapping_from_json(m));
    bench.mappings = man.mappings;

    std::string body;
    {
        std::ifstream in(jsonl_path, std::ios::binary);
        if (!in) throw IoError("load_benchmark: cannot open " + jsonl_path);
        std::ostringstream ss;
        ss << in.rdbuf();
        body = ss.str();
    }
    if (hex64(fnv64(body)) != man.benchmark_hash)
        throw IoError("load_benchmark: benchmark content hash mismatch");

    SyntheticGenerator gen(bench.mappings);
    const Vocabulary& vocab = gen.vocab();
    std::istringstream lines(body);
    std::string line;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        json rec = json::parse(line);
        EditInstance inst;
        inst.id = rec.at("id").get<std::string>();
        inst.mapping = rec.at("mapping").get<int>();
        inst.input = tokens_from_json(vocab, rec.at("input"));
        inst.target = tokens_from_json(vocab, rec.at("target"));
        inst.deprecated = tokens_from_json(vocab, rec.at("deprecated"));
        inst.target_line = tokens_from_json(vocab, rec.at("target_line"));
        inst.target_offset_in_line = rec.at("target_offset").get<int>();
        EvalSuite suite;
        suite.instance_id = inst.id;
        suite.generalization = tokens_from_json(vocab, rec.at("generalization"));
        suite.generalization_target_line =
            tokens_from_json(vocab, rec.at("generalization_target_line"));
        for (const auto& p : rec.at("portability")) {
            PortRecord pr;
            pr.source_id = p.at("source").get<std::string>();
            pr.input = tokens_from_json(vocab, p.at("input"));
            pr.target_line = tokens_from_json(vocab, p.at("target_line"));
            suite.portability.push_back(std::move(pr));
        }
        for (const auto& s : rec.at("specificity")) {
            SpecRecord sr;
            sr.input = tokens_from_json(vocab, s.at("input"));
            sr.truth = tokens_from_json(vocab, s.at("truth"));
            sr.api = tokens_from_json(vocab, s.at("api"));
            suite.specificity.push_back(std::move(sr));
        }
        bench.instances.push_back(std::move(inst));
        bench.suites.push_back(std::move(suite));
    }
    if (static_cast<int>(bench.instances.size()) != man.n_final)
        throw IoError("load_benchmark: instance count disagrees with manifest");
    return bench;
}

void validate_quality(const Benchmark& bench, double min_mapping_coverage, int min_instances) {
    const Manifest& man = bench.manifest;
    std::string diag;
    if (man.count_generalization != man.count_effectiveness)
        diag += " |generalization| != |effectiveness|;";
    if (man.count_specificity != man.params.k_specificity * man.count_effectiveness)
        diag += " |specificity| != k * |effectiveness|;";
    if (man.count_portability > man.count_effectiveness)
        diag += " |portability| > |effectiveness|;";
    if (man.n_final < min_instances)
        diag += " only " + std::to_string(man.n_final) + " instances (need " +
                std::to_string(min_instances) + ");";
    int covered = 0;
    for (const ApiMapping& m : bench.mappings)
        if (man.per_api_effectiveness.count(api_id(m)) &&
            man.per_api_effectiveness.at(api_id(m)) > 0)
            ++covered;
    const double coverage =
        bench.mappings.empty() ? 0.0
                               : static_cast<double>(covered) / static_cast<double>(bench.mappings.size());
    if (coverage < min_mapping_coverage) {
        diag += " mapping coverage " + std::to_string(coverage) + " below " +
                std::to_string(min_mapping_coverage) + "; per-API counts:";
        for (const ApiMapping& m : bench.mappings) {
            const auto it = man.per_api_effectiveness.find(api_id(m));
            diag += " " + api_id(m) + "=" +
                    std::to_string(it == man.per_api_effectiveness.end() ? 0 : it->second);
        }
    }
    if (!diag.empty()) throw QualityError("benchmark quality gate failed:" + diag);
}

void revalidate_benchmark(const TransformerLM& model, const Benchmark& bench, int workers) {
    if (hex64(model.params_hash()) != bench.manifest.model_hash)
        throw QualityError("revalidate: model hash does not match the benchmark manifest");
    SyntheticGenerator gen(bench.mappings);
    const int nl = gen.vocab().newline();
    const int max_new = bench.manifest.params.max_new_tokens;
    std::vector<TransformerLM> clones;
    for (int w = 0; w < std::max(1, workers); ++w) clones.push_back(model.clone());
    std::vector<std::uint8_t> ok(bench.instances.size(), 0);
    parallel_indices(bench.instances.size(), workers, [&](std::size_t i, int w) {
        const TransformerLM& m = clones[static_cast<std::size_t>(w)];
        const auto cx = complete_line(m, bench.instances[i].input, nl, max_new);
        const auto cg = complete_line(m, bench.suites[i].generalization, nl, max_new);
        ok[i] = contains_subseq(cx, bench.instances[i].deprecated) &&
                contains_subseq(cg, bench.instances[i].deprecated);
    });
    for (std::size_t i = 0; i < ok.size(); ++i)
        if (!ok[i])
            throw QualityError("revalidate: instance " + bench.instances[i].id +
                               " no longer elicits its deprecated API");
}

}  // namespace editlab
