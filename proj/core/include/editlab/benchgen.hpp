#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "editlab/model.hpp"
#include "editlab/vocab.hpp"

namespace editlab {

// One deprecated -> up-to-date API pair. Token sequences include the library
// prefix ("vex . svd"), so containment checks are plain subsequence scans.
struct ApiMapping {
    std::string library;
    std::vector<std::string> deprecated;
    std::vector<std::string> updated;
};

std::string api_id(const ApiMapping& m);

// Default synthetic mapping table: n_mappings spread over n_libraries.
std::vector<ApiMapping> default_mappings(int n_mappings = 16, int n_libraries = 4);

struct EditInstance {
    std::string id;
    int mapping = -1;
    std::vector<int> input;        // x: ends just before the invocation line
    std::vector<int> target;       // y: up-to-date API tokens
    std::vector<int> deprecated;   // y_d
    std::vector<int> target_line;  // full ground-truth invocation line (ends with <NL>)
    int target_offset_in_line = -1;  // where `target` sits inside target_line
};

struct PortRecord {
    std::string source_id;
    std::vector<int> input;
    std::vector<int> target_line;
};

struct SpecRecord {
    std::vector<int> input;  // x_u
    std::vector<int> truth;  // y_u: the pre-edit model's own completion
    std::vector<int> api;    // API reference inside y_u, for AEM scoring
};

struct EvalSuite {
    std::string instance_id;
    std::vector<int> generalization;              // x_g
    std::vector<int> generalization_target_line;  // target_line under x_g's renaming
    std::vector<PortRecord> portability;
    std::vector<SpecRecord> specificity;
};

// Held-out function used as a specificity candidate.
struct PoolEntry {
    int mapping = -1;
    std::vector<int> tokens;           // full function, deprecated form
    std::size_t invocation_start = 0;  // prefix before this is the prompt
};

// The synthetic API-call language: a closed vocabulary, per-API context
// statement templates, and function assembly. Training and benchmark
// candidates draw from disjoint template sets.
class SyntheticGenerator {
  public:
    explicit SyntheticGenerator(std::vector<ApiMapping> mappings);

    const Vocabulary& vocab() const { return vocab_; }
    const std::vector<ApiMapping>& mappings() const { return mappings_; }
    std::span<const int> deprecated_ixs(int mapping) const;
    std::span<const int> updated_ixs(int mapping) const;

    // Training corpus: functions invoking the DEPRECATED APIs, so the trained
    // model learns to emit them.
    std::vector<std::vector<int>> generate_corpus(int n_functions, std::uint64_t seed) const;

    // Candidate editing instances over held-out templates; target lines use
    // the UPDATED APIs.
    std::vector<EditInstance> collect_candidates(int n_per_api, std::uint64_t seed) const;

    // Held-out functions (deprecated form) for specificity selection.
    std::vector<PoolEntry> generate_pool(int n, std::uint64_t seed) const;

    // token classes, used by the rewriter
    bool is_var(int ix) const;
    bool is_param(int ix) const;
    bool is_fn(int ix) const;
    std::span<const int> var_pool() const { return var_ixs_; }
    std::span<const int> param_pool() const { return param_ixs_; }
    std::span<const int> fn_pool() const { return fn_ixs_; }

  private:
    struct FuncTokens {
        std::vector<int> tokens;
        std::size_t invocation_start = 0;
    };
    FuncTokens make_function(int mapping, bool deprecated_form, bool bench_templates,
                             Rng& rng) const;

    std::vector<ApiMapping> mappings_;
    Vocabulary vocab_;
    std::vector<std::vector<int>> dep_ixs_, upd_ixs_;
    std::vector<int> var_ixs_, param_ixs_, fn_ixs_, lit_ixs_;
    // per-mapping helper-call tokens: prep_/init_/load_<verb>
    std::vector<std::array<int, 3>> helper_ixs_;
    // per-library helper tokens: <lib>_ctx / <lib>_cfg
    std::vector<std::array<int, 2>> lib_helper_ixs_;
    int res_ix_ = -1, def_ix_ = -1, lparen_ix_ = -1, rparen_ix_ = -1, colon_ix_ = -1,
        comma_ix_ = -1, assign_ix_ = -1, return_ix_ = -1, use_ix_ = -1;
};

// ---- Step 2: filtering ----

struct FilterResult {
    std::vector<EditInstance> kept;
    int n_candidates = 0;
    std::map<std::string, int> per_api_total;
    std::map<std::string, int> per_api_kept;
    double retention = 0.0;
};

// Keeps candidates whose greedy completion contains y_d in all three runs.
// Throws QualityError (with a per-API diagnostic) when nothing survives.
FilterResult filter_instances(const TransformerLM& model, const SyntheticGenerator& gen,
                              const std::vector<EditInstance>& candidates, int workers,
                              int max_new);

// ---- Step 3.2: generalization rewriting ----

struct RewritePlan {
    std::vector<std::pair<int, int>> renames;  // bijective token substitutions
    std::vector<int> stmt_order;               // permutation of context statements
    bool alias_inserted = false;
    int attempt = 0;
};

RewritePlan plan_rewrite(const SyntheticGenerator& gen, std::span<const int> input, int attempt,
                         Rng rng);
std::vector<int> apply_rewrite(std::span<const int> input, const RewritePlan& plan,
                               const SyntheticGenerator& gen);
// Inverse of apply_rewrite for plans without alias insertion.
std::vector<int> invert_rewrite(std::span<const int> rephrased, const RewritePlan& plan,
                                const SyntheticGenerator& gen);

struct GenResult {
    std::vector<int> input;        // x_g
    std::vector<int> target_line;  // ground-truth line under the same renaming
};

// Retries up to `attempts` escalating rule combinations; nullopt when no
// rephrase keeps the pre-edit model emitting y_d.
std::optional<GenResult> build_generalization(const TransformerLM& model,
                                              const SyntheticGenerator& gen,
                                              const EditInstance& instance, std::uint64_t seed,
                                              int attempts, int max_new);

// Applies only the plan's token renames (no statement handling); used to
// carry a rewrite over to the instance's target line.
std::vector<int> apply_renames(std::span<const int> tokens, const RewritePlan& plan);

// ---- Step 3.3 / 3.4 ----

std::vector<PortRecord> build_portability(const EditInstance& instance,
                                          const std::vector<EditInstance>& pool,
                                          std::uint64_t seed);

// L2-normalized hashed bag of {1,2,3}-grams. Empty input yields a zero vector.
std::vector<double> embed_ngrams(std::span<const int> tokens, int dim, std::uint64_t seed);

std::vector<SpecRecord> build_specificity(const TransformerLM& model,
                                          const SyntheticGenerator& gen,
                                          const EditInstance& instance,
                                          const std::vector<PoolEntry>& pool,
                                          const std::vector<std::vector<int>>& pool_completions,
                                          const std::vector<std::vector<double>>& pool_embeddings,
                                          int k, int embed_dim, std::uint64_t embed_seed);

// ---- whole-pipeline assembly, persistence ----

struct BenchParams {
    int n_mappings = 16;
    int n_libraries = 4;
    int n_functions = 1600;
    int n_per_api = 12;
    int pool_size = 800;
    int k_specificity = 5;
    int max_new_tokens = 16;
    int gen_attempts = 10;
    int embed_dim = 512;
    std::uint64_t seed = 42;
    int workers = 1;
};

struct Manifest {
    int schema_version = 1;
    std::string model_hash;
    std::string benchmark_hash;  // content hash of the instance lines
    BenchParams params;
    std::vector<ApiMapping> mappings;
    int n_candidates = 0;
    int n_filtered = 0;
    int n_final = 0;
    int n_flagged_generalization = 0;
    double retention = 0.0;
    std::map<std::string, int> per_api_effectiveness;
    std::map<std::string, int> per_api_portability;
    int count_effectiveness = 0;
    int count_generalization = 0;
    int count_portability = 0;
    int count_specificity = 0;
};

struct Benchmark {
    std::vector<ApiMapping> mappings;
    std::vector<EditInstance> instances;
    std::vector<EvalSuite> suites;  // parallel to instances
    Manifest manifest;
};

Benchmark build_benchmark(const TransformerLM& model, const std::vector<ApiMapping>& mappings,
                          const BenchParams& params);

void save_benchmark(const Benchmark& bench, const std::string& jsonl_path,
                    const std::string& manifest_path);
Benchmark load_benchmark(const std::string& jsonl_path, const std::string& manifest_path);

// Table 2 count relations plus API coverage; throws QualityError.
void validate_quality(const Benchmark& bench, double min_mapping_coverage = 0.8,
                      int min_instances = 0);

// Confirms the model hash and that the pre-edit model still emits y_d for
// every x and x_g; throws QualityError on version skew.
void revalidate_benchmark(const TransformerLM& model, const Benchmark& bench, int workers);

// ---- shared helpers ----

// Greedy single-line completion, truncated at the end-of-line token.
std::vector<int> complete_line(const TransformerLM& model, std::span<const int> input,
                               int newline_ix, int max_new);

// Fraction of instances whose completion contains their deprecated API.
double deprecated_emission_rate(const TransformerLM& model, const SyntheticGenerator& gen,
                                const std::vector<EditInstance>& instances, int workers,
                                int max_new);

// First known API (deprecated or updated, longest match first) contained in
// the completion; falls back to the completion itself.
std::vector<int> extract_api_reference(std::span<const int> completion,
                                       const SyntheticGenerator& gen);

}  // namespace editlab
