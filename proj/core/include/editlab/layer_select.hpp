#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "editlab/benchgen.hpp"
#include "editlab/editors.hpp"
#include "editlab/model.hpp"

namespace editlab {

// Per-layer importance scores for one API: the mean squared gradient of the
// editable parameters under the target-token loss, averaged over instances.
struct LayerImportanceProfile {
    std::string api_id;
    std::vector<double> scores;  // length n_layers, nonnegative
    int n_instances = 0;
};

using EditableSelector = std::function<bool(const std::string& param_id)>;

// Attention wq/wv entries: the same parameter universe AdaLoRA edits.
EditableSelector default_editable_selector();

// Cross-entropy masked to the positions predicting the up-to-date API tokens.
Tensor target_token_loss(const TransformerLM& model, const EditInstance& instance, Tape* tape);

// One backward pass of target_token_loss; S_i = mean squared gradient over
// layer i's editable parameters. Model weights are left bit-unchanged and all
// gradients are zeroed on exit. Gradients must be zero on entry.
std::vector<double> layer_importance(TransformerLM& model, const EditInstance& instance,
                                     const EditableSelector& editable);

LayerImportanceProfile api_profile(TransformerLM& model,
                                   const std::vector<EditInstance>& instances_of_api,
                                   const EditableSelector& editable);

// Rank layers by the mean of sum-normalized per-API profiles; top n_common,
// ties to the lower layer index. Result sorted ascending.
std::vector<int> select_common_layers(const std::vector<LayerImportanceProfile>& profiles,
                                      int n_common, int n_layers);

// Among layers outside `common`, the n_specific with the highest raw score,
// descending; ties to the lower index.
std::vector<int> select_specific_layers(const LayerImportanceProfile& profile,
                                        const std::vector<int>& common, int n_specific);

struct LayerMapResult {
    ApiLayerMap map;
    std::vector<LayerImportanceProfile> profiles;  // sorted by api_id
    std::string model_hash;
    std::string benchmark_hash;
    int n_layers = 0;
};

// Profiles every API in the benchmark on the pre-edit model and derives the
// Common/Specific partition.
LayerMapResult build_layer_map(TransformerLM& model, const Benchmark& bench, int n_common,
                               int n_specific, int workers);

// Re-derives the partition from cached profiles (used by the sweeps).
ApiLayerMap derive_layer_map(const std::vector<LayerImportanceProfile>& profiles, int n_common,
                             int n_specific, int n_layers);

void save_layer_map(const LayerMapResult& result, const std::string& path);
std::optional<LayerMapResult> load_layer_map(const std::string& path);

}  // namespace editlab
