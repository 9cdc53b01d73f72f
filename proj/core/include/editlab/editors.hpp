#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "editlab/benchgen.hpp"
#include "editlab/model.hpp"

namespace editlab {

enum class EditMethod { FTL, LoRA, AdaLoRA, GRACE, AdaLoRA_L };

const char* method_name(EditMethod m);
EditMethod method_from_name(const std::string& name);

struct EditorConfig {
    EditMethod method = EditMethod::AdaLoRA;
    int epochs = 30;
    double lr = 5e-3;
    int rank = 8;
    double adapter_scaling = 1.0;

    // FT-L
    int target_layer = 8;
    double ftl_clip = 5e-4;  // per-step L-inf budget; 0 pins the weights

    // GRACE. The radius is sized for this model's activation geometry:
    // edited inputs match their keys at distance exactly 0, while the
    // nearest unrelated prompts sit around 0.1 and above.
    int grace_layer = 11;
    double deferral_radius = 0.02;

    // AdaLoRA
    double orth_weight = 0.1;
    double importance_decay = 0.85;  // EMA decay for |w * grad w| sensitivity
    int prune_every = 5;             // epochs between budget re-allocations

    // AdaLoRA-L
    int n_common = 4;
    int n_specific = 4;

    // When true the training loss covers only the API tokens instead of the
    // whole invocation line.
    bool api_tokens_only = false;

    std::uint64_t seed = 0;

    static EditorConfig defaults(EditMethod m);
    void validate(const ModelConfig& model) const;
};

// Per-method adapter state. LoRA keeps (B, A) per target matrix, AdaLoRA
// keeps SVD-style triplets with a rank mask, GRACE keeps a key/value
// codebook at one layer's FFN down-projection.
struct LoraMatrixState {
    std::string target_id;  // e.g. "layer.3.attn.wq"
    int layer = 0;
    AttnProj proj = AttnProj::Q;
    Parameter down;  // B: [d, r], zero-init
    Parameter up;    // A: [r, k]
    // AdaLoRA extras (unused for plain LoRA)
    Parameter lambda;            // [r] singular values, zero-init
    std::vector<double> ema;     // per-triplet sensitivity EMA
    std::vector<std::uint8_t> rank_mask;
};

// GRACE codebook at one layer's FFN down-projection. keys[i] is the
// activation entering the projection; values row i is the trained
// replacement for the block's output hidden state at that position. A row
// fires when the activation distance to its key falls below the radius;
// nearest key wins.
struct GraceState {
    int layer = 0;
    double radius = 1.0;
    std::vector<std::vector<double>> keys;
    Parameter values;  // [n_entries, d_model]
};

struct AdapterState {
    EditMethod method = EditMethod::LoRA;
    std::vector<LoraMatrixState> matrices;
    GraceState grace;
    // orthogonality penalty trace (AdaLoRA), one value per epoch
    std::vector<double> orth_trace;
    int enabled_triplets = 0;  // after final pruning
};

struct EditHandle {
    EditMethod method = EditMethod::FTL;
    // Model parameters whose bits changed during the edit (FT-L only).
    std::vector<std::string> touched;
    // Parameter ids wearing adapters (LoRA-family attachment points).
    std::vector<std::string> attached;
    std::shared_ptr<AdapterState> state;
    // pre-edit copies of the touched tensors, for rollback
    std::vector<std::pair<std::string, Tensor>> pre_edit;
    std::vector<double> loss_trace;
    std::uint64_t model_hash_before = 0;
    bool active = false;
};

// Layer map produced by the layer selector (declared here to avoid a cycle).
struct ApiLayerMap {
    int n_common = 0;
    int n_specific = 0;
    std::vector<int> common;
    std::map<std::string, std::vector<int>> specific;  // api_id -> layer list

    void check_disjoint() const;
};

// Applies the configured editing method for one instance. The model carries
// the edit (weights for FT-L, installed hooks for the adapter methods) until
// rollback. AdaLoRA-L requires `layer_map`.
EditHandle edit(TransformerLM& model, const EditInstance& instance, const EditorConfig& config,
                const ApiLayerMap* layer_map = nullptr);

// Restores pre-edit behavior bit-exactly and deactivates the handle.
void rollback(TransformerLM& model, EditHandle& handle);

// Teacher-forced editing loss over x ++ target_line. The mask covers the
// whole invocation line, or only the API tokens when api_tokens_only is set.
Tensor edit_loss(const TransformerLM& model, const EditInstance& instance, Tape* tape,
                 bool api_tokens_only, const ForwardHooks* hooks = nullptr);

}  // namespace editlab
