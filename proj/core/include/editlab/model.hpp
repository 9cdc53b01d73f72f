#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "editlab/tensor.hpp"

namespace editlab {

struct ModelConfig {
    int vocab_size = 0;  // set from the tokenizer
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 12;
    int d_ffn = 256;
    int max_seq_len = 128;
    std::uint64_t seed = 0xed17ab5eedull;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// Which attention projection a hook is being asked about.
enum class AttnProj { Q, K, V, O };

// Editing hooks threaded through the forward pass. Both are optional.
struct ForwardHooks {
    // Called after each attention projection. May return a replacement for
    // `base` (e.g. base plus a low-rank adapter delta). x_norm is the
    // projection input.
    std::function<Tensor(int layer, AttnProj proj, const Tensor& x_norm, const Tensor& base,
                         Tape* tape)>
        attn_proj;
    // Called after the FFN down-projection's residual add, once per block.
    // `act` holds the projection's post-activation inputs (the deferral
    // queries); `hidden` is the block's output hidden state, which the hook
    // may replace row-wise.
    std::function<Tensor(int layer, const Tensor& act, const Tensor& hidden, Tape* tape)> ffn_down;
};

struct TrainOptions {
    int epochs = 6;
    double lr = 1e-3;
    int batch = 16;
    std::uint64_t seed = 1;
    int workers = 1;
    std::function<void(int epoch, double loss)> on_epoch;  // optional progress callback
};

struct TrainStats {
    std::vector<double> epoch_losses;
};

struct Snapshot {
    ModelConfig config;
    std::vector<Tensor> tensors;  // detached copies, canonical parameter order
};

// Decoder-only pre-norm transformer LM with individually addressable weights.
class TransformerLM {
  public:
    explicit TransformerLM(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    std::span<Parameter> params() { return params_; }
    std::span<const Parameter> params() const { return params_; }
    Parameter& param(const std::string& id);
    const Parameter& param(const std::string& id) const;
    bool has_param(const std::string& id) const;

    // Layer index encoded in a parameter id, or nullopt for shared tensors.
    static std::optional<int> layer_of(const std::string& id);

    // Next-token logits, one row per position. Hooks passed here take
    // precedence over installed hooks; pass nullptr to use the installed ones.
    Tensor forward(std::span<const int> tokens, Tape* tape = nullptr,
                   const ForwardHooks* hooks = nullptr) const;

    // Greedy (temperature 0) continuation. Returns generated tokens including
    // the stop token when emitted. Argmax ties break toward the lowest index.
    std::vector<int> greedy_complete(std::span<const int> prompt, int stop_token,
                                     int max_new) const;

    TrainStats train_lm(const std::vector<std::vector<int>>& corpus, const TrainOptions& opts);

    Snapshot snapshot() const;
    void restore(const Snapshot& snap);

    void save_checkpoint(const std::string& path) const;
    static TransformerLM load_checkpoint(const std::string& path);

    std::uint64_t params_hash() const;  // content hash of config plus all weights
    TransformerLM clone() const;

    // Installed editing hooks (active until cleared; used by editors).
    void install_hooks(ForwardHooks hooks) { hooks_ = std::move(hooks); }
    void clear_hooks() { hooks_ = ForwardHooks{}; }
    bool has_hooks() const { return static_cast<bool>(hooks_.attn_proj) || static_cast<bool>(hooks_.ffn_down); }

  private:
    TransformerLM() = default;
    void build_params(Rng& rng);
    void index_params();

    ModelConfig config_;
    std::vector<Parameter> params_;
    std::vector<std::pair<std::string, std::size_t>> by_id_;  // sorted by id
    ForwardHooks hooks_;
};

}  // namespace editlab
