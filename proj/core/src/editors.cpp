#include "editlab/editors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "editlab/hash.hpp"

namespace editlab {

const char* method_name(EditMethod m) {
    switch (m) {
        case EditMethod::FTL: return "ft_l";
        case EditMethod::LoRA: return "lora";
        case EditMethod::AdaLoRA: return "adalora";
        case EditMethod::GRACE: return "grace";
        case EditMethod::AdaLoRA_L: return "adalora_l";
    }
    return "?";
}

EditMethod method_from_name(const std::string& name) {
    if (name == "ft_l" || name == "ftl") return EditMethod::FTL;
    if (name == "lora") return EditMethod::LoRA;
    if (name == "adalora") return EditMethod::AdaLoRA;
    if (name == "grace") return EditMethod::GRACE;
    if (name == "adalora_l") return EditMethod::AdaLoRA_L;
    throw ConfigError("unknown editing method: " + name);
}

EditorConfig EditorConfig::defaults(EditMethod m) {
    EditorConfig c;
    c.method = m;
    switch (m) {
        case EditMethod::FTL:
            c.epochs = 40;
            c.lr = 5e-4;
            break;
        case EditMethod::LoRA:
        case EditMethod::AdaLoRA:
        case EditMethod::AdaLoRA_L:
            c.epochs = 30;
            c.lr = 5e-3;
            c.rank = 8;
            break;
        case EditMethod::GRACE:
            c.epochs = 30;
            c.lr = 1.0;
            break;
    }
    return c;
}

void EditorConfig::validate(const ModelConfig& model) const {
    if (epochs < 0) throw ConfigError("editor: epochs must be >= 0");
    if (method == EditMethod::FTL && (target_layer < 0 || target_layer >= model.n_layers))
        throw ConfigError("editor: FT-L target_layer out of range");
    if (method == EditMethod::GRACE && (grace_layer < 0 || grace_layer >= model.n_layers))
        throw ConfigError("editor: GRACE layer out of range");
    if (method == EditMethod::GRACE && deferral_radius <= 0)
        throw ConfigError("editor: GRACE deferral radius must be > 0");
    if (method == EditMethod::FTL && ftl_clip < 0)
        throw ConfigError("editor: FT-L clip budget must be >= 0");
    if ((method == EditMethod::LoRA || method == EditMethod::AdaLoRA ||
         method == EditMethod::AdaLoRA_L) &&
        (rank <= 0 || rank > model.d_model))
        throw ConfigError("editor: adapter rank must be in 1..d_model");
    if (method == EditMethod::AdaLoRA_L) {
        if (n_common < 0 || n_common >= model.n_layers)
            throw ConfigError("editor: n_common must be in 0..n_layers-1");
        if (n_specific <= 0 || n_specific > model.n_layers - n_common)
            throw ConfigError("editor: n_specific infeasible for n_common");
    }
}

void ApiLayerMap::check_disjoint() const {
    std::set<int> c(common.begin(), common.end());
    for (const auto& [api, layers] : specific)
        for (int l : layers)
            if (c.count(l))
                throw ContractError("layer map: common and specific overlap for " + api);
}

namespace {

// id format produced by benchgen: "<api>#<k>"
std::string instance_api_id(const EditInstance& instance) {
    const auto pos = instance.id.find('#');
    return pos == std::string::npos ? instance.id : instance.id.substr(0, pos);
}

// Freezes every model parameter for the duration of an edit; editors
// re-enable exactly the tensors they train.
struct FreezeGuard {
    TransformerLM& model;
    explicit FreezeGuard(TransformerLM& m) : model(m) {
        for (Parameter& p : model.params()) p.value.set_requires_grad(false);
    }
    ~FreezeGuard() {
        for (Parameter& p : model.params()) p.value.set_requires_grad(true);
    }
};

std::vector<double> finalize_loss(std::vector<double> trace) {
    for (double v : trace)
        if (!std::isfinite(v)) {
            std::string msg = "edit diverged; loss trace:";
            for (double t : trace) msg += " " + std::to_string(t);
            throw EditError(msg);
        }
    return trace;
}

}  // namespace

Tensor edit_loss(const TransformerLM& model, const EditInstance& instance, Tape* tape,
                 bool api_tokens_only, const ForwardHooks* hooks) {
    std::vector<int> seq = instance.input;
    seq.insert(seq.end(), instance.target_line.begin(), instance.target_line.end());
    const int prompt_len = static_cast<int>(instance.input.size());
    const int line_len = static_cast<int>(instance.target_line.size());
    const int T = static_cast<int>(seq.size()) - 1;  // positions with a next token

    int mask_begin = prompt_len - 1;
    int mask_len = line_len;
    if (api_tokens_only) {
        if (instance.target_offset_in_line < 0)
            throw ContractError("edit_loss: target not locatable in target_line");
        mask_begin = prompt_len + instance.target_offset_in_line - 1;
        mask_len = static_cast<int>(instance.target.size());
    }

    Tensor logits = model.forward(std::span<const int>(seq.data(), static_cast<std::size_t>(T)),
                                  tape, hooks);
    std::vector<int> targets(seq.begin() + 1, seq.end());
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(T), 0);
    for (int t = mask_begin; t < mask_begin + mask_len; ++t)
        mask[static_cast<std::size_t>(t)] = 1;
    return cross_entropy(logits, targets, mask, tape);
}

// ---- FT-L ----

namespace {

EditHandle edit_ftl(TransformerLM& model, const EditInstance& instance,
                    const EditorConfig& config) {
    EditHandle handle;
    handle.method = EditMethod::FTL;
    const std::string p = "layer." + std::to_string(config.target_layer) + ".ffn.";
    for (const char* name : {"w1", "b1", "w2", "b2"}) {
        const std::string id = p + name;
        handle.touched.push_back(id);
        handle.pre_edit.emplace_back(id, model.param(id).value.detached_copy());
    }

    FreezeGuard freeze(model);
    std::vector<Parameter> trained;
    for (const std::string& id : handle.touched) {
        model.param(id).value.set_requires_grad(true);
        trained.push_back(model.param(id));
    }

    Adam adam({.lr = config.lr, .max_step = config.ftl_clip});
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        Tape tape;
        Tensor loss = edit_loss(model, instance, &tape, config.api_tokens_only);
        handle.loss_trace.push_back(loss.at(0));
        tape.backward(loss);
        adam.step(trained);
        zero_grads(trained);
    }
    handle.loss_trace = finalize_loss(std::move(handle.loss_trace));
    handle.active = true;
    return handle;
}

// ---- LoRA / AdaLoRA / AdaLoRA-L ----

ForwardHooks make_lora_hooks(std::shared_ptr<AdapterState> state, double scaling) {
    ForwardHooks hooks;
    hooks.attn_proj = [state, scaling](int layer, AttnProj proj, const Tensor& x_norm,
                                       const Tensor& base, Tape* tape) -> Tensor {
        for (const LoraMatrixState& m : state->matrices) {
            if (m.layer != layer || m.proj != proj) continue;
            Tensor mid = matmul(x_norm, m.down.value, tape);
            if (state->method != EditMethod::LoRA) {
                // SVD-style triplets: the rank mask silences pruned values
                Tensor mask_t(std::vector<int>{static_cast<int>(m.rank_mask.size())});
                for (std::size_t j = 0; j < m.rank_mask.size(); ++j)
                    mask_t.at(static_cast<int>(j)) = m.rank_mask[j] ? 1.0 : 0.0;
                mid = col_scale(mid, mul(m.lambda.value, mask_t, tape), tape);
            }
            Tensor delta = matmul(mid, m.up.value, tape);
            return add(base, scale(delta, scaling, tape), tape);
        }
        return base;
    };
    return hooks;
}

EditHandle edit_lora_family(TransformerLM& model, const EditInstance& instance,
                            const EditorConfig& config, const ApiLayerMap* layer_map) {
    const int d = model.config().d_model;
    const int r = config.rank;
    const bool ada = config.method != EditMethod::LoRA;

    std::vector<int> layers;
    if (config.method == EditMethod::AdaLoRA_L) {
        if (!layer_map) throw ConfigError("adalora_l: layer map required");
        layer_map->check_disjoint();
        const std::string api = instance_api_id(instance);
        auto it = layer_map->specific.find(api);
        if (it == layer_map->specific.end() || it->second.empty())
            throw ConfigError("adalora_l: no specific layers for API " + api);
        layers = it->second;
        std::sort(layers.begin(), layers.end());
    } else {
        for (int i = 0; i < model.config().n_layers; ++i) layers.push_back(i);
    }

    auto state = std::make_shared<AdapterState>();
    state->method = config.method;
    EditHandle handle;
    handle.method = config.method;
    handle.state = state;

    Rng rng = Rng(config.seed).fork(fnv64(instance.id));
    for (int layer : layers) {
        for (AttnProj proj : {AttnProj::Q, AttnProj::V}) {
            LoraMatrixState m;
            m.layer = layer;
            m.proj = proj;
            m.target_id = "layer." + std::to_string(layer) +
                          (proj == AttnProj::Q ? ".attn.wq" : ".attn.wv");
            Rng mrng = rng.fork(fnv64(m.target_id));
            if (ada) {
                m.down = {m.target_id + ".P", Tensor::randn({d, r}, mrng, 0.02, true)};
                m.lambda = {m.target_id + ".lambda", Tensor::zeros({r}, true)};
                m.up = {m.target_id + ".Q", Tensor::randn({r, d}, mrng, 0.02, true)};
                m.ema.assign(static_cast<std::size_t>(r), 0.0);
                m.rank_mask.assign(static_cast<std::size_t>(r), 1);
            } else {
                m.down = {m.target_id + ".B", Tensor::zeros({d, r}, true)};
                m.up = {m.target_id + ".A", Tensor::randn({r, d}, mrng, 0.02, true)};
            }
            handle.attached.push_back(m.target_id);
            state->matrices.push_back(std::move(m));
        }
    }

    ForwardHooks hooks = make_lora_hooks(state, config.adapter_scaling);

    std::vector<Parameter> trained;
    for (LoraMatrixState& m : state->matrices) {
        trained.push_back(m.down);
        trained.push_back(m.up);
        if (ada) trained.push_back(m.lambda);
    }

    const int total_triplets = static_cast<int>(state->matrices.size()) * r;
    const int final_budget = total_triplets / 2;

    FreezeGuard freeze(model);
    Adam adam({.lr = config.lr});
    Tensor eye = Tensor::identity(r);
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        Tape tape;
        Tensor loss = edit_loss(model, instance, &tape, config.api_tokens_only, &hooks);
        handle.loss_trace.push_back(loss.at(0));
        if (ada) {
            Tensor penalty;
            for (LoraMatrixState& m : state->matrices) {
                Tensor dp = sub(matmul(transpose(m.down.value, &tape), m.down.value, &tape), eye,
                                &tape);
                Tensor dq = sub(matmul(m.up.value, transpose(m.up.value, &tape), &tape), eye,
                                &tape);
                Tensor term = add(sum_all(mul(dp, dp, &tape), &tape),
                                  sum_all(mul(dq, dq, &tape), &tape), &tape);
                penalty = penalty.defined() ? add(penalty, term, &tape) : term;
            }
            state->orth_trace.push_back(penalty.at(0));
            loss = add(loss, scale(penalty, config.orth_weight, &tape), &tape);
        }
        tape.backward(loss);

        if (ada) {
            // sensitivity |w * grad w| per singular triplet, EMA-smoothed
            for (LoraMatrixState& m : state->matrices) {
                for (int j = 0; j < r; ++j) {
                    double s = 0.0;
                    if (m.lambda.value.has_grad())
                        s += std::abs(m.lambda.value.at(j) * m.lambda.value.grad()[static_cast<std::size_t>(j)]);
                    if (m.down.value.has_grad())
                        for (int i = 0; i < d; ++i)
                            s += std::abs(m.down.value.at(i, j) *
                                          m.down.value.grad()[static_cast<std::size_t>(i) * r + j]);
                    if (m.up.value.has_grad())
                        for (int k2 = 0; k2 < d; ++k2)
                            s += std::abs(m.up.value.at(j, k2) *
                                          m.up.value.grad()[static_cast<std::size_t>(j) * d + k2]);
                    m.ema[static_cast<std::size_t>(j)] =
                        config.importance_decay * m.ema[static_cast<std::size_t>(j)] +
                        (1.0 - config.importance_decay) * s;
                }
            }
        }

        adam.step(trained);
        zero_grads(trained);

        if (ada && config.prune_every > 0 && epoch % config.prune_every == 0) {
            // budget shrinks linearly to half of the initial rank allocation
            const int budget = total_triplets -
                               static_cast<int>(std::floor(static_cast<double>(final_budget) *
                                                           epoch / config.epochs));
            std::vector<std::tuple<double, std::size_t, int>> ranked;  // (-ema, matrix, triplet)
            for (std::size_t mi = 0; mi < state->matrices.size(); ++mi)
                for (int j = 0; j < r; ++j)
                    ranked.emplace_back(-state->matrices[mi].ema[static_cast<std::size_t>(j)], mi, j);
            std::stable_sort(ranked.begin(), ranked.end());
            for (LoraMatrixState& m : state->matrices)
                std::fill(m.rank_mask.begin(), m.rank_mask.end(), 0);
            for (int b = 0; b < budget && b < static_cast<int>(ranked.size()); ++b) {
                auto [neg, mi, j] = ranked[static_cast<std::size_t>(b)];
                state->matrices[mi].rank_mask[static_cast<std::size_t>(j)] = 1;
            }
        }
    }
    handle.loss_trace = finalize_loss(std::move(handle.loss_trace));

    state->enabled_triplets = 0;
    for (const LoraMatrixState& m : state->matrices)
        for (std::uint8_t b : m.rank_mask) state->enabled_triplets += b ? 1 : 0;
    if (!ada) state->enabled_triplets = total_triplets;

    model.install_hooks(make_lora_hooks(state, config.adapter_scaling));
    handle.active = true;
    return handle;
}

// ---- GRACE ----

ForwardHooks make_grace_hooks(std::shared_ptr<AdapterState> state) {
    ForwardHooks hooks;
    hooks.ffn_down = [state](int layer, const Tensor& act, const Tensor& base,
                             Tape* tape) -> Tensor {
        const GraceState& g = state->grace;
        if (layer != g.layer || g.keys.empty()) return base;
        const int T = act.rows();
        const int width = act.cols();
        std::vector<std::uint8_t> mask(static_cast<std::size_t>(T), 0);
        std::vector<int> match;
        const auto av = act.data();
        for (int t = 0; t < T; ++t) {
            int best = -1;
            double best_d2 = g.radius * g.radius;
            for (std::size_t k = 0; k < g.keys.size(); ++k) {
                double d2 = 0.0;
                const double* key = g.keys[k].data();
                const double* row = &av[static_cast<std::size_t>(t) * width];
                for (int j = 0; j < width; ++j) {
                    const double diff = row[j] - key[j];
                    d2 += diff * diff;
                    if (d2 >= best_d2) break;
                }
                if (d2 < best_d2) {
                    best_d2 = d2;
                    best = static_cast<int>(k);
                }
            }
            if (best >= 0) {
                mask[static_cast<std::size_t>(t)] = 1;
                match.push_back(best);
            }
        }
        if (match.empty()) return base;
        Tensor rows = gather_rows(state->grace.values.value, match, tape);
        return replace_rows(base, mask, rows, tape);
    };
    return hooks;
}

EditHandle edit_grace(TransformerLM& model, const EditInstance& instance,
                      const EditorConfig& config) {
    EditHandle handle;
    handle.method = EditMethod::GRACE;
    auto state = std::make_shared<AdapterState>();
    state->method = EditMethod::GRACE;
    handle.state = state;
    handle.attached.push_back("layer." + std::to_string(config.grace_layer) + ".ffn.w2");

    // Teacher-forced capture at the hook layer: the down-projection inputs
    // become the keys, the block's output hidden states seed the values. The
    // first key sits at the final prompt position; one entry per line token.
    std::vector<int> seq = instance.input;
    seq.insert(seq.end(), instance.target_line.begin(), instance.target_line.end());
    const int prompt_len = static_cast<int>(instance.input.size());
    const int line_len = static_cast<int>(instance.target_line.size());
    const int T = static_cast<int>(seq.size()) - 1;

    Tensor captured_act, captured_out;
    ForwardHooks capture;
    capture.ffn_down = [&](int layer, const Tensor& act, const Tensor& base, Tape*) -> Tensor {
        if (layer == config.grace_layer) {
            captured_act = act.detached_copy();
            captured_out = base.detached_copy();
        }
        return base;
    };
    model.forward(std::span<const int>(seq.data(), static_cast<std::size_t>(T)), nullptr,
                  &capture);

    GraceState& g = state->grace;
    g.layer = config.grace_layer;
    g.radius = config.deferral_radius;
    Tensor values({line_len, model.config().d_model}, true);
    for (int i = 0; i < line_len; ++i) {
        const int pos = prompt_len - 1 + i;
        std::vector<double> key(captured_act.cols());
        for (int j = 0; j < captured_act.cols(); ++j) key[static_cast<std::size_t>(j)] = captured_act.at(pos, j);
        g.keys.push_back(std::move(key));
        for (int j = 0; j < model.config().d_model; ++j) values.at(i, j) = captured_out.at(pos, j);
    }
    g.values = {"grace.values", values};

    ForwardHooks hooks = make_grace_hooks(state);
    std::vector<Parameter> trained{g.values};

    // Constant lr 1.0 oscillates around the optimum, so the edit keeps the
    // best iterate seen across the fixed iteration budget.
    FreezeGuard freeze(model);
    Adam adam({.lr = config.lr});
    double best_loss = std::numeric_limits<double>::infinity();
    Tensor best_values;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        Tape tape;
        Tensor loss = edit_loss(model, instance, &tape, config.api_tokens_only, &hooks);
        handle.loss_trace.push_back(loss.at(0));
        if (loss.at(0) < best_loss) {
            best_loss = loss.at(0);
            best_values = g.values.value.detached_copy();
        }
        tape.backward(loss);
        adam.step(trained);
        zero_grads(trained);
    }
    if (config.epochs > 0) {
        Tape tape;
        Tensor final_loss = edit_loss(model, instance, &tape, config.api_tokens_only, &hooks);
        handle.loss_trace.push_back(final_loss.at(0));
        if (final_loss.at(0) > best_loss) g.values.value.copy_data_from(best_values);
    }
    handle.loss_trace = finalize_loss(std::move(handle.loss_trace));

    model.install_hooks(make_grace_hooks(state));
    handle.active = true;
    return handle;
}

}  // namespace

EditHandle edit(TransformerLM& model, const EditInstance& instance, const EditorConfig& config,
                const ApiLayerMap* layer_map) {
    config.validate(model.config());
    if (model.has_hooks()) throw EditError("edit: model already carries an active edit");
    EditHandle handle;
    const std::uint64_t hash_before = model.params_hash();
    switch (config.method) {
        case EditMethod::FTL: handle = edit_ftl(model, instance, config); break;
        case EditMethod::LoRA:
        case EditMethod::AdaLoRA:
        case EditMethod::AdaLoRA_L:
            handle = edit_lora_family(model, instance, config, layer_map);
            break;
        case EditMethod::GRACE: handle = edit_grace(model, instance, config); break;
    }
    handle.model_hash_before = hash_before;
    return handle;
}

void rollback(TransformerLM& model, EditHandle& handle) {
    if (!handle.active) throw EditError("rollback: stale or already rolled-back handle");
    for (const auto& [id, tensor] : handle.pre_edit) model.param(id).value.copy_data_from(tensor);
    model.clear_hooks();
    handle.active = false;
    if (model.params_hash() != handle.model_hash_before)
        throw EditError("rollback: model hash does not match the pre-edit state");
}

}  // namespace editlab
