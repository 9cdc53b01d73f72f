#include "editlab/layer_select.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "editlab/hash.hpp"
#include "editlab/parallel.hpp"

namespace editlab {

using json = nlohmann::json;

EditableSelector default_editable_selector() {
    return [](const std::string& id) {
        return id.ends_with(".attn.wq") || id.ends_with(".attn.wv");
    };
}

Tensor target_token_loss(const TransformerLM& model, const EditInstance& instance, Tape* tape) {
    return edit_loss(model, instance, tape, /*api_tokens_only=*/true);
}

std::vector<double> layer_importance(TransformerLM& model, const EditInstance& instance,
                                     const EditableSelector& editable) {
    for (const Parameter& p : model.params())
        if (p.value.has_grad())
            for (double g : p.value.grad())
                if (g != 0.0) throw ContractError("layer_importance: gradients not zeroed");

    const int n_layers = model.config().n_layers;
    // grads are only needed for the editable parameters
    std::vector<bool> was(model.params().size());
    for (std::size_t i = 0; i < model.params().size(); ++i) {
        Parameter& p = model.params()[i];
        was[i] = p.value.requires_grad();
        p.value.set_requires_grad(editable(p.id) && TransformerLM::layer_of(p.id).has_value());
    }

    std::vector<double> scores(static_cast<std::size_t>(n_layers), 0.0);
    {
        Tape tape;
        Tensor loss = target_token_loss(model, instance, &tape);
        tape.backward(loss);
        std::vector<double> count(static_cast<std::size_t>(n_layers), 0.0);
        for (Parameter& p : model.params()) {
            if (!p.value.requires_grad()) continue;
            const auto layer = TransformerLM::layer_of(p.id);
            if (!layer) continue;
            const std::size_t li = static_cast<std::size_t>(*layer);
            if (p.value.has_grad())
                for (double g : p.value.grad()) scores[li] += g * g;
            count[li] += static_cast<double>(p.value.size());
        }
        for (std::size_t i = 0; i < scores.size(); ++i)
            if (count[i] > 0) scores[i] /= count[i];
    }

    for (std::size_t i = 0; i < model.params().size(); ++i) {
        model.params()[i].value.zero_grad();
        model.params()[i].value.set_requires_grad(was[i]);
    }
    return scores;
}

LayerImportanceProfile api_profile(TransformerLM& model,
                                   const std::vector<EditInstance>& instances_of_api,
                                   const EditableSelector& editable) {
    if (instances_of_api.empty()) throw ContractError("api_profile: no instances");
    std::vector<EditInstance> sorted = instances_of_api;
    std::sort(sorted.begin(), sorted.end(),
              [](const EditInstance& a, const EditInstance& b) { return a.id < b.id; });
    LayerImportanceProfile prof;
    prof.n_instances = static_cast<int>(sorted.size());
    prof.scores.assign(static_cast<std::size_t>(model.config().n_layers), 0.0);
    for (const EditInstance& inst : sorted) {
        const std::vector<double> s = layer_importance(model, inst, editable);
        for (std::size_t i = 0; i < s.size(); ++i) prof.scores[i] += s[i];
    }
    for (double& v : prof.scores) v /= static_cast<double>(prof.n_instances);
    return prof;
}

namespace {

std::vector<int> top_k_layers(const std::vector<double>& scores, int k,
                              const std::set<int>& excluded) {
    std::vector<int> order;
    for (int i = 0; i < static_cast<int>(scores.size()); ++i)
        if (!excluded.count(i)) order.push_back(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)])
            return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
        return a < b;
    });
    order.resize(static_cast<std::size_t>(std::min<int>(k, static_cast<int>(order.size()))));
    return order;
}

}  // namespace

std::vector<int> select_common_layers(const std::vector<LayerImportanceProfile>& profiles,
                                      int n_common, int n_layers) {
    if (n_common >= n_layers) throw ConfigError("select_common_layers: n_common >= n_layers");
    if (n_common < 0) throw ConfigError("select_common_layers: negative n_common");
    if (n_common == 0) return {};
    if (profiles.empty()) throw ContractError("select_common_layers: no profiles");
    std::vector<double> agg(static_cast<std::size_t>(n_layers), 0.0);
    for (const LayerImportanceProfile& p : profiles) {
        const double sum = std::accumulate(p.scores.begin(), p.scores.end(), 0.0);
        for (std::size_t i = 0; i < p.scores.size(); ++i)
            agg[i] += sum > 0.0 ? p.scores[i] / sum : 0.0;
    }
    for (double& v : agg) v /= static_cast<double>(profiles.size());
    std::vector<int> top = top_k_layers(agg, n_common, {});
    std::sort(top.begin(), top.end());
    return top;
}

std::vector<int> select_specific_layers(const LayerImportanceProfile& profile,
                                        const std::vector<int>& common, int n_specific) {
    const int n_layers = static_cast<int>(profile.scores.size());
    if (n_specific <= 0 || n_specific > n_layers - static_cast<int>(common.size()))
        throw ConfigError("select_specific_layers: infeasible n_specific");
    return top_k_layers(profile.scores, n_specific, std::set<int>(common.begin(), common.end()));
}

LayerMapResult build_layer_map(TransformerLM& model, const Benchmark& bench, int n_common,
                               int n_specific, int workers) {
    // group instances per API, sorted
    std::map<std::string, std::vector<EditInstance>> by_api;
    for (const EditInstance& inst : bench.instances)
        by_api[api_id(bench.mappings[static_cast<std::size_t>(inst.mapping)])].push_back(inst);

    LayerMapResult result;
    result.model_hash = hex64(model.params_hash());
    result.benchmark_hash = bench.manifest.benchmark_hash;
    result.n_layers = model.config().n_layers;

    // per-instance scores in parallel, reduced in sorted order
    std::vector<std::pair<std::string, const EditInstance*>> flat;
    for (const auto& [api, instances] : by_api)
        for (const EditInstance& inst : instances) flat.emplace_back(api, &inst);
    std::sort(flat.begin(), flat.end(), [](const auto& a, const auto& b) {
        return a.second->id < b.second->id;
    });
    std::vector<std::vector<double>> scores(flat.size());
    std::vector<TransformerLM> clones;
    for (int w = 0; w < std::max(1, workers); ++w) clones.push_back(model.clone());
    const EditableSelector editable = default_editable_selector();
    parallel_indices(flat.size(), workers, [&](std::size_t i, int w) {
        scores[i] = layer_importance(clones[static_cast<std::size_t>(w)], *flat[i].second, editable);
    });

    std::map<std::string, LayerImportanceProfile> profiles;
    for (std::size_t i = 0; i < flat.size(); ++i) {
        LayerImportanceProfile& prof = profiles[flat[i].first];
        if (prof.scores.empty()) {
            prof.api_id = flat[i].first;
            prof.scores.assign(static_cast<std::size_t>(result.n_layers), 0.0);
        }
        for (std::size_t l = 0; l < scores[i].size(); ++l) prof.scores[l] += scores[i][l];
        ++prof.n_instances;
    }
    for (auto& [api, prof] : profiles)
        for (double& v : prof.scores) v /= static_cast<double>(prof.n_instances);

    for (auto& [api, prof] : profiles) result.profiles.push_back(prof);
    result.map = derive_layer_map(result.profiles, n_common, n_specific, result.n_layers);
    return result;
}

ApiLayerMap derive_layer_map(const std::vector<LayerImportanceProfile>& profiles, int n_common,
                             int n_specific, int n_layers) {
    ApiLayerMap map;
    map.n_common = n_common;
    map.n_specific = n_specific;
    map.common = select_common_layers(profiles, n_common, n_layers);
    for (const LayerImportanceProfile& prof : profiles)
        map.specific[prof.api_id] = select_specific_layers(prof, map.common, n_specific);
    map.check_disjoint();
    return map;
}

void save_layer_map(const LayerMapResult& result, const std::string& path) {
    json j{{"schema_version", 1},
           {"model_hash", result.model_hash},
           {"benchmark_hash", result.benchmark_hash},
           {"n_layers", result.n_layers},
           {"n_common", result.map.n_common},
           {"n_specific", result.map.n_specific},
           {"editable", "attn.wq|attn.wv"},
           {"common", result.map.common},
           {"specific", result.map.specific}};
    json profs = json::object();
    for (const LayerImportanceProfile& p : result.profiles)
        profs[p.api_id] = json{{"scores", p.scores}, {"n_instances", p.n_instances}};
    j["profiles"] = std::move(profs);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_layer_map: cannot write " + path);
    out << j.dump(2) << '\n';
}

std::optional<LayerMapResult> load_layer_map(const std::string& path) {
    std::ifstream in(path);
    if (!in) return std::nullopt;
    json j;
    in >> j;
    LayerMapResult result;
    if (j.at("schema_version").get<int>() != 1) throw IoError("layer map: unsupported schema");
    result.model_hash = j.at("model_hash").get<std::string>();
    result.benchmark_hash = j.at("benchmark_hash").get<std::string>();
    result.n_layers = j.at("n_layers").get<int>();
    result.map.n_common = j.at("n_common").get<int>();
    result.map.n_specific = j.at("n_specific").get<int>();
    result.map.common = j.at("common").get<std::vector<int>>();
    result.map.specific = j.at("specific").get<std::map<std::string, std::vector<int>>>();
    for (const auto& [api, body] : j.at("profiles").items()) {
        LayerImportanceProfile p;
        p.api_id = api;
        p.scores = body.at("scores").get<std::vector<double>>();
        p.n_instances = body.at("n_instances").get<int>();
        result.profiles.push_back(std::move(p));
    }
    std::sort(result.profiles.begin(), result.profiles.end(),
              [](const auto& a, const auto& b) { return a.api_id < b.api_id; });
    result.map.check_disjoint();
    return result;
}

}  // namespace editlab
