// Independent reference implementations used as test oracles. Everything here
// is deliberately naive (triple loops, exhaustive enumeration) and separate
// from the library's computation paths.
#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "editlab/rng.hpp"
#include "editlab/tensor.hpp"

namespace oracles {

inline std::vector<double> matmul_triple_loop(std::span<const double> a, std::span<const double> b,
                                              int m, int k, int n) {
    std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int t = 0; t < k; ++t)
                s += a[static_cast<std::size_t>(i) * k + t] * b[static_cast<std::size_t>(t) * n + j];
            c[static_cast<std::size_t>(i) * n + j] = s;
        }
    return c;
}

inline std::vector<double> softmax_row_direct(std::span<const double> row) {
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    std::vector<double> out(row.size());
    double denom = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i) {
        out[i] = std::exp(row[i] - mx);
        denom += out[i];
    }
    for (double& v : out) v /= denom;
    return out;
}

// mean of -log softmax(logits)[target] over unmasked rows
inline double cross_entropy_direct(std::span<const double> logits, int T, int V,
                                   std::span<const int> targets,
                                   std::span<const std::uint8_t> mask) {
    double loss = 0.0;
    int n = 0;
    for (int t = 0; t < T; ++t) {
        if (!mask[static_cast<std::size_t>(t)]) continue;
        const auto row = logits.subspan(static_cast<std::size_t>(t) * V, static_cast<std::size_t>(V));
        const std::vector<double> p = softmax_row_direct(row);
        loss += -std::log(p[static_cast<std::size_t>(targets[static_cast<std::size_t>(t)])]);
        ++n;
    }
    return loss / n;
}

// Exhaustive longest-common-subsequence by enumerating every subsequence of
// the shorter sequence (lengths <= 8 only).
inline std::size_t lcs_exhaustive(std::span<const int> a, std::span<const int> b) {
    if (a.size() > b.size()) return lcs_exhaustive(b, a);
    auto is_subseq = [](std::span<const int> needle, std::span<const int> hay) {
        std::size_t i = 0;
        for (int h : hay)
            if (i < needle.size() && needle[i] == h) ++i;
        return i == needle.size();
    };
    std::size_t best = 0;
    for (std::uint32_t bits = 0; bits < (1u << a.size()); ++bits) {
        std::vector<int> sub;
        for (std::size_t i = 0; i < a.size(); ++i)
            if (bits & (1u << i)) sub.push_back(a[i]);
        if (sub.size() > best && is_subseq(sub, b)) best = sub.size();
    }
    return best;
}

// ---- random taped graphs for the finite-difference property ----

struct GraphProgram {
    struct Step {
        enum Kind { kAdd, kMul, kMatmul, kGelu, kSoftmax, kTranspose, kScale, kLayerNorm } kind;
        int a = -1, b = -1, gain = -1, bias = -1;
        double c = 1.0;
    };
    // leaves [0, n_initial) seed the op pool; later entries are layer_norm
    // gain/bias leaves addressed directly by their step
    std::vector<std::vector<int>> leaf_shapes;
    int n_initial = 0;
    std::vector<Step> steps;
};

inline GraphProgram make_random_graph(editlab::Rng& rng, int depth) {
    GraphProgram g;
    const int n_leaves = 2 + static_cast<int>(rng.uniform_int(2));
    for (int i = 0; i < n_leaves; ++i) {
        const int r = 1 + static_cast<int>(rng.uniform_int(8));
        const int c = 1 + static_cast<int>(rng.uniform_int(8));
        g.leaf_shapes.push_back({r, c});
    }
    g.n_initial = n_leaves;
    std::vector<std::vector<int>> shapes = g.leaf_shapes;
    for (int d = 0; d < depth; ++d) {
        GraphProgram::Step s;
        for (int tries = 0; tries < 32; ++tries) {
            const int kind = static_cast<int>(rng.uniform_int(8));
            const int a = static_cast<int>(rng.uniform_int(shapes.size()));
            if (kind == GraphProgram::Step::kAdd || kind == GraphProgram::Step::kMul) {
                std::vector<int> candidates;
                for (std::size_t i = 0; i < shapes.size(); ++i)
                    if (shapes[i] == shapes[static_cast<std::size_t>(a)])
                        candidates.push_back(static_cast<int>(i));
                if (candidates.empty()) continue;
                s.kind = static_cast<GraphProgram::Step::Kind>(kind);
                s.a = a;
                s.b = candidates[rng.uniform_int(candidates.size())];
                shapes.push_back(shapes[static_cast<std::size_t>(a)]);
            } else if (kind == GraphProgram::Step::kMatmul) {
                std::vector<int> candidates;
                for (std::size_t i = 0; i < shapes.size(); ++i)
                    if (shapes[i][0] == shapes[static_cast<std::size_t>(a)][1])
                        candidates.push_back(static_cast<int>(i));
                if (candidates.empty()) continue;
                s.kind = GraphProgram::Step::kMatmul;
                s.a = a;
                s.b = candidates[rng.uniform_int(candidates.size())];
                shapes.push_back({shapes[static_cast<std::size_t>(a)][0],
                                  shapes[static_cast<std::size_t>(s.b)][1]});
            } else if (kind == GraphProgram::Step::kLayerNorm) {
                const int width = shapes[static_cast<std::size_t>(a)][1];
                if (width < 2) continue;  // degenerate rows make the FD check ill-posed
                s.kind = GraphProgram::Step::kLayerNorm;
                s.a = a;
                s.gain = static_cast<int>(g.leaf_shapes.size());
                g.leaf_shapes.push_back({width});
                s.bias = static_cast<int>(g.leaf_shapes.size());
                g.leaf_shapes.push_back({width});
                shapes.push_back(shapes[static_cast<std::size_t>(a)]);
            } else {
                s.kind = static_cast<GraphProgram::Step::Kind>(kind);
                s.a = a;
                if (s.kind == GraphProgram::Step::kScale) s.c = 0.5 + rng.uniform();
                if (s.kind == GraphProgram::Step::kTranspose)
                    shapes.push_back({shapes[static_cast<std::size_t>(a)][1],
                                      shapes[static_cast<std::size_t>(a)][0]});
                else
                    shapes.push_back(shapes[static_cast<std::size_t>(a)]);
            }
            g.steps.push_back(s);
            break;
        }
    }
    return g;
}

// Leaf layout note: layer_norm gain/bias leaves are appended after the
// initial leaves; values vector must match leaf_shapes. Returns the scalar
// loss value; out_loss (when given) receives the loss tensor for backward.
inline double run_graph(const GraphProgram& g, const std::vector<std::vector<double>>& leaf_data,
                        editlab::Tape* tape, std::vector<editlab::Tensor>* out_leaves = nullptr,
                        editlab::Tensor* out_loss = nullptr) {
    using editlab::Tensor;
    std::vector<Tensor> leaf_tensors;
    for (std::size_t i = 0; i < g.leaf_shapes.size(); ++i) {
        Tensor t = Tensor::from_data(g.leaf_shapes[i], leaf_data[i], true);
        leaf_tensors.push_back(t);
        if (out_leaves) out_leaves->push_back(t);
    }
    // the op pool mirrors generation: initial leaves then step outputs
    std::vector<Tensor> pool(leaf_tensors.begin(),
                             leaf_tensors.begin() + static_cast<std::ptrdiff_t>(g.n_initial));
    for (const auto& s : g.steps) {
        using K = GraphProgram::Step;
        Tensor out;
        switch (s.kind) {
            case K::kAdd: out = editlab::add(pool[static_cast<std::size_t>(s.a)], pool[static_cast<std::size_t>(s.b)], tape); break;
            case K::kMul: out = editlab::mul(pool[static_cast<std::size_t>(s.a)], pool[static_cast<std::size_t>(s.b)], tape); break;
            case K::kMatmul: out = editlab::matmul(pool[static_cast<std::size_t>(s.a)], pool[static_cast<std::size_t>(s.b)], tape); break;
            case K::kGelu: out = editlab::gelu(pool[static_cast<std::size_t>(s.a)], tape); break;
            case K::kSoftmax: out = editlab::softmax_rows(pool[static_cast<std::size_t>(s.a)], tape); break;
            case K::kTranspose: out = editlab::transpose(pool[static_cast<std::size_t>(s.a)], tape); break;
            case K::kScale: out = editlab::scale(pool[static_cast<std::size_t>(s.a)], s.c, tape); break;
            case K::kLayerNorm:
                out = editlab::layer_norm(pool[static_cast<std::size_t>(s.a)],
                                          leaf_tensors[static_cast<std::size_t>(s.gain)],
                                          leaf_tensors[static_cast<std::size_t>(s.bias)], tape);
                break;
        }
        pool.push_back(out);
    }
    // every pool entry feeds the loss so all leaves receive gradients
    Tensor loss;
    for (const Tensor& t : pool) {
        Tensor s = editlab::sum_all(t, tape);
        loss = loss.defined() ? editlab::add(loss, s, tape) : s;
    }
    if (out_loss) *out_loss = loss;
    return loss.at(0);
}

}  // namespace oracles
