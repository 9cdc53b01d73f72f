#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "editlab/model.hpp"

using namespace editlab;

namespace {

ModelConfig tiny_config(int vocab = 11) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_layers = 2;
    c.d_ffn = 16;
    c.max_seq_len = 16;
    c.seed = 77;
    return c;
}

// Plain-double reference forward for a 1-layer model: a step-by-step desk
// calculation independent of the Tensor/Tape machinery.
std::vector<double> reference_forward_1layer(const TransformerLM& model,
                                             const std::vector<int>& tokens) {
    const ModelConfig& c = model.config();
    const int T = static_cast<int>(tokens.size());
    const int d = c.d_model;
    const int dh = d / c.n_heads;
    auto get = [&](const std::string& id) { return model.param(id).value; };

    auto layer_norm_row = [&](std::vector<double>& row, const Tensor& g, const Tensor& b) {
        double mu = 0;
        for (double v : row) mu += v;
        mu /= static_cast<double>(row.size());
        double var = 0;
        for (double v : row) var += (v - mu) * (v - mu);
        var /= static_cast<double>(row.size());
        const double rs = 1.0 / std::sqrt(var + 1e-5);
        for (std::size_t j = 0; j < row.size(); ++j)
            row[j] = g.at(static_cast<int>(j)) * (row[j] - mu) * rs + b.at(static_cast<int>(j));
    };

    std::vector<std::vector<double>> x(static_cast<std::size_t>(T),
                                       std::vector<double>(static_cast<std::size_t>(d)));
    for (int t = 0; t < T; ++t)
        for (int j = 0; j < d; ++j)
            x[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)] =
                get("embed.tok").at(tokens[static_cast<std::size_t>(t)], j) +
                get("embed.pos").at(t, j);

    auto matvec = [&](const std::vector<double>& row, const Tensor& w) {
        std::vector<double> out(static_cast<std::size_t>(w.cols()), 0.0);
        for (int j = 0; j < w.cols(); ++j)
            for (int i = 0; i < w.rows(); ++i)
                out[static_cast<std::size_t>(j)] += row[static_cast<std::size_t>(i)] * w.at(i, j);
        return out;
    };

    {
        const std::string p = "layer.0.";
        std::vector<std::vector<double>> xn = x;
        for (auto& row : xn) layer_norm_row(row, get(p + "ln1.g"), get(p + "ln1.b"));
        std::vector<std::vector<double>> q, k, v;
        for (const auto& row : xn) {
            q.push_back(matvec(row, get(p + "attn.wq")));
            k.push_back(matvec(row, get(p + "attn.wk")));
            v.push_back(matvec(row, get(p + "attn.wv")));
        }
        std::vector<std::vector<double>> merged(
            static_cast<std::size_t>(T), std::vector<double>(static_cast<std::size_t>(d), 0.0));
        for (int h = 0; h < c.n_heads; ++h) {
            const int off = h * dh;
            for (int t = 0; t < T; ++t) {
                std::vector<double> scores(static_cast<std::size_t>(t) + 1, 0.0);
                for (int s = 0; s <= t; ++s) {
                    double dot = 0;
                    for (int j = 0; j < dh; ++j)
                        dot += q[static_cast<std::size_t>(t)][static_cast<std::size_t>(off + j)] *
                               k[static_cast<std::size_t>(s)][static_cast<std::size_t>(off + j)];
                    scores[static_cast<std::size_t>(s)] = dot / std::sqrt(static_cast<double>(dh));
                }
                double mx = scores[0];
                for (double sc : scores) mx = std::max(mx, sc);
                double denom = 0;
                for (double& sc : scores) {
                    sc = std::exp(sc - mx);
                    denom += sc;
                }
                for (double& sc : scores) sc /= denom;
                for (int j = 0; j < dh; ++j) {
                    double acc = 0;
                    for (int s = 0; s <= t; ++s)
                        acc += scores[static_cast<std::size_t>(s)] *
                               v[static_cast<std::size_t>(s)][static_cast<std::size_t>(off + j)];
                    merged[static_cast<std::size_t>(t)][static_cast<std::size_t>(off + j)] = acc;
                }
            }
        }
        for (int t = 0; t < T; ++t) {
            const auto attn_out = matvec(merged[static_cast<std::size_t>(t)], get(p + "attn.wo"));
            for (int j = 0; j < d; ++j)
                x[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)] +=
                    attn_out[static_cast<std::size_t>(j)];
        }
        for (int t = 0; t < T; ++t) {
            std::vector<double> row = x[static_cast<std::size_t>(t)];
            layer_norm_row(row, get(p + "ln2.g"), get(p + "ln2.b"));
            auto h1 = matvec(row, get(p + "ffn.w1"));
            for (int j = 0; j < c.d_ffn; ++j) {
                h1[static_cast<std::size_t>(j)] += get(p + "ffn.b1").at(j);
                const double u = h1[static_cast<std::size_t>(j)];
                h1[static_cast<std::size_t>(j)] = 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0)));
            }
            auto h2 = matvec(h1, get(p + "ffn.w2"));
            for (int j = 0; j < d; ++j)
                x[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)] +=
                    h2[static_cast<std::size_t>(j)] + get(p + "ffn.b2").at(j);
        }
    }

    std::vector<double> logits;
    for (int t = 0; t < T; ++t) {
        std::vector<double> row = x[static_cast<std::size_t>(t)];
        layer_norm_row(row, get("final_ln.g"), get("final_ln.b"));
        const auto l = matvec(row, get("lm_head"));
        logits.insert(logits.end(), l.begin(), l.end());
    }
    return logits;
}

}  // namespace

TEST_CASE("forward matches a step-by-step reference on a 1-layer model") {
    ModelConfig c;
    c.vocab_size = 9;
    c.d_model = 4;
    c.n_heads = 2;
    c.n_layers = 1;
    c.d_ffn = 8;
    c.max_seq_len = 8;
    c.seed = 1234;
    TransformerLM model(c);
    const std::vector<int> prompt{2, 5};
    Tensor logits = model.forward(prompt);
    const auto ref = reference_forward_1layer(model, prompt);
    REQUIRE(logits.size() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i)
        CHECK(std::abs(logits.data()[i] - ref[i]) <= 1e-12);
}

TEST_CASE("causality: future tokens never affect earlier logits") {
    TransformerLM model(tiny_config());
    std::vector<int> prompt{1, 2, 3, 4, 5, 6};
    Tensor before = model.forward(prompt);
    prompt[4] = 9;
    prompt[5] = 0;
    Tensor after = model.forward(prompt);
    for (int t = 0; t < 4; ++t)
        for (int v = 0; v < model.config().vocab_size; ++v)
            CHECK(before.at(t, v) == after.at(t, v));
}

TEST_CASE("forward is deterministic and validates inputs") {
    TransformerLM model(tiny_config());
    const std::vector<int> prompt{1, 2, 3};
    CHECK(model.forward(prompt).bit_equal(model.forward(prompt)));
    const std::vector<int> overlong(32, 1);
    CHECK_THROWS_AS(model.forward(overlong), DimensionError);
    const std::vector<int> bad{1, 99};
    CHECK_THROWS_AS(model.forward(bad), ContractError);
}

TEST_CASE("seeded init is reproducible, different seeds differ") {
    TransformerLM a(tiny_config());
    TransformerLM b(tiny_config());
    CHECK(a.params_hash() == b.params_hash());
    ModelConfig other = tiny_config();
    other.seed = 78;
    TransformerLM c(other);
    CHECK(a.params_hash() != c.params_hash());
}

TEST_CASE("greedy_complete on a rigged model emits the schedule then stops") {
    // Everything zeroed except: position embeddings carry a one-hot per
    // position, final_ln passes through, lm_head maps position dims to the
    // scheduled tokens. Blocks contribute nothing because their layernorm
    // gains are zero.
    ModelConfig c;
    c.vocab_size = 10;
    c.d_model = 4;
    c.n_heads = 2;
    c.n_layers = 1;
    c.d_ffn = 8;
    c.max_seq_len = 8;
    TransformerLM model(c);
    for (Parameter& p : model.params())
        std::fill(p.value.data().begin(), p.value.data().end(), 0.0);
    for (int j = 0; j < 4; ++j) model.param("final_ln.g").value.at(j) = 1.0;
    model.param("embed.pos").value.at(0, 0) = 1.0;
    model.param("embed.pos").value.at(1, 1) = 1.0;
    const int stop = 9;
    model.param("lm_head").value.at(0, 7) = 1.0;  // position 0 emits 7
    model.param("lm_head").value.at(1, stop) = 1.0;

    const std::vector<int> prompt{3};
    const auto out = model.greedy_complete(prompt, stop, 6);
    CHECK(out == std::vector<int>{7, stop});

    CHECK(model.greedy_complete(prompt, stop, 6) == out);
    CHECK(model.greedy_complete(prompt, stop, 6) == out);
}

TEST_CASE("greedy argmax ties break toward the lowest token index") {
    TransformerLM model(tiny_config());
    for (Parameter& p : model.params())
        std::fill(p.value.data().begin(), p.value.data().end(), 0.0);
    // all logits equal -> token 0 wins
    const auto out = model.greedy_complete(std::vector<int>{1}, 0, 3);
    CHECK(out == std::vector<int>{0});
}

TEST_CASE("snapshot/restore round-trips bit-exactly") {
    TransformerLM model(tiny_config());
    const std::vector<int> prompt{4, 2, 7};
    Tensor before = model.forward(prompt);
    Snapshot snap = model.snapshot();
    model.param("layer.1.attn.wq").value.at(0, 0) += 0.5;
    CHECK_FALSE(model.forward(prompt).bit_equal(before));
    model.restore(snap);
    CHECK(model.forward(prompt).bit_equal(before));

    ModelConfig other = tiny_config(13);
    TransformerLM different(other);
    CHECK_THROWS_AS(different.restore(snap), ContractError);
}

TEST_CASE("checkpoint save/load round-trips bit-exactly") {
    TransformerLM model(tiny_config());
    const std::string path = "test_model_ckpt.bin";
    model.save_checkpoint(path);
    TransformerLM loaded = TransformerLM::load_checkpoint(path);
    CHECK(loaded.params_hash() == model.params_hash());
    const std::vector<int> prompt{1, 2, 3, 4};
    CHECK(loaded.forward(prompt).bit_equal(model.forward(prompt)));
    std::remove(path.c_str());
}

TEST_CASE("layer_of parses parameter ids") {
    CHECK(TransformerLM::layer_of("layer.3.attn.wq") == 3);
    CHECK(TransformerLM::layer_of("layer.11.ffn.w2") == 11);
    CHECK_FALSE(TransformerLM::layer_of("embed.tok").has_value());
    CHECK_FALSE(TransformerLM::layer_of("final_ln.g").has_value());
}

TEST_CASE("train_lm: zero epochs is a no-op, training lowers corpus loss") {
    TransformerLM model(tiny_config());
    std::vector<std::vector<int>> corpus;
    Rng rng(5);
    for (int i = 0; i < 64; ++i) {
        std::vector<int> seq;
        int start = static_cast<int>(rng.uniform_int(4));
        for (int t = 0; t < 8; ++t) seq.push_back((start + t) % model.config().vocab_size);
        corpus.push_back(seq);
    }

    auto corpus_loss = [&](const TransformerLM& m) {
        double total = 0;
        for (const auto& seq : corpus) {
            Tensor logits = m.forward(std::span<const int>(seq.data(), seq.size() - 1));
            std::vector<int> targets(seq.begin() + 1, seq.end());
            std::vector<std::uint8_t> mask(targets.size(), 1);
            total += cross_entropy(logits, targets, mask, nullptr).at(0);
        }
        return total / static_cast<double>(corpus.size());
    };

    const std::uint64_t h0 = model.params_hash();
    TrainOptions zero;
    zero.epochs = 0;
    model.train_lm(corpus, zero);
    CHECK(model.params_hash() == h0);

    const double before = corpus_loss(model);
    TrainOptions opts;
    opts.epochs = 3;
    opts.lr = 3e-3;
    opts.batch = 8;
    opts.seed = 9;
    const TrainStats stats = model.train_lm(corpus, opts);
    CHECK(stats.epoch_losses.size() == 3);
    CHECK(corpus_loss(model) < before);

    CHECK_THROWS_AS(model.train_lm({}, opts), ContractError);
}

TEST_CASE("train_lm chunked parallel path is worker-count invariant") {
    std::vector<std::vector<int>> corpus;
    Rng rng(6);
    for (int i = 0; i < 48; ++i) {
        std::vector<int> seq;
        for (int t = 0; t < 10; ++t) seq.push_back(static_cast<int>(rng.uniform_int(11)));
        corpus.push_back(seq);
    }
    TrainOptions opts;
    opts.epochs = 2;
    opts.lr = 1e-3;
    opts.batch = 16;
    opts.seed = 4;

    TransformerLM m1(tiny_config());
    opts.workers = 1;
    m1.train_lm(corpus, opts);
    TransformerLM m2(tiny_config());
    opts.workers = 2;
    m2.train_lm(corpus, opts);
    TransformerLM m3(tiny_config());
    opts.workers = 3;
    m3.train_lm(corpus, opts);
    CHECK(m1.params_hash() == m2.params_hash());
    CHECK(m2.params_hash() == m3.params_hash());
}

TEST_CASE("clone is independent of the source") {
    TransformerLM model(tiny_config());
    TransformerLM copy = model.clone();
    CHECK(copy.params_hash() == model.params_hash());
    copy.param("lm_head").value.at(0, 0) += 1.0;
    CHECK(copy.params_hash() != model.params_hash());
}
