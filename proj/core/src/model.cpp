#include "editlab/model.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>

#include "editlab/hash.hpp"

namespace editlab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

void ModelConfig::validate() const {
    if (vocab_size <= 0) throw ConfigError("vocab_size must be positive");
    if (d_model <= 0 || n_heads <= 0 || n_layers <= 0 || d_ffn <= 0 || max_seq_len <= 0)
        throw ConfigError("model dimensions must be positive");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
}

TransformerLM::TransformerLM(const ModelConfig& config) : config_(config) {
    config_.validate();
    Rng rng(config_.seed);
    build_params(rng);
    index_params();
}

void TransformerLM::build_params(Rng& rng) {
    const int d = config_.d_model;
    const int f = config_.d_ffn;
    const int v = config_.vocab_size;
    const double init_std = 0.02;
    // residual output projections scaled down with depth, GPT-2 style
    const double resid_std = init_std / std::sqrt(2.0 * config_.n_layers);

    auto weight = [&](const std::string& id, int r, int c) {
        const bool resid = id.ends_with(".attn.wo") || id.ends_with(".ffn.w2");
        params_.push_back({id, Tensor::randn({r, c}, rng, resid ? resid_std : init_std, true)});
    };
    auto ones = [&](const std::string& id, int n) {
        params_.push_back({id, Tensor::full({n}, 1.0, true)});
    };
    auto zeros = [&](const std::string& id, int n) {
        params_.push_back({id, Tensor::zeros({n}, true)});
    };

    weight("embed.tok", v, d);
    weight("embed.pos", config_.max_seq_len, d);
    for (int i = 0; i < config_.n_layers; ++i) {
        const std::string p = "layer." + std::to_string(i) + ".";
        ones(p + "ln1.g", d);
        zeros(p + "ln1.b", d);
        weight(p + "attn.wq", d, d);
        weight(p + "attn.wk", d, d);
        weight(p + "attn.wv", d, d);
        weight(p + "attn.wo", d, d);
        ones(p + "ln2.g", d);
        zeros(p + "ln2.b", d);
        weight(p + "ffn.w1", d, f);
        zeros(p + "ffn.b1", f);
        weight(p + "ffn.w2", f, d);
        zeros(p + "ffn.b2", d);
    }
    ones("final_ln.g", d);
    zeros("final_ln.b", d);
    weight("lm_head", d, v);
}

void TransformerLM::index_params() {
    by_id_.clear();
    by_id_.reserve(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) by_id_.emplace_back(params_[i].id, i);
    std::sort(by_id_.begin(), by_id_.end());
}

Parameter& TransformerLM::param(const std::string& id) {
    auto it = std::lower_bound(by_id_.begin(), by_id_.end(), id,
                               [](const auto& e, const std::string& k) { return e.first < k; });
    if (it == by_id_.end() || it->first != id) throw ContractError("unknown parameter id: " + id);
    return params_[it->second];
}

const Parameter& TransformerLM::param(const std::string& id) const {
    return const_cast<TransformerLM*>(this)->param(id);
}

bool TransformerLM::has_param(const std::string& id) const {
    auto it = std::lower_bound(by_id_.begin(), by_id_.end(), id,
                               [](const auto& e, const std::string& k) { return e.first < k; });
    return it != by_id_.end() && it->first == id;
}

std::optional<int> TransformerLM::layer_of(const std::string& id) {
    if (!id.starts_with("layer.")) return std::nullopt;
    const char* begin = id.data() + 6;
    const char* end = id.data() + id.size();
    int value = 0;
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc{} || ptr == begin || ptr == end || *ptr != '.') return std::nullopt;
    return value;
}

Tensor TransformerLM::forward(std::span<const int> tokens, Tape* tape,
                              const ForwardHooks* hooks) const {
    if (tokens.empty()) throw ContractError("forward: empty token sequence");
    const int T = static_cast<int>(tokens.size());
    if (T > config_.max_seq_len) throw DimensionError("forward: sequence exceeds max_seq_len");
    for (int t : tokens)
        if (t < 0 || t >= config_.vocab_size) throw ContractError("forward: token index out of range");

    if (!hooks) hooks = &hooks_;
    const int d = config_.d_model;
    const int n_heads = config_.n_heads;
    const int dh = d / n_heads;
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor x = add(gather_rows(param("embed.tok").value, tokens, tape),
                   slice_rows(param("embed.pos").value, 0, T, tape), tape);

    for (int i = 0; i < config_.n_layers; ++i) {
        const std::string p = "layer." + std::to_string(i) + ".";
        Tensor xn = layer_norm(x, param(p + "ln1.g").value, param(p + "ln1.b").value, tape);

        auto project = [&](AttnProj which, const char* name, const Tensor& input) {
            Tensor base = matmul(input, param(p + "attn." + name).value, tape);
            if (hooks->attn_proj) return hooks->attn_proj(i, which, input, base, tape);
            return base;
        };
        Tensor q = project(AttnProj::Q, "wq", xn);
        Tensor k = project(AttnProj::K, "wk", xn);
        Tensor v = project(AttnProj::V, "wv", xn);

        std::vector<Tensor> heads;
        heads.reserve(static_cast<std::size_t>(n_heads));
        for (int h = 0; h < n_heads; ++h) {
            Tensor qh = slice_cols(q, h * dh, dh, tape);
            Tensor kh = slice_cols(k, h * dh, dh, tape);
            Tensor vh = slice_cols(v, h * dh, dh, tape);
            Tensor scores = scale(matmul(qh, transpose(kh, tape), tape), attn_scale, tape);
            Tensor probs = causal_softmax(scores, tape);
            heads.push_back(matmul(probs, vh, tape));
        }
        Tensor merged = concat_cols(heads, tape);
        Tensor attn_out = project(AttnProj::O, "wo", merged);
        x = add(x, attn_out, tape);

        Tensor xn2 = layer_norm(x, param(p + "ln2.g").value, param(p + "ln2.b").value, tape);
        Tensor act = gelu(add_bias_rows(matmul(xn2, param(p + "ffn.w1").value, tape),
                                        param(p + "ffn.b1").value, tape),
                          tape);
        Tensor down = add_bias_rows(matmul(act, param(p + "ffn.w2").value, tape),
                                    param(p + "ffn.b2").value, tape);
        x = add(x, down, tape);
        if (hooks->ffn_down) x = hooks->ffn_down(i, act, x, tape);
    }

    x = layer_norm(x, param("final_ln.g").value, param("final_ln.b").value, tape);
    return matmul(x, param("lm_head").value, tape);
}

std::vector<int> TransformerLM::greedy_complete(std::span<const int> prompt, int stop_token,
                                                int max_new) const {
    if (prompt.empty()) throw ContractError("greedy_complete: empty prompt");
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> generated;
    for (int step = 0; step < max_new; ++step) {
        if (static_cast<int>(seq.size()) >= config_.max_seq_len) break;
        Tensor logits = forward(seq, nullptr, nullptr);
        const int T = logits.rows();
        const int V = logits.cols();
        const auto lv = logits.data();
        const double* row = &lv[static_cast<std::size_t>(T - 1) * V];
        int best = 0;
        for (int j = 1; j < V; ++j)
            if (row[j] > row[best]) best = j;
        seq.push_back(best);
        generated.push_back(best);
        if (best == stop_token) break;
    }
    return generated;
}

namespace {

// Next-token loss for one sequence: positions 0..T-2 predict tokens 1..T-1.
Tensor sequence_loss(const TransformerLM& model, std::span<const int> seq, Tape* tape) {
    const int T = static_cast<int>(seq.size());
    Tensor logits = model.forward(seq.subspan(0, static_cast<std::size_t>(T - 1)), tape);
    std::vector<int> targets(seq.begin() + 1, seq.end());
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(T - 1), 1);
    return cross_entropy(logits, targets, mask, tape);
}

}  // namespace

TrainStats TransformerLM::train_lm(const std::vector<std::vector<int>>& corpus,
                                   const TrainOptions& opts) {
    if (corpus.empty()) throw ContractError("train_lm: empty corpus");
    TrainStats stats;
    if (opts.epochs <= 0) return stats;

    Adam adam({.lr = opts.lr});
    Rng rng(opts.seed);

    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    const int workers = std::max(1, opts.workers);
    constexpr std::size_t kChunk = 8;  // fixed so results do not depend on worker count

    // Worker clones; data refreshed from this model before every chunk.
    std::vector<TransformerLM> clones;
    for (int w = 0; w < workers; ++w) clones.push_back(clone());

    const std::size_t flat_size = [&] {
        std::size_t n = 0;
        for (const Parameter& p : params_) n += p.value.size();
        return n;
    }();

    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t epoch_count = 0;

        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opts.batch)) {
            const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(opts.batch));
            std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(stop));
            // drop degenerate sequences
            std::erase_if(batch, [&](std::size_t s) { return corpus[s].size() < 2; });
            if (batch.empty()) continue;

            double batch_loss = 0.0;
            if (batch.size() <= kChunk) {
                for (std::size_t s : batch) {
                    Tape tape;
                    Tensor loss = sequence_loss(*this, corpus[s], &tape);
                    batch_loss += loss.at(0);
                    tape.backward(loss);
                }
            } else {
                // Fixed chunking, merged in chunk order: the result is
                // bit-identical for any worker count.
                const std::size_t n_chunks = (batch.size() + kChunk - 1) / kChunk;
                std::vector<std::vector<double>> chunk_grads(n_chunks);
                std::vector<double> chunk_loss(n_chunks, 0.0);
                std::atomic<std::size_t> next{0};
                auto run = [&](int w) {
                    TransformerLM& m = clones[static_cast<std::size_t>(w)];
                    for (;;) {
                        const std::size_t c = next.fetch_add(1);
                        if (c >= n_chunks) break;
                        for (std::size_t i = 0; i < m.params_.size(); ++i) {
                            m.params_[i].value.copy_data_from(params_[i].value);
                            m.params_[i].value.zero_grad();
                        }
                        const std::size_t lo = c * kChunk;
                        const std::size_t hi = std::min(batch.size(), lo + kChunk);
                        for (std::size_t b = lo; b < hi; ++b) {
                            Tape tape;
                            Tensor loss = sequence_loss(m, corpus[batch[b]], &tape);
                            chunk_loss[c] += loss.at(0);
                            tape.backward(loss);
                        }
                        std::vector<double>& flat = chunk_grads[c];
                        flat.resize(flat_size, 0.0);
                        std::size_t off = 0;
                        for (Parameter& p : m.params_) {
                            if (p.value.has_grad()) {
                                const auto g = p.value.grad();
                                std::copy(g.begin(), g.end(), flat.begin() + static_cast<std::ptrdiff_t>(off));
                            }
                            off += p.value.size();
                        }
                    }
                };
                std::vector<std::thread> pool;
                for (int w = 0; w < workers; ++w) pool.emplace_back(run, w);
                for (auto& t : pool) t.join();
                for (std::size_t c = 0; c < n_chunks; ++c) {
                    batch_loss += chunk_loss[c];
                    std::size_t off = 0;
                    for (Parameter& p : params_) {
                        auto g = p.value.grad();
                        const double* src = chunk_grads[c].data() + off;
                        for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
                        off += p.value.size();
                    }
                }
            }

            if (!std::isfinite(batch_loss)) throw TrainingError("train_lm: loss diverged");
            const double inv = 1.0 / static_cast<double>(batch.size());
            for (Parameter& p : params_) {
                if (!p.value.has_grad()) continue;
                for (double& g : p.value.grad()) g *= inv;
            }
            adam.step(params_);
            zero_grads(params_);
            epoch_loss += batch_loss;
            epoch_count += batch.size();
        }

        const double mean_loss = epoch_count ? epoch_loss / static_cast<double>(epoch_count) : 0.0;
        stats.epoch_losses.push_back(mean_loss);
        if (opts.on_epoch) opts.on_epoch(epoch, mean_loss);
    }
    return stats;
}

Snapshot TransformerLM::snapshot() const {
    Snapshot s;
    s.config = config_;
    s.tensors.reserve(params_.size());
    for (const Parameter& p : params_) s.tensors.push_back(p.value.detached_copy());
    return s;
}

void TransformerLM::restore(const Snapshot& snap) {
    if (!(snap.config == config_)) throw ContractError("restore: snapshot config mismatch");
    if (snap.tensors.size() != params_.size())
        throw ContractError("restore: snapshot tensor count mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i)
        params_[i].value.copy_data_from(snap.tensors[i]);
}

namespace {

constexpr char kMagic[8] = {'E', 'D', 'L', 'M', 'C', 'K', 'P', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

struct HashingWriter {
    std::ofstream out;
    Fnv64 hash;
    void write(const void* p, std::size_t n) {
        out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        hash.update(p, n);
    }
    template <class T>
    void write_pod(T v) {
        write(&v, sizeof(v));
    }
};

struct HashingReader {
    std::ifstream in;
    Fnv64 hash;
    void read(void* p, std::size_t n) {
        in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (!in) throw IoError("checkpoint: truncated file");
        hash.update(p, n);
    }
    template <class T>
    T read_pod() {
        T v;
        read(&v, sizeof(v));
        return v;
    }
};

}  // namespace

void TransformerLM::save_checkpoint(const std::string& path) const {
    HashingWriter w;
    w.out.open(path, std::ios::binary | std::ios::trunc);
    if (!w.out) throw IoError("checkpoint: cannot open for writing: " + path);
    w.write(kMagic, sizeof(kMagic));
    w.write_pod(kCheckpointVersion);
    w.write_pod(static_cast<std::int32_t>(config_.vocab_size));
    w.write_pod(static_cast<std::int32_t>(config_.d_model));
    w.write_pod(static_cast<std::int32_t>(config_.n_heads));
    w.write_pod(static_cast<std::int32_t>(config_.n_layers));
    w.write_pod(static_cast<std::int32_t>(config_.d_ffn));
    w.write_pod(static_cast<std::int32_t>(config_.max_seq_len));
    w.write_pod(config_.seed);
    w.write_pod(static_cast<std::uint32_t>(params_.size()));
    for (const Parameter& p : params_) {
        w.write_pod(static_cast<std::uint32_t>(p.id.size()));
        w.write(p.id.data(), p.id.size());
        w.write_pod(static_cast<std::uint32_t>(p.value.ndim()));
        for (int d : p.value.shape()) w.write_pod(static_cast<std::int32_t>(d));
        w.write(p.value.data().data(), p.value.size() * sizeof(double));
    }
    const std::uint64_t digest = w.hash.digest();
    w.out.write(reinterpret_cast<const char*>(&digest), sizeof(digest));
    if (!w.out) throw IoError("checkpoint: write failed: " + path);
}

TransformerLM TransformerLM::load_checkpoint(const std::string& path) {
    HashingReader r;
    r.in.open(path, std::ios::binary);
    if (!r.in) throw IoError("checkpoint: cannot open: " + path);
    char magic[8];
    r.read(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw IoError("checkpoint: bad magic: " + path);
    if (r.read_pod<std::uint32_t>() != kCheckpointVersion)
        throw IoError("checkpoint: unsupported format version");
    ModelConfig cfg;
    cfg.vocab_size = r.read_pod<std::int32_t>();
    cfg.d_model = r.read_pod<std::int32_t>();
    cfg.n_heads = r.read_pod<std::int32_t>();
    cfg.n_layers = r.read_pod<std::int32_t>();
    cfg.d_ffn = r.read_pod<std::int32_t>();
    cfg.max_seq_len = r.read_pod<std::int32_t>();
    cfg.seed = r.read_pod<std::uint64_t>();

    TransformerLM model(cfg);
    const auto n_params = r.read_pod<std::uint32_t>();
    if (n_params != model.params_.size()) throw IoError("checkpoint: parameter count mismatch");
    for (std::uint32_t i = 0; i < n_params; ++i) {
        const auto id_len = r.read_pod<std::uint32_t>();
        std::string id(id_len, '\0');
        r.read(id.data(), id_len);
        const auto ndim = r.read_pod<std::uint32_t>();
        std::vector<int> shape(ndim);
        for (auto& d : shape) d = r.read_pod<std::int32_t>();
        Parameter& p = model.param(id);
        if (p.value.shape() != shape) throw IoError("checkpoint: shape mismatch for " + id);
        r.read(p.value.data().data(), p.value.size() * sizeof(double));
    }
    const std::uint64_t expect = r.hash.digest();
    std::uint64_t stored;
    r.in.read(reinterpret_cast<char*>(&stored), sizeof(stored));
    if (!r.in || stored != expect) throw IoError("checkpoint: content hash mismatch: " + path);
    return model;
}

std::uint64_t TransformerLM::params_hash() const {
    Fnv64 h;
    h.update_i64(config_.vocab_size)
        .update_i64(config_.d_model)
        .update_i64(config_.n_heads)
        .update_i64(config_.n_layers)
        .update_i64(config_.d_ffn)
        .update_i64(config_.max_seq_len)
        .update_u64(config_.seed);
    for (const Parameter& p : params_) {
        h.update_str(p.id);
        for (int d : p.value.shape()) h.update_i64(d);
        h.update_doubles(p.value.data());
    }
    return h.digest();
}

TransformerLM TransformerLM::clone() const {
    TransformerLM c(config_);
    for (std::size_t i = 0; i < params_.size(); ++i)
        c.params_[i].value.copy_data_from(params_[i].value);
    return c;
}

}  // namespace editlab
