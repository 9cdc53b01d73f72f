#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "editlab/error.hpp"
#include "editlab/rng.hpp"

namespace editlab {

// Best-effort tracking of transient tensor allocations, per thread.
// Used by the harness to report an approximate peak memory cost per edit.
namespace memtrack {
void on_alloc(std::size_t bytes);
void on_free(std::size_t bytes);
void reset_peak();
std::size_t peak_bytes();
std::size_t live_bytes();
}  // namespace memtrack

struct TensorImpl;

// Dense row-major array of 64-bit floats. Handle semantics: copying a Tensor
// aliases the same storage; use detached_copy() for a deep copy.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, bool requires_grad = false);

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor identity(int n);
    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev,
                        bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const;
    int ndim() const;
    std::size_t size() const;
    int rows() const;  // 2-D only
    int cols() const;  // 2-D only

    std::span<double> data();
    std::span<const double> data() const;
    double& at(int i);
    double& at(int i, int j);
    double at(int i) const;
    double at(int i, int j) const;

    bool requires_grad() const;
    void set_requires_grad(bool v);

    bool has_grad() const;
    std::span<double> grad();        // allocates a zero grad on demand
    std::span<const double> grad() const;
    void zero_grad();
    void drop_grad();

    Tensor detached_copy() const;
    void copy_data_from(const Tensor& other);  // bitwise copy, shapes must match
    bool bit_equal(const Tensor& other) const;
    bool all_finite() const;

    // Stable identity of the underlying storage.
    const void* id() const;
    TensorImpl* impl() const { return impl_.get(); }
    std::shared_ptr<TensorImpl> impl_ptr() const { return impl_; }

  private:
    std::shared_ptr<TensorImpl> impl_;
};

// Named trainable tensor. The id encodes layer and sub-component
// ("layer.3.attn.wq") so layer grouping is a string operation.
struct Parameter {
    std::string id;
    Tensor value;
};

// Ordered record of primitive operations. Appending during the forward pass
// yields a topological order; backward() replays it in reverse exactly once
// for every node on the path to the loss.
class Tape {
  public:
    void record(std::vector<Tensor> inputs, const Tensor& output, std::function<void()> fn);
    // Accumulates into the grads of reachable leaf tensors (tensors not
    // produced by this tape). Intermediate grads are reset on every call, so
    // calling backward twice doubles leaf gradients exactly.
    void backward(const Tensor& loss);
    std::size_t size() const { return entries_.size(); }
    void clear();

  private:
    struct Entry {
        std::vector<std::shared_ptr<TensorImpl>> inputs;
        std::shared_ptr<TensorImpl> output;
        std::function<void()> fn;
    };
    std::vector<Entry> entries_;
};

// ---- primitive operations ----
// `tape` may be null: the op then runs in inference mode and records nothing.

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape);
Tensor transpose(const Tensor& a, Tape* tape);
Tensor add(const Tensor& a, const Tensor& b, Tape* tape);
Tensor sub(const Tensor& a, const Tensor& b, Tape* tape);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape);
Tensor scale(const Tensor& a, double c, Tape* tape);
// x: [m,n], bias: [n]; the only broadcast supported.
Tensor add_bias_rows(const Tensor& x, const Tensor& bias, Tape* tape);
// out[i,j] = x[i,j] * v[j]
Tensor col_scale(const Tensor& x, const Tensor& v, Tape* tape);
Tensor gelu(const Tensor& a, Tape* tape);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Tape* tape,
                  double eps = 1e-5);
Tensor softmax_rows(const Tensor& x, Tape* tape);
// Row i is a softmax over columns 0..i; columns > i are exactly zero.
Tensor causal_softmax(const Tensor& x, Tape* tape);
Tensor gather_rows(const Tensor& table, std::span<const int> idx, Tape* tape);
Tensor slice_rows(const Tensor& x, int r0, int h, Tape* tape);
Tensor slice_cols(const Tensor& x, int c0, int w, Tape* tape);
Tensor concat_cols(std::span<const Tensor> parts, Tape* tape);
// Rows with mask[i] != 0 are replaced by the next row of `values` (in row
// order); values must have exactly count(mask) rows.
Tensor replace_rows(const Tensor& x, const std::vector<std::uint8_t>& mask, const Tensor& values,
                    Tape* tape);
Tensor sum_all(const Tensor& a, Tape* tape);
// Mean negative log-softmax over unmasked positions. logits: [T,V],
// targets/mask: length T. Throws ContractError when every position is masked.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     const std::vector<std::uint8_t>& mask, Tape* tape);

void zero_grads(std::span<Parameter> params);

// ---- optimizer ----

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    // When >= 0, each per-element step is clamped to [-max_step, max_step],
    // bounding the L-inf norm of every update (0 pins the weights in place).
    // Negative disables the clamp.
    double max_step = -1.0;
};

class Adam {
  public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}
    // lr_scale multiplies the configured learning rate for this step only
    // (schedules live at the call site).
    void step(std::span<Parameter> params, double lr_scale = 1.0);
    const AdamConfig& config() const { return cfg_; }

  private:
    struct Moments {
        std::vector<double> m, v;
    };
    AdamConfig cfg_;
    std::int64_t t_ = 0;
    // keyed by storage identity; state persists across steps
    std::vector<std::pair<const void*, Moments>> state_;
    Moments& moments_for(const Tensor& t);
};

}  // namespace editlab
