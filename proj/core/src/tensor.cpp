#include "editlab/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_map>
#include <unordered_set>

namespace editlab {

namespace memtrack {
namespace {
thread_local std::size_t g_live = 0;
thread_local std::size_t g_peak = 0;
}  // namespace

void on_alloc(std::size_t bytes) {
    g_live += bytes;
    if (g_live > g_peak) g_peak = g_live;
}
void on_free(std::size_t bytes) { g_live -= std::min(bytes, g_live); }
void reset_peak() { g_peak = g_live; }
std::size_t peak_bytes() { return g_peak; }
std::size_t live_bytes() { return g_live; }
}  // namespace memtrack

struct TensorImpl {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until touched
    bool requires_grad = false;

    TensorImpl(std::vector<int> s, std::size_t n) : shape(std::move(s)), data(n, 0.0) {
        memtrack::on_alloc(n * sizeof(double));
    }
    ~TensorImpl() { memtrack::on_free((data.capacity() + grad.capacity()) * sizeof(double)); }

    void ensure_grad() {
        if (grad.empty()) {
            grad.assign(data.size(), 0.0);
            memtrack::on_alloc(grad.capacity() * sizeof(double));
        }
    }
};

namespace {

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw DimensionError("tensor dimensions must be positive");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

MatMap mat(TensorImpl* t) {
    return MatMap(t->data.data(), t->shape[0], t->shape[1]);
}
ConstMatMap cmat(const TensorImpl* t) {
    return ConstMatMap(t->data.data(), t->shape[0], t->shape[1]);
}
MatMap gmat(TensorImpl* t) {
    return MatMap(t->grad.data(), t->shape[0], t->shape[1]);
}
ConstMatMap cgmat(const TensorImpl* t) {
    return ConstMatMap(t->grad.data(), t->shape[0], t->shape[1]);
}

void require_2d(const Tensor& t, const char* what) {
    if (t.ndim() != 2) throw DimensionError(std::string(what) + ": expected a 2-D tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) throw DimensionError(std::string(what) + ": shape mismatch");
}

bool want_grad(std::initializer_list<const Tensor*> ins, Tape* tape) {
    if (!tape) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

}  // namespace

// ---- Tensor ----

Tensor::Tensor(std::vector<int> shape, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    impl_ = std::make_shared<TensorImpl>(std::move(shape), n);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    return Tensor(std::move(shape), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    if (n != data.size()) throw DimensionError("from_data: shape does not match data length");
    Tensor t(std::move(shape), requires_grad);
    std::copy(data.begin(), data.end(), t.impl_->data.begin());
    return t;
}

Tensor Tensor::identity(int n) {
    Tensor t({n, n});
    for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
    return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t(std::move(shape), requires_grad);
    for (double& v : t.impl_->data) v = rng.normal(0.0, stddev);
    return t;
}

const std::vector<int>& Tensor::shape() const { return impl_->shape; }
int Tensor::ndim() const { return static_cast<int>(impl_->shape.size()); }
std::size_t Tensor::size() const { return impl_->data.size(); }

int Tensor::rows() const {
    if (ndim() != 2) throw DimensionError("rows(): tensor is not 2-D");
    return impl_->shape[0];
}
int Tensor::cols() const {
    if (ndim() != 2) throw DimensionError("cols(): tensor is not 2-D");
    return impl_->shape[1];
}

std::span<double> Tensor::data() { return impl_->data; }
std::span<const double> Tensor::data() const { return impl_->data; }

double& Tensor::at(int i) { return impl_->data[static_cast<std::size_t>(i)]; }
double& Tensor::at(int i, int j) {
    return impl_->data[static_cast<std::size_t>(i) * impl_->shape[1] + j];
}
double Tensor::at(int i) const { return impl_->data[static_cast<std::size_t>(i)]; }
double Tensor::at(int i, int j) const {
    return impl_->data[static_cast<std::size_t>(i) * impl_->shape[1] + j];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool v) { impl_->requires_grad = v; }

bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<double> Tensor::grad() {
    impl_->ensure_grad();
    return impl_->grad;
}
std::span<const double> Tensor::grad() const {
    if (!has_grad()) throw ContractError("grad(): no gradient present");
    return impl_->grad;
}
void Tensor::zero_grad() {
    if (has_grad()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}
void Tensor::drop_grad() {
    memtrack::on_free(impl_->grad.capacity() * sizeof(double));
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
}

Tensor Tensor::detached_copy() const {
    Tensor t(impl_->shape, false);
    std::copy(impl_->data.begin(), impl_->data.end(), t.impl_->data.begin());
    return t;
}

void Tensor::copy_data_from(const Tensor& other) {
    require_same_shape(*this, other, "copy_data_from");
    std::copy(other.impl_->data.begin(), other.impl_->data.end(), impl_->data.begin());
}

bool Tensor::bit_equal(const Tensor& other) const {
    if (impl_->shape != other.impl_->shape) return false;
    return std::memcmp(impl_->data.data(), other.impl_->data.data(),
                       impl_->data.size() * sizeof(double)) == 0;
}

bool Tensor::all_finite() const {
    for (double v : impl_->data)
        if (!std::isfinite(v)) return false;
    return true;
}

const void* Tensor::id() const { return impl_.get(); }

// ---- Tape ----

void Tape::record(std::vector<Tensor> inputs, const Tensor& output, std::function<void()> fn) {
    Entry e;
    e.inputs.reserve(inputs.size());
    for (const Tensor& t : inputs) e.inputs.push_back(t.impl_ptr());
    e.output = output.impl_ptr();
    e.fn = std::move(fn);
    entries_.push_back(std::move(e));
}

void Tape::clear() { entries_.clear(); }

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw ContractError("backward: loss must be a scalar tensor");

    // Tensors produced by this tape (non-leaves).
    std::unordered_set<TensorImpl*> produced;
    produced.reserve(entries_.size() * 2);
    for (const Entry& e : entries_) produced.insert(e.output.get());

    // Reverse reachability from the loss.
    std::unordered_set<TensorImpl*> active;
    active.insert(loss.impl());
    std::vector<std::size_t> run_order;
    run_order.reserve(entries_.size());
    for (std::size_t i = entries_.size(); i-- > 0;) {
        const Entry& e = entries_[i];
        if (!active.count(e.output.get())) continue;
        run_order.push_back(i);
        for (const auto& in : e.inputs)
            if (in->requires_grad) active.insert(in.get());
    }

    // Intermediate grads are scratch for this pass; leaf grads accumulate.
    for (std::size_t i : run_order) {
        TensorImpl* out = entries_[i].output.get();
        out->ensure_grad();
        std::fill(out->grad.begin(), out->grad.end(), 0.0);
        for (const auto& in : entries_[i].inputs)
            if (in->requires_grad && produced.count(in.get())) {
                in->ensure_grad();
                std::fill(in->grad.begin(), in->grad.end(), 0.0);
            }
    }
    loss.impl()->ensure_grad();
    loss.impl()->grad[0] = 1.0;

    for (std::size_t i : run_order) entries_[i].fn();
}

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions disagree");
    Tensor out({a.rows(), b.cols()}, want_grad({&a, &b}, tape));
    mat(out.impl()).noalias() = cmat(a.impl()) * cmat(b.impl());
    if (out.requires_grad()) {
        tape->record({a, b}, out, [ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr()] {
            if (ai->requires_grad) {
                ai->ensure_grad();
                gmat(ai.get()).noalias() += cgmat(oi.get()) * cmat(bi.get()).transpose();
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                gmat(bi.get()).noalias() += cmat(ai.get()).transpose() * cgmat(oi.get());
            }
        });
    }
    return out;
}

Tensor transpose(const Tensor& a, Tape* tape) {
    require_2d(a, "transpose");
    Tensor out({a.cols(), a.rows()}, want_grad({&a}, tape));
    mat(out.impl()).noalias() = cmat(a.impl()).transpose();
    if (out.requires_grad()) {
        tape->record({a}, out, [ai = a.impl_ptr(), oi = out.impl_ptr()] {
            ai->ensure_grad();
            gmat(ai.get()).noalias() += cgmat(oi.get()).transpose();
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape(), want_grad({&a, &b}, tape));
    const auto av = a.data();
    const auto bv = b.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (out.requires_grad()) {
        tape->record({a, b}, out, [ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr()] {
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i] += oi->grad[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b, Tape* tape) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape(), want_grad({&a, &b}, tape));
    const auto av = a.data();
    const auto bv = b.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    if (out.requires_grad()) {
        tape->record({a, b}, out, [ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr()] {
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t i = 0; i < oi->grad.size(); ++i) bi->grad[i] -= oi->grad[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
    require_same_shape(a, b, "mul");
    Tensor out(a.shape(), want_grad({&a, &b}, tape));
    const auto av = a.data();
    const auto bv = b.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (out.requires_grad()) {
        tape->record({a, b}, out, [ai = a.impl_ptr(), bi = b.impl_ptr(), oi = out.impl_ptr()] {
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (std::size_t i = 0; i < oi->grad.size(); ++i)
                    ai->grad[i] += oi->grad[i] * bi->data[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t i = 0; i < oi->grad.size(); ++i)
                    bi->grad[i] += oi->grad[i] * ai->data[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double c, Tape* tape) {
    Tensor out(a.shape(), want_grad({&a}, tape));
    const auto av = a.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
    if (out.requires_grad()) {
        tape->record({a}, out, [ai = a.impl_ptr(), oi = out.impl_ptr(), c] {
            ai->ensure_grad();
            for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * c;
        });
    }
    return out;
}

Tensor add_bias_rows(const Tensor& x, const Tensor& bias, Tape* tape) {
    require_2d(x, "add_bias_rows");
    if (bias.ndim() != 1 || bias.shape()[0] != x.cols())
        throw DimensionError("add_bias_rows: bias must be 1-D of width cols(x)");
    Tensor out(x.shape(), want_grad({&x, &bias}, tape));
    const int m = x.rows(), n = x.cols();
    const auto xv = x.data();
    const auto bv = bias.data();
    auto ov = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ov[static_cast<std::size_t>(i) * n + j] = xv[static_cast<std::size_t>(i) * n + j] + bv[j];
    if (out.requires_grad()) {
        tape->record({x, bias}, out, [xi = x.impl_ptr(), bi = bias.impl_ptr(), oi = out.impl_ptr(), m, n] {
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (std::size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        bi->grad[j] += oi->grad[static_cast<std::size_t>(i) * n + j];
            }
        });
    }
    return out;
}

Tensor col_scale(const Tensor& x, const Tensor& v, Tape* tape) {
    require_2d(x, "col_scale");
    if (v.ndim() != 1 || v.shape()[0] != x.cols())
        throw DimensionError("col_scale: v must be 1-D of width cols(x)");
    Tensor out(x.shape(), want_grad({&x, &v}, tape));
    const int m = x.rows(), n = x.cols();
    const auto xv = x.data();
    const auto vv = v.data();
    auto ov = out.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            ov[static_cast<std::size_t>(i) * n + j] = xv[static_cast<std::size_t>(i) * n + j] * vv[j];
    if (out.requires_grad()) {
        tape->record({x, v}, out, [xi = x.impl_ptr(), vi = v.impl_ptr(), oi = out.impl_ptr(), m, n] {
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        xi->grad[static_cast<std::size_t>(i) * n + j] +=
                            oi->grad[static_cast<std::size_t>(i) * n + j] * vi->data[j];
            }
            if (vi->requires_grad) {
                vi->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        vi->grad[j] += oi->grad[static_cast<std::size_t>(i) * n + j] *
                                       xi->data[static_cast<std::size_t>(i) * n + j];
            }
        });
    }
    return out;
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Tensor gelu(const Tensor& a, Tape* tape) {
    Tensor out(a.shape(), want_grad({&a}, tape));
    const auto av = a.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < ov.size(); ++i)
        ov[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * kInvSqrt2));
    if (out.requires_grad()) {
        tape->record({a}, out, [ai = a.impl_ptr(), oi = out.impl_ptr()] {
            ai->ensure_grad();
            for (std::size_t i = 0; i < oi->grad.size(); ++i) {
                const double x = ai->data[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                ai->grad[i] += oi->grad[i] * (cdf + x * pdf);
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Tape* tape,
                  double eps) {
    require_2d(x, "layer_norm");
    const int m = x.rows(), n = x.cols();
    if (gain.ndim() != 1 || gain.shape()[0] != n || bias.ndim() != 1 || bias.shape()[0] != n)
        throw DimensionError("layer_norm: gain/bias must be 1-D of width cols(x)");
    Tensor out(x.shape(), want_grad({&x, &gain, &bias}, tape));
    const auto xv = x.data();
    const auto gv = gain.data();
    const auto bv = bias.data();
    auto ov = out.data();
    // cached per-row statistics for the backward pass
    std::vector<double> mean(static_cast<std::size_t>(m)), rstd(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        const double* row = &xv[static_cast<std::size_t>(i) * n];
        double mu = 0.0;
        for (int j = 0; j < n; ++j) mu += row[j];
        mu /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= n;
        const double rs = 1.0 / std::sqrt(var + eps);
        mean[static_cast<std::size_t>(i)] = mu;
        rstd[static_cast<std::size_t>(i)] = rs;
        for (int j = 0; j < n; ++j)
            ov[static_cast<std::size_t>(i) * n + j] = gv[j] * (row[j] - mu) * rs + bv[j];
    }
    if (out.requires_grad()) {
        tape->record({x, gain, bias}, out,
                     [xi = x.impl_ptr(), gi = gain.impl_ptr(), bi = bias.impl_ptr(),
                      oi = out.impl_ptr(), m, n, mean = std::move(mean), rstd = std::move(rstd)] {
            for (int i = 0; i < m; ++i) {
                const double* row = &xi->data[static_cast<std::size_t>(i) * n];
                const double* go = &oi->grad[static_cast<std::size_t>(i) * n];
                const double mu = mean[static_cast<std::size_t>(i)];
                const double rs = rstd[static_cast<std::size_t>(i)];
                if (gi->requires_grad) {
                    gi->ensure_grad();
                    for (int j = 0; j < n; ++j) gi->grad[j] += go[j] * (row[j] - mu) * rs;
                }
                if (bi->requires_grad) {
                    bi->ensure_grad();
                    for (int j = 0; j < n; ++j) bi->grad[j] += go[j];
                }
                if (xi->requires_grad) {
                    xi->ensure_grad();
                    double* gx = &xi->grad[static_cast<std::size_t>(i) * n];
                    // dxhat = go * gain; dx via the standard layernorm identity
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int j = 0; j < n; ++j) {
                        const double xhat = (row[j] - mu) * rs;
                        const double dxhat = go[j] * gi->data[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for (int j = 0; j < n; ++j) {
                        const double xhat = (row[j] - mu) * rs;
                        const double dxhat = go[j] * gi->data[j];
                        gx[j] += rs * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
            }
        });
    }
    return out;
}

namespace {

// Shared softmax forward/backward over an explicit active width per row.
void softmax_rows_fwd(const double* x, double* y, int m, int n,
                      const std::function<int(int)>& active_width) {
    for (int i = 0; i < m; ++i) {
        const int w = active_width(i);
        const double* row = &x[static_cast<std::size_t>(i) * n];
        double* out = &y[static_cast<std::size_t>(i) * n];
        double mx = row[0];
        for (int j = 1; j < w; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < w; ++j) {
            out[j] = std::exp(row[j] - mx);
            denom += out[j];
        }
        for (int j = 0; j < w; ++j) out[j] /= denom;
        for (int j = w; j < n; ++j) out[j] = 0.0;
    }
}

void softmax_rows_bwd(const double* y, const double* gy, double* gx, int m, int n,
                      const std::function<int(int)>& active_width) {
    for (int i = 0; i < m; ++i) {
        const int w = active_width(i);
        const double* yr = &y[static_cast<std::size_t>(i) * n];
        const double* gr = &gy[static_cast<std::size_t>(i) * n];
        double* gxr = &gx[static_cast<std::size_t>(i) * n];
        double dot = 0.0;
        for (int j = 0; j < w; ++j) dot += gr[j] * yr[j];
        for (int j = 0; j < w; ++j) gxr[j] += yr[j] * (gr[j] - dot);
    }
}

}  // namespace

Tensor softmax_rows(const Tensor& x, Tape* tape) {
    require_2d(x, "softmax_rows");
    const int m = x.rows(), n = x.cols();
    Tensor out(x.shape(), want_grad({&x}, tape));
    softmax_rows_fwd(x.data().data(), out.data().data(), m, n, [n](int) { return n; });
    if (out.requires_grad()) {
        tape->record({x}, out, [xi = x.impl_ptr(), oi = out.impl_ptr(), m, n] {
            xi->ensure_grad();
            softmax_rows_bwd(oi->data.data(), oi->grad.data(), xi->grad.data(), m, n,
                             [n](int) { return n; });
        });
    }
    return out;
}

Tensor causal_softmax(const Tensor& x, Tape* tape) {
    require_2d(x, "causal_softmax");
    if (x.rows() != x.cols()) throw DimensionError("causal_softmax: expected a square matrix");
    const int m = x.rows(), n = x.cols();
    Tensor out(x.shape(), want_grad({&x}, tape));
    softmax_rows_fwd(x.data().data(), out.data().data(), m, n, [](int i) { return i + 1; });
    if (out.requires_grad()) {
        tape->record({x}, out, [xi = x.impl_ptr(), oi = out.impl_ptr(), m, n] {
            xi->ensure_grad();
            softmax_rows_bwd(oi->data.data(), oi->grad.data(), xi->grad.data(), m, n,
                             [](int i) { return i + 1; });
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& table, std::span<const int> idx, Tape* tape) {
    require_2d(table, "gather_rows");
    const int n = table.cols();
    const int rows = table.rows();
    for (int t : idx)
        if (t < 0 || t >= rows) throw ContractError("gather_rows: index out of range");
    Tensor out({static_cast<int>(idx.size()), n}, want_grad({&table}, tape));
    const auto tv = table.data();
    auto ov = out.data();
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(&tv[static_cast<std::size_t>(idx[i]) * n], n, &ov[i * n]);
    if (out.requires_grad()) {
        std::vector<int> idx_copy(idx.begin(), idx.end());
        tape->record({table}, out,
                     [ti = table.impl_ptr(), oi = out.impl_ptr(), idx = std::move(idx_copy), n] {
            ti->ensure_grad();
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (int j = 0; j < n; ++j)
                    ti->grad[static_cast<std::size_t>(idx[i]) * n + j] += oi->grad[i * n + j];
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& x, int r0, int h, Tape* tape) {
    require_2d(x, "slice_rows");
    if (r0 < 0 || h <= 0 || r0 + h > x.rows()) throw DimensionError("slice_rows: range out of bounds");
    const int n = x.cols();
    Tensor out({h, n}, want_grad({&x}, tape));
    std::copy_n(&x.data()[static_cast<std::size_t>(r0) * n], static_cast<std::size_t>(h) * n,
                out.data().data());
    if (out.requires_grad()) {
        tape->record({x}, out, [xi = x.impl_ptr(), oi = out.impl_ptr(), r0, h, n] {
            xi->ensure_grad();
            for (std::size_t i = 0; i < static_cast<std::size_t>(h) * n; ++i)
                xi->grad[static_cast<std::size_t>(r0) * n + i] += oi->grad[i];
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& x, int c0, int w, Tape* tape) {
    require_2d(x, "slice_cols");
    if (c0 < 0 || w <= 0 || c0 + w > x.cols()) throw DimensionError("slice_cols: range out of bounds");
    const int m = x.rows(), n = x.cols();
    Tensor out({m, w}, want_grad({&x}, tape));
    const auto xv = x.data();
    auto ov = out.data();
    for (int i = 0; i < m; ++i)
        std::copy_n(&xv[static_cast<std::size_t>(i) * n + c0], w, &ov[static_cast<std::size_t>(i) * w]);
    if (out.requires_grad()) {
        tape->record({x}, out, [xi = x.impl_ptr(), oi = out.impl_ptr(), c0, w, m, n] {
            xi->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < w; ++j)
                    xi->grad[static_cast<std::size_t>(i) * n + c0 + j] +=
                        oi->grad[static_cast<std::size_t>(i) * w + j];
        });
    }
    return out;
}

Tensor concat_cols(std::span<const Tensor> parts, Tape* tape) {
    if (parts.empty()) throw DimensionError("concat_cols: no parts");
    const int m = parts[0].rows();
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.rows() != m) throw DimensionError("concat_cols: row counts disagree");
        total += p.cols();
    }
    bool needs = false;
    for (const Tensor& p : parts) needs = needs || p.requires_grad();
    Tensor out({m, total}, tape != nullptr && needs);
    auto ov = out.data();
    int off = 0;
    for (const Tensor& p : parts) {
        const int w = p.cols();
        const auto pv = p.data();
        for (int i = 0; i < m; ++i)
            std::copy_n(&pv[static_cast<std::size_t>(i) * w], w,
                        &ov[static_cast<std::size_t>(i) * total + off]);
        off += w;
    }
    if (out.requires_grad()) {
        std::vector<Tensor> ins(parts.begin(), parts.end());
        std::vector<std::shared_ptr<TensorImpl>> impls;
        for (const Tensor& p : parts) impls.push_back(p.impl_ptr());
        tape->record(ins, out, [impls, oi = out.impl_ptr(), m, total] {
            int off = 0;
            for (const auto& pi : impls) {
                const int w = pi->shape[1];
                if (pi->requires_grad) {
                    pi->ensure_grad();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                            pi->grad[static_cast<std::size_t>(i) * w + j] +=
                                oi->grad[static_cast<std::size_t>(i) * total + off + j];
                }
                off += w;
            }
        });
    }
    return out;
}

Tensor replace_rows(const Tensor& x, const std::vector<std::uint8_t>& mask, const Tensor& values,
                    Tape* tape) {
    require_2d(x, "replace_rows");
    require_2d(values, "replace_rows");
    if (static_cast<int>(mask.size()) != x.rows())
        throw DimensionError("replace_rows: mask length must equal rows(x)");
    if (values.cols() != x.cols())
        throw DimensionError("replace_rows: value width must equal cols(x)");
    int k = 0;
    for (std::uint8_t m : mask) k += m ? 1 : 0;
    if (k != values.rows())
        throw DimensionError("replace_rows: values must have one row per masked position");
    const int m = x.rows(), n = x.cols();
    Tensor out(x.shape(), want_grad({&x, &values}, tape));
    const auto xv = x.data();
    const auto vv = values.data();
    auto ov = out.data();
    int r = 0;
    for (int i = 0; i < m; ++i) {
        if (mask[static_cast<std::size_t>(i)]) {
            std::copy_n(&vv[static_cast<std::size_t>(r) * n], n, &ov[static_cast<std::size_t>(i) * n]);
            ++r;
        } else {
            std::copy_n(&xv[static_cast<std::size_t>(i) * n], n, &ov[static_cast<std::size_t>(i) * n]);
        }
    }
    if (out.requires_grad()) {
        tape->record({x, values}, out,
                     [xi = x.impl_ptr(), vi = values.impl_ptr(), oi = out.impl_ptr(), mask, m, n] {
            if (xi->requires_grad) xi->ensure_grad();
            if (vi->requires_grad) vi->ensure_grad();
            int r = 0;
            for (int i = 0; i < m; ++i) {
                if (mask[static_cast<std::size_t>(i)]) {
                    if (vi->requires_grad)
                        for (int j = 0; j < n; ++j)
                            vi->grad[static_cast<std::size_t>(r) * n + j] +=
                                oi->grad[static_cast<std::size_t>(i) * n + j];
                    ++r;
                } else if (xi->requires_grad) {
                    for (int j = 0; j < n; ++j)
                        xi->grad[static_cast<std::size_t>(i) * n + j] +=
                            oi->grad[static_cast<std::size_t>(i) * n + j];
                }
            }
        });
    }
    return out;
}

Tensor sum_all(const Tensor& a, Tape* tape) {
    Tensor out({1}, want_grad({&a}, tape));
    double s = 0.0;
    for (double v : a.data()) s += v;
    out.at(0) = s;
    if (out.requires_grad()) {
        tape->record({a}, out, [ai = a.impl_ptr(), oi = out.impl_ptr()] {
            ai->ensure_grad();
            const double g = oi->grad[0];
            for (double& gv : ai->grad) gv += g;
        });
    }
    return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                     const std::vector<std::uint8_t>& mask, Tape* tape) {
    require_2d(logits, "cross_entropy");
    const int T = logits.rows(), V = logits.cols();
    if (static_cast<int>(targets.size()) != T || static_cast<int>(mask.size()) != T)
        throw DimensionError("cross_entropy: targets/mask length must equal rows(logits)");
    int unmasked = 0;
    for (int t = 0; t < T; ++t) {
        if (!mask[static_cast<std::size_t>(t)]) continue;
        ++unmasked;
        if (targets[static_cast<std::size_t>(t)] < 0 || targets[static_cast<std::size_t>(t)] >= V)
            throw ContractError("cross_entropy: target index out of range");
    }
    if (unmasked == 0) throw ContractError("cross_entropy: every position is masked");

    Tensor out({1}, want_grad({&logits}, tape));
    const auto lv = logits.data();
    double loss = 0.0;
    for (int t = 0; t < T; ++t) {
        if (!mask[static_cast<std::size_t>(t)]) continue;
        const double* row = &lv[static_cast<std::size_t>(t) * V];
        double mx = row[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (int j = 0; j < V; ++j) denom += std::exp(row[j] - mx);
        loss += std::log(denom) + mx - row[targets[static_cast<std::size_t>(t)]];
    }
    out.at(0) = loss / unmasked;
    if (out.requires_grad()) {
        std::vector<int> tgt(targets.begin(), targets.end());
        tape->record({logits}, out,
                     [li = logits.impl_ptr(), oi = out.impl_ptr(), tgt = std::move(tgt), mask, T, V,
                      unmasked] {
            li->ensure_grad();
            const double g = oi->grad[0] / unmasked;
            for (int t = 0; t < T; ++t) {
                if (!mask[static_cast<std::size_t>(t)]) continue;
                const double* row = &li->data[static_cast<std::size_t>(t) * V];
                double* grow = &li->grad[static_cast<std::size_t>(t) * V];
                double mx = row[0];
                for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
                double denom = 0.0;
                for (int j = 0; j < V; ++j) denom += std::exp(row[j] - mx);
                for (int j = 0; j < V; ++j) {
                    const double p = std::exp(row[j] - mx) / denom;
                    grow[j] += g * (p - (j == tgt[static_cast<std::size_t>(t)] ? 1.0 : 0.0));
                }
            }
        });
    }
    return out;
}

void zero_grads(std::span<Parameter> params) {
    for (Parameter& p : params) p.value.zero_grad();
}

// ---- Adam ----

Adam::Moments& Adam::moments_for(const Tensor& t) {
    for (auto& [key, m] : state_)
        if (key == t.id()) return m;
    state_.emplace_back(t.id(), Moments{std::vector<double>(t.size(), 0.0),
                                        std::vector<double>(t.size(), 0.0)});
    return state_.back().second;
}

void Adam::step(std::span<Parameter> params, double lr_scale) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Parameter& p : params) {
        if (!p.value.has_grad()) continue;
        Moments& mom = moments_for(p.value);
        auto w = p.value.data();
        const auto g = p.value.grad();
        for (std::size_t i = 0; i < w.size(); ++i) {
            mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * g[i];
            mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = mom.m[i] / bc1;
            const double vhat = mom.v[i] / bc2;
            double step = lr_scale * cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            if (cfg_.max_step >= 0.0) step = std::clamp(step, -cfg_.max_step, cfg_.max_step);
            w[i] -= step;
        }
    }
}

}  // namespace editlab
