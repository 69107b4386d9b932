#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gesturegen {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

class GradientTape;

// Dense row-major tensor of 64-bit floats with a shared-handle semantic:
// copying a Tensor aliases its storage. Gradients are accumulated into the
// same node by GradientTape::backward.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = std::move(shape);
        t.n_->value.assign(shape_numel(t.n_->shape), 0.0);
        if (requires_grad) t.set_requires_grad(true);
        return t;
    }

    static Tensor full(Shape shape, double v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.n_->value.begin(), t.n_->value.end(), v);
        return t;
    }

    static Tensor scalar(double v) { return full({1}, v); }

    static Tensor from_data(Shape shape, std::vector<double> data) {
        if (shape_numel(shape) != data.size()) {
            throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = std::move(shape);
        t.n_->value = std::move(data);
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    std::size_t size() const { return n_->value.size(); }
    std::size_t ndim() const { return n_->shape.size(); }
    std::size_t rows() const { return n_->shape.at(0); }
    std::size_t cols() const { return n_->shape.at(1); }

    std::vector<double>& values() { return n_->value; }
    const std::vector<double>& values() const { return n_->value; }
    double* data() { return n_->value.data(); }
    const double* data() const { return n_->value.data(); }

    double item() const {
        if (size() != 1) throw std::logic_error("item() on tensor of shape " + shape_str(shape()));
        return n_->value[0];
    }

    double at(std::size_t i) const { return n_->value[i]; }
    double& at(std::size_t i) { return n_->value[i]; }
    double at(std::size_t r, std::size_t c) const { return n_->value[r * cols() + c]; }
    double& at(std::size_t r, std::size_t c) { return n_->value[r * cols() + c]; }

    bool requires_grad() const { return n_ && n_->requires_grad; }

    Tensor& set_requires_grad(bool rg) {
        n_->requires_grad = rg;
        if (rg && n_->grad.size() != n_->value.size()) n_->grad.assign(n_->value.size(), 0.0);
        return *this;
    }

    std::vector<double>& grad() { return n_->grad; }
    const std::vector<double>& grad() const { return n_->grad; }

    void zero_grad() {
        if (n_ && n_->requires_grad) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
    }

    bool all_finite() const {
        for (double v : n_->value)
            if (!std::isfinite(v)) return false;
        return true;
    }

    // Deep copy with no gradient tracking.
    Tensor detached_copy() const {
        return from_data(n_->shape, n_->value);
    }

private:
    struct Node {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Node> n_;

    friend class GradientTape;
};

// Reverse-mode tape. Constructing one makes it the active tape for the
// current thread; primitive ops record a backward closure while one is
// active and any input requires a gradient. backward() replays the closures
// in reverse creation order, which is a reverse topological order because
// forward evaluation is eager.
class GradientTape {
public:
    GradientTape() { stack().push_back(this); }
    ~GradientTape() { stack().pop_back(); }
    GradientTape(const GradientTape&) = delete;
    GradientTape& operator=(const GradientTape&) = delete;

    static GradientTape* current() {
        return stack().empty() ? nullptr : stack().back();
    }

    void record(std::function<void()> backward_fn) {
        ops_.push_back(std::move(backward_fn));
    }

    std::size_t num_ops() const { return ops_.size(); }

    // Seeds d(loss)/d(loss) = 1 and propagates to every recorded input.
    void backward(Tensor& loss) {
        if (loss.size() != 1) {
            throw std::logic_error("backward() needs a scalar loss, got " + shape_str(loss.shape()));
        }
        if (used_) throw std::logic_error("backward() called twice on one tape");
        used_ = true;
        if (loss.requires_grad()) loss.grad()[0] += 1.0;
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

private:
    static std::vector<GradientTape*>& stack() {
        static thread_local std::vector<GradientTape*> s;
        return s;
    }
    std::vector<std::function<void()>> ops_;
    bool used_ = false;
};

namespace detail {

inline bool recording(std::initializer_list<const Tensor*> inputs) {
    if (GradientTape::current() == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

inline Tensor make_output(Shape shape, bool rec) {
    Tensor out = Tensor::zeros(std::move(shape));
    if (rec) out.set_requires_grad(true);
    return out;
}

[[noreturn]] inline void dim_error(const std::string& op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra primitives
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) detail::dim_error("add", a.shape(), b.shape());
    bool rec = detail::recording({&a, &b});
    Tensor out = detail::make_output(a.shape(), rec);
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (rec) {
        Tensor ca = a, cb = b, co = out;
        GradientTape::current()->record([ca, cb, co]() mutable {
            const std::size_t m = co.size();
            if (ca.requires_grad())
                for (std::size_t i = 0; i < m; ++i) ca.grad()[i] += co.grad()[i];
            if (cb.requires_grad())
                for (std::size_t i = 0; i < m; ++i) cb.grad()[i] += co.grad()[i];
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) detail::dim_error("sub", a.shape(), b.shape());
    bool rec = detail::recording({&a, &b});
    Tensor out = detail::make_output(a.shape(), rec);
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (rec) {
        Tensor ca = a, cb = b, co = out;
        GradientTape::current()->record([ca, cb, co]() mutable {
            const std::size_t m = co.size();
            if (ca.requires_grad())
                for (std::size_t i = 0; i < m; ++i) ca.grad()[i] += co.grad()[i];
            if (cb.requires_grad())
                for (std::size_t i = 0; i < m; ++i) cb.grad()[i] -= co.grad()[i];
        });
    }
    return out;
}

// Hadamard product
inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) detail::dim_error("mul", a.shape(), b.shape());
    bool rec = detail::recording({&a, &b});
    Tensor out = detail::make_output(a.shape(), rec);
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (rec) {
        Tensor ca = a, cb = b, co = out;
        GradientTape::current()->record([ca, cb, co]() mutable {
            const std::size_t m = co.size();
            if (ca.requires_grad())
                for (std::size_t i = 0; i < m; ++i) ca.grad()[i] += co.grad()[i] * cb.data()[i];
            if (cb.requires_grad())
                for (std::size_t i = 0; i < m; ++i) cb.grad()[i] += co.grad()[i] * ca.data()[i];
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    bool rec = detail::recording({&a});
    Tensor out = detail::make_output(a.shape(), rec);
    const std::size_t n = a.size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    if (rec) {
        Tensor ca = a, co = out;
        GradientTape::current()->record([ca, co, c]() mutable {
            for (std::size_t i = 0; i < co.size(); ++i) ca.grad()[i] += co.grad()[i] * c;
        });
    }
    return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
        detail::dim_error("matmul", a.shape(), b.shape());
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    bool rec = detail::recording({&a, &b});
    Tensor out = detail::make_output({m, n}, rec);
    {
        const double* A = a.data();
        const double* B = b.data();
        double* C = out.data();
        for (std::size_t i = 0; i < m; ++i) {
            double* Ci = C + i * n;
            for (std::size_t l = 0; l < k; ++l) {
                const double ail = A[i * k + l];
                const double* Bl = B + l * n;
                for (std::size_t j = 0; j < n; ++j) Ci[j] += ail * Bl[j];
            }
        }
    }
    if (rec) {
        Tensor ca = a, cb = b, co = out;
        GradientTape::current()->record([ca, cb, co, m, k, n]() mutable {
            const double* dC = co.grad().data();
            if (ca.requires_grad()) {
                // dA = dC * B^T
                double* dA = ca.grad().data();
                const double* B = cb.data();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t l = 0; l < k; ++l) {
                        const double* dCi = dC + i * n;
                        const double* Bl = B + l * n;
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += dCi[j] * Bl[j];
                        dA[i * k + l] += acc;
                    }
                }
            }
            if (cb.requires_grad()) {
                // dB = A^T * dC
                double* dB = cb.grad().data();
                const double* A = ca.data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* dCi = dC + i * n;
                    for (std::size_t l = 0; l < k; ++l) {
                        const double ail = A[i * k + l];
                        double* dBl = dB + l * n;
                        for (std::size_t j = 0; j < n; ++j) dBl[j] += ail * dCi[j];
                    }
                }
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw std::invalid_argument("transpose: need 2-D, got " + shape_str(a.shape()));
    const std::size_t r = a.rows(), c = a.cols();
    bool rec = detail::recording({&a});
    Tensor out = detail::make_output({c, r}, rec);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out.data()[j * r + i] = a.data()[i * c + j];
    if (rec) {
        Tensor ca = a, co = out;
        GradientTape::current()->record([ca, co, r, c]() mutable {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) ca.grad()[i * c + j] += co.grad()[j * r + i];
        });
    }
    return out;
}

// Adds a length-D bias vector to every row of an N x D matrix.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
    if (x.ndim() != 2 || b.size() != x.cols()) detail::dim_error("add_bias", x.shape(), b.shape());
    const std::size_t n = x.rows(), d = x.cols();
    bool rec = detail::recording({&x, &b});
    Tensor out = detail::make_output({n, d}, rec);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out.data()[i * d + j] = x.data()[i * d + j] + b.data()[j];
    if (rec) {
        Tensor cx = x, cb = b, co = out;
        GradientTape::current()->record([cx, cb, co, n, d]() mutable {
            if (cx.requires_grad())
                for (std::size_t i = 0; i < n * d; ++i) cx.grad()[i] += co.grad()[i];
            if (cb.requires_grad())
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) cb.grad()[j] += co.grad()[i * d + j];
        });
    }
    return out;
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.size()) {
        throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape) +
                                    " changes element count");
    }
    bool rec = detail::recording({&a});
    Tensor out = detail::make_output(std::move(shape), rec);
    std::copy(a.values().begin(), a.values().end(), out.values().begin());
    if (rec) {
        Tensor ca = a, co = out;
        GradientTape::current()->record([ca, co]() mutable {
            for (std::size_t i = 0; i < co.size(); ++i) ca.grad()[i] += co.grad()[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& a) {
    bool rec = detail::recording({&a});
    Tensor out = detail::make_output(a.shape(), rec);
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    if (rec) {
        Tensor ca = a, co = out;
        GradientTape::current()->record([ca, co]() mutable {
            for (std::size_t i = 0; i < co.size(); ++i)
                if (ca.data()[i] > 0.0) ca.grad()[i] += co.grad()[i];
        });
    }
    return out;
}

inline Tensor gelu(const Tensor& a) {
    bool rec = detail::recording({&a});
    Tensor out = detail::make_output(a.shape(), rec);
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a.data()[i];
        out.data()[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    if (rec) {
        Tensor ca = a, co = out;
        GradientTape::current()->record([ca, co]() mutable {
            constexpr double inv_sqrt_2pi = 0.39894228040143267794;
            for (std::size_t i = 0; i < co.size(); ++i) {
                const double x = ca.data()[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
                const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                ca.grad()[i] += co.grad()[i] * (cdf + x * pdf);
            }
        });
    }
    return out;
}

inline Tensor tanh_act(const Tensor& a) {
    bool rec = detail::recording({&a});
    Tensor out = detail::make_output(a.shape(), rec);
    for (std::size_t i = 0; i < a.size(); ++i) out.data()[i] = std::tanh(a.data()[i]);
    if (rec) {
        Tensor ca = a, co = out;
        GradientTape::current()->record([ca, co]() mutable {
            for (std::size_t i = 0; i < co.size(); ++i)
                ca.grad()[i] += co.grad()[i] * (1.0 - co.data()[i] * co.data()[i]);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax family. All variants subtract the max before exponentiating and
// never touch excluded entries, so masked positions cannot perturb valid
// outputs even in the last bit.
// ---------------------------------------------------------------------------

namespace detail {

// Softmax over `count` strided entries starting at base. Backward uses the
// standard y * (dy - <dy, y>) form.
inline void softmax_span(const double* in, double* out, std::size_t count, std::size_t stride) {
    double mx = in[0];
    for (std::size_t i = 1; i < count; ++i) mx = std::max(mx, in[i * stride]);
    double sum = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
        const double e = std::exp(in[i * stride] - mx);
        out[i * stride] = e;
        sum += e;
    }
    const double inv = 1.0 / sum;
    for (std::size_t i = 0; i < count; ++i) out[i * stride] *= inv;
}

inline void softmax_span_backward(const double* y, const double* dy, double* dx, std::size_t count,
                                  std::size_t stride) {
    double dot = 0.0;
    for (std::size_t i = 0; i < count; ++i) dot += dy[i * stride] * y[i * stride];
    for (std::size_t i = 0; i < count; ++i)
        dx[i * stride] += y[i * stride] * (dy[i * stride] - dot);
}

}  // namespace detail

// Softmax along `axis` of a 1-D or 2-D tensor.
inline Tensor softmax(const Tensor& a, int axis = -1) {
    if (a.ndim() == 1) {
        if (axis != 0 && axis != -1) throw std::invalid_argument("softmax: bad axis for 1-D input");
        bool rec = detail::recording({&a});
        Tensor out = detail::make_output(a.shape(), rec);
        detail::softmax_span(a.data(), out.data(), a.size(), 1);
        if (rec) {
            Tensor ca = a, co = out;
            GradientTape::current()->record([ca, co]() mutable {
                detail::softmax_span_backward(co.data(), co.grad().data(), ca.grad().data(), co.size(), 1);
            });
        }
        return out;
    }
    if (a.ndim() != 2) throw std::invalid_argument("softmax: need 1-D or 2-D, got " + shape_str(a.shape()));
    const std::size_t r = a.rows(), c = a.cols();
    const int ax = axis < 0 ? 1 : axis;
    if (ax != 0 && ax != 1) throw std::invalid_argument("softmax: bad axis");
    bool rec = detail::recording({&a});
    Tensor out = detail::make_output(a.shape(), rec);
    if (ax == 1) {
        for (std::size_t i = 0; i < r; ++i) detail::softmax_span(a.data() + i * c, out.data() + i * c, c, 1);
    } else {
        for (std::size_t j = 0; j < c; ++j) detail::softmax_span(a.data() + j, out.data() + j, r, c);
    }
    if (rec) {
        Tensor ca = a, co = out;
        GradientTape::current()->record([ca, co, r, c, ax]() mutable {
            if (ax == 1) {
                for (std::size_t i = 0; i < r; ++i)
                    detail::softmax_span_backward(co.data() + i * c, co.grad().data() + i * c,
                                                  ca.grad().data() + i * c, c, 1);
            } else {
                for (std::size_t j = 0; j < c; ++j)
                    detail::softmax_span_backward(co.data() + j, co.grad().data() + j,
                                                  ca.grad().data() + j, r, c);
            }
        });
    }
    return out;
}

// Row-wise softmax where row i only sees columns j <= i. Excluded outputs are 0.
inline Tensor softmax_causal_rows(const Tensor& a) {
    if (a.ndim() != 2) throw std::invalid_argument("softmax_causal_rows: need 2-D");
    const std::size_t r = a.rows(), c = a.cols();
    bool rec = detail::recording({&a});
    Tensor out = detail::make_output(a.shape(), rec);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t valid = std::min(i + 1, c);
        detail::softmax_span(a.data() + i * c, out.data() + i * c, valid, 1);
    }
    if (rec) {
        Tensor ca = a, co = out;
        GradientTape::current()->record([ca, co, r, c]() mutable {
            for (std::size_t i = 0; i < r; ++i) {
                const std::size_t valid = std::min(i + 1, c);
                detail::softmax_span_backward(co.data() + i * c, co.grad().data() + i * c,
                                              ca.grad().data() + i * c, valid, 1);
            }
        });
    }
    return out;
}

// Row-wise softmax over the columns flagged valid (shared by all rows).
// Excluded outputs are 0.
inline Tensor softmax_masked_rows(const Tensor& a, const std::vector<std::uint8_t>& col_valid) {
    if (a.ndim() != 2 || col_valid.size() != a.cols()) {
        throw std::invalid_argument("softmax_masked_rows: mask length must equal column count");
    }
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < col_valid.size(); ++j)
        if (col_valid[j]) idx.push_back(j);
    if (idx.empty()) throw std::invalid_argument("softmax_masked_rows: all columns masked");
    const std::size_t r = a.rows(), c = a.cols();
    bool rec = detail::recording({&a});
    Tensor out = detail::make_output(a.shape(), rec);
    for (std::size_t i = 0; i < r; ++i) {
        const double* in = a.data() + i * c;
        double* o = out.data() + i * c;
        double mx = in[idx[0]];
        for (std::size_t j : idx) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::size_t j : idx) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        for (std::size_t j : idx) o[j] /= sum;
    }
    if (rec) {
        Tensor ca = a, co = out;
        GradientTape::current()->record([ca, co, idx, r, c]() mutable {
            for (std::size_t i = 0; i < r; ++i) {
                const double* y = co.data() + i * c;
                const double* dy = co.grad().data() + i * c;
                double* dx = ca.grad().data() + i * c;
                double dot = 0.0;
                for (std::size_t j : idx) dot += dy[j] * y[j];
                for (std::size_t j : idx) dx[j] += y[j] * (dy[j] - dot);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis of a 2-D tensor
// ---------------------------------------------------------------------------

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    if (x.ndim() != 2 || gamma.size() != x.cols() || beta.size() != x.cols()) {
        detail::dim_error("layer_norm", x.shape(), gamma.shape());
    }
    const std::size_t n = x.rows(), d = x.cols();
    bool rec = detail::recording({&x, &gamma, &beta});
    Tensor out = detail::make_output({n, d}, rec);
    Tensor xhat = Tensor::zeros({n, d});
    std::vector<double> inv_sigma(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* xi = x.data() + i * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xi[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double xh = (xi[j] - mean) * is;
            xhat.data()[i * d + j] = xh;
            out.data()[i * d + j] = gamma.data()[j] * xh + beta.data()[j];
        }
    }
    if (rec) {
        Tensor cx = x, cg = gamma, cb = beta, co = out;
        GradientTape::current()->record([cx, cg, cb, co, xhat, inv_sigma, n, d]() mutable {
            for (std::size_t i = 0; i < n; ++i) {
                const double* dy = co.grad().data() + i * d;
                const double* xh = xhat.data() + i * d;
                if (cg.requires_grad())
                    for (std::size_t j = 0; j < d; ++j) cg.grad()[j] += dy[j] * xh[j];
                if (cb.requires_grad())
                    for (std::size_t j = 0; j < d; ++j) cb.grad()[j] += dy[j];
                if (cx.requires_grad()) {
                    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = dy[j] * cg.data()[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= static_cast<double>(d);
                    mean_dxhat_xhat /= static_cast<double>(d);
                    double* dx = cx.grad().data() + i * d;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = dy[j] * cg.data()[j];
                        dx[j] += inv_sigma[i] * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Temporal convolutions over [time x channels] matrices
// ---------------------------------------------------------------------------

// x: [N x Cin], w: [Cout x Cin x K], b: [Cout]. Zero padding `pad` on both ends.
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride = 1,
                     std::size_t pad = 0) {
    if (x.ndim() != 2 || w.ndim() != 3 || x.cols() != w.shape()[1]) {
        detail::dim_error("conv1d", x.shape(), w.shape());
    }
    const std::size_t n = x.rows(), cin = x.cols();
    const std::size_t cout = w.shape()[0], k = w.shape()[2];
    if (b.size() != cout) detail::dim_error("conv1d bias", b.shape(), w.shape());
    if (n + 2 * pad < k) throw std::invalid_argument("conv1d: input length " + std::to_string(n) +
                                                     " shorter than kernel " + std::to_string(k));
    const std::size_t n_out = (n + 2 * pad - k) / stride + 1;
    bool rec = detail::recording({&x, &w, &b});
    Tensor out = detail::make_output({n_out, cout}, rec);
    for (std::size_t t = 0; t < n_out; ++t) {
        double* orow = out.data() + t * cout;
        for (std::size_t co = 0; co < cout; ++co) orow[co] = b.data()[co];
        for (std::size_t kk = 0; kk < k; ++kk) {
            const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(t * stride + kk) - static_cast<std::ptrdiff_t>(pad);
            if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(n)) continue;
            const double* xrow = x.data() + static_cast<std::size_t>(ti) * cin;
            for (std::size_t co = 0; co < cout; ++co) {
                const double* wrow = w.data() + (co * cin + 0) * k + kk;
                double acc = 0.0;
                for (std::size_t ci = 0; ci < cin; ++ci) acc += xrow[ci] * wrow[ci * k];
                orow[co] += acc;
            }
        }
    }
    if (rec) {
        Tensor cx = x, cw = w, cb = b, co_t = out;
        GradientTape::current()->record([cx, cw, cb, co_t, n, cin, cout, k, stride, pad, n_out]() mutable {
            for (std::size_t t = 0; t < n_out; ++t) {
                const double* do_row = co_t.grad().data() + t * cout;
                if (cb.requires_grad())
                    for (std::size_t co = 0; co < cout; ++co) cb.grad()[co] += do_row[co];
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const std::ptrdiff_t ti =
                        static_cast<std::ptrdiff_t>(t * stride + kk) - static_cast<std::ptrdiff_t>(pad);
                    if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(n)) continue;
                    const std::size_t tu = static_cast<std::size_t>(ti);
                    for (std::size_t co = 0; co < cout; ++co) {
                        const double g = do_row[co];
                        if (g == 0.0) continue;
                        if (cx.requires_grad()) {
                            double* dxrow = cx.grad().data() + tu * cin;
                            const double* wrow = cw.data() + (co * cin + 0) * k + kk;
                            for (std::size_t ci = 0; ci < cin; ++ci) dxrow[ci] += g * wrow[ci * k];
                        }
                        if (cw.requires_grad()) {
                            const double* xrow = cx.data() + tu * cin;
                            double* dwrow = cw.grad().data() + (co * cin + 0) * k + kk;
                            for (std::size_t ci = 0; ci < cin; ++ci) dwrow[ci * k] += g * xrow[ci];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Transposed counterpart of conv1d. x: [N x Cin], w: [Cin x Cout x K].
// Output length (N-1)*stride - 2*pad + K + out_pad.
inline Tensor conv_transpose1d(const Tensor& x, const Tensor& w, const Tensor& b,
                               std::size_t stride = 1, std::size_t pad = 0, std::size_t out_pad = 0) {
    if (x.ndim() != 2 || w.ndim() != 3 || x.cols() != w.shape()[0]) {
        detail::dim_error("conv_transpose1d", x.shape(), w.shape());
    }
    const std::size_t n = x.rows(), cin = x.cols();
    const std::size_t cout = w.shape()[1], k = w.shape()[2];
    if (b.size() != cout) detail::dim_error("conv_transpose1d bias", b.shape(), w.shape());
    const std::ptrdiff_t len = static_cast<std::ptrdiff_t>((n - 1) * stride + k + out_pad) -
                               2 * static_cast<std::ptrdiff_t>(pad);
    if (len <= 0) throw std::invalid_argument("conv_transpose1d: non-positive output length");
    const std::size_t n_out = static_cast<std::size_t>(len);
    bool rec = detail::recording({&x, &w, &b});
    Tensor out = detail::make_output({n_out, cout}, rec);
    for (std::size_t t = 0; t < n_out; ++t)
        for (std::size_t co = 0; co < cout; ++co) out.data()[t * cout + co] = b.data()[co];
    for (std::size_t ti = 0; ti < n; ++ti) {
        const double* xrow = x.data() + ti * cin;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const std::ptrdiff_t to = static_cast<std::ptrdiff_t>(ti * stride + kk) - static_cast<std::ptrdiff_t>(pad);
            if (to < 0 || to >= static_cast<std::ptrdiff_t>(n_out)) continue;
            double* orow = out.data() + static_cast<std::size_t>(to) * cout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const double xv = xrow[ci];
                if (xv == 0.0) continue;
                const double* wrow = w.data() + (ci * cout + 0) * k + kk;
                for (std::size_t co = 0; co < cout; ++co) orow[co] += xv * wrow[co * k];
            }
        }
    }
    if (rec) {
        Tensor cx = x, cw = w, cb = b, co_t = out;
        GradientTape::current()->record([cx, cw, cb, co_t, n, cin, cout, k, stride, pad, n_out]() mutable {
            if (cb.requires_grad()) {
                for (std::size_t t = 0; t < n_out; ++t)
                    for (std::size_t co = 0; co < cout; ++co)
                        cb.grad()[co] += co_t.grad()[t * cout + co];
            }
            for (std::size_t ti = 0; ti < n; ++ti) {
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const std::ptrdiff_t to =
                        static_cast<std::ptrdiff_t>(ti * stride + kk) - static_cast<std::ptrdiff_t>(pad);
                    if (to < 0 || to >= static_cast<std::ptrdiff_t>(n_out)) continue;
                    const double* dorow = co_t.grad().data() + static_cast<std::size_t>(to) * cout;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const double* wrow = cw.data() + (ci * cout + 0) * k + kk;
                        if (cx.requires_grad()) {
                            double acc = 0.0;
                            for (std::size_t co = 0; co < cout; ++co) acc += dorow[co] * wrow[co * k];
                            cx.grad()[ti * cin + ci] += acc;
                        }
                        if (cw.requires_grad()) {
                            const double xv = cx.data()[ti * cin + ci];
                            double* dwrow = cw.grad().data() + (ci * cout + 0) * k + kk;
                            for (std::size_t co = 0; co < cout; ++co) dwrow[co * k] += dorow[co] * xv;
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Lookup / gather / slice
// ---------------------------------------------------------------------------

inline Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& indices) {
    if (table.ndim() != 2) throw std::invalid_argument("embedding_lookup: table must be 2-D");
    const std::size_t m = table.rows(), d = table.cols();
    for (std::size_t id : indices) {
        if (id >= m)
            throw std::out_of_range("embedding_lookup: index " + std::to_string(id) +
                                    " out of range for table with " + std::to_string(m) + " rows");
    }
    bool rec = detail::recording({&table});
    Tensor out = detail::make_output({indices.size(), d}, rec);
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::copy(table.data() + indices[i] * d, table.data() + (indices[i] + 1) * d, out.data() + i * d);
    if (rec) {
        Tensor ct = table, co = out;
        GradientTape::current()->record([ct, co, indices, d]() mutable {
            for (std::size_t i = 0; i < indices.size(); ++i)
                for (std::size_t j = 0; j < d; ++j)
                    ct.grad()[indices[i] * d + j] += co.grad()[i * d + j];
        });
    }
    return out;
}

inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
    return embedding_lookup(x, rows);
}

inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t width) {
    if (x.ndim() != 2 || c0 + width > x.cols()) {
        throw std::invalid_argument("slice_cols: [" + std::to_string(c0) + ", " +
                                    std::to_string(c0 + width) + ") out of range for " + shape_str(x.shape()));
    }
    const std::size_t n = x.rows(), d = x.cols();
    bool rec = detail::recording({&x});
    Tensor out = detail::make_output({n, width}, rec);
    for (std::size_t i = 0; i < n; ++i)
        std::copy(x.data() + i * d + c0, x.data() + i * d + c0 + width, out.data() + i * width);
    if (rec) {
        Tensor cx = x, co = out;
        GradientTape::current()->record([cx, co, n, d, c0, width]() mutable {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < width; ++j)
                    cx.grad()[i * d + c0 + j] += co.grad()[i * width + j];
        });
    }
    return out;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.rows() != b.rows()) {
        detail::dim_error("concat_cols", a.shape(), b.shape());
    }
    const std::size_t n = a.rows(), da = a.cols(), db = b.cols();
    bool rec = detail::recording({&a, &b});
    Tensor out = detail::make_output({n, da + db}, rec);
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(a.data() + i * da, a.data() + (i + 1) * da, out.data() + i * (da + db));
        std::copy(b.data() + i * db, b.data() + (i + 1) * db, out.data() + i * (da + db) + da);
    }
    if (rec) {
        Tensor ca = a, cb = b, co = out;
        GradientTape::current()->record([ca, cb, co, n, da, db]() mutable {
            for (std::size_t i = 0; i < n; ++i) {
                if (ca.requires_grad())
                    for (std::size_t j = 0; j < da; ++j)
                        ca.grad()[i * da + j] += co.grad()[i * (da + db) + j];
                if (cb.requires_grad())
                    for (std::size_t j = 0; j < db; ++j)
                        cb.grad()[i * db + j] += co.grad()[i * (da + db) + da + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    bool rec = detail::recording({&a});
    Tensor out = detail::make_output({1}, rec);
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a.data()[i];
    out.data()[0] = acc;
    if (rec) {
        Tensor ca = a, co = out;
        GradientTape::current()->record([ca, co]() mutable {
            const double g = co.grad()[0];
            for (std::size_t i = 0; i < ca.size(); ++i) ca.grad()[i] += g;
        });
    }
    return out;
}

inline Tensor mean(const Tensor& a) {
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// Mean over all elements of (a - b)^2.
inline Tensor mse_loss(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) detail::dim_error("mse_loss", a.shape(), b.shape());
    bool rec = detail::recording({&a, &b});
    Tensor out = detail::make_output({1}, rec);
    const std::size_t n = a.size();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a.data()[i] - b.data()[i];
        acc += d * d;
    }
    out.data()[0] = acc / static_cast<double>(n);
    if (rec) {
        Tensor ca = a, cb = b, co = out;
        GradientTape::current()->record([ca, cb, co, n]() mutable {
            const double g = co.grad()[0] * 2.0 / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double d = ca.data()[i] - cb.data()[i];
                if (ca.requires_grad()) ca.grad()[i] += g * d;
                if (cb.requires_grad()) cb.grad()[i] -= g * d;
            }
        });
    }
    return out;
}

// Mean over rows of ||a_i - b_i||_p: p = 2 gives mean squared row distance,
// p = 1 gives mean Euclidean row distance.
inline Tensor row_distance_mean(const Tensor& a, const Tensor& b, int p = 2) {
    if (a.shape() != b.shape() || a.ndim() != 2) detail::dim_error("row_distance_mean", a.shape(), b.shape());
    if (p != 1 && p != 2) throw std::invalid_argument("row_distance_mean: exponent must be 1 or 2");
    const std::size_t n = a.rows(), d = a.cols();
    bool rec = detail::recording({&a, &b});
    Tensor out = detail::make_output({1}, rec);
    std::vector<double> row_norm(n, 0.0);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double diff = a.data()[i * d + j] - b.data()[i * d + j];
            s += diff * diff;
        }
        row_norm[i] = std::sqrt(s);
        acc += (p == 2) ? s : row_norm[i];
    }
    out.data()[0] = acc / static_cast<double>(n);
    if (rec) {
        Tensor ca = a, cb = b, co = out;
        GradientTape::current()->record([ca, cb, co, row_norm, n, d, p]() mutable {
            const double g = co.grad()[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < d; ++j) {
                    const double diff = ca.data()[i * d + j] - cb.data()[i * d + j];
                    double gd;
                    if (p == 2) {
                        gd = g * 2.0 * diff;
                    } else {
                        gd = row_norm[i] > 1e-12 ? g * diff / row_norm[i] : 0.0;
                    }
                    if (ca.requires_grad()) ca.grad()[i * d + j] += gd;
                    if (cb.requires_grad()) cb.grad()[i * d + j] -= gd;
                }
            }
        });
    }
    return out;
}

// Mean over rows of -log softmax(logits_i)[target_i].
inline Tensor cross_entropy_mean(const Tensor& logits, const std::vector<std::size_t>& targets) {
    if (logits.ndim() != 2 || targets.size() != logits.rows()) {
        throw std::invalid_argument("cross_entropy_mean: need one target per logits row");
    }
    const std::size_t n = logits.rows(), k = logits.cols();
    for (std::size_t t : targets)
        if (t >= k) throw std::out_of_range("cross_entropy_mean: target class out of range");
    bool rec = detail::recording({&logits});
    Tensor out = detail::make_output({1}, rec);
    Tensor probs = Tensor::zeros({n, k});
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        detail::softmax_span(logits.data() + i * k, probs.data() + i * k, k, 1);
        acc -= std::log(std::max(probs.data()[i * k + targets[i]], 1e-300));
    }
    out.data()[0] = acc / static_cast<double>(n);
    if (rec) {
        Tensor cl = logits, co = out;
        GradientTape::current()->record([cl, co, probs, targets, n, k]() mutable {
            const double g = co.grad()[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < k; ++j) {
                    const double onehot = (j == targets[i]) ? 1.0 : 0.0;
                    cl.grad()[i * k + j] += g * (probs.data()[i * k + j] - onehot);
                }
            }
        });
    }
    return out;
}

// Forward identity that contributes nothing to any gradient.
inline Tensor stop_gradient(const Tensor& a) {
    return a.detached_copy();
}

}  // namespace gesturegen
