#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "simmc/errors.hpp"
#include "simmc/rng.hpp"

namespace simmc {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Dense 64-bit tensor with an attached gradient buffer. Rank 1 and 2 cover
// everything the encoders need; scalars are shape {1}.
struct Tensor {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;

    Tensor() = default;
    Tensor(Shape s, double fill) : shape(std::move(s)) {
        values.assign(static_cast<size_t>(count(shape)), fill);
        grad.assign(values.size(), 0.0);
    }
    Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
        if (static_cast<int64_t>(values.size()) != count(shape))
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        grad.assign(values.size(), 0.0);
    }

    static int64_t count(const Shape& s) {
        int64_t n = 1;
        for (int d : s) {
            if (d <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(values.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int rows() const { return rank() == 2 ? shape[0] : 1; }
    int cols() const { return rank() == 2 ? shape[1] : shape[0]; }

    double item() const {
        if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape));
        return values[0];
    }

    double& at(int i, int j) { return values[static_cast<size_t>(i) * shape[1] + j]; }
    double at(int i, int j) const { return values[static_cast<size_t>(i) * shape[1] + j]; }

    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

    bool all_finite() const {
        for (double v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline TensorPtr tensor(Shape s, double fill = 0.0) {
    return std::make_shared<Tensor>(std::move(s), fill);
}
inline TensorPtr tensor(Shape s, std::vector<double> v) {
    return std::make_shared<Tensor>(std::move(s), std::move(v));
}
inline TensorPtr scalar(double v) { return tensor({1}, std::vector<double>{v}); }

inline TensorPtr randn(Shape s, Rng& rng, double stddev = 0.02, bool requires_grad = true) {
    auto t = tensor(std::move(s));
    for (double& v : t->values) v = rng.normal(0.0, stddev);
    t->requires_grad = requires_grad;
    return t;
}

// ---------------------------------------------------------------------------
// Recorded compute graph. Ops append nodes in execution order, which makes
// the node list a topological order by construction. Each node carries a
// forward closure (used once at record time and again by replay()) and a
// backward closure that accumulates into the input grads.
// ---------------------------------------------------------------------------
class Tape {
   public:
    struct Node {
        const char* op;
        std::vector<TensorPtr> inputs;
        TensorPtr output;
        std::function<void()> backward;
        std::function<void()> forward;
    };

    void record(Node n) { nodes_.push_back(std::move(n)); }
    const std::vector<Node>& nodes() const { return nodes_; }
    void clear() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }

   private:
    std::vector<Node> nodes_;
};

// Accumulates d(root)/d(leaf) into every requires-grad leaf reachable from
// the recorded nodes. The root must be scalar.
inline void backward(Tape& tape, const TensorPtr& root) {
    if (root->numel() != 1)
        throw ContractError("backward root must be scalar, got " + shape_str(root->shape));
    root->grad[0] += 1.0;
    const auto& nodes = tape.nodes();
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
        if (it->output->requires_grad) it->backward();
    }
}

// Re-runs every recorded forward in order. With unchanged inputs this
// reproduces the recorded outputs bit for bit.
inline void replay(Tape& tape) {
    for (const auto& n : tape.nodes()) n.forward();
}

// ---------------------------------------------------------------------------
// Raw accumulate kernels. C must be pre-initialized; all three add into it.
// ---------------------------------------------------------------------------
inline void gemm_nn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[m x k] += A[m x n] * B[k x n]^T
inline void gemm_nt_acc(const double* a, const double* b, double* c, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * n;
        double* ci = c + static_cast<size_t>(i) * k;
        for (int j = 0; j < k; ++j) {
            const double* bj = b + static_cast<size_t>(j) * n;
            double acc = 0.0;
            for (int p = 0; p < n; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// C[k x n] += A[m x k]^T * B[m x n]
inline void gemm_tn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        const double* bi = b + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

namespace detail {

inline bool track(Tape* tape, std::initializer_list<TensorPtr> inputs) {
    if (!tape) return false;
    for (const auto& t : inputs)
        if (t->requires_grad) return true;
    return false;
}

inline void record(Tape* tape, const char* op, std::vector<TensorPtr> inputs, TensorPtr out,
                   std::function<void()> bwd, std::function<void()> fwd) {
    out->requires_grad = true;
    tape->record({op, std::move(inputs), std::move(out), std::move(bwd), std::move(fwd)});
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops. Every op computes eagerly and, when a tape is active and some input
// requires grad, records a node. tape == nullptr means pure inference.
// ---------------------------------------------------------------------------

// (m x k)*(k x n) -> (m x n), or (k)*(k x n) -> (n) for a row vector lhs.
inline TensorPtr matmul(const TensorPtr& a, const TensorPtr& b, Tape* tape = nullptr) {
    if (b->rank() != 2)
        throw ShapeError("matmul rhs must be rank 2, got " + shape_str(b->shape));
    const bool vec_lhs = a->rank() == 1;
    const int m = vec_lhs ? 1 : a->shape[0];
    const int k = vec_lhs ? a->shape[0] : a->shape[1];
    const int n = b->shape[1];
    if (k != b->shape[0])
        throw ShapeError("matmul shape mismatch: " + shape_str(a->shape) + " * " +
                         shape_str(b->shape));
    auto out = tensor(vec_lhs ? Shape{n} : Shape{m, n});
    auto fwd = [a, b, out, m, k, n] {
        std::fill(out->values.begin(), out->values.end(), 0.0);
        gemm_nn_acc(a->values.data(), b->values.data(), out->values.data(), m, k, n);
    };
    fwd();
    if (detail::track(tape, {a, b})) {
        auto bwd = [a, b, out, m, k, n] {
            if (a->requires_grad)
                gemm_nt_acc(out->grad.data(), b->values.data(), a->grad.data(), m, n, k);
            if (b->requires_grad)
                gemm_tn_acc(a->values.data(), out->grad.data(), b->grad.data(), m, k, n);
        };
        detail::record(tape, "matmul", {a, b}, out, bwd, fwd);
    }
    return out;
}

inline TensorPtr add(const TensorPtr& a, const TensorPtr& b, Tape* tape = nullptr) {
    if (a->shape != b->shape)
        throw ShapeError("add shape mismatch: " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
    auto out = tensor(a->shape);
    auto fwd = [a, b, out] {
        for (size_t i = 0; i < out->values.size(); ++i)
            out->values[i] = a->values[i] + b->values[i];
    };
    fwd();
    if (detail::track(tape, {a, b})) {
        auto bwd = [a, b, out] {
            if (a->requires_grad)
                for (size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
            if (b->requires_grad)
                for (size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += out->grad[i];
        };
        detail::record(tape, "add", {a, b}, out, bwd, fwd);
    }
    return out;
}

// Adds a length-n vector to every row of an (m x n) matrix.
inline TensorPtr add_row(const TensorPtr& mat, const TensorPtr& row, Tape* tape = nullptr) {
    if (mat->rank() != 2 || row->rank() != 1 || mat->shape[1] != row->shape[0])
        throw ShapeError("add_row shape mismatch: " + shape_str(mat->shape) + " vs " +
                         shape_str(row->shape));
    const int m = mat->shape[0], n = mat->shape[1];
    auto out = tensor(mat->shape);
    auto fwd = [mat, row, out, m, n] {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                out->values[static_cast<size_t>(i) * n + j] =
                    mat->values[static_cast<size_t>(i) * n + j] + row->values[j];
    };
    fwd();
    if (detail::track(tape, {mat, row})) {
        auto bwd = [mat, row, out, m, n] {
            if (mat->requires_grad)
                for (size_t i = 0; i < out->grad.size(); ++i) mat->grad[i] += out->grad[i];
            if (row->requires_grad)
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        row->grad[j] += out->grad[static_cast<size_t>(i) * n + j];
        };
        detail::record(tape, "add_row", {mat, row}, out, bwd, fwd);
    }
    return out;
}

inline TensorPtr mul(const TensorPtr& a, const TensorPtr& b, Tape* tape = nullptr) {
    if (a->shape != b->shape)
        throw ShapeError("mul shape mismatch: " + shape_str(a->shape) + " vs " +
                         shape_str(b->shape));
    auto out = tensor(a->shape);
    auto fwd = [a, b, out] {
        for (size_t i = 0; i < out->values.size(); ++i)
            out->values[i] = a->values[i] * b->values[i];
    };
    fwd();
    if (detail::track(tape, {a, b})) {
        auto bwd = [a, b, out] {
            if (a->requires_grad)
                for (size_t i = 0; i < out->grad.size(); ++i)
                    a->grad[i] += out->grad[i] * b->values[i];
            if (b->requires_grad)
                for (size_t i = 0; i < out->grad.size(); ++i)
                    b->grad[i] += out->grad[i] * a->values[i];
        };
        detail::record(tape, "mul", {a, b}, out, bwd, fwd);
    }
    return out;
}

inline TensorPtr scale(const TensorPtr& a, double c, Tape* tape = nullptr) {
    auto out = tensor(a->shape);
    auto fwd = [a, out, c] {
        for (size_t i = 0; i < out->values.size(); ++i) out->values[i] = a->values[i] * c;
    };
    fwd();
    if (detail::track(tape, {a})) {
        auto bwd = [a, out, c] {
            for (size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i] * c;
        };
        detail::record(tape, "scale", {a}, out, bwd, fwd);
    }
    return out;
}

inline TensorPtr sum(const TensorPtr& a, Tape* tape = nullptr) {
    auto out = tensor({1});
    auto fwd = [a, out] {
        out->values[0] = std::accumulate(a->values.begin(), a->values.end(), 0.0);
    };
    fwd();
    if (detail::track(tape, {a})) {
        auto bwd = [a, out] {
            for (size_t i = 0; i < a->grad.size(); ++i) a->grad[i] += out->grad[0];
        };
        detail::record(tape, "sum", {a}, out, bwd, fwd);
    }
    return out;
}

// Row i of an (m x n) matrix as a length-n vector.
inline TensorPtr row(const TensorPtr& mat, int i, Tape* tape = nullptr) {
    if (mat->rank() != 2 || i < 0 || i >= mat->shape[0])
        throw ShapeError("row " + std::to_string(i) + " out of range for " +
                         shape_str(mat->shape));
    const int n = mat->shape[1];
    auto out = tensor({n});
    auto fwd = [mat, out, i, n] {
        std::copy_n(mat->values.begin() + static_cast<size_t>(i) * n, n, out->values.begin());
    };
    fwd();
    if (detail::track(tape, {mat})) {
        auto bwd = [mat, out, i, n] {
            for (int j = 0; j < n; ++j) mat->grad[static_cast<size_t>(i) * n + j] += out->grad[j];
        };
        detail::record(tape, "row", {mat}, out, bwd, fwd);
    }
    return out;
}

// Column block [c0, c1) of an (m x n) matrix.
inline TensorPtr col_slice(const TensorPtr& mat, int c0, int c1, Tape* tape = nullptr) {
    if (mat->rank() != 2 || c0 < 0 || c1 > mat->shape[1] || c0 >= c1)
        throw ShapeError("col_slice [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") out of range for " + shape_str(mat->shape));
    const int m = mat->shape[0], n = mat->shape[1], w = c1 - c0;
    auto out = tensor({m, w});
    auto fwd = [mat, out, m, n, w, c0] {
        for (int i = 0; i < m; ++i)
            std::copy_n(mat->values.begin() + static_cast<size_t>(i) * n + c0, w,
                        out->values.begin() + static_cast<size_t>(i) * w);
    };
    fwd();
    if (detail::track(tape, {mat})) {
        auto bwd = [mat, out, m, n, w, c0] {
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < w; ++j)
                    mat->grad[static_cast<size_t>(i) * n + c0 + j] +=
                        out->grad[static_cast<size_t>(i) * w + j];
        };
        detail::record(tape, "col_slice", {mat}, out, bwd, fwd);
    }
    return out;
}

inline TensorPtr col_concat(const std::vector<TensorPtr>& parts, Tape* tape = nullptr) {
    if (parts.empty()) throw ShapeError("col_concat of zero parts");
    const int m = parts[0]->shape[0];
    int n = 0;
    for (const auto& p : parts) {
        if (p->rank() != 2 || p->shape[0] != m)
            throw ShapeError("col_concat row mismatch at part " + shape_str(p->shape));
        n += p->shape[1];
    }
    auto out = tensor({m, n});
    auto fwd = [parts, out, m, n] {
        int off = 0;
        for (const auto& p : parts) {
            const int w = p->shape[1];
            for (int i = 0; i < m; ++i)
                std::copy_n(p->values.begin() + static_cast<size_t>(i) * w, w,
                            out->values.begin() + static_cast<size_t>(i) * n + off);
            off += w;
        }
    };
    fwd();
    bool any = false;
    for (const auto& p : parts) any = any || p->requires_grad;
    if (tape && any) {
        auto bwd = [parts, out, m, n] {
            int off = 0;
            for (const auto& p : parts) {
                const int w = p->shape[1];
                if (p->requires_grad)
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                            p->grad[static_cast<size_t>(i) * w + j] +=
                                out->grad[static_cast<size_t>(i) * n + off + j];
                off += w;
            }
        };
        detail::record(tape, "col_concat", parts, out, bwd, fwd);
    }
    return out;
}

// Stacks rank-1 (treated as one row) and rank-2 parts vertically.
inline TensorPtr concat_rows(const std::vector<TensorPtr>& parts, Tape* tape = nullptr) {
    if (parts.empty()) throw ShapeError("concat_rows of zero parts");
    const int n = parts[0]->cols();
    int m = 0;
    for (const auto& p : parts) {
        if (p->cols() != n)
            throw ShapeError("concat_rows column mismatch at part " + shape_str(p->shape));
        m += p->rows();
    }
    auto out = tensor({m, n});
    auto fwd = [parts, out, n] {
        size_t off = 0;
        for (const auto& p : parts) {
            std::copy(p->values.begin(), p->values.end(), out->values.begin() + off);
            off += p->values.size();
        }
    };
    fwd();
    bool any = false;
    for (const auto& p : parts) any = any || p->requires_grad;
    if (tape && any) {
        auto bwd = [parts, out] {
            size_t off = 0;
            for (const auto& p : parts) {
                if (p->requires_grad)
                    for (size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += out->grad[off + i];
                off += p->values.size();
            }
        };
        detail::record(tape, "concat_rows", parts, out, bwd, fwd);
    }
    return out;
}

inline TensorPtr vec_concat(const std::vector<TensorPtr>& parts, Tape* tape = nullptr) {
    if (parts.empty()) throw ShapeError("vec_concat of zero parts");
    int n = 0;
    for (const auto& p : parts) {
        if (p->rank() != 1) throw ShapeError("vec_concat needs rank-1 parts");
        n += p->shape[0];
    }
    auto out = tensor({n});
    auto fwd = [parts, out] {
        size_t off = 0;
        for (const auto& p : parts) {
            std::copy(p->values.begin(), p->values.end(), out->values.begin() + off);
            off += p->values.size();
        }
    };
    fwd();
    bool any = false;
    for (const auto& p : parts) any = any || p->requires_grad;
    if (tape && any) {
        auto bwd = [parts, out] {
            size_t off = 0;
            for (const auto& p : parts) {
                if (p->requires_grad)
                    for (size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += out->grad[off + i];
                off += p->values.size();
            }
        };
        detail::record(tape, "vec_concat", parts, out, bwd, fwd);
    }
    return out;
}

inline TensorPtr transpose(const TensorPtr& mat, Tape* tape = nullptr) {
    if (mat->rank() != 2) throw ShapeError("transpose needs rank 2, got " + shape_str(mat->shape));
    const int m = mat->shape[0], n = mat->shape[1];
    auto out = tensor({n, m});
    auto fwd = [mat, out, m, n] {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                out->values[static_cast<size_t>(j) * m + i] =
                    mat->values[static_cast<size_t>(i) * n + j];
    };
    fwd();
    if (detail::track(tape, {mat})) {
        auto bwd = [mat, out, m, n] {
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    mat->grad[static_cast<size_t>(i) * n + j] +=
                        out->grad[static_cast<size_t>(j) * m + i];
        };
        detail::record(tape, "transpose", {mat}, out, bwd, fwd);
    }
    return out;
}

inline TensorPtr gelu(const TensorPtr& a, Tape* tape = nullptr) {
    auto out = tensor(a->shape);
    auto fwd = [a, out] {
        for (size_t i = 0; i < out->values.size(); ++i) {
            double x = a->values[i];
            out->values[i] = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
        }
    };
    fwd();
    if (detail::track(tape, {a})) {
        auto bwd = [a, out] {
            for (size_t i = 0; i < out->grad.size(); ++i) {
                double x = a->values[i];
                double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
                double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
                a->grad[i] += out->grad[i] * (cdf + x * pdf);
            }
        };
        detail::record(tape, "gelu", {a}, out, bwd, fwd);
    }
    return out;
}

inline double sigmoid_stable(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

inline TensorPtr sigmoid(const TensorPtr& a, Tape* tape = nullptr) {
    auto out = tensor(a->shape);
    auto fwd = [a, out] {
        for (size_t i = 0; i < out->values.size(); ++i)
            out->values[i] = sigmoid_stable(a->values[i]);
    };
    fwd();
    if (detail::track(tape, {a})) {
        auto bwd = [a, out] {
            for (size_t i = 0; i < out->grad.size(); ++i) {
                double s = out->values[i];
                a->grad[i] += out->grad[i] * s * (1.0 - s);
            }
        };
        detail::record(tape, "sigmoid", {a}, out, bwd, fwd);
    }
    return out;
}

// Max-subtracted softmax along the given axis (rank 1 or 2).
inline TensorPtr softmax(const TensorPtr& a, int axis, Tape* tape = nullptr) {
    if (axis < 0) axis += a->rank();
    if (axis < 0 || axis >= a->rank())
        throw ShapeError("softmax axis " + std::to_string(axis) + " invalid for " +
                         shape_str(a->shape));
    // View the tensor as [outer, K, inner] with K along the softmax axis.
    int outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= a->shape[d];
    for (int d = axis + 1; d < a->rank(); ++d) inner *= a->shape[d];
    const int k = a->shape[axis];
    auto out = tensor(a->shape);
    auto fwd = [a, out, outer, inner, k] {
        for (int o = 0; o < outer; ++o)
            for (int in = 0; in < inner; ++in) {
                const size_t base = static_cast<size_t>(o) * k * inner + in;
                double mx = a->values[base];
                for (int j = 1; j < k; ++j)
                    mx = std::max(mx, a->values[base + static_cast<size_t>(j) * inner]);
                double z = 0.0;
                for (int j = 0; j < k; ++j) {
                    double e = std::exp(a->values[base + static_cast<size_t>(j) * inner] - mx);
                    out->values[base + static_cast<size_t>(j) * inner] = e;
                    z += e;
                }
                for (int j = 0; j < k; ++j)
                    out->values[base + static_cast<size_t>(j) * inner] /= z;
            }
    };
    fwd();
    if (detail::track(tape, {a})) {
        auto bwd = [a, out, outer, inner, k] {
            for (int o = 0; o < outer; ++o)
                for (int in = 0; in < inner; ++in) {
                    const size_t base = static_cast<size_t>(o) * k * inner + in;
                    double dot = 0.0;
                    for (int j = 0; j < k; ++j) {
                        size_t idx = base + static_cast<size_t>(j) * inner;
                        dot += out->grad[idx] * out->values[idx];
                    }
                    for (int j = 0; j < k; ++j) {
                        size_t idx = base + static_cast<size_t>(j) * inner;
                        a->grad[idx] += out->values[idx] * (out->grad[idx] - dot);
                    }
                }
        };
        detail::record(tape, "softmax", {a}, out, bwd, fwd);
    }
    return out;
}

// Per-row layer normalization with learned gain and bias.
inline TensorPtr layer_norm(const TensorPtr& mat, const TensorPtr& gain, const TensorPtr& bias,
                            Tape* tape = nullptr, double eps = 1e-5) {
    if (mat->rank() != 2 || gain->rank() != 1 || bias->rank() != 1 ||
        gain->shape[0] != mat->shape[1] || bias->shape[0] != mat->shape[1])
        throw ShapeError("layer_norm shape mismatch: " + shape_str(mat->shape));
    const int m = mat->shape[0], n = mat->shape[1];
    auto out = tensor(mat->shape);
    auto fwd = [mat, gain, bias, out, m, n, eps] {
        for (int i = 0; i < m; ++i) {
            const double* x = mat->values.data() + static_cast<size_t>(i) * n;
            double* y = out->values.data() + static_cast<size_t>(i) * n;
            double mean = 0.0;
            for (int j = 0; j < n; ++j) mean += x[j];
            mean /= n;
            double var = 0.0;
            for (int j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
            var /= n;
            double inv = 1.0 / std::sqrt(var + eps);
            for (int j = 0; j < n; ++j)
                y[j] = (x[j] - mean) * inv * gain->values[j] + bias->values[j];
        }
    };
    fwd();
    if (detail::track(tape, {mat, gain, bias})) {
        auto bwd = [mat, gain, bias, out, m, n, eps] {
            for (int i = 0; i < m; ++i) {
                const double* x = mat->values.data() + static_cast<size_t>(i) * n;
                const double* dy = out->grad.data() + static_cast<size_t>(i) * n;
                double mean = 0.0;
                for (int j = 0; j < n; ++j) mean += x[j];
                mean /= n;
                double var = 0.0;
                for (int j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
                var /= n;
                double inv = 1.0 / std::sqrt(var + eps);
                // xhat = (x - mean) * inv
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (int j = 0; j < n; ++j) {
                    double xhat = (x[j] - mean) * inv;
                    double dxhat = dy[j] * gain->values[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    if (gain->requires_grad) gain->grad[j] += dy[j] * xhat;
                    if (bias->requires_grad) bias->grad[j] += dy[j];
                }
                if (mat->requires_grad) {
                    double* dx = mat->grad.data() + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j) {
                        double xhat = (x[j] - mean) * inv;
                        double dxhat = dy[j] * gain->values[j];
                        dx[j] += inv * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
            }
        };
        detail::record(tape, "layer_norm", {mat, gain, bias}, out, bwd, fwd);
    }
    return out;
}

// Cosine of the angle between two same-length vectors. Zero-norm input is an
// error rather than a silent zero.
inline TensorPtr cosine_similarity(const TensorPtr& u, const TensorPtr& v, Tape* tape = nullptr) {
    if (u->rank() != 1 || v->rank() != 1 || u->shape != v->shape)
        throw ShapeError("cosine_similarity needs equal-length vectors, got " +
                         shape_str(u->shape) + " vs " + shape_str(v->shape));
    const int n = u->shape[0];
    auto out = tensor({1});
    auto fwd = [u, v, out, n] {
        double uu = 0.0, vv = 0.0, uv = 0.0;
        for (int i = 0; i < n; ++i) {
            uu += u->values[i] * u->values[i];
            vv += v->values[i] * v->values[i];
            uv += u->values[i] * v->values[i];
        }
        if (uu == 0.0 || vv == 0.0)
            throw DegenerateInputError("cosine_similarity of zero-norm vector");
        out->values[0] = uv / std::sqrt(uu * vv);
    };
    fwd();
    if (detail::track(tape, {u, v})) {
        auto bwd = [u, v, out, n] {
            double uu = 0.0, vv = 0.0, uv = 0.0;
            for (int i = 0; i < n; ++i) {
                uu += u->values[i] * u->values[i];
                vv += v->values[i] * v->values[i];
                uv += u->values[i] * v->values[i];
            }
            double nu = std::sqrt(uu), nv = std::sqrt(vv);
            double c = uv / (nu * nv);
            double g = out->grad[0];
            if (u->requires_grad)
                for (int i = 0; i < n; ++i)
                    u->grad[i] += g * (v->values[i] / (nu * nv) - c * u->values[i] / uu);
            if (v->requires_grad)
                for (int i = 0; i < n; ++i)
                    v->grad[i] += g * (u->values[i] / (nu * nv) - c * v->values[i] / vv);
        };
        detail::record(tape, "cosine_similarity", {u, v}, out, bwd, fwd);
    }
    return out;
}

// Column-wise mean over a matrix's rows. Every row gets the same 1/m weight,
// so each one keeps a direct gradient path into the pooled vector no matter
// what the layers upstream learned to focus on.
inline TensorPtr mean_rows(const TensorPtr& mat, Tape* tape = nullptr) {
    if (mat->rank() != 2) throw ShapeError("mean_rows needs a rank-2 input");
    const int m = mat->shape[0], d = mat->shape[1];
    auto out = tensor({d});
    const double inv = 1.0 / static_cast<double>(m);
    auto fwd = [mat, out, m, d, inv] {
        std::fill(out->values.begin(), out->values.end(), 0.0);
        for (int r = 0; r < m; ++r)
            for (int i = 0; i < d; ++i) out->values[i] += mat->values[static_cast<size_t>(r) * d + i];
        for (int i = 0; i < d; ++i) out->values[i] *= inv;
    };
    fwd();
    if (detail::track(tape, {mat})) {
        auto bwd = [mat, out, m, d, inv] {
            for (int r = 0; r < m; ++r)
                for (int i = 0; i < d; ++i)
                    mat->grad[static_cast<size_t>(r) * d + i] += out->grad[i] * inv;
        };
        detail::record(tape, "mean_rows", {mat}, out, bwd, fwd);
    }
    return out;
}

// Mean of same-length vectors. The n = 0 convention (a zero vector) is the
// caller's job; this op requires at least one input.
inline TensorPtr mean_vecs(const std::vector<TensorPtr>& vecs, Tape* tape = nullptr) {
    if (vecs.empty()) throw ShapeError("mean_vecs of zero vectors");
    const int n = vecs[0]->shape[0];
    for (const auto& v : vecs)
        if (v->rank() != 1 || v->shape[0] != n)
            throw ShapeError("mean_vecs length mismatch at " + shape_str(v->shape));
    auto out = tensor({n});
    const double inv = 1.0 / static_cast<double>(vecs.size());
    auto fwd = [vecs, out, n, inv] {
        std::fill(out->values.begin(), out->values.end(), 0.0);
        for (const auto& v : vecs)
            for (int i = 0; i < n; ++i) out->values[i] += v->values[i];
        for (int i = 0; i < n; ++i) out->values[i] *= inv;
    };
    fwd();
    bool any = false;
    for (const auto& v : vecs) any = any || v->requires_grad;
    if (tape && any) {
        auto bwd = [vecs, out, n, inv] {
            for (const auto& v : vecs)
                if (v->requires_grad)
                    for (int i = 0; i < n; ++i) v->grad[i] += out->grad[i] * inv;
        };
        detail::record(tape, "mean_vecs", vecs, out, bwd, fwd);
    }
    return out;
}

// Rows of an embedding table selected by token id.
inline TensorPtr embed(const TensorPtr& table, const std::vector<int>& ids,
                       Tape* tape = nullptr) {
    if (table->rank() != 2) throw ShapeError("embed table must be rank 2");
    const int v = table->shape[0], d = table->shape[1];
    const int m = static_cast<int>(ids.size());
    if (m == 0) throw ShapeError("embed of empty id list");
    for (int id : ids)
        if (id < 0 || id >= v)
            throw LabelError("embed id " + std::to_string(id) + " outside table of " +
                             std::to_string(v));
    auto out = tensor({m, d});
    auto fwd = [table, out, ids, d] {
        for (size_t i = 0; i < ids.size(); ++i)
            std::copy_n(table->values.begin() + static_cast<size_t>(ids[i]) * d, d,
                        out->values.begin() + i * d);
    };
    fwd();
    if (detail::track(tape, {table})) {
        auto bwd = [table, out, ids, d] {
            for (size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < d; ++j)
                    table->grad[static_cast<size_t>(ids[i]) * d + j] += out->grad[i * d + j];
        };
        detail::record(tape, "embed", {table}, out, bwd, fwd);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

enum class LossKind { CE, BCE };

constexpr double kBceEps = 1e-7;

// Binary cross-entropy on a scalar probability; the probability is clamped
// to [eps, 1-eps] before the log, with pass-through gradient.
inline TensorPtr bce_loss(const TensorPtr& prob, int target, Tape* tape = nullptr) {
    if (prob->numel() != 1) throw ShapeError("bce_loss needs a scalar probability");
    if (target != 0 && target != 1)
        throw LabelError("bce_loss target must be 0 or 1, got " + std::to_string(target));
    auto out = tensor({1});
    auto fwd = [prob, out, target] {
        double p = std::clamp(prob->values[0], kBceEps, 1.0 - kBceEps);
        out->values[0] = target == 1 ? -std::log(p) : -std::log(1.0 - p);
    };
    fwd();
    if (detail::track(tape, {prob})) {
        auto bwd = [prob, out, target] {
            double p = std::clamp(prob->values[0], kBceEps, 1.0 - kBceEps);
            prob->grad[0] += out->grad[0] * (p - target) / (p * (1.0 - p));
        };
        detail::record(tape, "bce_loss", {prob}, out, bwd, fwd);
    }
    return out;
}

// Binary cross-entropy computed directly from the logit:
//   target=1: pos_weight * softplus(-z)      target=0: softplus(z)
// Algebraically -log sigmoid(z) / -log(1-sigmoid(z)), but the gradient is
// sigmoid(z) - target, which stays ~±1 for confidently-wrong inputs where the
// sigmoid->bce composition underflows to zero and freezes them. pos_weight
// rebalances pools holding several negatives per positive.
inline TensorPtr bce_logits_loss(const TensorPtr& logit, int target, Tape* tape = nullptr,
                                 double pos_weight = 1.0) {
    if (logit->numel() != 1) throw ShapeError("bce_logits_loss needs a scalar logit");
    if (target != 0 && target != 1)
        throw LabelError("bce_logits_loss target must be 0 or 1, got " + std::to_string(target));
    if (!(pos_weight > 0.0)) throw ConfigError("bce_logits_loss pos_weight must be positive");
    const double w = target == 1 ? pos_weight : 1.0;
    auto out = tensor({1});
    auto fwd = [logit, out, target, w] {
        double z = logit->values[0];
        out->values[0] = w * (std::max(z, 0.0) - z * static_cast<double>(target) +
                              std::log1p(std::exp(-std::abs(z))));
    };
    fwd();
    if (detail::track(tape, {logit})) {
        auto bwd = [logit, out, target, w] {
            double z = logit->values[0];
            double sig = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                  : std::exp(z) / (1.0 + std::exp(z));
            logit->grad[0] += out->grad[0] * w * (sig - static_cast<double>(target));
        };
        detail::record(tape, "bce_logits_loss", {logit}, out, bwd, fwd);
    }
    return out;
}

// Cross-entropy of a length-K logit vector against an integer class.
inline TensorPtr ce_loss(const TensorPtr& logits, int target, Tape* tape = nullptr) {
    if (logits->rank() != 1) throw ShapeError("ce_loss needs a rank-1 logit vector");
    const int k = logits->shape[0];
    if (target < 0 || target >= k)
        throw LabelError("ce_loss target " + std::to_string(target) + " outside [0," +
                         std::to_string(k) + ")");
    auto out = tensor({1});
    auto fwd = [logits, out, target, k] {
        double mx = *std::max_element(logits->values.begin(), logits->values.end());
        double z = 0.0;
        for (int j = 0; j < k; ++j) z += std::exp(logits->values[j] - mx);
        out->values[0] = std::log(z) + mx - logits->values[target];
    };
    fwd();
    if (detail::track(tape, {logits})) {
        auto bwd = [logits, out, target, k] {
            double mx = *std::max_element(logits->values.begin(), logits->values.end());
            double z = 0.0;
            for (int j = 0; j < k; ++j) z += std::exp(logits->values[j] - mx);
            for (int j = 0; j < k; ++j) {
                double p = std::exp(logits->values[j] - mx) / z;
                logits->grad[j] += out->grad[0] * (p - (j == target ? 1.0 : 0.0));
            }
        };
        detail::record(tape, "ce_loss", {logits}, out, bwd, fwd);
    }
    return out;
}

// Unified loss entry point: CE over a logit vector or BCE over a scalar
// probability.
inline TensorPtr loss(const TensorPtr& input, int target, LossKind kind, Tape* tape = nullptr) {
    return kind == LossKind::CE ? ce_loss(input, target, tape) : bce_loss(input, target, tape);
}

// Mean cross-entropy over the rows of an (m x V) logit matrix where
// active[i] != 0. Used for teacher-forced sequence training.
inline TensorPtr ce_rows(const TensorPtr& logits, const std::vector<int>& targets,
                         const std::vector<uint8_t>& active, Tape* tape = nullptr) {
    if (logits->rank() != 2) throw ShapeError("ce_rows needs a rank-2 logit matrix");
    const int m = logits->shape[0], v = logits->shape[1];
    if (static_cast<int>(targets.size()) != m || static_cast<int>(active.size()) != m)
        throw ShapeError("ce_rows target/mask length mismatch");
    int count = 0;
    for (int i = 0; i < m; ++i)
        if (active[i]) {
            if (targets[i] < 0 || targets[i] >= v)
                throw LabelError("ce_rows target " + std::to_string(targets[i]) +
                                 " outside [0," + std::to_string(v) + ")");
            ++count;
        }
    if (count == 0) throw ContractError("ce_rows with no active rows");
    auto out = tensor({1});
    auto fwd = [logits, out, targets, active, m, v, count] {
        double total = 0.0;
        for (int i = 0; i < m; ++i) {
            if (!active[i]) continue;
            const double* x = logits->values.data() + static_cast<size_t>(i) * v;
            double mx = x[0];
            for (int j = 1; j < v; ++j) mx = std::max(mx, x[j]);
            double z = 0.0;
            for (int j = 0; j < v; ++j) z += std::exp(x[j] - mx);
            total += std::log(z) + mx - x[targets[i]];
        }
        out->values[0] = total / count;
    };
    fwd();
    if (detail::track(tape, {logits})) {
        auto bwd = [logits, out, targets, active, m, v, count] {
            const double g = out->grad[0] / count;
            for (int i = 0; i < m; ++i) {
                if (!active[i]) continue;
                const double* x = logits->values.data() + static_cast<size_t>(i) * v;
                double* dx = logits->grad.data() + static_cast<size_t>(i) * v;
                double mx = x[0];
                for (int j = 1; j < v; ++j) mx = std::max(mx, x[j]);
                double z = 0.0;
                for (int j = 0; j < v; ++j) z += std::exp(x[j] - mx);
                for (int j = 0; j < v; ++j) {
                    double p = std::exp(x[j] - mx) / z;
                    dx[j] += g * (p - (j == targets[i] ? 1.0 : 0.0));
                }
            }
        };
        detail::record(tape, "ce_rows", {logits}, out, bwd, fwd);
    }
    return out;
}

}  // namespace simmc
