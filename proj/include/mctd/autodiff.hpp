#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// The tape is dynamic: every op allocates a node that remembers its parents
// and a closure that pushes the output gradient back into them. Calling
// backward() on a scalar walks the reachable graph in reverse topological
// order. A graph belongs to one thread; separate graphs may be built on
// separate threads.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mctd/error.hpp"

namespace mctd {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::string op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (numel_of(shape) != values.size()) {
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
        }
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        if (requires_grad) node->ensure_grad();
        return Tensor(std::move(node));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = numel_of(shape);
        return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        const auto n = numel_of(shape);
        return from(std::move(shape), std::vector<double>(n, v), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from(Shape{}, {v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    const std::string& op_name() const { return node_->op; }

    std::span<const double> values() const { return node_->value; }
    std::span<double> mutable_values() { return node_->value; }

    std::span<const double> grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    std::span<double> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }

    double item() const {
        if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
        return node_->value[0];
    }

    double operator[](std::size_t i) const { return node_->value[i]; }

    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

    /// Accumulates d(this)/d(leaf) into every reachable leaf that requires grad.
    void backward() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

inline void Tensor::backward() const {
    if (numel() != 1) {
        throw ShapeError("backward: loss must be scalar, got shape " + shape_str(shape()));
    }
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (auto* node : order) {
        if (node->backward) node->grad.assign(node->value.size(), 0.0);
    }
    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) (*it)->backward(**it);
    }
}

namespace detail {

inline Tensor make_result(std::string op, Shape shape, std::vector<double> value,
                          std::vector<Tensor> parents, std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->op = std::move(op);
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool track = false;
    if (grad_enabled) {
        for (const auto& p : parents) track = track || p.requires_grad();
    }
    if (track) {
        node->requires_grad = true;
        for (auto& p : parents) node->parents.push_back(p.node());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

inline void check_defined(const char* op, std::initializer_list<const Tensor*> inputs) {
    for (const auto* t : inputs) {
        if (!t->defined()) throw ShapeError(std::string(op) + ": undefined operand");
    }
}

// out(m,n) += a(m,k) * b(k,n). Every output element accumulates over p in
// ascending order whatever the row blocking, so a row's result does not
// depend on how many rows are multiplied together.
inline void gemm_acc(const double* __restrict a, const double* __restrict b, double* __restrict out, std::size_t m,
                     std::size_t k, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        double* __restrict r0 = out + i * n;
        double* __restrict r1 = r0 + n;
        double* __restrict r2 = r1 + n;
        double* __restrict r3 = r2 + n;
        for (std::size_t p = 0; p < k; ++p) {
            const double s0 = a[i * k + p], s1 = a[(i + 1) * k + p], s2 = a[(i + 2) * k + p], s3 = a[(i + 3) * k + p];
            const double* __restrict brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double bj = brow[j];
                r0[j] += s0 * bj;
                r1[j] += s1 * bj;
                r2[j] += s2 * bj;
                r3[j] += s3 * bj;
            }
        }
    }
    for (; i < m; ++i) {
        double* __restrict row = out + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double s = a[i * k + p];
            const double* __restrict brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
        }
    }
}

// Numpy-style broadcasting of two shapes.
inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw ShapeError(std::string(op) + ": cannot broadcast lhs " + shape_str(a) + " with rhs " +
                             shape_str(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// For each output element, the linear index of the source element it reads.
inline std::vector<std::size_t> broadcast_index(const Shape& src, const Shape& out) {
    const std::size_t rank = out.size();
    std::vector<std::size_t> stride(rank, 0);
    std::size_t s = 1;
    for (std::size_t i = src.size(); i-- > 0;) {
        const std::size_t oi = i + (rank - src.size());
        stride[oi] = src[i] == 1 ? 0 : s;
        s *= src[i];
    }
    const std::size_t n = numel_of(out);
    std::vector<std::size_t> index(n);
    std::vector<std::size_t> counter(rank, 0);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < n; ++k) {
        index[k] = offset;
        for (std::size_t d = rank; d-- > 0;) {
            ++counter[d];
            offset += stride[d];
            if (counter[d] < out[d]) break;
            offset -= stride[d] * counter[d];
            counter[d] = 0;
        }
    }
    return index;
}

// How an operand's elements map onto a broadcast output of n elements.
struct IndexMap {
    enum class Kind { identity, modulo, divide, general } kind = Kind::identity;
    std::size_t param = 1;
    std::shared_ptr<std::vector<std::size_t>> table;
};

// Walks an IndexMap in output order without per-element division.
struct IndexCursor {
    const IndexMap& map;
    std::size_t index = 0;
    std::size_t count = 0;

    explicit IndexCursor(const IndexMap& m) : map(m) {
        if (m.kind == IndexMap::Kind::general && !m.table->empty()) index = (*m.table)[0];
    }

    void advance() {
        switch (map.kind) {
            case IndexMap::Kind::identity: ++index; break;
            case IndexMap::Kind::modulo:
                if (++index == map.param) index = 0;
                break;
            case IndexMap::Kind::divide:
                if (++count == map.param) count = 0, ++index;
                break;
            case IndexMap::Kind::general:
                if (++count < map.table->size()) index = (*map.table)[count];
                break;
        }
    }
};

inline IndexMap make_index_map(const Shape& src, const Shape& out) {
    const std::size_t n = numel_of(out), m = numel_of(src);
    if (n == m) return {};
    // Strip leading unit dims of src, then test whether it matches a suffix
    // (repeated block, i % m) or a prefix followed only by unit dims (i / (n/m)).
    std::size_t lead = 0;
    while (lead < src.size() && src[lead] == 1) ++lead;
    const Shape trimmed(src.begin() + static_cast<std::ptrdiff_t>(lead), src.end());
    if (trimmed.size() <= out.size() && std::equal(trimmed.begin(), trimmed.end(), out.end() - static_cast<std::ptrdiff_t>(trimmed.size()))) {
        return {IndexMap::Kind::modulo, std::max<std::size_t>(m, 1), nullptr};
    }
    const std::size_t offset = out.size() - src.size();
    std::size_t last = src.size();
    while (last > 0 && src[last - 1] == 1) --last;
    bool prefix = true;
    for (std::size_t i = 0; i < offset; ++i) prefix = prefix && out[i] == 1;
    for (std::size_t i = 0; i < last; ++i) prefix = prefix && src[i] == out[offset + i];
    if (prefix) return {IndexMap::Kind::divide, n / m, nullptr};
    return {IndexMap::Kind::general, 1, std::make_shared<std::vector<std::size_t>>(broadcast_index(src, out))};
}

template <class Forward, class GradA, class GradB>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, Forward f, GradA ga, GradB gb) {
    check_defined(op, {&a, &b});
    Shape shape = a.shape() == b.shape() ? a.shape() : broadcast_shape(op, a.shape(), b.shape());
    const IndexMap ia = make_index_map(a.shape(), shape);
    const IndexMap ib = make_index_map(b.shape(), shape);
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(numel_of(shape));
    if (ia.kind == IndexMap::Kind::identity && ib.kind == IndexMap::Kind::identity) {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
    } else {
        IndexCursor ca(ia), cb(ib);
        for (std::size_t i = 0; i < out.size(); ++i, ca.advance(), cb.advance()) out[i] = f(av[ca.index], bv[cb.index]);
    }
    return make_result(op, std::move(shape), std::move(out), {a, b}, [a, b, ia, ib, ga, gb](Node& self) {
        const auto& av = a.values();
        const auto& bv = b.values();
        const std::size_t n = self.grad.size();
        if (ia.kind == IndexMap::Kind::identity && ib.kind == IndexMap::Kind::identity) {
            if (a.requires_grad()) {
                auto& g = a.node()->grad;
                for (std::size_t i = 0; i < n; ++i) g[i] += ga(av[i], bv[i], self.value[i]) * self.grad[i];
            }
            if (b.requires_grad()) {
                auto& g = b.node()->grad;
                for (std::size_t i = 0; i < n; ++i) g[i] += gb(av[i], bv[i], self.value[i]) * self.grad[i];
            }
            return;
        }
        if (a.requires_grad()) {
            auto& g = a.node()->grad;
            IndexCursor ca(ia), cb(ib);
            for (std::size_t i = 0; i < n; ++i, ca.advance(), cb.advance()) {
                g[ca.index] += ga(av[ca.index], bv[cb.index], self.value[i]) * self.grad[i];
            }
        }
        if (b.requires_grad()) {
            auto& g = b.node()->grad;
            IndexCursor ca(ia), cb(ib);
            for (std::size_t i = 0; i < n; ++i, ca.advance(), cb.advance()) {
                g[cb.index] += gb(av[ca.index], bv[cb.index], self.value[i]) * self.grad[i];
            }
        }
    });
}

// f: forward, df: derivative expressed through (input, output).
template <class Forward, class Deriv>
Tensor unary_op(const char* op, const Tensor& a, Forward f, Deriv df) {
    check_defined(op, {&a});
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
    return make_result(op, a.shape(), std::move(out), {a}, [a, df](Node& self) {
        const auto& av = a.values();
        auto& g = a.node()->grad;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += df(av[i], self.value[i]) * self.grad[i];
    });
}

// Splits a shape around `axis` into (outer, axis extent, inner).
inline std::tuple<std::size_t, std::size_t, std::size_t> split_axis(const Shape& shape, std::size_t axis) {
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    return {outer, shape[axis], inner};
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
        [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary_op(
        "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double z) { return -z / y; });
}

inline Tensor scale(const Tensor& a, double c) {
    return detail::unary_op(
        "scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    return detail::unary_op(
        "add_scalar", a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

/// c - a, elementwise.
inline Tensor rsub(double c, const Tensor& a) {
    return detail::unary_op(
        "rsub", a, [c](double x) { return c - x; }, [](double, double) { return -1.0; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(
        "sigmoid", a,
        [](double x) {
            if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
    return detail::unary_op(
        "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor log(const Tensor& a) {
    return detail::unary_op(
        "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor square(const Tensor& a) {
    return detail::unary_op(
        "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Tensor sqrt(const Tensor& a) {
    return detail::unary_op(
        "sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(
        "relu", a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

/// Gradient passes only where the input lies strictly inside [lo, hi].
inline Tensor clamp(const Tensor& a, double lo, double hi) {
    return detail::unary_op(
        "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

/// (m,k) x (k,n) -> (m,n). Each output row is computed independently of the
/// others with a fixed summation order, so results do not depend on batch size.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check_defined("matmul", {&a, &b});
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: lhs " + shape_str(a.shape()) + " and rhs " + shape_str(b.shape()) +
                         " do not contract");
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    detail::gemm_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
    return detail::make_result("matmul", Shape{m, n}, std::move(out), {a, b}, [a, b, m, k, n](detail::Node& self) {
        const double* g = self.grad.data();
        if (a.requires_grad()) {
            // dA += dC * B^T
            const double* bv = b.values().data();
            std::vector<double> bt(n * k);
            for (std::size_t p = 0; p < k; ++p)
                for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = bv[p * n + j];
            detail::gemm_acc(g, bt.data(), a.node()->grad.data(), m, n, k);
        }
        if (b.requires_grad()) {
            // dB += A^T * dC
            const double* av = a.values().data();
            double* __restrict gb = b.node()->grad.data();
            for (std::size_t i = 0; i < m; ++i) {
                const double* __restrict grow = g + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const double s = av[i * k + p];
                    double* __restrict gbrow = gb + p * n;
                    for (std::size_t j = 0; j < n; ++j) gbrow[j] += s * grow[j];
                }
            }
        }
    });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    detail::check_defined("reshape", {&a});
    if (numel_of(shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(a.values().begin(), a.values().end());
    return detail::make_result("reshape", std::move(shape), std::move(out), {a}, [a](detail::Node& self) {
        auto& g = a.node()->grad;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

/// Elements [start, start+length) along `axis`.
inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
    detail::check_defined("slice", {&a});
    if (axis >= a.rank() || start + length > a.dim(axis)) {
        throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + length) +
                         ") on axis " + std::to_string(axis) + " out of bounds for " + shape_str(a.shape()));
    }
    const auto [outer, extent, inner] = detail::split_axis(a.shape(), axis);
    Shape shape = a.shape();
    shape[axis] = length;
    std::vector<double> out(outer * length * inner);
    const auto& av = a.values();
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(av.begin() + static_cast<std::ptrdiff_t>((o * extent + start) * inner), length * inner,
                    out.begin() + static_cast<std::ptrdiff_t>(o * length * inner));
    }
    return detail::make_result("slice", std::move(shape), std::move(out), {a},
                               [a, outer, extent, inner, start, length](detail::Node& self) {
                                   auto& g = a.node()->grad;
                                   for (std::size_t o = 0; o < outer; ++o) {
                                       const std::size_t src = (o * extent + start) * inner;
                                       const std::size_t dst = o * length * inner;
                                       for (std::size_t i = 0; i < length * inner; ++i) g[src + i] += self.grad[dst + i];
                                   }
                               });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no operands");
    for (const auto& p : parts) detail::check_defined("concat", {&p});
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) throw ShapeError("concat: axis " + std::to_string(axis) + " invalid for " + shape_str(first));
    Shape shape = first;
    shape[axis] = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const Shape& s = parts[i].shape();
        bool ok = s.size() == first.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
        if (!ok) {
            throw ShapeError("concat: operand 0 " + shape_str(first) + " and operand " + std::to_string(i) + " " +
                             shape_str(s) + " differ off axis " + std::to_string(axis));
        }
        shape[axis] += s[axis];
    }
    const auto [outer, extent, inner] = detail::split_axis(shape, axis);
    std::vector<double> out(outer * extent * inner);
    std::size_t offset = 0;
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        const std::size_t len = p.dim(axis);
        offsets.push_back(offset);
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(p.values().begin() + static_cast<std::ptrdiff_t>(o * len * inner), len * inner,
                        out.begin() + static_cast<std::ptrdiff_t>((o * extent + offset) * inner));
        }
        offset += len;
    }
    return detail::make_result("concat", std::move(shape), std::move(out), parts,
                               [parts, offsets, outer, extent, inner, axis](detail::Node& self) {
                                   for (std::size_t k = 0; k < parts.size(); ++k) {
                                       if (!parts[k].requires_grad()) continue;
                                       auto& g = parts[k].node()->grad;
                                       const std::size_t len = parts[k].dim(axis);
                                       for (std::size_t o = 0; o < outer; ++o) {
                                           const std::size_t src = (o * extent + offsets[k]) * inner;
                                           for (std::size_t i = 0; i < len * inner; ++i) {
                                               g[o * len * inner + i] += self.grad[src + i];
                                           }
                                       }
                                   }
                               });
}

/// Sum of every element; returns a scalar.
inline Tensor sum(const Tensor& a) {
    detail::check_defined("sum", {&a});
    double s = 0.0;
    for (double v : a.values()) s += v;
    return detail::make_result("sum", Shape{}, {s}, {a}, [a](detail::Node& self) {
        for (auto& g : a.node()->grad) g += self.grad[0];
    });
}

inline Tensor mean(const Tensor& a) {
    if (a.defined() && a.numel() == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

/// Sum along `axis`, keeping it as a unit dimension.
inline Tensor sum(const Tensor& a, std::size_t axis) {
    detail::check_defined("sum", {&a});
    if (axis >= a.rank()) throw ShapeError("sum: axis " + std::to_string(axis) + " invalid for " + shape_str(a.shape()));
    const auto [outer, extent, inner] = detail::split_axis(a.shape(), axis);
    Shape shape = a.shape();
    shape[axis] = 1;
    std::vector<double> out(outer * inner, 0.0);
    const auto& av = a.values();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t e = 0; e < extent; ++e)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * extent + e) * inner + i];
    return detail::make_result("sum_axis", std::move(shape), std::move(out), {a},
                               [a, outer, extent, inner](detail::Node& self) {
                                   auto& g = a.node()->grad;
                                   for (std::size_t o = 0; o < outer; ++o)
                                       for (std::size_t e = 0; e < extent; ++e)
                                           for (std::size_t i = 0; i < inner; ++i)
                                               g[(o * extent + e) * inner + i] += self.grad[o * inner + i];
                               });
}

inline Tensor mean(const Tensor& a, std::size_t axis) {
    if (a.defined() && axis < a.rank() && a.dim(axis) == 0) throw ShapeError("mean: empty axis");
    const double extent = a.defined() && axis < a.rank() ? static_cast<double>(a.dim(axis)) : 1.0;
    return scale(sum(a, axis), 1.0 / extent);
}

}  // namespace mctd
