#include "convseq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "convseq/errors.hpp"

namespace convseq {

namespace {

thread_local bool g_grad_enabled = true;

constexpr double kMaskedLogit = -1e30;

void require_rank2(const Tensor &t, const char *op) {
    if (!t.defined() || t.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected a matrix, got " +
                             (t.defined() ? shape_string(t.shape()) : std::string("undefined")));
    }
}

void require_same_shape(const Tensor &a, const Tensor &b, const char *op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_nn(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double *crow = c + i * n;
        const double *arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double *brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

double dot(const double *x, const double *y, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += x[i] * y[i];
        s1 += x[i + 1] * y[i + 1];
        s2 += x[i + 2] * y[i + 2];
        s3 += x[i + 3] * y[i + 3];
    }
    for (; i < n; ++i) s0 += x[i] * y[i];
    return (s0 + s1) + (s2 + s3);
}

// c[m x n] += alpha * a[m x k] * b[n x k]^T
void gemm_nt(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n,
             double alpha) {
    for (std::size_t i = 0; i < m; ++i) {
        const double *arow = a + i * k;
        double *crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += alpha * dot(arow, b + j * k, k);
    }
}

// c[k x n] += a[m x k]^T * b[m x n]
void gemm_tn(const double *a, const double *b, double *c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double *arow = a + i * k;
        const double *brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double *crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void check_finite_input(std::span<const double> values, const char *op) {
    for (double v : values) {
        if (std::isnan(v)) throw NumericError(std::string(op) + ": NaN input");
    }
}

} // namespace

std::size_t shape_size(const Shape &shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape &shape) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
    out << ']';
    return out.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    for (std::size_t extent : shape) {
        if (extent == 0) throw DimensionError("tensor extents must be positive: " + shape_string(shape));
    }
    if (shape_size(shape) != data.size()) {
        throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                             shape_string(shape));
    }
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(m * n);
    for (const auto &row : rows) {
        if (row.size() != n) throw DimensionError("ragged matrix literal");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({m, n}, std::move(data), requires_grad);
}

Tensor Tensor::vector(std::initializer_list<double> values, bool requires_grad) {
    return Tensor({values.size()}, std::vector<double>(values), requires_grad);
}

const Shape &Tensor::shape() const { return node_->shape; }

std::size_t Tensor::rows() const {
    if (rank() != 2) throw DimensionError("rows() on non-matrix " + shape_string(shape()));
    return shape()[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw DimensionError("cols() on non-matrix " + shape_string(shape()));
    return shape()[1];
}

std::span<const double> Tensor::data() const { return node_->data; }

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return node_->data[0];
}

double Tensor::at(std::size_t i, std::size_t j) const { return node_->data[i * cols() + j]; }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::is_leaf() const { return node_ && !node_->backward; }

std::span<double> Tensor::mutable_data() {
    if (!is_leaf()) throw ContractError("mutable_data() on a non-leaf tensor");
    return node_->data;
}

const std::vector<double> &Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data, false); }

Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs, BackwardFn backward) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    if (g_grad_enabled) {
        const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor &t) { return t.requires_grad(); });
        if (any) {
            node->requires_grad = true;
            node->parents.reserve(inputs.size());
            for (auto &t : inputs) node->parents.push_back(t.node_);
            node->backward = std::move(backward);
        }
    }
    return Tensor(std::move(node));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Gradients / backward

std::span<const double> Gradients::of(const Tensor &leaf) const {
    auto it = leaf_grads_.find(leaf.node().get());
    if (it == leaf_grads_.end()) return {};
    return it->second;
}

bool Gradients::contains(const Tensor &leaf) const { return leaf_grads_.count(leaf.node().get()) != 0; }

void Gradients::accumulate_into_leaves() const {
    for (const auto &leaf : leaves_) {
        const auto &g = leaf_grads_.at(leaf.get());
        if (leaf->grad.size() != g.size()) leaf->grad.assign(g.size(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) leaf->grad[i] += g[i];
    }
}

Gradients backward(const Tensor &loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward() needs a scalar loss, got " +
                            (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
    }
    if (!loss.requires_grad()) throw ContractError("backward(): loss is not on the tape");

    Gradients result;

    // Iterative post-order DFS gives a topological order (parents first).
    std::vector<Node *> order;
    std::unordered_map<const Node *, std::size_t> index;
    {
        std::vector<std::pair<Node *, std::size_t>> stack;
        std::unordered_map<const Node *, bool> seen;
        auto visit = [&](const NodePtr &n) {
            seen[n.get()] = true;
            if (!n->backward) result.leaves_.push_back(n);
            stack.emplace_back(n.get(), 0);
        };
        visit(loss.node());
        while (!stack.empty()) {
            auto &[node, next] = stack.back();
            if (next < node->parents.size()) {
                const NodePtr &parent = node->parents[next++];
                if (parent->requires_grad && !seen[parent.get()]) visit(parent);
            } else {
                index[node] = order.size();
                order.push_back(node);
                stack.pop_back();
            }
        }
    }

    std::vector<std::vector<double>> grads(order.size());
    grads[index.at(loss.node().get())].assign(1, 1.0);

    result.nodes_visited_ = order.size();
    std::vector<double *> parent_ptrs;
    for (std::size_t pos = order.size(); pos-- > 0;) {
        Node *node = order[pos];
        auto &g = grads[pos];
        if (g.empty()) g.assign(node->data.size(), 0.0);
        if (!node->backward) {
            result.leaf_grads_.emplace(node, std::move(g));
            continue;
        }
        parent_ptrs.assign(node->parents.size(), nullptr);
        for (std::size_t i = 0; i < node->parents.size(); ++i) {
            Node *parent = node->parents[i].get();
            if (!parent->requires_grad) continue;
            auto &pg = grads[index.at(parent)];
            if (pg.empty()) pg.assign(parent->data.size(), 0.0);
            parent_ptrs[i] = pg.data();
        }
        node->backward(*node, g.data(), parent_ptrs);
        std::vector<double>().swap(g);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor &a, const Tensor &b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: inner dimensions differ " + shape_string(a.shape()) + " * " +
                             shape_string(b.shape()));
    }
    std::vector<double> out(m * n, 0.0);
    gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    return make_op({m, n}, std::move(out), {a, b},
                   [m, k, n](const Node &self, const double *g, std::span<double *const> pg) {
                       const double *av = self.parents[0]->data.data();
                       const double *bv = self.parents[1]->data.data();
                       if (pg[0]) gemm_nt(g, bv, pg[0], m, n, k, 1.0);
                       if (pg[1]) gemm_tn(av, g, pg[1], m, k, n);
                   });
}

Tensor matmul_nt(const Tensor &a, const Tensor &b, double alpha) {
    require_rank2(a, "matmul_nt");
    require_rank2(b, "matmul_nt");
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k) {
        throw DimensionError("matmul_nt: inner dimensions differ " + shape_string(a.shape()) + " * " +
                             shape_string(b.shape()) + "^T");
    }
    std::vector<double> out(m * n, 0.0);
    gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n, alpha);
    return make_op({m, n}, std::move(out), {a, b},
                   [m, k, n, alpha](const Node &self, const double *g, std::span<double *const> pg) {
                       const double *av = self.parents[0]->data.data();
                       const double *bv = self.parents[1]->data.data();
                       // dA = alpha * G * B ; dB = alpha * G^T * A
                       if (pg[0]) {
                           for (std::size_t i = 0; i < m; ++i) {
                               double *row = pg[0] + i * k;
                               for (std::size_t j = 0; j < n; ++j) {
                                   const double gv = alpha * g[i * n + j];
                                   if (gv == 0.0) continue;
                                   const double *brow = bv + j * k;
                                   for (std::size_t p = 0; p < k; ++p) row[p] += gv * brow[p];
                               }
                           }
                       }
                       if (pg[1]) {
                           for (std::size_t i = 0; i < m; ++i) {
                               const double *arow = av + i * k;
                               for (std::size_t j = 0; j < n; ++j) {
                                   const double gv = alpha * g[i * n + j];
                                   if (gv == 0.0) continue;
                                   double *row = pg[1] + j * k;
                                   for (std::size_t p = 0; p < k; ++p) row[p] += gv * arow[p];
                               }
                           }
                       }
                   });
}

Tensor transpose(const Tensor &a) {
    require_rank2(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    const auto in = a.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
    return make_op({n, m}, std::move(out), {a}, [m, n](const Node &, const double *g, std::span<double *const> pg) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) pg[0][i * n + j] += g[j * m + i];
    });
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor &a, const Tensor &b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    const auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    const std::size_t n = out.size();
    return make_op(a.shape(), std::move(out), {a, b}, [n](const Node &, const double *g, std::span<double *const> pg) {
        for (auto *p : pg) {
            if (!p) continue;
            for (std::size_t i = 0; i < n; ++i) p[i] += g[i];
        }
    });
}

Tensor sub(const Tensor &a, const Tensor &b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    const auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    const std::size_t n = out.size();
    return make_op(a.shape(), std::move(out), {a, b}, [n](const Node &, const double *g, std::span<double *const> pg) {
        if (pg[0])
            for (std::size_t i = 0; i < n; ++i) pg[0][i] += g[i];
        if (pg[1])
            for (std::size_t i = 0; i < n; ++i) pg[1][i] -= g[i];
    });
}

Tensor mul(const Tensor &a, const Tensor &b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    const auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    const std::size_t n = out.size();
    return make_op(a.shape(), std::move(out), {a, b},
                   [n](const Node &self, const double *g, std::span<double *const> pg) {
                       const double *x = self.parents[0]->data.data();
                       const double *y = self.parents[1]->data.data();
                       if (pg[0])
                           for (std::size_t i = 0; i < n; ++i) pg[0][i] += g[i] * y[i];
                       if (pg[1])
                           for (std::size_t i = 0; i < n; ++i) pg[1][i] += g[i] * x[i];
                   });
}

Tensor scale(const Tensor &a, double factor) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double &v : out) v *= factor;
    const std::size_t n = out.size();
    return make_op(a.shape(), std::move(out), {a},
                   [n, factor](const Node &, const double *g, std::span<double *const> pg) {
                       for (std::size_t i = 0; i < n; ++i) pg[0][i] += factor * g[i];
                   });
}

Tensor add_row(const Tensor &a, const Tensor &bias) {
    require_rank2(a, "add_row");
    const std::size_t m = a.rows(), n = a.cols();
    if (bias.rank() != 1 || bias.size() != n) {
        throw DimensionError("add_row: bias " + shape_string(bias.shape()) + " does not match " +
                             shape_string(a.shape()));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    const auto b = bias.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
    return make_op(a.shape(), std::move(out), {a, bias},
                   [m, n](const Node &, const double *g, std::span<double *const> pg) {
                       if (pg[0])
                           for (std::size_t i = 0; i < m * n; ++i) pg[0][i] += g[i];
                       if (pg[1])
                           for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) pg[1][j] += g[i * n + j];
                   });
}

Tensor relu(const Tensor &a) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double &v : out) v = v > 0.0 ? v : 0.0;
    const std::size_t n = out.size();
    return make_op(a.shape(), std::move(out), {a}, [n](const Node &self, const double *g, std::span<double *const> pg) {
        const double *x = self.parents[0]->data.data();
        for (std::size_t i = 0; i < n; ++i)
            if (x[i] > 0.0) pg[0][i] += g[i];
    });
}

Tensor sigmoid(const Tensor &a) {
    std::vector<double> out(a.size());
    const auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x[i]));
    const std::size_t n = out.size();
    return make_op(a.shape(), std::move(out), {a}, [n](const Node &self, const double *g, std::span<double *const> pg) {
        const double *y = self.data.data();
        for (std::size_t i = 0; i < n; ++i) pg[0][i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

// ---------------------------------------------------------------------------
// Softmax family

namespace {

void softmax_backward(const double *y, const double *g, double *out, std::size_t m, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double *yr = y + i * n;
        const double *gr = g + i * n;
        const double s = dot(yr, gr, n);
        double *o = out + i * n;
        for (std::size_t j = 0; j < n; ++j) o[j] += yr[j] * (gr[j] - s);
    }
}

} // namespace

Tensor softmax_rows(const Tensor &a) {
    require_rank2(a, "softmax_rows");
    check_finite_input(a.data(), "softmax_rows");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    const auto x = a.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double *xr = x.data() + i * n;
        double *yr = out.data() + i * n;
        const double mx = *std::max_element(xr, xr + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += (yr[j] = std::exp(xr[j] - mx));
        const double inv = 1.0 / total;
        for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
    }
    return make_op(a.shape(), std::move(out), {a},
                   [m, n](const Node &self, const double *g, std::span<double *const> pg) {
                       softmax_backward(self.data.data(), g, pg[0], m, n);
                   });
}

Tensor masked_softmax_rows(const Tensor &a, std::span<const std::uint8_t> allowed) {
    require_rank2(a, "masked_softmax_rows");
    if (allowed.size() != a.size()) throw DimensionError("masked_softmax_rows: mask size does not match logits");
    check_finite_input(a.data(), "masked_softmax_rows");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n, 0.0);
    const auto x = a.data();
    std::vector<double> logits(n);
    for (std::size_t i = 0; i < m; ++i) {
        const std::uint8_t *mr = allowed.data() + i * n;
        if (std::none_of(mr, mr + n, [](std::uint8_t v) { return v != 0; })) continue;
        for (std::size_t j = 0; j < n; ++j) logits[j] = mr[j] ? x[i * n + j] : kMaskedLogit;
        const double mx = *std::max_element(logits.begin(), logits.end());
        double *yr = out.data() + i * n;
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += (yr[j] = std::exp(logits[j] - mx));
        const double inv = 1.0 / total;
        for (std::size_t j = 0; j < n; ++j) yr[j] *= inv;
    }
    // Fully masked rows are all-zero outputs and therefore pass zero gradient.
    return make_op(a.shape(), std::move(out), {a},
                   [m, n](const Node &self, const double *g, std::span<double *const> pg) {
                       softmax_backward(self.data.data(), g, pg[0], m, n);
                   });
}

Tensor log_softmax_rows(const Tensor &a) {
    require_rank2(a, "log_softmax_rows");
    check_finite_input(a.data(), "log_softmax_rows");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    const auto x = a.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double *xr = x.data() + i * n;
        const double mx = *std::max_element(xr, xr + n);
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += std::exp(xr[j] - mx);
        const double lse = mx + std::log(total);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xr[j] - lse;
    }
    return make_op(a.shape(), std::move(out), {a},
                   [m, n](const Node &self, const double *g, std::span<double *const> pg) {
                       const double *y = self.data.data();
                       for (std::size_t i = 0; i < m; ++i) {
                           double gs = 0.0;
                           for (std::size_t j = 0; j < n; ++j) gs += g[i * n + j];
                           for (std::size_t j = 0; j < n; ++j)
                               pg[0][i * n + j] += g[i * n + j] - std::exp(y[i * n + j]) * gs;
                       }
                   });
}

Tensor glu(const Tensor &a) {
    require_rank2(a, "glu");
    const std::size_t m = a.rows(), n2 = a.cols();
    if (n2 % 2 != 0) throw DimensionError("glu: last extent must be even, got " + std::to_string(n2));
    const std::size_t n = n2 / 2;
    std::vector<double> out(m * n);
    const auto x = a.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double gate = 1.0 / (1.0 + std::exp(-x[i * n2 + n + j]));
            out[i * n + j] = x[i * n2 + j] * gate;
        }
    return make_op({m, n}, std::move(out), {a}, [m, n, n2](const Node &self, const double *g, std::span<double *const> pg) {
        const double *x = self.parents[0]->data.data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const double value = x[i * n2 + j];
                const double gate = 1.0 / (1.0 + std::exp(-x[i * n2 + n + j]));
                const double gv = g[i * n + j];
                pg[0][i * n2 + j] += gv * gate;
                pg[0][i * n2 + n + j] += gv * value * gate * (1.0 - gate);
            }
    });
}

Tensor layer_norm_rows(const Tensor &x, const Tensor &gain, const Tensor &bias, double eps) {
    require_rank2(x, "layer_norm_rows");
    const std::size_t m = x.rows(), n = x.cols();
    if (gain.rank() != 1 || gain.size() != n || bias.rank() != 1 || bias.size() != n) {
        throw DimensionError("layer_norm_rows: gain/bias must have " + std::to_string(n) + " entries");
    }
    std::vector<double> out(m * n);
    // normalized values and inverse std, kept for backward
    std::vector<double> xhat(m * n), inv_std(m);
    const auto xv = x.data(), gv = gain.data(), bv = bias.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double *r = xv.data() + i * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += r[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (r[j] - mu) * (r[j] - mu);
        var /= static_cast<double>(n);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (r[j] - mu) * inv_std[i];
            out[i * n + j] = xhat[i * n + j] * gv[j] + bv[j];
        }
    }
    return make_op({m, n}, std::move(out), {x, gain, bias},
                   [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                       const Node &self, const double *g, std::span<double *const> pg) {
                       const double *gain = self.parents[1]->data.data();
                       for (std::size_t i = 0; i < m; ++i) {
                           const double *gr = g + i * n;
                           const double *h = xhat.data() + i * n;
                           if (pg[1])
                               for (std::size_t j = 0; j < n; ++j) pg[1][j] += gr[j] * h[j];
                           if (pg[2])
                               for (std::size_t j = 0; j < n; ++j) pg[2][j] += gr[j];
                           if (pg[0]) {
                               double s1 = 0.0, s2 = 0.0;
                               for (std::size_t j = 0; j < n; ++j) {
                                   const double dh = gr[j] * gain[j];
                                   s1 += dh;
                                   s2 += dh * h[j];
                               }
                               const double inv_n = 1.0 / static_cast<double>(n);
                               for (std::size_t j = 0; j < n; ++j) {
                                   const double dh = gr[j] * gain[j];
                                   pg[0][i * n + j] += inv_std[i] * (dh - inv_n * s1 - h[j] * inv_n * s2);
                               }
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// Structural

Tensor concat_cols(const std::vector<Tensor> &parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    for (const auto &p : parts) require_rank2(p, "concat_cols");
    const std::size_t m = parts[0].rows();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto &p : parts) {
        if (p.rows() != m) throw DimensionError("concat_cols: row counts differ");
        widths.push_back(p.cols());
        total += p.cols();
    }
    std::vector<double> out(m * total);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto d = parts[k].data();
        for (std::size_t i = 0; i < m; ++i)
            std::copy_n(d.data() + i * widths[k], widths[k], out.data() + i * total + offset);
        offset += widths[k];
    }
    return make_op({m, total}, std::move(out), parts,
                   [m, total, widths](const Node &, const double *g, std::span<double *const> pg) {
                       std::size_t offset = 0;
                       for (std::size_t k = 0; k < widths.size(); ++k) {
                           if (pg[k]) {
                               for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < widths[k]; ++j)
                                       pg[k][i * widths[k] + j] += g[i * total + offset + j];
                           }
                           offset += widths[k];
                       }
                   });
}

Tensor slice_cols(const Tensor &a, std::size_t begin, std::size_t end) {
    require_rank2(a, "slice_cols");
    const std::size_t m = a.rows(), n = a.cols();
    if (begin >= end || end > n) throw DimensionError("slice_cols: bad range");
    const std::size_t w = end - begin;
    std::vector<double> out(m * w);
    const auto d = a.data();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(d.data() + i * n + begin, w, out.data() + i * w);
    return make_op({m, w}, std::move(out), {a}, [m, n, w, begin](const Node &, const double *g, std::span<double *const> pg) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) pg[0][i * n + begin + j] += g[i * w + j];
    });
}

Tensor slice_rows(const Tensor &a, std::size_t begin, std::size_t end) {
    require_rank2(a, "slice_rows");
    const std::size_t m = a.rows(), n = a.cols();
    if (begin >= end || end > m) throw DimensionError("slice_rows: bad range");
    std::vector<double> out(a.data().begin() + begin * n, a.data().begin() + end * n);
    const std::size_t len = out.size();
    return make_op({end - begin, n}, std::move(out), {a},
                   [len, begin, n](const Node &, const double *g, std::span<double *const> pg) {
                       for (std::size_t i = 0; i < len; ++i) pg[0][begin * n + i] += g[i];
                   });
}

Tensor pad_rows(const Tensor &a, std::size_t before, std::size_t after) {
    require_rank2(a, "pad_rows");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out((before + m + after) * n, 0.0);
    std::copy(a.data().begin(), a.data().end(), out.begin() + before * n);
    return make_op({before + m + after, n}, std::move(out), {a},
                   [m, n, before](const Node &, const double *g, std::span<double *const> pg) {
                       for (std::size_t i = 0; i < m * n; ++i) pg[0][i] += g[before * n + i];
                   });
}

Tensor reshape(const Tensor &a, Shape shape) {
    if (shape_size(shape) != a.size()) {
        throw DimensionError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    const std::size_t n = out.size();
    return make_op(std::move(shape), std::move(out), {a}, [n](const Node &, const double *g, std::span<double *const> pg) {
        for (std::size_t i = 0; i < n; ++i) pg[0][i] += g[i];
    });
}

Tensor mask_rows(const Tensor &a, std::size_t valid) {
    require_rank2(a, "mask_rows");
    if (valid >= a.rows()) return a;
    const std::size_t n = a.cols();
    std::vector<double> out(a.data().begin(), a.data().end());
    std::fill(out.begin() + valid * n, out.end(), 0.0);
    return make_op(a.shape(), std::move(out), {a}, [valid, n](const Node &, const double *g, std::span<double *const> pg) {
        for (std::size_t i = 0; i < valid * n; ++i) pg[0][i] += g[i];
    });
}

Tensor unfold_rows(const Tensor &a, std::size_t kernel, std::size_t stride, std::size_t pad) {
    require_rank2(a, "unfold_rows");
    if (kernel == 0 || stride == 0) throw DimensionError("unfold_rows: kernel and stride must be positive");
    const std::size_t m = a.rows(), n = a.cols();
    if (m + 2 * pad < kernel) throw DimensionError("unfold_rows: input shorter than kernel");
    const std::size_t out_rows = (m + 2 * pad - kernel) / stride + 1;
    const std::size_t width = kernel * n;
    std::vector<double> out(out_rows * width, 0.0);
    const auto d = a.data();
    for (std::size_t r = 0; r < out_rows; ++r)
        for (std::size_t k = 0; k < kernel; ++k) {
            const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(r * stride + k) - static_cast<std::ptrdiff_t>(pad);
            if (src < 0 || src >= static_cast<std::ptrdiff_t>(m)) continue;
            std::copy_n(d.data() + src * n, n, out.data() + r * width + k * n);
        }
    return make_op({out_rows, width}, std::move(out), {a},
                   [=](const Node &, const double *g, std::span<double *const> pg) {
                       for (std::size_t r = 0; r < out_rows; ++r)
                           for (std::size_t k = 0; k < kernel; ++k) {
                               const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(r * stride + k) -
                                                          static_cast<std::ptrdiff_t>(pad);
                               if (src < 0 || src >= static_cast<std::ptrdiff_t>(m)) continue;
                               for (std::size_t j = 0; j < n; ++j) pg[0][src * n + j] += g[r * width + k * n + j];
                           }
                   });
}

Tensor embed_lookup(std::span<const int> ids, const Tensor &table) {
    require_rank2(table, "embed_lookup");
    const std::size_t vocab = table.rows(), d = table.cols();
    if (ids.empty()) throw DimensionError("embed_lookup: empty id list");
    std::vector<double> out(ids.size() * d);
    const auto t = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw DimensionError("embed_lookup: id " + std::to_string(ids[i]) + " outside table of " +
                                 std::to_string(vocab) + " rows");
        }
        std::copy_n(t.data() + ids[i] * d, d, out.data() + i * d);
    }
    std::vector<int> idv(ids.begin(), ids.end());
    return make_op({ids.size(), d}, std::move(out), {table},
                   [idv = std::move(idv), d](const Node &, const double *g, std::span<double *const> pg) {
                       for (std::size_t i = 0; i < idv.size(); ++i)
                           for (std::size_t j = 0; j < d; ++j) pg[0][idv[i] * d + j] += g[i * d + j];
                   });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor &a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    const std::size_t n = a.size();
    return make_op({}, {total}, {a}, [n](const Node &, const double *g, std::span<double *const> pg) {
        for (std::size_t i = 0; i < n; ++i) pg[0][i] += g[0];
    });
}

Tensor mean(const Tensor &a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Tensor pick_sum(const Tensor &a, std::span<const int> index) {
    require_rank2(a, "pick_sum");
    const std::size_t m = a.rows(), n = a.cols();
    if (index.size() != m) throw DimensionError("pick_sum: need one index per row");
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        if (index[i] < 0) continue;
        if (static_cast<std::size_t>(index[i]) >= n) throw DimensionError("pick_sum: index out of range");
        total += a.data()[i * n + index[i]];
    }
    std::vector<int> idx(index.begin(), index.end());
    return make_op({}, {total}, {a}, [idx = std::move(idx), n](const Node &, const double *g, std::span<double *const> pg) {
        for (std::size_t i = 0; i < idx.size(); ++i)
            if (idx[i] >= 0) pg[0][i * n + idx[i]] += g[0];
    });
}

} // namespace convseq
