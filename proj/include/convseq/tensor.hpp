#pragma once

// Dense f64 tensor with a dynamic reverse-mode tape.
//
// A Tensor is a cheap handle to an immutable node. Ops record their inputs
// and a backward closure when any input requires a gradient and grad mode is
// enabled on the calling thread. backward() walks the recorded graph once in
// reverse topological order and returns the gradients of every leaf that
// requires one; parameters shared between threads are never written to
// during backward, so independent graphs may run concurrently.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace convseq {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape &shape);
std::string shape_string(const Shape &shape);

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Propagates the gradient of `self` into its parents. `parent_grads[i]` points
// to a zero-initialised buffer of parents[i]'s size, or is null when that
// parent does not take part in differentiation.
using BackwardFn =
    std::function<void(const Node &self, const double *grad_out, std::span<double *const> parent_grads)>;

struct Node {
    Shape shape;
    std::vector<double> data;
    // Only leaves carry a persistent gradient (see Gradients::accumulate_into_leaves).
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    BackwardFn backward;
};

class Tensor {
  public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows, bool requires_grad = false);
    static Tensor vector(std::initializer_list<double> values, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape &shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const { return data().size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const double> data() const;
    double item() const;
    double at(std::size_t i, std::size_t j) const;
    double operator[](std::size_t flat) const { return data()[flat]; }

    bool requires_grad() const;
    bool is_leaf() const;

    // Leaf-only mutation, used by optimizers and checkpoint loading.
    std::span<double> mutable_data();
    const std::vector<double> &grad() const;
    void zero_grad();

    // Same values, no tape history.
    Tensor detach() const;

    const NodePtr &node() const { return node_; }

  private:
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}
    friend Tensor make_op(Shape, std::vector<double>, std::vector<Tensor>, BackwardFn);
    NodePtr node_;
};

// Builds an op result. The tape entry is recorded only when grad mode is on
// and at least one input requires a gradient.
Tensor make_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs, BackwardFn backward);

bool grad_enabled();

// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard &) = delete;
    NoGradGuard &operator=(const NoGradGuard &) = delete;

  private:
    bool previous_;
};

class Gradients {
  public:
    // Gradient of a leaf; empty span when the leaf was not reached.
    std::span<const double> of(const Tensor &leaf) const;
    bool contains(const Tensor &leaf) const;
    std::size_t nodes_visited() const { return nodes_visited_; }

    // Adds every collected gradient into the leaves' own grad buffers.
    void accumulate_into_leaves() const;

  private:
    friend Gradients backward(const Tensor &loss);
    std::unordered_map<const Node *, std::vector<double>> leaf_grads_;
    std::vector<NodePtr> leaves_;
    std::size_t nodes_visited_ = 0;
};

// Reverse pass from a scalar loss. Throws ContractError for a non-scalar loss
// or one that is not on the tape.
Gradients backward(const Tensor &loss);

// ---------------------------------------------------------------------------
// Primitive ops. Matrices are rank-2 row-major; bias vectors are rank-1.

Tensor matmul(const Tensor &a, const Tensor &b);
// alpha * a * b^T
Tensor matmul_nt(const Tensor &a, const Tensor &b, double alpha = 1.0);
Tensor transpose(const Tensor &a);

Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor mul(const Tensor &a, const Tensor &b);
Tensor scale(const Tensor &a, double factor);
// a[m x n] + bias[n] added to every row; the only broadcast supported.
Tensor add_row(const Tensor &a, const Tensor &bias);

Tensor relu(const Tensor &a);
Tensor sigmoid(const Tensor &a);

// Row-wise softmax with max subtraction. Throws NumericError on NaN.
Tensor softmax_rows(const Tensor &a);
Tensor log_softmax_rows(const Tensor &a);
// Disallowed entries get a -1e30 logit; rows with no allowed entry are zero.
// `allowed` is row-major with the shape of `a`.
Tensor masked_softmax_rows(const Tensor &a, std::span<const std::uint8_t> allowed);

// value_half * sigmoid(gate_half) along the last axis.
Tensor glu(const Tensor &a);

Tensor layer_norm_rows(const Tensor &x, const Tensor &gain, const Tensor &bias, double eps = 1e-5);

Tensor concat_cols(const std::vector<Tensor> &parts);
inline Tensor concat_last_axis(const std::vector<Tensor> &parts) { return concat_cols(parts); }
Tensor slice_cols(const Tensor &a, std::size_t begin, std::size_t end);
Tensor slice_rows(const Tensor &a, std::size_t begin, std::size_t end);
// Zero rows before and after.
Tensor pad_rows(const Tensor &a, std::size_t before, std::size_t after);
Tensor reshape(const Tensor &a, Shape shape);
// Zeroes rows at index >= valid.
Tensor mask_rows(const Tensor &a, std::size_t valid);
// Frames of `kernel` consecutive rows (zero padded by `pad` on both ends)
// taken every `stride` rows, flattened into one output row each.
Tensor unfold_rows(const Tensor &a, std::size_t kernel, std::size_t stride, std::size_t pad);

Tensor embed_lookup(std::span<const int> ids, const Tensor &table);

Tensor sum(const Tensor &a);
Tensor mean(const Tensor &a);
// sum_i a[i, index[i]]; negative indices are skipped.
Tensor pick_sum(const Tensor &a, std::span<const int> index);

} // namespace convseq
