#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fnetar/common.hpp"

namespace fnetar {

class Tape;

// ---------------------------------------------------------------------------
// Tensor: dense row-major array of 64-bit floats. Copies share the underlying
// buffer (value semantics over a shared store, like most tensor libraries).
// Gradients live in a separate same-shape buffer allocated when requires_grad
// is set. `node` ties the tensor to the active recording tape.
// ---------------------------------------------------------------------------

class Tensor {
public:
    Tensor() = default;

    /// Zero-filled tensor of the given shape.
    explicit Tensor(std::vector<int> shape);

    /// Tensor adopting the given row-major data. Throws ShapeError if the
    /// element count does not match the shape product.
    Tensor(std::vector<int> shape, std::vector<double> data);

    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, double value);

    /// Entries drawn i.i.d. N(mean, stddev^2) from the given generator.
    static Tensor randn(std::vector<int> shape, Rng& rng, double mean = 0.0, double stddev = 1.0);

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int extent(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
    std::size_t numel() const { return data_ ? data_->size() : 0; }
    bool empty() const { return !data_ || data_->empty(); }

    const std::vector<double>& data() const { return *data_; }
    std::vector<double>& mutable_data() { return *data_; }
    double at(std::size_t i) const { return (*data_)[i]; }
    double at2(int r, int c) const {
        return (*data_)[static_cast<std::size_t>(r) * static_cast<std::size_t>(shape_[1]) + static_cast<std::size_t>(c)];
    }

    double item() const;  ///< value of a one-element tensor; RankError otherwise

    bool requires_grad() const { return requires_grad_; }
    /// Turning grad on allocates a zero grad buffer; turning it off drops it.
    Tensor& set_requires_grad(bool on);

    bool has_grad() const { return grad_ != nullptr; }
    const std::vector<double>& grad() const;
    std::vector<double>& mutable_grad();
    void zero_grad();

    /// Same data (copied), no grad, no tape provenance.
    Tensor detach() const;

    /// Deep copy of data (and grad if present).
    Tensor clone() const;

    std::string shape_str() const;

    // Tape bookkeeping (managed by the ops / the tape itself).
    int node() const { return node_; }
    std::uint64_t tape_id() const { return tape_id_; }
    void bind_node(int node, std::uint64_t tape_id) const {
        node_ = node;
        tape_id_ = tape_id;
    }

    std::shared_ptr<std::vector<double>> data_ptr() const { return data_; }
    std::shared_ptr<std::vector<double>> grad_ptr() const { return grad_; }

private:
    std::vector<int> shape_;
    std::shared_ptr<std::vector<double>> data_;
    bool requires_grad_ = false;
    std::shared_ptr<std::vector<double>> grad_;
    // Provenance is logically part of recording, not of the value, hence mutable.
    mutable int node_ = -1;
    mutable std::uint64_t tape_id_ = 0;
};

// ---------------------------------------------------------------------------
// Tape: ordered record of executed operations. Each node stores its input
// node ids (inputs always precede consumers), the output size, and a backward
// rule that routes the output adjoint into the input adjoints. Leaf nodes
// flush their adjoint into the owning tensor's grad buffer.
// ---------------------------------------------------------------------------

class Tape {
public:
    /// out_adj: adjoint of this node's output. in_adj: one slot per recorded
    /// input, nullptr where that input is untracked.
    using BackwardFn =
        std::function<void(const std::vector<double>& out_adj, const std::vector<std::vector<double>*>& in_adj)>;

    Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::uint64_t id() const { return id_; }
    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    /// Node id for `t` on this tape: its existing node, a fresh leaf node if
    /// the tensor requires grad, or -1 if untracked.
    int track(const Tensor& t);

    /// Append an interior node. Returns its id and binds it to `out`.
    int record(const Tensor& out, std::vector<int> inputs, BackwardFn fn);

    /// Reverse sweep from `loss` (a scalar recorded on this tape). Populates
    /// the grad buffers of every tracked leaf. A tape can be swept only once.
    void backward(const Tensor& loss);

    /// Input ids per node, for structural inspection.
    std::vector<std::vector<int>> structure() const;

    static Tape* active();

private:
    friend class TapeScope;

    struct Node {
        std::vector<int> inputs;
        std::size_t size = 0;
        BackwardFn backward;                           // empty for leaves
        std::shared_ptr<std::vector<double>> leaf_grad;  // set for leaves
    };

    std::uint64_t id_;
    std::vector<Node> nodes_;
    bool consumed_ = false;
};

/// RAII activation of a tape on the current thread. Ops record onto the
/// innermost active tape; with none active they run purely numerically.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

// ---------------------------------------------------------------------------
// Operations. All differentiable; each records onto the active tape when any
// input is tracked. Forward results are checked for NaN/Inf where an op can
// overflow: a non-finite value raises NumericError instead of propagating.
// ---------------------------------------------------------------------------

/// Standard matrix product [m x k] . [k x n] -> [m x n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Elementwise sum. Also accepts [m x n] + [n] (bias row broadcast over rows).
Tensor add(const Tensor& a, const Tensor& b);

/// Elementwise product of same-shape tensors.
Tensor multiply(const Tensor& a, const Tensor& b);

/// Scale by a constant.
Tensor multiply(const Tensor& a, double c);

Tensor relu(const Tensor& x);

/// Sum of all entries -> scalar.
Tensor sum(const Tensor& x);

/// Row-stable softmax along `axis` (rank 1 or 2). -inf entries are allowed
/// and map to exactly 0; a row that is entirely -inf raises DegenerateError.
Tensor softmax(const Tensor& x, int axis);

/// Per-position normalization over the last axis with affine gain/bias.
/// Variance epsilon is fixed at 1e-5.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

/// Mean over rows of -log softmax(logits)[target]. logits: [t x v].
Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int>& targets);

/// Concatenate rank-1 or rank-2 tensors along `axis`.
Tensor concat(const Tensor& a, const Tensor& b, int axis);

/// Contiguous slice [start, start+len) along `axis`.
Tensor slice(const Tensor& x, int axis, int start, int len);

/// 2-D transpose.
Tensor transpose(const Tensor& x);

/// Gather rows of `table` ([v x d]) by id; backward scatter-adds.
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);

/// Replace entries where keep == 0 with `value` (typically -inf ahead of a
/// softmax). Backward passes gradient only through kept entries. The output
/// is exempt from the finite-value check.
Tensor masked_fill(const Tensor& x, const Tensor& keep, double value);

/// Sweep the active tape from `loss`, populating leaf gradients.
void backward(const Tensor& loss);

/// Max over coordinates of |analytic - central difference| / (|analytic| + 1e-8)
/// for a scalar-valued function of one tensor.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5);

constexpr double kLayerNormEps = 1e-5;

}  // namespace fnetar
