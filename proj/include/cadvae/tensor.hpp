#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cadvae/errors.hpp"

namespace cadvae {

// Dense n-dimensional array of doubles participating in reverse-mode
// differentiation. A Tensor is a cheap handle onto a graph node; values are
// immutable after construction and gradient accumulation during backward()
// is the only mutation a node ever sees.
//
// The graph is define-by-run: every op call appends a node holding the
// parents it needs and a closure that routes gradients to them. Nodes whose
// inputs do not require gradients store neither parents nor a closure, so
// evaluation-only code pays almost nothing for the machinery.

enum class Unary { relu, sigmoid, tanh, exp, log, negate };
enum class Reduce { sum, mean };

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first accumulation
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backprop;  // reads this->grad, adds into parents
    bool consumed = false;  // interior node already swept by a backward pass

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

class Tensor {
  public:
    Tensor() = default;

    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->data.size(); }
    const std::vector<double>& values() const { return node_->data; }
    double value() const;  // rank-0 / single-element tensors only
    bool requires_grad() const { return node_->requires_grad; }

    // Accumulated gradient; all-zeros if backward never reached this tensor.
    const std::vector<double>& grad() const;
    void zero_grad();

    TensorNode* node() const { return node_.get(); }
    NodePtr node_ptr() const { return node_; }

  private:
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}
    NodePtr node_;

    friend Tensor make_op(std::vector<std::size_t> shape, std::vector<double> data,
                          std::vector<Tensor> parents,
                          std::function<void(TensorNode&)> backprop);
};

// Internal factory used by every op implementation.
Tensor make_op(std::vector<std::size_t> shape, std::vector<double> data,
               std::vector<Tensor> parents, std::function<void(TensorNode&)> backprop);

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor map_unary(Unary kind, const Tensor& a);
Tensor reduce(Reduce kind, const Tensor& a, std::optional<std::size_t> axis = std::nullopt);
Tensor softmax_rows(const Tensor& logits);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
std::vector<Tensor> split(const Tensor& a, const std::vector<std::size_t>& sizes, std::size_t axis);
Tensor stop_gradient(const Tensor& a);
void backward(const Tensor& loss);

// Elementwise / structural helpers used throughout the networks and losses.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor affine(const Tensor& a, double scale, double shift);  // scale*a + shift
Tensor add_row_bias(const Tensor& mat, const Tensor& bias);  // [m x n] + [n]
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor softplus(const Tensor& a);
Tensor reshape(const Tensor& a, std::vector<std::size_t> shape);

// Convolutions for the desk-scale encoder/decoder. Weight layouts:
//   conv2d           x:[B,Cin,H,W]  w:[Cout,Cin,kh,kw]  b:[Cout]
//   conv2d_transpose x:[B,Cin,H,W]  w:[Cin,Cout,kh,kw]  b:[Cout]
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad);
Tensor conv2d_transpose(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                        std::size_t pad, std::size_t out_pad);

// Pairwise-batch plumbing for the minibatch entropy estimators.
Tensor tile_rows(const Tensor& a, std::size_t times);        // block-repeat whole matrix
Tensor repeat_rows_each(const Tensor& a, std::size_t times); // repeat each row consecutively
// out[k] = mean of rows listed in groups[k]; every group must be non-empty.
Tensor mean_rows_grouped(const Tensor& a, const std::vector<std::vector<std::uint32_t>>& groups);

// Fused loss kernels.
// Mean over rows of -log(p[i, labels[i]] + 1e-12).
Tensor nll_from_probs(const Tensor& probs, const std::vector<int>& labels);
// Elementwise -[x log m + (1-x) log(1-m)] with m clamped to [1e-7, 1-1e-7].
// Gradients flow to `mean` only; `target` is treated as data.
Tensor bernoulli_nll(const Tensor& target, const Tensor& mean);

std::string shape_to_string(const std::vector<std::size_t>& shape);

}  // namespace cadvae
