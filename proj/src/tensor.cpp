#include "cadvae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace cadvae {

namespace {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                             " vs " + shape_to_string(b.shape()));
    }
}

// C[m x n] += A[m x k] * B[k x n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// dA[m x k] += G[m x n] * B^T  (rows of G and B are contiguous)
void gemm_nt_acc(const double* g, const double* b, double* da, std::size_t m, std::size_t k,
                 std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g + i * n;
        double* darow = da + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            darow[p] += acc;
        }
    }
}

// dB[k x n] += A^T * G
void gemm_tn_acc(const double* a, const double* g, double* db, std::size_t m, std::size_t k,
                 std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* grow = g + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* dbrow = db + p * n;
            for (std::size_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
        }
    }
}

}  // namespace

std::string shape_to_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data,
                         bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("tensor: " + shape_to_string(shape) + " cannot hold " +
                             std::to_string(data.size()) + " values");
    }
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    if (requires_grad) node->ensure_grad();
    return Tensor(std::move(node));
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    std::vector<double> data(shape_numel(shape), 0.0);
    return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
    std::vector<double> data(shape_numel(shape), value);
    return from_data(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({}, {value}, requires_grad);
}

double Tensor::value() const {
    if (node_->data.size() != 1) {
        throw UsageError("value(): tensor " + shape_to_string(node_->shape) + " is not a scalar");
    }
    return node_->data[0];
}

const std::vector<double>& Tensor::grad() const {
    if (!node_->requires_grad) {
        throw UsageError("grad(): tensor does not require gradients");
    }
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    node_->grad.assign(node_->data.size(), 0.0);
}

Tensor make_op(std::vector<std::size_t> shape, std::vector<double> data,
               std::vector<Tensor> parents, std::function<void(TensorNode&)> backprop) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    bool needs = false;
    for (const Tensor& p : parents) {
        if (p.requires_grad()) {
            needs = true;
            break;
        }
    }
    node->requires_grad = needs;
    if (needs) {
        node->parents.reserve(parents.size());
        for (const Tensor& p : parents) node->parents.push_back(p.node_ptr());
        node->backprop = std::move(backprop);
    }
    return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw ContractError("backward: loss must be scalar, got " + shape_to_string(loss.shape()));
    }
    TensorNode* root = loss.node();
    if (!root->requires_grad) return;  // nothing reachable wants gradients

    // Iterative post-order DFS over grad-requiring nodes.
    std::vector<TensorNode*> topo;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode* parent = node->parents[idx++].get();
            if (parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    // Interior nodes may participate in exactly one backward sweep; leaves
    // (parameters) are shared across graphs and accumulate freely.
    for (TensorNode* n : topo) {
        if (n->backprop && n->consumed) {
            throw UsageError("backward: graph already differentiated");
        }
    }

    root->ensure_grad();
    root->grad[0] += 1.0;

    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorNode* n = *it;
        if (!n->backprop) continue;
        n->ensure_grad();
        n->backprop(*n);
        n->consumed = true;
    }
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        throw DimensionError("matmul: incompatible shapes " + shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    }
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(m * n, 0.0);
    gemm_acc(a.values().data(), b.values().data(), out.data(), m, k, n);

    TensorNode* an = a.node();
    TensorNode* bn = b.node();
    return make_op({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            gemm_nt_acc(self.grad.data(), bn->data.data(), an->grad.data(), m, k, n);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            gemm_tn_acc(an->data.data(), self.grad.data(), bn->grad.data(), m, k, n);
        }
    });
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

Tensor map_unary(Unary kind, const Tensor& a) {
    const std::vector<double>& x = a.values();
    std::vector<double> out(x.size());
    switch (kind) {
        case Unary::relu:
            for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
            break;
        case Unary::sigmoid:
            for (std::size_t i = 0; i < x.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x[i]));
            break;
        case Unary::tanh:
            for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
            break;
        case Unary::exp:
            for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i]);
            break;
        case Unary::log:
            for (std::size_t i = 0; i < x.size(); ++i) {
                if (!(x[i] > 0.0)) {
                    throw DomainError("log: non-positive input " + std::to_string(x[i]) +
                                      " at index " + std::to_string(i));
                }
                out[i] = std::log(x[i]);
            }
            break;
        case Unary::negate:
            for (std::size_t i = 0; i < x.size(); ++i) out[i] = -x[i];
            break;
    }

    TensorNode* an = a.node();
    return make_op(a.shape(), std::move(out), {a}, [an, kind](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const std::vector<double>& x = an->data;
        const std::vector<double>& y = self.data;
        const std::vector<double>& g = self.grad;
        std::vector<double>& dx = an->grad;
        switch (kind) {
            case Unary::relu:
                for (std::size_t i = 0; i < x.size(); ++i)
                    if (x[i] > 0.0) dx[i] += g[i];
                break;
            case Unary::sigmoid:
                for (std::size_t i = 0; i < x.size(); ++i) dx[i] += g[i] * y[i] * (1.0 - y[i]);
                break;
            case Unary::tanh:
                for (std::size_t i = 0; i < x.size(); ++i) dx[i] += g[i] * (1.0 - y[i] * y[i]);
                break;
            case Unary::exp:
                for (std::size_t i = 0; i < x.size(); ++i) dx[i] += g[i] * y[i];
                break;
            case Unary::log:
                for (std::size_t i = 0; i < x.size(); ++i) dx[i] += g[i] / x[i];
                break;
            case Unary::negate:
                for (std::size_t i = 0; i < x.size(); ++i) dx[i] -= g[i];
                break;
        }
    });
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    const std::vector<double>& xa = a.values();
    const std::vector<double>& xb = b.values();
    std::vector<double> out(xa.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xa[i] + xb[i];
    TensorNode* an = a.node();
    TensorNode* bn = b.node();
    return make_op(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    const std::vector<double>& xa = a.values();
    const std::vector<double>& xb = b.values();
    std::vector<double> out(xa.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xa[i] - xb[i];
    TensorNode* an = a.node();
    TensorNode* bn = b.node();
    return make_op(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    const std::vector<double>& xa = a.values();
    const std::vector<double>& xb = b.values();
    std::vector<double> out(xa.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xa[i] * xb[i];
    TensorNode* an = a.node();
    TensorNode* bn = b.node();
    return make_op(a.shape(), std::move(out), {a, b}, [an, bn](TensorNode& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                an->grad[i] += self.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                bn->grad[i] += self.grad[i] * an->data[i];
        }
    });
}

Tensor affine(const Tensor& a, double scale, double shift) {
    const std::vector<double>& x = a.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * x[i] + shift;
    TensorNode* an = a.node();
    return make_op(a.shape(), std::move(out), {a}, [an, scale](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += scale * self.grad[i];
    });
}

Tensor add_row_bias(const Tensor& mat, const Tensor& bias) {
    if (mat.rank() != 2 || bias.rank() != 1 || bias.shape()[0] != mat.shape()[1]) {
        throw DimensionError("add_row_bias: " + shape_to_string(mat.shape()) + " vs " +
                             shape_to_string(bias.shape()));
    }
    const std::size_t m = mat.shape()[0], n = mat.shape()[1];
    std::vector<double> out(mat.values());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bias.values()[j];
    TensorNode* mn = mat.node();
    TensorNode* bn = bias.node();
    return make_op(mat.shape(), std::move(out), {mat, bias}, [mn, bn, m, n](TensorNode& self) {
        if (mn->requires_grad) {
            mn->ensure_grad();
            for (std::size_t i = 0; i < m * n; ++i) mn->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) bn->grad[j] += self.grad[i * n + j];
        }
    });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    const std::vector<double>& x = a.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(x[i], lo), hi);
    TensorNode* an = a.node();
    return make_op(a.shape(), std::move(out), {a}, [an, lo, hi](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (an->data[i] > lo && an->data[i] < hi) an->grad[i] += self.grad[i];
    });
}

Tensor softplus(const Tensor& a) {
    const std::vector<double>& x = a.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = std::max(x[i], 0.0) + std::log1p(std::exp(-std::abs(x[i])));
    TensorNode* an = a.node();
    return make_op(a.shape(), std::move(out), {a}, [an](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            an->grad[i] += self.grad[i] / (1.0 + std::exp(-an->data[i]));
    });
}

Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
    if (shape_numel(shape) != a.size()) {
        throw DimensionError("reshape: " + shape_to_string(a.shape()) + " to " +
                             shape_to_string(shape));
    }
    TensorNode* an = a.node();
    return make_op(std::move(shape), a.values(), {a}, [an](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// reductions and softmax
// ---------------------------------------------------------------------------

Tensor reduce(Reduce kind, const Tensor& a, std::optional<std::size_t> axis) {
    const std::vector<double>& x = a.values();
    if (!axis) {
        double total = 0.0;
        for (double v : x) total += v;
        const double denom = kind == Reduce::mean ? static_cast<double>(x.size()) : 1.0;
        TensorNode* an = a.node();
        return make_op({}, {total / denom}, {a}, [an, denom](TensorNode& self) {
            if (!an->requires_grad) return;
            an->ensure_grad();
            const double g = self.grad[0] / denom;
            for (double& d : an->grad) d += g;
        });
    }

    const std::size_t ax = *axis;
    if (ax >= a.rank()) {
        throw DimensionError("reduce: axis " + std::to_string(ax) + " out of range for " +
                             shape_to_string(a.shape()));
    }
    std::size_t outer = 1, inner = 1;
    const std::size_t extent = a.shape()[ax];
    for (std::size_t i = 0; i < ax; ++i) outer *= a.shape()[i];
    for (std::size_t i = ax + 1; i < a.rank(); ++i) inner *= a.shape()[i];

    std::vector<std::size_t> out_shape;
    for (std::size_t i = 0; i < a.rank(); ++i)
        if (i != ax) out_shape.push_back(a.shape()[i]);

    const double denom = kind == Reduce::mean ? static_cast<double>(extent) : 1.0;
    std::vector<double> out(outer * inner, 0.0);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t e = 0; e < extent; ++e) {
            const double* src = x.data() + (o * extent + e) * inner;
            double* dst = out.data() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    for (double& v : out) v /= denom;

    TensorNode* an = a.node();
    return make_op(std::move(out_shape), std::move(out), {a},
                   [an, outer, extent, inner, denom](TensorNode& self) {
                       if (!an->requires_grad) return;
                       an->ensure_grad();
                       for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t e = 0; e < extent; ++e) {
                               const double* g = self.grad.data() + o * inner;
                               double* dst = an->grad.data() + (o * extent + e) * inner;
                               for (std::size_t i = 0; i < inner; ++i) dst[i] += g[i] / denom;
                           }
                   });
}

Tensor softmax_rows(const Tensor& logits) {
    if (logits.rank() < 1) {
        throw DimensionError("softmax: rank-0 input");
    }
    const std::size_t c = logits.shape().back();
    const std::size_t rows = logits.size() / c;
    const std::vector<double>& x = logits.values();
    for (double v : x) {
        if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
    }
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data() + r * c;
        double* o = out.data() + r * c;
        double mx = in[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        for (std::size_t j = 0; j < c; ++j) o[j] /= sum;
    }
    TensorNode* ln = logits.node();
    return make_op(logits.shape(), std::move(out), {logits}, [ln, rows, c](TensorNode& self) {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        // exact Jacobian-vector product: dl_j = p_j * (g_j - sum_c g_c p_c)
        for (std::size_t r = 0; r < rows; ++r) {
            const double* p = self.data.data() + r * c;
            const double* g = self.grad.data() + r * c;
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += g[j] * p[j];
            double* dl = ln->grad.data() + r * c;
            for (std::size_t j = 0; j < c; ++j) dl[j] += p[j] * (g[j] - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// concat / split
// ---------------------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw UsageError("concat: no parts");
    const std::size_t rank = parts[0].rank();
    if (axis >= rank) {
        throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for rank " +
                             std::to_string(rank));
    }
    std::size_t axis_total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != rank) throw DimensionError("concat: rank mismatch");
        for (std::size_t i = 0; i < rank; ++i) {
            if (i != axis && p.shape()[i] != parts[0].shape()[i]) {
                throw DimensionError("concat: shape mismatch " + shape_to_string(p.shape()) +
                                     " vs " + shape_to_string(parts[0].shape()));
            }
        }
        axis_total += p.shape()[axis];
    }
    std::vector<std::size_t> out_shape = parts[0].shape();
    out_shape[axis] = axis_total;

    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= out_shape[i];
    for (std::size_t i = axis + 1; i < rank; ++i) inner *= out_shape[i];

    std::vector<double> out(outer * axis_total * inner);
    std::size_t offset = 0;
    for (const Tensor& p : parts) {
        const std::size_t ext = p.shape()[axis];
        const double* src = p.values().data();
        for (std::size_t o = 0; o < outer; ++o) {
            double* dst = out.data() + (o * axis_total + offset) * inner;
            std::copy(src + o * ext * inner, src + (o + 1) * ext * inner, dst);
        }
        offset += ext;
    }

    std::vector<std::size_t> exts(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) exts[i] = parts[i].shape()[axis];
    std::vector<TensorNode*> pnodes(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) pnodes[i] = parts[i].node();

    return make_op(std::move(out_shape), std::move(out), parts,
                   [pnodes, exts, outer, inner, axis_total](TensorNode& self) {
                       std::size_t offset = 0;
                       for (std::size_t pi = 0; pi < pnodes.size(); ++pi) {
                           TensorNode* pn = pnodes[pi];
                           const std::size_t ext = exts[pi];
                           if (pn->requires_grad) {
                               pn->ensure_grad();
                               for (std::size_t o = 0; o < outer; ++o) {
                                   const double* g =
                                       self.grad.data() + (o * axis_total + offset) * inner;
                                   double* dst = pn->grad.data() + o * ext * inner;
                                   for (std::size_t i = 0; i < ext * inner; ++i) dst[i] += g[i];
                               }
                           }
                           offset += ext;
                       }
                   });
}

std::vector<Tensor> split(const Tensor& a, const std::vector<std::size_t>& sizes,
                          std::size_t axis) {
    if (axis >= a.rank()) {
        throw DimensionError("split: axis " + std::to_string(axis) + " out of range for " +
                             shape_to_string(a.shape()));
    }
    std::size_t total = 0;
    for (std::size_t s : sizes) total += s;
    if (total != a.shape()[axis]) {
        throw DimensionError("split: sizes sum to " + std::to_string(total) + ", axis extent is " +
                             std::to_string(a.shape()[axis]));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= a.shape()[i];
    for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.shape()[i];
    const std::size_t axis_total = a.shape()[axis];

    std::vector<Tensor> outs;
    outs.reserve(sizes.size());
    std::size_t offset = 0;
    for (std::size_t ext : sizes) {
        std::vector<std::size_t> shape = a.shape();
        shape[axis] = ext;
        std::vector<double> data(outer * ext * inner);
        for (std::size_t o = 0; o < outer; ++o) {
            const double* src = a.values().data() + (o * axis_total + offset) * inner;
            std::copy(src, src + ext * inner, data.data() + o * ext * inner);
        }
        TensorNode* an = a.node();
        const std::size_t off = offset;
        outs.push_back(make_op(std::move(shape), std::move(data), {a},
                               [an, off, ext, outer, inner, axis_total](TensorNode& self) {
                                   if (!an->requires_grad) return;
                                   an->ensure_grad();
                                   for (std::size_t o = 0; o < outer; ++o) {
                                       const double* g = self.grad.data() + o * ext * inner;
                                       double* dst =
                                           an->grad.data() + (o * axis_total + off) * inner;
                                       for (std::size_t i = 0; i < ext * inner; ++i)
                                           dst[i] += g[i];
                                   }
                               }));
        offset += ext;
    }
    return outs;
}

Tensor stop_gradient(const Tensor& a) {
    return Tensor::from_data(a.shape(), a.values(), false);
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad) {
    if (x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1]) {
        throw DimensionError("conv2d: " + shape_to_string(x.shape()) + " with weights " +
                             shape_to_string(w.shape()));
    }
    const std::size_t B = x.shape()[0], Cin = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::size_t Cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    if (b.rank() != 1 || b.shape()[0] != Cout) {
        throw DimensionError("conv2d: bias " + shape_to_string(b.shape()));
    }
    const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
    const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;

    std::vector<double> out(B * Cout * Ho * Wo, 0.0);
    const double* xd = x.values().data();
    const double* wd = w.values().data();
    const double* bd = b.values().data();
    for (std::size_t n = 0; n < B; ++n) {
        for (std::size_t co = 0; co < Cout; ++co) {
            double* orow = out.data() + (n * Cout + co) * Ho * Wo;
            for (std::size_t oh = 0; oh < Ho; ++oh)
                for (std::size_t ow = 0; ow < Wo; ++ow) {
                    double acc = bd[co];
                    for (std::size_t ci = 0; ci < Cin; ++ci) {
                        const double* xplane = xd + (n * Cin + ci) * H * W;
                        const double* wplane = wd + (co * Cin + ci) * kh * kw;
                        for (std::size_t r = 0; r < kh; ++r) {
                            const std::ptrdiff_t ih =
                                static_cast<std::ptrdiff_t>(oh * stride + r) -
                                static_cast<std::ptrdiff_t>(pad);
                            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                            for (std::size_t c = 0; c < kw; ++c) {
                                const std::ptrdiff_t iw =
                                    static_cast<std::ptrdiff_t>(ow * stride + c) -
                                    static_cast<std::ptrdiff_t>(pad);
                                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                                acc += xplane[ih * W + iw] * wplane[r * kw + c];
                            }
                        }
                    }
                    orow[oh * Wo + ow] = acc;
                }
        }
    }

    TensorNode* xn = x.node();
    TensorNode* wn = w.node();
    TensorNode* bn = b.node();
    return make_op(
        {B, Cout, Ho, Wo}, std::move(out), {x, w, b},
        [xn, wn, bn, B, Cin, H, W, Cout, kh, kw, Ho, Wo, stride, pad](TensorNode& self) {
            const double* g = self.grad.data();
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t n = 0; n < B; ++n)
                    for (std::size_t co = 0; co < Cout; ++co) {
                        const double* grow = g + (n * Cout + co) * Ho * Wo;
                        double acc = 0.0;
                        for (std::size_t i = 0; i < Ho * Wo; ++i) acc += grow[i];
                        bn->grad[co] += acc;
                    }
            }
            const bool need_x = xn->requires_grad;
            const bool need_w = wn->requires_grad;
            if (!need_x && !need_w) return;
            if (need_x) xn->ensure_grad();
            if (need_w) wn->ensure_grad();
            for (std::size_t n = 0; n < B; ++n)
                for (std::size_t co = 0; co < Cout; ++co) {
                    const double* grow = g + (n * Cout + co) * Ho * Wo;
                    for (std::size_t oh = 0; oh < Ho; ++oh)
                        for (std::size_t ow = 0; ow < Wo; ++ow) {
                            const double gv = grow[oh * Wo + ow];
                            if (gv == 0.0) continue;
                            for (std::size_t ci = 0; ci < Cin; ++ci) {
                                const double* xplane = xn->data.data() + (n * Cin + ci) * H * W;
                                const double* wplane =
                                    wn->data.data() + (co * Cin + ci) * kh * kw;
                                double* dxplane =
                                    need_x ? xn->grad.data() + (n * Cin + ci) * H * W : nullptr;
                                double* dwplane =
                                    need_w ? wn->grad.data() + (co * Cin + ci) * kh * kw
                                           : nullptr;
                                for (std::size_t r = 0; r < kh; ++r) {
                                    const std::ptrdiff_t ih =
                                        static_cast<std::ptrdiff_t>(oh * stride + r) -
                                        static_cast<std::ptrdiff_t>(pad);
                                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                                    for (std::size_t c = 0; c < kw; ++c) {
                                        const std::ptrdiff_t iw =
                                            static_cast<std::ptrdiff_t>(ow * stride + c) -
                                            static_cast<std::ptrdiff_t>(pad);
                                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W))
                                            continue;
                                        if (need_x)
                                            dxplane[ih * W + iw] += gv * wplane[r * kw + c];
                                        if (need_w)
                                            dwplane[r * kw + c] += gv * xplane[ih * W + iw];
                                    }
                                }
                            }
                        }
                }
        });
}

Tensor conv2d_transpose(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                        std::size_t pad, std::size_t out_pad) {
    if (x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[0]) {
        throw DimensionError("conv2d_transpose: " + shape_to_string(x.shape()) + " with weights " +
                             shape_to_string(w.shape()));
    }
    const std::size_t B = x.shape()[0], Cin = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::size_t Cout = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
    if (b.rank() != 1 || b.shape()[0] != Cout) {
        throw DimensionError("conv2d_transpose: bias " + shape_to_string(b.shape()));
    }
    const std::size_t Ho = (H - 1) * stride + kh + out_pad - 2 * pad;
    const std::size_t Wo = (W - 1) * stride + kw + out_pad - 2 * pad;

    std::vector<double> out(B * Cout * Ho * Wo, 0.0);
    const double* xd = x.values().data();
    const double* wd = w.values().data();
    for (std::size_t n = 0; n < B; ++n) {
        for (std::size_t ci = 0; ci < Cin; ++ci) {
            const double* xplane = xd + (n * Cin + ci) * H * W;
            for (std::size_t ih = 0; ih < H; ++ih)
                for (std::size_t iw = 0; iw < W; ++iw) {
                    const double xv = xplane[ih * W + iw];
                    if (xv == 0.0) continue;
                    for (std::size_t co = 0; co < Cout; ++co) {
                        const double* wplane = wd + (ci * Cout + co) * kh * kw;
                        double* oplane = out.data() + (n * Cout + co) * Ho * Wo;
                        for (std::size_t r = 0; r < kh; ++r) {
                            const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>(ih * stride + r) -
                                                      static_cast<std::ptrdiff_t>(pad);
                            if (oh < 0 || oh >= static_cast<std::ptrdiff_t>(Ho)) continue;
                            for (std::size_t c = 0; c < kw; ++c) {
                                const std::ptrdiff_t ow =
                                    static_cast<std::ptrdiff_t>(iw * stride + c) -
                                    static_cast<std::ptrdiff_t>(pad);
                                if (ow < 0 || ow >= static_cast<std::ptrdiff_t>(Wo)) continue;
                                oplane[oh * Wo + ow] += xv * wplane[r * kw + c];
                            }
                        }
                    }
                }
        }
    }
    const double* bd = b.values().data();
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t co = 0; co < Cout; ++co) {
            double* oplane = out.data() + (n * Cout + co) * Ho * Wo;
            for (std::size_t i = 0; i < Ho * Wo; ++i) oplane[i] += bd[co];
        }

    TensorNode* xn = x.node();
    TensorNode* wn = w.node();
    TensorNode* bn = b.node();
    return make_op(
        {B, Cout, Ho, Wo}, std::move(out), {x, w, b},
        [xn, wn, bn, B, Cin, H, W, Cout, kh, kw, Ho, Wo, stride, pad](TensorNode& self) {
            const double* g = self.grad.data();
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t n = 0; n < B; ++n)
                    for (std::size_t co = 0; co < Cout; ++co) {
                        const double* grow = g + (n * Cout + co) * Ho * Wo;
                        double acc = 0.0;
                        for (std::size_t i = 0; i < Ho * Wo; ++i) acc += grow[i];
                        bn->grad[co] += acc;
                    }
            }
            const bool need_x = xn->requires_grad;
            const bool need_w = wn->requires_grad;
            if (!need_x && !need_w) return;
            if (need_x) xn->ensure_grad();
            if (need_w) wn->ensure_grad();
            for (std::size_t n = 0; n < B; ++n)
                for (std::size_t ci = 0; ci < Cin; ++ci) {
                    const double* xplane = xn->data.data() + (n * Cin + ci) * H * W;
                    double* dxplane = need_x ? xn->grad.data() + (n * Cin + ci) * H * W : nullptr;
                    for (std::size_t ih = 0; ih < H; ++ih)
                        for (std::size_t iw = 0; iw < W; ++iw) {
                            const double xv = xplane[ih * W + iw];
                            double dx_acc = 0.0;
                            for (std::size_t co = 0; co < Cout; ++co) {
                                const double* wplane =
                                    wn->data.data() + (ci * Cout + co) * kh * kw;
                                double* dwplane =
                                    need_w ? wn->grad.data() + (ci * Cout + co) * kh * kw
                                           : nullptr;
                                const double* gplane = g + (n * Cout + co) * Ho * Wo;
                                for (std::size_t r = 0; r < kh; ++r) {
                                    const std::ptrdiff_t oh =
                                        static_cast<std::ptrdiff_t>(ih * stride + r) -
                                        static_cast<std::ptrdiff_t>(pad);
                                    if (oh < 0 || oh >= static_cast<std::ptrdiff_t>(Ho)) continue;
                                    for (std::size_t c = 0; c < kw; ++c) {
                                        const std::ptrdiff_t ow =
                                            static_cast<std::ptrdiff_t>(iw * stride + c) -
                                            static_cast<std::ptrdiff_t>(pad);
                                        if (ow < 0 || ow >= static_cast<std::ptrdiff_t>(Wo))
                                            continue;
                                        const double gv = gplane[oh * Wo + ow];
                                        if (need_x) dx_acc += gv * wplane[r * kw + c];
                                        if (need_w) dwplane[r * kw + c] += gv * xv;
                                    }
                                }
                            }
                            if (need_x) dxplane[ih * W + iw] += dx_acc;
                        }
                }
        });
}

// ---------------------------------------------------------------------------
// pairwise-batch plumbing
// ---------------------------------------------------------------------------

Tensor tile_rows(const Tensor& a, std::size_t times) {
    if (a.rank() != 2) throw DimensionError("tile_rows: expects a matrix");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(times * r * c);
    for (std::size_t t = 0; t < times; ++t)
        std::copy(a.values().begin(), a.values().end(), out.begin() + t * r * c);
    TensorNode* an = a.node();
    return make_op({times * r, c}, std::move(out), {a}, [an, times, r, c](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t t = 0; t < times; ++t) {
            const double* g = self.grad.data() + t * r * c;
            for (std::size_t i = 0; i < r * c; ++i) an->grad[i] += g[i];
        }
    });
}

Tensor repeat_rows_each(const Tensor& a, std::size_t times) {
    if (a.rank() != 2) throw DimensionError("repeat_rows_each: expects a matrix");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(times * r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t t = 0; t < times; ++t)
            std::copy(a.values().begin() + i * c, a.values().begin() + (i + 1) * c,
                      out.begin() + (i * times + t) * c);
    TensorNode* an = a.node();
    return make_op({times * r, c}, std::move(out), {a}, [an, times, r, c](TensorNode& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t t = 0; t < times; ++t) {
                const double* g = self.grad.data() + (i * times + t) * c;
                double* dst = an->grad.data() + i * c;
                for (std::size_t j = 0; j < c; ++j) dst[j] += g[j];
            }
    });
}

Tensor mean_rows_grouped(const Tensor& a, const std::vector<std::vector<std::uint32_t>>& groups) {
    if (a.rank() != 2) throw DimensionError("mean_rows_grouped: expects a matrix");
    const std::size_t rows = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(groups.size() * c, 0.0);
    for (std::size_t k = 0; k < groups.size(); ++k) {
        if (groups[k].empty()) throw UsageError("mean_rows_grouped: empty group");
        double* dst = out.data() + k * c;
        for (std::uint32_t ri : groups[k]) {
            if (ri >= rows) throw DimensionError("mean_rows_grouped: row index out of range");
            const double* src = a.values().data() + static_cast<std::size_t>(ri) * c;
            for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
        }
        const double inv = 1.0 / static_cast<double>(groups[k].size());
        for (std::size_t j = 0; j < c; ++j) dst[j] *= inv;
    }
    TensorNode* an = a.node();
    auto groups_copy = groups;
    return make_op({groups.size(), c}, std::move(out), {a},
                   [an, groups_copy, c](TensorNode& self) {
                       if (!an->requires_grad) return;
                       an->ensure_grad();
                       for (std::size_t k = 0; k < groups_copy.size(); ++k) {
                           const double inv = 1.0 / static_cast<double>(groups_copy[k].size());
                           const double* g = self.grad.data() + k * c;
                           for (std::uint32_t ri : groups_copy[k]) {
                               double* dst = an->grad.data() + static_cast<std::size_t>(ri) * c;
                               for (std::size_t j = 0; j < c; ++j) dst[j] += inv * g[j];
                           }
                       }
                   });
}

// ---------------------------------------------------------------------------
// fused loss kernels
// ---------------------------------------------------------------------------

Tensor nll_from_probs(const Tensor& probs, const std::vector<int>& labels) {
    if (probs.rank() != 2 || probs.shape()[0] != labels.size()) {
        throw DimensionError("nll_from_probs: " + shape_to_string(probs.shape()) + " with " +
                             std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = probs.shape()[0], c = probs.shape()[1];
    constexpr double eps = 1e-12;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= c) {
            throw LabelError("label " + std::to_string(y) + " out of range [0, " +
                             std::to_string(c) + ")");
        }
        total -= std::log(probs.values()[i * c + y] + eps);
    }
    TensorNode* pn = probs.node();
    auto labels_copy = labels;
    return make_op({}, {total / static_cast<double>(n)}, {probs},
                   [pn, labels_copy, n, c](TensorNode& self) {
                       if (!pn->requires_grad) return;
                       pn->ensure_grad();
                       const double g = self.grad[0] / static_cast<double>(n);
                       for (std::size_t i = 0; i < n; ++i) {
                           const std::size_t idx = i * c + labels_copy[i];
                           pn->grad[idx] -= g / (pn->data[idx] + eps);
                       }
                   });
}

Tensor bernoulli_nll(const Tensor& target, const Tensor& mean) {
    check_same_shape(target, mean, "bernoulli_nll");
    constexpr double lo = 1e-7, hi = 1.0 - 1e-7;
    const std::vector<double>& x = target.values();
    const std::vector<double>& m = mean.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double mc = std::min(std::max(m[i], lo), hi);
        out[i] = -(x[i] * std::log(mc) + (1.0 - x[i]) * std::log(1.0 - mc));
    }
    TensorNode* tn = target.node();
    TensorNode* mn = mean.node();
    return make_op(target.shape(), std::move(out), {target, mean}, [tn, mn](TensorNode& self) {
        if (!mn->requires_grad) return;
        mn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double mv = mn->data[i];
            if (mv <= lo || mv >= hi) continue;  // clamped region has zero slope
            mn->grad[i] += self.grad[i] * (-tn->data[i] / mv + (1.0 - tn->data[i]) / (1.0 - mv));
        }
    });
}

}  // namespace cadvae
