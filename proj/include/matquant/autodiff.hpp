#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "matquant/tensor.hpp"

namespace matquant {

class Tape;

// Handle to a tape node. Cheap to copy; valid for the lifetime of the tape.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Tensor& value() const;
    const std::vector<Index>& shape() const { return value().shape(); }
};

// Reverse-mode tape. Ops evaluate eagerly; each node keeps a closure that
// scatters its upstream gradient into its inputs. Creation order is a
// topological order, so backward() is a single reverse sweep that touches
// every reachable node exactly once. One tape per training step.
class Tape {
  public:
    using BackwardFn = std::function<void(Tape&, const Tensor& upstream)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    Var constant(Tensor value) { return push("constant", std::move(value), nullptr); }

    // Leaf bound to a Param: after backward() the node's gradient is
    // accumulated into param.grad.
    Var leaf(Param& param) {
        Var v = push("leaf", param.value, nullptr);
        if (grad_enabled_) bindings_.push_back({v.id, &param});
        return v;
    }

    // Registers a node. `name` is used in numeric error reports only.
    Var push(const char* name, Tensor value, BackwardFn fn) {
        if (!value.all_finite())
            throw NumericError(std::string("non-finite values produced by op '") + name + "'");
        nodes_.push_back(Node{std::move(value), grad_enabled_ ? std::move(fn) : nullptr});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }

    // Gradient of the last backward() target w.r.t. node `id`; zeros if the
    // node was not reached.
    Tensor grad(const Var& v) const {
        const Tensor& g = grads_[static_cast<size_t>(v.id)];
        if (g.numel() == 0) return Tensor::zeros(value(v.id).shape());
        return g;
    }

    void accum_grad(int id, const Tensor& g) {
        Tensor& slot = grads_[static_cast<size_t>(id)];
        if (slot.numel() == 0)
            slot = g;
        else
            slot.array() += g.array();
    }

    // Reverse sweep from a scalar node. Accumulates into bound Params.
    void backward(const Var& loss) {
        if (!grad_enabled_) throw ContractError("backward on a grad-disabled tape");
        if (loss.value().numel() != 1) throw ContractError("backward target must be scalar");
        grads_.assign(nodes_.size(), Tensor());
        grads_[static_cast<size_t>(loss.id)] = Tensor::full(loss.value().shape(), 1.0);
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            const Tensor& g = grads_[static_cast<size_t>(id)];
            if (g.numel() == 0 || !n.backward) continue;
            n.backward(*this, g);
        }
        for (auto& [id, param] : bindings_) {
            const Tensor& g = grads_[static_cast<size_t>(id)];
            if (g.numel() != 0) param->grad.array() += g.array();
        }
    }

    size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor value;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::vector<std::pair<int, Param*>> bindings_;
    bool grad_enabled_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

// ---- elementwise and broadcast arithmetic ----

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var square(Var a);
Var scale(Var a, Real k);
Var add_scalar(Var a, Real k);

// [rows, d] (+|*|/) [d], broadcast across rows.
Var add_rowvec(Var m, Var v);
Var mul_rowvec(Var m, Var v);
Var div_rowvec(Var m, Var v);
// [n, cols] * [n], broadcast across columns (scales row i by v[i]).
Var mul_colvec(Var m, Var v);

// Floor at `lo`; gradient passes only where the input is above `lo`.
Var clamp_min(Var a, Real lo);

// ---- linear algebra ----

Var matmul(Var a, Var b);
Var transpose(Var a);
Var reshape(Var a, std::vector<Index> shape);
// View of rows [start, start+count) of the flattened [rows, last_dim] matrix.
Var rows(Var a, Index start, Index count);
// Stacks same-width pieces vertically.
Var concat_rows(const std::vector<Var>& parts);
Var gather_rows(Var table, const std::vector<int>& idx);

// ---- reductions and nonlinearities ----

Var sum(Var a);
Var mean(Var a);
Var silu(Var a);
Var rmsnorm(Var x, Var gain, Real eps = 1e-6);
Var softmax_rows(Var a);
// Softmax over columns 0..i of row i; upper triangle is exactly zero.
Var causal_softmax(Var a);

// Mean cross-entropy of logits [n, v] against integer targets.
Var softmax_xent(Var logits, const std::vector<int>& targets);
// Mean cross-entropy against a fixed soft target distribution [n, v].
Var xent_soft(Var logits, const Tensor& target_probs);

// log-softmax value helper (no tape), used by evaluation paths.
Tensor softmax_value(const Tensor& logits);

// Max over entries of |analytic - central difference| / max(1, |analytic|)
// for a scalar-valued function of one tensor.
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double h = 1e-4);

}  // namespace matquant
