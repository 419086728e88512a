#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "textrefiner/matrix.hpp"
#include "textrefiner/ops.hpp"

namespace textrefiner::numkit {

class Tape;

// Handle to a node on a Tape: a value plus a zero-initialized gradient slot
// of the same shape. After Tape::backward on a scalar output, grad() holds
// the partial derivative of that scalar with respect to this value.
class DiffValue {
 public:
  DiffValue() = default;
  DiffValue(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  const Matrix& grad() const;
  bool is_constant() const;

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode gradient tape. Nodes are appended in evaluation order, which
// is already topological, so one reverse sweep propagates adjoints. A single
// logical thread owns one backward pass.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& self_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable input (parameter or data the loss is differentiated
  // against).
  DiffValue leaf(Matrix value);

  // Gradient-detached input: adjoints are never accumulated into it and it
  // blocks flow to anything upstream.
  DiffValue constant(Matrix value);

  DiffValue emit(Matrix value, std::vector<std::size_t> parents, const char* op_name,
                 BackwardFn backward_fn);

  // Seeds the 1x1 output with gradient 1 and sweeps the tape in reverse.
  void backward(const DiffValue& output);

  void zero_grads();

  const Matrix& value_of(std::size_t id) const { return nodes_[id].value; }
  const Matrix& grad_of(std::size_t id) const { return nodes_[id].grad; }
  bool constant_of(std::size_t id) const { return nodes_[id].is_constant; }
  const char* op_name_of(std::size_t id) const { return nodes_[id].op_name; }
  const std::vector<std::size_t>& parents_of(std::size_t id) const { return nodes_[id].parents; }
  std::size_t node_count() const { return nodes_.size(); }

  // Adds g into the node's gradient slot unless the node is a constant.
  void accumulate(std::size_t id, const Matrix& g);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::vector<std::size_t> parents;
    BackwardFn backward_fn;
    const char* op_name = "";
    bool is_constant = false;
    bool grad_touched = false;
  };

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable counterparts of the ops.hpp forward math. All arguments must
// live on the same tape.
// ---------------------------------------------------------------------------

DiffValue mat_mul(const DiffValue& a, const DiffValue& b);
// y = x * w^T + b, b broadcast over rows.
DiffValue linear(const DiffValue& x, const DiffValue& w, const DiffValue& b);
DiffValue add(const DiffValue& a, const DiffValue& b);
DiffValue sub(const DiffValue& a, const DiffValue& b);
DiffValue hadamard(const DiffValue& a, const DiffValue& b);
DiffValue scale(const DiffValue& a, double s);
DiffValue row_l2_normalize(const DiffValue& x);
DiffValue row_softmax(const DiffValue& x);
DiffValue row_log_softmax(const DiffValue& x);
DiffValue cosine_sim(const DiffValue& a, const DiffValue& b);
DiffValue layer_norm_row(const DiffValue& x, const DiffValue& gain, const DiffValue& bias);
DiffValue gelu(const DiffValue& x);
DiffValue relu(const DiffValue& x);
DiffValue activate(const DiffValue& x, Activation activation);
DiffValue concat_cols(const DiffValue& a, const DiffValue& b);
DiffValue concat_rows(const DiffValue& a, const DiffValue& b);
DiffValue select_rows(const DiffValue& x, std::vector<std::size_t> indices);
DiffValue mean_rows(const DiffValue& x);
DiffValue sum_all(const DiffValue& x);
DiffValue mean_all(const DiffValue& x);

// Mean negative log-likelihood: -(1/m) sum_i log_probs(i, labels[i]).
DiffValue nll(const DiffValue& log_probs, std::vector<std::size_t> labels);

// Mean absolute elementwise difference; subgradient 0 at exact ties.
DiffValue mean_abs_diff(const DiffValue& a, const DiffValue& b);

// Mean of 1x1 scalars, reduced in index order.
DiffValue average(const std::vector<DiffValue>& scalars);

// ---------------------------------------------------------------------------
// Finite-difference verification
// ---------------------------------------------------------------------------

// A scalar-valued differentiable function of one matrix input. The callback
// receives a fresh tape and the bound input leaf and must return a 1x1
// DiffValue on that tape.
using ScalarFn = std::function<DiffValue(Tape&, const DiffValue&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_row = 0;
  std::size_t worst_col = 0;
};

// Max over entries of |analytic - central difference| / max(1, |central
// difference|). Throws NumericError (naming the offending entry) if f is
// non-finite at x or any perturbation.
GradCheckReport grad_check_report(const ScalarFn& f, const Matrix& x, double h = 1e-5);
double grad_check(const ScalarFn& f, const Matrix& x, double h = 1e-5);

}  // namespace textrefiner::numkit
