#pragma once

// Reverse-mode automatic differentiation over 2-D matrices.
//
// A Tape records every operation of one forward pass. Nodes are referenced
// by lightweight Var handles; backward() walks the tape in reverse and
// accumulates gradients into nodes and, for parameter leaves, into the
// owning Parameter::grad. A Tape is single-use and single-threaded.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "advgen/matrix.hpp"

namespace advgen::ad {

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  // Frozen parameters enter tapes as constants and reject updates.
  bool frozen = false;
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  using Backprop = std::function<void(Tape&, Var self)>;

  Var constant(Matrix value);
  Var param(Parameter& p);
  // Constant leaf aliasing m, which must outlive the tape.
  Var view(const Matrix& m);

  const Matrix& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  // Gradient buffer of v, zero-initialised on first access.
  Matrix& grad(Var v);
  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

  // Seeds d(loss)/d(loss) = 1 on a 1x1 node and propagates.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

  // Used by operation implementations.
  Var push(Matrix value, bool requires_grad, Backprop backprop);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backprop backprop;
    // Parameter leaves alias the parameter's storage instead of copying it.
    const Matrix* external = nullptr;
  };
  std::vector<Node> nodes_;
};

double scalar(const Tape& t, Var v);

// Elementwise and linear algebra.
Var matmul(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
// a + bias where bias is 1 x cols, broadcast over rows.
Var add_bias(Tape& t, Var a, Var bias);
// Row-vector bias broadcast to `rows` rows.
Var broadcast_rows(Tape& t, Var row, std::size_t rows);

Var sigmoid(Tape& t, Var a);
Var tanh(Tape& t, Var a);
Var relu(Tape& t, Var a);
Var exp(Tape& t, Var a);
Var log(Tape& t, Var a);
// log(sigmoid(a)), computed stably.
Var log_sigmoid(Tape& t, Var a);

Var softmax_rows(Tape& t, Var a);
Var log_softmax_rows(Tape& t, Var a);

Var concat_cols(Tape& t, std::span<const Var> parts);
Var slice_cols(Tape& t, Var a, std::size_t start, std::size_t len);
Var concat_rows(Tape& t, std::span<const Var> parts);
Var slice_rows(Tape& t, Var a, std::size_t start, std::size_t len);

// Embedding lookup: row ids[i] of table becomes row i of the result.
Var gather_rows(Tape& t, Var table, std::span<const int> ids);

// Elementwise maximum over same-shaped inputs; ties go to the earliest part.
Var max_of(Tape& t, std::span<const Var> parts);

// GRU gate arithmetic on precomputed input (gx = x W + b) and recurrent
// (gh = h U + c) pre-activations, each B x 3H laid out as [reset | update |
// candidate]. Returns the next hidden state n + z * (h - n).
Var gru_gates(Tape& t, Var gx, Var gh, Var h);

// Scalar reductions (1x1 results).
Var sum(Tape& t, Var a);
Var add_scalars(Tape& t, std::span<const Var> scalars, std::span<const double> weights);

// Sum over rows r of -weights[r] * log softmax(logits_r)[targets[r]].
// Rows with a negative target are skipped.
Var cross_entropy(Tape& t, Var logits, std::span<const int> targets,
                  std::span<const double> weights);

}  // namespace advgen::ad
