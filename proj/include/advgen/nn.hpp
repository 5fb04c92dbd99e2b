#pragma once

// Parameter storage, optimisation and the layers shared by every model.

#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include "advgen/autograd.hpp"
#include "advgen/checkpoint.hpp"
#include "advgen/rng.hpp"

namespace advgen::nn {

// Owns a model's named parameters. Layers refer to parameters by index, so a
// store (and any model holding one) copies by value safely.
class ParamStore {
 public:
  std::size_t add(const std::string& name, std::size_t rows, std::size_t cols);

  ad::Parameter& at(std::size_t index) { return params_.at(index); }
  const ad::Parameter& at(std::size_t index) const { return params_.at(index); }
  ad::Parameter& get(const std::string& name);
  const ad::Parameter& get(const std::string& name) const;
  std::size_t size() const { return params_.size(); }
  std::size_t num_values() const;

  void freeze();
  bool frozen() const { return frozen_; }

  void zero_grad();
  double grad_norm() const;
  // Rescales all gradients so their global L2 norm is at most max_norm.
  void clip_grad_norm(double max_norm);

  void init_uniform(std::size_t index, double limit, Rng& rng);
  void init_glorot(std::size_t index, Rng& rng);

  // Arrays are stored under "<prefix><name>".
  void export_to(Checkpoint& ckpt, const std::string& prefix) const;
  void import_from(const Checkpoint& ckpt, const std::string& prefix);

  // Hash of every parameter's raw bytes in registration order.
  std::uint64_t fingerprint() const;

 private:
  std::deque<ad::Parameter> params_;
  std::map<std::string, std::size_t> index_;
  bool frozen_ = false;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip; non-positive disables clipping.
  double clip_norm = 5.0;
};

class Adam {
 public:
  // Throws std::logic_error when the store is frozen.
  Adam(ParamStore& store, AdamConfig config);

  // Applies one update from the accumulated gradients, then zeroes them.
  void step();
  long steps() const { return t_; }
  void set_lr(double lr) { config_.lr = lr; }

 private:
  ParamStore* store_;
  AdamConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  long t_ = 0;
};

// Tape handles of a layer's parameters, bound once per forward pass.
struct LinearVars {
  ad::Var weight;
  ad::Var bias;
};

struct GruVars {
  ad::Var w_input;
  ad::Var b_input;
  ad::Var w_hidden;
  ad::Var b_hidden;
};

ad::Var apply(ad::Tape& t, const LinearVars& l, ad::Var x);
ad::Var apply(ad::Tape& t, const GruVars& g, ad::Var x, ad::Var h);

// y = x W + b
struct Linear {
  std::size_t weight = 0;
  std::size_t bias = 0;
  std::size_t in = 0;
  std::size_t out = 0;

  static Linear create(ParamStore& store, const std::string& name, std::size_t in,
                       std::size_t out, Rng& rng);
  LinearVars bind(ad::Tape& t, ParamStore& store) const;
  // Constant handles for gradient-free passes.
  LinearVars view(ad::Tape& t, const ParamStore& store) const;
  Matrix infer(const ParamStore& store, const Matrix& x) const;
};

// Single-layer GRU with gates [reset | update | candidate].
struct Gru {
  std::size_t w_input = 0;   // in x 3H
  std::size_t b_input = 0;   // 1 x 3H
  std::size_t w_hidden = 0;  // H x 3H
  std::size_t b_hidden = 0;  // 1 x 3H
  std::size_t in = 0;
  std::size_t hidden = 0;

  static Gru create(ParamStore& store, const std::string& name, std::size_t in,
                    std::size_t hidden, Rng& rng);
  GruVars bind(ad::Tape& t, ParamStore& store) const;
  GruVars view(ad::Tape& t, const ParamStore& store) const;
  Matrix infer_step(const ParamStore& store, const Matrix& x, const Matrix& h) const;
};

}  // namespace advgen::nn
