#include "advgen/nn.hpp"

#include <cmath>
#include <stdexcept>

#include "advgen/kernels.hpp"

namespace advgen::nn {

std::size_t ParamStore::add(const std::string& name, std::size_t rows, std::size_t cols) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name " + name);
  params_.push_back(ad::Parameter{name, Matrix(rows, cols), Matrix(), frozen_});
  index_[name] = params_.size() - 1;
  return params_.size() - 1;
}

ad::Parameter& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second];
}

const ad::Parameter& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second];
}

std::size_t ParamStore::num_values() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParamStore::freeze() {
  frozen_ = true;
  for (auto& p : params_) {
    p.frozen = true;
    p.grad = Matrix();
  }
}

void ParamStore::zero_grad() {
  for (auto& p : params_) {
    if (!p.grad.empty()) p.grad.fill(0.0);
  }
}

double ParamStore::grad_norm() const {
  double sq = 0.0;
  const auto& k = kernels::active();
  for (const auto& p : params_) {
    if (!p.grad.empty()) sq += k.dot(p.grad.data(), p.grad.data(), p.grad.size());
  }
  return std::sqrt(sq);
}

void ParamStore::clip_grad_norm(double max_norm) {
  const double norm = grad_norm();
  if (!(norm > max_norm) || norm == 0.0) return;
  const double s = max_norm / norm;
  for (auto& p : params_) {
    if (!p.grad.empty()) kernels::active().scale(s, p.grad.data(), p.grad.size());
  }
}

void ParamStore::init_uniform(std::size_t index, double limit, Rng& rng) {
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (double& v : at(index).value.flat()) v = dist(rng);
}

void ParamStore::init_glorot(std::size_t index, Rng& rng) {
  const auto& m = at(index).value;
  init_uniform(index, std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols())), rng);
}

void ParamStore::export_to(Checkpoint& ckpt, const std::string& prefix) const {
  for (const auto& p : params_) ckpt.arrays[prefix + p.name] = p.value;
}

void ParamStore::import_from(const Checkpoint& ckpt, const std::string& prefix) {
  for (auto& p : params_) {
    const Matrix& m = ckpt.array(prefix + p.name);
    if (!m.same_shape(p.value)) {
      throw std::runtime_error("checkpoint array " + prefix + p.name + " has shape " +
                               m.shape_string() + ", model expects " + p.value.shape_string());
    }
    p.value = m;
  }
}

std::uint64_t ParamStore::fingerprint() const {
  std::uint64_t h = fnv1a64(nullptr, 0);
  for (const auto& p : params_) {
    h = fnv1a64(p.name.data(), p.name.size(), h);
    h = fnv1a64(p.value.data(), p.value.size() * sizeof(double), h);
  }
  return h;
}

Adam::Adam(ParamStore& store, AdamConfig config) : store_(&store), config_(config) {
  if (store.frozen()) throw std::logic_error("cannot register an optimizer over frozen parameters");
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& v = store.at(i).value;
    m_.emplace_back(v.rows(), v.cols());
    v_.emplace_back(v.rows(), v.cols());
  }
}

void Adam::step() {
  if (store_->frozen()) throw std::logic_error("optimizer step on frozen parameters");
  if (config_.clip_norm > 0) store_->clip_grad_norm(config_.clip_norm);
  ++t_;
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < store_->size(); ++i) {
    auto& p = store_->at(i);
    if (p.grad.empty()) continue;
    double* w = p.value.data();
    const double* g = p.grad.data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
      w[j] -= config_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
    }
  }
  store_->zero_grad();
}

Linear Linear::create(ParamStore& store, const std::string& name, std::size_t in,
                      std::size_t out, Rng& rng) {
  Linear l;
  l.in = in;
  l.out = out;
  l.weight = store.add(name + ".weight", in, out);
  l.bias = store.add(name + ".bias", 1, out);
  store.init_glorot(l.weight, rng);
  return l;
}

ad::Var apply(ad::Tape& t, const LinearVars& l, ad::Var x) {
  return ad::add_bias(t, ad::matmul(t, x, l.weight), l.bias);
}

ad::Var apply(ad::Tape& t, const GruVars& g, ad::Var x, ad::Var h) {
  const ad::Var gx = ad::add_bias(t, ad::matmul(t, x, g.w_input), g.b_input);
  const ad::Var gh = ad::add_bias(t, ad::matmul(t, h, g.w_hidden), g.b_hidden);
  return ad::gru_gates(t, gx, gh, h);
}

LinearVars Linear::bind(ad::Tape& t, ParamStore& store) const {
  return {t.param(store.at(weight)), t.param(store.at(bias))};
}

LinearVars Linear::view(ad::Tape& t, const ParamStore& store) const {
  return {t.view(store.at(weight).value), t.view(store.at(bias).value)};
}

Matrix Linear::infer(const ParamStore& store, const Matrix& x) const {
  Matrix y = linalg::matmul(x, store.at(weight).value);
  linalg::add_row_broadcast(store.at(bias).value, y);
  return y;
}

Gru Gru::create(ParamStore& store, const std::string& name, std::size_t in, std::size_t hidden,
                Rng& rng) {
  Gru g;
  g.in = in;
  g.hidden = hidden;
  g.w_input = store.add(name + ".w_input", in, 3 * hidden);
  g.b_input = store.add(name + ".b_input", 1, 3 * hidden);
  g.w_hidden = store.add(name + ".w_hidden", hidden, 3 * hidden);
  g.b_hidden = store.add(name + ".b_hidden", 1, 3 * hidden);
  const double limit = 1.0 / std::sqrt(static_cast<double>(hidden));
  store.init_uniform(g.w_input, limit, rng);
  store.init_uniform(g.w_hidden, limit, rng);
  store.init_uniform(g.b_input, limit, rng);
  store.init_uniform(g.b_hidden, limit, rng);
  return g;
}

GruVars Gru::bind(ad::Tape& t, ParamStore& store) const {
  return {t.param(store.at(w_input)), t.param(store.at(b_input)), t.param(store.at(w_hidden)),
          t.param(store.at(b_hidden))};
}

GruVars Gru::view(ad::Tape& t, const ParamStore& store) const {
  return {t.view(store.at(w_input).value), t.view(store.at(b_input).value),
          t.view(store.at(w_hidden).value), t.view(store.at(b_hidden).value)};
}

Matrix Gru::infer_step(const ParamStore& store, const Matrix& x, const Matrix& h) const {
  Matrix gx = linalg::matmul(x, store.at(w_input).value);
  linalg::add_row_broadcast(store.at(b_input).value, gx);
  Matrix gh = linalg::matmul(h, store.at(w_hidden).value);
  linalg::add_row_broadcast(store.at(b_hidden).value, gh);
  Matrix next;
  linalg::gru_gates(gx, gh, h, next);
  return next;
}

}  // namespace advgen::nn
