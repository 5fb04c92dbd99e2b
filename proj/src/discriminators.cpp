#include "advgen/discriminators.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace advgen::disc {

void DiscConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("discriminators need at least two classes");
  if (max_len < 1 || emb_dim < 1) throw std::invalid_argument("discriminator input must be non-empty");
  for (int h : hidden) {
    if (h < 1) throw std::invalid_argument("discriminator hidden sizes must be positive");
  }
}

DiscriminatorParams init_discriminators(const DiscConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  DiscriminatorParams p;
  p.config = config;
  std::vector<std::size_t> sizes{static_cast<std::size_t>(config.max_len * config.emb_dim)};
  for (int h : config.hidden) sizes.push_back(static_cast<std::size_t>(h));
  sizes.push_back(1);
  for (int k = 0; k < config.num_classes; ++k) {
    std::vector<nn::Linear> mlp;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      const std::string name = "d" + std::to_string(k) + ".layer" + std::to_string(l);
      mlp.push_back(nn::Linear::create(p.store, name, sizes[l], sizes[l + 1], rng));
    }
    p.layers.push_back(std::move(mlp));
  }
  return p;
}

DiscVars bind(ad::Tape& t, DiscriminatorParams& params) {
  DiscVars v;
  for (const auto& mlp : params.layers) {
    v.emplace_back();
    for (const auto& l : mlp) v.back().push_back(l.bind(t, params.store));
  }
  return v;
}

DiscVars view(ad::Tape& t, const DiscriminatorParams& params) {
  DiscVars v;
  for (const auto& mlp : params.layers) {
    v.emplace_back();
    for (const auto& l : mlp) v.back().push_back(l.view(t, params.store));
  }
  return v;
}

ad::Var disc_logits(ad::Tape& t, const DiscVars& vars, const DiscConfig& config, int k,
                    std::span<const ad::Var> positions) {
  if (k < 0 || k >= config.num_classes) {
    throw std::out_of_range("discriminator class " + std::to_string(k) + " out of range");
  }
  if (positions.size() != static_cast<std::size_t>(config.max_len)) {
    throw std::invalid_argument("discriminator expects " + std::to_string(config.max_len) + " positions");
  }
  for (auto p : positions) {
    if (t.value(p).cols() != static_cast<std::size_t>(config.emb_dim)) {
      throw std::invalid_argument("discriminator position width mismatch: " + t.value(p).shape_string());
    }
  }
  const auto& mlp = vars.at(static_cast<std::size_t>(k));
  ad::Var x = ad::concat_cols(t, positions);
  for (std::size_t l = 0; l < mlp.size(); ++l) {
    x = nn::apply(t, mlp[l], x);
    if (l + 1 < mlp.size()) x = ad::tanh(t, x);
  }
  return x;
}

double disc_prob(const Matrix& w, int k, const DiscriminatorParams& params) {
  const auto m = static_cast<std::size_t>(params.config.max_len);
  const auto d = static_cast<std::size_t>(params.config.emb_dim);
  if (w.rows() != m || w.cols() != d) {
    throw std::invalid_argument("disc_prob expects " + std::to_string(m) + "x" + std::to_string(d) + ", got " +
                                w.shape_string());
  }
  ad::Tape t;
  const DiscVars vars = view(t, params);
  std::vector<ad::Var> positions;
  for (std::size_t r = 0; r < m; ++r) positions.push_back(t.constant(Matrix::row_vector(w.row(r))));
  return linalg::sigmoid(ad::scalar(t, disc_logits(t, vars, params.config, k, positions)));
}

namespace {

ad::Var mean(ad::Tape& t, ad::Var v) {
  const std::size_t n = t.value(v).size();
  if (n == 0) throw std::invalid_argument("mean of an empty batch");
  return ad::scale(t, ad::sum(t, v), 1.0 / static_cast<double>(n));
}

}  // namespace

ad::Var disc_loss_k(ad::Tape& t, ad::Var real_logits, ad::Var fake_logits) {
  if (t.value(real_logits).empty() || t.value(fake_logits).empty()) {
    throw std::invalid_argument("discriminator loss needs non-empty real and fake batches");
  }
  // log(1 - sigmoid(x)) = log sigmoid(-x)
  return ad::add(t, mean(t, ad::log_sigmoid(t, real_logits)),
                 mean(t, ad::log_sigmoid(t, ad::scale(t, fake_logits, -1.0))));
}

double disc_loss_k(std::span<const double> real_probs, std::span<const double> fake_probs) {
  if (real_probs.empty() || fake_probs.empty()) {
    throw std::invalid_argument("discriminator loss needs non-empty real and fake batches");
  }
  double r = 0.0;
  for (double p : real_probs) r += std::log(p);
  double f = 0.0;
  for (double p : fake_probs) f += std::log1p(-p);
  return r / static_cast<double>(real_probs.size()) + f / static_cast<double>(fake_probs.size());
}

ad::Var generator_nonsaturating(ad::Tape& t, ad::Var fake_logits) {
  return ad::scale(t, mean(t, ad::log_sigmoid(t, fake_logits)), -1.0);
}

void export_discriminators(Checkpoint& ckpt, const DiscriminatorParams& params) {
  const auto& c = params.config;
  ckpt.meta["disc.num_classes"] = std::to_string(c.num_classes);
  ckpt.meta["disc.max_len"] = std::to_string(c.max_len);
  ckpt.meta["disc.emb_dim"] = std::to_string(c.emb_dim);
  std::string hidden;
  for (std::size_t i = 0; i < c.hidden.size(); ++i) hidden += (i ? "," : "") + std::to_string(c.hidden[i]);
  ckpt.meta["disc.hidden"] = hidden;
  params.store.export_to(ckpt, "disc.");
}

DiscriminatorParams import_discriminators(const Checkpoint& ckpt) {
  DiscConfig c;
  c.num_classes = static_cast<int>(ckpt.meta_int("disc.num_classes"));
  c.max_len = static_cast<int>(ckpt.meta_int("disc.max_len"));
  c.emb_dim = static_cast<int>(ckpt.meta_int("disc.emb_dim"));
  c.hidden.clear();
  std::stringstream ss(ckpt.meta_value("disc.hidden"));
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) c.hidden.push_back(std::stoi(item));
  }
  DiscriminatorParams p = init_discriminators(c, 0);
  p.store.import_from(ckpt, "disc.");
  return p;
}

}  // namespace advgen::disc
