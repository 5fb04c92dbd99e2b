#include "advgen/target_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace advgen::target {

using corpus::TokenSequence;
using corpus::Vocabulary;

void TargetConfig::validate() const {
  if (vocab_size < Vocabulary::kNumSpecials + 1) throw std::invalid_argument("target vocab_size too small");
  if (num_classes < 2) throw std::invalid_argument("target needs at least two classes");
  if (emb_dim < 1 || num_filters < 1) throw std::invalid_argument("target dimensions must be positive");
  if (filter_widths.empty()) throw std::invalid_argument("target needs at least one filter width");
  for (int w : filter_widths) {
    if (w < 1 || w > max_len) {
      throw std::invalid_argument("filter width " + std::to_string(w) + " does not fit max_len " +
                                  std::to_string(max_len));
    }
  }
}

TargetParams init_target(const TargetConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  TargetParams p;
  p.config = config;
  const auto d = static_cast<std::size_t>(config.emb_dim);
  const auto f = static_cast<std::size_t>(config.num_filters);
  p.embedding = p.store.add("embedding", static_cast<std::size_t>(config.vocab_size), d);
  p.store.init_uniform(p.embedding, 0.5, rng);
  for (std::size_t i = 0; i < config.filter_widths.size(); ++i) {
    const auto w = static_cast<std::size_t>(config.filter_widths[i]);
    const std::string name = "conv" + std::to_string(config.filter_widths[i]);
    p.kernels.push_back(p.store.add(name + ".kernel", w * d, f));
    p.store.init_glorot(p.kernels.back(), rng);
    p.biases.push_back(p.store.add(name + ".bias", 1, f));
  }
  p.output = nn::Linear::create(p.store, "output", f * config.filter_widths.size(),
                                static_cast<std::size_t>(config.num_classes), rng);
  return p;
}

TargetVars bind(ad::Tape& t, TargetParams& params) {
  TargetVars v;
  v.embedding = t.param(params.store.at(params.embedding));
  for (auto k : params.kernels) v.kernels.push_back(t.param(params.store.at(k)));
  for (auto b : params.biases) v.biases.push_back(t.param(params.store.at(b)));
  v.output = params.output.bind(t, params.store);
  return v;
}

TargetVars view(ad::Tape& t, const TargetParams& params) {
  TargetVars v;
  v.embedding = t.view(params.store.at(params.embedding).value);
  for (auto k : params.kernels) v.kernels.push_back(t.view(params.store.at(k).value));
  for (auto b : params.biases) v.biases.push_back(t.view(params.store.at(b).value));
  v.output = params.output.view(t, params.store);
  return v;
}

TokenSequence fit_length(const TokenSequence& ids, std::size_t m) {
  TokenSequence out(m, Vocabulary::kPad);
  std::copy_n(ids.begin(), std::min(ids.size(), m), out.begin());
  return out;
}

std::vector<ad::Var> embed_tokens(ad::Tape& t, const TargetVars& vars, const TargetConfig& config,
                                  std::span<const TokenSequence> batch) {
  const auto m = static_cast<std::size_t>(config.max_len);
  std::vector<TokenSequence> fitted;
  fitted.reserve(batch.size());
  for (const auto& ids : batch) {
    if (ids.empty()) throw std::invalid_argument("cannot classify an empty sequence");
    for (int id : ids) {
      if (id < 0 || id >= config.vocab_size) {
        throw std::out_of_range("token id " + std::to_string(id) + " outside target vocabulary");
      }
    }
    fitted.push_back(fit_length(ids, m));
  }
  std::vector<ad::Var> positions;
  positions.reserve(m);
  std::vector<int> column(batch.size());
  for (std::size_t p = 0; p < m; ++p) {
    for (std::size_t b = 0; b < fitted.size(); ++b) column[b] = fitted[b][p];
    positions.push_back(ad::gather_rows(t, vars.embedding, column));
  }
  return positions;
}

ad::Var logits(ad::Tape& t, const TargetVars& vars, const TargetConfig& config,
               std::span<const ad::Var> positions) {
  const auto m = static_cast<std::size_t>(config.max_len);
  if (positions.size() != m) {
    throw std::invalid_argument("target expects " + std::to_string(m) + " positions, got " +
                                std::to_string(positions.size()));
  }
  const std::size_t rows = t.value(positions[0]).rows();
  for (auto p : positions) {
    const Matrix& v = t.value(p);
    if (v.rows() != rows || v.cols() != static_cast<std::size_t>(config.emb_dim)) {
      throw std::invalid_argument("target position embedding has shape " + v.shape_string());
    }
  }
  std::vector<ad::Var> features;
  for (std::size_t i = 0; i < config.filter_widths.size(); ++i) {
    const auto w = static_cast<std::size_t>(config.filter_widths[i]);
    std::vector<ad::Var> responses;
    responses.reserve(m - w + 1);
    for (std::size_t p = 0; p + w <= m; ++p) {
      const ad::Var window = ad::concat_cols(t, positions.subspan(p, w));
      responses.push_back(ad::matmul(t, window, vars.kernels[i]));
    }
    // bias and ReLU commute with the max over positions
    const ad::Var pooled = ad::max_of(t, responses);
    features.push_back(ad::relu(t, ad::add_bias(t, pooled, vars.biases[i])));
  }
  return nn::apply(t, vars.output, ad::concat_cols(t, features));
}

namespace {

Matrix eval_probs(const TargetParams& params, std::span<const TokenSequence> batch) {
  ad::Tape t;
  const TargetVars vars = view(t, params);
  const auto positions = embed_tokens(t, vars, params.config, batch);
  Matrix probs = t.value(logits(t, vars, params.config, positions));
  linalg::softmax_rows(probs);
  return probs;
}

std::vector<double> row_of(const Matrix& m, std::size_t r) {
  const auto row = m.row(r);
  return {row.begin(), row.end()};
}

}  // namespace

Matrix predict_hard_batch(std::span<const TokenSequence> batch, const TargetParams& params) {
  constexpr std::size_t kChunk = 256;
  Matrix out(batch.size(), static_cast<std::size_t>(params.config.num_classes));
  for (std::size_t start = 0; start < batch.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, batch.size() - start);
    const Matrix probs = eval_probs(params, batch.subspan(start, n));
    std::copy(probs.data(), probs.data() + probs.size(), out.data() + start * out.cols());
  }
  return out;
}

std::vector<double> predict_hard(const TokenSequence& ids, const TargetParams& params) {
  return row_of(eval_probs(params, std::span<const TokenSequence>(&ids, 1)), 0);
}

std::vector<double> predict_soft(const Matrix& w, const TargetParams& params) {
  const auto m = static_cast<std::size_t>(params.config.max_len);
  const auto d = static_cast<std::size_t>(params.config.emb_dim);
  if (w.rows() != m || w.cols() != d) {
    throw std::invalid_argument("predict_soft expects " + std::to_string(m) + "x" + std::to_string(d) +
                                ", got " + w.shape_string());
  }
  ad::Tape t;
  const TargetVars vars = view(t, params);
  std::vector<ad::Var> positions;
  for (std::size_t p = 0; p < m; ++p) positions.push_back(t.constant(Matrix::row_vector(w.row(p))));
  Matrix probs = t.value(logits(t, vars, params.config, positions));
  linalg::softmax_rows(probs);
  return row_of(probs, 0);
}

Matrix input_gradients(const TokenSequence& ids, int loss_class, const TargetParams& params,
                       double loss_scale) {
  if (ids.empty()) throw std::invalid_argument("cannot take gradients of an empty sequence");
  if (loss_class < 0 || loss_class >= params.config.num_classes) {
    throw std::out_of_range("loss class " + std::to_string(loss_class) + " out of range");
  }
  const auto m = static_cast<std::size_t>(params.config.max_len);
  const TokenSequence fitted = fit_length(ids, m);
  const Matrix& table = params.embedding_table();
  std::vector<ad::Parameter> rows(m);
  ad::Tape t;
  const TargetVars vars = view(t, params);
  std::vector<ad::Var> positions;
  for (std::size_t p = 0; p < m; ++p) {
    const int id = fitted[p];
    if (id < 0 || id >= params.config.vocab_size) throw std::out_of_range("token id outside target vocabulary");
    rows[p].value = Matrix::row_vector(table.row(static_cast<std::size_t>(id)));
    positions.push_back(t.param(rows[p]));
  }
  const int target_class[1] = {loss_class};
  const double weight[1] = {loss_scale};
  t.backward(ad::cross_entropy(t, logits(t, vars, params.config, positions), target_class, weight));

  const std::size_t n = std::min(ids.size(), m);
  Matrix g(n, static_cast<std::size_t>(params.config.emb_dim));
  for (std::size_t p = 0; p < n; ++p) {
    if (!rows[p].grad.empty()) std::copy(rows[p].grad.data(), rows[p].grad.data() + g.cols(), &g(p, 0));
  }
  return g;
}

double logit_margin(const Matrix& w, int a, int b, const TargetParams& params, Matrix* grad) {
  const auto m = static_cast<std::size_t>(params.config.max_len);
  const auto d = static_cast<std::size_t>(params.config.emb_dim);
  if (w.rows() != m || w.cols() != d) {
    throw std::invalid_argument("logit_margin expects " + std::to_string(m) + "x" + std::to_string(d) + ", got " +
                                w.shape_string());
  }
  const int k = params.config.num_classes;
  if (a < 0 || a >= k || b < 0 || b >= k) throw std::out_of_range("logit_margin: class out of range");
  std::vector<ad::Parameter> rows(m);
  ad::Tape t;
  const TargetVars vars = view(t, params);
  std::vector<ad::Var> positions;
  for (std::size_t p = 0; p < m; ++p) {
    rows[p].value = Matrix::row_vector(w.row(p));
    positions.push_back(grad ? t.param(rows[p]) : t.constant(rows[p].value));
  }
  const ad::Var z = logits(t, vars, params.config, positions);
  const double margin = t.value(z)(0, static_cast<std::size_t>(a)) - t.value(z)(0, static_cast<std::size_t>(b));
  if (grad) {
    Matrix sel(1, static_cast<std::size_t>(k));
    sel(0, static_cast<std::size_t>(a)) += 1.0;
    sel(0, static_cast<std::size_t>(b)) -= 1.0;
    t.backward(ad::sum(t, ad::mul(t, z, t.constant(std::move(sel)))));
    *grad = Matrix(m, d);
    for (std::size_t p = 0; p < m; ++p) {
      if (!rows[p].grad.empty()) std::copy(rows[p].grad.data(), rows[p].grad.data() + d, &(*grad)(p, 0));
    }
  }
  return margin;
}

Matrix embed_sequence(const TokenSequence& ids, const TargetParams& params) {
  const auto m = static_cast<std::size_t>(params.config.max_len);
  const TokenSequence fitted = fit_length(ids, m);
  const Matrix& table = params.embedding_table();
  Matrix w(m, table.cols());
  for (std::size_t p = 0; p < m; ++p) {
    const int id = fitted[p];
    if (id < 0 || static_cast<std::size_t>(id) >= table.rows()) throw std::out_of_range("token id outside target vocabulary");
    std::copy_n(table.row(static_cast<std::size_t>(id)).begin(), table.cols(), w.row(p).begin());
  }
  return w;
}

double accuracy(std::span<const corpus::LabeledText> texts, const TargetParams& params) {
  if (texts.empty()) return 0.0;
  std::vector<TokenSequence> batch;
  batch.reserve(texts.size());
  for (const auto& t : texts) batch.push_back(t.ids);
  const Matrix probs = predict_hard_batch(batch, params);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (static_cast<int>(linalg::argmax(probs.row(i))) == texts[i].label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(texts.size());
}

TargetParams train_target(const corpus::DatasetSplits& splits, const TargetConfig& config,
                          const TargetTrainSettings& settings, TargetTrainReport* report) {
  if (splits.train.empty()) throw std::invalid_argument("target training needs a non-empty train split");
  if (settings.batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  for (const auto& t : splits.train) {
    if (t.ids.empty()) throw std::invalid_argument("train texts must be encoded before training");
  }
  TargetParams params = init_target(config, derive_seed(settings.seed, 0));
  nn::Adam opt(params.store, nn::AdamConfig{settings.lr, 0.9, 0.999, 1e-8, settings.clip_norm});
  Rng rng(derive_seed(settings.seed, 1));
  TargetTrainReport rep;

  std::vector<std::size_t> order(splits.train.size());
  std::iota(order.begin(), order.end(), 0);
  const auto bs = static_cast<std::size_t>(settings.batch_size);
  for (int epoch = 0; epoch < settings.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t n = std::min(bs, order.size() - start);
      std::vector<TokenSequence> batch;
      std::vector<int> labels;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& item = splits.train[order[start + i]];
        batch.push_back(item.ids);
        labels.push_back(item.label);
      }
      const std::vector<double> weights(n, 1.0 / static_cast<double>(n));
      ad::Tape t;
      const TargetVars vars = bind(t, params);
      const auto positions = embed_tokens(t, vars, config, batch);
      const ad::Var loss = ad::cross_entropy(t, logits(t, vars, config, positions), labels, weights);
      const double value = ad::scalar(t, loss);
      ++rep.steps;
      if (!std::isfinite(value)) {
        throw std::runtime_error("target training diverged at step " + std::to_string(rep.steps));
      }
      t.backward(loss);
      opt.step();
      total += value * static_cast<double>(n);
    }
    rep.epoch_loss.push_back(total / static_cast<double>(order.size()));
    rep.dev_accuracy.push_back(accuracy(splits.dev, params));
  }
  rep.final_dev_accuracy = accuracy(splits.dev, params);
  if (report) *report = std::move(rep);
  return params;
}

void freeze(TargetParams& params) { params.store.freeze(); }

namespace {

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
  return out;
}

}  // namespace

void save_target(const std::filesystem::path& path, const TargetParams& params, std::uint64_t vocab_hash) {
  Checkpoint ckpt;
  const auto& c = params.config;
  ckpt.meta["kind"] = "target";
  ckpt.meta["vocab_size"] = std::to_string(c.vocab_size);
  ckpt.meta["num_classes"] = std::to_string(c.num_classes);
  ckpt.meta["max_len"] = std::to_string(c.max_len);
  ckpt.meta["emb_dim"] = std::to_string(c.emb_dim);
  ckpt.meta["filter_widths"] = join_ints(c.filter_widths);
  ckpt.meta["num_filters"] = std::to_string(c.num_filters);
  ckpt.meta["vocab_hash"] = std::to_string(vocab_hash);
  ckpt.meta["frozen"] = params.frozen() ? "1" : "0";
  params.store.export_to(ckpt, "target.");
  save_checkpoint(path, ckpt);
}

TargetParams load_target(const std::filesystem::path& path, std::optional<std::uint64_t> expected_vocab_hash) {
  const Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.meta_value("kind") != "target") {
    throw std::runtime_error(path.string() + " is not a target checkpoint");
  }
  if (expected_vocab_hash && ckpt.meta_value("vocab_hash") != std::to_string(*expected_vocab_hash)) {
    throw std::runtime_error(path.string() + " was trained with a different vocabulary");
  }
  TargetConfig c;
  c.vocab_size = static_cast<int>(ckpt.meta_int("vocab_size"));
  c.num_classes = static_cast<int>(ckpt.meta_int("num_classes"));
  c.max_len = static_cast<int>(ckpt.meta_int("max_len"));
  c.emb_dim = static_cast<int>(ckpt.meta_int("emb_dim"));
  c.filter_widths = split_ints(ckpt.meta_value("filter_widths"));
  c.num_filters = static_cast<int>(ckpt.meta_int("num_filters"));
  TargetParams p = init_target(c, 0);
  p.store.import_from(ckpt, "target.");
  if (ckpt.meta_value("frozen") == "1") freeze(p);
  return p;
}

}  // namespace advgen::target
