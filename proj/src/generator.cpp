#include "advgen/generator.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace advgen::gen {

using corpus::TokenSequence;
using corpus::Vocabulary;

void GeneratorConfig::validate() const {
  if (vocab_size < Vocabulary::kNumSpecials + 1) throw std::invalid_argument("generator vocab_size too small");
  if (num_classes < 2) throw std::invalid_argument("generator needs at least two classes");
  if (emb_dim < 1 || hidden < 1 || latent < 1 || class_dim < 1) {
    throw std::invalid_argument("generator dimensions must be positive");
  }
  if (max_len < 1) throw std::invalid_argument("generator max_len must be positive");
  if (beam_width < 1) throw std::invalid_argument("beam_width must be at least 1");
}

GeneratorParams init_generator(const GeneratorConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  GeneratorParams p;
  p.config = config;
  const auto v = static_cast<std::size_t>(config.vocab_size);
  const auto d = static_cast<std::size_t>(config.emb_dim);
  const auto h = static_cast<std::size_t>(config.hidden);
  const auto dz = static_cast<std::size_t>(config.latent);
  const auto dc = static_cast<std::size_t>(config.class_dim);
  p.embedding = p.store.add("embedding", v, d);
  p.store.init_uniform(p.embedding, 0.1, rng);
  p.encoder = nn::Gru::create(p.store, "encoder", d, h, rng);
  p.mu_head = nn::Linear::create(p.store, "mu", h, dz, rng);
  p.log_sigma_head = nn::Linear::create(p.store, "log_sigma", h, dz, rng);
  p.class_table = p.store.add("class_table", static_cast<std::size_t>(config.num_classes), dc);
  p.store.init_uniform(p.class_table, 0.5, rng);
  p.init_state = nn::Linear::create(p.store, "init_state", dz + dc, h, rng);
  p.decoder = nn::Gru::create(p.store, "decoder", d, h, rng);
  p.output = p.store.add("output", h, v);
  p.store.init_glorot(p.output, rng);
  return p;
}

GeneratorVars bind(ad::Tape& t, GeneratorParams& p) {
  return {t.param(p.store.at(p.embedding)),     p.encoder.bind(t, p.store),
          p.mu_head.bind(t, p.store),           p.log_sigma_head.bind(t, p.store),
          t.param(p.store.at(p.class_table)),   p.init_state.bind(t, p.store),
          p.decoder.bind(t, p.store),           t.param(p.store.at(p.output))};
}

GeneratorVars view(ad::Tape& t, const GeneratorParams& p) {
  return {t.view(p.store.at(p.embedding).value),   p.encoder.view(t, p.store),
          p.mu_head.view(t, p.store),              p.log_sigma_head.view(t, p.store),
          t.view(p.store.at(p.class_table).value), p.init_state.view(t, p.store),
          p.decoder.view(t, p.store),              t.view(p.store.at(p.output).value)};
}

namespace {

void check_ids(std::span<const TokenSequence> batch, int vocab_size) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  for (const auto& ids : batch) {
    if (ids.empty()) throw std::invalid_argument("cannot encode an empty sequence");
    for (int id : ids) {
      if (id < 0 || id >= vocab_size) {
        throw std::out_of_range("token id " + std::to_string(id) + " outside generator vocabulary");
      }
    }
  }
}

void check_classes(std::span<const int> classes, int num_classes) {
  for (int k : classes) {
    if (k < 0 || k >= num_classes) throw std::out_of_range("class id " + std::to_string(k) + " out of range");
  }
}

}  // namespace

EncoderVars encode(ad::Tape& t, const GeneratorVars& vars, const GeneratorConfig& config,
                   std::span<const TokenSequence> batch) {
  check_ids(batch, config.vocab_size);
  const auto cap = static_cast<std::size_t>(config.max_len);
  const std::size_t b = batch.size();
  const auto hidden = static_cast<std::size_t>(config.hidden);
  std::vector<std::size_t> len(b);
  std::size_t steps = 0;
  for (std::size_t i = 0; i < b; ++i) {
    len[i] = std::min(batch[i].size(), cap);
    steps = std::max(steps, len[i]);
  }
  ad::Var h = t.constant(Matrix(b, hidden));
  std::vector<int> column(b);
  for (std::size_t s = 0; s < steps; ++s) {
    bool all_active = true;
    Matrix mask(b, hidden);
    for (std::size_t i = 0; i < b; ++i) {
      const bool active = s < len[i];
      column[i] = active ? batch[i][s] : Vocabulary::kPad;
      all_active = all_active && active;
      if (active) std::fill(mask.row(i).begin(), mask.row(i).end(), 1.0);
    }
    const ad::Var next = nn::apply(t, vars.encoder, ad::gather_rows(t, vars.embedding, column), h);
    h = all_active ? next : ad::add(t, h, ad::mul(t, t.constant(std::move(mask)), ad::sub(t, next, h)));
  }
  return {nn::apply(t, vars.mu_head, h), nn::apply(t, vars.log_sigma_head, h), h};
}

ad::Var reparameterize(ad::Tape& t, ad::Var mu, ad::Var log_sigma, const Matrix& eps) {
  if (!t.value(mu).same_shape(eps) || !t.value(log_sigma).same_shape(eps)) {
    throw std::invalid_argument("reparameterize: shape mismatch");
  }
  return ad::add(t, mu, ad::mul(t, ad::exp(t, log_sigma), t.constant(eps)));
}

ad::Var init_decoder_state(ad::Tape& t, const GeneratorVars& vars, const GeneratorConfig& config, ad::Var z,
                           std::span<const int> classes) {
  check_classes(classes, config.num_classes);
  if (t.value(z).rows() != classes.size()) throw std::invalid_argument("one class per latent row required");
  const ad::Var parts[2] = {z, ad::gather_rows(t, vars.class_table, classes)};
  return nn::apply(t, vars.init_state, ad::concat_cols(t, parts));
}

TeacherBatch make_teacher_batch(std::span<const TokenSequence> batch, std::size_t max_len, double keep_rate,
                                Rng& rng) {
  if (!(keep_rate >= 0.0 && keep_rate <= 1.0)) throw std::invalid_argument("keep_rate must lie in [0, 1]");
  if (batch.empty()) throw std::invalid_argument("empty batch");
  TeacherBatch tb;
  std::size_t longest = 0;
  for (const auto& ids : batch) {
    if (ids.empty()) throw std::invalid_argument("cannot decode towards an empty sequence");
    tb.lengths.push_back(std::min(ids.size(), max_len));
    longest = std::max(longest, tb.lengths.back());
  }
  const std::size_t steps = longest + 1;
  tb.inputs.assign(steps, std::vector<int>(batch.size(), Vocabulary::kPad));
  tb.targets.assign(steps, std::vector<int>(batch.size(), -1));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::size_t n = tb.lengths[i];
    tb.inputs[0][i] = Vocabulary::kGo;
    for (std::size_t s = 1; s <= n; ++s) {
      int id = batch[i][s - 1];
      ++tb.droppable;
      if (keep_rate < 1.0 && !(uniform01(rng) < keep_rate)) {
        id = Vocabulary::kUnk;
        ++tb.dropped;
      }
      tb.inputs[s][i] = id;
    }
    for (std::size_t s = 0; s < n; ++s) tb.targets[s][i] = batch[i][s];
    tb.targets[n][i] = Vocabulary::kEos;
  }
  return tb;
}

std::vector<ad::Var> decode_teacher_forced(ad::Tape& t, const GeneratorVars& vars, ad::Var state,
                                           const TeacherBatch& teacher) {
  std::vector<ad::Var> logits;
  logits.reserve(teacher.inputs.size());
  ad::Var h = state;
  for (const auto& column : teacher.inputs) {
    h = nn::apply(t, vars.decoder, ad::gather_rows(t, vars.embedding, column), h);
    logits.push_back(ad::matmul(t, h, vars.output));
  }
  return logits;
}

ad::Var gumbel_soften(ad::Tape& t, ad::Var logits, const Matrix& noise, double temperature) {
  if (!(temperature > 0.0)) throw std::invalid_argument("gumbel temperature must be positive");
  const ad::Var perturbed = ad::add(t, ad::log_softmax_rows(t, logits), t.constant(noise));
  return ad::softmax_rows(t, ad::scale(t, perturbed, 1.0 / temperature));
}

ad::Var straight_through(ad::Tape& t, ad::Var soft) {
  const Matrix& s = t.value(soft);
  Matrix shift(s.rows(), s.cols());
  for (std::size_t r = 0; r < s.rows(); ++r) {
    const std::size_t best = linalg::argmax(s.row(r));
    for (std::size_t c = 0; c < s.cols(); ++c) shift(r, c) = (c == best ? 1.0 : 0.0) - s(r, c);
  }
  return ad::add(t, soft, t.constant(std::move(shift)));
}

ad::Var soft_embed(ad::Tape& t, ad::Var soft, ad::Var table) {
  if (t.value(soft).cols() != t.value(table).rows()) {
    throw std::invalid_argument("soft_embed: " + t.value(soft).shape_string() + " against table " +
                                t.value(table).shape_string());
  }
  return ad::matmul(t, soft, table);
}

std::vector<ad::Var> relaxed_sequence(ad::Tape& t, std::span<const ad::Var> logits,
                                      std::span<const std::size_t> lengths, std::size_t m, double temperature,
                                      Rng& noise_rng) {
  if (logits.empty()) throw std::invalid_argument("relaxed_sequence: no logits");
  const std::size_t b = lengths.size();
  const std::size_t v = t.value(logits[0]).cols();
  std::vector<ad::Var> out;
  out.reserve(m);
  for (std::size_t p = 0; p < m; ++p) {
    Matrix pad(b, v);
    Matrix mask(b, v);
    std::size_t active = 0;
    for (std::size_t i = 0; i < b; ++i) {
      if (p < lengths[i] && p < logits.size()) {
        std::fill(mask.row(i).begin(), mask.row(i).end(), 1.0);
        ++active;
      } else {
        pad(i, Vocabulary::kPad) = 1.0;
      }
    }
    if (active == 0) {
      out.push_back(t.constant(std::move(pad)));
      continue;
    }
    const ad::Var soft = gumbel_soften(t, logits[p], gumbel_matrix(b, v, noise_rng), temperature);
    out.push_back(active == b ? soft
                              : ad::add(t, ad::mul(t, soft, t.constant(std::move(mask))),
                                        t.constant(std::move(pad))));
  }
  return out;
}

std::vector<ad::Var> one_hot_sequence(ad::Tape& t, std::span<const TokenSequence> batch, std::size_t m,
                                      std::size_t vocab_size) {
  std::vector<ad::Var> out;
  out.reserve(m);
  for (std::size_t p = 0; p < m; ++p) {
    Matrix o(batch.size(), vocab_size);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const int id = p < batch[i].size() ? batch[i][p] : Vocabulary::kPad;
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size) throw std::out_of_range("token id out of range");
      o(i, static_cast<std::size_t>(id)) = 1.0;
    }
    out.push_back(t.constant(std::move(o)));
  }
  return out;
}

// ---------------------------------------------------------------------------

void encode_batch(std::span<const TokenSequence> batch, const GeneratorParams& params, Matrix& mu,
                  Matrix& log_sigma) {
  ad::Tape t;
  const GeneratorVars vars = view(t, params);
  const EncoderVars enc = encode(t, vars, params.config, batch);
  mu = t.value(enc.mu);
  log_sigma = t.value(enc.log_sigma);
}

EncoderOutput encode(const TokenSequence& ids, const GeneratorParams& params) {
  ad::Tape t;
  const GeneratorVars vars = view(t, params);
  const EncoderVars enc = encode(t, vars, params.config, std::span<const TokenSequence>(&ids, 1));
  EncoderOutput out;
  const auto mu = t.value(enc.mu).row(0);
  const auto ls = t.value(enc.log_sigma).row(0);
  const auto h = t.value(enc.h_last).row(0);
  out.mu.assign(mu.begin(), mu.end());
  for (double x : ls) out.sigma.push_back(std::exp(x));
  out.h_last.assign(h.begin(), h.end());
  return out;
}

std::vector<double> reparameterize(std::span<const double> mu, std::span<const double> sigma,
                                   std::span<const double> eps) {
  if (mu.size() != sigma.size() || mu.size() != eps.size()) {
    throw std::invalid_argument("reparameterize: shape mismatch");
  }
  std::vector<double> z(mu.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = mu[i] + sigma[i] * eps[i];
  return z;
}

Matrix init_decoder_state(const Matrix& z, std::span<const int> classes, const GeneratorParams& params) {
  if (z.cols() != static_cast<std::size_t>(params.config.latent)) {
    throw std::invalid_argument("latent width mismatch: " + z.shape_string());
  }
  ad::Tape t;
  const GeneratorVars vars = view(t, params);
  return t.value(init_decoder_state(t, vars, params.config, t.view(z), classes));
}

std::vector<double> output_distribution(std::span<const double> logits) {
  Matrix m = Matrix::row_vector(logits);
  linalg::softmax_rows(m);
  return {m.data(), m.data() + m.size()};
}

std::vector<double> gumbel_soften(std::span<const double> logits, double temperature,
                                  std::span<const double> noise) {
  if (!(temperature > 0.0)) throw std::invalid_argument("gumbel temperature must be positive");
  if (noise.size() != logits.size()) throw std::invalid_argument("gumbel noise width mismatch");
  Matrix m = Matrix::row_vector(logits);
  linalg::log_softmax_rows(m);
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = (m.data()[i] + noise[i]) / temperature;
  linalg::softmax_rows(m);
  return {m.data(), m.data() + m.size()};
}

std::vector<double> gumbel_soften(std::span<const double> logits, const GumbelConfig& config) {
  Rng rng(config.seed);
  const Matrix g = gumbel_matrix(1, logits.size(), rng);
  return gumbel_soften(logits, config.temperature, g.flat());
}

Matrix soft_embed(const Matrix& soft, const Matrix& table) {
  if (soft.cols() != table.rows()) {
    throw std::invalid_argument("soft_embed: " + soft.shape_string() + " against table " + table.shape_string());
  }
  return linalg::matmul(soft, table);
}

void masked_log_softmax(std::span<const double> logits, std::span<double> out) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  double mx = kNegInf;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    if (k != Vocabulary::kGo && k != Vocabulary::kPad) mx = std::max(mx, logits[k]);
  }
  double z = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    if (k != Vocabulary::kGo && k != Vocabulary::kPad) z += std::exp(logits[k] - mx);
  }
  const double lz = mx + std::log(z);
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = (k == Vocabulary::kGo || k == Vocabulary::kPad) ? kNegInf : logits[k] - lz;
  }
}

namespace {

struct Hypothesis {
  TokenSequence tokens;
  double score = 0.0;
  std::size_t state_row = 0;  // row in the current state matrix
};

struct Candidate {
  double score;
  int token;
  std::size_t parent;
};

}  // namespace

std::vector<TokenSequence> decode_beam_search(const Matrix& states, int beam_width, int max_len,
                                              const GeneratorParams& params) {
  if (beam_width < 1) throw std::invalid_argument("beam_width must be at least 1");
  if (max_len < 1) throw std::invalid_argument("max_len must be at least 1");
  const auto hidden = static_cast<std::size_t>(params.config.hidden);
  if (states.cols() != hidden) throw std::invalid_argument("decoder state width mismatch");
  const std::size_t n = states.rows();
  const auto beam = static_cast<std::size_t>(beam_width);
  const auto v = static_cast<std::size_t>(params.config.vocab_size);
  const Matrix& emb = params.embedding_table();
  const Matrix& w_out = params.store.at(params.output).value;

  std::vector<std::vector<Hypothesis>> alive(n);
  std::vector<std::vector<Hypothesis>> finished(n);
  for (std::size_t i = 0; i < n; ++i) alive[i].push_back(Hypothesis{{}, 0.0, i});
  Matrix h = states;

  std::vector<double> lp(v);
  for (int step = 0; step < max_len; ++step) {
    std::size_t rows = 0;
    for (const auto& a : alive) rows += a.size();
    if (rows == 0) break;
    Matrix x(rows, emb.cols());
    Matrix hin(rows, hidden);
    std::size_t r = 0;
    for (auto& a : alive) {
      for (auto& hyp : a) {
        const int last = hyp.tokens.empty() ? Vocabulary::kGo : hyp.tokens.back();
        std::copy_n(emb.row(static_cast<std::size_t>(last)).begin(), emb.cols(), x.row(r).begin());
        std::copy_n(h.row(hyp.state_row).begin(), hidden, hin.row(r).begin());
        hyp.state_row = r++;
      }
    }
    h = params.decoder.infer_step(params.store, x, hin);
    const Matrix logits = linalg::matmul(h, w_out);

    for (std::size_t i = 0; i < n; ++i) {
      if (alive[i].empty()) continue;
      std::vector<Candidate> cands;
      cands.reserve(alive[i].size() * v);
      for (std::size_t a = 0; a < alive[i].size(); ++a) {
        masked_log_softmax(logits.row(alive[i][a].state_row), lp);
        for (std::size_t k = 0; k < v; ++k) {
          if (k == Vocabulary::kGo || k == Vocabulary::kPad) continue;
          cands.push_back(Candidate{alive[i][a].score + lp[k], static_cast<int>(k), a});
        }
      }
      std::sort(cands.begin(), cands.end(), [](const Candidate& x, const Candidate& y) {
        if (x.score != y.score) return x.score > y.score;
        if (x.token != y.token) return x.token < y.token;
        return x.parent < y.parent;
      });
      std::vector<Hypothesis> next;
      for (std::size_t c = 0; c < cands.size() && (next.size() < beam || c < beam); ++c) {
        const Candidate& cand = cands[c];
        const Hypothesis& parent = alive[i][cand.parent];
        if (cand.token == Vocabulary::kEos) {
          if (c < beam) {
            Hypothesis done{parent.tokens, cand.score, 0};
            done.tokens.push_back(Vocabulary::kEos);
            finished[i].push_back(std::move(done));
          }
        } else if (next.size() < beam) {
          Hypothesis ext{parent.tokens, cand.score, parent.state_row};
          ext.tokens.push_back(cand.token);
          next.push_back(std::move(ext));
        }
      }
      alive[i] = std::move(next);
      // log-probs only decrease, so a finished hypothesis at least as good as
      // every live one cannot be overtaken
      if (!finished[i].empty() && !alive[i].empty()) {
        double best_done = -std::numeric_limits<double>::infinity();
        for (const auto& f : finished[i]) best_done = std::max(best_done, f.score);
        if (best_done >= alive[i].front().score) alive[i].clear();
      }
    }
  }

  std::vector<TokenSequence> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& a : alive[i]) finished[i].push_back(std::move(a));
    const Hypothesis* best = nullptr;
    for (const auto& f : finished[i]) {
      if (!best || f.score > best->score) best = &f;
    }
    out[i] = best->tokens;
  }
  return out;
}

Matrix sample_latent(int n, int latent_dim, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_latent needs n >= 1");
  if (latent_dim < 1) throw std::invalid_argument("latent dimension must be positive");
  Rng rng(seed);
  return normal_matrix(static_cast<std::size_t>(n), static_cast<std::size_t>(latent_dim), rng);
}

void export_generator(Checkpoint& ckpt, const GeneratorParams& params, std::uint64_t vocab_hash) {
  const auto& c = params.config;
  ckpt.meta["generator.vocab_size"] = std::to_string(c.vocab_size);
  ckpt.meta["generator.num_classes"] = std::to_string(c.num_classes);
  ckpt.meta["generator.emb_dim"] = std::to_string(c.emb_dim);
  ckpt.meta["generator.hidden"] = std::to_string(c.hidden);
  ckpt.meta["generator.latent"] = std::to_string(c.latent);
  ckpt.meta["generator.class_dim"] = std::to_string(c.class_dim);
  ckpt.meta["generator.max_len"] = std::to_string(c.max_len);
  ckpt.meta["generator.beam_width"] = std::to_string(c.beam_width);
  ckpt.meta["vocab_hash"] = std::to_string(vocab_hash);
  params.store.export_to(ckpt, "generator.");
}

GeneratorParams import_generator(const Checkpoint& ckpt, std::optional<std::uint64_t> expected_vocab_hash,
                                 const std::string& origin) {
  if (!ckpt.meta.count("generator.latent")) throw std::runtime_error(origin + " holds no generator");
  if (expected_vocab_hash && ckpt.meta_value("vocab_hash") != std::to_string(*expected_vocab_hash)) {
    throw std::runtime_error(origin + " was trained with a different vocabulary");
  }
  GeneratorConfig c;
  c.vocab_size = static_cast<int>(ckpt.meta_int("generator.vocab_size"));
  c.num_classes = static_cast<int>(ckpt.meta_int("generator.num_classes"));
  c.emb_dim = static_cast<int>(ckpt.meta_int("generator.emb_dim"));
  c.hidden = static_cast<int>(ckpt.meta_int("generator.hidden"));
  c.latent = static_cast<int>(ckpt.meta_int("generator.latent"));
  c.class_dim = static_cast<int>(ckpt.meta_int("generator.class_dim"));
  c.max_len = static_cast<int>(ckpt.meta_int("generator.max_len"));
  c.beam_width = static_cast<int>(ckpt.meta_int("generator.beam_width"));
  GeneratorParams p = init_generator(c, 0);
  p.store.import_from(ckpt, "generator.");
  return p;
}

void save_generator(const std::filesystem::path& path, const GeneratorParams& params, std::uint64_t vocab_hash) {
  Checkpoint ckpt;
  ckpt.meta["kind"] = "generator";
  export_generator(ckpt, params, vocab_hash);
  save_checkpoint(path, ckpt);
}

GeneratorParams load_generator(const std::filesystem::path& path, std::optional<std::uint64_t> expected_vocab_hash) {
  return import_generator(load_checkpoint(path), expected_vocab_hash, path.string());
}

}  // namespace advgen::gen
