#include "advgen/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "advgen/rng.hpp"
#include "json.hpp"

namespace advgen::attack {

using corpus::LabeledText;
using corpus::TokenSequence;
using corpus::Vocabulary;
using nlohmann::json;

namespace {

constexpr std::size_t kChunk = 256;

void check_context(const AttackContext& ctx) {
  if (!ctx.vocab || !ctx.target) throw std::invalid_argument("attack context needs a vocabulary and a target");
  if (!ctx.target->frozen()) throw std::logic_error("attacks require a trained, frozen target model");
  if (ctx.vocab->size() != ctx.target->config.vocab_size) {
    throw std::invalid_argument("target vocabulary size " + std::to_string(ctx.target->config.vocab_size) +
                                " does not match vocabulary of " + std::to_string(ctx.vocab->size()));
  }
}

void check_generator(const gen::GeneratorParams& g, const AttackContext& ctx) {
  if (g.config.vocab_size != ctx.target->config.vocab_size || g.config.num_classes != ctx.target->config.num_classes) {
    throw std::invalid_argument("generator and target disagree on vocabulary or classes");
  }
}

TokenSequence strip_eos(TokenSequence ids) {
  const auto eos = std::find(ids.begin(), ids.end(), Vocabulary::kEos);
  ids.erase(eos, ids.end());
  return ids;
}

// Scores a batch, routing empty sequences through the all-PAD input.
Matrix score_batch(std::span<const TokenSequence> batch, const target::TargetParams& t) {
  Matrix out(batch.size(), static_cast<std::size_t>(t.config.num_classes));
  std::vector<TokenSequence> nonempty;
  std::vector<std::size_t> where;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].empty()) {
      const auto p = score_ids(batch[i], t);
      std::copy(p.begin(), p.end(), out.row(i).begin());
    } else {
      nonempty.push_back(batch[i]);
      where.push_back(i);
    }
  }
  if (!nonempty.empty()) {
    const Matrix probs = target::predict_hard_batch(nonempty, t);
    for (std::size_t j = 0; j < where.size(); ++j) {
      std::copy(probs.row(j).begin(), probs.row(j).end(), out.row(where[j]).begin());
    }
  }
  return out;
}

void finish_record(AttackRecord& r, std::span<const double> probs, const AttackContext& ctx) {
  r.prediction.assign(probs.begin(), probs.end());
  r.predicted_class = static_cast<int>(linalg::argmax(probs));
  r.generated_text = corpus::decode_tokens(r.generated_ids, *ctx.vocab);
  r.success = r.is_baseline() ? r.predicted_class != r.condition_class : r.predicted_class == r.target_class;
}

// Decodes states, scores the outputs and fills records[offset..].
void decode_and_score(const Matrix& states, const gen::GeneratorParams& g, const AttackContext& ctx,
                      std::vector<AttackRecord>& records, std::size_t offset) {
  const int max_len = ctx.target->config.max_len + 1;
  auto outputs = gen::decode_beam_search(states, g.config.beam_width, max_len, g);
  // hypotheses cut by max_len carry no EOS and one word too many
  for (auto& o : outputs) {
    o = strip_eos(std::move(o));
    if (o.size() > static_cast<std::size_t>(max_len - 1)) o.resize(static_cast<std::size_t>(max_len - 1));
  }
  const Matrix probs = score_batch(outputs, *ctx.target);
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    AttackRecord& r = records[offset + i];
    r.generated_ids = std::move(outputs[i]);
    finish_record(r, probs.row(i), ctx);
  }
}

// Replaces positions of x by nearest neighbours of the perturbed rows.
TokenSequence project_rows(const TokenSequence& ids, const Matrix& perturbed, std::span<const std::size_t> positions,
                           const Matrix& table) {
  TokenSequence out = ids;
  for (std::size_t p : positions) out[p] = nearest_neighbor_word(perturbed.row(p), table);
  return out;
}

AttackRecord baseline_record(const std::string& name, const LabeledText& x, const AttackContext& ctx) {
  AttackRecord r;
  r.mode = "baseline:" + name;
  r.source_text = corpus::decode_tokens(x.ids, *ctx.vocab);
  r.condition_class = x.label;
  r.target_class = ctx.target_class(x.label);
  return r;
}

std::size_t usable_length(const TokenSequence& ids, const target::TargetParams& t) {
  return std::min(ids.size(), static_cast<std::size_t>(t.config.max_len));
}

}  // namespace

bool AttackRecord::consistent() const {
  if (prediction.empty()) return false;
  const int argmax = static_cast<int>(linalg::argmax(prediction));
  if (argmax != predicted_class) return false;
  const bool expected = is_baseline() ? predicted_class != condition_class : predicted_class == target_class;
  return expected == success;
}

int AttackContext::target_class(int k) const {
  const int n = target->config.num_classes;
  if (target_class_map.empty()) return (k + 1) % n;
  return target_class_map.at(static_cast<std::size_t>(k));
}

void write_records(const std::filesystem::path& path, std::span<const AttackRecord> records) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write attack records: " + path.string());
  for (const auto& r : records) {
    json j;
    j["mode"] = r.mode;
    j["source_text"] = r.source_text ? json(*r.source_text) : json(nullptr);
    j["condition_class"] = r.condition_class;
    j["target_class"] = r.target_class;
    j["generated_text"] = r.generated_text;
    j["generated_ids"] = r.generated_ids;
    j["prediction"] = r.prediction;
    j["predicted_class"] = r.predicted_class;
    j["success"] = r.success;
    j["latent_seed"] = r.latent_seed ? json(*r.latent_seed) : json(nullptr);
    out << j.dump() << '\n';
  }
}

std::vector<AttackRecord> read_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read attack records: " + path.string());
  std::vector<AttackRecord> records;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      AttackRecord r;
      r.mode = j.at("mode").get<std::string>();
      if (!j.at("source_text").is_null()) r.source_text = j.at("source_text").get<std::string>();
      r.condition_class = j.at("condition_class").get<int>();
      r.target_class = j.at("target_class").get<int>();
      r.generated_text = j.at("generated_text").get<std::string>();
      r.generated_ids = j.at("generated_ids").get<TokenSequence>();
      r.prediction = j.at("prediction").get<std::vector<double>>();
      r.predicted_class = j.at("predicted_class").get<int>();
      r.success = j.at("success").get<bool>();
      if (!j.at("latent_seed").is_null()) r.latent_seed = j.at("latent_seed").get<std::uint64_t>();
      records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return records;
}

std::vector<double> score_ids(const TokenSequence& ids, const target::TargetParams& target) {
  if (ids.empty()) return target::predict_soft(target::embed_sequence(ids, target), target);
  return target::predict_hard(ids, target);
}

std::vector<AttackRecord> attack_pairwise(std::span<const LabeledText> texts, const gen::GeneratorParams& generator,
                                          const AttackContext& ctx, std::uint64_t seed) {
  check_context(ctx);
  check_generator(generator, ctx);
  std::vector<AttackRecord> records(texts.size());
  const auto dz = static_cast<std::size_t>(generator.config.latent);
  for (std::size_t start = 0; start < texts.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, texts.size() - start);
    std::vector<TokenSequence> batch;
    std::vector<int> classes;
    for (std::size_t i = 0; i < n; ++i) {
      const LabeledText& x = texts[start + i];
      if (x.ids.empty()) throw std::invalid_argument("pairwise attack on an empty text");
      batch.push_back(x.ids);
      classes.push_back(x.label);
      AttackRecord& r = records[start + i];
      r.mode = "pairwise";
      r.source_text = corpus::decode_tokens(x.ids, *ctx.vocab);
      r.condition_class = x.label;
      r.target_class = ctx.target_class(x.label);
      r.latent_seed = derive_seed(seed, start + i);
    }
    Matrix mu, log_sigma;
    gen::encode_batch(batch, generator, mu, log_sigma);
    Matrix z(n, dz);
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng(*records[start + i].latent_seed);
      for (std::size_t j = 0; j < dz; ++j) z(i, j) = mu(i, j) + std::exp(log_sigma(i, j)) * standard_normal(rng);
    }
    decode_and_score(gen::init_decoder_state(z, classes, generator), generator, ctx, records, start);
  }
  return records;
}

std::vector<AttackRecord> generate_unrestricted(int n, int condition_class, const gen::GeneratorParams& generator,
                                                const AttackContext& ctx, std::uint64_t seed, int batch_size) {
  if (n <= 0) throw std::invalid_argument("generate_unrestricted needs n > 0, got " + std::to_string(n));
  if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
  check_context(ctx);
  check_generator(generator, ctx);
  if (condition_class < 0 || condition_class >= generator.config.num_classes) {
    throw std::out_of_range("condition class " + std::to_string(condition_class) + " out of range");
  }
  const auto total = static_cast<std::size_t>(n);
  const auto dz = static_cast<std::size_t>(generator.config.latent);
  const auto chunk = static_cast<std::size_t>(batch_size);
  std::vector<AttackRecord> records(total);
  for (std::size_t start = 0; start < total; start += chunk) {
    const std::size_t len = std::min(chunk, total - start);
    Matrix z(len, dz);
    for (std::size_t i = 0; i < len; ++i) {
      AttackRecord& r = records[start + i];
      r.mode = "unrestricted";
      r.condition_class = condition_class;
      r.target_class = ctx.target_class(condition_class);
      r.latent_seed = derive_seed(seed, start + i);
      const Matrix zi = gen::sample_latent(1, generator.config.latent, *r.latent_seed);
      std::copy_n(zi.row(0).begin(), dz, z.row(i).begin());
    }
    const std::vector<int> classes(len, condition_class);
    decode_and_score(gen::init_decoder_state(z, classes, generator), generator, ctx, records, start);
  }
  return records;
}

void BaselineConfig::validate() const {
  if (!(epsilon >= 0.0)) throw std::invalid_argument("epsilon must be non-negative");
  if (!(modify_fraction > 0.0 && modify_fraction <= 1.0)) {
    throw std::invalid_argument("modify_fraction must lie in (0, 1]");
  }
  if (!(fgsm_top_fraction > 0.0 && fgsm_top_fraction <= 1.0)) {
    throw std::invalid_argument("fgsm_top_fraction must lie in (0, 1]");
  }
  if (max_deepfool_iters < 0) throw std::invalid_argument("max_deepfool_iters must be non-negative");
  if (!(overshoot >= 0.0)) throw std::invalid_argument("overshoot must be non-negative");
}

int nearest_neighbor_word(std::span<const double> v, const Matrix& table) {
  if (table.rows() <= static_cast<std::size_t>(Vocabulary::kNumSpecials)) {
    throw std::invalid_argument("embedding table has no non-special rows");
  }
  if (v.size() != table.cols()) throw std::invalid_argument("query dimension does not match the embedding table");
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t r = Vocabulary::kNumSpecials; r < table.rows(); ++r) {
    const auto row = table.row(r);
    double d = 0.0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double diff = row[j] - v[j];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(r);
    }
  }
  return best;
}

AttackRecord baseline_random(const LabeledText& x, const BaselineConfig& cfg, const AttackContext& ctx,
                             std::uint64_t index) {
  cfg.validate();
  check_context(ctx);
  AttackRecord r = baseline_record("random", x, ctx);
  r.latent_seed = derive_seed(cfg.seed, index);
  Rng rng(*r.latent_seed);
  const std::size_t len = x.ids.size();
  const auto count = static_cast<std::size_t>(std::ceil(cfg.modify_fraction * static_cast<double>(len) - 1e-9));
  std::vector<std::size_t> positions(len);
  std::iota(positions.begin(), positions.end(), 0);
  std::shuffle(positions.begin(), positions.end(), rng);
  positions.resize(std::min(count, len));
  // uniform over the other non-special words, so every chosen position changes
  const int words = ctx.vocab->size() - Vocabulary::kNumSpecials;
  if (words < 2) throw std::invalid_argument("random baseline needs at least two non-special words");
  std::uniform_int_distribution<int> draw(0, words - 2);
  r.generated_ids = x.ids;
  for (std::size_t p : positions) {
    const int current = x.ids[p] - Vocabulary::kNumSpecials;
    int pick = draw(rng);
    if (current >= 0 && pick >= current) ++pick;
    r.generated_ids[p] = Vocabulary::kNumSpecials + pick;
  }
  finish_record(r, score_ids(r.generated_ids, *ctx.target), ctx);
  return r;
}

double embedding_rms(const Matrix& table) {
  if (table.rows() <= static_cast<std::size_t>(corpus::Vocabulary::kNumSpecials) || table.cols() == 0) {
    throw std::invalid_argument("embedding table has no word rows");
  }
  double s = 0.0;
  for (std::size_t i = corpus::Vocabulary::kNumSpecials; i < table.rows(); ++i) {
    for (double v : table.row(i)) s += v * v;
  }
  return std::sqrt(s / static_cast<double>((table.rows() - corpus::Vocabulary::kNumSpecials) * table.cols()));
}

AttackRecord baseline_fgsm_nns(const LabeledText& x, const BaselineConfig& cfg, const AttackContext& ctx) {
  cfg.validate();
  check_context(ctx);
  const auto& t = *ctx.target;
  AttackRecord r = baseline_record("fgsm", x, ctx);
  if (x.ids.empty()) throw std::invalid_argument("FGSM on an empty text");
  const std::size_t len = usable_length(x.ids, t);
  const Matrix grad = target::input_gradients(x.ids, x.label, t);  // ascends CE of the true class
  Matrix w = target::embed_sequence(x.ids, t);

  std::vector<std::size_t> positions(len);
  std::iota(positions.begin(), positions.end(), 0);
  if (cfg.fgsm_top_fraction < 1.0) {
    const auto keep = static_cast<std::size_t>(std::ceil(cfg.fgsm_top_fraction * static_cast<double>(len) - 1e-9));
    std::vector<double> norms(len);
    for (std::size_t p = 0; p < len; ++p) {
      for (double g : grad.row(p)) norms[p] += g * g;
    }
    std::stable_sort(positions.begin(), positions.end(),
                     [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });
    positions.resize(keep);
    std::sort(positions.begin(), positions.end());
  }
  const double eps = cfg.scale_epsilon ? cfg.epsilon * embedding_rms(t.embedding_table()) : cfg.epsilon;
  for (std::size_t p : positions) {
    for (std::size_t j = 0; j < w.cols(); ++j) {
      const double g = grad(p, j);
      w(p, j) += eps * static_cast<double>((g > 0.0) - (g < 0.0));
    }
  }
  r.generated_ids = project_rows(x.ids, w, positions, t.embedding_table());
  finish_record(r, score_ids(r.generated_ids, t), ctx);
  return r;
}

DeepFoolTrace deepfool_binary(const Matrix& x0, const std::function<double(const Matrix&, Matrix&)>& score,
                              int max_iters, double overshoot) {
  DeepFoolTrace trace;
  trace.perturbation = Matrix(x0.rows(), x0.cols());
  Matrix r_total(x0.rows(), x0.cols());
  Matrix x = x0;
  Matrix grad;
  double s = score(x, grad);
  while (s <= 0.0 && trace.iterations < max_iters) {
    double norm2 = 0.0;
    for (double g : grad.flat()) norm2 += g * g;
    if (norm2 == 0.0) break;
    // minimal step onto the linearised boundary
    const double step = (std::abs(s) + 1e-12) / norm2;
    for (std::size_t i = 0; i < r_total.size(); ++i) r_total.flat()[i] += step * grad.flat()[i];
    ++trace.iterations;
    for (std::size_t i = 0; i < x.size(); ++i) {
      trace.perturbation.flat()[i] = (1.0 + overshoot) * r_total.flat()[i];
      x.flat()[i] = x0.flat()[i] + trace.perturbation.flat()[i];
    }
    s = score(x, grad);
  }
  trace.crossed = s > 0.0;
  return trace;
}

AttackRecord baseline_deepfool_nns(const LabeledText& x, const BaselineConfig& cfg, const AttackContext& ctx,
                                   DeepFoolTrace* trace) {
  cfg.validate();
  check_context(ctx);
  const auto& t = *ctx.target;
  if (t.config.num_classes != 2) {
    throw std::invalid_argument("DeepFool+NNS supports binary targets only, got " +
                                std::to_string(t.config.num_classes) + " classes");
  }
  if (x.ids.empty()) throw std::invalid_argument("DeepFool on an empty text");
  AttackRecord r = baseline_record("deepfool", x, ctx);
  const std::size_t len = usable_length(x.ids, t);
  const int other = 1 - x.label;
  const Matrix w0 = target::embed_sequence(x.ids, t);
  // only the text's own positions may move; PAD rows stay fixed
  auto score = [&](const Matrix& w, Matrix& grad) {
    const double s = target::logit_margin(w, other, x.label, t, &grad);
    for (std::size_t p = len; p < grad.rows(); ++p) std::fill(grad.row(p).begin(), grad.row(p).end(), 0.0);
    return s;
  };
  const DeepFoolTrace tr = deepfool_binary(w0, score, cfg.max_deepfool_iters, cfg.overshoot);
  r.generated_ids = x.ids;
  if (tr.iterations > 0) {
    Matrix w = w0;
    for (std::size_t i = 0; i < w.size(); ++i) w.flat()[i] += tr.perturbation.flat()[i];
    std::vector<std::size_t> positions(len);
    std::iota(positions.begin(), positions.end(), 0);
    r.generated_ids = project_rows(x.ids, w, positions, t.embedding_table());
  }
  if (trace) *trace = tr;
  finish_record(r, score_ids(r.generated_ids, t), ctx);
  return r;
}

std::vector<AttackRecord> run_baseline(const std::string& name, std::span<const LabeledText> texts,
                                       const BaselineConfig& cfg, const AttackContext& ctx) {
  std::vector<AttackRecord> out;
  out.reserve(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (name == "random") {
      out.push_back(baseline_random(texts[i], cfg, ctx, i));
    } else if (name == "fgsm") {
      out.push_back(baseline_fgsm_nns(texts[i], cfg, ctx));
    } else if (name == "deepfool") {
      out.push_back(baseline_deepfool_nns(texts[i], cfg, ctx));
    } else {
      throw std::invalid_argument("unknown baseline '" + name + "' (expected random, fgsm or deepfool)");
    }
  }
  return out;
}

double success_rate(std::span<const AttackRecord> records) {
  if (records.empty()) return 0.0;
  const auto hits = std::count_if(records.begin(), records.end(), [](const AttackRecord& r) { return r.success; });
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

}  // namespace advgen::attack
