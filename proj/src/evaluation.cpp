#include "advgen/evaluation.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "advgen/checkpoint.hpp"
#include "advgen/rng.hpp"
#include "json.hpp"

namespace advgen::eval {

using attack::AttackRecord;
using corpus::LabeledText;
using corpus::TokenSequence;
using corpus::Vocabulary;

double attack_success_rate(std::span<const AttackRecord> records) {
  if (records.empty()) throw std::invalid_argument("attack success rate of an empty record set");
  const auto hits = std::count_if(records.begin(), records.end(), [](const AttackRecord& r) { return r.success; });
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

// ---------------------------------------------------------------------------
// Language model

void LmConfig::validate() const {
  if (vocab_size <= Vocabulary::kNumSpecials) throw std::invalid_argument("language model needs a vocabulary");
  if (emb_dim < 1 || hidden < 1) throw std::invalid_argument("language model dimensions must be positive");
}

LanguageModelParams init_language_model(const LmConfig& config, std::uint64_t seed) {
  config.validate();
  LanguageModelParams lm;
  lm.config = config;
  Rng rng(seed);
  const auto v = static_cast<std::size_t>(config.vocab_size);
  lm.embedding = lm.store.add("embedding", v, static_cast<std::size_t>(config.emb_dim));
  lm.store.init_uniform(lm.embedding, 0.1, rng);
  lm.gru = nn::Gru::create(lm.store, "gru", static_cast<std::size_t>(config.emb_dim),
                           static_cast<std::size_t>(config.hidden), rng);
  lm.output = nn::Linear::create(lm.store, "output", static_cast<std::size_t>(config.hidden), v, rng);
  return lm;
}

LanguageModelParams uniform_language_model(int vocab_size) {
  LanguageModelParams lm = init_language_model(LmConfig{vocab_size, 1, 1}, 0);
  for (std::size_t i = 0; i < lm.store.size(); ++i) lm.store.at(i).value.fill(0.0);
  return lm;
}

LanguageModelParams train_language_model(std::span<const TokenSequence> texts, const LmConfig& config,
                                         const LmTrainSettings& settings, LmTrainReport* report) {
  if (settings.batch_size < 1 || settings.epochs < 0 || settings.max_len < 1) {
    throw std::invalid_argument("invalid language model training settings");
  }
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (!texts[i].empty()) usable.push_back(i);
  }
  if (usable.empty()) throw std::invalid_argument("language model training needs non-empty texts");
  LanguageModelParams lm = init_language_model(config, derive_seed(settings.seed, 0));
  nn::Adam opt(lm.store, nn::AdamConfig{settings.lr, 0.9, 0.999, 1e-8, settings.clip_norm});
  Rng order_rng(derive_seed(settings.seed, 1));
  Rng unused(0);
  LmTrainReport rep;
  const auto bs = static_cast<std::size_t>(settings.batch_size);
  for (int epoch = 0; epoch < settings.epochs; ++epoch) {
    std::shuffle(usable.begin(), usable.end(), order_rng);
    double total = 0.0;
    std::size_t tokens = 0;
    for (std::size_t start = 0; start < usable.size(); start += bs) {
      const std::size_t n = std::min(bs, usable.size() - start);
      std::vector<TokenSequence> batch;
      for (std::size_t i = 0; i < n; ++i) batch.push_back(texts[usable[start + i]]);
      const gen::TeacherBatch tb = gen::make_teacher_batch(batch, settings.max_len, 1.0, unused);
      std::size_t count = 0;
      for (std::size_t len : tb.lengths) count += len + 1;
      const std::vector<double> weights(n, 1.0 / static_cast<double>(count));

      ad::Tape t;
      const ad::Var table = t.param(lm.store.at(lm.embedding));
      const nn::GruVars gru = lm.gru.bind(t, lm.store);
      const nn::LinearVars out = lm.output.bind(t, lm.store);
      ad::Var h = t.constant(Matrix(n, static_cast<std::size_t>(config.hidden)));
      std::vector<ad::Var> losses;
      for (std::size_t s = 0; s < tb.inputs.size(); ++s) {
        h = nn::apply(t, gru, ad::gather_rows(t, table, tb.inputs[s]), h);
        losses.push_back(ad::cross_entropy(t, nn::apply(t, out, h), tb.targets[s], weights));
      }
      const std::vector<double> ones(losses.size(), 1.0);
      const ad::Var loss = ad::add_scalars(t, losses, ones);
      const double value = ad::scalar(t, loss);
      ++rep.steps;
      if (!std::isfinite(value)) {
        throw std::runtime_error("language model training diverged at step " + std::to_string(rep.steps));
      }
      t.backward(loss);
      opt.step();
      total += value * static_cast<double>(count);
      tokens += count;
    }
    rep.epoch_loss.push_back(total / static_cast<double>(tokens));
  }
  if (report) *report = std::move(rep);
  return lm;
}

namespace {

constexpr std::size_t kScoreChunk = 256;

// Adds log P(word) for every word of every sequence in batch to out[i].
void score_batch(std::span<const TokenSequence> batch, const LanguageModelParams& lm,
                 std::vector<std::vector<double>>& out) {
  const std::size_t n = batch.size();
  std::size_t longest = 0;
  for (const auto& ids : batch) longest = std::max(longest, ids.size());
  const Matrix& table = lm.store.at(lm.embedding).value;
  const std::size_t emb = table.cols();
  Matrix h(n, static_cast<std::size_t>(lm.config.hidden));
  Matrix x(n, emb);
  for (std::size_t s = 0; s < longest; ++s) {
    for (std::size_t i = 0; i < n; ++i) {
      const int id = s == 0 ? Vocabulary::kGo : (s - 1 < batch[i].size() ? batch[i][s - 1] : Vocabulary::kPad);
      const auto row = table.row(static_cast<std::size_t>(id));
      std::copy(row.begin(), row.end(), x.row(i).begin());
    }
    h = lm.gru.infer_step(lm.store, x, h);
    Matrix logp = lm.output.infer(lm.store, h);
    linalg::log_softmax_rows(logp);
    for (std::size_t i = 0; i < n; ++i) {
      if (s < batch[i].size()) out[i].push_back(logp(i, static_cast<std::size_t>(batch[i][s])));
    }
  }
}

void check_ids(const TokenSequence& ids, int vocab_size) {
  for (int id : ids) {
    if (id < 0 || id >= vocab_size) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
}

}  // namespace

std::vector<double> word_log_probs(const TokenSequence& ids, const LanguageModelParams& lm) {
  check_ids(ids, lm.config.vocab_size);
  std::vector<std::vector<double>> out(1);
  score_batch(std::span<const TokenSequence>(&ids, 1), lm, out);
  return out[0];
}

PerplexityResult perplexity_score(std::span<const TokenSequence> texts, const LanguageModelParams& lm) {
  if (texts.empty()) throw std::invalid_argument("perplexity of an empty corpus");
  for (const auto& ids : texts) check_ids(ids, lm.config.vocab_size);
  double nll = 0.0;
  std::size_t words = 0;
  for (std::size_t start = 0; start < texts.size(); start += kScoreChunk) {
    const std::size_t n = std::min(kScoreChunk, texts.size() - start);
    std::vector<std::vector<double>> out(n);
    score_batch(texts.subspan(start, n), lm, out);
    for (const auto& lp : out) {
      for (double v : lp) nll -= v;
      words += lp.size();
    }
  }
  if (words == 0) throw std::invalid_argument("perplexity of a corpus without words");
  PerplexityResult r;
  r.score = nll / static_cast<double>(words);
  r.perplexity = std::exp(r.score);
  r.words = words;
  return r;
}

void save_language_model(const std::filesystem::path& path, const LanguageModelParams& lm, std::uint64_t vocab_hash) {
  Checkpoint ckpt;
  ckpt.meta["kind"] = "language_model";
  ckpt.meta["lm.vocab_size"] = std::to_string(lm.config.vocab_size);
  ckpt.meta["lm.emb_dim"] = std::to_string(lm.config.emb_dim);
  ckpt.meta["lm.hidden"] = std::to_string(lm.config.hidden);
  ckpt.meta["vocab_hash"] = std::to_string(vocab_hash);
  lm.store.export_to(ckpt, "lm.");
  save_checkpoint(path, ckpt);
}

LanguageModelParams load_language_model(const std::filesystem::path& path,
                                        std::optional<std::uint64_t> expected_vocab_hash) {
  const Checkpoint ckpt = load_checkpoint(path);
  if (!ckpt.meta.count("lm.hidden")) throw std::runtime_error(path.string() + " holds no language model");
  if (expected_vocab_hash && ckpt.meta_value("vocab_hash") != std::to_string(*expected_vocab_hash)) {
    throw std::runtime_error(path.string() + " was trained with a different vocabulary");
  }
  LmConfig c;
  c.vocab_size = static_cast<int>(ckpt.meta_int("lm.vocab_size"));
  c.emb_dim = static_cast<int>(ckpt.meta_int("lm.emb_dim"));
  c.hidden = static_cast<int>(ckpt.meta_int("lm.hidden"));
  LanguageModelParams lm = init_language_model(c, 0);
  lm.store.import_from(ckpt, "lm.");
  return lm;
}

// ---------------------------------------------------------------------------
// Diversity

namespace {

using Gram = std::array<int, 4>;

struct GramHash {
  std::size_t operator()(const Gram& g) const {
    std::uint64_t h = 0;
    for (int v : g) h = derive_seed(h, static_cast<std::uint64_t>(static_cast<std::uint32_t>(v)));
    return static_cast<std::size_t>(h);
  }
};

using GramSet = std::unordered_set<Gram, GramHash>;

// Distinct 4-grams in first-occurrence order.
std::vector<Gram> distinct_grams(const TokenSequence& ids) {
  std::vector<Gram> out;
  if (ids.size() < 4) return out;
  GramSet seen;
  for (std::size_t i = 0; i + 4 <= ids.size(); ++i) {
    const Gram g{ids[i], ids[i + 1], ids[i + 2], ids[i + 3]};
    if (seen.insert(g).second) out.push_back(g);
  }
  return out;
}

// More than 20% of total grams absent from a text sharing `shared` of them.
bool clears_threshold(std::size_t total, std::size_t shared) { return 5 * (total - shared) > total; }

}  // namespace

std::vector<bool> unique_flags(std::span<const TokenSequence> generated) {
  const std::size_t n = generated.size();
  std::vector<std::vector<Gram>> grams(n);
  std::unordered_map<Gram, std::vector<std::size_t>, GramHash> postings;
  for (std::size_t i = 0; i < n; ++i) {
    grams[i] = distinct_grams(generated[i]);
    for (const Gram& g : grams[i]) postings[g].push_back(i);
  }
  std::vector<bool> flags(n, false);
  std::vector<std::size_t> shared(n, 0);
  std::vector<std::size_t> touched;
  for (std::size_t i = 0; i < n; ++i) {
    if (grams[i].empty()) continue;
    touched.clear();
    for (const Gram& g : grams[i]) {
      for (std::size_t j : postings[g]) {
        if (j == i) continue;
        if (shared[j]++ == 0) touched.push_back(j);
      }
    }
    bool unique = true;
    for (std::size_t j : touched) {
      if (!clears_threshold(grams[i].size(), shared[j])) unique = false;
      shared[j] = 0;
    }
    flags[i] = unique;
  }
  return flags;
}

std::vector<bool> unique_flags_bruteforce(std::span<const TokenSequence> generated) {
  const std::size_t n = generated.size();
  std::vector<std::vector<Gram>> grams(n);
  std::vector<GramSet> sets(n);
  for (std::size_t i = 0; i < n; ++i) {
    grams[i] = distinct_grams(generated[i]);
    sets[i].insert(grams[i].begin(), grams[i].end());
  }
  std::vector<bool> flags(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    if (grams[i].empty()) continue;
    bool unique = true;
    for (std::size_t j = 0; j < n && unique; ++j) {
      if (j == i) continue;
      std::size_t shared = 0;
      for (const Gram& g : grams[i]) shared += sets[j].count(g);
      unique = clears_threshold(grams[i].size(), shared);
    }
    flags[i] = unique;
  }
  return flags;
}

DiversityReport diversity_report(std::span<const TokenSequence> generated, std::span<const TokenSequence> train) {
  if (generated.empty()) throw std::invalid_argument("diversity of an empty generated set");
  GramSet train_grams;
  for (const auto& ids : train) {
    for (const Gram& g : distinct_grams(ids)) train_grams.insert(g);
  }
  DiversityReport r;
  r.num_texts = generated.size();
  const std::vector<bool> flags = unique_flags(generated);
  double overlap = 0.0;
  std::size_t unique = 0;
  for (std::size_t i = 0; i < generated.size(); ++i) {
    const std::vector<Gram> grams = distinct_grams(generated[i]);
    if (grams.empty()) {
      ++r.num_short;
      continue;
    }
    ++r.num_eligible;
    const auto found = std::count_if(grams.begin(), grams.end(), [&](const Gram& g) { return train_grams.count(g); });
    overlap += static_cast<double>(found) / static_cast<double>(grams.size());
    if (flags[i]) ++unique;
  }
  if (r.num_eligible > 0) {
    r.train_4gram_overlap_mean = overlap / static_cast<double>(r.num_eligible);
    r.unique_fraction = static_cast<double>(unique) / static_cast<double>(r.num_eligible);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Validity oracle

namespace {

Matrix bag_of_words(std::span<const TokenSequence> batch, int vocab_size) {
  Matrix x(batch.size(), static_cast<std::size_t>(vocab_size));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (int id : batch[i]) {
      if (id < 0 || id >= vocab_size) throw std::out_of_range("token id outside the oracle vocabulary");
      if (!Vocabulary::is_special(id)) x(i, static_cast<std::size_t>(id)) += 1.0;
    }
  }
  return x;
}

double oracle_accuracy(std::span<const LabeledText> texts, const ValidityOracle& oracle) {
  if (texts.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& t : texts) hits += oracle.predict(t.ids) == t.label;
  return static_cast<double>(hits) / static_cast<double>(texts.size());
}

}  // namespace

std::vector<double> ValidityOracle::predict_proba(const TokenSequence& ids) const {
  Matrix logits = linear.infer(store, bag_of_words(std::span<const TokenSequence>(&ids, 1), vocab_size));
  linalg::softmax_rows(logits);
  return {logits.row(0).begin(), logits.row(0).end()};
}

int ValidityOracle::predict(const TokenSequence& ids) const {
  const std::vector<double> p = predict_proba(ids);
  return static_cast<int>(linalg::argmax(p));
}

ValidityOracle train_validity_oracle(std::span<const LabeledText> train, std::span<const LabeledText> dev,
                                     int vocab_size, int num_classes, const OracleSettings& settings) {
  if (train.empty()) throw std::invalid_argument("oracle training needs texts");
  if (vocab_size <= Vocabulary::kNumSpecials || num_classes < 2) throw std::invalid_argument("invalid oracle shape");
  if (settings.batch_size < 1 || settings.epochs < 0) throw std::invalid_argument("invalid oracle settings");
  ValidityOracle oracle;
  oracle.vocab_size = vocab_size;
  oracle.num_classes = num_classes;
  Rng init_rng(derive_seed(settings.seed, 0));
  oracle.linear = nn::Linear::create(oracle.store, "oracle", static_cast<std::size_t>(vocab_size),
                                     static_cast<std::size_t>(num_classes), init_rng);
  nn::Adam opt(oracle.store, nn::AdamConfig{settings.lr, 0.9, 0.999, 1e-8, 5.0});
  Rng order_rng(derive_seed(settings.seed, 1));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const auto bs = static_cast<std::size_t>(settings.batch_size);
  for (int epoch = 0; epoch < settings.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), order_rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t n = std::min(bs, order.size() - start);
      std::vector<TokenSequence> batch;
      std::vector<int> labels;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& item = train[order[start + i]];
        if (item.label < 0 || item.label >= num_classes) throw std::out_of_range("oracle label out of range");
        batch.push_back(item.ids);
        labels.push_back(item.label);
      }
      const std::vector<double> weights(n, 1.0 / static_cast<double>(n));
      ad::Tape t;
      const nn::LinearVars vars = oracle.linear.bind(t, oracle.store);
      const ad::Var x = t.constant(bag_of_words(batch, vocab_size));
      const ad::Var loss = ad::cross_entropy(t, nn::apply(t, vars, x), labels, weights);
      if (!std::isfinite(ad::scalar(t, loss))) throw std::runtime_error("oracle training diverged");
      t.backward(loss);
      opt.step();
    }
  }
  oracle.dev_accuracy = oracle_accuracy(dev, oracle);
  return oracle;
}

void save_oracle(const std::filesystem::path& path, const ValidityOracle& oracle, std::uint64_t vocab_hash) {
  Checkpoint ckpt;
  ckpt.meta["kind"] = "oracle";
  ckpt.meta["oracle.vocab_size"] = std::to_string(oracle.vocab_size);
  ckpt.meta["oracle.num_classes"] = std::to_string(oracle.num_classes);
  std::ostringstream acc;
  acc << std::setprecision(17) << oracle.dev_accuracy;
  ckpt.meta["oracle.dev_accuracy"] = acc.str();
  ckpt.meta["vocab_hash"] = std::to_string(vocab_hash);
  oracle.store.export_to(ckpt, "oracle.");
  save_checkpoint(path, ckpt);
}

ValidityOracle load_oracle(const std::filesystem::path& path, std::optional<std::uint64_t> expected_vocab_hash) {
  const Checkpoint ckpt = load_checkpoint(path);
  if (!ckpt.meta.count("oracle.vocab_size")) throw std::runtime_error(path.string() + " holds no oracle");
  if (expected_vocab_hash && ckpt.meta_value("vocab_hash") != std::to_string(*expected_vocab_hash)) {
    throw std::runtime_error(path.string() + " was trained with a different vocabulary");
  }
  ValidityOracle oracle;
  oracle.vocab_size = static_cast<int>(ckpt.meta_int("oracle.vocab_size"));
  oracle.num_classes = static_cast<int>(ckpt.meta_int("oracle.num_classes"));
  oracle.dev_accuracy = std::stod(ckpt.meta_value("oracle.dev_accuracy"));
  Rng rng(0);
  oracle.linear = nn::Linear::create(oracle.store, "oracle", static_cast<std::size_t>(oracle.vocab_size),
                                     static_cast<std::size_t>(oracle.num_classes), rng);
  oracle.store.import_from(ckpt, "oracle.");
  return oracle;
}

double validity_proxy_rate(std::span<const AttackRecord> records, const ValidityOracle& oracle, double min_accuracy) {
  if (records.empty()) throw std::invalid_argument("validity of an empty record set");
  if (oracle.dev_accuracy < min_accuracy) {
    std::ostringstream msg;
    msg << "validity oracle dev accuracy " << oracle.dev_accuracy << " is below " << min_accuracy;
    throw std::runtime_error(msg.str());
  }
  std::size_t valid = 0;
  for (const auto& r : records) {
    valid += r.predicted_class == r.target_class && oracle.predict(r.generated_ids) == r.condition_class;
  }
  return static_cast<double>(valid) / static_cast<double>(records.size());
}

// ---------------------------------------------------------------------------
// Annotation

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

// Splits one CSV record; quoted fields may span lines, so the reader may be
// advanced past the first line.
bool read_csv_record(std::istream& in, std::vector<std::string>& fields) {
  fields.clear();
  std::string line;
  if (!std::getline(in, line)) return false;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0;; ++i) {
    if (i == line.size()) {
      if (!quoted) break;
      field += '\n';
      if (!std::getline(in, line)) throw std::runtime_error("unterminated quoted CSV field");
      i = static_cast<std::size_t>(-1);
      continue;
    }
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(field));
      field.clear();
    } else if (c != '\r') {
      field += c;
    }
  }
  fields.push_back(std::move(field));
  return true;
}

}  // namespace

AnnotationBatch sample_annotation_batch(std::span<const AttackRecord> records, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("annotation batch size must be positive");
  if (records.size() < n) {
    throw std::invalid_argument("annotation needs " + std::to_string(n) + " records, got " +
                                std::to_string(records.size()));
  }
  std::vector<std::size_t> idx(records.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (std::size_t i = 0; i < n; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  AnnotationBatch batch;
  for (std::size_t i = 0; i < n; ++i) {
    const AttackRecord& r = records[idx[i]];
    batch.rows.push_back(AnnotationRow{idx[i], r.generated_text, r.condition_class, std::nullopt});
  }
  return batch;
}

void write_annotation_csv(const std::filesystem::path& path, const AnnotationBatch& batch) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "id,text,condition_class,human_label\n";
  for (const auto& row : batch.rows) {
    out << row.id << ',' << csv_field(row.text) << ',' << row.condition_class << ','
        << (row.human_label ? std::to_string(*row.human_label) : "") << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

AnnotationBatch read_annotation_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::string> fields;
  if (!read_csv_record(in, fields) || fields != std::vector<std::string>{"id", "text", "condition_class", "human_label"}) {
    throw std::runtime_error(path.string() + ": expected header id,text,condition_class,human_label");
  }
  AnnotationBatch batch;
  std::size_t line = 1;
  while (read_csv_record(in, fields)) {
    ++line;
    if (fields.size() == 1 && fields[0].empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(line) + ": ";
    if (fields.size() != 4) throw std::runtime_error(where + "expected 4 fields");
    try {
      AnnotationRow row;
      row.id = std::stoull(fields[0]);
      row.text = fields[1];
      row.condition_class = std::stoi(fields[2]);
      if (!fields[3].empty()) row.human_label = std::stoi(fields[3]);
      batch.rows.push_back(std::move(row));
    } catch (const std::logic_error&) {
      throw std::runtime_error(where + "malformed number");
    }
  }
  return batch;
}

AnnotationBatch export_annotation_batch(std::span<const AttackRecord> records, const std::filesystem::path& path,
                                        std::size_t n, std::uint64_t seed) {
  AnnotationBatch batch = sample_annotation_batch(records, n, seed);
  write_annotation_csv(path, batch);
  return batch;
}

HumanValidity human_validity(const AnnotationBatch& batch) {
  HumanValidity h;
  for (const auto& row : batch.rows) {
    if (!row.human_label) continue;
    ++h.labeled;
    h.valid += *row.human_label == row.condition_class;
  }
  if (h.labeled == 0) throw std::invalid_argument("annotation batch has no labeled rows");
  h.rate = static_cast<double>(h.valid) / static_cast<double>(h.labeled);
  return h;
}

// ---------------------------------------------------------------------------
// Adversarial training

DefenseReport augment_and_retrain(const corpus::DatasetSplits& base, std::span<const AttackRecord> records,
                                  const target::TargetParams& target, const target::TargetTrainSettings& settings,
                                  const DefenseConfig& config) {
  if (records.empty()) throw std::invalid_argument("augmentation needs adversarial records");
  if (!(config.holdout_fraction > 0.0 && config.holdout_fraction < 1.0)) {
    throw std::invalid_argument("holdout_fraction must lie in (0, 1)");
  }
  DefenseReport rep;
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].generated_ids.empty()) {
      ++rep.skipped_empty;
    } else {
      usable.push_back(i);
    }
  }
  if (usable.size() < 2) throw std::invalid_argument("augmentation needs at least two non-empty records");
  Rng rng(derive_seed(config.seed, 0));
  std::shuffle(usable.begin(), usable.end(), rng);
  auto n_test = static_cast<std::size_t>(std::llround(config.holdout_fraction * static_cast<double>(usable.size())));
  n_test = std::clamp<std::size_t>(n_test, 1, usable.size() - 1);
  rep.test_indices.assign(usable.end() - static_cast<std::ptrdiff_t>(n_test), usable.end());
  usable.resize(usable.size() - n_test);
  if (config.max_augment >= 0 && usable.size() > static_cast<std::size_t>(config.max_augment)) {
    usable.resize(static_cast<std::size_t>(config.max_augment));
  }
  const auto as_text = [&](std::size_t i) {
    return LabeledText{records[i].generated_ids, records[i].condition_class, records[i].generated_text};
  };
  std::vector<LabeledText> adversarial;
  std::vector<LabeledText> test;
  for (std::size_t i : usable) adversarial.push_back(as_text(i));
  for (std::size_t i : rep.test_indices) test.push_back(as_text(i));
  rep.train_adversarial = adversarial.size();
  rep.test_adversarial = test.size();
  rep.clean_before = target::accuracy(base.test, target);
  rep.adversarial_before = target::accuracy(test, target);

  corpus::DatasetSplits mixed = base;
  mixed.train.insert(mixed.train.end(), adversarial.begin(), adversarial.end());
  mixed.index_classes(target.config.num_classes);
  const target::TargetParams retrained = target::train_target(mixed, target.config, settings);
  rep.clean_after = target::accuracy(base.test, retrained);
  rep.adversarial_after = target::accuracy(test, retrained);
  return rep;
}

// ---------------------------------------------------------------------------
// Timing

TimingMode parse_timing_mode(const std::string& name) {
  if (name == "unrestricted") return TimingMode::kUnrestricted;
  if (name == "pairwise") return TimingMode::kPairwise;
  if (name == "random") return TimingMode::kRandom;
  if (name == "fgsm") return TimingMode::kFgsm;
  if (name == "deepfool") return TimingMode::kDeepFool;
  throw std::invalid_argument("unknown timing mode '" + name + "'");
}

std::string timing_mode_name(TimingMode mode) {
  switch (mode) {
    case TimingMode::kUnrestricted: return "unrestricted";
    case TimingMode::kPairwise: return "pairwise";
    case TimingMode::kRandom: return "random";
    case TimingMode::kFgsm: return "fgsm";
    case TimingMode::kDeepFool: return "deepfool";
  }
  return "unknown";
}

TimingResult timing_benchmark(TimingMode mode, const TimingInputs& in, int count) {
  if (count <= 0) throw std::invalid_argument("timing needs a positive count");
  const bool generator_mode = mode == TimingMode::kUnrestricted || mode == TimingMode::kPairwise;
  if (generator_mode && !in.generator) throw std::invalid_argument("generator timing needs a generator");
  if (mode != TimingMode::kUnrestricted && in.texts.empty()) throw std::invalid_argument("timing needs source texts");
  const auto n = static_cast<std::size_t>(count);
  std::vector<LabeledText> sources;
  if (mode != TimingMode::kUnrestricted) {
    for (std::size_t i = 0; i < n; ++i) sources.push_back(in.texts[i % in.texts.size()]);
  }

  const auto start = std::chrono::steady_clock::now();
  std::size_t produced = 0;
  switch (mode) {
    case TimingMode::kUnrestricted:
      produced = attack::generate_unrestricted(count, in.condition_class, *in.generator, in.context, in.seed,
                                               in.batch_size).size();
      break;
    case TimingMode::kPairwise:
      produced = attack::attack_pairwise(sources, *in.generator, in.context, in.seed).size();
      break;
    case TimingMode::kRandom:
      for (std::size_t i = 0; i < n; ++i) {
        produced += !attack::baseline_random(sources[i], in.baseline, in.context, i).mode.empty();
      }
      break;
    case TimingMode::kFgsm:
      for (const auto& s : sources) produced += !attack::baseline_fgsm_nns(s, in.baseline, in.context).mode.empty();
      break;
    case TimingMode::kDeepFool:
      for (const auto& s : sources) produced += !attack::baseline_deepfool_nns(s, in.baseline, in.context).mode.empty();
      break;
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (produced != n) throw std::logic_error("timing produced an unexpected number of examples");
  TimingResult r;
  r.mode = mode;
  r.count = count;
  r.total_seconds = std::max(seconds, 1e-9);
  r.seconds_per_example = r.total_seconds / static_cast<double>(count);
  return r;
}

// ---------------------------------------------------------------------------
// Report

MetricsReport compute_metrics(std::span<const AttackRecord> records, const LanguageModelParams& lm,
                              std::span<const TokenSequence> train, const ValidityOracle* oracle) {
  MetricsReport m;
  m.num_records = records.size();
  m.attack_success_rate = attack_success_rate(records);
  m.num_successes = static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [](const AttackRecord& r) { return r.success; }));
  std::vector<TokenSequence> generated;
  generated.reserve(records.size());
  for (const auto& r : records) generated.push_back(r.generated_ids);
  m.perplexity = perplexity_score(generated, lm);
  m.diversity = diversity_report(generated, train);
  if (oracle) {
    m.validity_rate = validity_proxy_rate(records, *oracle);
    m.oracle_dev_accuracy = oracle->dev_accuracy;
  }
  return m;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["num_records"] = num_records;
  j["num_successes"] = num_successes;
  j["attack_success_rate"] = attack_success_rate;
  j["perplexity_score"] = perplexity.score;
  j["perplexity_exp"] = perplexity.perplexity;
  j["perplexity_words"] = perplexity.words;
  j["validity_rate"] = validity_rate ? nlohmann::ordered_json(*validity_rate) : nlohmann::ordered_json(nullptr);
  j["oracle_dev_accuracy"] =
      oracle_dev_accuracy ? nlohmann::ordered_json(*oracle_dev_accuracy) : nlohmann::ordered_json(nullptr);
  j["diversity"] = {{"train_4gram_overlap_mean", diversity.train_4gram_overlap_mean},
                    {"unique_fraction", diversity.unique_fraction},
                    {"num_texts", diversity.num_texts},
                    {"num_eligible", diversity.num_eligible},
                    {"num_short", diversity.num_short}};
  if (timing) {
    j["timing"] = {{"mode", timing_mode_name(timing->mode)},
                   {"count", timing->count},
                   {"total_seconds", timing->total_seconds},
                   {"seconds_per_example", timing->seconds_per_example}};
  } else {
    j["timing"] = nullptr;
  }
  return j.dump(2);
}

std::string MetricsReport::to_table() const {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  const auto line = [&](const std::string& name, const std::string& value) {
    out << std::left << std::setw(28) << name << value << '\n';
  };
  const auto num = [](double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(4) << v;
    return s.str();
  };
  line("records", std::to_string(num_records));
  line("attack success rate", num(attack_success_rate));
  line("perplexity score (NLL)", num(perplexity.score));
  line("perplexity (exp)", num(perplexity.perplexity));
  line("validity rate", validity_rate ? num(*validity_rate) : "n/a");
  line("train 4-gram overlap", num(diversity.train_4gram_overlap_mean));
  line("unique fraction", num(diversity.unique_fraction));
  line("texts under 4 tokens", std::to_string(diversity.num_short));
  if (timing) {
    std::ostringstream s;
    s << std::scientific << std::setprecision(3) << timing->seconds_per_example;
    line("seconds per example", s.str());
  }
  return out.str();
}

}  // namespace advgen::eval
