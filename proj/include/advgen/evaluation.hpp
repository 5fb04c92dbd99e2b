#pragma once

// Metrics over generated texts (success rate, language-model perplexity,
// 4-gram diversity, oracle validity, speed) and the adversarial-training
// harness.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advgen/attacks.hpp"
#include "advgen/corpus.hpp"
#include "advgen/generator.hpp"
#include "advgen/nn.hpp"
#include "advgen/target_model.hpp"

namespace advgen::eval {

// Fraction of records with success set; throws on an empty set.
double attack_success_rate(std::span<const attack::AttackRecord> records);

// ---------------------------------------------------------------------------
// Reference language model: GRU over GO + words, predicting the next token.

struct LmConfig {
  int vocab_size = 0;
  int emb_dim = 32;
  int hidden = 64;

  void validate() const;
};

struct LanguageModelParams {
  LmConfig config;
  nn::ParamStore store;
  std::size_t embedding = 0;
  nn::Gru gru;
  nn::Linear output;
};

LanguageModelParams init_language_model(const LmConfig& config, std::uint64_t seed);
// All weights zero, so every next-token distribution is uniform over |V|.
LanguageModelParams uniform_language_model(int vocab_size);

struct LmTrainSettings {
  int epochs = 5;
  int batch_size = 32;
  double lr = 3e-3;
  double clip_norm = 5.0;
  std::size_t max_len = 20;
  std::uint64_t seed = 1;
};

struct LmTrainReport {
  std::vector<double> epoch_loss;  // mean per-token NLL including EOS
  long steps = 0;
};

// Throws std::runtime_error naming the step if the loss becomes non-finite.
LanguageModelParams train_language_model(std::span<const corpus::TokenSequence> texts, const LmConfig& config,
                                         const LmTrainSettings& settings, LmTrainReport* report = nullptr);

// log P(x_j | GO, x_1..x_{j-1}) for each word; EOS is not scored.
std::vector<double> word_log_probs(const corpus::TokenSequence& ids, const LanguageModelParams& lm);

struct PerplexityResult {
  double score = 0.0;       // mean per-word NLL over the corpus
  double perplexity = 0.0;  // exp(score)
  std::size_t words = 0;
};

// Throws on an empty corpus or one without words.
PerplexityResult perplexity_score(std::span<const corpus::TokenSequence> texts, const LanguageModelParams& lm);

void save_language_model(const std::filesystem::path& path, const LanguageModelParams& lm, std::uint64_t vocab_hash);
LanguageModelParams load_language_model(const std::filesystem::path& path,
                                        std::optional<std::uint64_t> expected_vocab_hash = std::nullopt);

// ---------------------------------------------------------------------------
// 4-gram diversity.

struct DiversityReport {
  double train_4gram_overlap_mean = 0.0;
  double unique_fraction = 0.0;
  std::size_t num_texts = 0;
  std::size_t num_eligible = 0;  // texts with at least one 4-gram
  std::size_t num_short = 0;     // excluded: fewer than 4 tokens
};

// A text is unique when, against every other generated text, more than 20%
// of its distinct 4-grams are absent from that text. Inverted index.
DiversityReport diversity_report(std::span<const corpus::TokenSequence> generated,
                                 std::span<const corpus::TokenSequence> train);

// Same unique flags by direct pairwise comparison; for testing.
std::vector<bool> unique_flags_bruteforce(std::span<const corpus::TokenSequence> generated);
std::vector<bool> unique_flags(std::span<const corpus::TokenSequence> generated);

// ---------------------------------------------------------------------------
// Validity oracle: bag-of-words softmax regression trained on a partition
// disjoint from the target's training data.

struct ValidityOracle {
  int vocab_size = 0;
  int num_classes = 2;
  nn::ParamStore store;
  nn::Linear linear;
  double dev_accuracy = 0.0;

  std::vector<double> predict_proba(const corpus::TokenSequence& ids) const;
  int predict(const corpus::TokenSequence& ids) const;
};

struct OracleSettings {
  int epochs = 30;
  int batch_size = 32;
  double lr = 0.05;
  std::uint64_t seed = 1;
};

ValidityOracle train_validity_oracle(std::span<const corpus::LabeledText> train,
                                     std::span<const corpus::LabeledText> dev, int vocab_size, int num_classes,
                                     const OracleSettings& settings);

void save_oracle(const std::filesystem::path& path, const ValidityOracle& oracle, std::uint64_t vocab_hash);
ValidityOracle load_oracle(const std::filesystem::path& path,
                           std::optional<std::uint64_t> expected_vocab_hash = std::nullopt);

inline constexpr double kMinOracleAccuracy = 0.9;

// Fraction of records the oracle assigns the condition class while the
// target predicts the target class. Throws on an empty set or an oracle
// whose dev accuracy is below min_accuracy.
double validity_proxy_rate(std::span<const attack::AttackRecord> records, const ValidityOracle& oracle,
                           double min_accuracy = kMinOracleAccuracy);

// ---------------------------------------------------------------------------
// Human annotation round trip.

struct AnnotationRow {
  std::size_t id = 0;  // index into the source records
  std::string text;
  int condition_class = 0;
  std::optional<int> human_label;
};

struct AnnotationBatch {
  std::vector<AnnotationRow> rows;
};

// n records drawn without replacement; throws when fewer than n exist.
AnnotationBatch sample_annotation_batch(std::span<const attack::AttackRecord> records, std::size_t n,
                                        std::uint64_t seed);
// CSV with header id,text,condition_class,human_label.
void write_annotation_csv(const std::filesystem::path& path, const AnnotationBatch& batch);
AnnotationBatch read_annotation_csv(const std::filesystem::path& path);
AnnotationBatch export_annotation_batch(std::span<const attack::AttackRecord> records, const std::filesystem::path& path,
                                        std::size_t n = 100, std::uint64_t seed = 1);

struct HumanValidity {
  double rate = 0.0;  // labels equal to the condition class over labeled rows
  std::size_t labeled = 0;
  std::size_t valid = 0;
};

// Throws when no row is labeled.
HumanValidity human_validity(const AnnotationBatch& batch);

// ---------------------------------------------------------------------------
// Adversarial training.

struct DefenseConfig {
  double holdout_fraction = 0.2;
  // Cap on adversarial training texts; negative uses all of them.
  long max_augment = -1;
  std::uint64_t seed = 1;
};

struct DefenseReport {
  double clean_before = 0.0;
  double adversarial_before = 0.0;
  double clean_after = 0.0;
  double adversarial_after = 0.0;
  std::size_t train_adversarial = 0;
  std::size_t test_adversarial = 0;
  std::size_t skipped_empty = 0;
  std::vector<std::size_t> test_indices;  // held-out records
};

// Records become texts labeled with their condition class, are shuffled and
// split into augmentation and held-out test parts. "Before" scores the given
// target; "after" retrains the target architecture from scratch on the base
// train split plus the augmentation part.
DefenseReport augment_and_retrain(const corpus::DatasetSplits& base, std::span<const attack::AttackRecord> records,
                                  const target::TargetParams& target, const target::TargetTrainSettings& settings,
                                  const DefenseConfig& config);

// ---------------------------------------------------------------------------
// Speed.

enum class TimingMode { kUnrestricted, kPairwise, kRandom, kFgsm, kDeepFool };

TimingMode parse_timing_mode(const std::string& name);
std::string timing_mode_name(TimingMode mode);

struct TimingInputs {
  const gen::GeneratorParams* generator = nullptr;  // generator modes
  attack::AttackContext context;
  std::span<const corpus::LabeledText> texts;  // source texts, cycled as needed
  attack::BaselineConfig baseline;
  int batch_size = 256;
  int condition_class = 0;
  std::uint64_t seed = 1;
};

struct TimingResult {
  TimingMode mode = TimingMode::kUnrestricted;
  int count = 0;
  double total_seconds = 0.0;
  double seconds_per_example = 0.0;
};

// Wall-clock per example: batched feed-forward for generator modes, one
// example at a time for baselines.
TimingResult timing_benchmark(TimingMode mode, const TimingInputs& inputs, int count = 1000);

// ---------------------------------------------------------------------------
// Report.

struct MetricsReport {
  std::size_t num_records = 0;
  std::size_t num_successes = 0;
  double attack_success_rate = 0.0;
  PerplexityResult perplexity;
  std::optional<double> validity_rate;
  std::optional<double> oracle_dev_accuracy;
  DiversityReport diversity;
  std::optional<TimingResult> timing;

  std::string to_json() const;
  std::string to_table() const;
};

// Validity is left empty when no oracle is given.
MetricsReport compute_metrics(std::span<const attack::AttackRecord> records, const LanguageModelParams& lm,
                              std::span<const corpus::TokenSequence> train, const ValidityOracle* oracle);

}  // namespace advgen::eval
