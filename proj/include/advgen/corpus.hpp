#pragma once

// Text ingestion: tokenisation, vocabulary, dataset files and splits, and the
// synthetic sentiment corpus used for desk-scale experiments.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace advgen::corpus {

using TokenSequence = std::vector<int>;

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kGo = 2;
  static constexpr int kEos = 3;
  static constexpr int kNumSpecials = 4;

  // Specials only.
  Vocabulary();

  // Builds from an explicit token list; the first four entries must be the
  // special tokens in id order.
  explicit Vocabulary(std::vector<std::string> tokens);

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const;
  // unk id for out-of-vocabulary words
  int id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  static bool is_special(int id) { return id >= 0 && id < kNumSpecials; }

  // One token per line, line number = id.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  // Stable fingerprint of the token list; checkpoints record it.
  std::uint64_t hash() const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> token_to_id_;
};

const std::vector<std::string>& special_tokens();

struct LabeledText {
  TokenSequence ids;  // filled by encode_dataset
  int label = 0;
  std::string raw;
};

struct DatasetSplits {
  std::vector<LabeledText> train;
  std::vector<LabeledText> dev;
  std::vector<LabeledText> test;
  // by_class[k] lists indices into train with label k
  std::vector<std::vector<std::size_t>> by_class;

  void index_classes(int num_classes);
};

enum class DatasetFormat { kJsonl, kTsv };

DatasetFormat parse_format(std::string_view name);

// Lowercases, isolates every punctuation character, splits on whitespace.
std::vector<std::string> tokenize(std::string_view raw);

// Reads {"text": ..., "label": int} lines (JSONL) or "label<TAB>text" lines
// (TSV). Blank lines are skipped. Labels must lie in [0, num_classes).
std::vector<LabeledText> load_dataset(const std::filesystem::path& path, DatasetFormat format,
                                      int num_classes = 2);
void save_dataset(const std::filesystem::path& path, const std::vector<LabeledText>& texts);

// Ids 0..3 are the specials; remaining slots go to words with frequency
// >= min_freq, by descending frequency then first appearance.
Vocabulary build_vocabulary(const std::vector<LabeledText>& texts, int max_size, int min_freq);

TokenSequence encode_text(std::string_view raw, const Vocabulary& vocab, std::size_t max_len);
std::string decode_tokens(const TokenSequence& ids, const Vocabulary& vocab);

void encode_dataset(std::vector<LabeledText>& texts, const Vocabulary& vocab, std::size_t max_len);

// Seeded shuffle then partition into train/dev/test by ratio.
DatasetSplits split_dataset(std::vector<LabeledText> texts, const std::vector<double>& ratios,
                            std::uint64_t seed, int num_classes = 2);

struct SyntheticSpec {
  int vocab_size = 150;
  int num_texts = 2000;
  int max_len = 20;
  std::uint64_t seed = 1;
  // Share of three-clause texts whose minority clause carries the opposite
  // sentiment (label still follows the majority).
  double mixed_rate = 0.3;
  // Within-pool word choice follows rank^-zipf_exponent; 0 is uniform.
  double zipf_exponent = 2.0;
};

// Templated reviews: label 1 = positive, 0 = negative, balanced. The label
// equals the sign of (#positive lexemes - #negative lexemes).
std::vector<LabeledText> generate_synthetic_corpus(const SyntheticSpec& spec);

// Sentiment lexicon used by the synthetic generator, exposed for tests and
// for the lexeme-count rule.
const std::vector<std::string>& positive_lexemes();
const std::vector<std::string>& negative_lexemes();

// +1 / -1 per sentiment lexeme, summed over the tokens of raw.
int lexeme_polarity(std::string_view raw);

}  // namespace advgen::corpus
