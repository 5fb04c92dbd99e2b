#include "advgen/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "advgen/rng.hpp"
#include "json.hpp"

namespace advgen::corpus {

namespace {

std::string line_error(const std::filesystem::path& path, std::size_t line, const std::string& what) {
  return path.string() + ":" + std::to_string(line) + ": " + what;
}

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

}  // namespace

const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> kSpecials{"<pad>", "<unk>", "<go>", "<eos>"};
  return kSpecials;
}

Vocabulary::Vocabulary() : Vocabulary(special_tokens()) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  const auto& sp = special_tokens();
  if (tokens_.size() < sp.size() || !std::equal(sp.begin(), sp.end(), tokens_.begin())) {
    throw std::invalid_argument("vocabulary must start with <pad> <unk> <go> <eos>");
  }
  token_to_id_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw std::invalid_argument("vocabulary contains an empty token");
    if (!token_to_id_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("duplicate vocabulary token: " + tokens_[i]);
    }
  }
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocabulary::id(std::string_view token) const {
  const auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return token_to_id_.count(std::string(token)) > 0;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocabulary: " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read vocabulary: " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) tokens.push_back(line);
  }
  return Vocabulary(std::move(tokens));
}

std::uint64_t Vocabulary::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tokens_) {
    h = fnv1a64(t.data(), t.size(), h);
    const char sep = '\n';
    h = fnv1a64(&sep, 1, h);
  }
  return h;
}

void DatasetSplits::index_classes(int num_classes) {
  by_class.assign(static_cast<std::size_t>(num_classes), {});
  for (std::size_t i = 0; i < train.size(); ++i) {
    by_class.at(static_cast<std::size_t>(train[i].label)).push_back(i);
  }
}

DatasetFormat parse_format(std::string_view name) {
  if (name == "jsonl") return DatasetFormat::kJsonl;
  if (name == "tsv") return DatasetFormat::kTsv;
  throw std::invalid_argument("unknown dataset format: " + std::string(name));
}

std::vector<std::string> tokenize(std::string_view raw) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : raw) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

std::vector<LabeledText> load_dataset(const std::filesystem::path& path, DatasetFormat format,
                                      int num_classes) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset: " + path.string());
  std::vector<LabeledText> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    LabeledText item;
    if (format == DatasetFormat::kJsonl) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(line_error(path, lineno, std::string("malformed JSON: ") + e.what()));
      }
      if (!j.is_object() || !j.contains("text") || !j["text"].is_string()) {
        throw std::runtime_error(line_error(path, lineno, "missing string field \"text\""));
      }
      if (!j.contains("label") || !j["label"].is_number_integer()) {
        throw std::runtime_error(line_error(path, lineno, "missing integer field \"label\""));
      }
      item.raw = j["text"].get<std::string>();
      item.label = j["label"].get<int>();
    } else {
      const auto tab = line.find('\t');
      if (tab == std::string::npos) {
        throw std::runtime_error(line_error(path, lineno, "expected label<TAB>text"));
      }
      const std::string label = trim(std::string_view(line).substr(0, tab));
      const auto [ptr, ec] = std::from_chars(label.data(), label.data() + label.size(), item.label);
      if (ec != std::errc() || ptr != label.data() + label.size()) {
        throw std::runtime_error(line_error(path, lineno, "label is not an integer: " + label));
      }
      item.raw = line.substr(tab + 1);
    }
    if (item.label < 0 || item.label >= num_classes) {
      throw std::runtime_error(line_error(path, lineno, "unknown label " + std::to_string(item.label)));
    }
    out.push_back(std::move(item));
  }
  return out;
}

void save_dataset(const std::filesystem::path& path, const std::vector<LabeledText>& texts) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset: " + path.string());
  for (const auto& t : texts) {
    out << nlohmann::json{{"text", t.raw}, {"label", t.label}}.dump() << '\n';
  }
}

Vocabulary build_vocabulary(const std::vector<LabeledText>& texts, int max_size, int min_freq) {
  if (max_size < 5) throw std::invalid_argument("max_size must be at least 5");
  struct Count {
    std::size_t freq = 0;
    std::size_t first = 0;
  };
  std::unordered_map<std::string, Count> counts;
  std::vector<std::string> order;
  for (const auto& t : texts) {
    for (auto& tok : tokenize(t.raw)) {
      auto [it, fresh] = counts.try_emplace(tok, Count{0, order.size()});
      if (fresh) order.push_back(tok);
      ++it->second.freq;
    }
  }
  std::vector<std::string> words;
  for (const auto& w : order) {
    if (counts[w].freq >= static_cast<std::size_t>(std::max(min_freq, 1)) &&
        !std::count(special_tokens().begin(), special_tokens().end(), w)) {
      words.push_back(w);
    }
  }
  std::stable_sort(words.begin(), words.end(), [&](const std::string& a, const std::string& b) {
    return counts[a].freq > counts[b].freq;
  });
  const std::size_t room = static_cast<std::size_t>(max_size) - special_tokens().size();
  if (words.size() > room) words.resize(room);
  std::vector<std::string> tokens = special_tokens();
  tokens.insert(tokens.end(), words.begin(), words.end());
  return Vocabulary(std::move(tokens));
}

TokenSequence encode_text(std::string_view raw, const Vocabulary& vocab, std::size_t max_len) {
  const auto toks = tokenize(raw);
  if (toks.empty()) throw std::invalid_argument("text is empty after tokenization");
  TokenSequence ids;
  ids.reserve(std::min(toks.size(), max_len));
  for (const auto& t : toks) {
    if (ids.size() >= max_len) break;
    ids.push_back(vocab.id(t));
  }
  return ids;
}

std::string decode_tokens(const TokenSequence& ids, const Vocabulary& vocab) {
  std::string out;
  for (int id : ids) {
    const std::string& tok = vocab.token(id);
    if (id == Vocabulary::kEos) break;
    if (Vocabulary::is_special(id)) continue;
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

void encode_dataset(std::vector<LabeledText>& texts, const Vocabulary& vocab, std::size_t max_len) {
  for (std::size_t i = 0; i < texts.size(); ++i) {
    try {
      texts[i].ids = encode_text(texts[i].raw, vocab, max_len);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("text " + std::to_string(i) + ": " + e.what());
    }
  }
}

DatasetSplits split_dataset(std::vector<LabeledText> texts, const std::vector<double>& ratios,
                            std::uint64_t seed, int num_classes) {
  if (ratios.size() != 3) throw std::invalid_argument("split ratios must have three entries");
  for (double r : ratios) {
    if (!(r >= 0.0)) throw std::invalid_argument("split ratios must be non-negative");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) {
    throw std::invalid_argument("split ratios must sum to 1");
  }
  const std::size_t n = texts.size();
  const auto n_train = static_cast<std::size_t>(std::llround(ratios[0] * static_cast<double>(n)));
  const auto n_dev = static_cast<std::size_t>(std::llround(ratios[1] * static_cast<double>(n)));
  if (n_train == 0 || n_dev == 0 || n_train + n_dev >= n) {
    throw std::invalid_argument("split of " + std::to_string(n) + " texts leaves a partition empty");
  }
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);

  DatasetSplits s;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_train ? s.train : (i < n_train + n_dev ? s.dev : s.test);
    dst.push_back(std::move(texts[perm[i]]));
  }
  s.index_classes(num_classes);
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

const std::vector<std::string> kDeterminers{"the", "this", "its"};
const std::vector<std::string> kVerbs{"is", "was", "feels", "seems", "looks", "remains"};
const std::vector<std::string> kConnectors{"and", "but", "while", ",", ";"};
const std::vector<std::string> kOpeners{"honestly", "overall", "frankly"};
const std::vector<std::string> kEndings{".", "!"};

const std::vector<std::string> kNouns{
    "movie",    "film",     "plot",   "story",     "acting",  "cast",       "script",  "ending",
    "director", "music",    "lead",   "pacing",    "camera",  "humor",      "score",   "premise",
    "finale",   "sequel",   "editing", "writing",  "villain", "hero",       "setting", "tone",
    "twist",    "romance",  "action", "dialogue",  "visuals", "soundtrack", "cameo",   "opening",
    "climax",   "narrator", "costumes", "screenplay"};
const std::vector<std::string> kAdverbs{"really", "very",   "quite",  "truly", "rather", "pretty",  "so",
                                        "fairly", "simply", "totally", "oddly", "mostly", "largely", "almost"};
const std::vector<std::string> kPositive{
    "good",     "great",    "wonderful", "brilliant", "superb",   "charming", "delightful", "moving",
    "clever",   "beautiful", "funny",    "gripping",  "fresh",    "solid",    "stunning",   "excellent",
    "lovely",   "smart",    "powerful",  "witty",     "touching", "engaging", "terrific",   "elegant",
    "inspired", "vivid",    "sharp",     "tender",    "joyful",   "masterful"};
const std::vector<std::string> kNegative{
    "bad",       "awful",   "boring",  "dull",      "terrible", "weak",     "tedious",     "bland",
    "clumsy",    "messy",   "silly",   "flat",      "lifeless", "predictable", "poor",     "dreadful",
    "stale",     "shallow", "sloppy",  "tiresome",  "forgettable", "hollow", "lame",       "painful",
    "pointless", "muddled", "cheap",   "grating",   "joyless",  "clunky"};

struct Pools {
  std::vector<std::string> nouns, adverbs, positive, negative;
  double zipf = 0.0;
};

// Fills a vocabulary budget of vocab_size - specials - fixed function words,
// split between the scalable pools.
Pools make_pools(int vocab_size, double zipf) {
  const int fixed = static_cast<int>(kDeterminers.size() + kVerbs.size() + kConnectors.size() +
                                     kOpeners.size() + kEndings.size());
  const int budget = std::max(vocab_size - Vocabulary::kNumSpecials - fixed, 0);
  auto take = [](const std::vector<std::string>& pool, int want, int floor) {
    const auto n = static_cast<std::size_t>(std::clamp(want, floor, static_cast<int>(pool.size())));
    return std::vector<std::string>(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n));
  };
  Pools p;
  p.positive = take(kPositive, budget * 30 / 100, 4);
  p.negative = take(kNegative, budget * 30 / 100, 4);
  p.nouns = take(kNouns, budget * 28 / 100, 4);
  p.adverbs = take(kAdverbs, budget * 12 / 100, 2);
  p.zipf = zipf;
  return p;
}

// Item i drawn with weight (i + 1)^-zipf; zipf = 0 is uniform.
const std::string& pick(const std::vector<std::string>& v, double zipf, Rng& rng) {
  if (zipf == 0.0) return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  std::vector<double> w(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) w[i] = std::pow(static_cast<double>(i + 1), -zipf);
  return v[std::discrete_distribution<std::size_t>(w.begin(), w.end())(rng)];
}

std::vector<std::string> make_clause(const Pools& p, bool positive, Rng& rng) {
  std::vector<std::string> c{pick(kDeterminers, p.zipf, rng), pick(p.nouns, p.zipf, rng), pick(kVerbs, p.zipf, rng)};
  if (uniform01(rng) < 0.4) c.push_back(pick(p.adverbs, p.zipf, rng));
  c.push_back(pick(positive ? p.positive : p.negative, p.zipf, rng));
  return c;
}

std::vector<std::string> make_text(const Pools& p, int label, double mixed_rate, Rng& rng) {
  const double u = uniform01(rng);
  const int clauses = u < 0.35 ? 1 : (u < 0.7 ? 2 : 3);
  std::vector<bool> polarity(static_cast<std::size_t>(clauses), label == 1);
  if (clauses == 3 && uniform01(rng) < mixed_rate) {
    polarity[std::uniform_int_distribution<std::size_t>(0, 2)(rng)] = label != 1;
  }
  std::vector<std::string> toks;
  if (uniform01(rng) < 0.15) {
    toks.push_back(pick(kOpeners, p.zipf, rng));
    toks.emplace_back(",");
  }
  for (int i = 0; i < clauses; ++i) {
    if (i > 0) toks.push_back(pick(kConnectors, p.zipf, rng));
    const auto c = make_clause(p, polarity[static_cast<std::size_t>(i)], rng);
    toks.insert(toks.end(), c.begin(), c.end());
  }
  toks.push_back(pick(kEndings, p.zipf, rng));
  return toks;
}

std::string join(const std::vector<std::string>& toks) {
  std::string s;
  for (const auto& t : toks) {
    if (!s.empty()) s.push_back(' ');
    s += t;
  }
  return s;
}

}  // namespace

const std::vector<std::string>& positive_lexemes() { return kPositive; }
const std::vector<std::string>& negative_lexemes() { return kNegative; }

int lexeme_polarity(std::string_view raw) {
  int score = 0;
  for (const auto& t : tokenize(raw)) {
    if (std::count(kPositive.begin(), kPositive.end(), t)) ++score;
    if (std::count(kNegative.begin(), kNegative.end(), t)) --score;
  }
  return score;
}

std::vector<LabeledText> generate_synthetic_corpus(const SyntheticSpec& spec) {
  if (spec.vocab_size < 50) throw std::invalid_argument("synthetic vocab_size must be at least 50");
  if (spec.max_len < 4) throw std::invalid_argument("synthetic max_len must be at least 4");
  if (spec.num_texts < 0) throw std::invalid_argument("synthetic num_texts must be non-negative");
  const Pools pools = make_pools(spec.vocab_size, spec.zipf_exponent);
  Rng rng(spec.seed);
  const auto max_len = static_cast<std::size_t>(spec.max_len);

  std::vector<LabeledText> out;
  out.reserve(static_cast<std::size_t>(spec.num_texts));
  for (int i = 0; i < spec.num_texts; ++i) {
    LabeledText t;
    t.label = i % 2;
    std::vector<std::string> toks;
    for (int attempt = 0; attempt < 64; ++attempt) {
      toks = make_text(pools, t.label, spec.mixed_rate, rng);
      if (toks.size() <= max_len) break;
    }
    if (toks.size() > max_len) {
      // shortest clause form always fits since max_len >= 4
      toks = {pick(kDeterminers, pools.zipf, rng), pick(pools.nouns, pools.zipf, rng), pick(kVerbs, pools.zipf, rng),
              pick(t.label == 1 ? pools.positive : pools.negative, pools.zipf, rng)};
    }
    t.raw = join(toks);
    out.push_back(std::move(t));
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

}  // namespace advgen::corpus
