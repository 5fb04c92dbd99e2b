#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <stdexcept>

#include "advgen/evaluation.hpp"
#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"

using namespace advgen;
using namespace advgen::eval;
using attack::AttackRecord;
using corpus::LabeledText;
using corpus::TokenSequence;

namespace {

struct Fixture {
  corpus::Vocabulary vocab;
  corpus::DatasetSplits splits;
  std::vector<TokenSequence> train_ids;
};

// Encoded synthetic corpus split 60/20/20.
const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture out;
    corpus::SyntheticSpec spec;
    spec.num_texts = 1000;
    spec.seed = 11;
    auto texts = corpus::generate_synthetic_corpus(spec);
    out.vocab = corpus::build_vocabulary(texts, 1000, 1);
    corpus::encode_dataset(texts, out.vocab, 20);
    out.splits = corpus::split_dataset(std::move(texts), {0.6, 0.2, 0.2}, 3);
    for (const auto& t : out.splits.train) out.train_ids.push_back(t.ids);
    return out;
  }();
  return f;
}

const LanguageModelParams& trained_lm() {
  static const LanguageModelParams lm = [] {
    LmConfig c;
    c.vocab_size = fixture().vocab.size();
    c.emb_dim = 16;
    c.hidden = 32;
    LmTrainSettings s;
    s.epochs = 4;
    return train_language_model(fixture().train_ids, c, s);
  }();
  return lm;
}

std::vector<TokenSequence> ids_of(const std::vector<LabeledText>& texts) {
  std::vector<TokenSequence> out;
  for (const auto& t : texts) out.push_back(t.ids);
  return out;
}

AttackRecord record(int condition, int target, int predicted, TokenSequence ids = {4, 5, 6}) {
  AttackRecord r;
  r.mode = "unrestricted";
  r.condition_class = condition;
  r.target_class = target;
  r.predicted_class = predicted;
  r.prediction = {predicted == 0 ? 1.0 : 0.0, predicted == 1 ? 1.0 : 0.0};
  r.success = predicted == target;
  r.generated_ids = std::move(ids);
  return r;
}

}  // namespace

TEST_CASE("attack success rate") {
  std::vector<AttackRecord> rs{record(0, 1, 1), record(0, 1, 1), record(0, 1, 1), record(0, 1, 0)};
  CHECK(attack_success_rate(rs) == doctest::Approx(0.75));
  for (auto& r : rs) r.success = false;
  CHECK(attack_success_rate(rs) == 0.0);
  CHECK_THROWS_AS(attack_success_rate(std::vector<AttackRecord>{}), std::invalid_argument);
}

TEST_CASE("uniform language model scores ln |V|") {
  const LanguageModelParams lm = uniform_language_model(10);
  const std::vector<TokenSequence> texts{{4, 5, 6}, {7, 8, 9, 4}, {5}};
  const PerplexityResult r = perplexity_score(texts, lm);
  CHECK(std::abs(r.score - std::log(10.0)) < 1e-12);
  CHECK(r.words == 8);
  CHECK(r.perplexity == doctest::Approx(10.0));
  CHECK_THROWS_AS(perplexity_score(std::vector<TokenSequence>{}, lm), std::invalid_argument);
  CHECK_THROWS_AS(perplexity_score(std::vector<TokenSequence>{{}}, lm), std::invalid_argument);
}

TEST_CASE("perplexity matches a hand-computed toy corpus") {
  // Only the output bias is non-zero, so P(word) is the same at every step:
  // softmax over (0, 0, 0, 0, ln 2, ln 3, 0) = (1,1,1,1,2,3,1)/10.
  LanguageModelParams lm = init_language_model(LmConfig{7, 2, 3}, 5);
  for (std::size_t i = 0; i < lm.store.size(); ++i) lm.store.at(i).value.fill(0.0);
  Matrix& bias = lm.store.at(lm.output.bias).value;
  bias(0, 4) = std::log(2.0);
  bias(0, 5) = std::log(3.0);
  // Two sentences, six words: (4 5 6) and (5 5 4).
  const std::vector<TokenSequence> corpus{{4, 5, 6}, {5, 5, 4}};
  const double expected = -(2 * std::log(0.2) + 3 * std::log(0.3) + std::log(0.1)) / 6.0;
  CHECK(std::abs(perplexity_score(corpus, lm).score - expected) < 1e-12);
  const auto lp = word_log_probs(corpus[0], lm);
  REQUIRE(lp.size() == 3);
  CHECK(std::abs(lp[2] - std::log(0.1)) < 1e-12);
}

TEST_CASE("perplexity is independent of batching") {
  const LanguageModelParams& lm = trained_lm();
  std::vector<TokenSequence> texts;
  for (int rep = 0; rep < 2; ++rep) {
    for (const auto& ids : fixture().train_ids) texts.push_back(ids);
  }
  REQUIRE(texts.size() > 256);
  double nll = 0.0;
  std::size_t words = 0;
  for (const auto& ids : texts) {
    for (double v : word_log_probs(ids, lm)) nll -= v;
    words += ids.size();
  }
  const PerplexityResult r = perplexity_score(texts, lm);
  CHECK(r.words == words);
  CHECK(std::abs(r.score - nll / static_cast<double>(words)) < 1e-9);
}

TEST_CASE("trained language model beats uniform and prefers word order") {
  const LanguageModelParams& lm = trained_lm();
  const auto dev = ids_of(fixture().splits.dev);
  const double uniform = std::log(static_cast<double>(fixture().vocab.size()));
  const double trained = perplexity_score(dev, lm).score;
  CHECK(trained < uniform);
  std::vector<TokenSequence> shuffled = dev;
  std::mt19937_64 rng(9);
  for (auto& ids : shuffled) std::shuffle(ids.begin(), ids.end(), rng);
  CHECK(trained < perplexity_score(shuffled, lm).score);
}

TEST_CASE("language model training is deterministic and round-trips") {
  LmConfig c;
  c.vocab_size = fixture().vocab.size();
  c.emb_dim = 8;
  c.hidden = 8;
  LmTrainSettings s;
  s.epochs = 1;
  LmTrainReport rep;
  const auto a = train_language_model(fixture().train_ids, c, s, &rep);
  const auto b = train_language_model(fixture().train_ids, c, s);
  CHECK(a.store.fingerprint() == b.store.fingerprint());
  CHECK(rep.epoch_loss.size() == 1);
  CHECK(std::isfinite(rep.epoch_loss[0]));
  testing::TempDir dir;
  save_language_model(dir.path / "lm.ckpt", a, fixture().vocab.hash());
  const auto loaded = load_language_model(dir.path / "lm.ckpt", fixture().vocab.hash());
  CHECK(loaded.store.fingerprint() == a.store.fingerprint());
  CHECK_THROWS(load_language_model(dir.path / "lm.ckpt", fixture().vocab.hash() + 1));
}

TEST_CASE("diversity edge cases") {
  const std::vector<TokenSequence> same{{4, 5, 6, 7, 8}, {4, 5, 6, 7, 8}};
  CHECK(diversity_report(same, {}).unique_fraction == 0.0);

  const std::vector<TokenSequence> disjoint{{4, 5, 6, 7, 8}, {9, 10, 11, 12}, {13, 14, 15, 16, 17, 18}};
  const DiversityReport d = diversity_report(disjoint, disjoint);
  CHECK(d.unique_fraction == 1.0);
  CHECK(d.train_4gram_overlap_mean == 1.0);

  // Two of the second text's three 4-grams occur in the first: 1/3 absent.
  const std::vector<TokenSequence> partial{{4, 5, 6, 7, 8, 20}, {4, 5, 6, 7, 8, 9}};
  CHECK(unique_flags(partial) == std::vector<bool>{true, true});
  // Four of five shared: exactly 20% absent is not "over 20%".
  const std::vector<TokenSequence> edge{{4, 5, 6, 7, 8, 9, 10, 30}, {4, 5, 6, 7, 8, 9, 10, 11}};
  CHECK(unique_flags(edge) == std::vector<bool>{false, false});

  const std::vector<TokenSequence> with_short{{4, 5}, {4, 5, 6, 7}, {8, 9, 10, 11}};
  const DiversityReport s = diversity_report(with_short, {});
  CHECK(s.num_short == 1);
  CHECK(s.num_eligible == 2);
  CHECK(s.unique_fraction == 1.0);
  CHECK(s.train_4gram_overlap_mean == 0.0);
  CHECK_THROWS_AS(diversity_report(std::vector<TokenSequence>{}, {}), std::invalid_argument);
}

TEST_CASE("inverted-index uniqueness equals brute force on 200 texts") {
  std::mt19937_64 rng(21);
  std::vector<TokenSequence> base;
  for (int i = 0; i < 40; ++i) {
    TokenSequence t;
    const std::size_t len = 2 + rng() % 14;
    for (std::size_t p = 0; p < len; ++p) t.push_back(4 + static_cast<int>(rng() % 6));
    base.push_back(t);
  }
  // Near-duplicates of a small base give a mix of unique and non-unique texts.
  std::vector<TokenSequence> texts;
  for (int i = 0; i < 200; ++i) {
    TokenSequence t = base[rng() % base.size()];
    const int edits = static_cast<int>(rng() % 4);
    for (int e = 0; e < edits && !t.empty(); ++e) t[rng() % t.size()] = 4 + static_cast<int>(rng() % 12);
    texts.push_back(t);
  }
  const auto fast = unique_flags(texts);
  const auto slow = unique_flags_bruteforce(texts);
  CHECK(fast == slow);
  const auto n_unique = std::count(fast.begin(), fast.end(), true);
  CHECK(n_unique > 10);
  CHECK(n_unique < 190);

  std::vector<TokenSequence> permuted = texts;
  std::shuffle(permuted.begin(), permuted.end(), rng);
  CHECK(diversity_report(permuted, {}).unique_fraction == doctest::Approx(diversity_report(texts, {}).unique_fraction));
}

TEST_CASE("validity oracle and proxy rate") {
  const auto& f = fixture();
  const ValidityOracle oracle =
      train_validity_oracle(f.splits.train, f.splits.dev, f.vocab.size(), 2, OracleSettings{});
  CHECK(oracle.dev_accuracy >= kMinOracleAccuracy);
  const auto p = oracle.predict_proba(f.splits.dev[0].ids);
  CHECK(p[0] + p[1] == doctest::Approx(1.0));

  const TokenSequence& ids = f.splits.dev[0].ids;
  const int k = oracle.predict(ids);
  // oracle = y_k and target = y_t
  std::vector<AttackRecord> rs{record(k, 1 - k, 1 - k, ids)};
  CHECK(validity_proxy_rate(rs, oracle) == 1.0);
  // oracle = y_t: invalid even though the attack succeeded
  rs = {record(1 - k, k, k, ids)};
  CHECK(rs[0].success);
  CHECK(validity_proxy_rate(rs, oracle) == 0.0);
  // failed attack: invalid
  rs = {record(k, 1 - k, k, ids)};
  CHECK(validity_proxy_rate(rs, oracle) == 0.0);

  ValidityOracle weak = oracle;
  weak.dev_accuracy = 0.85;
  CHECK_THROWS_AS(validity_proxy_rate(rs, weak), std::runtime_error);
  CHECK_THROWS_AS(validity_proxy_rate(std::vector<AttackRecord>{}, oracle), std::invalid_argument);

  testing::TempDir dir;
  save_oracle(dir.path / "oracle.ckpt", oracle, f.vocab.hash());
  const ValidityOracle loaded = load_oracle(dir.path / "oracle.ckpt", f.vocab.hash());
  CHECK(loaded.dev_accuracy == oracle.dev_accuracy);
  CHECK(loaded.predict_proba(ids) == oracle.predict_proba(ids));
}

TEST_CASE("annotation batches") {
  std::vector<AttackRecord> rs;
  for (int i = 0; i < 2000; ++i) {
    AttackRecord r = record(i % 2, 1 - i % 2, 1 - i % 2);
    r.generated_text = "text " + std::to_string(i) + (i % 7 == 0 ? ", with \"quotes\"" : "");
    rs.push_back(r);
  }
  const AnnotationBatch a = sample_annotation_batch(rs, 100, 4);
  CHECK(a.rows.size() == 100);
  std::set<std::size_t> ids;
  for (const auto& row : a.rows) {
    ids.insert(row.id);
    CHECK(row.text == rs[row.id].generated_text);
    CHECK_FALSE(row.human_label.has_value());
  }
  CHECK(ids.size() == 100);
  const AnnotationBatch b = sample_annotation_batch(rs, 100, 4);
  for (std::size_t i = 0; i < 100; ++i) CHECK(a.rows[i].id == b.rows[i].id);
  CHECK_THROWS_AS(sample_annotation_batch(std::span(rs).first(50), 100, 4), std::invalid_argument);

  testing::TempDir dir;
  const auto path = dir.path / "batch.csv";
  export_annotation_batch(rs, path, 100, 4);
  AnnotationBatch back = read_annotation_csv(path);
  REQUIRE(back.rows.size() == 100);
  for (std::size_t i = 0; i < 100; ++i) {
    CHECK(back.rows[i].id == a.rows[i].id);
    CHECK(back.rows[i].text == a.rows[i].text);
    CHECK(back.rows[i].condition_class == a.rows[i].condition_class);
  }
  CHECK_THROWS_AS(human_validity(back), std::invalid_argument);

  // 73 rows labeled with the condition class, the rest with the other class.
  for (std::size_t i = 0; i < 100; ++i) {
    back.rows[i].human_label = i < 73 ? back.rows[i].condition_class : 1 - back.rows[i].condition_class;
  }
  write_annotation_csv(path, back);
  const HumanValidity h = human_validity(read_annotation_csv(path));
  CHECK(h.labeled == 100);
  CHECK(h.valid == 73);
  CHECK(h.rate == doctest::Approx(0.73));
}

TEST_CASE("adversarial training harness") {
  const auto& f = fixture();
  target::TargetConfig tc;
  tc.vocab_size = f.vocab.size();
  tc.emb_dim = 8;
  tc.filter_widths = {3};
  tc.num_filters = 8;
  target::TargetTrainSettings ts;
  ts.epochs = 2;
  target::TargetParams original = target::train_target(f.splits, tc, ts);
  target::freeze(original);

  // Dev texts relabeled to the opposite class play the adversarial records.
  std::vector<AttackRecord> rs;
  for (const auto& t : f.splits.dev) {
    const auto p = target::predict_hard(t.ids, original);
    const int predicted = p[1] > p[0] ? 1 : 0;
    rs.push_back(record(1 - t.label, t.label, predicted, t.ids));
  }
  CHECK_THROWS_AS(augment_and_retrain(f.splits, std::vector<AttackRecord>{}, original, ts, DefenseConfig{}),
                  std::invalid_argument);

  DefenseConfig none;
  none.max_augment = 0;
  const DefenseReport zero = augment_and_retrain(f.splits, rs, original, ts, none);
  CHECK(zero.train_adversarial == 0);
  const target::TargetParams baseline = target::train_target(f.splits, tc, ts);
  CHECK(zero.clean_after == target::accuracy(f.splits.test, baseline));

  const DefenseReport a = augment_and_retrain(f.splits, rs, original, ts, DefenseConfig{});
  const DefenseReport b = augment_and_retrain(f.splits, rs, original, ts, DefenseConfig{});
  CHECK(a.clean_after == b.clean_after);
  CHECK(a.adversarial_after == b.adversarial_after);
  CHECK(a.test_adversarial == 40);
  CHECK(a.train_adversarial == 160);
  CHECK(a.clean_before == target::accuracy(f.splits.test, original));

  std::vector<AttackRecord> held;
  for (std::size_t i : a.test_indices) held.push_back(rs[i]);
  CHECK(a.adversarial_before == doctest::Approx(1.0 - attack_success_rate(held)));
}

TEST_CASE("timing benchmark") {
  const auto& f = fixture();
  target::TargetConfig tc;
  tc.vocab_size = f.vocab.size();
  tc.emb_dim = 8;
  tc.filter_widths = {3};
  tc.num_filters = 8;
  target::TargetParams tgt = target::init_target(tc, 2);
  target::freeze(tgt);
  gen::GeneratorConfig gc;
  gc.vocab_size = f.vocab.size();
  gc.emb_dim = 8;
  gc.hidden = 16;
  gc.latent = 4;
  gc.beam_width = 2;
  const gen::GeneratorParams g = gen::init_generator(gc, 3);

  TimingInputs in;
  in.generator = &g;
  in.context = attack::AttackContext{&f.vocab, &tgt, {}};
  in.texts = f.splits.dev;
  for (TimingMode mode : {TimingMode::kUnrestricted, TimingMode::kPairwise, TimingMode::kRandom, TimingMode::kFgsm,
                          TimingMode::kDeepFool}) {
    const TimingResult r = timing_benchmark(mode, in, 64);
    CHECK(r.seconds_per_example > 0.0);
    CHECK(r.count == 64);
    CHECK(parse_timing_mode(timing_mode_name(mode)) == mode);
  }
  CHECK_THROWS_AS(parse_timing_mode("bogus"), std::invalid_argument);

  // Best of three runs damps scheduler noise.
  const auto best = [&](int batch) {
    in.batch_size = batch;
    double t = 1e9;
    for (int i = 0; i < 3; ++i) t = std::min(t, timing_benchmark(TimingMode::kUnrestricted, in, 256).seconds_per_example);
    return t;
  };
  const double small = best(32);
  const double large = best(64);
  CHECK(large <= small * 1.2);
  const double again = best(64);
  CHECK(again <= 2.0 * large);
  CHECK(large <= 2.0 * again);
}

TEST_CASE("metrics report") {
  std::vector<AttackRecord> rs;
  for (const auto& t : fixture().splits.dev) rs.push_back(record(t.label, 1 - t.label, t.label % 2, t.ids));
  const MetricsReport m = compute_metrics(rs, trained_lm(), fixture().train_ids, nullptr);
  CHECK(m.num_records == rs.size());
  CHECK(m.attack_success_rate == doctest::Approx(static_cast<double>(m.num_successes) / rs.size()));
  CHECK_FALSE(m.validity_rate.has_value());
  const auto j = nlohmann::json::parse(m.to_json());
  CHECK(j["attack_success_rate"].get<double>() == m.attack_success_rate);
  CHECK(j["validity_rate"].is_null());
  CHECK(j["diversity"]["unique_fraction"].get<double>() == m.diversity.unique_fraction);
  CHECK(m.to_table().find("attack success rate") != std::string::npos);
}
