#include <cmath>
#include <random>
#include <stdexcept>

#include "advgen/attacks.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace advgen;
using namespace advgen::attack;
using corpus::LabeledText;
using corpus::TokenSequence;

namespace {

struct Models {
  corpus::Vocabulary vocab;
  target::TargetParams target;
  gen::GeneratorParams generator;
  std::vector<LabeledText> texts;

  AttackContext context() const { return AttackContext{&vocab, &target, {}}; }
};

// Small vocabulary, random frozen target and untrained generator.
const Models& models() {
  static const Models m = [] {
    Models out;
    std::vector<std::string> words = corpus::special_tokens();
    for (int i = 0; i < 26; ++i) words.push_back("w" + std::to_string(i));
    out.vocab = corpus::Vocabulary(words);
    target::TargetConfig tc;
    tc.vocab_size = out.vocab.size();
    tc.max_len = 10;
    tc.emb_dim = 6;
    tc.filter_widths = {2, 3};
    tc.num_filters = 4;
    out.target = target::init_target(tc, 3);
    target::freeze(out.target);
    gen::GeneratorConfig gc;
    gc.vocab_size = out.vocab.size();
    gc.emb_dim = 8;
    gc.hidden = 12;
    gc.latent = 4;
    gc.class_dim = 3;
    gc.max_len = 10;
    gc.beam_width = 3;
    out.generator = gen::init_generator(gc, 4);
    std::mt19937_64 rng(5);
    for (int i = 0; i < 40; ++i) {
      LabeledText t;
      t.label = i % 2;
      const std::size_t len = 3 + rng() % 8;
      for (std::size_t p = 0; p < len; ++p) t.ids.push_back(4 + static_cast<int>(rng() % 26));
      out.texts.push_back(t);
    }
    return out;
  }();
  return m;
}

int brute_force_nn(std::span<const double> v, const Matrix& table) {
  int best = -1;
  double best_d = 0.0;
  for (std::size_t r = 4; r < table.rows(); ++r) {
    double d = 0.0;
    for (std::size_t j = 0; j < v.size(); ++j) d += (table(r, j) - v[j]) * (table(r, j) - v[j]);
    if (best < 0 || d < best_d) {
      best = static_cast<int>(r);
      best_d = d;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("nearest neighbour word search") {
  const Matrix& table = models().target.embedding_table();
  for (std::size_t r = 4; r < table.rows(); ++r) CHECK(nearest_neighbor_word(table.row(r), table) == static_cast<int>(r));
  std::mt19937_64 rng(7);
  std::normal_distribution<double> normal;
  int agree = 0;
  for (int q = 0; q < 1000; ++q) {
    std::vector<double> v(table.cols());
    for (double& x : v) x = normal(rng);
    agree += nearest_neighbor_word(v, table) == brute_force_nn(v, table);
  }
  CHECK(agree == 1000);

  Matrix dup(7, 2);
  dup(5, 0) = 1.0;
  dup(6, 0) = 1.0;
  dup(4, 0) = 5.0;
  CHECK(nearest_neighbor_word(std::vector<double>{1.0, 0.0}, dup) == 5);
  // specials are never returned, even at zero distance
  CHECK(nearest_neighbor_word(std::vector<double>{0.0, 0.0}, dup) == 5);
  CHECK_THROWS_AS(nearest_neighbor_word(std::vector<double>{0.0}, dup), std::invalid_argument);
}

TEST_CASE("random baseline modifies exactly ceil(fraction * length) positions") {
  const auto ctx = models().context();
  LabeledText x;
  x.label = 1;
  for (int i = 0; i < 20; ++i) x.ids.push_back(4 + i % 26);
  BaselineConfig cfg;
  const AttackRecord r = baseline_random(x, cfg, ctx);
  int changed = 0;
  for (std::size_t i = 0; i < x.ids.size(); ++i) changed += r.generated_ids[i] != x.ids[i];
  CHECK(changed == 2);
  CHECK(r.generated_ids.size() == x.ids.size());
  CHECK(r.mode == "baseline:random");
  CHECK(r.consistent());

  cfg.modify_fraction = 1.0;
  const AttackRecord all = baseline_random(x, cfg, ctx);
  for (std::size_t i = 0; i < x.ids.size(); ++i) {
    CHECK(all.generated_ids[i] != x.ids[i]);
    CHECK(all.generated_ids[i] >= corpus::Vocabulary::kNumSpecials);
  }
  cfg.modify_fraction = 0.0;
  CHECK_THROWS_AS(baseline_random(x, cfg, ctx), std::invalid_argument);
  CHECK(baseline_random(x, BaselineConfig{}, ctx, 3).generated_ids ==
        baseline_random(x, BaselineConfig{}, ctx, 3).generated_ids);
}

TEST_CASE("fgsm with zero epsilon is a fixed point and gradient signs flip with the loss class") {
  const auto& m = models();
  const auto ctx = m.context();
  BaselineConfig cfg;
  cfg.epsilon = 0.0;
  for (int i = 0; i < 10; ++i) {
    const AttackRecord r = baseline_fgsm_nns(m.texts[static_cast<std::size_t>(i)], cfg, ctx);
    CHECK(r.generated_ids == m.texts[static_cast<std::size_t>(i)].ids);
    CHECK(r.consistent());
    const auto clean = target::predict_hard(m.texts[static_cast<std::size_t>(i)].ids, m.target);
    CHECK(r.success == (static_cast<int>(linalg::argmax(clean)) != m.texts[static_cast<std::size_t>(i)].label));
  }
  const Matrix g0 = target::input_gradients(m.texts[0].ids, 0, m.target);
  const Matrix g1 = target::input_gradients(m.texts[0].ids, 1, m.target);
  int nonzero = 0;
  for (std::size_t i = 0; i < g0.size(); ++i) {
    if (g0.flat()[i] == 0.0) continue;
    ++nonzero;
    CHECK((g0.flat()[i] > 0.0) == (g1.flat()[i] < 0.0));
  }
  CHECK(nonzero > 0);

  cfg.epsilon = 2.0;
  cfg.fgsm_top_fraction = 0.25;
  const AttackRecord top = baseline_fgsm_nns(m.texts[1], cfg, ctx);
  int changed = 0;
  for (std::size_t i = 0; i < top.generated_ids.size(); ++i) changed += top.generated_ids[i] != m.texts[1].ids[i];
  CHECK(changed <= static_cast<int>(std::ceil(0.25 * static_cast<double>(m.texts[1].ids.size()))));
}

TEST_CASE("scaled fgsm step equals the unscaled step times the embedding rms") {
  const auto& m = models();
  const Matrix& table = m.target.embedding_table();
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t r = corpus::Vocabulary::kNumSpecials; r < table.rows(); ++r) {
    for (double v : table.row(r)) {
      s += v * v;
      ++n;
    }
  }
  const double rms = std::sqrt(s / static_cast<double>(n));
  CHECK(embedding_rms(table) == doctest::Approx(rms).epsilon(1e-12));
  CHECK_THROWS_AS(embedding_rms(Matrix(4, 3)), std::invalid_argument);

  BaselineConfig scaled;
  scaled.epsilon = 1.5;
  scaled.scale_epsilon = true;
  BaselineConfig plain;
  plain.epsilon = 1.5 * rms;
  for (int i = 0; i < 10; ++i) {
    const auto& x = m.texts[static_cast<std::size_t>(i)];
    CHECK(baseline_fgsm_nns(x, scaled, m.context()).generated_ids ==
          baseline_fgsm_nns(x, plain, m.context()).generated_ids);
  }
}

TEST_CASE("deepfool on a linear score matches the distance to the hyperplane") {
  Matrix w(3, 2, std::vector<double>{0.5, -1.0, 2.0, 0.25, -0.75, 1.5});
  const double b = -4.0;
  Matrix x0(3, 2, std::vector<double>{0.1, 0.2, -0.3, 0.4, 0.5, -0.6});
  auto score = [&](const Matrix& x, Matrix& grad) {
    grad = w;
    double s = b;
    for (std::size_t i = 0; i < x.size(); ++i) s += w.flat()[i] * x.flat()[i];
    return s;
  };
  Matrix unused;
  const double s0 = score(x0, unused);
  REQUIRE(s0 < 0.0);
  double wn = 0.0;
  for (double v : w.flat()) wn += v * v;
  const double overshoot = 0.02;
  const DeepFoolTrace tr = deepfool_binary(x0, score, 50, overshoot);
  CHECK(tr.iterations == 1);
  CHECK(tr.crossed);
  for (std::size_t i = 0; i < w.size(); ++i) {
    CHECK(std::abs(tr.perturbation.flat()[i] - (1.0 + overshoot) * (-s0 / wn) * w.flat()[i]) < 1e-5);
  }
  const DeepFoolTrace capped = deepfool_binary(x0, score, 0, overshoot);
  CHECK(capped.iterations == 0);
  CHECK_FALSE(capped.crossed);
}

TEST_CASE("deepfool baseline respects its contract on the text classifier") {
  const auto& m = models();
  const auto ctx = m.context();
  BaselineConfig cfg;
  cfg.max_deepfool_iters = 7;
  int misclassified_seen = 0;
  for (const auto& x : m.texts) {
    DeepFoolTrace tr;
    const AttackRecord r = baseline_deepfool_nns(x, cfg, ctx, &tr);
    CHECK(tr.iterations <= 7);
    CHECK(r.consistent());
    CHECK(r.generated_ids.size() == x.ids.size());
    const auto clean = target::predict_hard(x.ids, m.target);
    if (static_cast<int>(linalg::argmax(clean)) != x.label) {
      ++misclassified_seen;
      CHECK(tr.iterations == 0);
      CHECK(r.generated_ids == x.ids);
    }
  }
  CHECK(misclassified_seen > 0);

  target::TargetConfig tc = m.target.config;
  tc.num_classes = 3;
  target::TargetParams three = target::init_target(tc, 1);
  target::freeze(three);
  const AttackContext ctx3{&m.vocab, &three, {}};
  CHECK_THROWS_AS(baseline_deepfool_nns(m.texts[0], cfg, ctx3), std::invalid_argument);
}

TEST_CASE("pairwise and unrestricted generation contracts") {
  const auto& m = models();
  const auto ctx = m.context();
  const auto a = attack_pairwise(m.texts, m.generator, ctx, 11);
  const auto b = attack_pairwise(m.texts, m.generator, ctx, 11);
  REQUIRE(a.size() == m.texts.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].mode == "pairwise");
    CHECK(a[i].condition_class == m.texts[i].label);
    CHECK(a[i].target_class == 1 - m.texts[i].label);
    CHECK(a[i].source_text.has_value());
    CHECK(a[i].consistent());
    CHECK(a[i].generated_ids == b[i].generated_ids);
    CHECK(a[i].generated_ids.size() <= 10);
    for (int id : a[i].generated_ids) {
      CHECK(id != corpus::Vocabulary::kGo);
      CHECK(id != corpus::Vocabulary::kPad);
      CHECK(id != corpus::Vocabulary::kEos);
    }
  }

  const auto u = generate_unrestricted(30, 1, m.generator, ctx, 9);
  const auto v = generate_unrestricted(30, 1, m.generator, ctx, 9);
  REQUIRE(u.size() == 30);
  for (std::size_t i = 0; i < u.size(); ++i) {
    CHECK_FALSE(u[i].source_text.has_value());
    CHECK(u[i].latent_seed.has_value());
    CHECK(u[i].generated_text == v[i].generated_text);
    CHECK(u[i].condition_class == 1);
    CHECK(u[i].target_class == 0);
    CHECK(u[i].consistent());
  }
  // the first record of a larger batch is decoded from the same latent draw
  CHECK(generate_unrestricted(1, 1, m.generator, ctx, 9)[0].generated_ids == u[0].generated_ids);
  CHECK_THROWS_AS(generate_unrestricted(0, 1, m.generator, ctx, 9), std::invalid_argument);

  target::TargetParams unfrozen = target::init_target(m.target.config, 1);
  const AttackContext loose{&m.vocab, &unfrozen, {}};
  CHECK_THROWS_AS(generate_unrestricted(2, 0, m.generator, loose, 1), std::logic_error);
}

TEST_CASE("attack records round-trip through jsonl and stay self-consistent") {
  const auto& m = models();
  const auto ctx = m.context();
  auto records = generate_unrestricted(5, 0, m.generator, ctx, 2);
  const auto pair = attack_pairwise(std::span(m.texts).first(3), m.generator, ctx, 2);
  records.insert(records.end(), pair.begin(), pair.end());
  records.push_back(baseline_random(m.texts[0], BaselineConfig{}, ctx));
  testing::TempDir dir;
  write_records(dir.path / "r.jsonl", records);
  const auto back = read_records(dir.path / "r.jsonl");
  REQUIRE(back.size() == records.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].mode == records[i].mode);
    CHECK(back[i].source_text == records[i].source_text);
    CHECK(back[i].latent_seed == records[i].latent_seed);
    CHECK(back[i].generated_ids == records[i].generated_ids);
    CHECK(back[i].prediction == records[i].prediction);
    CHECK(back[i].consistent());
  }
  CHECK(success_rate(records) == success_rate(back));
}
