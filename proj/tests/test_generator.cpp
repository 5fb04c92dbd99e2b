#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>

#include "advgen/generator.hpp"
#include "advgen/target_model.hpp"
#include "doctest.h"
#include "gradcheck.hpp"
#include "test_util.hpp"

using namespace advgen;
using namespace advgen::gen;
using corpus::TokenSequence;
using corpus::Vocabulary;

namespace {

GeneratorConfig tiny_config(int vocab = 12) {
  GeneratorConfig c;
  c.vocab_size = vocab;
  c.emb_dim = 4;
  c.hidden = 5;
  c.latent = 3;
  c.class_dim = 2;
  c.max_len = 6;
  c.beam_width = 3;
  return c;
}

std::size_t argmax_of(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// Test-side scorer: log-prob of emitting `seq` from `state`, re-derived from
// the decoder step and an explicit masked normalisation.
double sequence_log_prob(const GeneratorParams& p, const Matrix& state, const TokenSequence& seq) {
  Matrix h = state;
  int prev = Vocabulary::kGo;
  double total = 0.0;
  for (int tok : seq) {
    const Matrix x = Matrix::row_vector(p.embedding_table().row(static_cast<std::size_t>(prev)));
    h = p.decoder.infer_step(p.store, x, h);
    const Matrix u = linalg::matmul(h, p.store.at(p.output).value);
    double z = 0.0;
    for (std::size_t k = 0; k < u.cols(); ++k) {
      if (k != Vocabulary::kGo && k != Vocabulary::kPad) z += std::exp(u(0, k));
    }
    total += u(0, static_cast<std::size_t>(tok)) - std::log(z);
    prev = tok;
  }
  return total;
}

}  // namespace

TEST_CASE("encoder output shapes, positivity and determinism") {
  const GeneratorParams p = init_generator(tiny_config(), 1);
  const TokenSequence ids{4, 7, 9};
  const EncoderOutput a = encode(ids, p);
  CHECK(a.mu.size() == 3);
  CHECK(a.sigma.size() == 3);
  CHECK(a.h_last.size() == 5);
  for (double s : a.sigma) CHECK(s > 0.0);
  const EncoderOutput b = encode(ids, p);
  CHECK(a.mu == b.mu);
  CHECK(a.sigma == b.sigma);
  CHECK_THROWS_AS(encode(TokenSequence{}, p), std::invalid_argument);

  // batched rows with different lengths agree with single-sequence encoding
  const std::vector<TokenSequence> batch{{4, 5}, {6, 7, 8, 9}, {10}};
  Matrix mu;
  Matrix ls;
  encode_batch(batch, p, mu, ls);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const EncoderOutput single = encode(batch[i], p);
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(mu(i, j) == doctest::Approx(single.mu[j]).epsilon(1e-12));
      CHECK(std::exp(ls(i, j)) == doctest::Approx(single.sigma[j]).epsilon(1e-12));
    }
  }
}

TEST_CASE("reparameterisation identities and moments") {
  const std::vector<double> e{0.3, -1.2};
  CHECK(reparameterize(std::vector<double>{0, 0}, std::vector<double>{1, 1}, e) == e);
  CHECK(reparameterize(std::vector<double>{1.5, -2.0}, std::vector<double>{0.5, 2.0},
                       std::vector<double>{0, 0}) == std::vector<double>{1.5, -2.0});

  const std::vector<double> mu{1.5, -2.0};
  const std::vector<double> sigma{0.5, 2.0};
  Rng rng(99);
  const int n = 10000;
  std::vector<double> sum(2, 0.0);
  std::vector<double> sq(2, 0.0);
  for (int i = 0; i < n; ++i) {
    const std::vector<double> eps{standard_normal(rng), standard_normal(rng)};
    const auto z = reparameterize(mu, sigma, eps);
    for (std::size_t j = 0; j < 2; ++j) {
      sum[j] += z[j];
      sq[j] += z[j] * z[j];
    }
  }
  for (std::size_t j = 0; j < 2; ++j) {
    const double mean = sum[j] / n;
    const double var = sq[j] / n - mean * mean;
    CHECK(std::abs(mean - mu[j]) <= 0.02 * std::abs(mu[j]));
    CHECK(std::abs(var - sigma[j] * sigma[j]) <= 0.05 * sigma[j] * sigma[j]);
  }
}

TEST_CASE("decoder initial state is a deterministic map of latent and class") {
  const GeneratorParams p = init_generator(tiny_config(), 2);
  const Matrix z = testing::random_matrix(1, 3, 3);
  const int k0[1] = {0};
  const int k1[1] = {1};
  const Matrix a = init_decoder_state(z, k0, p);
  CHECK(a == init_decoder_state(z, k0, p));
  CHECK(a.cols() == 5);
  CHECK(linalg::max_abs_diff(a, init_decoder_state(z, k1, p)) > 0.0);
  const int bad[1] = {2};
  CHECK_THROWS_AS(init_decoder_state(z, bad, p), std::out_of_range);
}

TEST_CASE("word dropout follows the keep rate") {
  std::vector<TokenSequence> batch;
  for (int i = 0; i < 1000; ++i) batch.push_back(TokenSequence(10, 4 + i % 5));
  Rng rng(4);
  const TeacherBatch keep = make_teacher_batch(batch, 20, 1.0, rng);
  CHECK(keep.dropped == 0);
  CHECK(keep.inputs[0][0] == Vocabulary::kGo);
  CHECK(keep.inputs[1][0] == batch[0][0]);
  CHECK(keep.targets[10][0] == Vocabulary::kEos);

  const TeacherBatch none = make_teacher_batch(batch, 20, 0.0, rng);
  CHECK(none.dropped == none.droppable);
  for (std::size_t s = 1; s < none.inputs.size(); ++s) CHECK(none.inputs[s][7] == Vocabulary::kUnk);
  CHECK(none.inputs[0][7] == Vocabulary::kGo);

  const TeacherBatch some = make_teacher_batch(batch, 20, 0.7, rng);
  CHECK(some.droppable == 10000);
  const double frac = static_cast<double>(some.dropped) / static_cast<double>(some.droppable);
  CHECK(std::abs(frac - 0.3) < 0.02);
  CHECK_THROWS_AS(make_teacher_batch(batch, 20, 1.5, rng), std::invalid_argument);
}

TEST_CASE("output distribution and gumbel relaxation") {
  const std::vector<double> flat(6, 0.7);
  for (double q : output_distribution(flat)) CHECK(q == doctest::Approx(1.0 / 6.0));
  const std::vector<double> u{0.2, -1.0, 2.5, 0.0, 1.1};
  std::vector<double> shifted = u;
  for (double& x : shifted) x += 40.0;
  const auto o = output_distribution(u);
  const auto os = output_distribution(shifted);
  for (std::size_t i = 0; i < u.size(); ++i) CHECK(o[i] == doctest::Approx(os[i]).epsilon(1e-12));
  CHECK(argmax_of(o) == 2);

  const std::vector<double> zero(5, 0.0);
  const auto ident = gumbel_soften(u, 1.0, zero);
  for (std::size_t i = 0; i < u.size(); ++i) CHECK(std::abs(ident[i] - o[i]) <= 1e-15);
  CHECK_THROWS_AS(gumbel_soften(u, 0.0, zero), std::invalid_argument);
  CHECK_THROWS_AS(gumbel_soften(u, GumbelConfig{-1.0, 1}), std::invalid_argument);

  Rng rng(5);
  int agree = 0;
  double mass = 0.0;
  for (int d = 0; d < 1000; ++d) {
    const Matrix logits = normal_matrix(1, 10, rng);
    const Matrix g = gumbel_matrix(1, 10, rng);
    const auto soft = gumbel_soften(logits.flat(), 0.01, g.flat());
    CHECK(std::accumulate(soft.begin(), soft.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
    Matrix lo = logits;
    linalg::log_softmax_rows(lo);
    std::vector<double> pert(10);
    for (std::size_t k = 0; k < 10; ++k) pert[k] = lo.data()[k] + g.data()[k];
    agree += argmax_of(soft) == argmax_of(pert);
    mass += soft[argmax_of(pert)];
  }
  CHECK(agree >= 990);
  CHECK(mass / 1000.0 > 0.99);

  // concentration on the perturbed argmax grows as the temperature falls
  const Matrix g = gumbel_matrix(1, 5, rng);
  double prev = 0.0;
  std::size_t top = 0;
  for (double temp : {1.0, 0.5, 0.1, 0.01}) {
    const auto soft = gumbel_soften(u, temp, g.flat());
    if (temp == 1.0) top = argmax_of(soft);
    CHECK(soft[top] >= prev);
    prev = soft[top];
  }
}

TEST_CASE("soft embedding selects, averages and is linear") {
  const Matrix table = testing::random_matrix(6, 3, 6);
  Matrix onehot(2, 6);
  onehot(0, 4) = 1.0;
  onehot(1, 1) = 1.0;
  const Matrix w = soft_embed(onehot, table);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(w(0, c) == table(4, c));
    CHECK(w(1, c) == table(1, c));
  }
  const Matrix uniform(1, 6, 1.0 / 6.0);
  const Matrix mean = soft_embed(uniform, table);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < 6; ++r) s += table(r, c);
    CHECK(mean(0, c) == doctest::Approx(s / 6.0).epsilon(1e-12));
  }
  Matrix pm = testing::random_matrix(2, 6, 7);
  Matrix qm = testing::random_matrix(2, 6, 8);
  linalg::softmax_rows(pm);
  linalg::softmax_rows(qm);
  Matrix mix(2, 6);
  for (std::size_t i = 0; i < mix.size(); ++i) mix.data()[i] = 0.3 * pm.data()[i] + 0.7 * qm.data()[i];
  const Matrix lhs = soft_embed(mix, table);
  const Matrix a = soft_embed(pm, table);
  const Matrix b = soft_embed(qm, table);
  for (std::size_t i = 0; i < lhs.size(); ++i) {
    CHECK(std::abs(lhs.data()[i] - (0.3 * a.data()[i] + 0.7 * b.data()[i])) < 1e-6);
  }
  CHECK_THROWS_AS(soft_embed(Matrix(2, 5), table), std::invalid_argument);
}

TEST_CASE("straight-through passes one-hot forward and the identity gradient back") {
  ad::Tape t;
  const ad::Var soft = t.constant(Matrix(2, 3, std::vector<double>{0.2, 0.5, 0.3, 0.4, 0.4, 0.2}));
  // Constant leaves get no gradient; route through a parameter instead.
  ad::Parameter p{"p", t.value(soft), Matrix(2, 3)};
  const ad::Var x = t.param(p);
  const ad::Var st = straight_through(t, x);
  CHECK(t.value(st) == Matrix(2, 3, std::vector<double>{0, 1, 0, 1, 0, 0}));
  const Matrix w(2, 3, std::vector<double>{1, 2, 3, 4, 5, 6});
  t.backward(ad::sum(t, ad::mul(t, st, t.constant(w))));
  CHECK(p.grad == w);
}

TEST_CASE("beam width 1 is greedy decoding") {
  const GeneratorParams p = init_generator(tiny_config(), 9);
  const Matrix states = testing::random_matrix(4, 5, 10);
  const auto beams = decode_beam_search(states, 1, 8, p);
  for (std::size_t i = 0; i < 4; ++i) {
    // greedy oracle
    Matrix h = Matrix::row_vector(states.row(i));
    int prev = Vocabulary::kGo;
    TokenSequence greedy;
    for (int s = 0; s < 8; ++s) {
      h = p.decoder.infer_step(p.store, Matrix::row_vector(p.embedding_table().row(static_cast<std::size_t>(prev))), h);
      const Matrix u = linalg::matmul(h, p.store.at(p.output).value);
      int best = -1;
      for (std::size_t k = 0; k < u.cols(); ++k) {
        if (k == Vocabulary::kGo || k == Vocabulary::kPad) continue;
        if (best < 0 || u(0, k) > u(0, static_cast<std::size_t>(best))) best = static_cast<int>(k);
      }
      greedy.push_back(best);
      prev = best;
      if (best == Vocabulary::kEos) break;
    }
    CHECK(beams[i] == greedy);
  }
}

TEST_CASE("beam search matches exhaustive search on a five-token vocabulary") {
  GeneratorConfig c = tiny_config(5);
  const GeneratorParams p = init_generator(c, 11);
  const Matrix states = testing::random_matrix(6, 5, 12, 2.0);
  const auto beams = decode_beam_search(states, 3, 4, p);
  const std::vector<int> emit{Vocabulary::kUnk, Vocabulary::kEos, 4};
  for (std::size_t i = 0; i < states.rows(); ++i) {
    const Matrix st = Matrix::row_vector(states.row(i));
    double best = -1e300;
    TokenSequence best_seq;
    std::function<void(TokenSequence&)> walk = [&](TokenSequence& seq) {
      const bool done = !seq.empty() && (seq.back() == Vocabulary::kEos || seq.size() == 4);
      if (done) {
        const double s = sequence_log_prob(p, st, seq);
        if (s > best) {
          best = s;
          best_seq = seq;
        }
        return;
      }
      for (int tok : emit) {
        seq.push_back(tok);
        walk(seq);
        seq.pop_back();
      }
    };
    TokenSequence seq;
    walk(seq);
    CHECK(beams[i] == best_seq);
    CHECK(sequence_log_prob(p, st, beams[i]) == doctest::Approx(best).epsilon(1e-12));
  }
}

TEST_CASE("beam output never emits GO or PAD and ends at EOS") {
  const GeneratorParams p = init_generator(tiny_config(), 13);
  const Matrix states = testing::random_matrix(20, 5, 14, 3.0);
  for (const auto& seq : decode_beam_search(states, 4, 7, p)) {
    REQUIRE_FALSE(seq.empty());
    CHECK(seq.size() <= 7);
    for (std::size_t j = 0; j < seq.size(); ++j) {
      CHECK(seq[j] != Vocabulary::kGo);
      CHECK(seq[j] != Vocabulary::kPad);
      if (seq[j] == Vocabulary::kEos) CHECK(j + 1 == seq.size());
    }
  }
}

TEST_CASE("latent sampling is seeded and has the chi-square mean") {
  CHECK(sample_latent(5, 4, 1) == sample_latent(5, 4, 1));
  CHECK_FALSE(sample_latent(5, 4, 1) == sample_latent(5, 4, 2));
  CHECK_THROWS_AS(sample_latent(0, 4, 1), std::invalid_argument);
  const Matrix z = sample_latent(10000, 32, 7);
  double total = 0.0;
  for (double v : z.flat()) total += v * v;
  CHECK(std::abs(total / 10000.0 - 32.0) < 0.03 * 32.0);
}

TEST_CASE("one-hot beam output scores the same through the soft and hard target paths") {
  const GeneratorParams g = init_generator(tiny_config(), 15);
  target::TargetConfig tc;
  tc.vocab_size = 12;
  tc.max_len = 6;
  tc.emb_dim = 4;
  tc.filter_widths = {2, 3};
  tc.num_filters = 3;
  const target::TargetParams f = target::init_target(tc, 16);
  const Matrix states = testing::random_matrix(10, 5, 17, 2.0);
  for (const auto& seq : decode_beam_search(states, 3, 7, g)) {
    TokenSequence words;
    for (int id : seq) {
      if (id != Vocabulary::kEos) words.push_back(id);
    }
    if (words.empty()) words.push_back(Vocabulary::kUnk);
    ad::Tape t;
    const auto positions = one_hot_sequence(t, std::vector<TokenSequence>{words}, 6, 12);
    Matrix soft(6, 12);
    for (std::size_t r = 0; r < 6; ++r) std::copy_n(t.value(positions[r]).data(), 12, soft.row(r).begin());
    const auto hard = target::predict_hard(words, f);
    const auto viasoft = target::predict_soft(soft_embed(soft, f.embedding_table()), f);
    CHECK(std::abs(hard[0] - viasoft[0]) < 1e-5);
  }
}

TEST_CASE("full soft pipeline gradient matches finite differences") {
  target::TargetConfig tc;
  tc.vocab_size = 12;
  tc.max_len = 4;
  tc.emb_dim = 4;
  tc.filter_widths = {2, 3};
  tc.num_filters = 3;
  const target::TargetParams f = target::init_target(tc, 18);
  Rng rng(19);
  const Matrix noise = gumbel_matrix(2, 12, rng);
  auto forward = [&](ad::Tape& t, const std::vector<ad::Var>& x) {
    const target::TargetVars tv = target::view(t, f);
    std::vector<ad::Var> positions;
    for (std::size_t p = 0; p < 4; ++p) {
      const ad::Var logits = ad::slice_rows(t, x[0], p, 1);
      const ad::Var soft = gumbel_soften(t, logits, Matrix::row_vector(noise.row(p % 2)), 0.7);
      positions.push_back(soft_embed(t, soft, tv.embedding));
    }
    const int cls[1] = {1};
    const double w[1] = {1.0};
    return ad::cross_entropy(t, target::logits(t, tv, tc, positions), cls, w);
  };
  CHECK(testing::grad_check(forward, {testing::random_matrix(4, 12, 20)}).max_rel_error < 1e-3);
}

TEST_CASE("relaxed sequences pad short rows with one-hot PAD") {
  ad::Tape t;
  const std::vector<ad::Var> logits{t.constant(testing::random_matrix(2, 6, 21)),
                                    t.constant(testing::random_matrix(2, 6, 22))};
  const std::size_t lengths[2] = {1, 2};
  Rng rng(23);
  const auto seq = relaxed_sequence(t, logits, lengths, 4, 0.5, rng);
  REQUIRE(seq.size() == 4);
  CHECK(t.value(seq[1])(0, Vocabulary::kPad) == 1.0);
  CHECK(t.value(seq[3])(1, Vocabulary::kPad) == 1.0);
  double s = 0.0;
  for (double v : t.value(seq[1]).row(1)) s += v;
  CHECK(s == doctest::Approx(1.0));
  CHECK(t.value(seq[1])(1, Vocabulary::kPad) < 1.0);
}

TEST_CASE("generator checkpoints round-trip and refuse a different vocabulary") {
  const GeneratorParams p = init_generator(tiny_config(), 24);
  testing::TempDir dir;
  save_generator(dir.path / "g.ckpt", p, 77);
  const GeneratorParams q = load_generator(dir.path / "g.ckpt", 77);
  CHECK(q.store.fingerprint() == p.store.fingerprint());
  CHECK(q.config.latent == 3);
  CHECK(q.config.num_classes == 2);
  CHECK_THROWS_WITH_AS(load_generator(dir.path / "g.ckpt", 78), doctest::Contains("different vocabulary"),
                       std::runtime_error);
}
