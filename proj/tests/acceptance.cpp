// Acceptance suite: one PASS/FAIL line per criterion. Criteria 1-4 and 9 run
// in process; 5-8 and 10 drive the advgen command line through the full
// desk-scale pipeline twice.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "advgen/attacks.hpp"
#include "advgen/discriminators.hpp"
#include "advgen/evaluation.hpp"
#include "advgen/generator.hpp"
#include "advgen/matrix.hpp"
#include "advgen/rng.hpp"
#include "advgen/target_model.hpp"
#include "advgen/trainer.hpp"
#include "gradcheck.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace advgen;
using corpus::TokenSequence;
using corpus::Vocabulary;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

// ---------------------------------------------------------------------------
// 1. predict_soft on one-hot inputs equals predict_hard.

Outcome soft_hard_consistency() {
  const auto start = std::chrono::steady_clock::now();
  target::TargetConfig tc;
  tc.vocab_size = 60;
  const target::TargetParams f = target::init_target(tc, 101);
  std::mt19937_64 rng(102);
  std::uniform_int_distribution<int> word(Vocabulary::kNumSpecials, tc.vocab_size - 1);
  std::uniform_int_distribution<int> length(1, tc.max_len + 5);
  double worst = 0.0;
  for (int s = 0; s < 100; ++s) {
    TokenSequence ids(static_cast<std::size_t>(length(rng)));
    for (int& id : ids) id = word(rng);
    // one-hot rows, PAD-extended and truncated to m, built independently
    Matrix onehot(static_cast<std::size_t>(tc.max_len), static_cast<std::size_t>(tc.vocab_size));
    for (std::size_t p = 0; p < onehot.rows(); ++p) {
      onehot(p, static_cast<std::size_t>(p < ids.size() ? ids[p] : Vocabulary::kPad)) = 1.0;
    }
    const auto soft = target::predict_soft(gen::soft_embed(onehot, f.embedding_table()), f);
    const auto hard = target::predict_hard(ids, f);
    for (std::size_t k = 0; k < hard.size(); ++k) worst = std::max(worst, std::abs(soft[k] - hard[k]));
  }
  const double secs = seconds_since(start);
  return {worst < 1e-5 && secs < 10.0,
          "max |soft - hard| " + fmt(worst) + " over 100 sequences in " + fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 2. Finite differences through decoder logits, Gumbel-Softmax, soft
// embedding, target loss and discriminator loss.

Outcome chain_gradient() {
  const auto start = std::chrono::steady_clock::now();
  constexpr std::size_t kV = 12, kD = 4, kM = 4, kH = 5;
  target::TargetConfig tc;
  tc.vocab_size = kV;
  tc.max_len = kM;
  tc.emb_dim = kD;
  tc.filter_widths = {2, 3};
  tc.num_filters = 3;
  const target::TargetParams f = target::init_target(tc, 201);
  disc::DiscConfig dc;
  dc.num_classes = 2;
  dc.max_len = kM;
  dc.emb_dim = kD;
  dc.hidden = {6};
  const disc::DiscriminatorParams d = disc::init_discriminators(dc, 202);
  Rng rng(203);
  const Matrix noise = gumbel_matrix(kM, kV, rng);
  const Matrix real = testing::random_matrix(kM, kD, 204);

  // inputs: decoder states (m x h), output projection (h x |V|), generator
  // embedding table (|V| x d)
  auto forward = [&](ad::Tape& t, const std::vector<ad::Var>& x) {
    const target::TargetVars tv = target::view(t, f);
    const disc::DiscVars dv = disc::view(t, d);
    const ad::Var logits = ad::matmul(t, x[0], x[1]);
    std::vector<ad::Var> to_target, to_disc, real_rows;
    for (std::size_t p = 0; p < kM; ++p) {
      const ad::Var soft = gen::gumbel_soften(t, ad::slice_rows(t, logits, p, 1),
                                              Matrix::row_vector(noise.row(p)), 0.7);
      to_target.push_back(gen::soft_embed(t, soft, tv.embedding));
      to_disc.push_back(gen::soft_embed(t, soft, x[2]));
      real_rows.push_back(t.constant(Matrix::row_vector(real.row(p))));
    }
    const int cls[1] = {1};
    const double w[1] = {1.0};
    const ad::Var adv = ad::cross_entropy(t, target::logits(t, tv, tc, to_target), cls, w);
    const ad::Var fake_score = disc::disc_logits(t, dv, dc, 0, to_disc);
    const ad::Var real_score = disc::disc_logits(t, dv, dc, 0, real_rows);
    return ad::add(t, adv, disc::disc_loss_k(t, real_score, fake_score));
  };
  const auto res = testing::grad_check(
      forward, {testing::random_matrix(kM, kH, 205), testing::random_matrix(kH, kV, 206),
                testing::random_matrix(kV, kD, 207, 0.5)});
  const double secs = seconds_since(start);
  return {res.max_rel_error < 1e-3 && secs < 60.0,
          "max relative error " + fmt(res.max_rel_error) + " over " + std::to_string(res.checked) + " entries in " +
              fmt(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------
// 3. Closed forms.

Outcome closed_forms() {
  std::vector<std::string> bad;
  auto check = [&](const std::string& name, double got, double want) {
    if (!(std::abs(got - want) <= 1e-6)) bad.push_back(name + "=" + fmt(got, 10));
  };
  check("KL(0,1)", train::kl_divergence(std::vector<double>{0.0}, std::vector<double>{1.0}), 0.0);
  check("KL((1,0),(1,1))", train::kl_divergence(std::vector<double>{1.0, 0.0}, std::vector<double>{1.0, 1.0}), 0.5);
  check("adv_loss(0.5)", train::adv_loss(std::vector<double>{0.5, 0.5}, 1), std::log(2.0));
  check("disc_loss(0.5)", disc::disc_loss_k(std::vector<double>{0.5}, std::vector<double>{0.5}), -1.3862943611);
  const std::vector<TokenSequence> texts{{4, 5, 6, 7}, {9, 8}, {10}};
  const auto lm = eval::uniform_language_model(11);
  check("uniform perplexity", eval::perplexity_score(texts, lm).score, std::log(11.0));
  std::string detail = bad.empty() ? "KL, adv_loss, disc_loss and uniform-LM perplexity exact to 1e-6" : "";
  for (const auto& b : bad) detail += (detail.empty() ? "mismatch: " : ", ") + b;
  return {bad.empty(), detail};
}

// ---------------------------------------------------------------------------
// 4. Gumbel relaxation limits.

Outcome gumbel_limits() {
  Rng rng(301);
  const Matrix u = normal_matrix(1, 10, rng);
  const std::vector<double> zero(10, 0.0);
  const auto soft = gen::gumbel_soften(u.flat(), 1.0, zero);
  // reference softmax computed directly
  const double mx = *std::max_element(u.flat().begin(), u.flat().end());
  double z = 0.0;
  for (double v : u.flat()) z += std::exp(v - mx);
  double worst = 0.0;
  for (std::size_t k = 0; k < 10; ++k) worst = std::max(worst, std::abs(soft[k] - std::exp(u.flat()[k] - mx) / z));

  int agree = 0;
  for (int draw = 0; draw < 1000; ++draw) {
    const Matrix logits = normal_matrix(1, 10, rng);
    const Matrix g = gumbel_matrix(1, 10, rng);
    const auto s = gen::gumbel_soften(logits.flat(), 0.01, g.flat());
    // hard Gumbel-max on the log-softmax scores
    const double lmx = *std::max_element(logits.flat().begin(), logits.flat().end());
    double lz = 0.0;
    for (double v : logits.flat()) lz += std::exp(v - lmx);
    std::vector<double> pert(10);
    for (std::size_t k = 0; k < 10; ++k) pert[k] = logits.flat()[k] - lmx - std::log(lz) + g.flat()[k];
    agree += argmax(s) == argmax(pert);
  }
  return {worst <= 1e-12 && agree >= 990,
          "t=1 zero-noise deviation from softmax " + fmt(worst) + ", t=0.01 argmax agreement " +
              std::to_string(agree) + "/1000"};
}

// ---------------------------------------------------------------------------
// 9. Metric oracles.

Outcome metric_oracles() {
  std::vector<std::string> bad;
  // diversity: 200 texts over a small vocabulary so overlaps are common
  std::mt19937_64 rng(401);
  std::uniform_int_distribution<int> word(4, 12);
  std::uniform_int_distribution<int> length(2, 12);
  std::vector<TokenSequence> texts(200);
  for (auto& t : texts) {
    t.resize(static_cast<std::size_t>(length(rng)));
    for (int& id : t) id = word(rng);
  }
  for (int i = 0; i < 40; ++i) texts[static_cast<std::size_t>(i + 100)] = texts[static_cast<std::size_t>(i)];
  const auto fast = eval::unique_flags(texts);
  const auto slow = eval::unique_flags_bruteforce(texts);
  const auto report = eval::diversity_report(texts, texts);
  std::size_t unique = 0, eligible = 0;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    if (texts[i].size() >= 4) {
      ++eligible;
      unique += slow[i] ? 1 : 0;
    }
  }
  const double brute_fraction = static_cast<double>(unique) / static_cast<double>(eligible);
  if (fast != slow || report.unique_fraction != brute_fraction) bad.push_back("diversity");

  // perplexity: bias-only LM, so every step emits (1,1,1,1,2,3,1)/10
  eval::LanguageModelParams lm = eval::init_language_model(eval::LmConfig{7, 2, 3}, 402);
  for (std::size_t i = 0; i < lm.store.size(); ++i) lm.store.at(i).value.fill(0.0);
  lm.store.at(lm.output.bias).value(0, 4) = std::log(2.0);
  lm.store.at(lm.output.bias).value(0, 5) = std::log(3.0);
  const std::vector<TokenSequence> toy{{4, 5, 6}, {5, 5, 4}};
  const double want = -(2 * std::log(0.2) + 3 * std::log(0.3) + std::log(0.1)) / 6.0;
  const double got = eval::perplexity_score(toy, lm).score;
  if (std::abs(got - want) > 1e-12) bad.push_back("perplexity " + fmt(got, 12) + " vs " + fmt(want, 12));

  // nearest neighbor against a linear scan
  const Matrix table = testing::random_matrix(40, 6, 403);
  int mismatches = 0;
  for (int q = 0; q < 1000; ++q) {
    const Matrix v = testing::random_matrix(1, 6, 1000 + static_cast<std::uint64_t>(q));
    int best = -1;
    double best_d = 0.0;
    for (std::size_t r = Vocabulary::kNumSpecials; r < table.rows(); ++r) {
      double dist = 0.0;
      for (std::size_t j = 0; j < 6; ++j) dist += (table(r, j) - v(0, j)) * (table(r, j) - v(0, j));
      if (best < 0 || dist < best_d) {
        best = static_cast<int>(r);
        best_d = dist;
      }
    }
    mismatches += attack::nearest_neighbor_word(v.flat(), table) != best;
  }
  if (mismatches) bad.push_back(std::to_string(mismatches) + " nearest-neighbor mismatches");
  std::string detail = bad.empty() ? "diversity (unique fraction " + fmt(brute_fraction) +
                                         "), toy perplexity and 1000 nearest-neighbor queries match their oracles"
                                   : "";
  for (const auto& b : bad) detail += (detail.empty() ? "mismatch: " : ", ") + b;
  return {bad.empty(), detail};
}

// ---------------------------------------------------------------------------
// Pipeline through the command line.

struct Pipeline {
  fs::path dir;
  bool ok = false;
  std::string failure;
  double seconds = 0.0;
};

std::string quote(const std::string& s) { return "'" + s + "'"; }

Pipeline run_pipeline(const std::string& cli, const std::string& config, const fs::path& dir) {
  Pipeline p;
  p.dir = dir;
  fs::remove_all(dir);
  fs::create_directories(dir / "stage-logs");
  const std::string common = " --config " + quote(config) + " --out " + quote(dir.string());
  const std::vector<std::pair<std::string, std::string>> stages{
      {"data-synth", "data synth"},
      {"data-split", "data split"},
      {"train-target", "train target"},
      {"train-vae", "train vae"},
      {"train-joint", "train joint"},
      {"train-joint-nodisc", "train joint --tag nodisc --set disable_disc=true"},
      {"generate", "attack generate --n 2500"},
      {"generate-nodisc", "attack generate --n 2500 --tag nodisc"},
      {"generate-vae", "attack generate --n 2500 --tag vae --checkpoint " + quote((dir / "models/vae.ckpt").string())},
      {"metrics", "eval metrics"},
      {"metrics-nodisc", "eval metrics --tag nodisc"},
      {"metrics-vae", "eval metrics --tag vae"},
      {"pairwise", "attack pairwise"},
      {"baseline-random", "attack baseline random"},
      {"baseline-fgsm", "attack baseline fgsm"},
      {"defend", "defend augment"},
      {"bench", "bench speed --mode unrestricted --mode fgsm"},
  };
  const auto start = std::chrono::steady_clock::now();
  for (const auto& [name, args] : stages) {
    const auto log = dir / "stage-logs" / (name + ".log");
    const std::string cmd = quote(cli) + " " + args + common + " > " + quote(log.string()) + " 2>&1";
    const int status = std::system(cmd.c_str());
    if (status != 0) {
      std::ifstream in(log);
      std::string last, line;
      while (std::getline(in, line)) last = line;
      p.failure = "stage " + name + " exited " + std::to_string(WEXITSTATUS(status)) + ": " + last;
      return p;
    }
  }
  p.seconds = seconds_since(start);
  p.ok = true;
  return p;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing " + path.string());
  return nlohmann::json::parse(in);
}

double record_success_rate(const fs::path& path) { return attack::success_rate(attack::read_records(path)); }

Outcome attack_reproduction(const Pipeline& p) {
  const double acc = read_json(p.dir / "logs/target.json")["test_accuracy"].get<double>();
  const double asr5 = read_json(p.dir / "eval/metrics.json")["attack_success_rate"].get<double>();
  const double asr0 = read_json(p.dir / "eval/metrics-vae.json")["attack_success_rate"].get<double>();
  const double random = record_success_rate(p.dir / "attacks/baseline-random.jsonl");
  const double fgsm = record_success_rate(p.dir / "attacks/baseline-fgsm.jsonl");
  const double ours = record_success_rate(p.dir / "attacks/pairwise.jsonl");
  const bool pass = acc >= 0.95 && asr5 >= 3.0 * asr0 && asr5 >= 0.5 && random < fgsm && fgsm < ours &&
                    p.seconds < 1800.0;
  return {pass, "target test accuracy " + fmt(acc) + "; unrestricted ASR phi=5 " + fmt(asr5) + " vs phi=0 " +
                    fmt(asr0) + "; pairwise Random " + fmt(random) + " < FGSM+NNS " + fmt(fgsm) + " < ours " +
                    fmt(ours) + "; pipeline " + fmt(p.seconds, 4) + " s"};
}

Outcome ablation(const Pipeline& p) {
  const auto with = read_json(p.dir / "eval/metrics.json");
  const auto without = read_json(p.dir / "eval/metrics-nodisc.json");
  const double ppl_with = with["perplexity_score"].get<double>();
  const double ppl_without = without["perplexity_score"].get<double>();
  const double val_with = with["validity_rate"].get<double>();
  const double val_without = without["validity_rate"].get<double>();
  const double asr_with = with["attack_success_rate"].get<double>();
  const double asr_without = without["attack_success_rate"].get<double>();
  const bool ppl_ok = ppl_without >= 1.5 * ppl_with;
  const bool val_ok = val_without <= 0.5 * val_with;
  const bool asr_ok = std::abs(asr_with - asr_without) <= 0.10;
  return {ppl_ok && val_ok && asr_ok,
          "perplexity score without/with D " + fmt(ppl_without) + "/" + fmt(ppl_with) + " (need >= 1.5x: " +
              (ppl_ok ? "yes" : "no") + "); validity " + fmt(val_without) + "/" + fmt(val_with) +
              " (need <= half: " + (val_ok ? "yes" : "no") + "); ASR " + fmt(asr_without) + "/" + fmt(asr_with)};
}

Outcome defense(const Pipeline& p) {
  const auto r = read_json(p.dir / "defense/report.json");
  const double adv_before = r["adversarial_before"].get<double>();
  const double adv_after = r["adversarial_after"].get<double>();
  const double clean_before = r["clean_before"].get<double>();
  const double clean_after = r["clean_after"].get<double>();
  const auto augmented = r["train_adversarial"].get<long>();
  const bool pass = augmented == 2000 && adv_before < 0.10 && adv_after > 0.90 && clean_before - clean_after <= 0.02;
  return {pass, std::to_string(augmented) + " augmenting texts; adversarial accuracy " + fmt(adv_before) + " -> " +
                    fmt(adv_after) + "; clean accuracy " + fmt(clean_before) + " -> " + fmt(clean_after) +
                    " (drop " + fmt(clean_before - clean_after) + ", limit 0.02)"};
}

Outcome speed(const Pipeline& p) {
  std::map<std::string, double> per;
  for (const auto& e : read_json(p.dir / "bench/speed.json")) {
    per[e["mode"].get<std::string>()] = e["seconds_per_example"].get<double>();
  }
  const double ours = per.at("unrestricted");
  const double fgsm = per.at("fgsm");
  return {fgsm >= 10.0 * ours, "seconds per example: unrestricted " + fmt(ours) + ", FGSM+NNS " + fmt(fgsm) +
                                   " (speedup " + fmt(fgsm / ours, 3) + "x, need >= 10x)"};
}

// Every artifact except timing outputs, stage logs and manifests (which
// carry wall-clock times).
std::map<std::string, std::string> artifact_hashes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).string();
    if (rel.rfind("bench/", 0) == 0 || rel.rfind("stage-logs/", 0) == 0 || rel.rfind("manifests/", 0) == 0) {
      continue;
    }
    std::ifstream in(e.path(), std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    out[rel] = std::to_string(fnv1a64(bytes.data(), bytes.size()));
  }
  return out;
}

Outcome determinism(const Pipeline& a, const Pipeline& b) {
  const auto ha = artifact_hashes(a.dir);
  const auto hb = artifact_hashes(b.dir);
  std::vector<std::string> differ;
  for (const auto& [k, v] : ha) {
    const auto it = hb.find(k);
    if (it == hb.end() || it->second != v) differ.push_back(k);
  }
  for (const auto& [k, v] : hb) {
    if (!ha.count(k)) differ.push_back(k);
  }
  std::string detail = std::to_string(ha.size()) + " artifacts hashed across two runs; ";
  if (differ.empty()) {
    detail += "all identical";
  } else {
    detail += std::to_string(differ.size()) + " differ, first " + differ.front();
  }
  return {differ.empty() && !ha.empty(), detail};
}

template <typename F>
Outcome guarded(F&& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    return {false, std::string("error: ") + e.what()};
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string cli, config, work = "acceptance-runs";
  app.add_option("--cli", cli, "advgen binary")->required();
  app.add_option("--config", config, "pipeline configuration")->required();
  app.add_option("--work", work, "scratch directory for the pipeline runs")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  int failures = 0;
  auto report = [&](int id, const std::string& name, const Outcome& o) {
    std::cout << "criterion " << id << " [" << (o.pass ? "PASS" : "FAIL") << "] " << name << ": " << o.detail
              << std::endl;
    failures += o.pass ? 0 : 1;
  };

  report(1, "soft/hard consistency", guarded(soft_hard_consistency));
  report(2, "gradient correctness", guarded(chain_gradient));
  report(3, "closed-form spot checks", guarded(closed_forms));
  report(4, "Gumbel relaxation", guarded(gumbel_limits));

  std::cout << "running the pipeline twice under " << work << " ..." << std::endl;
  const Pipeline a = run_pipeline(cli, config, fs::path(work) / "run-a");
  const Pipeline b = a.ok ? run_pipeline(cli, config, fs::path(work) / "run-b") : Pipeline{};
  auto pipeline_check = [&](const Pipeline& p, auto&& f) {
    if (!p.ok) return Outcome{false, "pipeline failed: " + p.failure};
    return guarded([&] { return f(p); });
  };
  report(5, "desk-scale attack reproduction", pipeline_check(a, attack_reproduction));
  report(6, "ablation without discriminators", pipeline_check(a, ablation));
  report(7, "adversarial-training defense", pipeline_check(a, defense));
  report(8, "generation speed", pipeline_check(a, speed));
  report(9, "metric oracles", guarded(metric_oracles));
  report(10, "determinism", a.ok && b.ok ? guarded([&] { return determinism(a, b); })
                                         : Outcome{false, "pipeline failed: " + (a.ok ? b.failure : a.failure)});

  std::cout << (10 - failures) << "/10 criteria passed" << std::endl;
  return failures == 0 ? 0 : 1;
}
