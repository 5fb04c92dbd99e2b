#pragma once

// Pair-wise and unrestricted generation with a trained generator, plus the
// word-replacement baselines (Random, FGSM+NNS, DeepFool+NNS).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advgen/corpus.hpp"
#include "advgen/generator.hpp"
#include "advgen/target_model.hpp"

namespace advgen::attack {

struct AttackRecord {
  std::string mode;  // pairwise, unrestricted or baseline:<name>
  std::optional<std::string> source_text;
  int condition_class = 0;
  int target_class = 0;
  std::string generated_text;
  corpus::TokenSequence generated_ids;
  std::vector<double> prediction;
  int predicted_class = 0;
  bool success = false;
  std::optional<std::uint64_t> latent_seed;

  bool is_baseline() const { return mode.rfind("baseline:", 0) == 0; }
  // Success recomputed from the record's own fields.
  bool consistent() const;
};

void write_records(const std::filesystem::path& path, std::span<const AttackRecord> records);
std::vector<AttackRecord> read_records(const std::filesystem::path& path);

// Shared context: vocabulary for surface text, target-class map
// (empty = (k + 1) mod |Y|).
struct AttackContext {
  const corpus::Vocabulary* vocab = nullptr;
  const target::TargetParams* target = nullptr;
  std::vector<int> target_class_map;

  int target_class(int k) const;
};

// Target probabilities for a token sequence; an empty sequence is scored as
// all-PAD input.
std::vector<double> score_ids(const corpus::TokenSequence& ids, const target::TargetParams& target);

// Encode, reparameterize with noise from derive_seed(seed, i), condition on
// the source label, beam-decode and score. Record i carries latent_seed
// derive_seed(seed, i).
std::vector<AttackRecord> attack_pairwise(std::span<const corpus::LabeledText> texts,
                                          const gen::GeneratorParams& generator, const AttackContext& ctx,
                                          std::uint64_t seed);

// n draws z_i = sample_latent(1, d_z, derive_seed(seed, i)) decoded with
// condition k, decoded batch_size latents at a time.
std::vector<AttackRecord> generate_unrestricted(int n, int condition_class, const gen::GeneratorParams& generator,
                                                const AttackContext& ctx, std::uint64_t seed, int batch_size = 256);

struct BaselineConfig {
  double epsilon = 1.0;          // FGSM step
  // Measure epsilon in units of the RMS coordinate of the target's word
  // embeddings (specials excluded).
  bool scale_epsilon = false;
  double modify_fraction = 0.10; // Random
  double fgsm_top_fraction = 1.0;  // 1 perturbs every position
  int max_deepfool_iters = 50;
  double overshoot = 0.02;
  std::uint64_t seed = 1;

  void validate() const;
};

// Root mean square of the non-special rows of an embedding table.
double embedding_rms(const Matrix& table);

// argmin Euclidean distance over non-special rows; ties go to the smaller id.
int nearest_neighbor_word(std::span<const double> v, const Matrix& table);

AttackRecord baseline_random(const corpus::LabeledText& x, const BaselineConfig& cfg, const AttackContext& ctx,
                             std::uint64_t index = 0);
AttackRecord baseline_fgsm_nns(const corpus::LabeledText& x, const BaselineConfig& cfg, const AttackContext& ctx);

struct DeepFoolTrace {
  Matrix perturbation;  // total r, scaled by (1 + overshoot)
  int iterations = 0;
  bool crossed = false;
};

// Binary DeepFool on a score s(x) that must become positive. score returns
// s(x) and writes its gradient.
DeepFoolTrace deepfool_binary(const Matrix& x0, const std::function<double(const Matrix&, Matrix&)>& score,
                              int max_iters, double overshoot);

AttackRecord baseline_deepfool_nns(const corpus::LabeledText& x, const BaselineConfig& cfg, const AttackContext& ctx,
                                   DeepFoolTrace* trace = nullptr);

// Runs a named baseline (random, fgsm, deepfool) over texts.
std::vector<AttackRecord> run_baseline(const std::string& name, std::span<const corpus::LabeledText> texts,
                                       const BaselineConfig& cfg, const AttackContext& ctx);

double success_rate(std::span<const AttackRecord> records);

}  // namespace advgen::attack
