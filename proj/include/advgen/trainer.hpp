#pragma once

// Loss assembly, KL annealing, VAE pretraining and the joint adversarial
// training loop with per-class discriminators.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advgen/config.hpp"
#include "advgen/corpus.hpp"
#include "advgen/discriminators.hpp"
#include "advgen/generator.hpp"
#include "advgen/target_model.hpp"

namespace advgen::train {

// Seed stream tags (see derive_seed), one per independent source of noise.
namespace streams {
constexpr std::uint64_t kSampler = 10;
constexpr std::uint64_t kLatent = 11;  // reparameterization noise, then word dropout
constexpr std::uint64_t kGumbel = 12;
constexpr std::uint64_t kGenInit = 13;
}  // namespace streams

struct TrainingConfig {
  double phi = 5.0;
  long kl_ramp_start = 300;
  long kl_ramp_end = 1500;
  double keep_rate = 0.75;
  double t_start = 1.0;
  double t_end = 0.1;
  long t_decay_steps = 400;
  int batch_size = 32;  // per class in joint training
  double lr_generator = 1e-3;
  double lr_disc = 1e-3;
  double clip_norm = 5.0;
  long pretrain_steps = 1500;
  long joint_steps = 400;
  // target_class_map[k] = y_t; empty selects (k + 1) mod |Y|
  std::vector<int> target_class_map;
  bool disable_disc = false;
  bool nonsaturating = false;
  // Let the discriminator terms of the G update reach the generator's word
  // embeddings through the soft-embedding step.
  bool disc_embedding_grad = false;
  // Feed the discriminators straight-through one-hot samples instead of the
  // relaxed distributions, so they cannot separate real from fake by softness.
  bool straight_through_disc = false;
  int d_steps = 1;  // discriminator updates per cycle
  int g_steps = 1;  // generator updates per cycle
  long early_stop_window = 0;  // 0 disables
  double early_stop_tol = 1e-3;
  long checkpoint_every = 0;   // 0 disables
  std::uint64_t seed = 1;

  void validate(int num_classes) const;
  int target_class(int k, int num_classes) const;

  static TrainingConfig from_config(const KeyValueConfig& kv);
  void write_to(KeyValueConfig& kv) const;
};

double kl_weight(long step, const TrainingConfig& config);

// Gumbel temperature: exponential decay from t_start to t_end over
// t_decay_steps, then constant.
double temperature(long step, const TrainingConfig& config);

// Closed-form KL(N(mu, sigma^2) || N(0, I)) summed over dimensions.
double kl_divergence(std::span<const double> mu, std::span<const double> sigma);

struct VaeLoss {
  ad::Var total;
  ad::Var recon;
  ad::Var kl;
};

// Batch means of per-example summed token cross-entropy and KL; total =
// recon + alpha * kl.
VaeLoss vae_loss(ad::Tape& t, std::span<const ad::Var> logits, const gen::TeacherBatch& teacher, ad::Var mu,
                 ad::Var log_sigma, double alpha);

// -log P(y_t), batch mean, from target logits.
ad::Var adv_loss(ad::Tape& t, ad::Var target_logits, std::span<const int> target_classes);
double adv_loss(std::span<const double> probs, int target_class);

double joint_loss(double l_vae, double l_adv, std::span<const double> disc_losses, double phi);

struct StepRecord {
  std::string phase;
  long step = 0;
  double l_vae = 0.0;
  double recon = 0.0;
  double kl = 0.0;
  double alpha = 0.0;
  double l_adv = 0.0;
  std::vector<double> l_disc;
  double l_joint = 0.0;
  double temperature = 0.0;
};

struct TrainLog {
  std::vector<StepRecord> records;
  int num_classes = 2;

  void write_csv(const std::filesystem::path& path) const;
  static TrainLog read_csv(const std::filesystem::path& path);
};

// Per-cycle sampling for the joint loop: batch_size texts from each X_k,
// plus the noise draws of the generator forward pass.
class JointBatchSampler {
 public:
  JointBatchSampler(const corpus::DatasetSplits& splits, int batch_size, std::uint64_t seed);
  // Row order: class 0 block, class 1 block, ...
  void next(std::vector<corpus::TokenSequence>& texts, std::vector<int>& classes);

 private:
  const corpus::DatasetSplits* splits_;
  int batch_size_;
  Rng rng_;
};

struct PretrainResult {
  gen::GeneratorParams generator;
  TrainLog log;
  double initial_dev_recon = 0.0;
  double final_dev_recon = 0.0;
};

// Mean per-text reconstruction cross-entropy on texts with posterior means
// and no word dropout.
double dev_reconstruction(const gen::GeneratorParams& g, std::span<const corpus::LabeledText> texts);

PretrainResult pretrain_vae(const corpus::DatasetSplits& splits, const gen::GeneratorConfig& gen_config,
                            const TrainingConfig& config);

struct JointResult {
  gen::GeneratorParams generator;
  disc::DiscriminatorParams discriminators;
  TrainLog log;
  bool early_stopped = false;
};

using CheckpointHook =
    std::function<void(long step, const gen::GeneratorParams&, const disc::DiscriminatorParams&)>;

// Throws std::logic_error if the target is not frozen.
JointResult train_joint(const gen::GeneratorParams& pretrained, const target::TargetParams& target,
                        const disc::DiscriminatorParams& discriminators, const corpus::DatasetSplits& splits,
                        const TrainingConfig& config, const CheckpointHook& on_checkpoint = {});

// Generator and discriminators in one checkpoint. load_joint throws
// std::runtime_error naming the path when it is missing or holds no joint
// model.
void save_joint(const std::filesystem::path& path, const gen::GeneratorParams& generator,
                const disc::DiscriminatorParams& discriminators, std::uint64_t vocab_hash);
struct JointModel {
  gen::GeneratorParams generator;
  disc::DiscriminatorParams discriminators;
};
JointModel load_joint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_vocab_hash = std::nullopt);

// Default discriminator shape for a generator: m and d_emb from its config.
disc::DiscConfig disc_config_for(const gen::GeneratorConfig& g, const target::TargetConfig& f);

}  // namespace advgen::train
