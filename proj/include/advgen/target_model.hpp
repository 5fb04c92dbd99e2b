#pragma once

// The attacked classifier: a TextCNN over a fixed input length m. Inputs are
// m per-position embedding matrices (B x d_w each), produced either by table
// lookup (hard tokens) or by soft distributions times the same table.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "advgen/autograd.hpp"
#include "advgen/corpus.hpp"
#include "advgen/nn.hpp"

namespace advgen::target {

struct TargetConfig {
  int vocab_size = 0;
  int num_classes = 2;
  int max_len = 20;  // fixed input length m
  int emb_dim = 32;  // d_w
  std::vector<int> filter_widths{3, 4, 5};
  int num_filters = 32;

  void validate() const;
};

struct TargetParams {
  TargetConfig config;
  nn::ParamStore store;
  std::size_t embedding = 0;
  std::vector<std::size_t> kernels;  // (w * d_w) x F per width
  std::vector<std::size_t> biases;   // 1 x F per width
  nn::Linear output;

  bool frozen() const { return store.frozen(); }
  const Matrix& embedding_table() const { return store.at(embedding).value; }
};

struct TargetVars {
  ad::Var embedding;
  std::vector<ad::Var> kernels;
  std::vector<ad::Var> biases;
  nn::LinearVars output;
};

TargetParams init_target(const TargetConfig& config, std::uint64_t seed);

// Trainable handles (constants once frozen).
TargetVars bind(ad::Tape& t, TargetParams& params);
// Constant handles aliasing the parameters.
TargetVars view(ad::Tape& t, const TargetParams& params);

// Pads with PAD or truncates to exactly m ids.
corpus::TokenSequence fit_length(const corpus::TokenSequence& ids, std::size_t m);

// One B x d_w matrix per position from padded token ids.
std::vector<ad::Var> embed_tokens(ad::Tape& t, const TargetVars& vars, const TargetConfig& config,
                                  std::span<const corpus::TokenSequence> batch);

// B x |Y| logits from m position embeddings.
ad::Var logits(ad::Tape& t, const TargetVars& vars, const TargetConfig& config,
               std::span<const ad::Var> positions);

struct TargetTrainSettings {
  int epochs = 6;
  int batch_size = 32;
  double lr = 1e-3;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
};

struct TargetTrainReport {
  std::vector<double> epoch_loss;
  std::vector<double> dev_accuracy;  // after each epoch
  double final_dev_accuracy = 0.0;
  long steps = 0;
};

// Throws std::runtime_error naming the step if the loss becomes non-finite.
TargetParams train_target(const corpus::DatasetSplits& splits, const TargetConfig& config,
                          const TargetTrainSettings& settings, TargetTrainReport* report = nullptr);

// Idempotent; later optimizer construction or gradient updates throw.
void freeze(TargetParams& params);

std::vector<double> predict_hard(const corpus::TokenSequence& ids, const TargetParams& params);
// B x |Y| probabilities.
Matrix predict_hard_batch(std::span<const corpus::TokenSequence> batch, const TargetParams& params);

// W is m x d_w (one sequence).
std::vector<double> predict_soft(const Matrix& w, const TargetParams& params);

// Gradient of loss_scale * CE(f(x), loss_class) with respect to each input
// position's embedding row; rows = min(len, m), cols = d_w.
Matrix input_gradients(const corpus::TokenSequence& ids, int loss_class, const TargetParams& params,
                       double loss_scale = 1.0);

// z_a - z_b at an m x d_w input matrix; when grad is given it receives the
// m x d_w gradient of that margin.
double logit_margin(const Matrix& w, int a, int b, const TargetParams& params, Matrix* grad = nullptr);

// m x d_w embedding matrix of a token sequence (PAD-extended, truncated).
Matrix embed_sequence(const corpus::TokenSequence& ids, const TargetParams& params);

double accuracy(std::span<const corpus::LabeledText> texts, const TargetParams& params);

void save_target(const std::filesystem::path& path, const TargetParams& params,
                 std::uint64_t vocab_hash);
// Throws when expected_vocab_hash is given and differs from the stored one.
TargetParams load_target(const std::filesystem::path& path,
                         std::optional<std::uint64_t> expected_vocab_hash = std::nullopt);

}  // namespace advgen::target
