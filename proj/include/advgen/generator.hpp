#pragma once

// Class-conditional sentence VAE: GRU encoder to a diagonal Gaussian latent,
// [z, c_k] -> initial decoder state, GRU decoder with a bias-free output
// projection, Gumbel-Softmax relaxation and beam-search decoding.
//
// Tape functions are batched: every Var carries one row per example.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "advgen/autograd.hpp"
#include "advgen/corpus.hpp"
#include "advgen/nn.hpp"

namespace advgen::gen {

struct GeneratorConfig {
  int vocab_size = 0;
  int num_classes = 2;
  int emb_dim = 64;      // d_emb
  int hidden = 128;      // encoder and decoder GRU width
  int latent = 32;       // d_z
  int class_dim = 8;     // d_c
  int max_len = 20;      // fixed soft-sequence length m and decoding cap
  int beam_width = 4;

  void validate() const;
};

struct GeneratorParams {
  GeneratorConfig config;
  nn::ParamStore store;
  std::size_t embedding = 0;    // |V| x d_emb
  nn::Gru encoder;
  nn::Linear mu_head;
  nn::Linear log_sigma_head;
  std::size_t class_table = 0;  // |Y| x d_c
  nn::Linear init_state;        // (d_z + d_c) -> hidden
  nn::Gru decoder;
  std::size_t output = 0;       // W_h: hidden x |V|, no bias

  const Matrix& embedding_table() const { return store.at(embedding).value; }
};

struct GeneratorVars {
  ad::Var embedding;
  nn::GruVars encoder;
  nn::LinearVars mu_head;
  nn::LinearVars log_sigma_head;
  ad::Var class_table;
  nn::LinearVars init_state;
  nn::GruVars decoder;
  ad::Var output;
};

GeneratorParams init_generator(const GeneratorConfig& config, std::uint64_t seed);
GeneratorVars bind(ad::Tape& t, GeneratorParams& params);
GeneratorVars view(ad::Tape& t, const GeneratorParams& params);

struct EncoderVars {
  ad::Var mu;         // B x d_z
  ad::Var log_sigma;  // B x d_z
  ad::Var h_last;     // B x hidden
};

// Sequences are truncated to max_len; each row's h_N is taken at its own
// last token.
EncoderVars encode(ad::Tape& t, const GeneratorVars& vars, const GeneratorConfig& config,
                   std::span<const corpus::TokenSequence> batch);

// z = mu + exp(log_sigma) * eps
ad::Var reparameterize(ad::Tape& t, ad::Var mu, ad::Var log_sigma, const Matrix& eps);

// Linear map of [z, C[classes[b]]].
ad::Var init_decoder_state(ad::Tape& t, const GeneratorVars& vars, const GeneratorConfig& config,
                           ad::Var z, std::span<const int> classes);

// Decoder input and target ids per step for teacher forcing: inputs are GO
// followed by the text, targets are the text followed by EOS; finished rows
// get target -1. Word inputs (not GO) are replaced by UNK with probability
// 1 - keep_rate.
struct TeacherBatch {
  std::vector<std::vector<int>> inputs;   // steps x B
  std::vector<std::vector<int>> targets;  // steps x B
  std::vector<std::size_t> lengths;       // text length per row (without EOS)
  std::size_t dropped = 0;
  std::size_t droppable = 0;
};

TeacherBatch make_teacher_batch(std::span<const corpus::TokenSequence> batch, std::size_t max_len,
                                double keep_rate, Rng& rng);

// One B x |V| logit matrix u_i = h_i W_h per step.
std::vector<ad::Var> decode_teacher_forced(ad::Tape& t, const GeneratorVars& vars, ad::Var state,
                                           const TeacherBatch& teacher);

// softmax((log_softmax(u) + g) / temperature)
ad::Var gumbel_soften(ad::Tape& t, ad::Var logits, const Matrix& noise, double temperature);

// Forward value is the one-hot argmax of each row (ties to the smaller id);
// the gradient passes to soft unchanged.
ad::Var straight_through(ad::Tape& t, ad::Var soft);

// W = soft x table
ad::Var soft_embed(ad::Tape& t, ad::Var soft, ad::Var table);

// m relaxed positions (B x |V| each): rows whose text is shorter than a
// position hold a one-hot PAD there. logits[i] is used for position i.
std::vector<ad::Var> relaxed_sequence(ad::Tape& t, std::span<const ad::Var> logits,
                                      std::span<const std::size_t> lengths, std::size_t m,
                                      double temperature, Rng& noise_rng);

// m one-hot positions for token ids (PAD-extended, truncated to m).
std::vector<ad::Var> one_hot_sequence(ad::Tape& t, std::span<const corpus::TokenSequence> batch,
                                      std::size_t m, std::size_t vocab_size);

// ---------------------------------------------------------------------------
// Gradient-free helpers on plain matrices.

struct EncoderOutput {
  std::vector<double> mu;
  std::vector<double> sigma;
  std::vector<double> h_last;
};

EncoderOutput encode(const corpus::TokenSequence& ids, const GeneratorParams& params);
// Batched posterior means and log sigmas.
void encode_batch(std::span<const corpus::TokenSequence> batch, const GeneratorParams& params, Matrix& mu,
                  Matrix& log_sigma);

std::vector<double> reparameterize(std::span<const double> mu, std::span<const double> sigma,
                                   std::span<const double> eps);

// B x hidden initial states.
Matrix init_decoder_state(const Matrix& z, std::span<const int> classes, const GeneratorParams& params);

std::vector<double> output_distribution(std::span<const double> logits);

struct GumbelConfig {
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

std::vector<double> gumbel_soften(std::span<const double> logits, double temperature,
                                  std::span<const double> noise);
std::vector<double> gumbel_soften(std::span<const double> logits, const GumbelConfig& config);

// soft is m x |V|, table |V| x d; returns m x d.
Matrix soft_embed(const Matrix& soft, const Matrix& table);

// Per-step emission log-probabilities with GO and PAD masked out.
void masked_log_softmax(std::span<const double> logits, std::span<double> out);

// One hypothesis per state row; each ends with EOS unless cut by max_len.
std::vector<corpus::TokenSequence> decode_beam_search(const Matrix& states, int beam_width, int max_len,
                                                      const GeneratorParams& params);

// n x d_z standard normal draws.
Matrix sample_latent(int n, int latent_dim, std::uint64_t seed);

void save_generator(const std::filesystem::path& path, const GeneratorParams& params, std::uint64_t vocab_hash);
GeneratorParams load_generator(const std::filesystem::path& path,
                               std::optional<std::uint64_t> expected_vocab_hash = std::nullopt);

// Shared with the joint checkpoint.
void export_generator(Checkpoint& ckpt, const GeneratorParams& params, std::uint64_t vocab_hash);
GeneratorParams import_generator(const Checkpoint& ckpt, std::optional<std::uint64_t> expected_vocab_hash,
                                 const std::string& origin);

}  // namespace advgen::gen
