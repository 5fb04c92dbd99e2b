#pragma once

// Per-class MLP discriminators D_k over flattened m x d soft-embedded
// sequences.

#include <cstdint>
#include <span>
#include <vector>

#include "advgen/autograd.hpp"
#include "advgen/nn.hpp"

namespace advgen::disc {

struct DiscConfig {
  int num_classes = 2;
  int max_len = 20;  // m
  int emb_dim = 64;  // d of the soft-embedded input
  std::vector<int> hidden{256, 64};

  void validate() const;
};

struct DiscriminatorParams {
  DiscConfig config;
  nn::ParamStore store;
  std::vector<std::vector<nn::Linear>> layers;  // per class; the last maps to one logit
};

using DiscVars = std::vector<std::vector<nn::LinearVars>>;

DiscriminatorParams init_discriminators(const DiscConfig& config, std::uint64_t seed);
DiscVars bind(ad::Tape& t, DiscriminatorParams& params);
DiscVars view(ad::Tape& t, const DiscriminatorParams& params);

// B x 1 pre-sigmoid scores of D_k for m positions of B x d each.
ad::Var disc_logits(ad::Tape& t, const DiscVars& vars, const DiscConfig& config, int k,
                    std::span<const ad::Var> positions);

// D_k(W) for one m x d sequence.
double disc_prob(const Matrix& w, int k, const DiscriminatorParams& params);

// mean log D(real) + mean log(1 - D(fake)), from pre-sigmoid scores.
ad::Var disc_loss_k(ad::Tape& t, ad::Var real_logits, ad::Var fake_logits);
// The same quantity from probabilities.
double disc_loss_k(std::span<const double> real_probs, std::span<const double> fake_probs);

// -mean log D(fake): the non-saturating generator objective.
ad::Var generator_nonsaturating(ad::Tape& t, ad::Var fake_logits);

void export_discriminators(Checkpoint& ckpt, const DiscriminatorParams& params);
DiscriminatorParams import_discriminators(const Checkpoint& ckpt);

}  // namespace advgen::disc
