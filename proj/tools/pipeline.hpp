#pragma once

// Run-directory plumbing for the advgen command line: the flat pipeline
// configuration, artifact paths and run manifests.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "advgen/attacks.hpp"
#include "advgen/config.hpp"
#include "advgen/corpus.hpp"
#include "advgen/discriminators.hpp"
#include "advgen/evaluation.hpp"
#include "advgen/generator.hpp"
#include "advgen/target_model.hpp"
#include "advgen/trainer.hpp"

namespace advgen::cli {

// Every setting of every stage. Training keys are unprefixed; the rest carry
// a section prefix (corpus., data., oracle., target., generator., disc.,
// attack., baseline., lm., defense., annotate., bench.).
struct PipelineConfig {
  corpus::SyntheticSpec corpus;

  std::vector<double> split_ratios{0.8, 0.1, 0.1};
  std::uint64_t split_seed = 1;
  int num_classes = 2;
  int max_len = 20;  // encoding cap and target input length m
  int vocab_max = 10000;
  int vocab_min_freq = 1;

  int oracle_texts = 20000;
  std::uint64_t oracle_corpus_seed = 99;
  eval::OracleSettings oracle;

  target::TargetConfig target;
  target::TargetTrainSettings target_train;

  gen::GeneratorConfig generator;
  std::vector<int> disc_hidden{256, 64};
  train::TrainingConfig training;

  std::uint64_t attack_seed = 1;
  int attack_batch = 256;
  attack::BaselineConfig baseline;

  eval::LmConfig lm;
  eval::LmTrainSettings lm_train;

  eval::DefenseConfig defense;

  std::size_t annotate_n = 100;
  std::uint64_t annotate_seed = 1;

  int bench_count = 1000;

  // Throws std::invalid_argument listing keys no stage reads.
  static PipelineConfig from(const KeyValueConfig& kv);
  KeyValueConfig snapshot() const;
};

// Artifact layout under --out.
struct RunDir {
  std::filesystem::path root;

  std::filesystem::path data(const std::string& name) const { return root / "data" / name; }
  std::filesystem::path model(const std::string& name) const { return root / "models" / name; }
  std::filesystem::path log(const std::string& name) const { return root / "logs" / name; }
  std::filesystem::path attacks(const std::string& name) const { return root / "attacks" / name; }
  std::filesystem::path eval(const std::string& name) const { return root / "eval" / name; }
  std::filesystem::path manifest(const std::string& name) const { return root / "manifests" / name; }
};

// "name" or "name-tag" plus extension.
std::string tagged(const std::string& name, const std::string& tag, const std::string& ext);

// FNV-1a over the file bytes, 16 hex digits.
std::string file_hash(const std::filesystem::path& path);

// Writes text through a temporary file and rename.
void write_atomic(const std::filesystem::path& path, const std::string& text);

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  KeyValueConfig config;
  std::vector<std::pair<std::string, std::uint64_t>> seeds;
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;
  std::vector<std::filesystem::path> checkpoints;
  double wall_clock_seconds = 0.0;

  // JSON plus a <stem>.cfg config snapshot, both atomically.
  void write(const std::filesystem::path& json_path) const;
};

// Loaded, encoded and class-indexed splits plus their vocabulary.
struct Data {
  corpus::Vocabulary vocab;
  corpus::DatasetSplits splits;
};

Data load_data(const RunDir& run, const PipelineConfig& config);

}  // namespace advgen::cli
