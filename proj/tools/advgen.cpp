// advgen: data preparation, training, attacks, evaluation, defense and
// benchmarks over a run directory.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pipeline.hpp"

#include "advgen/rng.hpp"

namespace fs = std::filesystem;
using namespace advgen;
using cli::PipelineConfig;
using cli::RunDir;
using cli::tagged;

namespace {

constexpr std::uint64_t kDiscInitStream = 14;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  std::vector<std::string> sets;
  std::string tag;
};

struct Context {
  PipelineConfig cfg;
  RunDir run;
  cli::Manifest manifest;
  std::string tag;
};

struct Command {
  std::string slug;                    // manifest name
  std::vector<std::string> seed_keys;  // the first one receives --seed
  std::function<void(Context&)> body;
};

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) throw std::runtime_error("missing " + what + ": " + path.string());
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << std::fixed << v;
  return s.str();
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) { cli::write_atomic(path, j.dump(2) + "\n"); }

corpus::Vocabulary load_vocab(const RunDir& run) {
  const auto path = run.data("vocab.txt");
  require_file(path, "vocabulary (run 'data split' first)");
  return corpus::Vocabulary::load(path);
}

target::TargetParams load_frozen_target(Context& ctx, const corpus::Vocabulary& vocab) {
  const auto path = ctx.run.model("target.ckpt");
  require_file(path, "target checkpoint");
  ctx.manifest.checkpoints.push_back(path);
  auto t = target::load_target(path, vocab.hash());
  target::freeze(t);
  return t;
}

// Explicit --checkpoint, else the joint checkpoint for the tag.
gen::GeneratorParams load_attack_generator(Context& ctx, const std::string& checkpoint,
                                           const corpus::Vocabulary& vocab) {
  const fs::path path = checkpoint.empty() ? ctx.run.model(tagged("joint", ctx.tag, ".ckpt")) : fs::path(checkpoint);
  require_file(path, checkpoint.empty() ? "joint checkpoint" : "checkpoint");
  ctx.manifest.checkpoints.push_back(path);
  return gen::load_generator(path, vocab.hash());
}

fs::path records_path(const Context& ctx, const std::string& records) {
  const fs::path path = records.empty() ? ctx.run.attacks(tagged("generated", ctx.tag, ".jsonl")) : fs::path(records);
  require_file(path, "attack records");
  return path;
}

std::vector<corpus::TokenSequence> train_ids(const corpus::DatasetSplits& splits) {
  std::vector<corpus::TokenSequence> ids;
  ids.reserve(splits.train.size());
  for (const auto& t : splits.train) ids.push_back(t.ids);
  return ids;
}

// ---------------------------------------------------------------------------
// data

void data_synth(Context& ctx) {
  const auto& cfg = ctx.cfg;
  const auto texts = corpus::generate_synthetic_corpus(cfg.corpus);
  const auto path = ctx.run.data("corpus.jsonl");
  fs::create_directories(path.parent_path());
  corpus::save_dataset(path, texts);
  ctx.manifest.outputs.push_back(path);
  std::cout << "wrote " << texts.size() << " texts to " << path.string() << "\n";
  if (cfg.oracle_texts > 0) {
    auto spec = cfg.corpus;
    spec.seed = cfg.oracle_corpus_seed;
    spec.num_texts = cfg.oracle_texts;
    const auto oracle_path = ctx.run.data("oracle_corpus.jsonl");
    corpus::save_dataset(oracle_path, corpus::generate_synthetic_corpus(spec));
    ctx.manifest.outputs.push_back(oracle_path);
    std::cout << "wrote " << spec.num_texts << " oracle texts to " << oracle_path.string() << "\n";
  }
}

void data_split(Context& ctx, const std::string& input, const std::string& format) {
  const auto& cfg = ctx.cfg;
  const fs::path in = input.empty() ? ctx.run.data("corpus.jsonl") : fs::path(input);
  require_file(in, "dataset");
  ctx.manifest.inputs.push_back(in);
  auto texts = corpus::load_dataset(in, corpus::parse_format(format), cfg.num_classes);
  std::unordered_set<std::string> seen;
  for (const auto& t : texts) seen.insert(t.raw);
  auto splits = corpus::split_dataset(std::move(texts), cfg.split_ratios, cfg.split_seed, cfg.num_classes);
  const auto vocab = corpus::build_vocabulary(splits.train, cfg.vocab_max, cfg.vocab_min_freq);

  const auto vocab_path = ctx.run.data("vocab.txt");
  fs::create_directories(vocab_path.parent_path());
  vocab.save(vocab_path);
  corpus::save_dataset(ctx.run.data("train.jsonl"), splits.train);
  corpus::save_dataset(ctx.run.data("dev.jsonl"), splits.dev);
  corpus::save_dataset(ctx.run.data("test.jsonl"), splits.test);
  for (const char* name : {"vocab.txt", "train.jsonl", "dev.jsonl", "test.jsonl"}) {
    ctx.manifest.outputs.push_back(ctx.run.data(name));
  }
  std::cout << "split " << splits.train.size() << "/" << splits.dev.size() << "/" << splits.test.size()
            << " texts, vocabulary " << vocab.size() << "\n";

  // The oracle partition excludes every text the target could have seen.
  const auto oracle_in = ctx.run.data("oracle_corpus.jsonl");
  if (!fs::exists(oracle_in)) return;
  ctx.manifest.inputs.push_back(oracle_in);
  auto oracle_texts = corpus::load_dataset(oracle_in, corpus::DatasetFormat::kJsonl, cfg.num_classes);
  std::vector<corpus::LabeledText> kept;
  for (auto& t : oracle_texts) {
    if (!seen.count(t.raw)) kept.push_back(std::move(t));
  }
  const std::size_t dropped = oracle_texts.size() - kept.size();
  auto oracle = corpus::split_dataset(std::move(kept), {0.9, 0.05, 0.05}, derive_seed(cfg.split_seed, 1),
                                      cfg.num_classes);
  oracle.dev.insert(oracle.dev.end(), oracle.test.begin(), oracle.test.end());
  corpus::save_dataset(ctx.run.data("oracle_train.jsonl"), oracle.train);
  corpus::save_dataset(ctx.run.data("oracle_dev.jsonl"), oracle.dev);
  ctx.manifest.outputs.push_back(ctx.run.data("oracle_train.jsonl"));
  ctx.manifest.outputs.push_back(ctx.run.data("oracle_dev.jsonl"));
  std::cout << "oracle partition " << oracle.train.size() << "/" << oracle.dev.size() << " texts (" << dropped
            << " overlapping texts dropped)\n";
}

// ---------------------------------------------------------------------------
// train

void train_target_cmd(Context& ctx) {
  const auto data = cli::load_data(ctx.run, ctx.cfg);
  auto config = ctx.cfg.target;
  config.vocab_size = data.vocab.size();
  target::TargetTrainReport report;
  auto params = target::train_target(data.splits, config, ctx.cfg.target_train, &report);
  target::freeze(params);
  const auto path = ctx.run.model("target.ckpt");
  fs::create_directories(path.parent_path());
  target::save_target(path, params, data.vocab.hash());
  const double test_acc = target::accuracy(data.splits.test, params);

  nlohmann::ordered_json j;
  j["epoch_loss"] = report.epoch_loss;
  j["dev_accuracy"] = report.dev_accuracy;
  j["final_dev_accuracy"] = report.final_dev_accuracy;
  j["test_accuracy"] = test_acc;
  j["steps"] = report.steps;
  const auto log_path = ctx.run.log("target.json");
  write_json(log_path, j);
  ctx.manifest.outputs = {path, log_path};
  std::cout << "target dev accuracy " << fmt(report.final_dev_accuracy) << ", test accuracy " << fmt(test_acc)
            << "\n";
}

void train_vae_cmd(Context& ctx) {
  const auto data = cli::load_data(ctx.run, ctx.cfg);
  auto config = ctx.cfg.generator;
  config.vocab_size = data.vocab.size();
  const auto res = train::pretrain_vae(data.splits, config, ctx.cfg.training);
  const auto path = ctx.run.model("vae.ckpt");
  fs::create_directories(path.parent_path());
  gen::save_generator(path, res.generator, data.vocab.hash());
  const auto log_path = ctx.run.log("pretrain.csv");
  fs::create_directories(log_path.parent_path());
  res.log.write_csv(log_path);
  ctx.manifest.outputs = {path, log_path};
  std::cout << "dev reconstruction " << fmt(res.initial_dev_recon) << " -> " << fmt(res.final_dev_recon) << "\n";
}

void train_joint_cmd(Context& ctx) {
  const auto data = cli::load_data(ctx.run, ctx.cfg);
  const auto vae_path = ctx.run.model("vae.ckpt");
  require_file(vae_path, "pretrained VAE checkpoint");
  ctx.manifest.checkpoints.push_back(vae_path);
  const auto pretrained = gen::load_generator(vae_path, data.vocab.hash());
  const auto target = load_frozen_target(ctx, data.vocab);

  auto dc = train::disc_config_for(pretrained.config, target.config);
  dc.hidden = ctx.cfg.disc_hidden;
  const auto discs = disc::init_discriminators(dc, derive_seed(ctx.cfg.training.seed, kDiscInitStream));

  const auto hash = data.vocab.hash();
  train::CheckpointHook hook;
  if (ctx.cfg.training.checkpoint_every > 0) {
    hook = [&](long step, const gen::GeneratorParams& g, const disc::DiscriminatorParams& d) {
      const auto p = ctx.run.model(tagged("joint", ctx.tag, "-step" + std::to_string(step) + ".ckpt"));
      train::save_joint(p, g, d, hash);
      ctx.manifest.outputs.push_back(p);
    };
  }
  const auto res = train::train_joint(pretrained, target, discs, data.splits, ctx.cfg.training, hook);
  const auto path = ctx.run.model(tagged("joint", ctx.tag, ".ckpt"));
  train::save_joint(path, res.generator, res.discriminators, hash);
  const auto log_path = ctx.run.log(tagged("joint", ctx.tag, ".csv"));
  fs::create_directories(log_path.parent_path());
  res.log.write_csv(log_path);
  ctx.manifest.outputs.push_back(path);
  ctx.manifest.outputs.push_back(log_path);
  const auto& last = res.log.records.back();
  std::cout << "joint training " << res.log.records.size() << " steps" << (res.early_stopped ? " (early stop)" : "")
            << ", final L_adv " << fmt(last.l_adv) << ", L_vae " << fmt(last.l_vae) << "\n";
}

// ---------------------------------------------------------------------------
// attack

attack::AttackContext attack_context(const Context& ctx, const corpus::Vocabulary& vocab,
                                     const target::TargetParams& target) {
  attack::AttackContext a;
  a.vocab = &vocab;
  a.target = &target;
  a.target_class_map = ctx.cfg.training.target_class_map;
  return a;
}

void write_attack_output(Context& ctx, const fs::path& path, const std::vector<attack::AttackRecord>& records) {
  fs::create_directories(path.parent_path());
  attack::write_records(path, records);
  ctx.manifest.outputs.push_back(path);
  std::cout << "wrote " << records.size() << " records to " << path.string() << ", success rate "
            << fmt(attack::success_rate(records)) << "\n";
}

void attack_pairwise_cmd(Context& ctx, const std::string& checkpoint) {
  const auto data = cli::load_data(ctx.run, ctx.cfg);
  const auto generator = load_attack_generator(ctx, checkpoint, data.vocab);
  const auto target = load_frozen_target(ctx, data.vocab);
  const auto records =
      attack::attack_pairwise(data.splits.test, generator, attack_context(ctx, data.vocab, target), ctx.cfg.attack_seed);
  write_attack_output(ctx, ctx.run.attacks(tagged("pairwise", ctx.tag, ".jsonl")), records);
}

void attack_generate_cmd(Context& ctx, const std::string& checkpoint, int n, int condition) {
  if (n <= 0) throw std::invalid_argument("--n must be positive");
  const int classes = ctx.cfg.num_classes;
  if (condition < -1 || condition >= classes) throw std::invalid_argument("--class out of range");
  const auto vocab = load_vocab(ctx.run);
  const auto generator = load_attack_generator(ctx, checkpoint, vocab);
  const auto target = load_frozen_target(ctx, vocab);
  const auto actx = attack_context(ctx, vocab, target);
  std::vector<attack::AttackRecord> records;
  for (int k = 0; k < classes; ++k) {
    if (condition >= 0 && k != condition) continue;
    const int count = condition >= 0 ? n : n / classes + (k < n % classes ? 1 : 0);
    if (count == 0) continue;
    auto part = attack::generate_unrestricted(count, k, generator, actx,
                                              derive_seed(ctx.cfg.attack_seed, static_cast<std::uint64_t>(k)),
                                              ctx.cfg.attack_batch);
    records.insert(records.end(), part.begin(), part.end());
  }
  write_attack_output(ctx, ctx.run.attacks(tagged("generated", ctx.tag, ".jsonl")), records);
}

void attack_baseline_cmd(Context& ctx, const std::string& name) {
  const auto data = cli::load_data(ctx.run, ctx.cfg);
  const auto target = load_frozen_target(ctx, data.vocab);
  const auto records =
      attack::run_baseline(name, data.splits.test, ctx.cfg.baseline, attack_context(ctx, data.vocab, target));
  write_attack_output(ctx, ctx.run.attacks(tagged("baseline-" + name, ctx.tag, ".jsonl")), records);
}

// ---------------------------------------------------------------------------
// eval

// The reference language model and the oracle are trained on first use and
// reused afterwards.
eval::LanguageModelParams reference_lm(Context& ctx, const cli::Data& data) {
  const auto path = ctx.run.model("lm.ckpt");
  if (fs::exists(path)) {
    ctx.manifest.checkpoints.push_back(path);
    return eval::load_language_model(path, data.vocab.hash());
  }
  auto config = ctx.cfg.lm;
  config.vocab_size = data.vocab.size();
  const auto ids = train_ids(data.splits);
  auto lm = eval::train_language_model(ids, config, ctx.cfg.lm_train);
  fs::create_directories(path.parent_path());
  eval::save_language_model(path, lm, data.vocab.hash());
  ctx.manifest.outputs.push_back(path);
  return lm;
}

std::optional<eval::ValidityOracle> validity_oracle(Context& ctx, const cli::Data& data) {
  const auto path = ctx.run.model("oracle.ckpt");
  if (fs::exists(path)) {
    ctx.manifest.checkpoints.push_back(path);
    return eval::load_oracle(path, data.vocab.hash());
  }
  const auto train_path = ctx.run.data("oracle_train.jsonl");
  const auto dev_path = ctx.run.data("oracle_dev.jsonl");
  if (!fs::exists(train_path) || !fs::exists(dev_path)) return std::nullopt;
  auto load = [&](const fs::path& p) {
    auto texts = corpus::load_dataset(p, corpus::DatasetFormat::kJsonl, ctx.cfg.num_classes);
    corpus::encode_dataset(texts, data.vocab, static_cast<std::size_t>(ctx.cfg.max_len));
    ctx.manifest.inputs.push_back(p);
    return texts;
  };
  const auto train = load(train_path);
  const auto dev = load(dev_path);
  auto oracle = eval::train_validity_oracle(train, dev, data.vocab.size(), ctx.cfg.num_classes, ctx.cfg.oracle);
  fs::create_directories(path.parent_path());
  eval::save_oracle(path, oracle, data.vocab.hash());
  ctx.manifest.outputs.push_back(path);
  return oracle;
}

void eval_metrics_cmd(Context& ctx, const std::string& records_arg) {
  const auto data = cli::load_data(ctx.run, ctx.cfg);
  const auto in = records_path(ctx, records_arg);
  ctx.manifest.inputs.push_back(in);
  const auto records = attack::read_records(in);
  const auto lm = reference_lm(ctx, data);
  const auto oracle = validity_oracle(ctx, data);
  const auto ids = train_ids(data.splits);
  const auto report = eval::compute_metrics(records, lm, ids, oracle ? &*oracle : nullptr);
  const auto json_path = ctx.run.eval(tagged("metrics", ctx.tag, ".json"));
  const auto table_path = ctx.run.eval(tagged("metrics", ctx.tag, ".txt"));
  cli::write_atomic(json_path, report.to_json() + "\n");
  cli::write_atomic(table_path, report.to_table());
  ctx.manifest.outputs.push_back(json_path);
  ctx.manifest.outputs.push_back(table_path);
  std::cout << report.to_table();
}

void eval_diversity_cmd(Context& ctx, const std::string& records_arg) {
  const auto data = cli::load_data(ctx.run, ctx.cfg);
  const auto in = records_path(ctx, records_arg);
  ctx.manifest.inputs.push_back(in);
  const auto records = attack::read_records(in);
  std::vector<corpus::TokenSequence> generated;
  generated.reserve(records.size());
  for (const auto& r : records) generated.push_back(r.generated_ids);
  const auto ids = train_ids(data.splits);
  const auto d = eval::diversity_report(generated, ids);
  nlohmann::ordered_json j;
  j["train_4gram_overlap_mean"] = d.train_4gram_overlap_mean;
  j["unique_fraction"] = d.unique_fraction;
  j["num_texts"] = d.num_texts;
  j["num_eligible"] = d.num_eligible;
  j["num_short"] = d.num_short;
  const auto path = ctx.run.eval(tagged("diversity", ctx.tag, ".json"));
  write_json(path, j);
  ctx.manifest.outputs.push_back(path);
  std::cout << "train 4-gram overlap " << fmt(d.train_4gram_overlap_mean) << ", unique fraction "
            << fmt(d.unique_fraction) << " (" << d.num_eligible << " eligible, " << d.num_short << " short)\n";
}

void eval_annotate_cmd(Context& ctx, const std::string& records_arg, const std::string& labels) {
  if (!labels.empty()) {
    require_file(labels, "annotation file");
    ctx.manifest.inputs.push_back(labels);
    const auto hv = eval::human_validity(eval::read_annotation_csv(labels));
    nlohmann::ordered_json j;
    j["rate"] = hv.rate;
    j["labeled"] = hv.labeled;
    j["valid"] = hv.valid;
    const auto path = ctx.run.eval(tagged("human-validity", ctx.tag, ".json"));
    write_json(path, j);
    ctx.manifest.outputs.push_back(path);
    std::cout << "human validity " << fmt(hv.rate) << " over " << hv.labeled << " labeled rows\n";
    return;
  }
  const auto in = records_path(ctx, records_arg);
  ctx.manifest.inputs.push_back(in);
  const auto records = attack::read_records(in);
  const auto path = ctx.run.eval(tagged("annotation", ctx.tag, ".csv"));
  fs::create_directories(path.parent_path());
  const auto batch = eval::export_annotation_batch(records, path, ctx.cfg.annotate_n, ctx.cfg.annotate_seed);
  ctx.manifest.outputs.push_back(path);
  std::cout << "wrote " << batch.rows.size() << " rows to " << path.string() << "\n";
}

// ---------------------------------------------------------------------------
// defend, bench

void defend_augment_cmd(Context& ctx, const std::string& records_arg) {
  const auto data = cli::load_data(ctx.run, ctx.cfg);
  const auto in = records_path(ctx, records_arg);
  ctx.manifest.inputs.push_back(in);
  const auto records = attack::read_records(in);
  const auto target = load_frozen_target(ctx, data.vocab);
  const auto r = eval::augment_and_retrain(data.splits, records, target, ctx.cfg.target_train, ctx.cfg.defense);
  nlohmann::ordered_json j;
  j["clean_before"] = r.clean_before;
  j["adversarial_before"] = r.adversarial_before;
  j["clean_after"] = r.clean_after;
  j["adversarial_after"] = r.adversarial_after;
  j["train_adversarial"] = r.train_adversarial;
  j["test_adversarial"] = r.test_adversarial;
  j["skipped_empty"] = r.skipped_empty;
  j["test_indices"] = r.test_indices;
  const auto path = ctx.run.root / "defense" / tagged("report", ctx.tag, ".json");
  write_json(path, j);
  ctx.manifest.outputs.push_back(path);
  std::cout << "clean accuracy " << fmt(r.clean_before) << " -> " << fmt(r.clean_after)
            << ", adversarial accuracy " << fmt(r.adversarial_before) << " -> " << fmt(r.adversarial_after) << " ("
            << r.train_adversarial << " augmenting, " << r.test_adversarial << " held out)\n";
}

void bench_speed_cmd(Context& ctx, const std::string& checkpoint, const std::vector<std::string>& modes_arg,
                     int count) {
  const auto data = cli::load_data(ctx.run, ctx.cfg);
  const auto target = load_frozen_target(ctx, data.vocab);
  std::vector<eval::TimingMode> modes;
  for (const auto& m : modes_arg) modes.push_back(eval::parse_timing_mode(m));
  const bool needs_generator = std::any_of(modes.begin(), modes.end(), [](eval::TimingMode m) {
    return m == eval::TimingMode::kUnrestricted || m == eval::TimingMode::kPairwise;
  });
  std::optional<gen::GeneratorParams> generator;
  if (needs_generator) generator = load_attack_generator(ctx, checkpoint, data.vocab);

  eval::TimingInputs inputs;
  inputs.generator = generator ? &*generator : nullptr;
  inputs.context = attack_context(ctx, data.vocab, target);
  inputs.texts = data.splits.test;
  inputs.baseline = ctx.cfg.baseline;
  inputs.batch_size = ctx.cfg.attack_batch;
  inputs.seed = ctx.cfg.attack_seed;
  const int n = count > 0 ? count : ctx.cfg.bench_count;

  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto mode : modes) {
    const auto r = eval::timing_benchmark(mode, inputs, n);
    nlohmann::ordered_json e;
    e["mode"] = eval::timing_mode_name(mode);
    e["count"] = r.count;
    e["total_seconds"] = r.total_seconds;
    e["seconds_per_example"] = r.seconds_per_example;
    arr.push_back(e);
    std::cout << eval::timing_mode_name(mode) << ": " << r.seconds_per_example * 1e3 << " ms per example over "
              << r.count << "\n";
  }
  const auto path = ctx.run.root / "bench" / tagged("speed", ctx.tag, ".json");
  write_json(path, arr);
  ctx.manifest.outputs.push_back(path);
}

// ---------------------------------------------------------------------------

KeyValueConfig load_config(const Common& common) {
  KeyValueConfig kv = common.config_path.empty() ? KeyValueConfig{} : KeyValueConfig::load(common.config_path);
  for (const auto& s : common.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("--set expects key=value, got '" + s + "'");
    kv.set(s.substr(0, eq), s.substr(eq + 1));
  }
  return kv;
}

int run_command(const Command& cmd, const Common& common, const std::vector<std::string>& argv) {
  const auto start = std::chrono::steady_clock::now();
  auto kv = load_config(common);
  if (common.seed && !cmd.seed_keys.empty()) kv.set(cmd.seed_keys.front(), std::to_string(*common.seed));
  Context ctx;
  ctx.cfg = PipelineConfig::from(kv);
  ctx.run.root = common.out;
  ctx.tag = common.tag;
  ctx.manifest.command = cmd.slug;
  ctx.manifest.argv = argv;
  ctx.manifest.config = ctx.cfg.snapshot();
  for (const auto& k : cmd.seed_keys) {
    ctx.manifest.seeds.emplace_back(k, ctx.manifest.config.get_u64(k, 0));
  }
  if (!common.config_path.empty()) ctx.manifest.inputs.push_back(common.config_path);
  fs::create_directories(ctx.run.root);
  cmd.body(ctx);
  ctx.manifest.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  ctx.manifest.write(ctx.run.manifest(tagged(cmd.slug, ctx.tag, ".json")));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial text generation: data, training, attacks, evaluation, defense"};
  app.require_subcommand(1);
  Common common;
  std::optional<Command> selected;

  auto leaf = [&](CLI::App* parent, const std::string& name, const std::string& help) {
    auto* sub = parent->add_subcommand(name, help);
    sub->add_option("--config", common.config_path, "key=value configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "seed for this stage (overrides the config)");
    sub->add_option("--out", common.out, "run directory")->capture_default_str();
    sub->add_option("--set", common.sets, "config override key=value (repeatable)");
    sub->add_option("--tag", common.tag, "suffix for variant artifacts, e.g. nodisc");
    return sub;
  };
  auto select = [&](CLI::App* sub, std::string slug, std::vector<std::string> seed_keys,
                    std::function<void(Context&)> body) {
    sub->callback([&selected, slug, seed_keys, body] { selected = Command{slug, seed_keys, body}; });
  };

  auto* data = app.add_subcommand("data", "prepare datasets")->require_subcommand(1);
  auto* synth = leaf(data, "synth", "generate the synthetic corpus and the oracle corpus");
  select(synth, "data-synth", {"corpus.seed", "oracle.corpus_seed"}, data_synth);

  std::string input, format = "jsonl";
  auto* split = leaf(data, "split", "split a corpus, build the vocabulary and the oracle partition");
  split->add_option("--input", input, "dataset file (default: data/corpus.jsonl in the run directory)");
  split->add_option("--format", format, "jsonl or tsv")->capture_default_str();
  select(split, "data-split", {"data.seed"}, [&](Context& c) { data_split(c, input, format); });

  auto* trn = app.add_subcommand("train", "train models")->require_subcommand(1);
  select(leaf(trn, "target", "train and freeze the target classifier"), "train-target", {"target.seed"},
         train_target_cmd);
  select(leaf(trn, "vae", "pretrain the conditional VAE"), "train-vae", {"train_seed"}, train_vae_cmd);
  select(leaf(trn, "joint", "adversarial training with discriminators"), "train-joint", {"train_seed"},
         train_joint_cmd);

  auto* atk = app.add_subcommand("attack", "generate adversarial texts")->require_subcommand(1);
  std::string checkpoint;
  auto* pw = leaf(atk, "pairwise", "transform the test split");
  pw->add_option("--checkpoint", checkpoint, "generator checkpoint (default: models/joint[-tag].ckpt)");
  select(pw, "attack-pairwise", {"attack.seed"}, [&](Context& c) { attack_pairwise_cmd(c, checkpoint); });

  int n = 2000, condition = -1;
  auto* genr = leaf(atk, "generate", "unrestricted generation from sampled latents");
  genr->add_option("--n", n, "number of texts, split evenly over classes")->capture_default_str();
  genr->add_option("--class", condition, "condition class (default: all classes)");
  genr->add_option("--checkpoint", checkpoint, "generator checkpoint (default: models/joint[-tag].ckpt)");
  select(genr, "attack-generate", {"attack.seed"},
         [&](Context& c) { attack_generate_cmd(c, checkpoint, n, condition); });

  std::string baseline;
  auto* base = leaf(atk, "baseline", "word-replacement baseline over the test split");
  base->add_option("name", baseline, "random, fgsm or deepfool")
      ->required()
      ->check(CLI::IsMember({"random", "fgsm", "deepfool"}));
  base->callback([&] {
    selected = Command{"attack-baseline-" + baseline, {"baseline.seed"},
                       [&](Context& c) { attack_baseline_cmd(c, baseline); }};
  });

  auto* ev = app.add_subcommand("eval", "evaluate generated texts")->require_subcommand(1);
  std::string records, labels;
  auto* met = leaf(ev, "metrics", "success rate, perplexity, validity and diversity");
  met->add_option("--records", records, "attack records (default: attacks/generated[-tag].jsonl)");
  select(met, "eval-metrics", {"lm.seed", "oracle.seed"}, [&](Context& c) { eval_metrics_cmd(c, records); });
  auto* div = leaf(ev, "diversity", "4-gram overlap and uniqueness");
  div->add_option("--records", records, "attack records (default: attacks/generated[-tag].jsonl)");
  select(div, "eval-diversity", {}, [&](Context& c) { eval_diversity_cmd(c, records); });
  auto* ann = leaf(ev, "annotate", "export an annotation batch, or score a labeled one");
  ann->add_option("--records", records, "attack records (default: attacks/generated[-tag].jsonl)");
  ann->add_option("--labels", labels, "labeled annotation CSV to score");
  select(ann, "eval-annotate", {"annotate.seed"}, [&](Context& c) { eval_annotate_cmd(c, records, labels); });

  auto* def = app.add_subcommand("defend", "adversarial training")->require_subcommand(1);
  auto* aug = leaf(def, "augment", "retrain the target with generated texts and compare");
  aug->add_option("--records", records, "attack records (default: attacks/generated[-tag].jsonl)");
  select(aug, "defend-augment", {"defense.seed", "target.seed"},
         [&](Context& c) { defend_augment_cmd(c, records); });

  auto* bench = app.add_subcommand("bench", "benchmarks")->require_subcommand(1);
  std::vector<std::string> modes{"unrestricted", "pairwise", "random", "fgsm", "deepfool"};
  int count = 0;
  auto* speed = leaf(bench, "speed", "seconds per generated example");
  speed->add_option("--mode", modes, "modes to time")->capture_default_str();
  speed->add_option("--count", count, "examples per mode (default: bench.count)");
  speed->add_option("--checkpoint", checkpoint, "generator checkpoint (default: models/joint[-tag].ckpt)");
  select(speed, "bench-speed", {"attack.seed"}, [&](Context& c) { bench_speed_cmd(c, checkpoint, modes, count); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << " (see --help)\n";
    return 2;
  }
  if (!selected) {
    std::cerr << "usage error: no command given (see --help)\n";
    return 2;
  }
  try {
    return run_command(*selected, common, std::vector<std::string>(argv, argv + argc));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
