#include "pipeline.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "advgen/rng.hpp"
#include "json.hpp"

namespace advgen::cli {

namespace {

std::string num(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_floating_point_v<T>) {
      out += num(xs[i]);
    } else {
      out += std::to_string(xs[i]);
    }
  }
  return out;
}

int as_int(long long v) { return static_cast<int>(v); }

}  // namespace

PipelineConfig PipelineConfig::from(const KeyValueConfig& kv) {
  PipelineConfig c;
  auto& s = c.corpus;
  s.vocab_size = as_int(kv.get_int("corpus.vocab_size", s.vocab_size));
  s.num_texts = as_int(kv.get_int("corpus.num_texts", s.num_texts));
  s.max_len = as_int(kv.get_int("corpus.max_len", s.max_len));
  s.seed = kv.get_u64("corpus.seed", s.seed);
  s.mixed_rate = kv.get_double("corpus.mixed_rate", s.mixed_rate);
  s.zipf_exponent = kv.get_double("corpus.zipf_exponent", s.zipf_exponent);

  c.split_ratios = kv.get_double_list("data.ratios", c.split_ratios);
  c.split_seed = kv.get_u64("data.seed", c.split_seed);
  c.num_classes = as_int(kv.get_int("data.num_classes", c.num_classes));
  c.max_len = as_int(kv.get_int("data.max_len", c.max_len));
  c.vocab_max = as_int(kv.get_int("data.vocab_max", c.vocab_max));
  c.vocab_min_freq = as_int(kv.get_int("data.vocab_min_freq", c.vocab_min_freq));

  c.oracle_texts = as_int(kv.get_int("oracle.num_texts", c.oracle_texts));
  c.oracle_corpus_seed = kv.get_u64("oracle.corpus_seed", c.oracle_corpus_seed);
  c.oracle.epochs = as_int(kv.get_int("oracle.epochs", c.oracle.epochs));
  c.oracle.batch_size = as_int(kv.get_int("oracle.batch_size", c.oracle.batch_size));
  c.oracle.lr = kv.get_double("oracle.lr", c.oracle.lr);
  c.oracle.seed = kv.get_u64("oracle.seed", c.oracle.seed);

  auto& t = c.target;
  t.emb_dim = as_int(kv.get_int("target.emb_dim", t.emb_dim));
  t.filter_widths = kv.get_int_list("target.filter_widths", t.filter_widths);
  t.num_filters = as_int(kv.get_int("target.num_filters", t.num_filters));
  auto& tt = c.target_train;
  tt.epochs = as_int(kv.get_int("target.epochs", tt.epochs));
  tt.batch_size = as_int(kv.get_int("target.batch_size", tt.batch_size));
  tt.lr = kv.get_double("target.lr", tt.lr);
  tt.clip_norm = kv.get_double("target.clip_norm", tt.clip_norm);
  tt.seed = kv.get_u64("target.seed", tt.seed);

  auto& g = c.generator;
  g.emb_dim = as_int(kv.get_int("generator.emb_dim", g.emb_dim));
  g.hidden = as_int(kv.get_int("generator.hidden", g.hidden));
  g.latent = as_int(kv.get_int("generator.latent", g.latent));
  g.class_dim = as_int(kv.get_int("generator.class_dim", g.class_dim));
  g.beam_width = as_int(kv.get_int("generator.beam_width", g.beam_width));
  c.disc_hidden = kv.get_int_list("disc.hidden", c.disc_hidden);
  c.training = train::TrainingConfig::from_config(kv);

  c.attack_seed = kv.get_u64("attack.seed", c.attack_seed);
  c.attack_batch = as_int(kv.get_int("attack.batch_size", c.attack_batch));
  auto& b = c.baseline;
  b.epsilon = kv.get_double("baseline.epsilon", b.epsilon);
  b.scale_epsilon = kv.get_bool("baseline.scale_epsilon", b.scale_epsilon);
  b.modify_fraction = kv.get_double("baseline.modify_fraction", b.modify_fraction);
  b.fgsm_top_fraction = kv.get_double("baseline.fgsm_top_fraction", b.fgsm_top_fraction);
  b.max_deepfool_iters = as_int(kv.get_int("baseline.max_deepfool_iters", b.max_deepfool_iters));
  b.overshoot = kv.get_double("baseline.overshoot", b.overshoot);
  b.seed = kv.get_u64("baseline.seed", b.seed);

  c.lm.emb_dim = as_int(kv.get_int("lm.emb_dim", c.lm.emb_dim));
  c.lm.hidden = as_int(kv.get_int("lm.hidden", c.lm.hidden));
  auto& l = c.lm_train;
  l.epochs = as_int(kv.get_int("lm.epochs", l.epochs));
  l.batch_size = as_int(kv.get_int("lm.batch_size", l.batch_size));
  l.lr = kv.get_double("lm.lr", l.lr);
  l.clip_norm = kv.get_double("lm.clip_norm", l.clip_norm);
  l.seed = kv.get_u64("lm.seed", l.seed);

  c.defense.holdout_fraction = kv.get_double("defense.holdout_fraction", c.defense.holdout_fraction);
  c.defense.max_augment = kv.get_int("defense.max_augment", c.defense.max_augment);
  c.defense.seed = kv.get_u64("defense.seed", c.defense.seed);

  c.annotate_n = static_cast<std::size_t>(kv.get_int("annotate.n", static_cast<long long>(c.annotate_n)));
  c.annotate_seed = kv.get_u64("annotate.seed", c.annotate_seed);

  c.bench_count = as_int(kv.get_int("bench.count", c.bench_count));

  const auto unused = kv.unused_keys();
  if (!unused.empty()) {
    std::string keys;
    for (const auto& k : unused) keys += (keys.empty() ? "" : ", ") + k;
    throw std::invalid_argument("unknown config key(s): " + keys);
  }

  c.target.num_classes = c.num_classes;
  c.target.max_len = c.max_len;
  c.generator.num_classes = c.num_classes;
  c.generator.max_len = c.max_len;
  c.lm_train.max_len = static_cast<std::size_t>(c.max_len);
  return c;
}

KeyValueConfig PipelineConfig::snapshot() const {
  KeyValueConfig kv;
  kv.set("corpus.vocab_size", std::to_string(corpus.vocab_size));
  kv.set("corpus.num_texts", std::to_string(corpus.num_texts));
  kv.set("corpus.max_len", std::to_string(corpus.max_len));
  kv.set("corpus.seed", std::to_string(corpus.seed));
  kv.set("corpus.mixed_rate", num(corpus.mixed_rate));
  kv.set("corpus.zipf_exponent", num(corpus.zipf_exponent));

  kv.set("data.ratios", join(split_ratios));
  kv.set("data.seed", std::to_string(split_seed));
  kv.set("data.num_classes", std::to_string(num_classes));
  kv.set("data.max_len", std::to_string(max_len));
  kv.set("data.vocab_max", std::to_string(vocab_max));
  kv.set("data.vocab_min_freq", std::to_string(vocab_min_freq));

  kv.set("oracle.num_texts", std::to_string(oracle_texts));
  kv.set("oracle.corpus_seed", std::to_string(oracle_corpus_seed));
  kv.set("oracle.epochs", std::to_string(oracle.epochs));
  kv.set("oracle.batch_size", std::to_string(oracle.batch_size));
  kv.set("oracle.lr", num(oracle.lr));
  kv.set("oracle.seed", std::to_string(oracle.seed));

  kv.set("target.emb_dim", std::to_string(target.emb_dim));
  kv.set("target.filter_widths", join(target.filter_widths));
  kv.set("target.num_filters", std::to_string(target.num_filters));
  kv.set("target.epochs", std::to_string(target_train.epochs));
  kv.set("target.batch_size", std::to_string(target_train.batch_size));
  kv.set("target.lr", num(target_train.lr));
  kv.set("target.clip_norm", num(target_train.clip_norm));
  kv.set("target.seed", std::to_string(target_train.seed));

  kv.set("generator.emb_dim", std::to_string(generator.emb_dim));
  kv.set("generator.hidden", std::to_string(generator.hidden));
  kv.set("generator.latent", std::to_string(generator.latent));
  kv.set("generator.class_dim", std::to_string(generator.class_dim));
  kv.set("generator.beam_width", std::to_string(generator.beam_width));
  kv.set("disc.hidden", join(disc_hidden));
  training.write_to(kv);

  kv.set("attack.seed", std::to_string(attack_seed));
  kv.set("attack.batch_size", std::to_string(attack_batch));
  kv.set("baseline.epsilon", num(baseline.epsilon));
  kv.set("baseline.scale_epsilon", baseline.scale_epsilon ? "true" : "false");
  kv.set("baseline.modify_fraction", num(baseline.modify_fraction));
  kv.set("baseline.fgsm_top_fraction", num(baseline.fgsm_top_fraction));
  kv.set("baseline.max_deepfool_iters", std::to_string(baseline.max_deepfool_iters));
  kv.set("baseline.overshoot", num(baseline.overshoot));
  kv.set("baseline.seed", std::to_string(baseline.seed));

  kv.set("lm.emb_dim", std::to_string(lm.emb_dim));
  kv.set("lm.hidden", std::to_string(lm.hidden));
  kv.set("lm.epochs", std::to_string(lm_train.epochs));
  kv.set("lm.batch_size", std::to_string(lm_train.batch_size));
  kv.set("lm.lr", num(lm_train.lr));
  kv.set("lm.clip_norm", num(lm_train.clip_norm));
  kv.set("lm.seed", std::to_string(lm_train.seed));

  kv.set("defense.holdout_fraction", num(defense.holdout_fraction));
  kv.set("defense.max_augment", std::to_string(defense.max_augment));
  kv.set("defense.seed", std::to_string(defense.seed));

  kv.set("annotate.n", std::to_string(annotate_n));
  kv.set("annotate.seed", std::to_string(annotate_seed));
  kv.set("bench.count", std::to_string(bench_count));
  return kv;
}

std::string tagged(const std::string& name, const std::string& tag, const std::string& ext) {
  return (tag.empty() ? name : name + "-" + tag) + ext;
}

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::uint64_t h = fnv1a64(nullptr, 0);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h = fnv1a64(buf.data(), static_cast<std::size_t>(in.gcount()), h);
  }
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

void write_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void Manifest::write(const std::filesystem::path& json_path) const {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["argv"] = argv;
  auto cfg_path = json_path;
  cfg_path.replace_extension(".cfg");
  j["config_snapshot"] = cfg_path.filename().string();
  nlohmann::ordered_json cfg = nlohmann::ordered_json::object();
  for (const auto& [k, v] : config.values()) cfg[k] = v;
  j["config"] = cfg;
  nlohmann::ordered_json seed_obj = nlohmann::ordered_json::object();
  for (const auto& [k, v] : seeds) seed_obj[k] = v;
  j["seeds"] = seed_obj;
  auto files = [](const std::vector<std::filesystem::path>& paths) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& p : paths) {
      nlohmann::ordered_json e;
      e["path"] = p.string();
      e["hash"] = std::filesystem::exists(p) ? nlohmann::ordered_json(file_hash(p)) : nlohmann::ordered_json();
      arr.push_back(e);
    }
    return arr;
  };
  j["inputs"] = files(inputs);
  j["outputs"] = files(outputs);
  nlohmann::ordered_json ckpts = nlohmann::ordered_json::array();
  for (const auto& p : checkpoints) ckpts.push_back(p.string());
  j["checkpoints"] = ckpts;
  j["wall_clock_seconds"] = wall_clock_seconds;
  write_atomic(cfg_path, config.to_string());
  write_atomic(json_path, j.dump(2) + "\n");
}

Data load_data(const RunDir& run, const PipelineConfig& config) {
  Data d;
  const auto vocab_path = run.data("vocab.txt");
  if (!std::filesystem::exists(vocab_path)) {
    throw std::runtime_error("missing " + vocab_path.string() + " (run 'data split' first)");
  }
  d.vocab = corpus::Vocabulary::load(vocab_path);
  auto load = [&](const char* name) {
    auto texts = corpus::load_dataset(run.data(name), corpus::DatasetFormat::kJsonl, config.num_classes);
    corpus::encode_dataset(texts, d.vocab, static_cast<std::size_t>(config.max_len));
    return texts;
  };
  d.splits.train = load("train.jsonl");
  d.splits.dev = load("dev.jsonl");
  d.splits.test = load("test.jsonl");
  d.splits.index_classes(config.num_classes);
  return d;
}

}  // namespace advgen::cli
