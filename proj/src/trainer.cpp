#include "advgen/trainer.hpp"

#include "advgen/checkpoint.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace advgen::train {

using corpus::TokenSequence;

namespace {

using streams::kGenInit;
using streams::kGumbel;
using streams::kLatent;
using streams::kSampler;

double mean_joint(const std::vector<StepRecord>& r, std::size_t from, std::size_t to) {
  double s = 0.0;
  for (std::size_t i = from; i < to; ++i) s += r[i].l_joint;
  return s / static_cast<double>(to - from);
}

}  // namespace

void TrainingConfig::validate(int num_classes) const {
  if (!(phi >= 0.0)) throw std::invalid_argument("phi must be non-negative");
  if (kl_ramp_start < 0 || kl_ramp_start > kl_ramp_end) {
    throw std::invalid_argument("kl ramp requires 0 <= ramp_start <= ramp_end");
  }
  if (!(keep_rate >= 0.0 && keep_rate <= 1.0)) throw std::invalid_argument("keep_rate must lie in [0, 1]");
  if (!(t_start > 0.0 && t_end > 0.0 && t_end <= t_start)) {
    throw std::invalid_argument("temperatures must satisfy 0 < t_end <= t_start");
  }
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  if (d_steps < 1 || g_steps < 1) throw std::invalid_argument("d_steps and g_steps must be positive");
  if (pretrain_steps < 0 || joint_steps < 0) throw std::invalid_argument("step budgets must be non-negative");
  if (!target_class_map.empty() && static_cast<int>(target_class_map.size()) != num_classes) {
    throw std::invalid_argument("target_class_map needs one entry per class");
  }
  for (int k = 0; k < num_classes; ++k) {
    const int yt = target_class(k, num_classes);
    if (yt == k || yt < 0 || yt >= num_classes) {
      throw std::invalid_argument("target_class_map must send class " + std::to_string(k) +
                                  " to a different valid class");
    }
  }
}

int TrainingConfig::target_class(int k, int num_classes) const {
  if (target_class_map.empty()) return (k + 1) % num_classes;
  return target_class_map.at(static_cast<std::size_t>(k));
}

TrainingConfig TrainingConfig::from_config(const KeyValueConfig& kv) {
  TrainingConfig c;
  c.phi = kv.get_double("phi", c.phi);
  c.kl_ramp_start = kv.get_int("kl_ramp_start", c.kl_ramp_start);
  c.kl_ramp_end = kv.get_int("kl_ramp_end", c.kl_ramp_end);
  c.keep_rate = kv.get_double("keep_rate", c.keep_rate);
  c.t_start = kv.get_double("t_start", c.t_start);
  c.t_end = kv.get_double("t_end", c.t_end);
  c.t_decay_steps = kv.get_int("t_decay_steps", c.t_decay_steps);
  c.batch_size = static_cast<int>(kv.get_int("batch_size", c.batch_size));
  c.lr_generator = kv.get_double("lr_generator", c.lr_generator);
  c.lr_disc = kv.get_double("lr_disc", c.lr_disc);
  c.clip_norm = kv.get_double("clip_norm", c.clip_norm);
  c.pretrain_steps = kv.get_int("pretrain_steps", c.pretrain_steps);
  c.joint_steps = kv.get_int("joint_steps", c.joint_steps);
  c.target_class_map = kv.get_int_list("target_class_map", c.target_class_map);
  c.disable_disc = kv.get_bool("disable_disc", c.disable_disc);
  c.nonsaturating = kv.get_bool("nonsaturating", c.nonsaturating);
  c.straight_through_disc = kv.get_bool("straight_through_disc", c.straight_through_disc);
  c.disc_embedding_grad = kv.get_bool("disc_embedding_grad", c.disc_embedding_grad);
  c.d_steps = static_cast<int>(kv.get_int("d_steps", c.d_steps));
  c.g_steps = static_cast<int>(kv.get_int("g_steps", c.g_steps));
  c.early_stop_window = kv.get_int("early_stop_window", c.early_stop_window);
  c.early_stop_tol = kv.get_double("early_stop_tol", c.early_stop_tol);
  c.checkpoint_every = kv.get_int("checkpoint_every", c.checkpoint_every);
  c.seed = kv.get_u64("train_seed", c.seed);
  return c;
}

void TrainingConfig::write_to(KeyValueConfig& kv) const {
  auto num = [](double v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
  };
  kv.set("phi", num(phi));
  kv.set("kl_ramp_start", std::to_string(kl_ramp_start));
  kv.set("kl_ramp_end", std::to_string(kl_ramp_end));
  kv.set("keep_rate", num(keep_rate));
  kv.set("t_start", num(t_start));
  kv.set("t_end", num(t_end));
  kv.set("t_decay_steps", std::to_string(t_decay_steps));
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("lr_generator", num(lr_generator));
  kv.set("lr_disc", num(lr_disc));
  kv.set("clip_norm", num(clip_norm));
  kv.set("pretrain_steps", std::to_string(pretrain_steps));
  kv.set("joint_steps", std::to_string(joint_steps));
  std::string map;
  for (std::size_t i = 0; i < target_class_map.size(); ++i) {
    map += (i ? "," : "") + std::to_string(target_class_map[i]);
  }
  kv.set("target_class_map", map);
  kv.set("disable_disc", disable_disc ? "true" : "false");
  kv.set("nonsaturating", nonsaturating ? "true" : "false");
  kv.set("straight_through_disc", straight_through_disc ? "true" : "false");
  kv.set("disc_embedding_grad", disc_embedding_grad ? "true" : "false");
  kv.set("d_steps", std::to_string(d_steps));
  kv.set("g_steps", std::to_string(g_steps));
  kv.set("early_stop_window", std::to_string(early_stop_window));
  kv.set("early_stop_tol", num(early_stop_tol));
  kv.set("checkpoint_every", std::to_string(checkpoint_every));
  kv.set("train_seed", std::to_string(seed));
}

double kl_weight(long step, const TrainingConfig& config) {
  if (step < config.kl_ramp_start) return 0.0;
  if (step >= config.kl_ramp_end) return 1.0;
  return static_cast<double>(step - config.kl_ramp_start) /
         static_cast<double>(config.kl_ramp_end - config.kl_ramp_start);
}

double temperature(long step, const TrainingConfig& config) {
  if (config.t_decay_steps <= 0 || step >= config.t_decay_steps) return config.t_end;
  const double frac = static_cast<double>(step) / static_cast<double>(config.t_decay_steps);
  return config.t_start * std::pow(config.t_end / config.t_start, frac);
}

double kl_divergence(std::span<const double> mu, std::span<const double> sigma) {
  if (mu.size() != sigma.size()) throw std::invalid_argument("kl_divergence: shape mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double s2 = sigma[i] * sigma[i];
    kl += mu[i] * mu[i] + s2 - 1.0 - std::log(s2);
  }
  return 0.5 * kl;
}

VaeLoss vae_loss(ad::Tape& t, std::span<const ad::Var> logits, const gen::TeacherBatch& teacher, ad::Var mu,
                 ad::Var log_sigma, double alpha) {
  if (logits.size() != teacher.targets.size()) {
    throw std::invalid_argument("vae_loss: " + std::to_string(logits.size()) + " logit steps for " +
                                std::to_string(teacher.targets.size()) + " target steps");
  }
  if (!t.value(mu).same_shape(t.value(log_sigma))) {
    throw std::invalid_argument("vae_loss: mu/log_sigma shape mismatch");
  }
  // sizes copied up front: tape references do not survive later pushes
  const std::size_t b = t.value(mu).rows();
  const double count = static_cast<double>(t.value(mu).size());
  const double inv_b = 1.0 / static_cast<double>(b);
  const std::vector<double> weights(b, inv_b);
  std::vector<ad::Var> terms;
  for (std::size_t s = 0; s < logits.size(); ++s) {
    if (t.value(logits[s]).rows() != b || teacher.targets[s].size() != b) {
      throw std::invalid_argument("vae_loss: batch size mismatch at step " + std::to_string(s));
    }
    terms.push_back(ad::cross_entropy(t, logits[s], teacher.targets[s], weights));
  }
  const ad::Var recon = ad::add_scalars(t, terms, std::vector<double>(terms.size(), 1.0));
  // 0.5 * sum(mu^2 + exp(2 log_sigma) - 1 - 2 log_sigma) / B
  const ad::Var inner = ad::sub(t, ad::add(t, ad::mul(t, mu, mu), ad::exp(t, ad::scale(t, log_sigma, 2.0))),
                                ad::scale(t, log_sigma, 2.0));
  const ad::Var kl_sum = ad::sum(t, inner);
  const ad::Var kl = ad::add_scalars(t, std::vector<ad::Var>{kl_sum, t.constant(Matrix(1, 1, count))},
                                     std::vector<double>{0.5 * inv_b, -0.5 * inv_b});
  const ad::Var total = ad::add_scalars(t, std::vector<ad::Var>{recon, kl}, std::vector<double>{1.0, alpha});
  return {total, recon, kl};
}

ad::Var adv_loss(ad::Tape& t, ad::Var target_logits, std::span<const int> target_classes) {
  const std::size_t b = t.value(target_logits).rows();
  if (target_classes.size() != b) throw std::invalid_argument("adv_loss: one target class per row required");
  const std::vector<double> weights(b, 1.0 / static_cast<double>(b));
  return ad::cross_entropy(t, target_logits, target_classes, weights);
}

double adv_loss(std::span<const double> probs, int target_class) {
  return -std::log(probs[static_cast<std::size_t>(target_class)]);
}

double joint_loss(double l_vae, double l_adv, std::span<const double> disc_losses, double phi) {
  double total = l_vae + phi * l_adv;
  for (double d : disc_losses) total += d;
  return total;
}

// ---------------------------------------------------------------------------

void TrainLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write training log: " + path.string());
  out << "phase,step,l_vae,recon,kl,alpha,l_adv";
  for (int k = 0; k < num_classes; ++k) out << ",l_disc_" << k;
  out << ",l_joint,temperature\n";
  out.precision(17);
  for (const auto& r : records) {
    out << r.phase << ',' << r.step << ',' << r.l_vae << ',' << r.recon << ',' << r.kl << ',' << r.alpha << ','
        << r.l_adv;
    for (int k = 0; k < num_classes; ++k) {
      out << ',' << (static_cast<std::size_t>(k) < r.l_disc.size() ? r.l_disc[static_cast<std::size_t>(k)] : 0.0);
    }
    out << ',' << r.l_joint << ',' << r.temperature << '\n';
  }
}

TrainLog TrainLog::read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read training log: " + path.string());
  std::string line;
  std::getline(in, line);
  TrainLog log;
  log.num_classes = static_cast<int>(std::count(line.begin(), line.end(), ',')) - 8;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    StepRecord r;
    std::size_t i = 0;
    r.phase = cells.at(i++);
    r.step = std::stol(cells.at(i++));
    r.l_vae = std::stod(cells.at(i++));
    r.recon = std::stod(cells.at(i++));
    r.kl = std::stod(cells.at(i++));
    r.alpha = std::stod(cells.at(i++));
    r.l_adv = std::stod(cells.at(i++));
    for (int k = 0; k < log.num_classes; ++k) r.l_disc.push_back(std::stod(cells.at(i++)));
    r.l_joint = std::stod(cells.at(i++));
    r.temperature = std::stod(cells.at(i++));
    log.records.push_back(std::move(r));
  }
  return log;
}

JointBatchSampler::JointBatchSampler(const corpus::DatasetSplits& splits, int batch_size, std::uint64_t seed)
    : splits_(&splits), batch_size_(batch_size), rng_(seed) {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  for (std::size_t k = 0; k < splits.by_class.size(); ++k) {
    if (splits.by_class[k].empty()) {
      throw std::invalid_argument("class " + std::to_string(k) + " has no training texts");
    }
  }
}

void JointBatchSampler::next(std::vector<TokenSequence>& texts, std::vector<int>& classes) {
  texts.clear();
  classes.clear();
  for (std::size_t k = 0; k < splits_->by_class.size(); ++k) {
    const auto& pool = splits_->by_class[k];
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (int i = 0; i < batch_size_; ++i) {
      texts.push_back(splits_->train[pool[pick(rng_)]].ids);
      classes.push_back(static_cast<int>(k));
    }
  }
}

// ---------------------------------------------------------------------------

double dev_reconstruction(const gen::GeneratorParams& g, std::span<const corpus::LabeledText> texts) {
  if (texts.empty()) throw std::invalid_argument("dev_reconstruction needs texts");
  constexpr std::size_t kChunk = 256;
  double total = 0.0;
  Rng unused(0);
  for (std::size_t start = 0; start < texts.size(); start += kChunk) {
    const std::size_t n = std::min(kChunk, texts.size() - start);
    std::vector<TokenSequence> batch;
    std::vector<int> classes;
    for (std::size_t i = 0; i < n; ++i) {
      batch.push_back(texts[start + i].ids);
      classes.push_back(texts[start + i].label);
    }
    ad::Tape t;
    const gen::GeneratorVars vars = gen::view(t, g);
    const gen::EncoderVars enc = gen::encode(t, vars, g.config, batch);
    const ad::Var state = gen::init_decoder_state(t, vars, g.config, enc.mu, classes);
    const gen::TeacherBatch teacher =
        gen::make_teacher_batch(batch, static_cast<std::size_t>(g.config.max_len), 1.0, unused);
    const auto logits = gen::decode_teacher_forced(t, vars, state, teacher);
    const VaeLoss l = vae_loss(t, logits, teacher, enc.mu, enc.log_sigma, 0.0);
    total += ad::scalar(t, l.recon) * static_cast<double>(n);
  }
  return total / static_cast<double>(texts.size());
}

namespace {

struct GeneratorForward {
  gen::EncoderVars enc;
  std::vector<ad::Var> logits;
  VaeLoss vae;
};

GeneratorForward generator_forward(ad::Tape& t, const gen::GeneratorVars& vars, const gen::GeneratorConfig& gc,
                                   std::span<const TokenSequence> texts, std::span<const int> classes,
                                   const Matrix& eps, const gen::TeacherBatch& teacher, double alpha) {
  GeneratorForward f;
  f.enc = gen::encode(t, vars, gc, texts);
  const ad::Var z = gen::reparameterize(t, f.enc.mu, f.enc.log_sigma, eps);
  const ad::Var state = gen::init_decoder_state(t, vars, gc, z, classes);
  f.logits = gen::decode_teacher_forced(t, vars, state, teacher);
  f.vae = vae_loss(t, f.logits, teacher, f.enc.mu, f.enc.log_sigma, alpha);
  return f;
}

void check_finite(double v, const std::string& phase, long step) {
  if (!std::isfinite(v)) {
    throw std::runtime_error(phase + " training diverged (non-finite loss) at step " + std::to_string(step));
  }
}

std::vector<ad::Var> embed_positions(ad::Tape& t, std::span<const ad::Var> soft, ad::Var table) {
  std::vector<ad::Var> out;
  out.reserve(soft.size());
  for (auto s : soft) out.push_back(gen::soft_embed(t, s, table));
  return out;
}

std::vector<ad::Var> disc_input(ad::Tape& t, std::vector<ad::Var> soft, const TrainingConfig& config) {
  if (config.straight_through_disc) {
    for (auto& s : soft) s = gen::straight_through(t, s);
  }
  return soft;
}

std::vector<ad::Var> rows_block(ad::Tape& t, std::span<const ad::Var> positions, std::size_t start,
                                std::size_t len) {
  std::vector<ad::Var> out;
  out.reserve(positions.size());
  for (auto p : positions) out.push_back(ad::slice_rows(t, p, start, len));
  return out;
}

// Per-class L_disc^k for a batch laid out as contiguous class blocks.
std::vector<ad::Var> class_disc_losses(ad::Tape& t, const disc::DiscVars& dv, const disc::DiscConfig& dc,
                                       std::span<const ad::Var> real, std::span<const ad::Var> fake,
                                       std::size_t per_class, std::vector<ad::Var>* fake_logits = nullptr) {
  std::vector<ad::Var> losses;
  for (int k = 0; k < dc.num_classes; ++k) {
    const std::size_t start = static_cast<std::size_t>(k) * per_class;
    const ad::Var rl = disc::disc_logits(t, dv, dc, k, rows_block(t, real, start, per_class));
    const ad::Var fl = disc::disc_logits(t, dv, dc, k, rows_block(t, fake, start, per_class));
    if (fake_logits) fake_logits->push_back(fl);
    losses.push_back(disc::disc_loss_k(t, rl, fl));
  }
  return losses;
}

}  // namespace

PretrainResult pretrain_vae(const corpus::DatasetSplits& splits, const gen::GeneratorConfig& gen_config,
                            const TrainingConfig& config) {
  if (splits.train.empty()) throw std::invalid_argument("VAE pretraining needs a non-empty train split");
  config.validate(gen_config.num_classes);
  PretrainResult res{gen::init_generator(gen_config, derive_seed(config.seed, kGenInit)), {}, 0.0, 0.0};
  res.log.num_classes = gen_config.num_classes;
  auto& g = res.generator;
  const std::span<const corpus::LabeledText> dev_eval =
      splits.dev.empty() ? std::span<const corpus::LabeledText>(splits.train)
                         : std::span<const corpus::LabeledText>(splits.dev);
  res.initial_dev_recon = dev_reconstruction(g, dev_eval);

  nn::Adam opt(g.store, nn::AdamConfig{config.lr_generator, 0.9, 0.999, 1e-8, config.clip_norm});
  Rng order_rng(derive_seed(config.seed, kSampler));
  Rng noise_rng(derive_seed(config.seed, kLatent));
  std::vector<std::size_t> order(splits.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  const auto bs = static_cast<std::size_t>(config.batch_size);
  const auto m = static_cast<std::size_t>(gen_config.max_len);

  for (long step = 0; step < config.pretrain_steps; ++step) {
    std::vector<TokenSequence> texts;
    std::vector<int> classes;
    while (texts.size() < std::min(bs, order.size())) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      const auto& item = splits.train[order[cursor++]];
      texts.push_back(item.ids);
      classes.push_back(item.label);
    }
    const double alpha = kl_weight(step, config);
    const Matrix eps = normal_matrix(texts.size(), static_cast<std::size_t>(gen_config.latent), noise_rng);
    const gen::TeacherBatch teacher = gen::make_teacher_batch(texts, m, config.keep_rate, noise_rng);
    ad::Tape t;
    const gen::GeneratorVars vars = gen::bind(t, g);
    const GeneratorForward f = generator_forward(t, vars, gen_config, texts, classes, eps, teacher, alpha);
    StepRecord r;
    r.phase = "pretrain";
    r.step = step;
    r.l_vae = ad::scalar(t, f.vae.total);
    r.recon = ad::scalar(t, f.vae.recon);
    r.kl = ad::scalar(t, f.vae.kl);
    r.alpha = alpha;
    r.l_joint = r.l_vae;
    check_finite(r.l_vae, "VAE", step);
    t.backward(f.vae.total);
    opt.step();
    res.log.records.push_back(std::move(r));
  }
  res.final_dev_recon = dev_reconstruction(g, dev_eval);
  return res;
}

disc::DiscConfig disc_config_for(const gen::GeneratorConfig& g, const target::TargetConfig& f) {
  disc::DiscConfig d;
  d.num_classes = g.num_classes;
  d.max_len = f.max_len;
  d.emb_dim = g.emb_dim;
  return d;
}

JointResult train_joint(const gen::GeneratorParams& pretrained, const target::TargetParams& target,
                        const disc::DiscriminatorParams& discriminators, const corpus::DatasetSplits& splits,
                        const TrainingConfig& config, const CheckpointHook& on_checkpoint) {
  if (!target.frozen()) throw std::logic_error("joint training requires a frozen target model");
  const auto& gc = pretrained.config;
  config.validate(gc.num_classes);
  if (target.config.num_classes != gc.num_classes || target.config.vocab_size != gc.vocab_size) {
    throw std::invalid_argument("generator and target disagree on vocabulary or classes");
  }
  const auto& dc = discriminators.config;
  if (dc.num_classes != gc.num_classes || dc.max_len != target.config.max_len || dc.emb_dim != gc.emb_dim) {
    throw std::invalid_argument("discriminator shape does not match generator/target");
  }
  if (static_cast<int>(splits.by_class.size()) != gc.num_classes) {
    throw std::invalid_argument("splits must be indexed by class");
  }

  JointResult res{pretrained, discriminators, {}, false};
  res.log.num_classes = gc.num_classes;
  auto& g = res.generator;
  auto& d = res.discriminators;
  nn::Adam gen_opt(g.store, nn::AdamConfig{config.lr_generator, 0.9, 0.999, 1e-8, config.clip_norm});
  nn::Adam disc_opt(d.store, nn::AdamConfig{config.lr_disc, 0.9, 0.999, 1e-8, config.clip_norm});

  JointBatchSampler sampler(splits, config.batch_size, derive_seed(config.seed, kSampler));
  Rng noise_rng(derive_seed(config.seed, kLatent));
  const std::uint64_t gumbel_seed = derive_seed(config.seed, kGumbel);
  const auto m = static_cast<std::size_t>(target.config.max_len);
  const auto v = static_cast<std::size_t>(gc.vocab_size);
  const auto per_class = static_cast<std::size_t>(config.batch_size);

  std::vector<TokenSequence> texts;
  std::vector<int> classes;
  for (long step = 0; step < config.joint_steps; ++step) {
    sampler.next(texts, classes);
    std::vector<int> yt(classes.size());
    for (std::size_t i = 0; i < classes.size(); ++i) yt[i] = config.target_class(classes[i], gc.num_classes);
    const double alpha = kl_weight(config.pretrain_steps + step, config);
    const double temp = temperature(step, config);
    const Matrix eps = normal_matrix(texts.size(), static_cast<std::size_t>(gc.latent), noise_rng);
    const gen::TeacherBatch teacher = gen::make_teacher_batch(texts, m, config.keep_rate, noise_rng);
    // D and G passes of one cycle share the same Gumbel draws.
    const Rng gumbel_state(derive_seed(gumbel_seed, static_cast<std::uint64_t>(step)));

    if (!config.disable_disc) {
      for (int ds = 0; ds < config.d_steps; ++ds) {
        ad::Tape t;
        const gen::GeneratorVars gv = gen::view(t, g);
        const disc::DiscVars dv = disc::bind(t, d);
        const GeneratorForward f = generator_forward(t, gv, gc, texts, classes, eps, teacher, alpha);
        Rng noise = gumbel_state;
        const auto soft = disc_input(t, gen::relaxed_sequence(t, f.logits, teacher.lengths, m, temp, noise), config);
        const auto fake = embed_positions(t, soft, gv.embedding);
        const auto real = embed_positions(t, gen::one_hot_sequence(t, texts, m, v), gv.embedding);
        const auto losses = class_disc_losses(t, dv, dc, real, fake, per_class);
        const ad::Var objective =
            ad::add_scalars(t, losses, std::vector<double>(losses.size(), -1.0));
        check_finite(ad::scalar(t, objective), "discriminator", step);
        t.backward(objective);
        disc_opt.step();
      }
    }

    StepRecord r;
    for (int gs = 0; gs < config.g_steps; ++gs) {
      ad::Tape t;
      const gen::GeneratorVars gv = gen::bind(t, g);
      const target::TargetVars tv = target::view(t, target);
      const GeneratorForward f = generator_forward(t, gv, gc, texts, classes, eps, teacher, alpha);
      Rng noise = gumbel_state;
      const auto soft = gen::relaxed_sequence(t, f.logits, teacher.lengths, m, temp, noise);
      const ad::Var l_adv = adv_loss(t, target::logits(t, tv, target.config, embed_positions(t, soft, tv.embedding)), yt);

      std::vector<ad::Var> terms{f.vae.total, l_adv};
      std::vector<double> weights{1.0, config.phi};
      std::vector<ad::Var> disc_losses;
      if (!config.disable_disc) {
        const disc::DiscVars dv = disc::view(t, d);
        // Without the stop-gradient G can defeat D by reshaping the table it reads.
        const ad::Var table = config.disc_embedding_grad ? gv.embedding : t.view(g.embedding_table());
        const auto fake = embed_positions(t, disc_input(t, soft, config), table);
        const auto real = embed_positions(t, gen::one_hot_sequence(t, texts, m, v), table);
        std::vector<ad::Var> fake_logits;
        disc_losses = class_disc_losses(t, dv, dc, real, fake, per_class, &fake_logits);
        for (std::size_t k = 0; k < disc_losses.size(); ++k) {
          terms.push_back(config.nonsaturating ? disc::generator_nonsaturating(t, fake_logits[k]) : disc_losses[k]);
          weights.push_back(1.0);
        }
      }
      const ad::Var objective = ad::add_scalars(t, terms, weights);

      r = StepRecord{};
      r.phase = "joint";
      r.step = step;
      r.l_vae = ad::scalar(t, f.vae.total);
      r.recon = ad::scalar(t, f.vae.recon);
      r.kl = ad::scalar(t, f.vae.kl);
      r.alpha = alpha;
      r.l_adv = ad::scalar(t, l_adv);
      for (auto dl : disc_losses) r.l_disc.push_back(ad::scalar(t, dl));
      r.l_joint = joint_loss(r.l_vae, r.l_adv, r.l_disc, config.phi);
      r.temperature = temp;
      check_finite(ad::scalar(t, objective), "joint", step);
      t.backward(objective);
      gen_opt.step();
    }
    res.log.records.push_back(std::move(r));

    if (on_checkpoint && config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0) {
      on_checkpoint(step + 1, g, d);
    }
    const auto w = static_cast<std::size_t>(config.early_stop_window);
    const auto& recs = res.log.records;
    if (w > 0 && recs.size() >= 2 * w) {
      const double recent = mean_joint(recs, recs.size() - w, recs.size());
      const double before = mean_joint(recs, recs.size() - 2 * w, recs.size() - w);
      if (std::abs(recent - before) <= config.early_stop_tol * std::abs(before)) {
        res.early_stopped = true;
        break;
      }
    }
  }
  return res;
}

void save_joint(const std::filesystem::path& path, const gen::GeneratorParams& generator,
                const disc::DiscriminatorParams& discriminators, std::uint64_t vocab_hash) {
  Checkpoint ckpt;
  ckpt.meta["kind"] = "joint";
  gen::export_generator(ckpt, generator, vocab_hash);
  disc::export_discriminators(ckpt, discriminators);
  save_checkpoint(path, ckpt);
}

JointModel load_joint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_vocab_hash) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("missing joint checkpoint: " + path.string());
  const Checkpoint ckpt = load_checkpoint(path);
  const auto kind = ckpt.meta.find("kind");
  if (kind == ckpt.meta.end() || kind->second != "joint") {
    throw std::runtime_error(path.string() + " is not a joint checkpoint");
  }
  return {gen::import_generator(ckpt, expected_vocab_hash, path.string()), disc::import_discriminators(ckpt)};
}

}  // namespace advgen::train
