#include "diffvps/engine.hpp"

#include "diffvps/losses.hpp"
#include "diffvps/mask_codec.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace diffvps {

namespace fs = std::filesystem;

uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double lr_at(int64_t step, int64_t total_steps, double lr0, double power) {
  if (total_steps <= 0 || step >= total_steps) return 0.0;
  const double frac = 1.0 - static_cast<double>(std::max<int64_t>(step, 0)) / static_cast<double>(total_steps);
  return lr0 * std::pow(frac, power);
}

// ---- Adam ----

Adam::Adam(std::vector<std::pair<std::string, torch::Tensor>> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& [name, p] : params_) {
    m_.push_back(torch::zeros_like(p));
    v_.push_back(torch::zeros_like(p));
  }
}

void Adam::zero_grad() {
  for (auto& [name, p] : params_) p.mutable_grad().reset();
}

void Adam::step(double lr) {
  torch::NoGradGuard no_grad;
  ++steps_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].second;
    const auto& g = p.grad();
    if (!g.defined()) continue;
    m_[i].mul_(beta1_).add_(g, 1.0 - beta1_);
    v_[i].mul_(beta2_).addcmul_(g, g, 1.0 - beta2_);
    auto denom = (v_[i] / bc2).sqrt_().add_(eps_);
    p.addcdiv_(m_[i], denom, -lr / bc1);
  }
}

void Adam::save(const std::string& prefix, TensorMap& out) const {
  for (size_t i = 0; i < params_.size(); ++i) {
    out[prefix + ".m." + params_[i].first] = m_[i];
    out[prefix + ".v." + params_[i].first] = v_[i];
  }
}

void Adam::load(const std::string& prefix, const TensorMap& in, int64_t steps) {
  torch::NoGradGuard no_grad;
  for (size_t i = 0; i < params_.size(); ++i) {
    for (auto* pair : {&m_, &v_}) {
      const auto key = prefix + (pair == &m_ ? ".m." : ".v.") + params_[i].first;
      auto it = in.find(key);
      if (it == in.end()) throw std::runtime_error("checkpoint lacks optimizer state '" + key + "'");
      if (it->second.sizes() != (*pair)[i].sizes()) throw std::runtime_error("optimizer state '" + key + "' has the wrong shape");
      (*pair)[i].copy_(it->second);
    }
  }
  steps_ = steps;
}

nlohmann::json LossRecord::to_json() const {
  return {{"step", step},   {"lr", lr},        {"L_seg", seg},     {"L_cls", cls},   {"L_det", det},
          {"L_MDM", mdm},   {"L_G_mse", g_mse}, {"L_G_adv", g_adv}, {"L_TRM", trm},   {"L_D", disc},
          {"L_total", total}};
}

Batch collate(const std::vector<VideoClip>& clips, torch::Dtype dtype) {
  if (clips.empty()) throw std::invalid_argument("collate: empty batch");
  std::vector<torch::Tensor> target, prev, mask, box;
  std::vector<int64_t> cls;
  for (const auto& c : clips) {
    target.push_back(c.target);
    prev.push_back(c.prev);
    mask.push_back(c.mask);
    cls.push_back(c.annotations.class_id);
    box.push_back(torch::tensor(std::vector<double>(c.annotations.box.begin(), c.annotations.box.end()), torch::kDouble));
  }
  Batch b;
  b.target = torch::stack(target).to(dtype);
  b.prev = torch::stack(prev).to(dtype);
  b.mask = torch::stack(mask).to(dtype);
  b.cls = torch::tensor(cls, torch::kLong);
  b.box = torch::stack(box).to(dtype);
  return b;
}

// ---- trainer ----

namespace {

std::vector<std::pair<std::string, torch::Tensor>> named(const DiffVPSModel& model, bool discriminator) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& item : model->named_parameters()) {
    if (item.key().starts_with("discriminator.") == discriminator) out.emplace_back(item.key(), item.value());
  }
  return out;
}

void set_requires_grad(const std::vector<torch::Tensor>& params, bool on) {
  for (auto p : params) p.requires_grad_(on);
}

double scalar(const torch::Tensor& t) { return t.defined() ? t.item<double>() : 0.0; }

}  // namespace

Trainer::Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) {
  validate(cfg_);
  schedule_ = build_schedule(cfg_.diffusion);
  model_ = DiffVPSModel(cfg_.net);
  model_->reset_parameters(mix_seed(cfg_.seed, 0x1417));
  if (!cfg_.disc_weights.empty()) model_->load_discriminator_weights(cfg_.disc_weights);
  gen_opt_ = std::make_unique<Adam>(named(model_, false), cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps);
  disc_opt_ = std::make_unique<Adam>(named(model_, true), cfg_.adam_beta1, cfg_.adam_beta2, cfg_.adam_eps);
}

ForwardLosses Trainer::forward_losses(const Batch& batch, const torch::Tensor& t, const torch::Tensor& eps) {
  const auto w = effective_weights(cfg_);
  const double b = cfg_.diffusion.latent_scale;
  auto z0 = encode_mask(batch.mask, b);
  auto z_t = forward_diffuse(z0, t, eps, schedule_);

  auto spatial = model_->image_encode(batch.target);
  auto temporal = cfg_.ablation.trm ? model_->temporal_encode(batch.prev) : model_->zero_pyramid(batch.target.size(0));
  auto prior = model_->fuse_prior(spatial, temporal);
  auto pred = model_->denoise(z_t, prior, t);

  ForwardLosses out;
  auto prob = torch::sigmoid(pred.mask_logits);
  out.seg = seg_loss(prob, pred.z0_hat, z0, batch.mask);
  auto mdm = mdm_loss(out.seg, pred.cls_logits, batch.cls, pred.box, batch.box, w, cfg_.box_loss);
  out.cls = mdm.cls;
  out.det = mdm.det;
  out.mdm = mdm.total;

  const auto opts = z0.options();
  if (cfg_.ablation.trm) {
    out.frame_hat = model_->reconstruct(temporal);
    auto d_fake = cfg_.ablation.ass ? model_->discriminate(out.frame_hat)
                                    : torch::ones({batch.target.size(0)}, opts);
    auto gen = gen_loss(out.frame_hat, batch.target, d_fake, w.adv);
    out.g_mse = gen.mse;
    out.g_adv = gen.adv;
    out.trm = gen.total;
  } else {
    out.g_mse = torch::zeros({}, opts);
    out.g_adv = torch::zeros({}, opts);
    out.trm = torch::zeros({}, opts);
  }
  out.total = total_loss(out.mdm, out.trm, w);
  return out;
}

LossRecord Trainer::train_step(const std::vector<VideoClip>& clips, int64_t total_steps) {
  const auto batch = collate(clips);
  const auto bsz = batch.target.size(0);
  auto gen = at::make_generator<at::CPUGeneratorImpl>(mix_seed(cfg_.seed, 0x5eed0000ULL + static_cast<uint64_t>(step_)));
  auto t = torch::randint(0, schedule_.T, {bsz}, gen, torch::kLong);
  auto eps = torch::randn({bsz, 1, cfg_.net.height / 4, cfg_.net.width / 4}, gen, torch::kFloat);

  LossRecord rec;
  rec.step = step_;
  rec.lr = lr_at(step_, total_steps, cfg_.lr, cfg_.lr_power);

  // Generator update; the discriminator is held fixed.
  const auto disc_params = model_->discriminator_parameters();
  set_requires_grad(disc_params, false);
  auto losses = forward_losses(batch, t, eps);
  rec.seg = scalar(losses.seg);
  rec.cls = scalar(losses.cls);
  rec.det = scalar(losses.det);
  rec.mdm = scalar(losses.mdm);
  rec.g_mse = scalar(losses.g_mse);
  rec.g_adv = scalar(losses.g_adv);
  rec.trm = scalar(losses.trm);
  rec.total = scalar(losses.total);
  for (auto [name, v] : {std::pair{"L_seg", rec.seg}, {"L_cls", rec.cls}, {"L_det", rec.det}, {"L_G_mse", rec.g_mse},
                         {"L_G_adv", rec.g_adv}, {"L_total", rec.total}}) {
    if (!std::isfinite(v)) {
      set_requires_grad(disc_params, true);
      throw std::runtime_error("non-finite loss at step " + std::to_string(step_) + ": " + name + " = " +
                               std::to_string(v) + "; record " + rec.to_json().dump());
    }
  }
  gen_opt_->zero_grad();
  losses.total.backward();
  gen_opt_->step(rec.lr);
  set_requires_grad(disc_params, true);
  if (on_update) on_update(TrainPhase::kGenerator);

  // Discriminator update on the detached reconstruction.
  if (cfg_.ablation.trm && cfg_.ablation.ass) {
    auto fake = losses.frame_hat.detach();
    auto d = disc_loss(model_->discriminate(fake), model_->discriminate(batch.target));
    rec.disc = scalar(d.value);
    if (!std::isfinite(rec.disc)) {
      throw std::runtime_error("non-finite loss at step " + std::to_string(step_) + ": L_D; record " +
                               rec.to_json().dump());
    }
    disc_opt_->zero_grad();
    d.value.backward();
    disc_opt_->step(rec.lr);
    if (on_update) on_update(TrainPhase::kDiscriminator);
  }
  ++step_;
  return rec;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ckpt;
  ckpt.config = config_to_json(cfg_);
  for (const auto& item : model_->named_parameters()) ckpt.params[item.key()] = item.value().detach().clone();
  gen_opt_->save("gen", ckpt.optimizer);
  disc_opt_->save("disc", ckpt.optimizer);
  ckpt.step = step_;
  ckpt.epoch = epoch_;
  ckpt.gen_opt_steps = gen_opt_->steps();
  ckpt.disc_opt_steps = disc_opt_->steps();
  return ckpt;
}

namespace {

void load_params(DiffVPSModel& model, const TensorMap& params) {
  torch::NoGradGuard no_grad;
  size_t matched = 0;
  for (auto& item : model->named_parameters()) {
    auto it = params.find(item.key());
    if (it == params.end()) throw std::runtime_error("checkpoint lacks parameter '" + item.key() + "'");
    if (it->second.sizes() != item.value().sizes()) {
      std::ostringstream os;
      os << "parameter '" << item.key() << "' has shape " << it->second.sizes() << " in the checkpoint but "
         << item.value().sizes() << " in the configured model";
      throw std::runtime_error(os.str());
    }
    item.value().copy_(it->second);
    ++matched;
  }
  if (matched != params.size()) throw std::runtime_error("checkpoint holds parameters the model does not have");
}

}  // namespace

Trainer Trainer::from_checkpoint(const Checkpoint& ckpt) {
  Trainer tr(config_from_json(ckpt.config));
  load_params(tr.model_, ckpt.params);
  tr.gen_opt_->load("gen", ckpt.optimizer, ckpt.gen_opt_steps);
  tr.disc_opt_->load("disc", ckpt.optimizer, ckpt.disc_opt_steps);
  tr.step_ = ckpt.step;
  tr.epoch_ = ckpt.epoch;
  return tr;
}

DiffVPSModel model_from_checkpoint(const Checkpoint& ckpt) {
  const auto cfg = config_from_json(ckpt.config);
  DiffVPSModel model(cfg.net);
  load_params(model, ckpt.params);
  return model;
}

// ---- sampling ----

ChainResult sample_chain(const DenoiseFn& head, const torch::Tensor& z_T, const NoiseSchedule& schedule, int64_t K,
                         double eta, uint64_t noise_seed) {
  const auto steps = make_step_schedule(schedule.T, K).steps;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(noise_seed);
  ChainResult out;
  auto z = z_T;
  for (size_t i = 0; i < steps.size(); ++i) {
    const auto t = steps[i];
    auto pred = head(z, torch::full({z.size(0)}, t, torch::kLong));
    if (i + 1 == steps.size()) {
      out.z0 = reverse_step(z, pred.z0_hat, t, kEmitClean, schedule);
      out.mask_logits = pred.mask_logits;
    } else if (eta == 0.0) {
      z = reverse_step(z, pred.z0_hat, t, steps[i + 1], schedule);
    } else {
      auto noise = torch::randn(z.sizes(), gen, z.scalar_type());
      z = reverse_step_stochastic(z, pred.z0_hat, t, steps[i + 1], schedule, eta, noise);
    }
  }
  return out;
}

uint64_t frame_noise_seed(uint64_t seed, const std::string& case_id, int64_t frame) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : case_id) h = (h ^ c) * 1099511628211ULL;
  return mix_seed(mix_seed(seed, h), static_cast<uint64_t>(frame));
}

torch::Tensor infer_batch(DiffVPSModel& model, const TrainConfig& cfg, const NoiseSchedule& schedule,
                          const Batch& batch, const std::vector<uint64_t>& noise_seeds, const InferOptions& opts) {
  torch::NoGradGuard no_grad;
  const auto bsz = batch.target.size(0);
  if (static_cast<int64_t>(noise_seeds.size()) != bsz) throw std::invalid_argument("infer_batch: one seed per sample");
  auto spatial = model->image_encode(batch.target);
  auto temporal = cfg.ablation.trm ? model->temporal_encode(batch.prev) : model->zero_pyramid(bsz);
  auto prior = model->fuse_prior(spatial, temporal);
  DenoiseFn head = [&](const torch::Tensor& z_t, const torch::Tensor& t) { return model->denoise(z_t, prior, t); };

  const auto h = cfg.net.height / 4, w = cfg.net.width / 4;
  torch::Tensor acc;
  for (int64_t e = 0; e < opts.ensemble; ++e) {
    std::vector<torch::Tensor> noise;
    for (auto s : noise_seeds) {
      const auto seed = e == 0 ? s : mix_seed(s, static_cast<uint64_t>(e));
      auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
      noise.push_back(torch::randn({1, 1, h, w}, gen, batch.target.scalar_type()));
    }
    auto res = sample_chain(head, torch::cat(noise), schedule, opts.K, opts.eta,
                            mix_seed(noise_seeds.front(), 0xa11ce + static_cast<uint64_t>(e)));
    auto prob = torch::sigmoid(res.mask_logits);
    acc = acc.defined() ? acc + prob : prob;
  }
  return acc / static_cast<double>(opts.ensemble);
}

torch::Tensor infer_clip(const Checkpoint& ckpt, const VideoClip& clip, const InferOptions& opts) {
  const auto cfg = config_from_json(ckpt.config);
  auto model = model_from_checkpoint(ckpt);
  const auto schedule = build_schedule(cfg.diffusion);
  auto batch = collate({clip});
  if (batch.target.size(2) != cfg.net.height || batch.target.size(3) != cfg.net.width) {
    throw std::invalid_argument("infer_clip: clip size does not match the checkpoint's patch size");
  }
  return infer_batch(model, cfg, schedule, batch, {frame_noise_seed(opts.seed, clip.case_id, clip.frame_index)}, opts)[0];
}

// ---- evaluation ----

std::vector<const CaseEntry*> select_test_cases(const DatasetIndex& index, const std::string& filter) {
  std::vector<const CaseEntry*> out;
  for (const auto* c : index.with_role("test")) {
    const bool keep = filter == "all" || filter == c->visibility || filter == c->difficulty || filter == c->split();
    if (keep) out.push_back(c);
  }
  return out;
}

Evaluation evaluate_cases(const DatasetIndex& index, const std::vector<const CaseEntry*>& cases, int64_t height,
                          int64_t width, int64_t delta, const PredictFn& predict, Pooling pooling,
                          int64_t batch_size, const std::map<std::string, std::string>& split_of) {
  if (cases.empty()) throw std::invalid_argument("evaluation split is empty");
  Evaluation ev;
  ClipCache cache(index, cases, height, width);
  std::vector<VideoClip> pending;
  auto flush = [&] {
    if (pending.empty()) return;
    auto probs = predict(pending);
    for (size_t i = 0; i < pending.size(); ++i) {
      auto s = score_frame(to_grid(probs[static_cast<int64_t>(i)]), to_grid(pending[i].mask));
      s.case_id = pending[i].case_id;
      s.frame_id = static_cast<int>(pending[i].frame_index);
      ev.frames.push_back(s);
    }
    pending.clear();
  };
  for (size_t slot = 0; slot < cache.case_count(); ++slot) {
    const auto& entry = cache.entry(slot);
    auto it = split_of.find(entry.case_id);
    ev.split_of[entry.case_id] = it != split_of.end() ? it->second : entry.split();
    for (int64_t f = 0; f < cache.frame_count(slot); ++f) {
      pending.push_back(cache.clip(slot, f, delta));
      if (static_cast<int64_t>(pending.size()) >= batch_size) flush();
    }
  }
  flush();
  ev.report = aggregate_report(ev.frames, ev.split_of, pooling);
  return ev;
}

Evaluation evaluate_with(const DatasetIndex& index, const std::string& filter, int64_t height, int64_t width,
                         int64_t delta, const PredictFn& predict, Pooling pooling, int64_t batch_size) {
  const auto cases = select_test_cases(index, filter);
  if (cases.empty()) throw std::invalid_argument("no test cases match split filter '" + filter + "'");
  return evaluate_cases(index, cases, height, width, delta, predict, pooling, batch_size);
}

namespace {

PredictFn model_predictor(DiffVPSModel& model, const TrainConfig& cfg, const NoiseSchedule& schedule,
                          const InferOptions& opts) {
  return [&model, cfg, schedule, opts](const std::vector<VideoClip>& clips) {
    std::vector<uint64_t> seeds;
    for (const auto& c : clips) seeds.push_back(frame_noise_seed(opts.seed, c.case_id, c.frame_index));
    return infer_batch(model, cfg, schedule, collate(clips), seeds, opts);
  };
}

double pooled_mean(const Evaluation& ev, const std::vector<std::string>& splits, double FrameScore::*field) {
  double sum = 0.0;
  int64_t n = 0;
  for (const auto& f : ev.frames) {
    const auto& split = ev.split_of.at(f.case_id);
    if (!splits.empty() && std::find(splits.begin(), splits.end(), split) == splits.end()) continue;
    sum += f.*field;
    ++n;
  }
  if (n == 0) throw std::invalid_argument("no frames in the requested splits");
  return sum / static_cast<double>(n);
}

}  // namespace

Evaluation evaluate(const Checkpoint& ckpt, const DatasetIndex& index, const std::string& filter,
                    const InferOptions& opts) {
  const auto cfg = config_from_json(ckpt.config);
  auto model = model_from_checkpoint(ckpt);
  const auto schedule = build_schedule(cfg.diffusion);
  return evaluate_with(index, filter, cfg.net.height, cfg.net.width, cfg.delta,
                       model_predictor(model, cfg, schedule, opts), cfg.pooling, cfg.batch_size);
}

double mean_dice(const Evaluation& eval, const std::vector<std::string>& splits) {
  return pooled_mean(eval, splits, &FrameScore::dice);
}

double mean_s_alpha(const Evaluation& eval, const std::vector<std::string>& splits) {
  return pooled_mean(eval, splits, &FrameScore::s_alpha);
}

// ---- training run ----

TrainSummary train(const TrainConfig& cfg, const DatasetIndex& index, const fs::path& out_dir,
                   const std::function<void(const std::string&)>& log) {
  validate(cfg);
  fs::create_directories(out_dir);
  const auto train_cases = index.with_role("train");
  if (train_cases.empty()) throw std::invalid_argument("dataset has no train cases");

  // Hold-out spread evenly within each difficulty so validation mirrors the mix.
  std::vector<const CaseEntry*> fit_cases, val_cases;
  std::map<std::string, size_t> seen_per_difficulty;
  for (const auto* c : train_cases) {
    const size_t i = seen_per_difficulty[c->difficulty]++;
    const bool val = cfg.val_fraction > 0.0 && std::floor((i + 1) * cfg.val_fraction) > std::floor(i * cfg.val_fraction);
    (val ? val_cases : fit_cases).push_back(c);
  }
  if (fit_cases.empty()) throw std::invalid_argument("validation hold-out leaves no training cases");

  ClipCache cache(index, fit_cases, cfg.net.height, cfg.net.width);
  std::vector<std::pair<size_t, int64_t>> samples;
  for (size_t slot = 0; slot < cache.case_count(); ++slot) {
    for (int64_t f = 0; f < cache.frame_count(slot); ++f) samples.emplace_back(slot, f);
  }
  const int64_t per_epoch = (static_cast<int64_t>(samples.size()) + cfg.batch_size - 1) / cfg.batch_size;
  int64_t total_steps = per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);

  Trainer trainer(cfg);
  TrainSummary summary;
  summary.last_checkpoint = out_dir / "last.ckpt";
  summary.best_checkpoint = out_dir / "best.ckpt";
  std::ofstream log_file(out_dir / "train_log.jsonl", std::ios::trunc);

  const InferOptions val_opts{cfg.diffusion.K, cfg.diffusion.eta, 1, cfg.seed};
  std::map<std::string, std::string> val_split;
  for (const auto* c : val_cases) val_split[c->case_id] = "val";

  for (int64_t epoch = 0; epoch < cfg.epochs && trainer.step() < total_steps; ++epoch) {
    trainer.set_epoch(epoch);
    auto gen = at::make_generator<at::CPUGeneratorImpl>(mix_seed(cfg.seed, 0xe90c0000ULL + static_cast<uint64_t>(epoch)));
    auto order = torch::randperm(static_cast<int64_t>(samples.size()), gen, torch::kLong);
    auto order_acc = order.accessor<int64_t, 1>();
    double epoch_total = 0.0;
    int64_t ran = 0;
    for (int64_t s = 0; s < per_epoch && trainer.step() < total_steps; ++s, ++ran) {
      std::vector<VideoClip> clips;
      for (int64_t k = s * cfg.batch_size; k < std::min<int64_t>((s + 1) * cfg.batch_size, order.size(0)); ++k) {
        const auto& [slot, frame] = samples[static_cast<size_t>(order_acc[k])];
        clips.push_back(cache.clip(slot, frame, cfg.delta));
      }
      const auto rec = trainer.train_step(clips, total_steps);
      log_file << rec.to_json().dump() << '\n';
      epoch_total += rec.total;
    }
    log_file.flush();
    trainer.set_epoch(epoch + 1);
    std::ostringstream msg;
    msg << "epoch " << epoch + 1 << "/" << cfg.epochs << " mean L_total " << epoch_total / std::max<int64_t>(ran, 1);
    if (!val_cases.empty()) {
      auto model = trainer.model();
      const auto ev = evaluate_cases(index, val_cases, cfg.net.height, cfg.net.width, cfg.delta,
                                     model_predictor(model, cfg, trainer.schedule(), val_opts), Pooling::kFrames,
                                     cfg.batch_size, val_split);
      const double d = mean_dice(ev);
      msg << " val Dice " << d;
      if (d > summary.best_val_dice) {
        summary.best_val_dice = d;
        save_checkpoint(summary.best_checkpoint, trainer.checkpoint());
      }
    }
    if (log) log(msg.str());
  }
  const auto last = trainer.checkpoint();
  save_checkpoint(summary.last_checkpoint, last);
  if (val_cases.empty() || cfg.epochs == 0) save_checkpoint(summary.best_checkpoint, last);
  summary.steps = trainer.step();
  return summary;
}

// ---- ablations ----

std::vector<Ablation> ablation_matrix() {
  return {{false, false, false}, {true, false, false}, {false, true, false}, {false, true, true}, {true, true, true}};
}

std::string ablation_name(size_t i) { return i < 4 ? "#" + std::to_string(i + 1) : "Ours"; }

std::vector<AblationRow> run_ablation(const TrainConfig& base, const DatasetIndex& index, const fs::path& out_dir,
                                      const std::function<void(const std::string&)>& log) {
  std::vector<AblationRow> rows;
  const auto matrix = ablation_matrix();
  for (size_t i = 0; i < matrix.size(); ++i) {
    auto cfg = base;
    cfg.ablation = matrix[i];
    const auto name = ablation_name(i);
    const auto dir = out_dir / (i < 4 ? "ablation_" + std::to_string(i + 1) : std::string("ablation_full"));
    if (log) log("training " + name);
    const auto summary = train(cfg, index, dir, log);
    const auto ckpt = load_checkpoint(summary.best_checkpoint);
    const InferOptions opts{cfg.diffusion.K, cfg.diffusion.eta, cfg.ensemble, cfg.seed};
    rows.push_back({name, matrix[i], evaluate(ckpt, index, "all", opts)});
    write_report(rows.back().eval.report, dir / "report");
  }
  return rows;
}

namespace {
std::string f3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}
const char* tick(bool on) { return on ? "yes" : "no"; }
}  // namespace

std::string ablation_summary_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "model,MDM,TRM,ASS,n_frames,S_alpha,E_phi_mn,F_w_beta,Dice\n";
  for (const auto& r : rows) {
    double s = 0, e = 0, f = 0, d = 0;
    for (const auto& fr : r.eval.frames) {
      s += fr.s_alpha;
      e += fr.e_phi_mn;
      f += fr.f_w_beta;
      d += fr.dice;
    }
    const double n = static_cast<double>(r.eval.frames.size());
    os << r.model << ',' << tick(r.toggles.mdm) << ',' << tick(r.toggles.trm) << ',' << tick(r.toggles.ass) << ','
       << r.eval.frames.size() << ',' << f3(s / n) << ',' << f3(e / n) << ',' << f3(f / n) << ',' << f3(d / n) << '\n';
  }
  return os.str();
}

std::string ablation_detail_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "model,MDM,TRM,ASS,split,n_frames,S_alpha,E_phi_mn,F_w_beta,Dice\n";
  for (const auto& r : rows) {
    for (const auto& row : r.eval.report.rows) {
      os << r.model << ',' << tick(r.toggles.mdm) << ',' << tick(r.toggles.trm) << ',' << tick(r.toggles.ass) << ','
         << row.split << ',' << row.n_frames << ',' << f3(row.s_alpha) << ',' << f3(row.e_phi_mn) << ','
         << f3(row.f_w_beta) << ',' << f3(row.dice) << '\n';
    }
  }
  return os.str();
}

}  // namespace diffvps
