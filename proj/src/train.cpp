#include "padiff/train.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "padiff/error.hpp"
#include "padiff/image_io.hpp"
#include "padiff/metrics.hpp"
#include "padiff/nn_util.hpp"

namespace padiff::train {

namespace {

uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c = 0) {
  // splitmix64 over the three words
  uint64_t z = a;
  for (uint64_t w : {b, c}) {
    z += 0x9e3779b97f4a7c15ULL + w;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
  }
  return z;
}

std::vector<int64_t> epoch_permutation(int64_t n, uint64_t seed, int64_t epoch) {
  std::vector<int64_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, static_cast<uint64_t>(epoch), 0x5eed));
  for (int64_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<int64_t>(rng() % static_cast<uint64_t>(i + 1));
    std::swap(perm[i], perm[j]);
  }
  return perm;
}

void check_batch(const Batch& batch) {
  const auto& d = batch.degraded;
  const auto& c = batch.clean;
  if (!d.defined() || !c.defined() || d.dim() != 4 || d.size(1) != 3 || d.sizes() != c.sizes()) {
    throw ShapeError("train_step: batch must hold aligned [B, 3, H, W] degraded/clean tensors");
  }
}

}  // namespace

void PairDataset::add(std::string name, ImageGrid degraded_image, ImageGrid clean_image) {
  require_same_shape(degraded_image, clean_image, "PairDataset::add");
  if (degraded_image.channels() != 3 || degraded_image.range() != ValueRange::kPhysical ||
      clean_image.range() != ValueRange::kPhysical) {
    throw ShapeError("PairDataset: pairs must be physical-range RGB (" + name + ")");
  }
  names.push_back(std::move(name));
  degraded.push_back(std::move(degraded_image));
  clean.push_back(std::move(clean_image));
}

PairDataset PairDataset::load(const std::string& dir) {
  namespace fs = std::filesystem;
  PairDataset out;
  for (const auto& path : io::list_pngs(fs::path(dir) / "degraded")) {
    const auto clean_path = fs::path(dir) / "clean" / path.filename();
    if (!fs::exists(clean_path)) {
      throw IoError(clean_path.string() + ": missing clean counterpart");
    }
    out.add(path.filename().string(), io::read_png(path), io::read_png(clean_path));
  }
  if (out.size() == 0) {
    throw IoError(dir + ": no PNG pairs under degraded/");
  }
  return out;
}

Trainer::Trainer(TrainConfig config)
    : config_(std::move(config)),
      schedule_(config_.schedule()),
      plan_(config_.skip_plan()),
      generator_(at::make_generator<at::CPUGeneratorImpl>(mix_seed(config_.seed, 1))) {
  config_.validate();
  torch::manual_seed(config_.seed);
  model_ = model::PADiff(config_.model);
  model_->to(torch::kFloat32);
  nn::set_dropout_generator(*model_, generator_);
  optimizer_ = std::make_unique<torch::optim::Adam>(
      model_->parameters(),
      torch::optim::AdamOptions(config_.lr).betas({config_.adam_beta1, config_.adam_beta2}));
  if (config_.perceptual_model.empty()) {
    extractor_ = std::make_unique<ppg::RandomPyramidExtractor>();
  } else {
    extractor_ = std::make_unique<ppg::TorchScriptExtractor>(config_.perceptual_model);
  }
}

void Trainer::freeze_ppg() {
  for (auto& p : model_->ppg()->parameters()) {
    p.requires_grad_(false);
    p.mutable_grad() = torch::Tensor();
  }
  ppg_frozen_ = true;
}

StepLosses Trainer::compute_losses(const Batch& batch, const torch::Tensor& t,
                                   const torch::Tensor& eps, bool ppg_only,
                                   torch::Tensor* objective) {
  const bool detach = ppg_only || config_.condition_gradients == ConditionGradients::kDetached;
  auto cond = model_->condition(batch.degraded, detach);

  auto reconstructed = batch.clean * cond.priors.transmission +
                       (1.0 - cond.priors.transmission) * cond.priors.background;
  auto l_ppg = ppg::ppg_loss(reconstructed, batch.degraded, extractor_.get(), config_.lambda1,
                             config_.lambda2)
                   .total;
  auto clean_diffusion = batch.clean * 2.0 - 1.0;
  auto l_inr = inr::inr_loss(cond.inr_output, clean_diffusion);
  auto x_t = diffusion::q_sample(clean_diffusion, t, eps, schedule_);
  auto eps_hat = model_->denoise(x_t, cond.bundle, t);
  auto l_dm = diffusion::diffusion_loss(eps, eps_hat, config_.loss_norm);

  StepLosses out;
  out.dm = l_dm.item<double>();
  out.ppg = l_ppg.item<double>();
  out.inr = l_inr.item<double>();

  const bool use_ppg = config_.w_ppg > 0.0 && !ppg_frozen_;
  const bool use_dm = config_.w_dm > 0.0 && !ppg_only;
  const bool use_inr = config_.w_inr > 0.0 && !ppg_only;
  torch::Tensor total = torch::zeros({}, batch.degraded.options());
  if (use_dm) {
    total = total + config_.w_dm * l_dm;
    out.total += config_.w_dm * out.dm;
  }
  if (use_ppg) {
    total = total + config_.w_ppg * l_ppg;
    out.total += config_.w_ppg * out.ppg;
  }
  if (use_inr) {
    total = total + config_.w_inr * l_inr;
    out.total += config_.w_inr * out.inr;
  }
  if (objective != nullptr) {
    *objective = total;
  }
  return out;
}

StepLosses Trainer::train_step(const Batch& batch) {
  check_batch(batch);
  const bool ppg_only = iteration_ < config_.ppg_pretrain_iterations;
  if (!ppg_only && config_.ppg_pretrain_iterations > 0 && !ppg_frozen_) {
    freeze_ppg();
  }
  model_->train();
  Batch b{batch.degraded.to(torch::kFloat32), batch.clean.to(torch::kFloat32)};
  const int64_t n = b.degraded.size(0);
  auto t = torch::randint(1, schedule_.num_steps() + 1, {n}, generator_, torch::kLong);
  auto eps = torch::randn(b.degraded.sizes(), generator_, torch::kFloat32);

  optimizer_->zero_grad();
  torch::Tensor objective;
  auto losses = compute_losses(b, t, eps, ppg_only, &objective);
  if (objective.requires_grad()) {
    objective.backward();
    std::vector<torch::Tensor> with_grad;
    for (const auto& p : model_->parameters()) {
      if (p.grad().defined()) {
        with_grad.push_back(p);
      }
    }
    if (config_.grad_clip > 0.0) {
      last_grad_norm_ = torch::nn::utils::clip_grad_norm_(with_grad, config_.grad_clip);
    } else {
      double sq = 0.0;
      for (const auto& p : with_grad) {
        sq += p.grad().to(torch::kFloat64).pow(2).sum().item<double>();
      }
      last_grad_norm_ = std::sqrt(sq);
    }
    optimizer_->step();
  }
  ++iteration_;
  return losses;
}

Batch Trainer::make_batch(const PairDataset& data, int64_t iteration) const {
  const int64_t n = data.size();
  if (n == 0) {
    throw DomainError("make_batch: empty dataset");
  }
  const int64_t crop = config_.crop;
  std::vector<torch::Tensor> degraded;
  std::vector<torch::Tensor> clean;
  int64_t cached_epoch = -1;
  std::vector<int64_t> perm;
  for (int64_t j = 0; j < config_.batch; ++j) {
    const int64_t s = iteration * config_.batch + j;
    const int64_t epoch = s / n;
    if (epoch != cached_epoch) {
      perm = epoch_permutation(n, config_.seed, epoch);
      cached_epoch = epoch;
    }
    const int64_t idx = perm[s % n];
    const auto& d = data.degraded[idx];
    if (d.height() < crop || d.width() < crop) {
      throw ShapeError("make_batch: pair '" + data.names[idx] + "' " + d.shape_string() +
                       " is smaller than the " + std::to_string(crop) + " crop");
    }
    std::mt19937_64 rng(mix_seed(config_.seed, static_cast<uint64_t>(iteration),
                                 static_cast<uint64_t>(j) + 1));
    const int64_t y = static_cast<int64_t>(rng() % static_cast<uint64_t>(d.height() - crop + 1));
    const int64_t x = static_cast<int64_t>(rng() % static_cast<uint64_t>(d.width() - crop + 1));
    degraded.push_back(d.tensor().narrow(1, y, crop).narrow(2, x, crop));
    clean.push_back(data.clean[idx].tensor().narrow(1, y, crop).narrow(2, x, crop));
  }
  return {torch::stack(degraded).to(torch::kFloat32), torch::stack(clean).to(torch::kFloat32)};
}

double Trainer::validate(const PairDataset& data) {
  if (data.size() == 0) {
    throw DomainError("validate: empty dataset");
  }
  auto gen = at::make_generator<at::CPUGeneratorImpl>(
      mix_seed(config_.seed, static_cast<uint64_t>(iteration_), 0x7a1));
  double sum = 0.0;
  for (int64_t i = 0; i < data.size(); ++i) {
    auto out = model_->enhance(data.degraded[i].batched(torch::kFloat32), schedule_, plan_, gen);
    auto enhanced = ImageGrid::from_batched(out.to(torch::kFloat64));
    sum += metrics::psnr(enhanced, data.clean[i]);
  }
  return sum / static_cast<double>(data.size());
}

LossProbe Trainer::make_probe(const Batch& batch, int64_t timesteps, uint64_t seed) const {
  check_batch(batch);
  LossProbe probe;
  probe.batch = {batch.degraded.to(torch::kFloat32), batch.clean.to(torch::kFloat32)};
  probe.timesteps = diffusion::make_skip_plan(schedule_.num_steps(), timesteps).steps();
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  for (size_t i = 0; i < probe.timesteps.size(); ++i) {
    probe.noise.push_back(torch::randn(probe.batch.degraded.sizes(), gen, torch::kFloat32));
  }
  return probe;
}

StepLosses Trainer::probe_loss(const LossProbe& probe) {
  const bool was_training = model_->is_training();
  model_->eval();
  torch::NoGradGuard no_grad;
  StepLosses mean;
  const int64_t n = probe.batch.degraded.size(0);
  for (size_t i = 0; i < probe.timesteps.size(); ++i) {
    auto t = torch::full({n}, probe.timesteps[i], torch::kLong);
    auto l = compute_losses(probe.batch, t, probe.noise[i], false, nullptr);
    mean.dm += l.dm;
    mean.ppg += l.ppg;
    mean.inr += l.inr;
    mean.total += l.total;
  }
  const double k = static_cast<double>(probe.timesteps.size());
  mean.dm /= k;
  mean.ppg /= k;
  mean.inr /= k;
  mean.total /= k;
  model_->train(was_training);
  return mean;
}

std::vector<LogRow> fit(Trainer& trainer, const PairDataset& data, const FitOptions& options) {
  if (data.size() == 0) {
    throw DomainError("fit: empty dataset");
  }
  const auto& config = trainer.config();
  const int64_t end = options.stop_at.value_or(config.iterations);
  std::ofstream log;
  if (!options.log_path.empty()) {
    const bool fresh = !std::filesystem::exists(options.log_path) ||
                       std::filesystem::file_size(options.log_path) == 0;
    log.open(options.log_path, std::ios::app);
    if (!log) {
      throw IoError(options.log_path + ": cannot open metrics log");
    }
    if (fresh) {
      log << "iteration,L_dm,L_ppg,L_inr,val_psnr\n";
    }
  }
  std::vector<LogRow> rows;
  while (trainer.iteration() < end) {
    auto batch = trainer.make_batch(data, trainer.iteration());
    auto losses = trainer.train_step(batch);
    LogRow row{trainer.iteration(), losses.dm, losses.ppg, losses.inr, std::nullopt};
    if (options.validation != nullptr && config.validate_every > 0 &&
        row.iteration % config.validate_every == 0) {
      row.val_psnr = trainer.validate(*options.validation);
    }
    if (log.is_open()) {
      char buf[128];
      std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,", static_cast<long long>(row.iteration),
                    row.dm, row.ppg, row.inr);
      log << buf;
      if (row.val_psnr) {
        std::snprintf(buf, sizeof(buf), "%.9g", *row.val_psnr);
        log << buf;
      }
      log << "\n";
      log.flush();
      if (!log) {
        throw IoError(options.log_path + ": write failed");
      }
    }
    if (!options.checkpoint_path.empty() && config.checkpoint_every > 0 &&
        row.iteration % config.checkpoint_every == 0) {
      trainer.save(options.checkpoint_path);
    }
    if (options.on_step) {
      options.on_step(row);
    }
    rows.push_back(row);
  }
  if (!options.checkpoint_path.empty()) {
    trainer.save(options.checkpoint_path);
  }
  return rows;
}

}  // namespace padiff::train
