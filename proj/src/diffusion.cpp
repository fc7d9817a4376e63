#include "padiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <sstream>

#include "padiff/error.hpp"

namespace padiff::diffusion {

DiffusionSchedule::DiffusionSchedule(int64_t num_steps, double beta_start, double beta_end)
    : beta_start_(beta_start), beta_end_(beta_end) {
  if (num_steps < 1) {
    throw DomainError("schedule needs at least one timestep");
  }
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw DomainError("schedule needs 0 < beta_start <= beta_end < 1");
  }
  const auto n = static_cast<size_t>(num_steps);
  betas_.resize(n);
  alphas_.resize(n);
  alpha_bars_.resize(n);
  posterior_vars_.resize(n);
  double running = 1.0;
  for (size_t i = 0; i < n; ++i) {
    // Convex form so both endpoints come out bit-exact.
    const double f = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
    betas_[i] = beta_start * (1.0 - f) + beta_end * f;
    alphas_[i] = 1.0 - betas_[i];
    const double prev = running;
    running *= alphas_[i];
    alpha_bars_[i] = running;
    posterior_vars_[i] = (1.0 - prev) / (1.0 - running) * betas_[i];
  }
}

void DiffusionSchedule::check_timestep(int64_t t) const {
  if (t < 1 || t > num_steps()) {
    throw DomainError("timestep " + std::to_string(t) + " outside [1, " +
                      std::to_string(num_steps()) + "]");
  }
}

double DiffusionSchedule::beta(int64_t t) const {
  check_timestep(t);
  return betas_[static_cast<size_t>(t - 1)];
}

double DiffusionSchedule::alpha(int64_t t) const {
  check_timestep(t);
  return alphas_[static_cast<size_t>(t - 1)];
}

double DiffusionSchedule::alpha_bar(int64_t t) const {
  if (t == 0) {
    return 1.0;
  }
  check_timestep(t);
  return alpha_bars_[static_cast<size_t>(t - 1)];
}

double DiffusionSchedule::posterior_variance(int64_t t) const {
  check_timestep(t);
  return posterior_vars_[static_cast<size_t>(t - 1)];
}

DiffusionSchedule make_schedule(int64_t num_steps, double beta_start, double beta_end) {
  return DiffusionSchedule(num_steps, beta_start, beta_end);
}

DiffusionSchedule default_schedule() { return DiffusionSchedule(2000, 1e-6, 1e-2); }

SkipPlan::SkipPlan(std::vector<int64_t> steps) : steps_(std::move(steps)) {
  if (steps_.empty()) {
    throw DomainError("skip plan is empty");
  }
  for (size_t i = 1; i < steps_.size(); ++i) {
    if (steps_[i] >= steps_[i - 1]) {
      throw DomainError("skip plan must be strictly descending");
    }
  }
  if (steps_.back() != 1) {
    throw DomainError("skip plan must end at t = 1");
  }
}

SkipPlan make_skip_plan(int64_t num_steps, int64_t plan_length, SkipSpacing spacing,
                        const DiffusionSchedule* schedule) {
  if (plan_length < 1 || plan_length > num_steps) {
    throw DomainError("skip plan length must be in [1, T]");
  }
  std::vector<int64_t> steps;
  if (plan_length == 1) {
    steps.push_back(1);
    return SkipPlan(steps);
  }
  if (spacing == SkipSpacing::kUniformTimestep) {
    for (int64_t i = plan_length - 1; i >= 0; --i) {
      steps.push_back(1 + (i * (num_steps - 1)) / (plan_length - 1));
    }
    return SkipPlan(steps);
  }
  if (schedule == nullptr || schedule->num_steps() != num_steps) {
    throw DomainError("alpha-bar spacing needs the matching schedule");
  }
  // Targets evenly spaced in abar between abar_T and abar_1; nearest free timestep wins,
  // bumping down so the plan stays strictly descending.
  const double hi = schedule->alpha_bar(1);
  const double lo = schedule->alpha_bar(num_steps);
  int64_t prev = num_steps + 1;
  for (int64_t i = 0; i < plan_length; ++i) {
    const double target = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(plan_length - 1);
    const auto& bars = schedule->alpha_bars();
    // alpha_bars is decreasing: first index with abar <= target.
    auto it = std::lower_bound(bars.begin(), bars.end(), target, std::greater<double>());
    int64_t t = std::clamp<int64_t>(static_cast<int64_t>(it - bars.begin()) + 1, 1, num_steps);
    const int64_t remaining = plan_length - 1 - i;
    t = std::min(t, prev - 1);
    t = std::max(t, remaining + 1);
    steps.push_back(t);
    prev = t;
  }
  steps.back() = 1;
  return SkipPlan(steps);
}

namespace {

torch::Tensor per_sample(const std::vector<double>& table, const torch::Tensor& t,
                         const torch::Tensor& like, bool complement) {
  auto values = torch::tensor(table, torch::kFloat64);
  if (complement) {
    values = 1.0 - values;
  }
  auto picked = values.index_select(0, (t.to(torch::kLong) - 1).flatten());
  std::vector<int64_t> shape(static_cast<size_t>(like.dim()), 1);
  shape[0] = picked.size(0);
  return torch::sqrt(picked).view(shape).to(like.scalar_type());
}

void check_steps(const torch::Tensor& t, const DiffusionSchedule& schedule) {
  const auto lo = t.min().item<int64_t>();
  const auto hi = t.max().item<int64_t>();
  schedule.check_timestep(lo);
  schedule.check_timestep(hi);
}

}  // namespace

torch::Tensor q_sample(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                       const DiffusionSchedule& schedule) {
  if (x0.sizes() != eps.sizes()) {
    throw ShapeError("q_sample: noise shape differs from x0");
  }
  check_steps(t, schedule);
  if (t.numel() == 1 && t.dim() == 0) {
    return q_sample(x0, t.item<int64_t>(), eps, schedule);
  }
  if (t.numel() != x0.size(0)) {
    throw ShapeError("q_sample: need one timestep per batch entry");
  }
  return per_sample(schedule.alpha_bars(), t, x0, false) * x0 +
         per_sample(schedule.alpha_bars(), t, x0, true) * eps;
}

torch::Tensor q_sample(const torch::Tensor& x0, int64_t t, const torch::Tensor& eps,
                       const DiffusionSchedule& schedule) {
  if (x0.sizes() != eps.sizes()) {
    throw ShapeError("q_sample: noise shape differs from x0");
  }
  schedule.check_timestep(t);
  const double abar = schedule.alpha_bar(t);
  return std::sqrt(abar) * x0 + std::sqrt(1.0 - abar) * eps;
}

ImageGrid q_sample(const ImageGrid& x0, int64_t t, const ImageGrid& eps,
                   const DiffusionSchedule& schedule) {
  require_same_shape(x0, eps, "q_sample");
  return ImageGrid(q_sample(x0.tensor(), t, eps.tensor(), schedule), ValueRange::kDiffusion);
}

torch::Tensor p_step(const torch::Tensor& x_t, int64_t t, const torch::Tensor& eps_hat,
                     const DiffusionSchedule& schedule, const torch::Tensor& z) {
  schedule.check_timestep(t);
  if (x_t.sizes() != eps_hat.sizes()) {
    throw ShapeError("p_step: eps_hat shape differs from x_t");
  }
  const double beta = schedule.beta(t);
  const double alpha = schedule.alpha(t);
  const double abar = schedule.alpha_bar(t);
  auto mean = (x_t - (beta / std::sqrt(1.0 - abar)) * eps_hat) / std::sqrt(alpha);
  if (t == 1 || !z.defined()) {
    return mean;
  }
  if (z.sizes() != x_t.sizes()) {
    throw ShapeError("p_step: noise shape differs from x_t");
  }
  return mean + std::sqrt(schedule.posterior_variance(t)) * z;
}

ImageGrid p_step(const ImageGrid& x_t, int64_t t, const ImageGrid& eps_hat,
                 const DiffusionSchedule& schedule, const std::optional<ImageGrid>& z) {
  require_same_shape(x_t, eps_hat, "p_step");
  torch::Tensor noise;
  if (z) {
    require_same_shape(x_t, *z, "p_step");
    noise = z->tensor();
  }
  return ImageGrid(p_step(x_t.tensor(), t, eps_hat.tensor(), schedule, noise),
                   ValueRange::kDiffusion);
}

namespace {

torch::Tensor step_tensor(int64_t t, const torch::Tensor& x) {
  return torch::full({x.size(0)}, t, torch::TensorOptions().dtype(torch::kLong).device(x.device()));
}

}  // namespace

torch::Tensor skip_sample(const Denoiser& denoiser, const torch::Tensor& x_T, const SkipPlan& plan,
                          const DiffusionSchedule& schedule, const SamplerOptions& options,
                          std::optional<at::Generator> generator) {
  const auto& steps = plan.steps();
  if (steps.front() > schedule.num_steps()) {
    throw DomainError("skip plan exceeds the schedule length");
  }
  auto x = x_T;
  for (size_t i = 0; i < steps.size(); ++i) {
    const int64_t t = steps[i];
    const int64_t t_prev = i + 1 < steps.size() ? steps[i + 1] : 0;
    const double abar = schedule.alpha_bar(t);
    const double abar_prev = schedule.alpha_bar(t_prev);
    auto eps = denoiser(x, step_tensor(t, x));
    auto x0 = (x - std::sqrt(1.0 - abar) * eps) / std::sqrt(abar);
    if (options.clip_x0) {
      x0 = x0.clamp(-1.0, 1.0);
    }
    double sigma = 0.0;
    if (options.eta > 0.0 && t_prev > 0) {
      sigma = options.eta * std::sqrt((1.0 - abar_prev) / (1.0 - abar)) *
              std::sqrt(1.0 - abar / abar_prev);
    }
    const double dir = std::sqrt(std::max(0.0, 1.0 - abar_prev - sigma * sigma));
    x = std::sqrt(abar_prev) * x0 + dir * eps;
    if (sigma > 0.0) {
      x = x + sigma * torch::randn(x.sizes(), generator, x.options());
    }
  }
  return x;
}

torch::Tensor ancestral_sample(const Denoiser& denoiser, const torch::Tensor& x_T,
                               const DiffusionSchedule& schedule,
                               std::optional<at::Generator> generator, bool inject_noise) {
  auto x = x_T;
  for (int64_t t = schedule.num_steps(); t >= 1; --t) {
    auto eps = denoiser(x, step_tensor(t, x));
    torch::Tensor z;
    if (inject_noise && t > 1) {
      z = torch::randn(x.sizes(), generator, x.options());
    }
    x = p_step(x, t, eps, schedule, z);
  }
  return x;
}

torch::Tensor diffusion_loss(const torch::Tensor& eps, const torch::Tensor& eps_hat,
                             LossNorm norm) {
  if (eps.sizes() != eps_hat.sizes()) {
    throw ShapeError("diffusion_loss: shape mismatch");
  }
  auto diff = eps - eps_hat;
  return norm == LossNorm::kL1 ? diff.abs().mean() : diff.pow(2).mean();
}

double diffusion_loss(const ImageGrid& eps, const ImageGrid& eps_hat, LossNorm norm) {
  require_same_shape(eps, eps_hat, "diffusion_loss");
  return diffusion_loss(eps.tensor(), eps_hat.tensor(), norm).item<double>();
}

std::string ScheduleRecord::to_text() const {
  std::ostringstream out;
  out << "padiff-schedule " << kVersion << "\n";
  out << "num_steps " << num_steps << "\n";
  out << std::hexfloat;
  out << "beta_start " << beta_start << "\n";
  out << "beta_end " << beta_end << "\n";
  out << std::dec << "plan";
  for (int64_t s : plan) {
    out << " " << s;
  }
  out << "\n";
  return out.str();
}

ScheduleRecord ScheduleRecord::from_text(const std::string& text) {
  std::istringstream in(text);
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != "padiff-schedule") {
    throw FormatError("not a schedule record");
  }
  if (version != kVersion) {
    throw FormatError("unsupported schedule record version " + std::to_string(version));
  }
  ScheduleRecord record;
  record.plan.clear();
  std::string line;
  std::getline(in, line);
  bool seen_steps = false, seen_start = false, seen_end = false, seen_plan = false;
  while (std::getline(in, line)) {
    if (line.empty()) {
      continue;
    }
    std::istringstream fields(line);
    std::string key;
    fields >> key;
    std::string value;
    if (key == "num_steps") {
      fields >> record.num_steps;
      seen_steps = !fields.fail();
    } else if (key == "beta_start" || key == "beta_end") {
      fields >> value;
      char* end = nullptr;
      const double v = std::strtod(value.c_str(), &end);
      if (end == value.c_str()) {
        throw FormatError("bad " + key + " in schedule record");
      }
      (key == "beta_start" ? record.beta_start : record.beta_end) = v;
      (key == "beta_start" ? seen_start : seen_end) = true;
    } else if (key == "plan") {
      int64_t s = 0;
      while (fields >> s) {
        record.plan.push_back(s);
      }
      seen_plan = true;
    } else {
      throw FormatError("unknown schedule record field '" + key + "'");
    }
  }
  if (!(seen_steps && seen_start && seen_end && seen_plan)) {
    throw FormatError("incomplete schedule record");
  }
  return record;
}

}  // namespace padiff::diffusion
