#include "padiff/model.hpp"

#include "padiff/error.hpp"
#include "padiff/nn_util.hpp"

namespace padiff::model {

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::full() {
  ModelConfig c;
  c.ppg = ppg::PPGConfig::full();
  c.inr = inr::INRConfig::full();
  c.pdt = pdt::PDTConfig::full();
  return c;
}

PADiffImpl::PADiffImpl(const ModelConfig& config) : config_(config) {
  config_.pdt.validate();
  ppg_ = register_module("ppg", ppg::PPGBranch(config_.ppg));
  inr_ = register_module("inr", inr::INRBranch(config_.inr));
  pdt_ = register_module("pdt", pdt::PDTDenoiser(config_.pdt));
}

Conditioning PADiffImpl::condition(const torch::Tensor& degraded, bool detach) {
  if (degraded.dim() != 4 || degraded.size(1) != 3) {
    throw ShapeError("condition: degraded batch must be [B, 3, H, W]");
  }
  Conditioning out;
  out.priors = ppg_->forward(degraded);
  auto diffusion_input = degraded * 2.0 - 1.0;
  out.inr_output = inr_->forward(diffusion_input);

  auto transmission = out.priors.transmission;
  auto background = out.priors.background;
  auto rendered = out.inr_output;
  if (detach) {
    transmission = transmission.detach();
    background = background.detach();
    rendered = rendered.detach();
  }
  out.bundle.x_c = rendered + diffusion_input;
  out.bundle.background = (background * 2.0 - 1.0).expand_as(degraded).contiguous();
  out.bundle.transmission = transmission;
  return out;
}

torch::Tensor PADiffImpl::denoise(const torch::Tensor& x_t, const pdt::ConditionBundle& cond,
                                  const torch::Tensor& t) {
  return pdt_->forward(x_t, cond, t);
}

int64_t PADiffImpl::size_multiple() const {
  return int64_t{1} << (config_.pdt.channel_multipliers.size() - 1);
}

torch::Tensor PADiffImpl::enhance(const torch::Tensor& degraded,
                                  const diffusion::DiffusionSchedule& schedule,
                                  const diffusion::SkipPlan& plan, at::Generator generator,
                                  const diffusion::SamplerOptions& options) {
  if (degraded.dim() != 4 || degraded.size(1) != 3) {
    throw ShapeError("enhance: degraded batch must be [B, 3, H, W]");
  }
  const bool was_training = is_training();
  eval();
  torch::NoGradGuard no_grad;

  const int64_t m = size_multiple();
  const int64_t h = degraded.size(2);
  const int64_t w = degraded.size(3);
  const int64_t pad_h = (m - h % m) % m;
  const int64_t pad_w = (m - w % m) % m;
  auto input = degraded;
  if (pad_h > 0 || pad_w > 0) {
    namespace F = torch::nn::functional;
    input = F::pad(degraded, F::PadFuncOptions({0, pad_w, 0, pad_h}).mode(torch::kReplicate));
  }

  auto cond = condition(input, true).bundle;
  auto x_T = torch::randn(input.sizes(), generator, input.options());
  diffusion::Denoiser fn = [&](const torch::Tensor& x_t, const torch::Tensor& t) {
    return pdt_->forward(x_t, cond, t);
  };
  auto x0 = diffusion::skip_sample(fn, x_T, plan, schedule, options, generator);
  x0 = x0.narrow(2, 0, h).narrow(3, 0, w);
  train(was_training);
  return ((x0 + 1.0) * 0.5).clamp(0.0, 1.0);
}

ParameterCounts PADiffImpl::parameter_counts() const {
  return {nn::count_parameters(*ppg_), nn::count_parameters(*inr_), nn::count_parameters(*pdt_)};
}

}  // namespace padiff::model
