#include "padiff/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

#include "padiff/error.hpp"

namespace padiff::train {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) {
    return "";
  }
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) {
    throw FormatError("config: key '" + key + "' has malformed value '" + value + "'");
  }
  return out;
}

std::vector<int64_t> parse_list(const std::string& key, const std::string& value) {
  std::vector<int64_t> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    out.push_back(parse_number<int64_t>(key, trim(item)));
  }
  if (out.empty()) {
    throw FormatError("config: key '" + key + "' needs a comma-separated list");
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string format_list(const std::vector<int64_t>& values) {
  std::string out;
  for (size_t i = 0; i < values.size(); ++i) {
    out += (i ? "," : "") + std::to_string(values[i]);
  }
  return out;
}

struct Field {
  std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename T>
Field number_field(T TrainConfig::*member) {
  return {[member](TrainConfig& c, const std::string& k, const std::string& v) {
            c.*member = parse_number<T>(k, v);
          },
          [member](const TrainConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return format_double(c.*member);
            } else {
              return std::to_string(c.*member);
            }
          }};
}

template <typename Get>
Field model_number(Get access) {
  return {[access](TrainConfig& c, const std::string& k, const std::string& v) {
            auto& ref = access(c);
            ref = parse_number<std::remove_reference_t<decltype(ref)>>(k, v);
          },
          [access](const TrainConfig& c) {
            auto& ref = access(const_cast<TrainConfig&>(c));
            if constexpr (std::is_floating_point_v<std::remove_reference_t<decltype(ref)>>) {
              return format_double(ref);
            } else {
              return std::to_string(ref);
            }
          }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    t["lr"] = number_field(&TrainConfig::lr);
    t["batch"] = number_field(&TrainConfig::batch);
    t["crop"] = number_field(&TrainConfig::crop);
    t["iterations"] = number_field(&TrainConfig::iterations);
    t["adam_beta1"] = number_field(&TrainConfig::adam_beta1);
    t["adam_beta2"] = number_field(&TrainConfig::adam_beta2);
    t["w_dm"] = number_field(&TrainConfig::w_dm);
    t["w_ppg"] = number_field(&TrainConfig::w_ppg);
    t["w_inr"] = number_field(&TrainConfig::w_inr);
    t["seed"] = number_field(&TrainConfig::seed);
    t["diffusion_steps"] = number_field(&TrainConfig::diffusion_steps);
    t["beta_start"] = number_field(&TrainConfig::beta_start);
    t["beta_end"] = number_field(&TrainConfig::beta_end);
    t["skip_steps"] = number_field(&TrainConfig::skip_steps);
    t["lambda1"] = number_field(&TrainConfig::lambda1);
    t["lambda2"] = number_field(&TrainConfig::lambda2);
    t["grad_clip"] = number_field(&TrainConfig::grad_clip);
    t["ppg_pretrain_iterations"] = number_field(&TrainConfig::ppg_pretrain_iterations);
    t["validate_every"] = number_field(&TrainConfig::validate_every);
    t["checkpoint_every"] = number_field(&TrainConfig::checkpoint_every);
    t["loss_norm"] = {[](TrainConfig& c, const std::string& k, const std::string& v) {
                        if (v == "l1") {
                          c.loss_norm = diffusion::LossNorm::kL1;
                        } else if (v == "l2") {
                          c.loss_norm = diffusion::LossNorm::kL2;
                        } else {
                          throw FormatError("config: key '" + k + "' expects l1 or l2");
                        }
                      },
                      [](const TrainConfig& c) {
                        return std::string(c.loss_norm == diffusion::LossNorm::kL1 ? "l1" : "l2");
                      }};
    t["condition_gradients"] = {
        [](TrainConfig& c, const std::string& k, const std::string& v) {
          if (v == "detached") {
            c.condition_gradients = ConditionGradients::kDetached;
          } else if (v == "shared") {
            c.condition_gradients = ConditionGradients::kShared;
          } else {
            throw FormatError("config: key '" + k + "' expects detached or shared");
          }
        },
        [](const TrainConfig& c) {
          return std::string(c.condition_gradients == ConditionGradients::kDetached ? "detached"
                                                                                     : "shared");
        }};
    t["perceptual_model"] = {
        [](TrainConfig& c, const std::string&, const std::string& v) { c.perceptual_model = v; },
        [](const TrainConfig& c) { return c.perceptual_model; }};

    t["ppg.channels"] = model_number([](TrainConfig& c) -> auto& { return c.model.ppg.channels; });
    t["ppg.num_kernels"] =
        model_number([](TrainConfig& c) -> auto& { return c.model.ppg.num_kernels; });
    t["ppg.blur_sigma"] =
        model_number([](TrainConfig& c) -> auto& { return c.model.ppg.blur_sigma; });
    t["ppg.blur_kernel"] =
        model_number([](TrainConfig& c) -> auto& { return c.model.ppg.blur_kernel; });
    t["inr.encoder_channels"] =
        model_number([](TrainConfig& c) -> auto& { return c.model.inr.encoder_channels; });
    t["inr.encoder_blocks"] =
        model_number([](TrainConfig& c) -> auto& { return c.model.inr.encoder_blocks; });
    t["inr.mlp_hidden"] =
        model_number([](TrainConfig& c) -> auto& { return c.model.inr.mlp_hidden; });
    t["inr.mlp_hidden_layers"] =
        model_number([](TrainConfig& c) -> auto& { return c.model.inr.mlp_hidden_layers; });
    t["inr.num_frequencies"] =
        model_number([](TrainConfig& c) -> auto& { return c.model.inr.num_frequencies; });
    t["pdt.inner_channel"] =
        model_number([](TrainConfig& c) -> auto& { return c.model.pdt.inner_channel; });
    t["pdt.attention_resolution"] =
        model_number([](TrainConfig& c) -> auto& { return c.model.pdt.attention_resolution; });
    t["pdt.dropout"] = model_number([](TrainConfig& c) -> auto& { return c.model.pdt.dropout; });
    t["pdt.norm_groups"] =
        model_number([](TrainConfig& c) -> auto& { return c.model.pdt.norm_groups; });
    t["pdt.ffn_expansion"] =
        model_number([](TrainConfig& c) -> auto& { return c.model.pdt.ffn_expansion; });
    t["pdt.encoder_blocks"] =
        model_number([](TrainConfig& c) -> auto& { return c.model.pdt.encoder_blocks; });
    t["pdt.decoder_blocks"] =
        model_number([](TrainConfig& c) -> auto& { return c.model.pdt.decoder_blocks; });
    t["pdt.ppu_reduction"] =
        model_number([](TrainConfig& c) -> auto& { return c.model.pdt.ppu_reduction; });
    t["pdt.channel_multipliers"] = {
        [](TrainConfig& c, const std::string& k, const std::string& v) {
          c.model.pdt.channel_multipliers = parse_list(k, v);
        },
        [](const TrainConfig& c) { return format_list(c.model.pdt.channel_multipliers); }};
    t["pdt.ffn_kernel_sizes"] = {
        [](TrainConfig& c, const std::string& k, const std::string& v) {
          c.model.pdt.ffn_kernel_sizes = parse_list(k, v);
        },
        [](const TrainConfig& c) { return format_list(c.model.pdt.ffn_kernel_sizes); }};
    return t;
  }();
  return table;
}

}  // namespace

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) {
      throw DomainError("TrainConfig: " + what);
    }
  };
  require(lr > 0.0, "lr must be positive");
  require(batch >= 1, "batch must be >= 1");
  require(crop >= 1, "crop must be >= 1");
  require(iterations >= 0, "iterations must be >= 0");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0,
          "Adam betas must lie in [0, 1)");
  require(w_dm >= 0.0 && w_ppg >= 0.0 && w_inr >= 0.0, "loss weights must be nonnegative");
  require(lambda1 >= 0.0 && lambda2 >= 0.0, "PPG lambdas must be nonnegative");
  require(skip_steps >= 1 && skip_steps <= diffusion_steps, "skip_steps must lie in [1, T]");
  require(grad_clip >= 0.0, "grad_clip must be >= 0");
  require(ppg_pretrain_iterations >= 0, "ppg_pretrain_iterations must be >= 0");
  require(validate_every >= 0 && checkpoint_every >= 0, "intervals must be >= 0");
  const int64_t multiple = int64_t{1} << (model.pdt.channel_multipliers.size() - 1);
  require(crop % multiple == 0, "crop must be a multiple of " + std::to_string(multiple));
  model.pdt.validate();
  (void)schedule();
}

diffusion::DiffusionSchedule TrainConfig::schedule() const {
  return diffusion::make_schedule(diffusion_steps, beta_start, beta_end);
}

diffusion::SkipPlan TrainConfig::skip_plan() const {
  auto sched = schedule();
  return diffusion::make_skip_plan(diffusion_steps, skip_steps,
                                   diffusion::SkipSpacing::kUniformTimestep, &sched);
}

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.model.pdt.image_size = c.crop;
  return c;
}

TrainConfig TrainConfig::full() {
  TrainConfig c;
  c.profile = "full";
  c.batch = 6;
  c.crop = 256;
  c.iterations = 1050000;
  c.model = model::ModelConfig::full();
  c.model.pdt.image_size = c.crop;
  return c;
}

TrainConfig TrainConfig::from_profile(const std::string& name) {
  if (name == "desk") {
    return desk();
  }
  if (name == "full") {
    return full();
  }
  throw FormatError("config: unknown profile '" + name + "' (expected desk or full)");
}

TrainConfig TrainConfig::parse(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::string profile = "desk";
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) {
      line.resize(hash);
    }
    line = trim(line);
    if (line.empty()) {
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (key == "profile") {
      profile = value;
    } else if (!fields().count(key)) {
      throw FormatError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    } else {
      entries.emplace_back(key, value);
    }
  }
  TrainConfig c = from_profile(profile);
  for (const auto& [key, value] : entries) {
    fields().at(key).set(c, key, value);
  }
  c.model.pdt.image_size = c.crop;
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError(path + ": cannot open config");
  }
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse(ss.str());
  } catch (const Error& e) {
    throw FormatError(path + ": " + e.what());
  }
}

std::string TrainConfig::to_text() const {
  std::string out = "profile = " + profile + "\n";
  for (const auto& [key, field] : fields()) {
    out += key + " = " + field.get(*this) + "\n";
  }
  return out;
}

}  // namespace padiff::train
