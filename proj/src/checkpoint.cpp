#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "padiff/error.hpp"
#include "padiff/nn_util.hpp"
#include "padiff/train.hpp"

// Single-file binary checkpoint:
//   magic "PADIFFCK", u32 format version, config text, schedule record text, i64 iteration,
//   u8 ppg_frozen, generator state bytes, named parameters and buffers, Adam state per
//   parameter in optimizer order, trailing magic "END!".
namespace padiff::train {

namespace {

constexpr char kMagic[8] = {'P', 'A', 'D', 'I', 'F', 'F', 'C', 'K'};
constexpr char kTrailer[4] = {'E', 'N', 'D', '!'};

class Writer {
 public:
  void raw(const void* data, size_t n) { buf_.append(static_cast<const char*>(data), n); }
  template <typename T>
  void pod(T v) {
    raw(&v, sizeof(v));
  }
  void str(const std::string& s) {
    pod<uint64_t>(s.size());
    raw(s.data(), s.size());
  }
  void tensor(const torch::Tensor& t) {
    auto c = t.detach().cpu().contiguous();
    pod<int32_t>(static_cast<int32_t>(c.scalar_type()));
    pod<int32_t>(static_cast<int32_t>(c.dim()));
    for (int64_t s : c.sizes()) {
      pod<int64_t>(s);
    }
    raw(c.data_ptr(), c.nbytes());
  }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

  void raw(void* out, size_t n) {
    if (pos_ + n > data_.size()) {
      fail("truncated file");
    }
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T pod() {
    T v;
    raw(&v, sizeof(v));
    return v;
  }
  std::string str() {
    const auto n = pod<uint64_t>();
    if (n > data_.size() - pos_) {
      fail("string length exceeds file");
    }
    std::string s(data_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  torch::Tensor tensor() {
    const auto type = pod<int32_t>();
    const auto dim = pod<int32_t>();
    if (dim < 0 || dim > 8 || type < 0 ||
        type >= static_cast<int32_t>(c10::ScalarType::NumOptions)) {
      fail("corrupt tensor header");
    }
    std::vector<int64_t> sizes(dim);
    for (auto& s : sizes) {
      s = pod<int64_t>();
      if (s < 0) {
        fail("corrupt tensor size");
      }
    }
    auto t = torch::empty(sizes, torch::TensorOptions().dtype(static_cast<c10::ScalarType>(type)));
    raw(t.data_ptr(), t.nbytes());
    return t;
  }
  bool at_end() const { return pos_ == data_.size(); }
  [[noreturn]] void fail(const std::string& why) const {
    throw FormatError(path_ + ": corrupt checkpoint (" + why + ")");
  }

 private:
  std::string data_;
  std::string path_;
  size_t pos_ = 0;
};

constexpr uint32_t kFormatVersion = 1;

std::vector<std::pair<std::string, torch::Tensor>> named_state(torch::nn::Module& m) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& kv : m.named_parameters(true)) {
    out.emplace_back("param:" + kv.key(), kv.value());
  }
  for (const auto& kv : m.named_buffers(true)) {
    out.emplace_back("buffer:" + kv.key(), kv.value());
  }
  return out;
}

}  // namespace

class Checkpoint {
 public:
  static std::string serialize(const Trainer& t);
  static std::unique_ptr<Trainer> deserialize(const std::string& data, const std::string& path);
};

std::string Checkpoint::serialize(const Trainer& tr) {
  auto& trainer = const_cast<Trainer&>(tr);
  Writer w;
  w.raw(kMagic, sizeof(kMagic));
  w.pod<uint32_t>(kFormatVersion);
  w.str(trainer.config_.to_text());
  diffusion::ScheduleRecord record;
  record.num_steps = trainer.schedule_.num_steps();
  record.beta_start = trainer.schedule_.beta_start();
  record.beta_end = trainer.schedule_.beta_end();
  record.plan = trainer.plan_.steps();
  w.str(record.to_text());
  w.pod<int64_t>(trainer.iteration_);
  w.pod<uint8_t>(trainer.ppg_frozen_ ? 1 : 0);
  w.tensor(trainer.generator_.get_state());

  auto state = named_state(*trainer.model_);
  w.pod<uint64_t>(state.size());
  for (const auto& [name, value] : state) {
    w.str(name);
    w.tensor(value);
  }

  const auto& params = trainer.optimizer_->param_groups().at(0).params();
  auto& opt_state = trainer.optimizer_->state();
  w.pod<uint64_t>(params.size());
  for (const auto& p : params) {
    auto it = opt_state.find(p.unsafeGetTensorImpl());
    if (it == opt_state.end()) {
      w.pod<uint8_t>(0);
      continue;
    }
    const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
    w.pod<uint8_t>(1);
    w.pod<int64_t>(s.step());
    w.tensor(s.exp_avg());
    w.tensor(s.exp_avg_sq());
    const bool has_max = s.max_exp_avg_sq().defined();
    w.pod<uint8_t>(has_max ? 1 : 0);
    if (has_max) {
      w.tensor(s.max_exp_avg_sq());
    }
  }
  w.raw(kTrailer, sizeof(kTrailer));
  return w.bytes();
}

std::unique_ptr<Trainer> Checkpoint::deserialize(const std::string& data, const std::string& path) {
  Reader r(data, path);
  char magic[sizeof(kMagic)];
  r.raw(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(path + ": not a checkpoint file");
  }
  const auto version = r.pod<uint32_t>();
  if (version != kFormatVersion) {
    throw FormatError(path + ": checkpoint format version " + std::to_string(version) +
                      " is not supported (expected " + std::to_string(kFormatVersion) + ")");
  }
  const auto config_text = r.str();
  const auto record_text = r.str();
  const auto iteration = r.pod<int64_t>();
  const bool frozen = r.pod<uint8_t>() != 0;
  auto gen_state = r.tensor();

  std::vector<std::pair<std::string, torch::Tensor>> tensors;
  const auto n_tensors = r.pod<uint64_t>();
  for (uint64_t i = 0; i < n_tensors; ++i) {
    auto name = r.str();
    tensors.emplace_back(std::move(name), r.tensor());
  }
  struct AdamEntry {
    bool present = false;
    int64_t step = 0;
    torch::Tensor exp_avg, exp_avg_sq, max_exp_avg_sq;
  };
  std::vector<AdamEntry> adam(r.pod<uint64_t>());
  if (adam.size() > n_tensors) {
    r.fail("optimizer state larger than parameter list");
  }
  for (auto& e : adam) {
    e.present = r.pod<uint8_t>() != 0;
    if (!e.present) {
      continue;
    }
    e.step = r.pod<int64_t>();
    e.exp_avg = r.tensor();
    e.exp_avg_sq = r.tensor();
    if (r.pod<uint8_t>() != 0) {
      e.max_exp_avg_sq = r.tensor();
    }
  }
  char trailer[sizeof(kTrailer)];
  r.raw(trailer, sizeof(trailer));
  if (std::memcmp(trailer, kTrailer, sizeof(kTrailer)) != 0 || !r.at_end()) {
    r.fail("bad trailer");
  }

  // Everything is parsed; build a fresh trainer and only then fill it in.
  auto config = TrainConfig::parse(config_text);
  auto record = diffusion::ScheduleRecord::from_text(record_text);
  if (record.num_steps != config.diffusion_steps || record.beta_start != config.beta_start ||
      record.beta_end != config.beta_end || record.plan != config.skip_plan().steps()) {
    r.fail("schedule record disagrees with the stored config");
  }
  auto trainer = std::make_unique<Trainer>(config);
  auto state = named_state(*trainer->model_);
  if (state.size() != tensors.size()) {
    r.fail("parameter count mismatch");
  }
  {
    torch::NoGradGuard no_grad;
    for (size_t i = 0; i < state.size(); ++i) {
      if (state[i].first != tensors[i].first ||
          state[i].second.sizes() != tensors[i].second.sizes() ||
          state[i].second.scalar_type() != tensors[i].second.scalar_type()) {
        r.fail("tensor '" + tensors[i].first + "' does not match the model");
      }
      state[i].second.copy_(tensors[i].second);
    }
  }
  const auto& params = trainer->optimizer_->param_groups().at(0).params();
  if (adam.size() != params.size()) {
    r.fail("optimizer state size mismatch");
  }
  auto& opt_state = trainer->optimizer_->state();
  for (size_t i = 0; i < params.size(); ++i) {
    if (!adam[i].present) {
      continue;
    }
    if (adam[i].exp_avg.sizes() != params[i].sizes()) {
      r.fail("optimizer moment shape mismatch");
    }
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(adam[i].step);
    s->exp_avg(adam[i].exp_avg);
    s->exp_avg_sq(adam[i].exp_avg_sq);
    if (adam[i].max_exp_avg_sq.defined()) {
      s->max_exp_avg_sq(adam[i].max_exp_avg_sq);
    }
    opt_state[params[i].unsafeGetTensorImpl()] = std::move(s);
  }
  try {
    trainer->generator_.set_state(gen_state);
  } catch (const c10::Error&) {
    r.fail("generator state rejected");
  }
  trainer->iteration_ = iteration;
  if (frozen) {
    trainer->freeze_ppg();
  }
  return trainer;
}

void Trainer::save(const std::string& path) const {
  const auto bytes = Checkpoint::serialize(*this);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw IoError(tmp + ": cannot open for writing");
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
      throw IoError(tmp + ": write failed");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    throw IoError(path + ": " + ec.message());
  }
}

std::unique_ptr<Trainer> Trainer::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError(path + ": cannot open checkpoint");
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return Checkpoint::deserialize(ss.str(), path);
}

}  // namespace padiff::train
