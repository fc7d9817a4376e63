#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "padiff/error.hpp"
#include "padiff/physics.hpp"
#include "padiff/train.hpp"
#include "support.hpp"

using namespace padiff;
using namespace padiff::train;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config(uint64_t seed = 3) {
  auto c = TrainConfig::desk();
  c.crop = 16;
  c.batch = 2;
  c.iterations = 4;
  c.seed = seed;
  c.diffusion_steps = 50;
  c.beta_start = 1e-4;
  c.beta_end = 2e-2;
  c.skip_steps = 4;
  c.model.ppg.channels = 4;
  c.model.inr.encoder_channels = 4;
  c.model.inr.mlp_hidden = 8;
  c.model.inr.num_frequencies = 2;
  c.model.pdt.inner_channel = 8;
  c.model.pdt.channel_multipliers = {1, 2};
  c.model.pdt.norm_groups = 4;
  c.model.pdt.image_size = 16;
  c.model.pdt.attention_resolution = 8;
  c.model.pdt.dropout = 0.2;
  return c;
}

PairDataset tiny_data(int n = 3, int64_t size = 20) {
  PairDataset d;
  for (int i = 0; i < n; ++i) {
    auto clean = physics::procedural_scene(size, size, 10 + i);
    physics::SynthParams p;
    p.seed = 20 + i;
    d.add("img" + std::to_string(i), physics::synth_pair(clean, p).degraded, clean);
  }
  return d;
}

std::map<std::string, torch::Tensor> snapshot(torch::nn::Module& m) {
  std::map<std::string, torch::Tensor> out;
  for (const auto& item : m.named_parameters()) out[item.key()] = item.value().detach().clone();
  return out;
}

bool same_params(torch::nn::Module& m, const std::map<std::string, torch::Tensor>& snap) {
  for (const auto& item : m.named_parameters()) {
    if (!torch::equal(item.value(), snap.at(item.key()))) return false;
  }
  return true;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("padiff-test-" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(Trainer, IdenticalSeedsGiveIdenticalTrajectories) {
  auto data = tiny_data();
  Trainer a(tiny_config()), b(tiny_config());
  for (int64_t i = 0; i < 10; ++i) {
    auto la = a.train_step(a.make_batch(data, i));
    auto lb = b.train_step(b.make_batch(data, i));
    EXPECT_EQ(la.dm, lb.dm);
    EXPECT_EQ(la.ppg, lb.ppg);
    EXPECT_EQ(la.inr, lb.inr);
  }
}

TEST(Trainer, LossComponentsFiniteAndNonnegative) {
  auto data = tiny_data();
  Trainer t(tiny_config());
  for (int64_t i = 0; i < 5; ++i) {
    auto l = t.train_step(t.make_batch(data, i));
    for (double v : {l.dm, l.ppg, l.inr, l.total}) {
      EXPECT_TRUE(std::isfinite(v));
      EXPECT_GE(v, 0.0);
    }
  }
}

TEST(Trainer, ZeroWeightBranchesDoNotMove) {
  auto cfg = tiny_config();
  cfg.w_ppg = 0.0;
  cfg.w_inr = 0.0;
  Trainer t(cfg);
  auto ppg0 = snapshot(*t.model()->ppg());
  auto inr0 = snapshot(*t.model()->inr());
  auto pdt0 = snapshot(*t.model()->pdt());
  t.train_step(t.make_batch(tiny_data(), 0));
  EXPECT_TRUE(same_params(*t.model()->ppg(), ppg0));
  EXPECT_TRUE(same_params(*t.model()->inr(), inr0));
  EXPECT_FALSE(same_params(*t.model()->pdt(), pdt0));
}

TEST(Trainer, FrozenPPGStaysBitIdentical) {
  auto cfg = tiny_config();
  cfg.ppg_pretrain_iterations = 2;
  Trainer t(cfg);
  auto data = tiny_data();
  auto inr0 = snapshot(*t.model()->inr());
  auto ppg0 = snapshot(*t.model()->ppg());
  t.train_step(t.make_batch(data, 0));
  t.train_step(t.make_batch(data, 1));
  EXPECT_TRUE(same_params(*t.model()->inr(), inr0));
  EXPECT_FALSE(same_params(*t.model()->ppg(), ppg0));
  auto ppg_trained = snapshot(*t.model()->ppg());
  for (int64_t i = 2; i < 6; ++i) t.train_step(t.make_batch(data, i));
  EXPECT_TRUE(t.ppg_frozen());
  EXPECT_TRUE(same_params(*t.model()->ppg(), ppg_trained));
  EXPECT_FALSE(same_params(*t.model()->inr(), inr0));
}

TEST(Trainer, GradientClippingNeverIncreasesNorm) {
  auto data = tiny_data();
  auto clipped_cfg = tiny_config();
  clipped_cfg.grad_clip = 0.05;
  Trainer clipped(clipped_cfg);
  for (int64_t i = 0; i < 3; ++i) {
    clipped.train_step(clipped.make_batch(data, i));
    double sq = 0.0;
    for (const auto& p : clipped.model()->parameters()) {
      if (p.grad().defined()) sq += p.grad().pow(2).sum().item<double>();
    }
    EXPECT_LE(std::sqrt(sq), std::min(clipped.last_grad_norm(), 0.05) * (1 + 1e-5));
  }
}

TEST(Trainer, InvalidBatchRejected) {
  Trainer t(tiny_config());
  Batch bad{torch::rand({2, 3, 16, 16}), torch::rand({2, 3, 8, 8})};
  EXPECT_THROW(t.train_step(bad), ShapeError);
  Batch gray{torch::rand({2, 1, 16, 16}), torch::rand({2, 1, 16, 16})};
  EXPECT_THROW(t.train_step(gray), ShapeError);
}

TEST(Trainer, BatchesDeterministicAndCropped) {
  Trainer t(tiny_config());
  auto data = tiny_data();
  auto a = t.make_batch(data, 7), b = t.make_batch(data, 7);
  EXPECT_TRUE(torch::equal(a.degraded, b.degraded));
  EXPECT_EQ(a.clean.sizes(), (std::vector<int64_t>{2, 3, 16, 16}));
  EXPECT_THROW(t.make_batch(PairDataset{}, 0), DomainError);
}

TEST(Checkpoint, RoundTripIsByteIdenticalAndParameterExact) {
  auto dir = temp_dir("ckpt");
  auto data = tiny_data();
  Trainer t(tiny_config());
  for (int64_t i = 0; i < 3; ++i) t.train_step(t.make_batch(data, i));
  t.save((dir / "a.bin").string());
  auto loaded = Trainer::load((dir / "a.bin").string());
  loaded->save((dir / "b.bin").string());
  EXPECT_EQ(read_bytes(dir / "a.bin"), read_bytes(dir / "b.bin"));
  EXPECT_EQ(loaded->iteration(), 3);
  auto orig = snapshot(*t.model());
  EXPECT_TRUE(same_params(*loaded->model(), orig));

  auto gen_a = at::make_generator<at::CPUGeneratorImpl>(5);
  auto gen_b = at::make_generator<at::CPUGeneratorImpl>(5);
  auto img = data.degraded[0].batched();
  EXPECT_TRUE(torch::equal(t.model()->enhance(img, t.schedule(), t.skip_plan(), gen_a),
                           loaded->model()->enhance(img, loaded->schedule(), loaded->skip_plan(), gen_b)));
}

TEST(Checkpoint, VersionMismatchAndCorruptionRefused) {
  auto dir = temp_dir("ckpt-bad");
  Trainer t(tiny_config());
  t.save((dir / "ok.bin").string());
  auto bytes = read_bytes(dir / "ok.bin");
  auto bumped = bytes;
  bumped[8] = static_cast<char>(bumped[8] + 1);
  std::ofstream(dir / "bumped.bin", std::ios::binary) << bumped;
  EXPECT_THROW(Trainer::load((dir / "bumped.bin").string()), FormatError);
  std::ofstream(dir / "short.bin", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  EXPECT_THROW(Trainer::load((dir / "short.bin").string()), FormatError);
  EXPECT_THROW(Trainer::load((dir / "missing.bin").string()), IoError);
}

TEST(Fit, ZeroIterationsLeavesInitialState) {
  auto cfg = tiny_config();
  cfg.iterations = 0;
  Trainer t(cfg);
  auto before = snapshot(*t.model());
  auto log = fit(t, tiny_data());
  EXPECT_TRUE(log.empty());
  EXPECT_EQ(t.iteration(), 0);
  EXPECT_TRUE(same_params(*t.model(), before));
}

TEST(Fit, EmptyDatasetRejected) {
  Trainer t(tiny_config());
  EXPECT_THROW(fit(t, PairDataset{}), DomainError);
}

TEST(Fit, ResumeMatchesUninterruptedRun) {
  auto dir = temp_dir("resume");
  auto data = tiny_data();
  auto cfg = tiny_config();
  cfg.iterations = 6;
  Trainer straight(cfg);
  auto full = fit(straight, data);

  Trainer first(cfg);
  FitOptions stop;
  stop.stop_at = 3;
  stop.checkpoint_path = (dir / "mid.bin").string();
  fit(first, data, stop);
  auto resumed = Trainer::load((dir / "mid.bin").string());
  auto rest = fit(*resumed, data);
  ASSERT_EQ(rest.size(), 3u);
  EXPECT_EQ(rest.back().dm, full.back().dm);
  EXPECT_EQ(rest.back().ppg, full.back().ppg);
  EXPECT_EQ(rest.back().inr, full.back().inr);
  EXPECT_TRUE(same_params(*resumed->model(), snapshot(*straight.model())));
}

TEST(Fit, WritesMetricsLogAndCheckpoints) {
  auto dir = temp_dir("fitlog");
  auto data = tiny_data();
  auto cfg = tiny_config();
  cfg.iterations = 4;
  cfg.validate_every = 2;
  cfg.checkpoint_every = 2;
  Trainer t(cfg);
  FitOptions o;
  o.log_path = (dir / "metrics.csv").string();
  o.checkpoint_path = (dir / "ckpt.bin").string();
  o.validation = &data;
  auto log = fit(t, data, o);
  ASSERT_EQ(log.size(), 4u);
  EXPECT_FALSE(log[0].val_psnr.has_value());
  EXPECT_TRUE(log[1].val_psnr.has_value());
  std::ifstream in(dir / "metrics.csv");
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "iteration,L_dm,L_ppg,L_inr,val_psnr");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  EXPECT_EQ(rows, 4);
  EXPECT_EQ(Trainer::load(o.checkpoint_path)->iteration(), 4);
}

TEST(Fit, UnwritableCheckpointSurfacesError) {
  Trainer t(tiny_config());
  FitOptions o;
  o.checkpoint_path = "/proc/padiff-no-such-dir/ckpt.bin";
  EXPECT_THROW(fit(t, tiny_data(), o), IoError);
}

TEST(Dataset, LoadsPairsFromDirectory) {
  auto dir = temp_dir("dataset");
  EXPECT_THROW(PairDataset::load((dir / "nothing").string()), IoError);
}
