#include <gtest/gtest.h>

#include "padiff/config.hpp"
#include "padiff/error.hpp"

using namespace padiff;
using namespace padiff::train;

TEST(TrainConfig, Profiles) {
  auto d = TrainConfig::desk();
  EXPECT_EQ(d.crop, 64);
  EXPECT_EQ(d.batch, 4);
  EXPECT_EQ(d.iterations, 5000);
  auto t = TrainConfig::full();
  EXPECT_EQ(t.crop, 256);
  EXPECT_EQ(t.batch, 6);
  EXPECT_EQ(t.lr, 1e-4);
  EXPECT_EQ(t.adam_beta1, 0.9);
  EXPECT_EQ(t.diffusion_steps, 2000);
  EXPECT_EQ(t.beta_start, 1e-6);
  EXPECT_EQ(t.beta_end, 1e-2);
  EXPECT_EQ(t.model.pdt.inner_channel, 48);
  EXPECT_THROW(TrainConfig::from_profile("huge"), FormatError);
}

TEST(TrainConfig, ParseOverridesAndComments) {
  auto c = TrainConfig::parse(
      "# comment\n"
      "profile = desk\n"
      "lr = 0.002   # trailing\n"
      "crop = 32\n"
      "loss_norm = l2\n"
      "condition_gradients = shared\n"
      "pdt.channel_multipliers = 1,2\n"
      "\n");
  EXPECT_EQ(c.lr, 0.002);
  EXPECT_EQ(c.crop, 32);
  EXPECT_EQ(c.model.pdt.image_size, 32);
  EXPECT_EQ(c.loss_norm, diffusion::LossNorm::kL2);
  EXPECT_EQ(c.condition_gradients, ConditionGradients::kShared);
  EXPECT_EQ(c.model.pdt.channel_multipliers, (std::vector<int64_t>{1, 2}));
}

TEST(TrainConfig, ProfileAppliedBeforeOtherKeys) {
  auto c = TrainConfig::parse("batch = 3\nprofile = full\n");
  EXPECT_EQ(c.batch, 3);
  EXPECT_EQ(c.crop, 256);
}

TEST(TrainConfig, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(TrainConfig::parse("learning_rate = 1\n"), FormatError);
  EXPECT_THROW(TrainConfig::parse("lr = fast\n"), FormatError);
  EXPECT_THROW(TrainConfig::parse("lr 0.1\n"), FormatError);
  EXPECT_THROW(TrainConfig::parse("batch = 2.5\n"), FormatError);
  EXPECT_THROW(TrainConfig::parse("loss_norm = l3\n"), FormatError);
  EXPECT_THROW(TrainConfig::parse("lr = -1\n"), DomainError);
  EXPECT_THROW(TrainConfig::parse("w_inr = -0.5\n"), DomainError);
  EXPECT_THROW(TrainConfig::load("/nonexistent/padiff.cfg"), IoError);
}

TEST(TrainConfig, TextRoundTripIsExact) {
  for (auto c : {TrainConfig::desk(), TrainConfig::full()}) {
    c.lr = 1.0 / 3.0;
    c.seed = 12345678901234ull;
    auto back = TrainConfig::parse(c.to_text());
    EXPECT_EQ(back.to_text(), c.to_text());
    EXPECT_EQ(back.lr, c.lr);
  }
}
