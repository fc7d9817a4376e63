#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sys/wait.h>

#include "padiff/image_io.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string output;
};

RunResult run(const std::string& args) {
  const std::string cmd = std::string(PADIFF_CLI_PATH) + " " + args + " 2>&1";
  RunResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  std::array<char, 4096> buf{};
  size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("padiff-cli-" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    out[fs::relative(e.path(), root).string()] = {std::istreambuf_iterator<char>(in), {}};
  }
  return out;
}

}  // namespace

TEST(Cli, SynthTwiceIsByteIdentical) {
  auto d = temp_dir("synth");
  for (const char* sub : {"a", "b"}) {
    auto r = run("synth " + (d / sub).string() + " --procedural 3 --resolution 16 --seed 7");
    ASSERT_EQ(r.code, 0) << r.output;
  }
  EXPECT_EQ(tree(d / "a"), tree(d / "b"));
  EXPECT_EQ(padiff::io::list_pngs(d / "a" / "degraded").size(), 3u);
}

TEST(Cli, EvalOfDirectoryAgainstItself) {
  auto d = temp_dir("eval");
  ASSERT_EQ(run("synth " + (d / "ds").string() + " --procedural 2 --resolution 16 --seed 1").code, 0);
  auto clean = (d / "ds" / "clean").string();
  auto r = run("eval " + clean + " " + clean + " --output " + (d / "report.csv").string());
  ASSERT_EQ(r.code, 0) << r.output;
  std::ifstream in(d / "report.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "name,psnr,ssim,uciqe,uiqm");
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_NE(line.find(",100,1,"), std::string::npos) << line;
  }
  EXPECT_EQ(rows, 3);
}

TEST(Cli, TrainInferEvalPipeline) {
  auto d = temp_dir("pipeline");
  ASSERT_EQ(run("synth " + (d / "ds").string() + " --procedural 2 --resolution 16 --seed 3").code, 0);
  std::ofstream(d / "tiny.cfg") << "crop = 16\nbatch = 2\niterations = 2\ndiffusion_steps = 20\n"
                                << "pdt.inner_channel = 8\npdt.channel_multipliers = 1,2\n"
                                << "pdt.norm_groups = 4\nppg.channels = 4\ninr.encoder_channels = 4\n"
                                << "inr.mlp_hidden = 8\n";
  auto t = run("train --config " + (d / "tiny.cfg").string() + " --data " + (d / "ds").string() +
               " --val " + (d / "ds").string() + " --out " + (d / "run").string());
  ASSERT_EQ(t.code, 0) << t.output;
  EXPECT_TRUE(fs::exists(d / "run" / "checkpoint.bin"));
  EXPECT_TRUE(fs::exists(d / "run" / "metrics.csv"));
  EXPECT_TRUE(fs::exists(d / "run" / "config.txt"));

  auto i = run("infer --checkpoint " + (d / "run" / "checkpoint.bin").string() + " --input " +
               (d / "ds" / "degraded").string() + " --output " + (d / "out").string() +
               " --steps 4 --dump-priors");
  ASSERT_EQ(i.code, 0) << i.output;
  EXPECT_EQ(padiff::io::list_pngs(d / "out").size(), 2u);
  EXPECT_EQ(padiff::io::list_pngs(d / "out" / "priors").size(), 6u);

  auto e = run("eval " + (d / "out").string() + " " + (d / "ds" / "clean").string());
  ASSERT_EQ(e.code, 0) << e.output;
  EXPECT_NE(e.output.find("mean,"), std::string::npos);
}

TEST(Cli, ErrorsAreOneMachineParsableLine) {
  auto d = temp_dir("errors");
  auto r = run("eval " + (d / "nope").string() + " " + (d / "nope").string());
  EXPECT_NE(r.code, 0);
  EXPECT_EQ(r.output.rfind("padiff: error: io: ", 0), 0u) << r.output;
  EXPECT_NE(r.output.find((d / "nope").string()), std::string::npos);

  std::ofstream(d / "bad.cfg") << "learnin_rate = 1\n";
  ASSERT_EQ(run("synth " + (d / "ds").string() + " --procedural 1 --resolution 16").code, 0);
  auto c = run("train --config " + (d / "bad.cfg").string() + " --data " + (d / "ds").string() +
               " --out " + (d / "run").string());
  EXPECT_NE(c.code, 0);
  EXPECT_EQ(c.output.rfind("padiff: error: format: ", 0), 0u) << c.output;
  EXPECT_NE(c.output.find("bad.cfg"), std::string::npos) << c.output;
}
