#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stmae/trainer.hpp"

using namespace stmae;

namespace {

NamedParam<double> param(std::string name, std::vector<double> values, bool decay = true) {
  const std::size_t n = values.size();
  Tensor<double> t({n}, std::move(values));
  t.set_requires_grad();
  return {std::move(name), t, decay};
}

void set_grad(const NamedParam<double>& p, const std::vector<double>& g) {
  auto buf = p.tensor.mutable_grad();
  std::copy(g.begin(), g.end(), buf.begin());
}

MaeConfig tiny_config() {
  MaeConfig c;
  c.patch = {2, 8, 1};
  c.frames = 4;
  c.height = c.width = 16;
  c.d_enc = 16;
  c.depth_enc = 1;
  c.heads_enc = 2;
  c.d_dec = 8;
  c.depth_dec = 1;
  c.heads_dec = 1;
  c.mask_ratio = 0.75;
  return c;
}

ClipDataset synthetic_set(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<VideoClip> clips;
  std::vector<int> labels;
  for (std::size_t i = 0; i < n; ++i) {
    auto s = generate_synthetic(SyntheticKind::moving_gradient, 4, 16, 16, 1, rng);
    clips.push_back(std::move(s.clip));
    labels.push_back(s.label);
  }
  return ClipDataset::in_memory(std::move(clips), std::move(labels));
}

SampleOptions tiny_sampling() {
  SampleOptions s;
  s.num_frames = 4;
  s.stride = 1;
  s.augment.out_h = s.augment.out_w = 16;
  s.augment.hflip_prob = 0.0;
  return s;
}

RunConfig tiny_run() {
  RunConfig r;
  r.epochs = 2;
  r.warmup_epochs = 1;
  r.batch_size = 4;
  r.repeat_factor = 2;
  r.base_lr = 1e-3;
  r.seed = 5;
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

TEST(AdamW, PureDecayStep) {
  const std::vector<NamedParam<double>> ps{param("w", {1.0})};
  OptimState<double> st;
  adamw_step(ps, st, 0.1);
  EXPECT_NEAR(ps[0].tensor[0], 0.995, 1e-15);
  EXPECT_EQ(st.step, 1u);
}

TEST(AdamW, ConstantGradientMovesByLearningRate) {
  const std::vector<NamedParam<double>> ps{param("w", {0.5, -0.5})};
  OptimState<double> st;
  st.hp.weight_decay = 0.0;
  set_grad(ps[0], {2.0, -3.0});
  adamw_step(ps, st, 0.01);
  EXPECT_NEAR(ps[0].tensor[0], 0.49, 1e-9);
  EXPECT_NEAR(ps[0].tensor[1], -0.49, 1e-9);
}

TEST(AdamW, ExcludedParametersAreNotDecayed) {
  const std::vector<NamedParam<double>> ps{param("w", {1.0}), param("b", {1.0}, false)};
  OptimState<double> st;
  adamw_step(ps, st, 0.1);
  EXPECT_NEAR(ps[0].tensor[0], 0.995, 1e-15);
  EXPECT_EQ(ps[1].tensor[0], 1.0);
}

TEST(AdamW, IdenticalCallsGiveIdenticalResults) {
  auto run = [] {
    const std::vector<NamedParam<double>> ps{param("w", {0.3, 0.7, -1.2})};
    OptimState<double> st;
    for (int k = 0; k < 5; ++k) {
      set_grad(ps[0], {0.1 * k, -0.2, 0.05});
      adamw_step(ps, st, 1e-2);
    }
    return std::vector<double>(ps[0].tensor.data().begin(), ps[0].tensor.data().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(AdamW, NonFiniteGradientNamesParameter) {
  const std::vector<NamedParam<double>> ps{param("encoder.blocks.0.mlp.fc1.weight", {1.0})};
  set_grad(ps[0], {std::nan("")});
  OptimState<double> st;
  try {
    adamw_step(ps, st, 0.1);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("encoder.blocks.0.mlp.fc1.weight"), std::string::npos);
  }
  EXPECT_EQ(ps[0].tensor[0], 1.0);
}

TEST(Schedule, WarmupThenHalfCosine) {
  const LrSchedule s{1.0, 10, 110};
  EXPECT_EQ(lr_at(s, 0), 0.0);
  EXPECT_NEAR(lr_at(s, 5), 0.5, 1e-15);
  EXPECT_EQ(lr_at(s, 10), 1.0);
  EXPECT_NEAR(lr_at(s, 60), 0.5, 1e-15);
  EXPECT_NEAR(lr_at(s, 110), 0.0, 1e-15);
  for (std::size_t k = 11; k <= 110; ++k) EXPECT_LE(lr_at(s, k), lr_at(s, k - 1));
}

TEST(Schedule, StepsFromEffectiveEpochs) {
  RunConfig r;
  r.epochs = 10;
  r.warmup_epochs = 2;
  r.batch_size = 8;
  EXPECT_EQ(total_steps(r, 64), 80u);
  const auto s = make_schedule(r, 64);
  EXPECT_EQ(s.warmup_steps, 16u);
  EXPECT_EQ(s.total_steps, 80u);
  r.warmup_epochs = 10;
  EXPECT_THROW(r.validate(), ConfigError);
}

TEST(Clip, ScalesToThreshold) {
  const std::vector<NamedParam<double>> ps{param("g", {0.0, 0.0})};
  set_grad(ps[0], {3.0, 4.0});
  EXPECT_DOUBLE_EQ(clip_gradients(ps, 1.0), 5.0);
  EXPECT_NEAR(ps[0].tensor.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(ps[0].tensor.grad()[1], 0.8, 1e-15);
  set_grad(ps[0], {0.3, 0.4});
  clip_gradients(ps, 1.0);
  EXPECT_EQ(ps[0].tensor.grad()[0], 0.3);
  EXPECT_EQ(ps[0].tensor.grad()[1], 0.4);
  EXPECT_THROW(clip_gradients(ps, 0.0), ConfigError);
}

TEST(Clip, GlobalNormBoundedForRandomInputs) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<NamedParam<double>> ps;
    for (int k = 0; k < 3; ++k) {
      std::vector<double> g(5);
      for (auto& v : g) v = rng.uniform(-10, 10);
      ps.push_back(param("p" + std::to_string(k), std::vector<double>(5, 0.0)));
      set_grad(ps.back(), g);
    }
    clip_gradients(ps, 0.02);
    EXPECT_LE(global_grad_norm(ps), 0.02 + 1e-7);
  }
}

TEST(Model, DecayExclusionList) {
  const MaeModel<float> m(tiny_config(), 0);
  for (const auto& p : m.parameters()) {
    const bool no_decay = p.name.find("bias") != std::string::npos || p.name.find("norm") != std::string::npos ||
                          p.name.find("pos_") != std::string::npos || p.name == "decoder.mask_token";
    EXPECT_EQ(p.decay, !no_decay) << p.name;
  }
}

TEST(Pretrain, SameSeedGivesIdenticalMetricsAndCheckpoint) {
  const auto data = synthetic_set(8, 1);
  const auto dir = std::filesystem::temp_directory_path() / "stmae_test_pretrain";
  std::filesystem::remove_all(dir);
  PretrainOptions opt;
  opt.sampling = tiny_sampling();
  opt.out_dir = dir / "a";
  pretrain(data, tiny_config(), tiny_run(), opt);
  opt.out_dir = dir / "b";
  pretrain(data, tiny_config(), tiny_run(), opt);
  const std::string a = slurp(dir / "a" / "metrics.csv");
  EXPECT_EQ(a, slurp(dir / "b" / "metrics.csv"));
  EXPECT_EQ(a.rfind("step,epoch,lr,loss,tokens_per_sec,wall_ms\n", 0), 0u);
  EXPECT_EQ(slurp(dir / "a" / "final.ckpt"), slurp(dir / "b" / "final.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "a" / "timing.csv"));
}

TEST(Pretrain, EpochsCountedIndependentOfRepeatFactor) {
  const auto data = synthetic_set(8, 2);
  PretrainOptions opt;
  opt.sampling = tiny_sampling();
  for (std::size_t r : {1u, 2u, 4u}) {
    RunConfig run = tiny_run();
    run.repeat_factor = r;
    const auto res = pretrain(data, tiny_config(), run, opt);
    EXPECT_EQ(res.samples, 16u) << r;
    EXPECT_EQ(res.decodes, 16u / r) << r;
    EXPECT_EQ(res.steps, 4u);
    EXPECT_DOUBLE_EQ(res.log.back().epoch, 2.0);
    for (const auto& row : res.log) EXPECT_TRUE(std::isfinite(row.loss));
  }
}

TEST(Finetune, CosineMaskScheduleSetsTokenCounts) {
  const auto data = synthetic_set(8, 3);
  RunConfig run = tiny_run();
  run.repeat_factor = 1;
  run.epochs = 3;
  FinetuneOptions opt;
  opt.sampling = tiny_sampling();
  MaskSchedule sched{0.5, 0.0, 1, ScheduleShape::cosine};
  const auto res = finetune(data, data, tiny_config(), nullptr, run, sched, opt);
  const TokenGrid g = tiny_config().grid();
  sched.total_steps = res.tokens_per_sample.size();
  ASSERT_EQ(res.tokens_per_sample.size(), 6u);
  EXPECT_EQ(res.tokens_per_sample.front(), 4u);
  for (std::size_t s = 0; s < res.tokens_per_sample.size(); ++s) {
    const double r = ratio_at(sched, s);
    EXPECT_EQ(res.ratio_per_step[s], r);
    EXPECT_EQ(res.tokens_per_sample[s], r > 0.0 ? detail::kept_count(g.tokens(), r) : g.tokens());
  }
}

TEST(Finetune, PretrainedEncoderIsLoadedAndLabelsChecked) {
  const auto data = synthetic_set(8, 4);
  PretrainOptions popt;
  popt.sampling = tiny_sampling();
  const auto pre = pretrain(data, tiny_config(), tiny_run(), popt);
  const Checkpoint ck = model_checkpoint(pre.model);
  RunConfig run = tiny_run();
  run.repeat_factor = 1;
  run.epochs = 2;
  run.base_lr = 1e-12;  // effectively frozen
  FinetuneOptions opt;
  opt.sampling = tiny_sampling();
  const auto res = finetune(data, data, tiny_config(), &ck, run, {0, 0, 1, ScheduleShape::constant}, opt);
  const auto a = pre.model.patch_embed(), b = res.model.patch_embed();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
  std::vector<VideoClip> clips{data.load(0)};
  EXPECT_THROW(finetune(ClipDataset::in_memory(clips, {9}), data, tiny_config(), nullptr, run,
                        {0, 0, 1, ScheduleShape::constant}, opt),
               ConfigError);
  EXPECT_THROW(finetune(ClipDataset::in_memory(clips), data, tiny_config(), nullptr, run,
                        {0, 0, 1, ScheduleShape::constant}, opt),
               ContractError);
}
