#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "moss/checkpoint.hpp"
#include "moss/errors.hpp"
#include "moss/train.hpp"

using namespace moss;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model(std::vector<int> orders = {1}) {
  ModelConfig m;
  m.moss.orders = std::move(orders);
  m.moss.windows = {WindowSpec{3, 3, 3}};
  m.moss.D = 4;
  m.moss.C = 4;
  m.moss.blocks = 1;
  return m;
}

struct TinyData {
  PatchEmbed embed = PatchEmbed::make(4, 5);
  LabeledFeatures<float> train, test;
  TinyData() {
    MotionSpec spec;
    spec.canvas = 16;
    spec.orbit_min = 2.0;
    spec.orbit_max = 3.0;
    spec.radius_min = spec.radius_max = 1;
    spec.speed_max = 1.5;
    spec.frames = 4;
    train = embed_clips<float>(gen_motion_dataset(6, 1, spec), embed);
    test = embed_clips<float>(gen_motion_dataset(3, 2, spec), embed);
  }
};

TrainConfig quick_train(std::size_t iters = 6) {
  TrainConfig c;
  c.iters = iters;
  c.batch = 4;
  c.eval_every = 3;
  return c;
}

fs::path temp_path(const std::string& name) { return fs::temp_directory_path() / ("moss_test_" + name); }

}  // namespace

TEST(CrossEntropy, UniformLogits) {
  const auto r = cross_entropy_smoothed({0.3, 0.3, 0.3, 0.3}, 2, 0.0);
  EXPECT_NEAR(r.loss, std::log(4.0), 1e-12);
  EXPECT_NEAR(r.dlogits[2], 0.25 - 1.0, 1e-12);
}

TEST(CrossEntropy, ConfidentPrediction) {
  EXPECT_LT(cross_entropy_smoothed({60.0, 0.0, 0.0, 0.0}, 0, 0.0).loss, 1e-20);
}

TEST(CrossEntropy, SmoothedTarget) {
  // The smoothed target is (1 - s) on the label plus s / K everywhere.
  const auto r = cross_entropy_smoothed({0.0, 0.0, 0.0, 0.0}, 1, 0.1);
  EXPECT_NEAR(r.dlogits[1], 0.25 - (0.9 + 0.025), 1e-12);
  EXPECT_NEAR(r.dlogits[0], 0.25 - 0.025, 1e-12);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  for (int c = 0; c < 20; ++c) {
    std::vector<double> z(4);
    for (auto& v : z) v = 4 * uniform01(rng) - 2;
    const int label = static_cast<int>(uniform_index(rng, 4));
    const auto r = cross_entropy_smoothed(z, label, 0.1);
    for (std::size_t k = 0; k < 4; ++k) {
      auto zp = z, zm = z;
      zp[k] += 1e-6;
      zm[k] -= 1e-6;
      const double n =
          (cross_entropy_smoothed(zp, label, 0.1).loss - cross_entropy_smoothed(zm, label, 0.1).loss) / 2e-6;
      EXPECT_NEAR(r.dlogits[k], n, 1e-6);
    }
  }
}

TEST(CrossEntropy, Errors) {
  EXPECT_THROW(cross_entropy_smoothed({0, 0, 0, 0}, 4, 0.0), InputError);
  EXPECT_THROW(cross_entropy_smoothed({0, 0, 0, 0}, -1, 0.0), InputError);
  EXPECT_THROW(cross_entropy_smoothed({0, 0, 0, 0}, 0, 1.0), ConfigError);
}

TEST(AdamW, ZeroGradientNoDecayIsStationary) {
  ParamStore<double> p;
  p.add("w", Tensor<double>({3}, {1, -2, 3}));
  AdamState<double> s;
  TrainConfig c;
  c.weight_decay = 0.0;
  for (std::size_t t = 1; t <= 5; ++t) adamw_step(p, s, t, 0.1, c);
  EXPECT_EQ(p.value("w"), (Tensor<double>({3}, {1, -2, 3})));
}

TEST(AdamW, FirstStepHandEvaluated) {
  ParamStore<double> p;
  p.add("w", Tensor<double>({1}, {1.0}));
  p.grad("w")[0] = 1.0;
  AdamState<double> s;
  TrainConfig c;
  c.weight_decay = 0.0;
  adamw_step(p, s, 1, 0.1, c);
  // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
  EXPECT_NEAR(p.value("w")[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-12);
  EXPECT_NEAR(p.value("w")[0], 0.9, 1e-6);
}

TEST(AdamW, PureDecay) {
  ParamStore<double> p;
  p.add("w", Tensor<double>({1}, {1.0}));
  AdamState<double> s;
  TrainConfig c;
  c.weight_decay = 0.01;
  adamw_step(p, s, 1, 0.1, c);
  EXPECT_NEAR(p.value("w")[0], 0.999, 1e-15);
}

TEST(AdamW, SkipsFrozenEntries) {
  ParamStore<double> p;
  p.add("stat", Tensor<double>({1}, {2.0}), false);
  p.grad("stat")[0] = 5.0;
  AdamState<double> s;
  adamw_step(p, s, 1, 0.1, TrainConfig{});
  EXPECT_EQ(p.value("stat")[0], 2.0);
}

TEST(AdamW, NanGradientNamesParameterAndStep) {
  ParamStore<double> p;
  p.add("enc1.spatial_fc.w", Tensor<double>({2}, {1.0, 1.0}));
  p.grad("enc1.spatial_fc.w")[1] = std::numeric_limits<double>::quiet_NaN();
  AdamState<double> s;
  try {
    adamw_step(p, s, 7, 0.1, TrainConfig{});
    FAIL();
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("enc1.spatial_fc.w"), std::string::npos) << msg;
    EXPECT_NE(msg.find('7'), std::string::npos) << msg;
  }
}

TEST(AdamW, ConvergesOnQuadratic) {
  // f(w) = 0.5 * sum a_i (w_i - c_i)^2
  const std::vector<double> a{1.0, 4.0, 0.5}, target{0.3, -1.2, 2.0};
  ParamStore<double> p;
  p.add("w", Tensor<double>({3}));
  AdamState<double> s;
  TrainConfig c;
  c.weight_decay = 0.0;
  std::size_t steps = 0;
  for (; steps < 2000; ++steps) {
    double err = 0;
    for (std::size_t i = 0; i < 3; ++i) err = std::max(err, std::abs(p.value("w")[i] - target[i]));
    if (err <= 1e-4) break;
    for (std::size_t i = 0; i < 3; ++i) p.grad("w")[i] = a[i] * (p.value("w")[i] - target[i]);
    adamw_step(p, s, steps + 1, 0.1 * std::pow(0.995, double(steps)), c);
  }
  EXPECT_LT(steps, 2000u);
}

TEST(Schedule, WarmupAndCosine) {
  TrainConfig c;
  c.iters = 300;
  c.lr = 1e-3;
  const std::size_t w = c.warmup_iters();
  EXPECT_EQ(w, 30u);
  EXPECT_EQ(lr_at(0, c), 0.0);
  EXPECT_EQ(lr_at(w, c), c.lr);
  EXPECT_NEAR(lr_at(w + (c.iters - w) / 2, c), 0.5 * c.lr, 1e-9);
  EXPECT_LE(lr_at(c.iters - 1, c), c.lr * 1e-3);
  for (std::size_t i = 0; i < c.iters; ++i) EXPECT_GE(lr_at(i, c), 0.0);
  for (std::size_t i = 1; i <= w; ++i) EXPECT_GT(lr_at(i, c), lr_at(i - 1, c));
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.warmup_frac = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lr = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.iters = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.label_smoothing = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.seed = 12;
  c.iters = 77;
  c.recalibrate_bn = false;
  EXPECT_EQ(nlohmann::json(nlohmann::json(c).get<TrainConfig>()), nlohmann::json(c));
}

TEST(Classifier, FourLogits) {
  const auto cfg = tiny_model();
  const auto p = init_classifier<float>(cfg, 1);
  Classifier<float> model(cfg);
  Rng rng(2);
  const FeatureMap<float> f(uniform_tensor<float>({3, 4, 4, 4}, rng));
  EXPECT_EQ(model.forward(f, p, Mode::eval).shape(), (Shape{4}));
  auto base = cfg;
  base.branches = false;
  const auto q = init_classifier<float>(base, 1);
  EXPECT_FALSE(q.contains("enc1.spatial_fc.w"));
  EXPECT_TRUE(q.contains("head.w"));
  Classifier<float> linear(base);
  EXPECT_EQ(linear.forward(f, q, Mode::eval).shape(), (Shape{4}));
}

TEST(Recalibration, AveragesPerClipStatistics) {
  const auto cfg = tiny_model({1, 2});
  const auto p = init_classifier<double>(cfg, 9);
  Rng rng(10);
  LabeledFeatures<double> data;
  for (int i = 0; i < 5; ++i) {
    data.x.emplace_back(uniform_tensor<double>({3, 4, 4, 4}, rng));
    data.y.push_back(i % 4);
  }
  // Momentum 1 overwrites the running stats with one clip's statistics.
  std::map<std::string, Tensor<double>> sum;
  for (const auto& x : data.x) {
    auto q = p;
    Classifier<double> model(cfg);
    model.forward(x, q, Mode::train);
    model.commit_running_stats(q, 1.0);
    for (const auto& [name, e] : q) {
      if (!name.ends_with(".rmean") && !name.ends_with(".rvar")) continue;
      auto& acc = sum.try_emplace(name, Tensor<double>(e.value.shape())).first->second;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += e.value[i] / 5.0;
    }
  }
  ASSERT_FALSE(sum.empty());
  auto a = p, b = p;
  recalibrate_running_stats(cfg, a, data);
  recalibrate_running_stats(cfg, b, data, Exec{3});
  EXPECT_TRUE(a == b);
  for (const auto& [name, expected] : sum) EXPECT_LE(max_abs_diff(a.value(name), expected), 1e-12) << name;
}

TEST(TrainLoop, ZeroLrFreezesParameters) {
  TinyData d;
  const auto cfg = tiny_model();
  auto p = init_classifier<float>(cfg, 3);
  const auto before = p;
  auto tc = quick_train();
  tc.lr = 0.0;
  tc.weight_decay = 0.0;
  train_loop(cfg, p, d.train, d.test, tc);
  for (const auto& [name, e] : p) {
    if (e.trainable) EXPECT_EQ(e.value, before.value(name)) << name;
  }
}

TEST(TrainLoop, DeterministicAndThreadIndependent) {
  TinyData d;
  const auto cfg = tiny_model({1, 2});
  auto tc = quick_train();
  tc.reverse_augment = true;
  auto p1 = init_classifier<float>(cfg, 4), p2 = p1, p3 = p1;
  const auto r1 = train_loop(cfg, p1, d.train, d.test, tc);
  const auto r2 = train_loop(cfg, p2, d.train, d.test, tc);
  const auto r3 = train_loop(cfg, p3, d.train, d.test, tc, Exec{3});
  EXPECT_EQ(r1.losses, r2.losses);
  EXPECT_EQ(r1.losses, r3.losses);
  EXPECT_TRUE(p1 == p2);
  EXPECT_TRUE(p1 == p3);
}

TEST(TrainLoop, MetricsStream) {
  TinyData d;
  const auto cfg = tiny_model();
  auto p = init_classifier<float>(cfg, 5);
  std::ostringstream os;
  TrainOptions opts;
  opts.metrics = &os;
  train_loop(cfg, p, d.train, d.test, quick_train(), {}, opts);
  std::istringstream is(os.str());
  std::string line;
  std::size_t n = 0, evals = 0;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("iter"), n);
    EXPECT_TRUE(j.contains("loss"));
    EXPECT_TRUE(j.contains("lr"));
    evals += j.contains("eval_acc");
    ++n;
  }
  EXPECT_EQ(n, 6u);
  EXPECT_EQ(evals, 2u);
}

TEST(TrainLoop, NonFiniteLossKeepsLastGoodCheckpoint) {
  TinyData d;
  const auto cfg = tiny_model();
  auto p = init_classifier<float>(cfg, 6);
  const auto before = p;
  auto bad = d.train;
  for (auto& f : bad.x) f.tensor()[0] = std::numeric_limits<float>::quiet_NaN();
  const auto path = temp_path("nan.ckpt");
  fs::remove(path);
  TrainOptions opts;
  opts.checkpoint = path;
  EXPECT_THROW(train_loop(cfg, p, bad, d.test, quick_train(), {}, opts), NumericError);
  EXPECT_TRUE(p == before);
  ASSERT_TRUE(fs::exists(path));
  EXPECT_TRUE(load_checkpoint<float>(path).params == before);
  fs::remove(path);
}

TEST(TrainLoop, LossDecreases) {
  const auto embed = PatchEmbed::make(8, 5);
  const auto train = embed_clips<float>(gen_motion_dataset(20, 1), embed);
  ModelConfig cfg;
  cfg.moss.orders = {1};
  cfg.moss.windows = {WindowSpec{3, 5, 5}};
  cfg.moss.D = 8;
  cfg.moss.C = 8;
  cfg.moss.blocks = 1;
  TrainConfig tc;
  tc.batch = 8;
  tc.lr = 3e-3;
  auto p = init_classifier<float>(cfg, 7);
  auto r = train_loop(cfg, p, train, {}, tc);
  auto median = [](std::vector<double> v) {
    std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
    return v[v.size() / 2];
  };
  const double early = median({r.losses.begin(), r.losses.begin() + 50});
  const double late = median({r.losses.begin() + 250, r.losses.end()});
  EXPECT_LT(late, early);
}

TEST(Checkpoint, RoundTripReproducesEvaluation) {
  TinyData d;
  const auto cfg = tiny_model({1, 2});
  auto p = init_classifier<float>(cfg, 8);
  const auto path = temp_path("roundtrip.ckpt");
  TrainOptions opts;
  opts.checkpoint = path;
  opts.embed = &d.embed;
  const auto r = train_loop(cfg, p, d.train, d.test, quick_train(), {}, opts);
  const auto ck = load_checkpoint<float>(path);
  EXPECT_TRUE(ck.params == p);
  EXPECT_EQ(nlohmann::json(ck.model), nlohmann::json(cfg));
  EXPECT_EQ(nlohmann::json(ck.train), nlohmann::json(quick_train()));
  ASSERT_TRUE(ck.embed.has_value());
  EXPECT_EQ(ck.embed->weight, d.embed.weight);
  EXPECT_EQ(ck.embed->bias, d.embed.bias);
  const auto again = evaluate(ck.model, ck.params, embed_clips<float>(gen_motion_dataset(3, 2, [] {
                                                                         MotionSpec s;
                                                                         s.canvas = 16;
                                                                         s.orbit_min = 2.0;
                                                                         s.orbit_max = 3.0;
                                                                         s.radius_min = s.radius_max = 1;
                                                                         s.speed_max = 1.5;
                                                                         s.frames = 4;
                                                                         return s;
                                                                       }()),
                                                                       *ck.embed));
  EXPECT_EQ(again.accuracy, r.final_eval.accuracy);
  EXPECT_EQ(again.predictions, r.final_eval.predictions);
  fs::remove(path);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto path = temp_path("corrupt.ckpt");
  std::ofstream(path) << "MOSSCKPT\x05";
  EXPECT_THROW(load_checkpoint<float>(path), IoError);
  std::ofstream(path) << "garbage";
  EXPECT_THROW(load_checkpoint<float>(path), IoError);
  fs::remove(path);
  EXPECT_THROW(load_checkpoint<float>(path), IoError);
}
