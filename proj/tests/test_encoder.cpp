#include <gtest/gtest.h>

#include "moss/check.hpp"
#include "moss/encoder.hpp"
#include "moss/errors.hpp"

using namespace moss;

namespace {

ParamStore<double> encoder_params(const EncoderSpec& spec, std::uint64_t seed) {
  ParamStore<double> p;
  Rng rng(seed);
  init_encoder_params(p, "enc1", spec, rng);
  return p;
}

StssTensor<double> random_stss(const Shape& shape, Rng& rng) {
  return {uniform_tensor<double>(shape, rng),
          WindowSpec{static_cast<int>(shape[3]), static_cast<int>(shape[4]), static_cast<int>(shape[5])}};
}

}  // namespace

TEST(Encoder, ParameterNames) {
  const EncoderSpec spec{WindowSpec{3, 3, 3}, 4, 5, 2};
  const auto p = encoder_params(spec, 1);
  for (const char* name : {"enc1.spatial_fc.w", "enc1.spatial_fc.b", "enc1.block0.conv.w", "enc1.block0.conv.b",
                           "enc1.block1.bn.gamma", "enc1.block1.bn.beta", "enc1.block1.bn.rmean", "enc1.block1.bn.rvar",
                           "enc1.temporal_fc.w", "enc1.temporal_fc.b"}) {
    EXPECT_TRUE(p.contains(name)) << name;
  }
  EXPECT_EQ(p.value("enc1.spatial_fc.w").shape(), (Shape{9, 4}));
  EXPECT_EQ(p.value("enc1.temporal_fc.w").shape(), (Shape{12, 5}));
  EXPECT_FALSE(p.entry("enc1.block0.bn.rmean").trainable);
}

TEST(Encoder, ZeroParametersGiveZero) {
  const EncoderSpec spec{WindowSpec{3, 3, 3}, 4, 5, 3};
  auto p = encoder_params(spec, 2);
  for (auto& [name, e] : p) {
    if (name.ends_with(".rvar")) continue;
    e.value.fill(0.0);
  }
  Rng rng(3);
  const auto s = random_stss({2, 4, 4, 3, 3, 3}, rng);
  for (Mode mode : {Mode::train, Mode::eval}) {
    const auto out = encode_learned(s, p, "enc1", spec, mode).tensor();
    for (double v : out.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Encoder, ShapeContractAtDefaultWindow) {
  const EncoderSpec spec{WindowSpec{5, 9, 9}, 64, 64, 3};
  ParamStore<float> p;
  Rng rng(4);
  init_encoder_params(p, "enc1", spec, rng);
  Graph<float> g;
  g.set_output(add_learned_encoder(g, g.input(), "enc1", spec));
  const auto& y = g.forward(p, {uniform_tensor<float>({8, 14, 14, 5, 9, 9}, rng)}, Mode::eval);
  EXPECT_EQ(y.shape(), (Shape{8, 14, 14, 64}));
  bool saw_slices = false, saw_concat = false;
  for (NodeId id = 0; id < g.size(); ++id) {
    saw_slices = saw_slices || g.value(id).shape() == Shape{8, 14, 14, 5, 64};
    saw_concat = saw_concat || g.value(id).shape() == Shape{8, 14, 14, 320};
  }
  EXPECT_TRUE(saw_slices);
  EXPECT_TRUE(saw_concat);
}

TEST(Encoder, OutputShapeIndependentOfWindow) {
  Rng rng(5);
  for (const WindowSpec w : {WindowSpec{1, 1, 1}, WindowSpec{1, 3, 5}, WindowSpec{3, 5, 3}}) {
    const EncoderSpec spec{w, 3, 7, 1};
    const auto p = encoder_params(spec, 6);
    const auto s = random_stss({2, 3, 4, static_cast<std::size_t>(w.L), static_cast<std::size_t>(w.U),
                                static_cast<std::size_t>(w.V)},
                               rng);
    EXPECT_EQ(encode_learned(s, p, "enc1", spec, Mode::train).tensor().shape(), (Shape{2, 3, 4, 7}));
  }
}

TEST(Encoder, WindowMismatch) {
  const EncoderSpec spec{WindowSpec{3, 3, 3}, 4, 4, 1};
  const auto p = encoder_params(spec, 7);
  Rng rng(8);
  EXPECT_THROW(encode_learned(random_stss({1, 3, 3, 1, 3, 3}, rng), p, "enc1", spec, Mode::eval), ConfigError);
  const EncoderSpec wider{WindowSpec{3, 5, 5}, 4, 4, 1};
  EXPECT_THROW(encode_learned(random_stss({1, 3, 3, 3, 5, 5}, rng), p, "enc1", wider, Mode::eval), ConfigError);
}

TEST(Encoder, GradientCheck) {
  const EncoderSpec spec{WindowSpec{3, 3, 3}, 3, 3, 2};
  auto p = encoder_params(spec, 5);
  Rng rng(5);
  const auto s = random_stss({2, 3, 3, 3, 3, 3}, rng);
  Graph<double> g;
  g.set_output(add_learned_encoder(g, g.input(), "enc1", spec));
  for (Mode mode : {Mode::train, Mode::eval}) {
    const auto r = gradcheck_graph("encoder", g, p, {s.data}, mode, 9);
    EXPECT_TRUE(r.pass) << r.worst << " " << r.max_rel_err;
    EXPECT_LE(r.max_rel_err, 1e-5);
  }
}

TEST(Encoder, SlicesAreIndependentBeforeConcat) {
  // In eval mode, changing the input of one temporal slice leaves the other
  // slices' conv outputs untouched.
  const EncoderSpec spec{WindowSpec{3, 3, 3}, 4, 4, 2};
  const auto p = encoder_params(spec, 10);
  Rng rng(11);
  auto s = random_stss({2, 5, 5, 3, 3, 3}, rng);
  Graph<double> g;
  g.set_output(add_learned_encoder(g, g.input(), "enc1", spec));
  const NodeId pre_concat = g.size() - 5;
  g.forward(p, {s.data}, Mode::eval);
  const auto before = g.value(pre_concat);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t h = 0; h < 5; ++h)
      for (std::size_t w = 0; w < 5; ++w)
        for (std::size_t k = 0; k < 9; ++k) s.data[(((t * 5 + h) * 5 + w) * 3 + 1) * 9 + k] += 0.5;
  g.forward(p, {s.data}, Mode::eval);
  const auto& after = g.value(pre_concat);
  ASSERT_EQ(after.shape(), (Shape{6, 5, 5, 4}));
  for (std::size_t n = 0; n < 6; ++n) {
    const bool touched = n % 3 == 1;
    double diff = 0;
    for (std::size_t i = 0; i < 100; ++i) diff = std::max(diff, std::abs(after[n * 100 + i] - before[n * 100 + i]));
    if (touched) {
      EXPECT_GT(diff, 0.0);
    } else {
      EXPECT_EQ(diff, 0.0);
    }
  }
}

TEST(Encoder, TranslationEquivariantOnInterior) {
  const EncoderSpec spec{WindowSpec{1, 3, 3}, 3, 3, 3};
  const auto p = encoder_params(spec, 12);
  Rng rng(13);
  const auto s = random_stss({1, 4, 14, 1, 3, 3}, rng);
  Tensor<double> shifted(s.data.shape());
  const std::size_t row = 9;
  for (std::size_t h = 0; h < 4; ++h)
    for (std::size_t w = 0; w < 14; ++w)
      for (std::size_t k = 0; k < row; ++k) shifted[(h * 14 + (w + 1) % 14) * row + k] = s.data[(h * 14 + w) * row + k];
  Graph<double> g;
  g.set_output(add_learned_encoder(g, g.input(), "enc1", spec));
  const NodeId pre_concat = g.size() - 5;
  g.forward(p, {s.data}, Mode::eval);
  const auto a = g.value(pre_concat);
  g.forward(p, {shifted}, Mode::eval);
  const auto& b = g.value(pre_concat);
  for (std::size_t h = 0; h < 4; ++h)
    for (std::size_t w = 4; w < 9; ++w)
      for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(b.at(0, h, w + 1, d), a.at(0, h, w, d), 1e-12);
}

TEST(Vectorize, ReshapePreservesValues) {
  Rng rng(14);
  const auto s = random_stss({3, 4, 4, 3, 3, 3}, rng);
  const auto m = encode_vectorize(s);
  EXPECT_EQ(m.tensor().shape(), (Shape{3, 4, 4, 27}));
  for (std::size_t i = 0; i < s.data.size(); ++i) EXPECT_EQ(m.tensor()[i], s.data[i]);
  const auto back = devectorize(m, s.window);
  EXPECT_EQ(back.data, s.data);
  EXPECT_EQ(back.window, s.window);
}

TEST(MeanPool, Constant) {
  const StssTensor<double> s{Tensor<double>({2, 2, 2, 3, 3, 5}, 0.3), WindowSpec{3, 3, 5}};
  const auto m = encode_mean_pool(s);
  EXPECT_EQ(m.tensor().shape(), (Shape{2, 2, 2, 3}));
  for (double v : m.tensor().data()) EXPECT_NEAR(v, 0.3, 1e-15);
}

TEST(MeanPool, Impulse) {
  StssTensor<double> s{Tensor<double>({1, 2, 2, 3, 3, 3}), WindowSpec{3, 3, 3}};
  Rng rng(15);
  for (std::size_t m = 0; m < 12; ++m) s.data[m * 9 + uniform_index(rng, 9)] = 1.0;
  const auto out = encode_mean_pool(s).tensor();
  for (double v : out.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 9.0);
}

TEST(MeanPool, MatchesSummationOracle) {
  Rng rng(16);
  const auto s = random_stss({2, 3, 2, 3, 5, 3}, rng);
  const auto m = encode_mean_pool(s);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t h = 0; h < 3; ++h)
      for (std::size_t w = 0; w < 2; ++w)
        for (std::size_t l = 0; l < 3; ++l) {
          double sum = 0;
          for (std::size_t u = 0; u < 5; ++u)
            for (std::size_t v = 0; v < 3; ++v) sum += s.data.at(t, h, w, l, u, v);
          EXPECT_NEAR(m.tensor().at(t, h, w, l), sum / 15.0, 1e-12);
        }
}
