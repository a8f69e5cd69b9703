#include <gtest/gtest.h>

#include "moss/check.hpp"
#include "moss/errors.hpp"
#include "moss/moss.hpp"

using namespace moss;

namespace {

MossConfig small_config(std::vector<int> orders, Fusion fusion = Fusion::no_fusion) {
  MossConfig cfg;
  cfg.orders = std::move(orders);
  cfg.windows = {WindowSpec{3, 3, 3}};
  cfg.D = 3;
  cfg.C = 3;
  cfg.blocks = 1;
  cfg.fusion = fusion;
  return cfg;
}

FeatureMap<double> random_map(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  return FeatureMap<double>(uniform_tensor<double>(shape, rng));
}

}  // namespace

TEST(MossConfig, Validation) {
  MossConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.orders = {};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.orders = {2, 1};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.orders = {1, 5};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.orders = {0};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.orders = {1, 2, 3, 4};
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.window(4), (WindowSpec{5, 9, 9}));
  cfg.windows = {WindowSpec{1, 3, 3}, WindowSpec{3, 3, 3}};
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(MossConfig, JsonRoundTrip) {
  MossConfig cfg = small_config({1, 3}, Fusion::mlp);
  cfg.windows = {WindowSpec{1, 3, 3}, WindowSpec{3, 5, 5}, WindowSpec{3, 3, 3}};
  cfg.init.zero_branch = false;
  cfg.seed = 77;
  const nlohmann::json j = cfg;
  EXPECT_TRUE(j.contains("orders"));
  EXPECT_EQ(j.at("window").at("2").at("U"), 5);
  const auto back = j.get<MossConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_EQ(back.window(2), (WindowSpec{3, 5, 5}));
  EXPECT_EQ(back.fusion, Fusion::mlp);
  EXPECT_THROW(parse_fusion("sum"), ConfigError);
  EXPECT_THROW((nlohmann::json{{"orders", "x"}}.get<MossConfig>()), ConfigError);
}

TEST(InitParams, Deterministic) {
  const auto cfg = small_config({1, 2}, Fusion::conv);
  EXPECT_TRUE(init_params<double>(cfg, 3) == init_params<double>(cfg, 3));
  EXPECT_FALSE(init_params<double>(cfg, 3) == init_params<double>(cfg, 4));
}

TEST(InitParams, ZeroBranchAndIdentityVisual) {
  const auto cfg = small_config({1, 2, 3});
  const auto p = init_params<double>(cfg, 1);
  for (int n : {1, 2, 3}) {
    for (const auto& suffix : {".w", ".b"}) {
      for (double v : p.value("out_fc" + std::to_string(n) + suffix).data()) EXPECT_EQ(v, 0.0);
    }
  }
  const auto& w = p.value("visual_fc.w");
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(w.at(i, j), i == j ? 1.0 : 0.0);
  for (double v : p.value("visual_fc.b").data()) EXPECT_EQ(v, 0.0);
}

TEST(InitParams, FanInBound) {
  MossConfig cfg;
  cfg.orders = {1};
  cfg.windows = {WindowSpec{1, 5, 5}};
  cfg.D = 100;
  cfg.C = 8;
  cfg.init.zero_branch = false;
  const auto p = init_params<double>(cfg, 2);
  // temporal_fc has fan_in L * D = 100.
  for (double v : p.value("enc1.temporal_fc.w").data()) EXPECT_LE(std::abs(v), 0.1);
  for (double v : p.value("enc1.temporal_fc.b").data()) EXPECT_LE(std::abs(v), 0.1);
}

TEST(InitParams, EncodersUpToMaxOrderOutputsForActiveOrders) {
  const auto p = init_params<double>(small_config({2}), 1);
  EXPECT_TRUE(p.contains("enc1.spatial_fc.w"));
  EXPECT_TRUE(p.contains("enc2.spatial_fc.w"));
  EXPECT_FALSE(p.contains("out_fc1.w"));
  EXPECT_TRUE(p.contains("out_fc2.w"));
}

TEST(HighOrder, BaseCaseIsStssForward) {
  const auto f = random_map({2, 4, 4, 3}, 1);
  const auto cfg = small_config({1, 2});
  const auto p = init_params<double>(cfg, 1);
  const auto out = high_order_stss(f, cfg, 1, EncoderKind::learned, &p);
  EXPECT_EQ(out.s.at(1).data, stss_forward(f, WindowSpec{3, 3, 3}).data);
  EXPECT_EQ(high_order_stss(f, cfg, 1, EncoderKind::vectorize).s.at(1).data, out.s.at(1).data);
}

TEST(HighOrder, RejectsUnsupportedOrders) {
  const auto f = random_map({1, 3, 3, 3}, 2);
  const auto cfg = small_config({1});
  EXPECT_THROW(high_order_stss(f, cfg, 0, EncoderKind::vectorize), ConfigError);
  EXPECT_THROW(high_order_stss(f, cfg, 5, EncoderKind::vectorize), ConfigError);
  EXPECT_THROW(high_order_stss(f, cfg, 1, EncoderKind::learned), ConfigError);
}

TEST(HighOrder, VectorizeCompositionMatchesOracle) {
  const auto f = random_map({2, 3, 3, 2}, 9);
  const WindowSpec w{3, 3, 3};
  const auto out = high_order_stss(f, small_config({1, 2}), 2, EncoderKind::vectorize);
  const auto literal = stss_oracle(encode_vectorize(stss_oracle(f, w)), w);
  EXPECT_LE(max_abs_diff(out.s.at(2).data, literal.data), 1e-6);
}

TEST(HighOrder, ScaleInvariancePropagates) {
  const auto f = random_map({2, 4, 4, 3}, 10);
  Tensor<double> scaled = f.tensor();
  Rng rng(11);
  for (std::size_t p = 0; p < scaled.size() / 3; ++p) {
    const double a = 0.1 + 5 * uniform01(rng);
    for (std::size_t c = 0; c < 3; ++c) scaled[p * 3 + c] *= a;
  }
  const auto cfg = small_config({1, 2, 3});
  for (EncoderKind kind : {EncoderKind::vectorize, EncoderKind::mean_pool}) {
    const auto a = high_order_stss(f, cfg, 3, kind);
    const auto b = high_order_stss(FeatureMap<double>(scaled), cfg, 3, kind);
    for (int n = 1; n <= 3; ++n) EXPECT_LE(max_abs_diff(a.s.at(n).data, b.s.at(n).data), 1e-12) << n;
  }
}

TEST(HighOrder, NoFusionPurity) {
  // Under no_fusion, S^(2) depends on F only through M^(1).
  const auto cfg = small_config({1, 2});
  const auto p = init_params<double>(cfg, 12);
  const auto f = random_map({2, 4, 4, 3}, 13);
  const auto out = high_order_stss(f, cfg, 2, EncoderKind::learned, &p);
  EXPECT_EQ(out.s.at(2).data, stss_forward(out.m.at(1), cfg.window(2)).data);
}

TEST(Fusion, Variants) {
  const auto m = random_map({2, 3, 3, 3}, 14);
  const auto f = random_map({2, 3, 3, 3}, 15);
  EXPECT_EQ(fuse_variant(m, f, Fusion::no_fusion).tensor(), m.tensor());
  const FeatureMap<double> zero(Tensor<double>({2, 3, 3, 3}));
  EXPECT_EQ(fuse_variant(m, zero, Fusion::addition).tensor(), m.tensor());
  const auto sum = fuse_variant(m, f, Fusion::addition);
  for (std::size_t i = 0; i < sum.tensor().size(); ++i) EXPECT_EQ(sum.tensor()[i], m.tensor()[i] + f.tensor()[i]);

  for (Fusion kind : {Fusion::mlp, Fusion::conv}) {
    auto p = init_params<double>(small_config({1, 2}, kind), 16);
    for (auto& [name, e] : p) {
      if (name.starts_with("fuse2")) e.value.fill(0.0);
    }
    const auto out = fuse_variant(m, f, kind, &p, 2).tensor();
    for (double v : out.data()) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(fuse_variant(m, f, kind), ConfigError);
  }
}

TEST(Fusion, AdditionChannelMismatch) {
  const auto m = random_map({2, 3, 3, 27}, 17);
  const auto f = random_map({2, 3, 3, 3}, 18);
  EXPECT_THROW(fuse_variant(m, f, Fusion::addition), DimensionError);
  EXPECT_NO_THROW(fuse_variant(m, f, Fusion::no_fusion));
}

TEST(MossForward, DefaultInitIsIdentity) {
  for (const auto& orders : {std::vector<int>{1}, std::vector<int>{1, 2}, std::vector<int>{2, 4}}) {
    auto cfg = small_config(orders);
    cfg.C = 5;
    const auto p = init_params<float>(cfg, 19);
    Rng rng(20);
    const FeatureMap<float> f(uniform_tensor<float>({3, 4, 4, 5}, rng));
    MossModule<float> module(cfg);
    auto store = p;
    EXPECT_EQ(module.forward(f, store, Mode::train).tensor(), f.tensor());
    const auto dy = uniform_tensor<float>({3, 4, 4, 5}, rng);
    EXPECT_EQ(module.backward(dy, store), dy);
  }
}

TEST(MossForward, ZeroBranchesLeaveVisualPath) {
  auto cfg = small_config({1});
  cfg.init.visual_identity = false;
  const auto p = init_params<double>(cfg, 21);
  const auto f = random_map({2, 3, 3, 3}, 22);
  EXPECT_EQ(moss_forward(f, p, cfg, Mode::eval).tensor(),
            ops::linear(f.tensor(), p.value("visual_fc.w"), p.value("visual_fc.b")));
}

TEST(MossForward, ChannelMismatch) {
  const auto cfg = small_config({1});
  const auto p = init_params<double>(cfg, 23);
  EXPECT_THROW(moss_forward(random_map({1, 3, 3, 4}, 1), p, cfg, Mode::eval), DimensionError);
}

TEST(MossForward, GradientCheck) {
  for (const auto& orders : {std::vector<int>{1, 2}, std::vector<int>{1, 2, 3}}) {
    auto cfg = small_config(orders);
    cfg.init.zero_branch = false;
    cfg.init.visual_identity = false;
    auto p = init_params<double>(cfg, 24);
    Graph<double> g;
    g.set_output(add_moss(g, g.input(), cfg).output);
    const auto f = random_map({2, 3, 3, 3}, 25);
    const auto r = gradcheck_graph("moss", g, p, {f.tensor()}, Mode::train, 26);
    EXPECT_TRUE(r.pass) << r.worst << " " << r.max_rel_err;
  }
}

TEST(MossForward, FlopsGrowWithOrders) {
  Rng rng(27);
  const FeatureMap<float> f(uniform_tensor<float>({4, 6, 6, 8}, rng));
  std::size_t prev = 0;
  std::vector<int> orders;
  for (int n = 1; n <= 4; ++n) {
    orders.push_back(n);
    auto cfg = small_config(orders);
    cfg.C = 8;
    cfg.D = 8;
    MossModule<float> module(cfg);
    module.forward(f, init_params<float>(cfg, 1), Mode::eval);
    EXPECT_GT(module.last_flops(), prev) << n;
    prev = module.last_flops();
  }
}

TEST(MossModule, OrderOutputsCached) {
  const auto cfg = small_config({1, 3});
  const auto p = init_params<double>(cfg, 28);
  MossModule<double> module(cfg);
  EXPECT_THROW(module.order_outputs(), StateError);
  const auto f = random_map({2, 3, 3, 3}, 29);
  module.forward(f, p, Mode::eval);
  const auto out = module.order_outputs();
  EXPECT_EQ(out.s.size(), 3u);
  EXPECT_EQ(out.m.size(), 3u);
  const auto ref = high_order_stss(f, cfg, 3, EncoderKind::learned, &p);
  for (int n = 1; n <= 3; ++n) EXPECT_EQ(out.s.at(n).data, ref.s.at(n).data);
}
