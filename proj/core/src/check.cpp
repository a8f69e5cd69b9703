#include "moss/check.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "moss/layers.hpp"
#include "moss/train.hpp"

namespace moss {

double relative_error(const Tensor<double>& analytic, const Tensor<double>& numeric) {
  if (analytic.shape() != numeric.shape()) throw DimensionError("relative_error: shape mismatch");
  double diff = 0.0, a = 0.0, n = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    a += analytic[i] * analytic[i];
    n += numeric[i] * numeric[i];
  }
  const double scale = std::max(std::sqrt(std::max(a, n)), kGradFloor);
  return std::sqrt(diff) / scale;
}

GradReport gradcheck_graph(const std::string& component, Graph<double>& graph, ParamStore<double>& params,
                           const std::vector<Tensor<double>>& inputs, Mode mode, std::uint64_t seed, double tol,
                           double step) {
  Rng rng(seed);
  const Tensor<double> gy = uniform_tensor<double>(graph.forward(params, inputs, mode).shape(), rng);
  Gradients<double> grads;
  const auto input_grads = graph.backward(gy, grads);

  auto loss = [&](const std::vector<Tensor<double>>& in) {
    const auto& y = graph.forward(params, in, mode);
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += gy[i] * y[i];
    return s;
  };
  GradReport report{component, 0.0, "", 0, false};
  auto record = [&](const std::string& name, const Tensor<double>& analytic, const Tensor<double>& numeric) {
    const double e = relative_error(analytic, numeric);
    ++report.tensors;
    if (e >= report.max_rel_err) {
      report.max_rel_err = e;
      report.worst = name;
    }
  };

  auto perturbed = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor<double> numeric(inputs[k].shape());
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double orig = perturbed[k][i];
      perturbed[k][i] = orig + step;
      const double lp = loss(perturbed);
      perturbed[k][i] = orig - step;
      const double lm = loss(perturbed);
      perturbed[k][i] = orig;
      numeric[i] = (lp - lm) / (2.0 * step);
    }
    record("input" + std::to_string(k), input_grads.at(k), numeric);
  }
  for (auto& [name, entry] : params) {
    if (!entry.trainable) continue;
    Tensor<double> numeric(entry.value.shape());
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      const double orig = entry.value[i];
      entry.value[i] = orig + step;
      const double lp = loss(inputs);
      entry.value[i] = orig - step;
      const double lm = loss(inputs);
      entry.value[i] = orig;
      numeric[i] = (lp - lm) / (2.0 * step);
    }
    const auto it = grads.find(name);
    record(name, it != grads.end() ? it->second : Tensor<double>(entry.value.shape()), numeric);
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

namespace {

MossConfig small_moss(std::vector<int> orders, Fusion fusion) {
  MossConfig cfg;
  cfg.orders = std::move(orders);
  cfg.windows = {WindowSpec{3, 3, 3}};
  cfg.D = 3;
  cfg.C = 3;
  cfg.blocks = 1;
  cfg.fusion = fusion;
  cfg.init.zero_branch = false;
  cfg.init.visual_identity = false;
  return cfg;
}

}  // namespace

std::vector<GradReport> gradcheck_suite(std::uint64_t seed, double tol) {
  std::vector<GradReport> out;
  Rng rng(seed);
  auto rand = [&](const Shape& s) { return uniform_tensor<double>(s, rng); };
  auto run = [&](const std::string& name, Graph<double>& g, ParamStore<double>& p, std::vector<Tensor<double>> in,
                 Mode mode = Mode::train) {
    out.push_back(gradcheck_graph(name, g, p, in, mode, seed + out.size() + 1, tol));
  };

  {
    Graph<double> g;
    ParamStore<double> p;
    layers::init_linear(p, "fc", 4, 3, rng);
    g.set_output(g.linear(g.input(), "fc.w", "fc.b"));
    run("linear", g, p, {rand({2, 3, 4})});
  }
  {
    Graph<double> g;
    ParamStore<double> p;
    layers::init_conv3x3(p, "conv", 3, 4, rng);
    g.set_output(g.conv3x3(g.input(), "conv.w", "conv.b"));
    run("conv3x3", g, p, {rand({2, 4, 5, 3})});
  }
  {
    Graph<double> g;
    ParamStore<double> p;
    layers::init_conv3x3(p, "conv", 5, 18, rng);
    g.set_output(g.conv3x3(g.input(), "conv.w", "conv.b"));
    run("conv3x3_wide", g, p, {rand({1, 3, 6, 5})});
  }
  for (Mode mode : {Mode::train, Mode::eval}) {
    Graph<double> g;
    ParamStore<double> p;
    p.add("bn.gamma", uniform_tensor<double>({3}, rng, 0.5, 1.5));
    p.add("bn.beta", rand({3}));
    p.add("bn.rmean", rand({3}), false);
    p.add("bn.rvar", uniform_tensor<double>({3}, rng, 0.5, 2.0), false);
    g.set_output(g.batchnorm(g.input(), "bn"));
    run(mode == Mode::train ? "batchnorm_train" : "batchnorm_eval", g, p, {rand({2, 3, 3})}, mode);
  }
  {
    Graph<double> g;
    ParamStore<double> p;
    g.set_output(g.gelu(g.input()));
    run("gelu", g, p, {uniform_tensor<double>({3, 5}, rng, -3.0, 3.0)});
  }
  {
    Graph<double> g;
    ParamStore<double> p;
    const NodeId a = g.input(), b = g.input();
    g.set_output(g.add(a, b));
    run("add", g, p, {rand({2, 3}), rand({2, 3})});
  }
  {
    Graph<double> g;
    ParamStore<double> p;
    const NodeId a = g.input(), b = g.input();
    g.set_output(g.concat({a, b}));
    run("concat", g, p, {rand({2, 2, 3}), rand({2, 2, 2})});
  }
  {
    Graph<double> g;
    ParamStore<double> p;
    NodeId x = g.permute(g.input(), {2, 0, 1});
    x = g.reshape(x, [](const Shape& s) { return Shape{s[0] * s[1], s[2]}; });
    g.set_output(x);
    run("permute_reshape", g, p, {rand({2, 3, 4})});
  }
  {
    Graph<double> g;
    ParamStore<double> p;
    g.set_output(g.mean_leading(g.input()));
    run("mean_leading", g, p, {rand({2, 3, 4})});
  }
  for (const auto& w : {WindowSpec{3, 3, 3}, WindowSpec{1, 3, 5}}) {
    Graph<double> g;
    ParamStore<double> p;
    g.set_output(g.stss(g.input(), w));
    run("stss_" + std::to_string(w.L) + std::to_string(w.U) + std::to_string(w.V), g, p, {rand({3, 4, 4, 3})});
  }
  {
    const EncoderSpec spec{WindowSpec{3, 3, 3}, 4, 3, 2};
    Graph<double> g;
    ParamStore<double> p;
    init_encoder_params(p, "enc1", spec, rng);
    g.set_output(add_learned_encoder(g, g.input(), "enc1", spec));
    run("encoder", g, p, {rand({2, 3, 3, 3, 3, 3})});
  }
  const std::vector<std::pair<std::string, MossConfig>> models{
      {"moss_orders_1_2", small_moss({1, 2}, Fusion::no_fusion)},
      {"moss_orders_1_2_3", small_moss({1, 2, 3}, Fusion::no_fusion)},
      {"fusion_no_fusion", small_moss({2}, Fusion::no_fusion)},
      {"fusion_addition", small_moss({1, 2}, Fusion::addition)},
      {"fusion_mlp", small_moss({1, 2}, Fusion::mlp)},
      {"fusion_conv", small_moss({1, 2}, Fusion::conv)},
  };
  for (const auto& [name, cfg] : models) {
    Graph<double> g;
    auto p = init_params<double>(cfg, seed + 7);
    const NodeId in = g.input();
    g.set_output(add_moss(g, in, cfg).output);
    run(name, g, p, {rand({2, 3, 4, 3})});
  }
  {
    // Smoothed cross-entropy against its closed-form gradient.
    const std::vector<double> logits{0.3, -1.2, 2.0, 0.1};
    const auto r = cross_entropy_smoothed(logits, 2, 0.1);
    Tensor<double> analytic({4}, r.dlogits), numeric({4});
    for (std::size_t k = 0; k < 4; ++k) {
      auto lp = logits, lm = logits;
      lp[k] += 1e-6;
      lm[k] -= 1e-6;
      numeric[k] = (cross_entropy_smoothed(lp, 2, 0.1).loss - cross_entropy_smoothed(lm, 2, 0.1).loss) / 2e-6;
    }
    GradReport rep{"cross_entropy", relative_error(analytic, numeric), "logits", 1, false};
    rep.pass = rep.max_rel_err <= tol;
    out.push_back(rep);
  }
  return out;
}

OracleReport oracle_sweep(std::uint64_t seed, std::size_t instances, const Exec& exec) {
  const std::vector<WindowSpec> windows{{1, 3, 3}, {3, 3, 3}, {3, 5, 5}, {5, 9, 9}};
  const Shape largest{8, 14, 14, 64};
  Rng rng(seed);
  OracleReport report;
  const std::size_t total = std::max(instances, windows.size());
  for (std::size_t i = 0; i < total; ++i) {
    const auto& w = windows[i % windows.size()];
    Shape shape = largest;
    if (i >= windows.size()) {
      shape = {1 + uniform_index(rng, 8), 1 + uniform_index(rng, 14), 1 + uniform_index(rng, 14),
               1 + uniform_index(rng, 64)};
    }
    auto t = uniform_tensor<float>(shape, rng);
    // Some instances carry all-zero feature vectors to exercise the degenerate-norm path.
    if (i % 3 == 2) {
      const std::size_t c = shape[3];
      for (std::size_t p = 0; p < t.size() / c; p += 1 + uniform_index(rng, 5)) {
        std::fill_n(t.ptr() + p * c, c, 0.0f);
      }
    }
    const FeatureMap<float> f(std::move(t));
    const double d = max_abs_diff(stss_forward(f, w, {}, exec).data, stss_oracle(f, w).data);
    report.cases.push_back(OracleCase{shape, w, d});
    report.max_diff = std::max(report.max_diff, d);
  }
  return report;
}

std::vector<std::vector<std::uint8_t>> patch_masks(const ToyScene& scene, std::size_t patch) {
  const std::size_t gh = scene.height / patch, gw = scene.width / patch;
  std::vector<std::vector<std::uint8_t>> out(ToyScene::kObjects, std::vector<std::uint8_t>(scene.frames * gh * gw, 0));
  for (std::size_t k = 0; k < ToyScene::kObjects; ++k) {
    for (std::size_t t = 0; t < scene.frames; ++t) {
      for (std::size_t y = 0; y < scene.height; ++y) {
        for (std::size_t x = 0; x < scene.width; ++x) {
          if (scene.covered(k, t, y, x)) out[k][(t * gh + y / patch) * gw + x / patch] = 1;
        }
      }
    }
  }
  return out;
}

SeparabilityReport toy_separability(const ToyScene& scene, const PatchEmbed& embed, const WindowSpec& window) {
  const auto f = patch_embed<double>(scene.pixels, embed);
  MossConfig cfg;
  cfg.orders = {1, 2};
  cfg.windows = {window};
  const auto outputs = high_order_stss(f, cfg, 2, EncoderKind::vectorize);
  const auto masks = patch_masks(scene, embed.patch);
  const std::size_t T = f.frames(), G_h = f.height(), G_w = f.width();
  auto on = [&](std::size_t k, std::ptrdiff_t t, std::ptrdiff_t y, std::ptrdiff_t x) {
    return masks[k][(static_cast<std::size_t>(t) * G_h + static_cast<std::size_t>(y)) * G_w +
                    static_cast<std::size_t>(x)] != 0;
  };

  SeparabilityReport report;
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t k = 0; k < ToyScene::kObjects; ++k) {
      for (std::size_t y = 0; y < G_h; ++y) {
        for (std::size_t x = 0; x < G_w; ++x) {
          if (!on(k, t, y, x)) continue;
          // Mean similarity from the query to window cells covered by any object in `targets`.
          auto mean_over = [&](const StssTensor<double>& s, const std::vector<std::size_t>& targets, bool& found) {
            double sum = 0.0;
            std::size_t n = 0;
            for (int l = 0; l < window.L; ++l) {
              const auto tt = static_cast<std::ptrdiff_t>(t) + l - window.half_l();
              if (tt < 0 || tt >= static_cast<std::ptrdiff_t>(T)) continue;
              for (int u = 0; u < window.U; ++u) {
                const auto yy = static_cast<std::ptrdiff_t>(y) + u - window.half_u();
                if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(G_h)) continue;
                for (int v = 0; v < window.V; ++v) {
                  const auto xx = static_cast<std::ptrdiff_t>(x) + v - window.half_v();
                  if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(G_w)) continue;
                  if (std::none_of(targets.begin(), targets.end(), [&](std::size_t j) { return on(j, tt, yy, xx); })) {
                    continue;
                  }
                  sum += s.data.at(t, y, x, l, u, v);
                  ++n;
                }
              }
            }
            found = n > 0;
            return found ? sum / static_cast<double>(n) : 0.0;
          };
          std::vector<std::size_t> same;
          for (std::size_t j = 0; j < ToyScene::kObjects; ++j) {
            if (j != k && ToyScene::set_of(j) == ToyScene::set_of(k)) same.push_back(j);
          }
          const std::vector<std::size_t> twin{ToyScene::twin_of(k)};
          bool has_same = false, has_twin = false;
          const double s1_same = mean_over(outputs.s.at(1), same, has_same);
          const double s1_twin = mean_over(outputs.s.at(1), twin, has_twin);
          if (!has_same || !has_twin) continue;
          const double s2_same = mean_over(outputs.s.at(2), same, has_same);
          const double s2_twin = mean_over(outputs.s.at(2), twin, has_twin);
          ++report.total;
          report.passed += (s2_same > s2_twin && s1_twin > s1_same) ? 1 : 0;
        }
      }
    }
  }
  return report;
}

BenchRow bench_stss(const Shape& shape, const WindowSpec& window, const std::string& variant, int threads,
                    std::size_t reps, std::uint64_t seed) {
  if (variant != "naive" && variant != "blocked" && variant != "parallel") {
    throw ConfigError("unknown bench variant '" + variant + "'");
  }
  if (reps == 0 || threads < 1) throw ConfigError("bench needs reps >= 1 and threads >= 1");
  Rng rng(seed);
  const FeatureMap<float> f(uniform_tensor<float>(shape, rng));
  const int used = variant == "parallel" ? threads : 1;
  auto once = [&] {
    const auto t0 = std::chrono::steady_clock::now();
    const auto s = variant == "naive" ? stss_oracle(f, window) : stss_forward(f, window, {}, Exec{used});
    const auto t1 = std::chrono::steady_clock::now();
    if (s.data.empty()) throw StateError("empty STSS result");
    return std::chrono::duration<double, std::milli>(t1 - t0).count();
  };
  once();
  std::vector<double> times;
  for (std::size_t r = 0; r < reps; ++r) times.push_back(once());
  std::sort(times.begin(), times.end());
  BenchRow row{shape, window, variant, used, times[times.size() / 2], 0.0};
  row.gflops = static_cast<double>(stss_flops(shape, window)) / (row.ms * 1e6);
  return row;
}

std::string to_csv(const BenchRow& row) {
  std::ostringstream os;
  for (std::size_t i = 0; i < row.shape.size(); ++i) os << (i ? "x" : "") << row.shape[i];
  os << ',' << row.window.L << 'x' << row.window.U << 'x' << row.window.V << ',' << row.variant << ',' << row.threads
     << ',' << row.ms << ',' << row.gflops;
  return os.str();
}

}  // namespace moss
