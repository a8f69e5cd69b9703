// Runs every acceptance criterion and prints one PASS/FAIL line per criterion.
// Exit status is 0 when every criterion passes, apart from failures caused only by a host with too few cores.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "golden_cases.hpp"
#include "moss/check.hpp"
#include "moss/checkpoint.hpp"
#include "moss/train.hpp"

using namespace moss;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
  bool hardware_limited = false;  ///< failed only because the host has too few cores
};

int failures = 0, hardware_failures = 0;

void report(int id, const std::string& name, const Outcome& o) {
  std::printf("[%s] %2d %-28s %s\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str());
  std::fflush(stdout);
  failures += !o.pass;
  hardware_failures += !o.pass && o.hardware_limited;
}

void run(int id, const std::string& name, const std::function<Outcome()>& body) {
  try {
    report(id, name, body());
  } catch (const std::exception& e) {
    report(id, name, {false, std::string("exception: ") + e.what()});
  }
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1

Outcome oracle_equivalence() {
  const auto t0 = Clock::now();
  const auto r = oracle_sweep(42, 50);
  const double secs = seconds_since(t0);
  bool windows[4] = {};
  for (const auto& c : r.cases) {
    windows[0] |= c.window == WindowSpec{1, 3, 3};
    windows[1] |= c.window == WindowSpec{3, 3, 3};
    windows[2] |= c.window == WindowSpec{3, 5, 5};
    windows[3] |= c.window == WindowSpec{5, 9, 9};
  }
  const bool ok = r.cases.size() >= 50 && r.max_diff <= 1e-6 && secs <= 120 && windows[0] && windows[1] &&
                  windows[2] && windows[3];
  return {ok, fmt("instances %zu max_diff %.2e (<= 1e-6) %.1fs (<= 120s)", r.cases.size(), r.max_diff, secs)};
}

// 2

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const auto reports = gradcheck_suite(0, 1e-5);
  const double secs = seconds_since(t0);
  double worst = 0;
  std::string worst_name;
  bool ok = !reports.empty() && secs <= 300;
  for (const auto& r : reports) {
    ok = ok && r.pass && r.max_rel_err <= 1e-5;
    if (r.max_rel_err >= worst) {
      worst = r.max_rel_err;
      worst_name = r.component;
    }
  }
  return {ok, fmt("%zu components, worst %s %.2e (<= 1e-5) %.1fs (<= 300s)", reports.size(), worst_name.c_str(), worst,
                  secs)};
}

// 3

struct Instance {
  FeatureMap<float> f;
  WindowSpec window;
};

Instance random_instance(Rng& rng) {
  static const WindowSpec windows[] = {{1, 3, 3}, {3, 3, 3}, {3, 5, 5}, {5, 9, 9}, {1, 1, 1}, {3, 1, 5}};
  const Shape shape{1 + uniform_index(rng, 4), 1 + uniform_index(rng, 6), 1 + uniform_index(rng, 6),
                    1 + uniform_index(rng, 8)};
  auto data = uniform_tensor<float>(shape, rng);
  for (std::size_t p = 0; p < data.size() / shape[3]; ++p) {
    if (uniform01(rng) < 0.1) {
      for (std::size_t k = 0; k < shape[3]; ++k) data[p * shape[3] + k] = 0.f;
    }
  }
  return {FeatureMap<float>(std::move(data)), windows[uniform_index(rng, std::size(windows))]};
}

bool nonzero(const FeatureMap<float>& f, std::size_t t, std::size_t h, std::size_t w) {
  for (std::size_t c = 0; c < f.channels(); ++c) {
    if (f.tensor().at(t, h, w, c) != 0.f) return true;
  }
  return false;
}

Outcome stss_invariants() {
  constexpr std::size_t kInstances = 100;
  Rng rng(2024);
  std::size_t bounded = 0, self = 0, reciprocal = 0, scale = 0, nullity = 0;
  double scale_err = 0;
  for (std::size_t i = 0; i < kInstances; ++i) {
    const auto [f, win] = random_instance(rng);
    const auto s = stss_forward(f, win);
    const std::size_t T = f.frames(), H = f.height(), W = f.width();
    const int hl = win.half_l(), hu = win.half_u(), hv = win.half_v();

    bool ok_bounded = true, ok_self = true, ok_recip = true;
    for (float v : s.data.data()) ok_bounded = ok_bounded && v >= -1.f && v <= 1.f;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w) {
          ok_self = ok_self && s.data.at(t, h, w, hl, hu, hv) == (nonzero(f, t, h, w) ? 1.f : 0.f);
          for (int l = -hl; l <= hl; ++l)
            for (int u = -hu; u <= hu; ++u)
              for (int v = -hv; v <= hv; ++v) {
                const auto t2 = static_cast<std::ptrdiff_t>(t) + l, h2 = static_cast<std::ptrdiff_t>(h) + u,
                           w2 = static_cast<std::ptrdiff_t>(w) + v;
                if (t2 < 0 || h2 < 0 || w2 < 0 || t2 >= std::ptrdiff_t(T) || h2 >= std::ptrdiff_t(H) ||
                    w2 >= std::ptrdiff_t(W))
                  continue;
                ok_recip = ok_recip && s.data.at(t, h, w, l + hl, u + hu, v + hv) ==
                                           s.data.at(t2, h2, w2, hl - l, hu - u, hv - v);
              }
        }
    bounded += ok_bounded;
    self += ok_self;
    reciprocal += ok_recip;

    Tensor<float> scaled = f.tensor();
    const std::size_t C = f.channels();
    for (std::size_t p = 0; p < scaled.size() / C; ++p) {
      const auto a = static_cast<float>(0.05 + 20 * uniform01(rng));
      for (std::size_t c = 0; c < C; ++c) scaled[p * C + c] *= a;
    }
    const double d = max_abs_diff(stss_forward(FeatureMap<float>(std::move(scaled)), win).data, s.data);
    scale_err = std::max(scale_err, d);
    scale += d <= 1e-6;

    // Every frame equal to the first: all temporal offsets give the same slice.
    Tensor<float> still(f.tensor().shape());
    const std::size_t frame = H * W * C;
    for (std::size_t t = 0; t < T; ++t) std::copy_n(f.tensor().ptr(), frame, still.ptr() + t * frame);
    const auto ss = stss_forward(FeatureMap<float>(std::move(still)), win);
    bool ok_null = true;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w)
          for (int l = 0; l < win.L; ++l) {
            const auto t2 = static_cast<std::ptrdiff_t>(t) + l - hl;
            if (t2 < 0 || t2 >= std::ptrdiff_t(T)) continue;
            for (int u = 0; u < win.U; ++u)
              for (int v = 0; v < win.V; ++v) ok_null = ok_null && ss.data.at(t, h, w, l, u, v) == ss.data.at(t, h, w, hl, u, v);
          }
    nullity += ok_null;
  }
  const bool ok = bounded == kInstances && self == kInstances && reciprocal == kInstances && scale == kInstances &&
                  nullity == kInstances;
  return {ok, fmt("of %zu: bounded %zu self-match %zu reciprocity %zu scale %zu (max %.1e) temporal-nullity %zu",
                  kInstances, bounded, self, reciprocal, scale, scale_err, nullity)};
}

// 4

Outcome init_transparency() {
  bool ok = true;
  std::size_t configs = 0;
  Rng rng(4);
  for (const auto& orders : {std::vector<int>{1}, std::vector<int>{1, 2}, std::vector<int>{1, 2, 3}}) {
    for (Fusion fusion : {Fusion::no_fusion, Fusion::addition, Fusion::mlp, Fusion::conv}) {
      MossConfig cfg;
      cfg.orders = orders;
      cfg.windows = {WindowSpec{3, 5, 5}};
      cfg.D = 8;
      cfg.C = 12;
      cfg.blocks = 2;
      cfg.fusion = fusion;
      auto params = init_params<float>(cfg, 17);
      const FeatureMap<float> f(uniform_tensor<float>({4, 7, 7, 12}, rng));
      const auto dy = uniform_tensor<float>({4, 7, 7, 12}, rng);
      MossModule<float> module(cfg);
      ok = ok && module.forward(f, params, Mode::train).tensor() == f.tensor();
      ok = ok && module.backward(dy, params) == dy;
      ++configs;
    }
  }
  return {ok, fmt("%zu configs: forward and input gradient bitwise", configs)};
}

// 5

Outcome vectorize_composition() {
  double worst = 0;
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const FeatureMap<double> f(
        uniform_tensor<double>({1 + uniform_index(rng, 3), 2 + uniform_index(rng, 3), 2 + uniform_index(rng, 3), 3},
                               rng));
    const WindowSpec w = i % 2 ? WindowSpec{3, 3, 3} : WindowSpec{1, 3, 5};
    MossConfig cfg;
    cfg.orders = {1, 2};
    cfg.windows = {w};
    const auto out = high_order_stss(f, cfg, 2, EncoderKind::vectorize);
    const auto literal = stss_oracle(encode_vectorize(stss_oracle(f, w)), w);
    worst = std::max(worst, max_abs_diff(out.s.at(2).data, literal.data));
  }
  return {worst <= 1e-6, fmt("20 instances, max diff %.2e (<= 1e-6)", worst)};
}

// 6

Outcome toy_separability_check() {
  const auto t0 = Clock::now();
  const auto embed = PatchEmbed::make(16, 5, 0.25, 0.0);
  SeparabilityReport total;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto r = toy_separability(gen_toy_scene(seed), embed, WindowSpec{5, 9, 9});
    total.passed += r.passed;
    total.total += r.total;
  }
  const double secs = seconds_since(t0);
  return {total.total > 0 && total.fraction() >= 0.9 && secs <= 60,
          fmt("%zu/%zu queries (%.1f%% >= 90%%) %.1fs (<= 60s)", total.passed, total.total, 100 * total.fraction(), secs)};
}

// 7, 8, 10 share the experiment setup.

struct Experiment {
  std::vector<MotionClip> train_clips = gen_motion_dataset(100, 1);
  std::vector<MotionClip> test_clips = gen_motion_dataset(25, 2);
  PatchEmbed embed = PatchEmbed::make(16, 5);
  LabeledFeatures<float> train = embed_clips<float>(train_clips, embed);
  LabeledFeatures<float> test = embed_clips<float>(test_clips, embed);

  static ModelConfig model(std::vector<int> orders) {
    ModelConfig m;
    m.moss.windows = {WindowSpec{5, 5, 5}};
    m.moss.D = 16;
    m.moss.C = 16;
    if (orders.empty()) {
      m.branches = false;
      m.moss.orders = {1};
    } else {
      m.moss.orders = std::move(orders);
    }
    return m;
  }

  static TrainConfig train_config(std::size_t iters, double lr) {
    TrainConfig c;
    c.iters = iters;
    c.lr = lr;
    c.eval_every = 100;
    return c;
  }
};

struct Trained {
  ModelConfig model;
  ParamStore<float> params;
  TrainResult result;
  double secs = 0;
};

Trained train_model(const Experiment& e, std::vector<int> orders, std::size_t iters, double lr, const Exec& exec) {
  Trained t{Experiment::model(std::move(orders)), {}, {}, 0};
  t.params = init_classifier<float>(t.model, 0);
  const auto t0 = Clock::now();
  t.result = train_loop(t.model, t.params, e.train, e.test, Experiment::train_config(iters, lr), exec);
  t.secs = seconds_since(t0);
  return t;
}

// CW and CCW are labels 2 and 3.
double cw_ccw(const EvalResult& r) { return 0.5 * (r.per_class[2] + r.per_class[3]); }

}  // namespace

int main() {
  const auto t_start = Clock::now();
  const Exec exec{static_cast<int>(std::max(1u, std::thread::hardware_concurrency()))};
  std::printf("acceptance suite (%d hardware threads)\n", exec.threads);

  run(1, "oracle equivalence", oracle_equivalence);
  run(2, "gradient suite", gradient_suite);
  run(3, "stss invariants", stss_invariants);
  run(4, "init transparency", init_transparency);
  run(5, "high-order composition", vectorize_composition);
  run(6, "toy separability", toy_separability_check);

  std::unique_ptr<Experiment> exp;
  std::unique_ptr<Trained> first, second;
  run(7, "motion experiment", [&] {
    const auto t0 = Clock::now();
    exp = std::make_unique<Experiment>();
    const double probe = mean_frame_probe(exp->train_clips, exp->test_clips);
    const auto base = train_model(*exp, {}, 300, 3e-3, exec);
    first = std::make_unique<Trained>(train_model(*exp, {1}, 600, 5e-3, exec));
    second = std::make_unique<Trained>(train_model(*exp, {1, 2}, 600, 3e-3, exec));
    const double a1 = first->result.final_eval.accuracy, a12 = second->result.final_eval.accuracy;
    const double c1 = cw_ccw(first->result.final_eval), c12 = cw_ccw(second->result.final_eval);
    const bool ok = probe <= 0.35 && base.result.final_eval.accuracy <= 0.40 && a1 >= 0.85 &&
                    second->result.final_eval.per_class[2] >= first->result.final_eval.per_class[2] &&
                    second->result.final_eval.per_class[3] >= first->result.final_eval.per_class[3];
    return Outcome{ok, fmt("(a) probe %.1f%% (<= 35) (b) baseline %.1f%% (<= 40) (c) {1} %.1f%% (>= 85) "
                           "(d) cw/ccw {1,2} %.0f/%.0f%% vs {1} %.0f/%.0f%% [{1,2} overall %.1f%%, mean %.0f vs %.0f] %.0fs",
                           100 * probe, 100 * base.result.final_eval.accuracy, 100 * a1,
                           100 * second->result.final_eval.per_class[2], 100 * second->result.final_eval.per_class[3],
                           100 * first->result.final_eval.per_class[2], 100 * first->result.final_eval.per_class[3],
                           100 * a12, 100 * c12, 100 * c1, seconds_since(t0))};
  });

  run(8, "cost ordering", [&] {
    Rng rng(8);
    const FeatureMap<float> f(uniform_tensor<float>({8, 8, 8, 16}, rng));
    std::vector<std::size_t> flops;
    std::vector<int> orders;
    std::string detail;
    for (int n = 1; n <= 4; ++n) {
      orders.push_back(n);
      const auto cfg = Experiment::model(orders);
      const auto params = init_classifier<float>(cfg, 0);
      Classifier<float> model(cfg);
      model.forward(f, params, Mode::eval);
      flops.push_back(model.last_flops());
      detail += fmt("%s%.4f", n > 1 ? " < " : "", static_cast<double>(flops.back()) * 1e-9);
    }
    bool ok = true;
    for (std::size_t i = 1; i < flops.size(); ++i) ok = ok && flops[i - 1] < flops[i];
    return Outcome{ok, "GFLOPs {1}..{1,2,3,4}: " + detail};
  });

  run(9, "performance gate", [&] {
    const Shape shape{8, 14, 14, 64};
    const WindowSpec window{5, 9, 9};
    const auto naive = bench_stss(shape, window, "naive", 1, 3, 0);
    const auto blocked = bench_stss(shape, window, "blocked", 1, 5, 0);
    const auto par1 = bench_stss(shape, window, "parallel", 1, 5, 0);
    const auto par8 = bench_stss(shape, window, "parallel", 8, 5, 0);
    const double kernel = naive.ms / blocked.ms, scaling = par1.ms / par8.ms;
    const unsigned cores = std::thread::hardware_concurrency();
    return Outcome{kernel >= 3 && scaling >= 3,
                   fmt("blocked %.1fx naive (>= 3) [%.1f vs %.1f ms]; 8 threads %.2fx 1 thread (>= 3) on %u cores",
                       kernel, blocked.ms, naive.ms, scaling, cores),
                   kernel >= 3 && cores < 8};
  });

  run(10, "format golden files", [&] {
    if (!first) throw std::runtime_error("no trained model from criterion 7");
    const auto path = fs::temp_directory_path() / "moss_acceptance.ckpt";
    save_checkpoint(path, Checkpoint<float>{first->params, first->model, Experiment::train_config(600, 5e-3),
                                            first->result.metrics, exp->embed});
    const auto loaded = load_checkpoint<float>(path);
    fs::remove(path);
    const auto test = embed_clips<float>(exp->test_clips, *loaded.embed);
    const auto again = evaluate(loaded.model, loaded.params, test, exec);
    const bool ckpt_ok = again.accuracy == first->result.final_eval.accuracy &&
                         again.predictions == first->result.final_eval.predictions;
    std::size_t same = 0;
    const auto cases = moss::testing::golden_cases();
    for (const auto& c : cases) {
      std::ifstream in(fs::path(MOSS_GOLDEN_DIR) / c.file, std::ios::binary);
      same += std::string(std::istreambuf_iterator<char>(in), {}) == c.bytes;
    }
    return Outcome{ckpt_ok && same == cases.size(),
                   fmt("checkpoint eval %.4f vs %.4f (exact); golden %zu/%zu bitwise", again.accuracy,
                       first->result.final_eval.accuracy, same, cases.size())};
  });

  std::printf("%d of 10 criteria failed, %.0fs total\n", failures, seconds_since(t_start));
  if (hardware_failures > 0) {
    std::printf("%d failure(s) need more cores than this host has and do not affect the exit status\n",
                hardware_failures);
  }
  return failures == hardware_failures ? 0 : 1;
}
