#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "moss/check.hpp"
#include "moss/checkpoint.hpp"
#include "moss/errors.hpp"
#include "moss/synthdata.hpp"
#include "moss/train.hpp"
#include "moss/viz.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;

std::vector<std::size_t> parse_list(const std::string& text, char sep = ',') {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (item.empty()) throw moss::ConfigError("empty item in list '" + text + "'");
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      throw moss::ConfigError("not a non-negative integer: '" + item + "'");
    }
    if (used != item.size()) throw moss::ConfigError("not a non-negative integer: '" + item + "'");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

moss::WindowSpec parse_window(const std::string& text) {
  const auto v = parse_list(text);
  if (v.size() != 3) throw moss::ConfigError("window must be L,U,V: '" + text + "'");
  moss::WindowSpec w{static_cast<int>(v[0]), static_cast<int>(v[1]), static_cast<int>(v[2])};
  w.validate();
  return w;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw moss::ConfigError("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw moss::ConfigError(path.string() + ": " + e.what());
  }
}

// Experiment file: {"model": ModelConfig, "train": TrainConfig, "embed": {"seed", "scale", "bias_scale", "patch"}}.
struct Experiment {
  moss::ModelConfig model;
  moss::TrainConfig train;
  std::uint64_t embed_seed = 5;
  double embed_scale = 0.25, embed_bias = 0.25;
  std::size_t patch = 4;

  moss::PatchEmbed make_embed() const {
    return moss::PatchEmbed::make(model.channels(), embed_seed, embed_scale, embed_bias, patch);
  }
};

Experiment load_experiment(const std::string& path) {
  Experiment e;
  if (path.empty()) return e;
  const json j = read_json(path);
  try {
    for (const auto& [key, value] : j.items()) {
      if (key != "model" && key != "train" && key != "embed") throw moss::ConfigError("unknown key '" + key + "'");
    }
    if (j.contains("model")) e.model = j.at("model").get<moss::ModelConfig>();
    if (j.contains("train")) e.train = j.at("train").get<moss::TrainConfig>();
    if (j.contains("embed")) {
      const auto& em = j.at("embed");
      e.embed_seed = em.value("seed", e.embed_seed);
      e.embed_scale = em.value("scale", e.embed_scale);
      e.embed_bias = em.value("bias_scale", e.embed_bias);
      e.patch = em.value("patch", e.patch);
    }
  } catch (const json::exception& ex) {
    throw moss::ConfigError(path + ": " + ex.what());
  }
  e.model.validate();
  e.train.validate();
  return e;
}

moss::Exec make_exec(int threads) {
  if (threads < 1) throw moss::ConfigError("--threads must be >= 1");
  return moss::Exec{threads};
}

json eval_json(const moss::EvalResult& r) {
  json j;
  j["accuracy"] = r.accuracy;
  j["per_class"] = json::object();
  for (int c = 0; c < moss::kNumClasses; ++c) j["per_class"][moss::label_name(c)] = r.per_class[c];
  j["confusion"] = r.confusion;
  return j;
}

// gen-data

struct GenArgs {
  std::size_t per_class = 100;
  std::uint64_t seed = 0;
  std::string out, split = "train", spec;
};

int run_gen_data(const GenArgs& a) {
  moss::MotionSpec spec;
  if (!a.spec.empty()) {
    try {
      spec = read_json(a.spec).get<moss::MotionSpec>();
    } catch (const json::exception& e) {
      throw moss::ConfigError(a.spec + ": " + e.what());
    }
  }
  spec.validate();
  const auto clips = moss::gen_motion_dataset(a.per_class, a.seed, spec);
  moss::save_dataset(a.out, clips, spec, a.split);
  std::cout << json{{"clips", clips.size()}, {"out", a.out}, {"split", a.split}}.dump() << "\n";
  return kOk;
}

// train / eval

struct TrainArgs {
  std::string config, data, test, out;
  int threads = 1;
  std::ptrdiff_t seed = -1;
  std::ptrdiff_t iters = -1;
};

int run_train(const TrainArgs& a) {
  Experiment e = load_experiment(a.config);
  if (a.seed >= 0) e.train.seed = static_cast<std::uint64_t>(a.seed);
  if (a.iters >= 0) e.train.iters = static_cast<std::size_t>(a.iters);
  e.train.validate();
  const auto exec = make_exec(a.threads);
  const auto embed = e.make_embed();
  const auto train_set = moss::load_dataset(a.data);
  const auto train_x = moss::embed_clips<float>(train_set.clips, embed);
  moss::LabeledFeatures<float> test_x;
  if (!a.test.empty()) test_x = moss::embed_clips<float>(moss::load_dataset(a.test).clips, embed);

  fs::create_directories(a.out);
  std::ofstream metrics_file(fs::path(a.out) / "metrics.jsonl");
  if (!metrics_file) throw moss::IoError("cannot write " + (fs::path(a.out) / "metrics.jsonl").string());

  // Tee the metric stream to stdout and the run directory.
  struct Tee : std::streambuf {
    std::streambuf *a, *b;
    int overflow(int c) override {
      if (c == EOF) return !EOF;
      return (a->sputc(static_cast<char>(c)) == EOF || b->sputc(static_cast<char>(c)) == EOF) ? EOF : c;
    }
    int sync() override { return (a->pubsync() | b->pubsync()) == 0 ? 0 : -1; }
  } tee;
  tee.a = std::cout.rdbuf();
  tee.b = metrics_file.rdbuf();
  std::ostream metrics(&tee);

  auto params = moss::init_classifier<float>(e.model, e.model.moss.seed);
  moss::TrainOptions opts;
  opts.metrics = &metrics;
  opts.checkpoint = fs::path(a.out) / "model.ckpt";
  opts.embed = &embed;
  const auto result = moss::train_loop(e.model, params, train_x, test_x, e.train, exec, opts);
  metrics.flush();
  json summary{{"checkpoint", opts.checkpoint.string()}, {"final_loss", result.losses.back()}};
  if (test_x.size() > 0) summary["eval"] = eval_json(result.final_eval);
  std::ofstream(fs::path(a.out) / "summary.json") << summary.dump(2) << "\n";
  return kOk;
}

struct EvalArgs {
  std::string checkpoint, data;
  int threads = 1;
};

int run_eval(const EvalArgs& a) {
  const auto ckpt = moss::load_checkpoint<float>(a.checkpoint);
  if (!ckpt.embed) throw moss::ConfigError(a.checkpoint + " has no patch embedding");
  const auto data = moss::embed_clips<float>(moss::load_dataset(a.data).clips, *ckpt.embed);
  const auto r = moss::evaluate(ckpt.model, ckpt.params, data, make_exec(a.threads));
  std::cout << eval_json(r).dump() << "\n";
  return kOk;
}

// visualize

struct VizArgs {
  std::string data, checkpoint, config, out, prefix = "viz", query = "2,4,4", orders = "1,2,3", window;
  std::size_t clip = 0, scale = 8;
  std::ptrdiff_t toy = -1;
  int threads = 1;
};

int run_visualize(const VizArgs& a) {
  if (a.data.empty() == (a.toy < 0)) throw moss::ConfigError("give exactly one of --data or --toy");
  const auto q = parse_list(a.query);
  if (q.size() != 3) throw moss::ConfigError("--query must be t,h,w");
  std::vector<int> orders;
  for (auto n : parse_list(a.orders)) orders.push_back(static_cast<int>(n));
  if (orders.empty()) throw moss::ConfigError("--orders is empty");

  const int up_to = *std::max_element(orders.begin(), orders.end());
  moss::MossConfig cfg;
  moss::ParamStore<float> params;
  moss::PatchEmbed embed;
  if (!a.checkpoint.empty()) {
    auto ckpt = moss::load_checkpoint<float>(a.checkpoint);
    if (!ckpt.embed) throw moss::ConfigError(a.checkpoint + " has no patch embedding");
    if (!ckpt.model.branches) throw moss::ConfigError(a.checkpoint + " has no MOSS branches");
    cfg = ckpt.model.moss;
    if (up_to > cfg.max_order()) throw moss::ConfigError(a.checkpoint + " has no encoder for order " + std::to_string(up_to));
    params = std::move(ckpt.params);
    embed = *ckpt.embed;
  } else {
    // Default-initialized block with encoders up to the highest requested order.
    const Experiment e = load_experiment(a.config);
    cfg = e.model.moss;
    if (!a.window.empty()) cfg.windows = {parse_window(a.window)};
    if (cfg.max_order() < up_to) {
      cfg.orders.clear();
      for (int n = 1; n <= up_to; ++n) cfg.orders.push_back(n);
    }
    cfg.validate();
    params = moss::init_params<float>(cfg, cfg.seed);
    embed = e.make_embed();
  }

  const auto pixels = a.toy >= 0 ? moss::gen_toy_scene(static_cast<std::uint64_t>(a.toy)).pixels
                                 : moss::load_dataset(a.data).clips.at(a.clip).pixels;
  const auto f = moss::patch_embed<float>(pixels, embed);
  const auto outputs =
      moss::high_order_stss(f, cfg, up_to, moss::EncoderKind::learned, &params, moss::Mode::eval, make_exec(a.threads));
  const auto files = moss::write_visualization(a.out, a.prefix, outputs, q[0], q[1], q[2], orders, a.scale);
  std::cout << json{{"files", files.size()}, {"out", a.out}}.dump() << "\n";
  return kOk;
}

// checks

int run_gradcheck(std::uint64_t seed, double tol) {
  const auto reports = moss::gradcheck_suite(seed, tol);
  bool ok = true;
  for (const auto& r : reports) {
    std::printf("%-20s max_rel_err %.3e  (%s, %zu tensors)  %s\n", r.component.c_str(), r.max_rel_err,
                r.worst.c_str(), r.tensors, r.pass ? "PASS" : "FAIL");
    ok = ok && r.pass;
  }
  return ok ? kOk : kCheckFailed;
}

int run_oracle_check(std::uint64_t seed, std::size_t instances, double tol, int threads, bool verbose) {
  const auto report = moss::oracle_sweep(seed, instances, make_exec(threads));
  if (verbose) {
    for (const auto& c : report.cases) {
      std::printf("%-16s window %d,%d,%d  max_diff %.3e\n", moss::to_string(c.shape).c_str(), c.window.L, c.window.U,
                  c.window.V, c.max_diff);
    }
  }
  const bool ok = report.max_diff <= tol;
  std::printf("instances %zu  max_diff %.3e  tol %.1e  %s\n", report.cases.size(), report.max_diff, tol,
              ok ? "PASS" : "FAIL");
  return ok ? kOk : kCheckFailed;
}

struct BenchArgs {
  std::string shape = "8,14,14,64", window = "5,9,9", variants = "naive,blocked,parallel", threads = "1,8";
  std::size_t reps = 5;
  std::uint64_t seed = 0;
};

int run_bench(const BenchArgs& a) {
  const auto shape = parse_list(a.shape);
  if (shape.size() != 4) throw moss::ConfigError("--shape must be T,H,W,C");
  const auto window = parse_window(a.window);
  std::vector<std::string> variants;
  {
    std::stringstream ss(a.variants);
    std::string v;
    while (std::getline(ss, v, ',')) {
      if (v != "naive" && v != "blocked" && v != "parallel") throw moss::ConfigError("unknown variant '" + v + "'");
      variants.push_back(v);
    }
  }
  const auto threads = parse_list(a.threads);
  if (a.reps == 0) throw moss::ConfigError("--reps must be >= 1");
  std::cout << moss::kBenchCsvHeader << "\n";
  for (const auto& v : variants) {
    if (v == "parallel") {
      for (auto t : threads) {
        if (t == 0) throw moss::ConfigError("thread counts must be >= 1");
        std::cout << moss::to_csv(moss::bench_stss(shape, window, v, static_cast<int>(t), a.reps, a.seed)) << "\n";
      }
    } else {
      std::cout << moss::to_csv(moss::bench_stss(shape, window, v, 1, a.reps, a.seed)) << "\n";
    }
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-order self-similarity toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "moss 0.1.0");

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic motion dataset");
  gen_cmd->add_option("--per-class", gen.per_class, "Clips per label")->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Dataset seed")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--split", gen.split, "Split name stored in the manifest")->capture_default_str();
  gen_cmd->add_option("--spec", gen.spec, "MotionSpec JSON file")->check(CLI::ExistingFile);

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a classifier; streams line-JSON metrics");
  train_cmd->add_option("--config", tr.config, "Experiment JSON {model, train, embed}")->check(CLI::ExistingFile);
  train_cmd->add_option("--data", tr.data, "Training dataset directory")->required();
  train_cmd->add_option("--test", tr.test, "Held-out dataset directory");
  train_cmd->add_option("--out", tr.out, "Run directory (model.ckpt, metrics.jsonl, summary.json)")->required();
  train_cmd->add_option("--threads", tr.threads, "Worker threads")->capture_default_str();
  train_cmd->add_option("--seed", tr.seed, "Override train.seed");
  train_cmd->add_option("--iters", tr.iters, "Override train.iters");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint; prints accuracy JSON");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", ev.data, "Dataset directory")->required();
  eval_cmd->add_option("--threads", ev.threads, "Worker threads")->capture_default_str();

  VizArgs vz;
  auto* viz_cmd = app.add_subcommand("visualize", "Write per-order STSS query maps and feature norm maps (P6 PPM)");
  viz_cmd->add_option("--data", vz.data, "Dataset directory");
  viz_cmd->add_option("--clip", vz.clip, "Clip index within --data")->capture_default_str();
  viz_cmd->add_option("--toy", vz.toy, "Use the toy scene with this seed instead of --data");
  viz_cmd->add_option("--checkpoint", vz.checkpoint, "Trained checkpoint; default-initialized model when absent");
  viz_cmd->add_option("--config", vz.config, "Experiment JSON for the untrained model")->check(CLI::ExistingFile);
  viz_cmd->add_option("--window", vz.window, "Window L,U,V for the untrained model");
  viz_cmd->add_option("--query", vz.query, "Query t,h,w on the feature grid")->capture_default_str();
  viz_cmd->add_option("--orders", vz.orders, "Orders to render")->capture_default_str();
  viz_cmd->add_option("--out", vz.out, "Output directory")->required();
  viz_cmd->add_option("--prefix", vz.prefix, "File name prefix")->capture_default_str();
  viz_cmd->add_option("--scale", vz.scale, "Pixels per feature cell")->capture_default_str();
  viz_cmd->add_option("--threads", vz.threads, "Worker threads")->capture_default_str();

  std::uint64_t gc_seed = 0;
  double gc_tol = 1e-5;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite (f64)");
  grad_cmd->add_option("--seed", gc_seed, "Seed")->capture_default_str();
  grad_cmd->add_option("--tol", gc_tol, "Relative error tolerance")->capture_default_str();

  std::uint64_t oc_seed = 42;
  std::size_t oc_instances = 50;
  double oc_tol = 1e-6;
  int oc_threads = 1;
  bool oc_verbose = false;
  auto* oracle_cmd = app.add_subcommand("oracle-check", "Blocked STSS vs the loop oracle (f32)");
  oracle_cmd->add_option("--seed", oc_seed, "Seed")->capture_default_str();
  oracle_cmd->add_option("--instances", oc_instances, "Random instances")->capture_default_str();
  oracle_cmd->add_option("--tol", oc_tol, "Max abs diff tolerance")->capture_default_str();
  oracle_cmd->add_option("--threads", oc_threads, "Worker threads")->capture_default_str();
  oracle_cmd->add_flag("--verbose", oc_verbose, "Print every instance");

  BenchArgs bn;
  auto* bench_cmd = app.add_subcommand("bench", "Time stss_forward variants; CSV on stdout");
  bench_cmd->add_option("--shape", bn.shape, "Feature shape T,H,W,C")->capture_default_str();
  bench_cmd->add_option("--window", bn.window, "Window L,U,V")->capture_default_str();
  bench_cmd->add_option("--variants", bn.variants, "Any of naive,blocked,parallel")->capture_default_str();
  bench_cmd->add_option("--threads", bn.threads, "Thread counts for the parallel variant")->capture_default_str();
  bench_cmd->add_option("--reps", bn.reps, "Repetitions (median reported)")->capture_default_str();
  bench_cmd->add_option("--seed", bn.seed, "Seed")->capture_default_str();
  bench_cmd->footer(
      "CSV columns: shape,window,variant,threads,ms,gflops\n"
      "  shape    T x H x W x C of the feature map\n"
      "  window   L x U x V\n"
      "  variant  naive | blocked | parallel\n"
      "  threads  worker count (1 for naive and blocked)\n"
      "  ms       median wall time in milliseconds\n"
      "  gflops   analytic FLOP count / median time");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen_cmd) return run_gen_data(gen);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*viz_cmd) return run_visualize(vz);
    if (*grad_cmd) return run_gradcheck(gc_seed, gc_tol);
    if (*oracle_cmd) return run_oracle_check(oc_seed, oc_instances, oc_tol, oc_threads, oc_verbose);
    if (*bench_cmd) return run_bench(bn);
  } catch (const moss::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailed;
  } catch (const moss::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
