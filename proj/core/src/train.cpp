#include "moss/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>

#include "moss/checkpoint.hpp"
#include "moss/layers.hpp"

namespace moss {

std::size_t TrainConfig::warmup_iters() const {
  return static_cast<std::size_t>(std::floor(warmup_frac * static_cast<double>(iters)));
}

void TrainConfig::validate() const {
  if (iters == 0 || batch == 0) throw ConfigError("iters and batch must be positive");
  if (lr < 0.0 || weight_decay < 0.0) throw ConfigError("lr and weight_decay must be non-negative");
  if (warmup_frac < 0.0 || warmup_iters() >= iters) throw ConfigError("warmup must be shorter than training");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw ConfigError("label_smoothing must lie in [0, 1)");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0 || eps <= 0.0) {
    throw ConfigError("Adam betas must lie in [0, 1) and eps must be positive");
  }
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps},
                     {"warmup_frac", c.warmup_frac},
                     {"label_smoothing", c.label_smoothing},
                     {"batch", c.batch},
                     {"iters", c.iters},
                     {"eval_every", c.eval_every},
                     {"reverse_augment", c.reverse_augment},
                     {"recalibrate_bn", c.recalibrate_bn},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.warmup_frac = j.value("warmup_frac", d.warmup_frac);
  c.label_smoothing = j.value("label_smoothing", d.label_smoothing);
  c.batch = j.value("batch", d.batch);
  c.iters = j.value("iters", d.iters);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.reverse_augment = j.value("reverse_augment", d.reverse_augment);
  c.recalibrate_bn = j.value("recalibrate_bn", d.recalibrate_bn);
  c.seed = j.value("seed", d.seed);
}

void ModelConfig::validate() const { moss.validate(); }

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"moss", c.moss}, {"branches", c.branches}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.moss = j.at("moss").get<MossConfig>();
  c.branches = j.value("branches", true);
}

template <class T>
ParamStore<T> init_classifier(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore<T> store;
  if (cfg.branches) {
    store = init_params<T>(cfg.moss, seed);
  } else {
    Rng rng(seed);
    if (cfg.moss.init.visual_identity) {
      layers::init_linear_identity(store, "visual_fc", cfg.channels());
    } else {
      layers::init_linear(store, "visual_fc", cfg.channels(), cfg.channels(), rng);
    }
  }
  Rng head_rng(seed ^ 0x9e3779b97f4a7c15ULL);
  layers::init_linear(store, "head", cfg.channels(), static_cast<std::size_t>(kNumClasses), head_rng);
  return store;
}

template <class T>
Classifier<T>::Classifier(const ModelConfig& cfg) {
  cfg.validate();
  const NodeId in = graph_.input();
  NodeId x = cfg.branches ? add_moss(graph_, in, cfg.moss).output : graph_.linear(in, "visual_fc.w", "visual_fc.b");
  x = graph_.mean_leading(x);
  graph_.set_output(graph_.linear(x, "head.w", "head.b"));
}

template <class T>
const Tensor<T>& Classifier<T>::forward(const FeatureMap<T>& f, const ParamStore<T>& params, Mode mode,
                                        const Exec& exec) {
  return graph_.forward(params, {f.tensor()}, mode, exec);
}

template <class T>
void Classifier<T>::backward(const Tensor<T>& dlogits, Gradients<T>& grads, const Exec& exec) {
  graph_.backward(dlogits, grads, exec);
}

LossResult cross_entropy_smoothed(const std::vector<double>& logits, int label, double smoothing) {
  const auto K = logits.size();
  if (K == 0) throw InputError("cross entropy needs at least one logit");
  if (label < 0 || static_cast<std::size_t>(label) >= K) {
    throw InputError("label " + std::to_string(label) + " out of range for " + std::to_string(K) + " classes");
  }
  if (smoothing < 0.0 || smoothing >= 1.0) throw ConfigError("label smoothing must lie in [0, 1)");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  const double log_z = mx + std::log(z);
  LossResult r;
  r.dlogits.resize(K);
  const double off = smoothing / static_cast<double>(K);
  for (std::size_t k = 0; k < K; ++k) {
    const double target = off + (static_cast<int>(k) == label ? 1.0 - smoothing : 0.0);
    const double logp = logits[k] - log_z;
    if (target > 0.0) r.loss -= target * logp;
    r.dlogits[k] = std::exp(logp) - target;
  }
  return r;
}

template <class T>
void adamw_step(ParamStore<T>& params, AdamState<T>& state, std::size_t t, double lr, const TrainConfig& cfg) {
  if (t == 0) throw ConfigError("optimizer steps are 1-based");
  for (const auto& [name, e] : params) {
    if (!e.trainable) continue;
    for (T g : e.grad.data()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("non-finite gradient in '" + name + "' at step " + std::to_string(t));
      }
    }
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  const double decay = 1.0 - lr * cfg.weight_decay;
  for (auto& [name, e] : params) {
    if (!e.trainable) continue;
    auto& m = state.m.try_emplace(name, e.value.shape()).first->second;
    auto& v = state.v.try_emplace(name, e.value.shape()).first->second;
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double g = e.grad[i];
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double theta = static_cast<double>(e.value[i]) * decay;
      e.value[i] = static_cast<T>(theta - lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps));
    }
  }
  state.step = t;
}

double lr_at(std::size_t iter, const TrainConfig& cfg) {
  const std::size_t warm = cfg.warmup_iters();
  if (iter < warm) return cfg.lr * static_cast<double>(iter) / static_cast<double>(warm);
  const double progress = static_cast<double>(iter - warm) / static_cast<double>(cfg.iters - warm);
  return 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * progress));
}

template <class T>
LabeledFeatures<T> embed_clips(const std::vector<MotionClip>& clips, const PatchEmbed& embed) {
  LabeledFeatures<T> out;
  out.x.reserve(clips.size());
  for (const auto& c : clips) {
    out.x.push_back(patch_embed<T>(c.pixels, embed));
    out.y.push_back(c.label);
  }
  return out;
}

namespace {

template <class T>
std::vector<double> to_vector(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}

template <class T>
FeatureMap<T> reverse_frames(const FeatureMap<T>& f) {
  const std::size_t frames = f.frames();
  const std::size_t per = f.tensor().size() / frames;
  Tensor<T> out(f.tensor().shape());
  for (std::size_t t = 0; t < frames; ++t) {
    std::copy_n(f.tensor().ptr() + (frames - 1 - t) * per, per, out.ptr() + t * per);
  }
  return FeatureMap<T>(std::move(out));
}

int argmax(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

void fill_rates(EvalResult& r, const std::vector<int>& labels) {
  std::array<std::size_t, kNumClasses> total{};
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    ++r.confusion[labels[i]][r.predictions[i]];
    ++total[labels[i]];
    correct += labels[i] == r.predictions[i];
  }
  r.accuracy = labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
  for (int k = 0; k < kNumClasses; ++k) {
    r.per_class[k] = total[k] ? static_cast<double>(r.confusion[k][k]) / static_cast<double>(total[k]) : 0.0;
  }
}

nlohmann::json eval_json(const EvalResult& r) {
  return {{"accuracy", r.accuracy}, {"per_class", r.per_class}, {"confusion", r.confusion}};
}

}  // namespace

template <class T>
EvalResult evaluate(const ModelConfig& cfg, const ParamStore<T>& params, const LabeledFeatures<T>& data,
                    const Exec& exec) {
  EvalResult r;
  r.predictions.assign(data.size(), 0);
  const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(exec.threads, data.size()));
  parallel_for(data.size(), Exec{static_cast<int>(workers)}, [&](std::size_t begin, std::size_t end) {
    Classifier<T> model(cfg);
    for (std::size_t i = begin; i < end; ++i) {
      r.predictions[i] = argmax(to_vector(model.forward(data.x[i], params, Mode::eval)));
    }
  });
  for (int p : r.predictions) {
    if (p < 0 || p >= kNumClasses) throw StateError("classifier produced an invalid class");
  }
  fill_rates(r, data.y);
  return r;
}

template <class T>
void recalibrate_running_stats(const ModelConfig& cfg, ParamStore<T>& params, const LabeledFeatures<T>& data,
                               const Exec& exec) {
  const std::size_t W = std::max<std::size_t>(1, std::min<std::size_t>(exec.threads, data.size()));
  std::vector<Classifier<T>> models(W, Classifier<T>(cfg));
  const ParamStore<T> frozen = params;
  for (std::size_t start = 0; start < data.size(); start += W) {
    const std::size_t n = std::min(W, data.size() - start);
    parallel_for(n, Exec{static_cast<int>(n)}, [&](std::size_t begin, std::size_t end) {
      for (std::size_t k = begin; k < end; ++k) models[k].forward(data.x[start + k], frozen, Mode::train);
    });
    // Momentum 1/(i+1) turns the running update into a cumulative mean.
    for (std::size_t k = 0; k < n; ++k) {
      models[k].commit_running_stats(params, 1.0 / static_cast<double>(start + k + 1));
    }
  }
}

template <class T>
TrainResult train_loop(const ModelConfig& model, ParamStore<T>& params, const LabeledFeatures<T>& train,
                       const LabeledFeatures<T>& test, const TrainConfig& cfg, const Exec& exec,
                       const TrainOptions& options) {
  cfg.validate();
  model.validate();
  if (train.size() == 0) throw InputError("training set is empty");
  if (train.x.size() != train.y.size() || test.x.size() != test.y.size()) {
    throw InputError("features and labels differ in length");
  }

  TrainResult result;
  result.metrics = {{"iters", cfg.iters}};
  auto write_checkpoint = [&](const ParamStore<T>& store) {
    if (options.checkpoint.empty()) return;
    Checkpoint<T> ckpt{store, model, cfg, result.metrics, std::nullopt};
    if (options.embed) ckpt.embed = *options.embed;
    save_checkpoint(options.checkpoint, ckpt);
  };

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  std::size_t cursor = order.size();
  auto next_index = [&] {
    if (cursor == order.size()) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[uniform_index(rng, i + 1)]);
      cursor = 0;
    }
    return order[cursor++];
  };

  const std::size_t B = cfg.batch;
  std::vector<Classifier<T>> models(B, Classifier<T>(model));
  std::vector<Gradients<T>> grads(B);
  std::vector<double> item_loss(B);
  std::vector<std::size_t> picks(B);
  std::vector<bool> reversed(B);
  AdamState<T> adam;
  ParamStore<T> last_good = params;

  auto abort_with = [&](const std::string& what) {
    params = last_good;
    write_checkpoint(params);
    throw NumericError(what);
  };

  for (std::size_t it = 0; it < cfg.iters; ++it) {
    const double lr = lr_at(it, cfg);
    for (std::size_t b = 0; b < B; ++b) {
      picks[b] = next_index();
      reversed[b] = cfg.reverse_augment && uniform_index(rng, 2) == 1;
    }
    const Exec inner = Exec::sequential();
    parallel_for(B, Exec{std::max(1, std::min<int>(exec.threads, static_cast<int>(B)))},
                 [&](std::size_t begin, std::size_t end) {
                   for (std::size_t b = begin; b < end; ++b) {
                     const auto& x = train.x[picks[b]];
                     const int y = reversed[b] ? swapped_label(train.y[picks[b]]) : train.y[picks[b]];
                     const auto& logits =
                         reversed[b] ? models[b].forward(reverse_frames(x), params, Mode::train, inner)
                                     : models[b].forward(x, params, Mode::train, inner);
                     const auto ce = cross_entropy_smoothed(to_vector(logits), y, cfg.label_smoothing);
                     item_loss[b] = ce.loss;
                     Tensor<T> dl({ce.dlogits.size()});
                     for (std::size_t k = 0; k < dl.size(); ++k) {
                       dl[k] = static_cast<T>(ce.dlogits[k] / static_cast<double>(B));
                     }
                     grads[b].clear();
                     models[b].backward(dl, grads[b], inner);
                   }
                 });
    double loss = 0.0;
    for (double l : item_loss) loss += l;
    loss /= static_cast<double>(B);
    if (!std::isfinite(loss)) abort_with("non-finite loss at iteration " + std::to_string(it));

    params.zero_grads();
    for (std::size_t b = 0; b < B; ++b) {
      params.accumulate(grads[b]);
      models[b].commit_running_stats(params);
    }
    try {
      adamw_step(params, adam, it + 1, lr, cfg);
    } catch (const NumericError& e) {
      abort_with(e.what());
    }
    last_good = params;
    result.losses.push_back(loss);

    nlohmann::json line{{"iter", it}, {"loss", loss}, {"lr", lr}};
    const bool last = it + 1 == cfg.iters;
    const bool eval_now = test.size() > 0 && ((cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0) || last);
    if (cfg.recalibrate_bn && (eval_now || last)) recalibrate_running_stats(model, params, train, exec);
    if (eval_now) {
      const auto ev = evaluate(model, params, test, exec);
      line["eval_acc"] = ev.accuracy;
      result.evals.emplace_back(it, ev.accuracy);
      if (last) result.final_eval = ev;
      result.metrics["last_eval"] = eval_json(ev);
      result.metrics["last_eval_iter"] = it;
      if (!last) write_checkpoint(params);
    }
    if (options.metrics) *options.metrics << line.dump() << '\n' << std::flush;
  }
  result.metrics["final_loss"] = result.losses.back();
  write_checkpoint(params);
  return result;
}

namespace {

struct ProbeData {
  std::vector<std::vector<double>> x;
  std::vector<int> y;
};

ProbeData mean_frames(const std::vector<MotionClip>& clips) {
  ProbeData d;
  for (const auto& c : clips) {
    const std::size_t frames = c.pixels.dim(0), per = c.pixels.size() / frames;
    std::vector<double> m(per, 0.0);
    for (std::size_t t = 0; t < frames; ++t) {
      for (std::size_t i = 0; i < per; ++i) m[i] += c.pixels[t * per + i];
    }
    for (auto& v : m) v /= static_cast<double>(frames);
    d.x.push_back(std::move(m));
    d.y.push_back(c.label);
  }
  return d;
}

struct SoftmaxModel {
  std::vector<double> w;  // (D, K)
  std::array<double, kNumClasses> b{};
  std::vector<double> mu, sd;

  std::array<double, kNumClasses> logits(const std::vector<double>& x) const {
    std::array<double, kNumClasses> z = b;
    const std::size_t D = mu.size();
    for (std::size_t d = 0; d < D; ++d) {
      const double v = (x[d] - mu[d]) / sd[d];
      for (int k = 0; k < kNumClasses; ++k) z[k] += v * w[d * kNumClasses + k];
    }
    return z;
  }
};

SoftmaxModel fit_softmax(const ProbeData& data, const std::vector<std::size_t>& rows, double l2,
                         const ProbeConfig& cfg) {
  const std::size_t D = data.x.front().size(), K = kNumClasses;
  SoftmaxModel m;
  m.mu.assign(D, 0.0);
  m.sd.assign(D, 0.0);
  for (auto r : rows) {
    for (std::size_t d = 0; d < D; ++d) m.mu[d] += data.x[r][d];
  }
  for (auto& v : m.mu) v /= static_cast<double>(rows.size());
  for (auto r : rows) {
    for (std::size_t d = 0; d < D; ++d) m.sd[d] += (data.x[r][d] - m.mu[d]) * (data.x[r][d] - m.mu[d]);
  }
  for (auto& v : m.sd) v = std::max(std::sqrt(v / static_cast<double>(rows.size())), 1e-6);
  m.w.assign(D * K, 0.0);

  // Full-batch Adam on mean cross-entropy + l2/2 |w|^2.
  std::vector<double> gw(D * K), mw(D * K, 0.0), vw(D * K, 0.0);
  std::array<double, kNumClasses> mb{}, vb{};
  const double b1 = 0.9, b2 = 0.999, n = static_cast<double>(rows.size());
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::array<double, kNumClasses> gb{};
    for (auto r : rows) {
      const auto z = m.logits(data.x[r]);
      const auto ce = cross_entropy_smoothed(std::vector<double>(z.begin(), z.end()), data.y[r], 0.0);
      for (std::size_t d = 0; d < D; ++d) {
        const double v = (data.x[r][d] - m.mu[d]) / m.sd[d];
        for (std::size_t k = 0; k < K; ++k) gw[d * K + k] += v * ce.dlogits[k] / n;
      }
      for (std::size_t k = 0; k < K; ++k) gb[k] += ce.dlogits[k] / n;
    }
    const double c1 = 1.0 - std::pow(b1, double(step)), c2 = 1.0 - std::pow(b2, double(step));
    for (std::size_t i = 0; i < D * K; ++i) {
      const double g = gw[i] + l2 * m.w[i];
      mw[i] = b1 * mw[i] + (1 - b1) * g;
      vw[i] = b2 * vw[i] + (1 - b2) * g * g;
      m.w[i] -= cfg.lr * (mw[i] / c1) / (std::sqrt(vw[i] / c2) + 1e-8);
    }
    for (std::size_t k = 0; k < K; ++k) {
      mb[k] = b1 * mb[k] + (1 - b1) * gb[k];
      vb[k] = b2 * vb[k] + (1 - b2) * gb[k] * gb[k];
      m.b[k] -= cfg.lr * (mb[k] / c1) / (std::sqrt(vb[k] / c2) + 1e-8);
    }
  }
  return m;
}

double probe_accuracy(const SoftmaxModel& m, const ProbeData& data, const std::vector<std::size_t>& rows) {
  std::size_t ok = 0;
  for (auto r : rows) {
    const auto z = m.logits(data.x[r]);
    ok += static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin()) == data.y[r];
  }
  return static_cast<double>(ok) / static_cast<double>(rows.size());
}

}  // namespace

double mean_frame_probe(const std::vector<MotionClip>& train, const std::vector<MotionClip>& test,
                        const ProbeConfig& cfg) {
  if (train.empty() || test.empty()) throw InputError("probe needs non-empty train and test sets");
  if (cfg.l2_grid.empty() || cfg.folds < 2) throw ConfigError("probe needs an L2 grid and at least 2 folds");
  const auto tr = mean_frames(train);
  const auto te = mean_frames(test);
  double best_l2 = cfg.l2_grid.front(), best_score = -1.0;
  for (double l2 : cfg.l2_grid) {
    double score = 0.0;
    for (std::size_t f = 0; f < cfg.folds; ++f) {
      std::vector<std::size_t> fit, held;
      for (std::size_t i = 0; i < tr.y.size(); ++i) (i % cfg.folds == f ? held : fit).push_back(i);
      score += probe_accuracy(fit_softmax(tr, fit, l2, cfg), tr, held);
    }
    if (score > best_score) {
      best_score = score;
      best_l2 = l2;
    }
  }
  std::vector<std::size_t> all(tr.y.size()), test_rows(te.y.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  for (std::size_t i = 0; i < test_rows.size(); ++i) test_rows[i] = i;
  return probe_accuracy(fit_softmax(tr, all, best_l2, cfg), te, test_rows);
}

#define MOSS_INSTANTIATE_TRAIN(T)                                                                             \
  template ParamStore<T> init_classifier<T>(const ModelConfig&, std::uint64_t);                               \
  template class Classifier<T>;                                                                               \
  template void adamw_step<T>(ParamStore<T>&, AdamState<T>&, std::size_t, double, const TrainConfig&);        \
  template LabeledFeatures<T> embed_clips<T>(const std::vector<MotionClip>&, const PatchEmbed&);              \
  template EvalResult evaluate<T>(const ModelConfig&, const ParamStore<T>&, const LabeledFeatures<T>&,        \
                                  const Exec&);                                                               \
  template void recalibrate_running_stats<T>(const ModelConfig&, ParamStore<T>&, const LabeledFeatures<T>&,     \
                                             const Exec&);                                                    \
  template TrainResult train_loop<T>(const ModelConfig&, ParamStore<T>&, const LabeledFeatures<T>&,           \
                                     const LabeledFeatures<T>&, const TrainConfig&, const Exec&,              \
                                     const TrainOptions&);

MOSS_INSTANTIATE_TRAIN(float)
MOSS_INSTANTIATE_TRAIN(double)

}  // namespace moss
