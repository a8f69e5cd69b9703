#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <vector>

#include "json.hpp"
#include "moss/moss.hpp"
#include "moss/synthdata.hpp"

namespace moss {

struct TrainConfig {
  double lr = 1e-3;  ///< peak learning rate
  double weight_decay = 0.15;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double warmup_frac = 0.1;
  double label_smoothing = 0.1;
  std::size_t batch = 16;
  std::size_t iters = 300;
  std::size_t eval_every = 50;  ///< 0 disables periodic evaluation
  bool reverse_augment = false;  ///< reverse half of the sampled clips in time (labels swapped)
  bool recalibrate_bn = true;    ///< recompute running stats over the training set before each evaluation
  std::uint64_t seed = 0;

  std::size_t warmup_iters() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// MOSS block (or visual_fc alone when `branches` is false), mean pool over
/// (T,H,W) and a linear head C -> 4.
struct ModelConfig {
  MossConfig moss;
  bool branches = true;

  std::size_t channels() const { return moss.C; }
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

template <class T>
ParamStore<T> init_classifier(const ModelConfig& cfg, std::uint64_t seed);

template <class T>
class Classifier {
 public:
  explicit Classifier(const ModelConfig& cfg);

  /// 4 logits.
  const Tensor<T>& forward(const FeatureMap<T>& f, const ParamStore<T>& params, Mode mode, const Exec& exec = {});
  void backward(const Tensor<T>& dlogits, Gradients<T>& grads, const Exec& exec = {});
  void commit_running_stats(ParamStore<T>& params, double momentum = ops::kBatchNormMomentum) const {
    graph_.commit_running_stats(params, momentum);
  }
  std::size_t last_flops() const { return graph_.last_flops(); }
  Graph<T>& graph() { return graph_; }

 private:
  Graph<T> graph_;
};

struct LossResult {
  double loss = 0.0;
  std::vector<double> dlogits;
};

/// Target (1-s) on the label plus s/K on every class; loss = -sum target * log_softmax.
LossResult cross_entropy_smoothed(const std::vector<double>& logits, int label, double smoothing);

template <class T>
struct AdamState {
  std::map<std::string, Tensor<T>> m, v;
  std::size_t step = 0;
};

/// One decoupled-weight-decay Adam update of every trainable parameter,
/// using the gradients stored in `params`. `t` is the 1-based step.
template <class T>
void adamw_step(ParamStore<T>& params, AdamState<T>& state, std::size_t t, double lr, const TrainConfig& cfg);

/// Linear warmup to the peak, then cosine decay to 0.
double lr_at(std::size_t iter, const TrainConfig& cfg);

template <class T>
struct LabeledFeatures {
  std::vector<FeatureMap<T>> x;
  std::vector<int> y;

  std::size_t size() const { return y.size(); }
};

template <class T>
LabeledFeatures<T> embed_clips(const std::vector<MotionClip>& clips, const PatchEmbed& embed);

/// Replaces every batch-norm running mean/var with the average of the per-clip
/// train-mode statistics over `data`, committed in index order.
template <class T>
void recalibrate_running_stats(const ModelConfig& cfg, ParamStore<T>& params, const LabeledFeatures<T>& data,
                               const Exec& exec = {});

struct EvalResult {
  double accuracy = 0.0;
  std::array<double, kNumClasses> per_class{};
  std::array<std::array<std::size_t, kNumClasses>, kNumClasses> confusion{};  ///< [true][predicted]
  std::vector<int> predictions;
};

template <class T>
EvalResult evaluate(const ModelConfig& cfg, const ParamStore<T>& params, const LabeledFeatures<T>& data,
                    const Exec& exec = {});

struct TrainOptions {
  std::ostream* metrics = nullptr;     ///< one JSON object per line
  std::filesystem::path checkpoint;    ///< written at every evaluation and at the end when non-empty
  const PatchEmbed* embed = nullptr;   ///< stored in the checkpoint when given
};

struct TrainResult {
  std::vector<double> losses;
  std::vector<std::pair<std::size_t, double>> evals;
  EvalResult final_eval;
  nlohmann::json metrics;
};

/// Deterministic given (cfg.seed, data, configs); the batch items run in
/// parallel with per-item gradient buffers merged in index order, so the
/// result does not depend on exec.threads. Throws NumericError on a
/// non-finite loss or gradient, after writing the last good checkpoint.
template <class T>
TrainResult train_loop(const ModelConfig& model, ParamStore<T>& params, const LabeledFeatures<T>& train,
                       const LabeledFeatures<T>& test, const TrainConfig& cfg, const Exec& exec = {},
                       const TrainOptions& options = {});

struct ProbeConfig {
  std::vector<double> l2_grid{1e-3, 1e-2, 1e-1, 1.0};
  std::size_t folds = 3;
  std::size_t steps = 300;
  double lr = 0.05;
};

/// Softmax regression on the per-clip temporal-mean frame. The L2 strength is
/// picked by k-fold cross-validation on the training clips only.
double mean_frame_probe(const std::vector<MotionClip>& train, const std::vector<MotionClip>& test,
                        const ProbeConfig& cfg = {});

}  // namespace moss
