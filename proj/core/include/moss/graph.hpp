#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "moss/ops.hpp"
#include "moss/params.hpp"
#include "moss/stss.hpp"

namespace moss {

using NodeId = std::size_t;
using ShapeFn = std::function<Shape(const Shape&)>;

/// Transposes axes: out.shape[i] = in.shape[axes[i]].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes);

/// Fixed differentiable computation graph over named parameters.
///
/// Nodes are appended in topological order by the builder methods; forward()
/// evaluates them in that order and caches every activation, backward()
/// visits them in exact reverse order. Parameters are read from a ParamStore
/// passed at call time, so one graph can be run against different stores and
/// copies of a graph can run concurrently.
template <class T>
class Graph {
 public:
  NodeId input();
  NodeId linear(NodeId x, std::string weight, std::string bias);
  NodeId conv3x3(NodeId x, std::string kernel, std::string bias);
  /// Uses `{prefix}.gamma`, `.beta`, `.rmean`, `.rvar`.
  NodeId batchnorm(NodeId x, std::string prefix);
  NodeId gelu(NodeId x);
  NodeId add(NodeId a, NodeId b);
  NodeId concat(std::vector<NodeId> parts);
  NodeId reshape(NodeId x, ShapeFn shape_fn);
  NodeId permute(NodeId x, std::vector<std::size_t> axes);
  NodeId stss(NodeId f, WindowSpec window, SimilarityPolicy policy = {});
  /// Mean over every axis but the last: (..., C) -> (C).
  NodeId mean_leading(NodeId x);

  void set_output(NodeId id);
  NodeId output() const { return output_; }
  std::size_t size() const { return nodes_.size(); }
  std::size_t input_count() const { return n_inputs_; }

  const Tensor<T>& forward(const ParamStore<T>& params, std::vector<Tensor<T>> inputs, Mode mode,
                           const Exec& exec = {});

  /// Reverse-mode pass seeded with d(loss)/d(output). Parameter gradients are
  /// added into `grads`; the returned vector holds one gradient per input.
  /// Reads weights from the store given to the last forward(), which must
  /// still be alive and unmodified.
  std::vector<Tensor<T>> backward(const Tensor<T>& output_grad, Gradients<T>& grads, const Exec& exec = {});

  /// Same as above, accumulating into the store's grad entries.
  std::vector<Tensor<T>> backward(const Tensor<T>& output_grad, ParamStore<T>& params, const Exec& exec = {});

  /// Folds the batch statistics of the last train-mode forward into the
  /// running statistics, in node order.
  void commit_running_stats(ParamStore<T>& params, double momentum = ops::kBatchNormMomentum) const;

  const Tensor<T>& value(NodeId id) const;
  bool has_forward() const { return has_forward_; }
  /// Floating-point operations counted during the last forward.
  std::size_t last_flops() const { return flops_; }

 private:
  struct Input {
    std::size_t slot;
  };
  struct Linear {
    std::string w, b;
  };
  struct Conv {
    std::string k, b;
  };
  struct BatchNorm {
    std::string prefix;
  };
  struct Gelu {};
  struct Add {};
  struct Concat {};
  struct Reshape {
    ShapeFn fn;
  };
  struct Permute {
    std::vector<std::size_t> axes;
  };
  struct Stss {
    WindowSpec window;
    SimilarityPolicy policy;
  };
  struct MeanLeading {};
  using Op = std::variant<Input, Linear, Conv, BatchNorm, Gelu, Add, Concat, Reshape, Permute, Stss, MeanLeading>;

  struct Node {
    Op op;
    std::vector<NodeId> inputs;
  };

  NodeId push(Op op, std::vector<NodeId> inputs);

  std::vector<Node> nodes_;
  std::size_t n_inputs_ = 0;
  NodeId output_ = 0;
  bool has_output_ = false;

  bool has_forward_ = false;
  Mode mode_ = Mode::eval;
  std::size_t flops_ = 0;
  std::vector<Tensor<T>> values_;
  std::map<NodeId, ops::BatchNormCache<T>> bn_cache_;
  const ParamStore<T>* params_ = nullptr;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace moss
