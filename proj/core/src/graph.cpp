#include "moss/graph.hpp"

#include <numeric>

namespace moss {

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.rank();
  if (axes.size() != rank) throw DimensionError("permute: axis list does not match rank of " + to_string(x.shape()));
  Shape out_shape(rank);
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  std::vector<std::size_t> strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = x.dim(axes.at(i));
    strides[i] = in_strides[axes[i]];
  }
  Tensor<T> out(out_shape);
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t inner = out_shape.back(), inner_stride = strides.back();
  const T* src = x.ptr();
  T* dst = out.ptr();
  for (std::size_t o = 0; o < out.size(); o += inner) {
    std::size_t base = 0;
    for (std::size_t i = 0; i + 1 < rank; ++i) base += idx[i] * strides[i];
    for (std::size_t j = 0; j < inner; ++j) dst[o + j] = src[base + j * inner_stride];
    for (std::size_t i = rank - 1; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  return out;
}

template <class T>
NodeId Graph<T>::push(Op op, std::vector<NodeId> inputs) {
  for (auto id : inputs) {
    if (id >= nodes_.size()) throw ConfigError("graph node refers to an undefined input node");
  }
  nodes_.push_back(Node{std::move(op), std::move(inputs)});
  has_forward_ = false;
  return nodes_.size() - 1;
}

template <class T>
NodeId Graph<T>::input() {
  return push(Input{n_inputs_++}, {});
}
template <class T>
NodeId Graph<T>::linear(NodeId x, std::string weight, std::string bias) {
  return push(Linear{std::move(weight), std::move(bias)}, {x});
}
template <class T>
NodeId Graph<T>::conv3x3(NodeId x, std::string kernel, std::string bias) {
  return push(Conv{std::move(kernel), std::move(bias)}, {x});
}
template <class T>
NodeId Graph<T>::batchnorm(NodeId x, std::string prefix) {
  return push(BatchNorm{std::move(prefix)}, {x});
}
template <class T>
NodeId Graph<T>::gelu(NodeId x) {
  return push(Gelu{}, {x});
}
template <class T>
NodeId Graph<T>::add(NodeId a, NodeId b) {
  return push(Add{}, {a, b});
}
template <class T>
NodeId Graph<T>::concat(std::vector<NodeId> parts) {
  if (parts.empty()) throw ConfigError("concat needs at least one input");
  return push(Concat{}, std::move(parts));
}
template <class T>
NodeId Graph<T>::reshape(NodeId x, ShapeFn shape_fn) {
  return push(Reshape{std::move(shape_fn)}, {x});
}
template <class T>
NodeId Graph<T>::permute(NodeId x, std::vector<std::size_t> axes) {
  return push(Permute{std::move(axes)}, {x});
}
template <class T>
NodeId Graph<T>::stss(NodeId f, WindowSpec window, SimilarityPolicy policy) {
  window.validate();
  return push(Stss{window, policy}, {f});
}
template <class T>
NodeId Graph<T>::mean_leading(NodeId x) {
  return push(MeanLeading{}, {x});
}

template <class T>
void Graph<T>::set_output(NodeId id) {
  if (id >= nodes_.size()) throw ConfigError("output refers to an undefined node");
  output_ = id;
  has_output_ = true;
}

template <class T>
const Tensor<T>& Graph<T>::value(NodeId id) const {
  if (!has_forward_) throw StateError("graph values requested before forward");
  return values_.at(id);
}

namespace {

template <class... F>
struct Overloaded : F... {
  using F::operator()...;
};
template <class... F>
Overloaded(F...) -> Overloaded<F...>;

template <class T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  if (dst.empty()) {
    dst = src;
    return;
  }
  if (dst.shape() != src.shape()) {
    throw DimensionError("gradient shape mismatch " + to_string(dst.shape()) + " vs " + to_string(src.shape()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <class T>
void add_param_grad(Gradients<T>& grads, const std::string& name, const Tensor<T>& g) {
  auto it = grads.find(name);
  if (it == grads.end()) {
    grads.emplace(name, g);
  } else {
    add_into(it->second, g);
  }
}

}  // namespace

template <class T>
const Tensor<T>& Graph<T>::forward(const ParamStore<T>& params, std::vector<Tensor<T>> inputs, Mode mode,
                                   const Exec& exec) {
  if (!has_output_) throw StateError("graph has no output node");
  if (inputs.size() != n_inputs_) {
    throw ConfigError("graph expects " + std::to_string(n_inputs_) + " inputs, got " + std::to_string(inputs.size()));
  }
  has_forward_ = false;
  values_.assign(nodes_.size(), Tensor<T>());
  bn_cache_.clear();
  flops_ = 0;
  mode_ = mode;
  params_ = &params;

  for (NodeId id = 0; id < nodes_.size(); ++id) {
    const Node& node = nodes_[id];
    auto in = [&](std::size_t k) -> const Tensor<T>& { return values_[node.inputs[k]]; };
    values_[id] = std::visit(
        Overloaded{
            [&](const Input& op) { return std::move(inputs[op.slot]); },
            [&](const Linear& op) {
              const auto& w = params.value(op.w);
              flops_ += 2 * in(0).size() * w.dim(1);
              return ops::linear(in(0), w, params.value(op.b), exec);
            },
            [&](const Conv& op) {
              const auto& k = params.value(op.k);
              flops_ += 2 * 9 * in(0).size() * k.dim(3);
              return ops::conv3x3(in(0), k, params.value(op.b), exec);
            },
            [&](const BatchNorm& op) {
              auto r = ops::batchnorm(in(0), params.value(op.prefix + ".gamma"), params.value(op.prefix + ".beta"),
                                      params.value(op.prefix + ".rmean"), params.value(op.prefix + ".rvar"), mode,
                                      exec);
              flops_ += 4 * in(0).size();
              bn_cache_[id] = std::move(r.cache);
              return std::move(r.y);
            },
            [&](const Gelu&) {
              flops_ += 8 * in(0).size();
              return ops::gelu(in(0), exec);
            },
            [&](const Add&) {
              const auto& a = in(0);
              const auto& b = in(1);
              if (a.shape() != b.shape()) {
                throw DimensionError("add: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                                     " differ");
              }
              Tensor<T> y = a;
              for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
              flops_ += y.size();
              return y;
            },
            [&](const Concat&) {
              Shape s = in(0).shape();
              std::size_t total = 0;
              for (std::size_t k = 0; k < node.inputs.size(); ++k) {
                Shape sk = in(k).shape();
                total += sk.back();
                sk.back() = s.back();
                if (sk != s) throw DimensionError("concat: leading shapes differ");
              }
              const std::size_t rows = in(0).size() / s.back();
              s.back() = total;
              Tensor<T> y(s);
              std::size_t off = 0;
              for (std::size_t k = 0; k < node.inputs.size(); ++k) {
                const auto& p = in(k);
                const std::size_t c = p.shape().back();
                for (std::size_t r = 0; r < rows; ++r) {
                  for (std::size_t j = 0; j < c; ++j) y[r * total + off + j] = p[r * c + j];
                }
                off += c;
              }
              return y;
            },
            [&](const Reshape& op) { return in(0).reshaped(op.fn(in(0).shape())); },
            [&](const Permute& op) { return moss::permute(in(0), op.axes); },
            [&](const Stss& op) {
              FeatureMap<T> f(in(0));
              flops_ += stss_flops(f.tensor().shape(), op.window);
              return stss_forward(f, op.window, op.policy, exec).data;
            },
            [&](const MeanLeading&) {
              const auto& x = in(0);
              const std::size_t c = x.shape().back();
              const std::size_t rows = x.size() / c;
              std::vector<double> acc(c, 0.0);
              for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < c; ++j) acc[j] += x[r * c + j];
              }
              Tensor<T> y({c});
              for (std::size_t j = 0; j < c; ++j) y[j] = static_cast<T>(acc[j] / static_cast<double>(rows));
              flops_ += x.size();
              return y;
            },
        },
        node.op);
  }
  has_forward_ = true;
  return values_[output_];
}

template <class T>
std::vector<Tensor<T>> Graph<T>::backward(const Tensor<T>& output_grad, Gradients<T>& grads, const Exec& exec) {
  if (!has_forward_) throw StateError("backward called before forward");
  if (output_grad.shape() != values_[output_].shape()) {
    throw DimensionError("output gradient " + to_string(output_grad.shape()) + " does not match output " +
                         to_string(values_[output_].shape()));
  }
  const ParamStore<T>& params = *params_;
  std::vector<Tensor<T>> g(nodes_.size());
  g[output_] = output_grad;
  std::vector<Tensor<T>> input_grads(n_inputs_);

  for (NodeId id = output_ + 1; id-- > 0;) {
    if (g[id].empty()) continue;
    const Node& node = nodes_[id];
    const Tensor<T>& dy = g[id];
    auto in = [&](std::size_t k) -> const Tensor<T>& { return values_[node.inputs[k]]; };
    auto send = [&](std::size_t k, const Tensor<T>& d) { add_into(g[node.inputs[k]], d); };
    std::visit(
        Overloaded{
            [&](const Input& op) { add_into(input_grads[op.slot], dy); },
            [&](const Linear& op) {
              auto r = ops::linear_backward(in(0), params.value(op.w), dy, exec);
              add_param_grad(grads, op.w, r.dw);
              add_param_grad(grads, op.b, r.db);
              send(0, r.dx);
            },
            [&](const Conv& op) {
              auto r = ops::conv3x3_backward(in(0), params.value(op.k), dy, exec);
              add_param_grad(grads, op.k, r.dk);
              add_param_grad(grads, op.b, r.db);
              send(0, r.dx);
            },
            [&](const BatchNorm& op) {
              auto r = ops::batchnorm_backward(bn_cache_.at(id), params.value(op.prefix + ".gamma"), dy, exec);
              add_param_grad(grads, op.prefix + ".gamma", r.dgamma);
              add_param_grad(grads, op.prefix + ".beta", r.dbeta);
              send(0, r.dx);
            },
            [&](const Gelu&) { send(0, ops::gelu_backward(in(0), dy, exec)); },
            [&](const Add&) {
              send(0, dy);
              send(1, dy);
            },
            [&](const Concat&) {
              const std::size_t total = dy.shape().back();
              const std::size_t rows = dy.size() / total;
              std::size_t off = 0;
              for (std::size_t k = 0; k < node.inputs.size(); ++k) {
                const std::size_t c = in(k).shape().back();
                Tensor<T> d(in(k).shape());
                for (std::size_t r = 0; r < rows; ++r) {
                  for (std::size_t j = 0; j < c; ++j) d[r * c + j] = dy[r * total + off + j];
                }
                send(k, d);
                off += c;
              }
            },
            [&](const Reshape&) { send(0, dy.reshaped(in(0).shape())); },
            [&](const Permute& op) {
              std::vector<std::size_t> inverse(op.axes.size());
              for (std::size_t i = 0; i < op.axes.size(); ++i) inverse[op.axes[i]] = i;
              send(0, moss::permute(dy, inverse));
            },
            [&](const Stss& op) { send(0, stss_backward(FeatureMap<T>(in(0)), op.window, op.policy, dy, exec)); },
            [&](const MeanLeading&) {
              const auto& x = in(0);
              const std::size_t c = x.shape().back();
              const std::size_t rows = x.size() / c;
              Tensor<T> d(x.shape());
              for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < c; ++j) d[r * c + j] = static_cast<T>(dy[j] / static_cast<double>(rows));
              }
              send(0, d);
            },
        },
        node.op);
  }
  for (std::size_t k = 0; k < n_inputs_; ++k) {
    if (input_grads[k].empty()) {
      // Inputs not reachable from the output get an explicit zero gradient.
      for (NodeId id = 0; id < nodes_.size(); ++id) {
        if (const auto* op = std::get_if<Input>(&nodes_[id].op); op && op->slot == k) {
          input_grads[k] = Tensor<T>(values_[id].shape());
        }
      }
    }
  }
  return input_grads;
}

template <class T>
std::vector<Tensor<T>> Graph<T>::backward(const Tensor<T>& output_grad, ParamStore<T>& params, const Exec& exec) {
  Gradients<T> grads;
  auto input_grads = backward(output_grad, grads, exec);
  params.accumulate(grads);
  return input_grads;
}

template <class T>
void Graph<T>::commit_running_stats(ParamStore<T>& params, double momentum) const {
  if (!has_forward_ || mode_ != Mode::train) return;
  for (const auto& [id, cache] : bn_cache_) {
    const auto& prefix = std::get<BatchNorm>(nodes_[id].op).prefix;
    ops::update_running_stats(params.value(prefix + ".rmean"), params.value(prefix + ".rvar"), cache, momentum);
  }
}

template Tensor<float> permute<float>(const Tensor<float>&, const std::vector<std::size_t>&);
template Tensor<double> permute<double>(const Tensor<double>&, const std::vector<std::size_t>&);
template class Graph<float>;
template class Graph<double>;

}  // namespace moss
