#include "moss/encoder.hpp"

#include <cmath>

#include "moss/layers.hpp"

namespace moss {

namespace layers {

template <class T>
void init_linear(ParamStore<T>& store, const std::string& prefix, std::size_t cin, std::size_t cout, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(cin));
  store.add(prefix + ".w", uniform_tensor<T>({cin, cout}, rng, -bound, bound));
  store.add(prefix + ".b", uniform_tensor<T>({cout}, rng, -bound, bound));
}

template <class T>
void init_linear_zero(ParamStore<T>& store, const std::string& prefix, std::size_t cin, std::size_t cout) {
  store.add(prefix + ".w", Tensor<T>({cin, cout}));
  store.add(prefix + ".b", Tensor<T>({cout}));
}

template <class T>
void init_linear_identity(ParamStore<T>& store, const std::string& prefix, std::size_t c) {
  Tensor<T> w({c, c});
  for (std::size_t i = 0; i < c; ++i) w.at(i, i) = T{1};
  store.add(prefix + ".w", std::move(w));
  store.add(prefix + ".b", Tensor<T>({c}));
}

template <class T>
void init_conv3x3(ParamStore<T>& store, const std::string& prefix, std::size_t cin, std::size_t cout, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(9 * cin));
  store.add(prefix + ".w", uniform_tensor<T>({3, 3, cin, cout}, rng, -bound, bound));
  store.add(prefix + ".b", uniform_tensor<T>({cout}, rng, -bound, bound));
}

template <class T>
void init_batchnorm(ParamStore<T>& store, const std::string& prefix, std::size_t c) {
  store.add(prefix + ".gamma", Tensor<T>({c}, T{1}));
  store.add(prefix + ".beta", Tensor<T>({c}));
  store.add(prefix + ".rmean", Tensor<T>({c}), false);
  store.add(prefix + ".rvar", Tensor<T>({c}, T{1}), false);
}

#define MOSS_INSTANTIATE_LAYERS(T)                                                                       \
  template void init_linear<T>(ParamStore<T>&, const std::string&, std::size_t, std::size_t, Rng&);      \
  template void init_linear_zero<T>(ParamStore<T>&, const std::string&, std::size_t, std::size_t);       \
  template void init_linear_identity<T>(ParamStore<T>&, const std::string&, std::size_t);                \
  template void init_conv3x3<T>(ParamStore<T>&, const std::string&, std::size_t, std::size_t, Rng&);     \
  template void init_batchnorm<T>(ParamStore<T>&, const std::string&, std::size_t);

MOSS_INSTANTIATE_LAYERS(float)
MOSS_INSTANTIATE_LAYERS(double)

}  // namespace layers

void EncoderSpec::validate() const {
  window.validate();
  if (D == 0 || C == 0) throw ConfigError("encoder widths D and C must be positive");
  if (blocks == 0) throw ConfigError("encoder needs at least one conv block");
}

std::string encoder_prefix(int order) { return "enc" + std::to_string(order); }

namespace {
std::string block_prefix(const std::string& prefix, std::size_t i) { return prefix + ".block" + std::to_string(i); }
}  // namespace

template <class T>
void init_encoder_params(ParamStore<T>& store, const std::string& prefix, const EncoderSpec& spec, Rng& rng) {
  spec.validate();
  const auto uv = static_cast<std::size_t>(spec.window.U * spec.window.V);
  const auto L = static_cast<std::size_t>(spec.window.L);
  layers::init_linear(store, prefix + ".spatial_fc", uv, spec.D, rng);
  for (std::size_t i = 0; i < spec.blocks; ++i) {
    layers::init_conv3x3(store, block_prefix(prefix, i) + ".conv", spec.D, spec.D, rng);
    layers::init_batchnorm(store, block_prefix(prefix, i) + ".bn", spec.D);
  }
  layers::init_linear(store, prefix + ".temporal_fc", L * spec.D, spec.C, rng);
}

template <class T>
void check_encoder_params(const ParamStore<T>& store, const std::string& prefix, const EncoderSpec& spec) {
  spec.validate();
  auto expect = [&](const std::string& name, const Shape& want) {
    if (!store.contains(name)) throw ConfigError("encoder parameter '" + name + "' is missing");
    const auto& got = store.value(name).shape();
    if (got != want) {
      throw ConfigError("encoder parameter '" + name + "' has shape " + to_string(got) + ", window and widths need " +
                        to_string(want));
    }
  };
  const auto uv = static_cast<std::size_t>(spec.window.U * spec.window.V);
  const auto L = static_cast<std::size_t>(spec.window.L);
  expect(prefix + ".spatial_fc.w", {uv, spec.D});
  for (std::size_t i = 0; i < spec.blocks; ++i) expect(block_prefix(prefix, i) + ".conv.w", {3, 3, spec.D, spec.D});
  expect(prefix + ".temporal_fc.w", {L * spec.D, spec.C});
}

template <class T>
NodeId add_learned_encoder(Graph<T>& graph, NodeId stss_node, const std::string& prefix, const EncoderSpec& spec) {
  spec.validate();
  const auto L = static_cast<std::size_t>(spec.window.L);
  const std::size_t D = spec.D;
  // (T,H,W,L,U,V) -> (T,H,W,L,U*V)
  NodeId x = graph.reshape(stss_node, [](const Shape& s) {
    if (s.size() != 6) throw DimensionError("encoder expects a (T,H,W,L,U,V) volume, got " + to_string(s));
    return Shape{s[0], s[1], s[2], s[3], s[4] * s[5]};
  });
  x = graph.linear(x, prefix + ".spatial_fc.w", prefix + ".spatial_fc.b");
  // (T,H,W,L,D) -> (T,L,H,W,D) -> (T*L,H,W,D)
  x = graph.permute(x, {0, 3, 1, 2, 4});
  x = graph.reshape(x, [](const Shape& s) { return Shape{s[0] * s[1], s[2], s[3], s[4]}; });
  for (std::size_t i = 0; i < spec.blocks; ++i) {
    const auto bp = block_prefix(prefix, i);
    x = graph.conv3x3(x, bp + ".conv.w", bp + ".conv.b");
    x = graph.batchnorm(x, bp + ".bn");
    x = graph.gelu(x);
  }
  // (T*L,H,W,D) -> (T,L,H,W,D) -> (T,H,W,L,D) -> (T,H,W,L*D), slices concatenated by ascending l
  x = graph.reshape(x, [L](const Shape& s) { return Shape{s[0] / L, L, s[1], s[2], s[3]}; });
  x = graph.permute(x, {0, 2, 3, 1, 4});
  x = graph.reshape(x, [L, D](const Shape& s) { return Shape{s[0], s[1], s[2], L * D}; });
  return graph.linear(x, prefix + ".temporal_fc.w", prefix + ".temporal_fc.b");
}

template <class T>
FeatureMap<T> encode_learned(const StssTensor<T>& s, const ParamStore<T>& params, const std::string& prefix,
                             const EncoderSpec& spec, Mode mode, const Exec& exec) {
  if (!(s.window == spec.window)) throw ConfigError("STSS window does not match the encoder's window");
  check_encoder_params(params, prefix, spec);
  Graph<T> g;
  const NodeId in = g.input();
  g.set_output(add_learned_encoder(g, in, prefix, spec));
  return FeatureMap<T>(g.forward(params, {s.data}, mode, exec));
}

template <class T>
FeatureMap<T> encode_vectorize(const StssTensor<T>& s) {
  const auto& sh = s.data.shape();
  return FeatureMap<T>(s.data.reshaped({sh[0], sh[1], sh[2], sh[3] * sh[4] * sh[5]}));
}

template <class T>
StssTensor<T> devectorize(const FeatureMap<T>& m, const WindowSpec& window) {
  window.validate();
  if (m.channels() != window.volume()) {
    throw DimensionError("devectorize: " + std::to_string(m.channels()) + " channels cannot form window volume " +
                         std::to_string(window.volume()));
  }
  return {m.tensor().reshaped({m.frames(), m.height(), m.width(), static_cast<std::size_t>(window.L),
                               static_cast<std::size_t>(window.U), static_cast<std::size_t>(window.V)}),
          window};
}

template <class T>
FeatureMap<T> encode_mean_pool(const StssTensor<T>& s) {
  const auto& sh = s.data.shape();
  const std::size_t L = sh[3], uv = sh[4] * sh[5];
  const std::size_t queries = sh[0] * sh[1] * sh[2];
  Tensor<T> out({sh[0], sh[1], sh[2], L});
  for (std::size_t q = 0; q < queries; ++q) {
    for (std::size_t l = 0; l < L; ++l) {
      const T* src = s.data.ptr() + (q * L + l) * uv;
      double acc = 0.0;
      for (std::size_t k = 0; k < uv; ++k) acc += src[k];
      out[q * L + l] = static_cast<T>(acc / static_cast<double>(uv));
    }
  }
  return FeatureMap<T>(std::move(out));
}

#define MOSS_INSTANTIATE_ENCODER(T)                                                                               \
  template void init_encoder_params<T>(ParamStore<T>&, const std::string&, const EncoderSpec&, Rng&);             \
  template void check_encoder_params<T>(const ParamStore<T>&, const std::string&, const EncoderSpec&);            \
  template NodeId add_learned_encoder<T>(Graph<T>&, NodeId, const std::string&, const EncoderSpec&);              \
  template FeatureMap<T> encode_learned<T>(const StssTensor<T>&, const ParamStore<T>&, const std::string&,       \
                                           const EncoderSpec&, Mode, const Exec&);                                \
  template FeatureMap<T> encode_vectorize<T>(const StssTensor<T>&);                                               \
  template StssTensor<T> devectorize<T>(const FeatureMap<T>&, const WindowSpec&);                                 \
  template FeatureMap<T> encode_mean_pool<T>(const StssTensor<T>&);

MOSS_INSTANTIATE_ENCODER(float)
MOSS_INSTANTIATE_ENCODER(double)

}  // namespace moss
