#pragma once

#include <string>

#include "moss/graph.hpp"
#include "moss/stss.hpp"

namespace moss {

/// Late-fusion STSS encoder hyperparameters.
struct EncoderSpec {
  WindowSpec window;
  std::size_t D = 64;       ///< internal width
  std::size_t C = 64;       ///< output channels
  std::size_t blocks = 3;   ///< Conv3x3-BatchNorm-GELU blocks

  void validate() const;
};

enum class EncoderKind { learned, vectorize, mean_pool };

/// Parameter prefix of the order-n encoder ("enc{n}").
std::string encoder_prefix(int order);

/// Registers `{prefix}.spatial_fc`, `{prefix}.block{i}.conv`, `{prefix}.block{i}.bn`
/// and `{prefix}.temporal_fc` in the store.
template <class T>
void init_encoder_params(ParamStore<T>& store, const std::string& prefix, const EncoderSpec& spec, Rng& rng);

/// Throws ConfigError when the stored shapes do not fit the spec's window.
template <class T>
void check_encoder_params(const ParamStore<T>& store, const std::string& prefix, const EncoderSpec& spec);

/// Appends the encoder to a graph. Input node is a (T,H,W,L,U,V) volume,
/// the returned node is (T,H,W,C):
///   (T,H,W,L,U*V) -> spatial_fc -> (T,H,W,L,D) -> (T*L,H,W,D)
///   -> blocks x [conv3x3, batchnorm, gelu] -> (T,H,W,L*D) -> temporal_fc.
/// The conv blocks are shared across the L offset slices and batch-norm pools
/// its statistics over them.
template <class T>
NodeId add_learned_encoder(Graph<T>& graph, NodeId stss_node, const std::string& prefix, const EncoderSpec& spec);

/// Standalone evaluation of the learned encoder.
template <class T>
FeatureMap<T> encode_learned(const StssTensor<T>& s, const ParamStore<T>& params, const std::string& prefix,
                             const EncoderSpec& spec, Mode mode, const Exec& exec = {});

/// (T,H,W,L,U,V) -> (T,H,W,L*U*V), values unchanged.
template <class T>
FeatureMap<T> encode_vectorize(const StssTensor<T>& s);

/// Inverse of encode_vectorize.
template <class T>
StssTensor<T> devectorize(const FeatureMap<T>& m, const WindowSpec& window);

/// Channel l is the mean of the (U,V) map at temporal offset l.
template <class T>
FeatureMap<T> encode_mean_pool(const StssTensor<T>& s);

}  // namespace moss
