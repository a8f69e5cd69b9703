#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "moss/encoder.hpp"
#include "moss/graph.hpp"

namespace moss {

inline constexpr int kMaxOrder = 4;

/// How the visual features enter the next order's STSS.
enum class Fusion { no_fusion, addition, mlp, conv };

std::string fusion_name(Fusion f);
Fusion parse_fusion(const std::string& name);

struct InitPolicy {
  bool zero_branch = true;      ///< out_fc{n} starts at exactly zero
  bool visual_identity = true;  ///< visual_fc starts as the identity map
};

/// Multi-order configuration. `orders` selects which M^(n) are summed into the
/// output; encoders exist for every order from 1 to max(orders) because each
/// order is computed from the previous one.
struct MossConfig {
  std::vector<int> orders{1, 2};
  /// Window per order, index n-1. Empty means (5,9,9) for every order; a
  /// single entry is shared by all orders.
  std::vector<WindowSpec> windows;
  std::size_t D = 64;
  std::size_t C = 64;
  std::size_t blocks = 3;
  Fusion fusion = Fusion::no_fusion;
  InitPolicy init;
  std::uint64_t seed = 0;

  void validate() const;
  int max_order() const;
  bool active(int order) const;
  WindowSpec window(int order) const;
  EncoderSpec encoder_spec(int order) const;
};

void to_json(nlohmann::json& j, const MossConfig& cfg);
void from_json(const nlohmann::json& j, MossConfig& cfg);

/// Deterministic given (cfg, seed). Non-final layers use U(-sqrt(1/fan_in), sqrt(1/fan_in)).
template <class T>
ParamStore<T> init_params(const MossConfig& cfg, std::uint64_t seed);

/// Node handles of a MOSS block inside a larger graph.
struct MossNodes {
  NodeId output = 0;
  std::map<int, NodeId> s;  ///< S^(n), (T,H,W,L,U,V)
  std::map<int, NodeId> m;  ///< M^(n), (T,H,W,C)
};

/// Appends visual_fc(F) + sum_n out_fc{n}(M^(n)) to `graph`.
template <class T>
MossNodes add_moss(Graph<T>& graph, NodeId features, const MossConfig& cfg);

/// Appends the fusion step producing the input of S^(order) from M^(order-1) and F.
template <class T>
NodeId add_fusion(Graph<T>& graph, NodeId m_prev, NodeId features, Fusion kind, int order);

template <class T>
struct OrderOutputs {
  std::map<int, StssTensor<T>> s;
  std::map<int, FeatureMap<T>> m;
};

/// Owns the graph of one MOSS configuration for repeated forward/backward.
template <class T>
class MossModule {
 public:
  explicit MossModule(MossConfig cfg);

  const FeatureMap<T>& forward(const FeatureMap<T>& f, const ParamStore<T>& params, Mode mode,
                               const Exec& exec = {});
  /// Returns d(loss)/dF; parameter gradients are accumulated into `params`.
  Tensor<T> backward(const Tensor<T>& output_grad, ParamStore<T>& params, const Exec& exec = {});

  /// S^(n) and M^(n) cached by the last forward, for every computed order.
  OrderOutputs<T> order_outputs() const;
  std::size_t last_flops() const { return graph_.last_flops(); }
  const MossConfig& config() const { return cfg_; }
  Graph<T>& graph() { return graph_; }

 private:
  MossConfig cfg_;
  Graph<T> graph_;
  MossNodes nodes_;
  FeatureMap<T> out_;
};

template <class T>
FeatureMap<T> moss_forward(const FeatureMap<T>& f, const ParamStore<T>& params, const MossConfig& cfg, Mode mode,
                           const Exec& exec = {});

/// S^(1) = f(F), S^(n) = f(fuse(g^(n-1)(S^(n-1)), F)), M^(n) = g^(n)(S^(n)) for n <= up_to.
/// `params` is required for the learned encoder and for the mlp/conv fusions.
template <class T>
OrderOutputs<T> high_order_stss(const FeatureMap<T>& f, const MossConfig& cfg, int up_to, EncoderKind kind,
                                const ParamStore<T>* params = nullptr, Mode mode = Mode::eval,
                                const Exec& exec = {});

/// Standalone fusion (see add_fusion). `params`/`order` are needed for mlp and conv.
template <class T>
FeatureMap<T> fuse_variant(const FeatureMap<T>& m_prev, const FeatureMap<T>& f, Fusion kind,
                           const ParamStore<T>* params = nullptr, int order = 2, const Exec& exec = {});

}  // namespace moss
