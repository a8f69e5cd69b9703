#include "moss/moss.hpp"

#include <algorithm>

#include "moss/layers.hpp"

namespace moss {

std::string fusion_name(Fusion f) {
  switch (f) {
    case Fusion::no_fusion: return "no_fusion";
    case Fusion::addition: return "addition";
    case Fusion::mlp: return "mlp";
    case Fusion::conv: return "conv";
  }
  throw ConfigError("unknown fusion kind");
}

Fusion parse_fusion(const std::string& name) {
  for (Fusion f : {Fusion::no_fusion, Fusion::addition, Fusion::mlp, Fusion::conv}) {
    if (fusion_name(f) == name) return f;
  }
  throw ConfigError("unknown fusion '" + name + "' (expected no_fusion, addition, mlp or conv)");
}

void MossConfig::validate() const {
  if (orders.empty()) throw ConfigError("orders must be non-empty");
  for (std::size_t i = 0; i < orders.size(); ++i) {
    if (orders[i] < 1 || orders[i] > kMaxOrder) {
      throw ConfigError("order " + std::to_string(orders[i]) + " outside the supported range 1.." +
                        std::to_string(kMaxOrder));
    }
    if (i > 0 && orders[i] <= orders[i - 1]) throw ConfigError("orders must be strictly increasing");
  }
  if (windows.size() > 1 && windows.size() < static_cast<std::size_t>(max_order())) {
    throw ConfigError("a window is needed for every order up to " + std::to_string(max_order()));
  }
  for (const auto& w : windows) w.validate();
  if (D == 0 || C == 0 || blocks == 0) throw ConfigError("D, C and blocks must be positive");
}

int MossConfig::max_order() const { return orders.empty() ? 0 : *std::max_element(orders.begin(), orders.end()); }

bool MossConfig::active(int order) const { return std::find(orders.begin(), orders.end(), order) != orders.end(); }

WindowSpec MossConfig::window(int order) const {
  if (order < 1 || order > kMaxOrder) throw ConfigError("order " + std::to_string(order) + " is not supported");
  if (windows.empty()) return WindowSpec{};
  if (windows.size() == 1) return windows.front();
  if (static_cast<std::size_t>(order) > windows.size()) {
    throw ConfigError("no window configured for order " + std::to_string(order));
  }
  return windows[order - 1];
}

EncoderSpec MossConfig::encoder_spec(int order) const { return EncoderSpec{window(order), D, C, blocks}; }

void to_json(nlohmann::json& j, const MossConfig& cfg) {
  nlohmann::json windows = nlohmann::json::object();
  for (int n = 1; n <= cfg.max_order(); ++n) {
    const auto w = cfg.window(n);
    windows[std::to_string(n)] = {{"L", w.L}, {"U", w.U}, {"V", w.V}};
  }
  j = nlohmann::json{{"orders", cfg.orders},
                     {"window", windows},
                     {"D", cfg.D},
                     {"C", cfg.C},
                     {"blocks", cfg.blocks},
                     {"fusion", fusion_name(cfg.fusion)},
                     {"init", {{"zero_branch", cfg.init.zero_branch}, {"visual_identity", cfg.init.visual_identity}}},
                     {"seed", cfg.seed}};
}

void from_json(const nlohmann::json& j, MossConfig& cfg) {
  try {
    MossConfig out;
    out.orders = j.at("orders").get<std::vector<int>>();
    out.D = j.value("D", out.D);
    out.C = j.value("C", out.C);
    out.blocks = j.value("blocks", out.blocks);
    out.fusion = parse_fusion(j.value("fusion", std::string("no_fusion")));
    if (j.contains("init")) {
      out.init.zero_branch = j["init"].value("zero_branch", true);
      out.init.visual_identity = j["init"].value("visual_identity", true);
    }
    out.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("window")) {
      const auto& w = j["window"];
      for (int n = 1; n <= out.max_order(); ++n) {
        const auto key = std::to_string(n);
        if (!w.contains(key)) throw ConfigError("window for order " + key + " is missing");
        out.windows.push_back(WindowSpec{w[key].at("L").get<int>(), w[key].at("U").get<int>(), w[key].at("V").get<int>()});
      }
    }
    out.validate();
    cfg = std::move(out);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed MOSS config: ") + e.what());
  }
}

namespace {

std::string fuse_prefix(int order) { return "fuse" + std::to_string(order); }
std::string out_prefix(int order) { return "out_fc" + std::to_string(order); }

}  // namespace

template <class T>
ParamStore<T> init_params(const MossConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamStore<T> store;
  if (cfg.init.visual_identity) {
    layers::init_linear_identity(store, "visual_fc", cfg.C);
  } else {
    layers::init_linear(store, "visual_fc", cfg.C, cfg.C, rng);
  }
  for (int n = 1; n <= cfg.max_order(); ++n) {
    init_encoder_params(store, encoder_prefix(n), cfg.encoder_spec(n), rng);
    if (n >= 2) {
      if (cfg.fusion == Fusion::mlp) {
        layers::init_linear(store, fuse_prefix(n) + ".fc1", 2 * cfg.C, cfg.C, rng);
        layers::init_linear(store, fuse_prefix(n) + ".fc2", cfg.C, cfg.C, rng);
      } else if (cfg.fusion == Fusion::conv) {
        layers::init_conv3x3(store, fuse_prefix(n) + ".conv", 2 * cfg.C, cfg.C, rng);
      }
    }
    if (cfg.active(n)) {
      if (cfg.init.zero_branch) {
        layers::init_linear_zero(store, out_prefix(n), cfg.C, cfg.C);
      } else {
        layers::init_linear(store, out_prefix(n), cfg.C, cfg.C, rng);
      }
    }
  }
  return store;
}

template <class T>
NodeId add_fusion(Graph<T>& graph, NodeId m_prev, NodeId features, Fusion kind, int order) {
  switch (kind) {
    case Fusion::no_fusion: return m_prev;
    case Fusion::addition: return graph.add(m_prev, features);
    case Fusion::mlp: {
      const auto p = fuse_prefix(order);
      NodeId x = graph.concat({features, m_prev});
      x = graph.linear(x, p + ".fc1.w", p + ".fc1.b");
      x = graph.gelu(x);
      return graph.linear(x, p + ".fc2.w", p + ".fc2.b");
    }
    case Fusion::conv: {
      const auto p = fuse_prefix(order);
      return graph.conv3x3(graph.concat({features, m_prev}), p + ".conv.w", p + ".conv.b");
    }
  }
  throw ConfigError("unknown fusion kind");
}

namespace {

template <class T>
MossNodes add_orders(Graph<T>& graph, NodeId features, const MossConfig& cfg, int up_to) {
  MossNodes nodes;
  NodeId x = features;
  for (int n = 1; n <= up_to; ++n) {
    if (n >= 2) x = add_fusion(graph, nodes.m.at(n - 1), features, cfg.fusion, n);
    nodes.s[n] = graph.stss(x, cfg.window(n));
    nodes.m[n] = add_learned_encoder(graph, nodes.s[n], encoder_prefix(n), cfg.encoder_spec(n));
  }
  return nodes;
}

void check_order(int up_to) {
  if (up_to < 1 || up_to > kMaxOrder) {
    throw ConfigError("order " + std::to_string(up_to) + " is not supported (1.." + std::to_string(kMaxOrder) + ")");
  }
}

}  // namespace

template <class T>
MossNodes add_moss(Graph<T>& graph, NodeId features, const MossConfig& cfg) {
  cfg.validate();
  MossNodes nodes = add_orders(graph, features, cfg, cfg.max_order());
  NodeId out = graph.linear(features, "visual_fc.w", "visual_fc.b");
  for (int n : cfg.orders) {
    out = graph.add(out, graph.linear(nodes.m.at(n), out_prefix(n) + ".w", out_prefix(n) + ".b"));
  }
  nodes.output = out;
  return nodes;
}

template <class T>
MossModule<T>::MossModule(MossConfig cfg) : cfg_(std::move(cfg)) {
  const NodeId in = graph_.input();
  nodes_ = add_moss(graph_, in, cfg_);
  graph_.set_output(nodes_.output);
}

template <class T>
const FeatureMap<T>& MossModule<T>::forward(const FeatureMap<T>& f, const ParamStore<T>& params, Mode mode,
                                            const Exec& exec) {
  if (f.channels() != cfg_.C) {
    throw DimensionError("feature map has " + std::to_string(f.channels()) + " channels, config expects " +
                         std::to_string(cfg_.C));
  }
  out_ = FeatureMap<T>(graph_.forward(params, {f.tensor()}, mode, exec));
  return out_;
}

template <class T>
Tensor<T> MossModule<T>::backward(const Tensor<T>& output_grad, ParamStore<T>& params, const Exec& exec) {
  return graph_.backward(output_grad, params, exec).at(0);
}

template <class T>
OrderOutputs<T> MossModule<T>::order_outputs() const {
  if (!graph_.has_forward()) throw StateError("order outputs requested before forward");
  OrderOutputs<T> out;
  for (const auto& [n, id] : nodes_.s) out.s.emplace(n, StssTensor<T>{graph_.value(id), cfg_.window(n)});
  for (const auto& [n, id] : nodes_.m) out.m.emplace(n, FeatureMap<T>(graph_.value(id)));
  return out;
}

template <class T>
FeatureMap<T> moss_forward(const FeatureMap<T>& f, const ParamStore<T>& params, const MossConfig& cfg, Mode mode,
                           const Exec& exec) {
  MossModule<T> module(cfg);
  return module.forward(f, params, mode, exec);
}

template <class T>
FeatureMap<T> fuse_variant(const FeatureMap<T>& m_prev, const FeatureMap<T>& f, Fusion kind,
                           const ParamStore<T>* params, int order, const Exec& exec) {
  const auto& a = m_prev.tensor().shape();
  const auto& b = f.tensor().shape();
  if (a[0] != b[0] || a[1] != b[1] || a[2] != b[2]) {
    throw DimensionError("fusion inputs differ in (T,H,W): " + to_string(a) + " vs " + to_string(b));
  }
  if (kind == Fusion::no_fusion) return m_prev;
  if (kind == Fusion::addition && a[3] != b[3]) {
    throw DimensionError("addition fusion needs equal channels, got " + std::to_string(a[3]) + " and " +
                         std::to_string(b[3]));
  }
  if ((kind == Fusion::mlp || kind == Fusion::conv) && params == nullptr) {
    throw ConfigError(fusion_name(kind) + " fusion needs parameters");
  }
  static const ParamStore<T> empty;
  Graph<T> g;
  const NodeId m_in = g.input();
  const NodeId f_in = g.input();
  g.set_output(add_fusion(g, m_in, f_in, kind, order));
  return FeatureMap<T>(g.forward(params ? *params : empty, {m_prev.tensor(), f.tensor()}, Mode::eval, exec));
}

template <class T>
OrderOutputs<T> high_order_stss(const FeatureMap<T>& f, const MossConfig& cfg, int up_to, EncoderKind kind,
                                const ParamStore<T>* params, Mode mode, const Exec& exec) {
  check_order(up_to);
  for (int n = 1; n <= up_to; ++n) cfg.window(n).validate();
  OrderOutputs<T> out;
  if (kind == EncoderKind::learned) {
    if (params == nullptr) throw ConfigError("the learned encoder needs parameters");
    for (int n = 1; n <= up_to; ++n) check_encoder_params(*params, encoder_prefix(n), cfg.encoder_spec(n));
    Graph<T> g;
    const NodeId in = g.input();
    const MossNodes nodes = add_orders(g, in, cfg, up_to);
    g.set_output(nodes.m.at(up_to));
    g.forward(*params, {f.tensor()}, mode, exec);
    for (int n = 1; n <= up_to; ++n) {
      out.s.emplace(n, StssTensor<T>{g.value(nodes.s.at(n)), cfg.window(n)});
      out.m.emplace(n, FeatureMap<T>(g.value(nodes.m.at(n))));
    }
    return out;
  }
  FeatureMap<T> x = f;
  for (int n = 1; n <= up_to; ++n) {
    if (n >= 2) x = fuse_variant(out.m.at(n - 1), f, cfg.fusion, params, n, exec);
    auto s = stss_forward(x, cfg.window(n), SimilarityPolicy{}, exec);
    out.m.emplace(n, kind == EncoderKind::vectorize ? encode_vectorize(s) : encode_mean_pool(s));
    out.s.emplace(n, std::move(s));
  }
  return out;
}

#define MOSS_INSTANTIATE_MOSS(T)                                                                               \
  template ParamStore<T> init_params<T>(const MossConfig&, std::uint64_t);                                     \
  template MossNodes add_moss<T>(Graph<T>&, NodeId, const MossConfig&);                                        \
  template NodeId add_fusion<T>(Graph<T>&, NodeId, NodeId, Fusion, int);                                       \
  template class MossModule<T>;                                                                                \
  template FeatureMap<T> moss_forward<T>(const FeatureMap<T>&, const ParamStore<T>&, const MossConfig&, Mode,  \
                                         const Exec&);                                                         \
  template OrderOutputs<T> high_order_stss<T>(const FeatureMap<T>&, const MossConfig&, int, EncoderKind,       \
                                              const ParamStore<T>*, Mode, const Exec&);                        \
  template FeatureMap<T> fuse_variant<T>(const FeatureMap<T>&, const FeatureMap<T>&, Fusion, const ParamStore<T>*, \
                                         int, const Exec&);

MOSS_INSTANTIATE_MOSS(float)
MOSS_INSTANTIATE_MOSS(double)

}  // namespace moss
