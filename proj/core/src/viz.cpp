#include "moss/viz.hpp"

#include <cmath>
#include <fstream>

namespace moss {

const std::array<Rgb, 256>& colormap_table(Colormap map) {
  static const auto bwr = [] {
    std::array<Rgb, 256> t{};
    for (int i = 0; i < 256; ++i) {
      if (i < 128) {
        const auto v = static_cast<std::uint8_t>(2 * i);
        t[i] = {v, v, 255};
      } else {
        const auto v = static_cast<std::uint8_t>(2 * (255 - i));
        t[i] = {255, v, v};
      }
    }
    return t;
  }();
  static const auto gray = [] {
    std::array<Rgb, 256> t{};
    for (int i = 0; i < 256; ++i) {
      const auto v = static_cast<std::uint8_t>(i);
      t[i] = {v, v, v};
    }
    return t;
  }();
  return map == Colormap::signed_bwr ? bwr : gray;
}

std::vector<std::uint8_t> colormap_indices(const Heatmap& h) {
  const auto vals = h.values.data();
  std::vector<std::uint8_t> idx(vals.size());
  if (vals.empty()) return idx;
  double lo = vals[0], hi = vals[0];
  for (double v : vals) {
    if (!std::isfinite(v)) throw NumericError("heatmap contains a non-finite value");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi == lo) {
    std::fill(idx.begin(), idx.end(), h.colormap == Colormap::signed_bwr ? 128 : 0);
    return idx;
  }
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const double norm = (vals[i] - lo) / (hi - lo);
    idx[i] = static_cast<std::uint8_t>(std::min(255.0, std::floor(255.0 * norm + 0.5)));
  }
  return idx;
}

template <class T>
std::vector<Heatmap> stss_query_maps(const OrderOutputs<T>& outputs, const QuerySelector& q) {
  const auto it = outputs.s.find(q.order);
  if (it == outputs.s.end()) throw InputError("order " + std::to_string(q.order) + " is not in the outputs");
  const auto& s = it->second;
  const auto& sh = s.data.shape();
  if (q.t >= sh[0] || q.h >= sh[1] || q.w >= sh[2]) {
    throw InputError("query (" + std::to_string(q.t) + "," + std::to_string(q.h) + "," + std::to_string(q.w) +
                     ") is outside the feature grid " + to_string({sh[0], sh[1], sh[2]}));
  }
  const std::size_t H = sh[1], W = sh[2], L = sh[3], U = sh[4], V = sh[5];
  std::vector<Heatmap> maps;
  for (std::size_t l = 0; l < L; ++l) {
    Heatmap hm{Tensor<double>({H, W}), Colormap::signed_bwr};
    for (std::size_t u = 0; u < U; ++u) {
      const auto y = static_cast<std::ptrdiff_t>(q.h + u) - static_cast<std::ptrdiff_t>(U / 2);
      if (y < 0 || y >= static_cast<std::ptrdiff_t>(H)) continue;
      for (std::size_t v = 0; v < V; ++v) {
        const auto x = static_cast<std::ptrdiff_t>(q.w + v) - static_cast<std::ptrdiff_t>(V / 2);
        if (x < 0 || x >= static_cast<std::ptrdiff_t>(W)) continue;
        hm.values.at(y, x) = static_cast<double>(s.data.at(q.t, q.h, q.w, l, u, v));
      }
    }
    maps.push_back(std::move(hm));
  }
  return maps;
}

template <class T>
Heatmap l2norm_map(const FeatureMap<T>& m, std::size_t t) {
  if (t >= m.frames()) throw InputError("frame " + std::to_string(t) + " is out of range");
  const std::size_t H = m.height(), W = m.width(), C = m.channels();
  Heatmap hm{Tensor<double>({H, W}), Colormap::norm_gray};
  const T* base = m.tensor().ptr() + t * H * W * C;
  for (std::size_t p = 0; p < H * W; ++p) {
    double acc = 0.0;
    for (std::size_t c = 0; c < C; ++c) acc += static_cast<double>(base[p * C + c]) * base[p * C + c];
    hm.values[p] = std::sqrt(acc);
  }
  return hm;
}

std::string encode_ppm(const Heatmap& h, std::size_t scale) {
  if (scale == 0) throw ConfigError("ppm scale must be positive");
  const auto idx = colormap_indices(h);
  const auto& table = colormap_table(h.colormap);
  const std::size_t H = h.height(), W = h.width();
  std::string out = "P6\n" + std::to_string(W * scale) + " " + std::to_string(H * scale) + "\n255\n";
  out.reserve(out.size() + 3 * H * W * scale * scale);
  for (std::size_t y = 0; y < H * scale; ++y) {
    for (std::size_t x = 0; x < W * scale; ++x) {
      const auto& c = table[idx[(y / scale) * W + x / scale]];
      out.append(reinterpret_cast<const char*>(c.data()), 3);
    }
  }
  return out;
}

void write_ppm(const Heatmap& h, const std::filesystem::path& path, std::size_t scale) {
  const auto bytes = encode_ppm(h, scale);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

std::string query_map_name(const std::string& prefix, const QuerySelector& q, int offset) {
  return prefix + "_order" + std::to_string(q.order) + "_q" + std::to_string(q.t) + "-" + std::to_string(q.h) + "-" +
         std::to_string(q.w) + "_l" + std::to_string(offset) + ".ppm";
}

std::string norm_map_name(const std::string& prefix, int order, std::size_t t) {
  return prefix + "_norm_order" + std::to_string(order) + "_t" + std::to_string(t) + ".ppm";
}

template <class T>
std::vector<std::filesystem::path> write_visualization(const std::filesystem::path& dir, const std::string& prefix,
                                                       const OrderOutputs<T>& outputs, std::size_t qt, std::size_t qh,
                                                       std::size_t qw, const std::vector<int>& orders,
                                                       std::size_t scale) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> written;
  for (int n : orders) {
    const QuerySelector q{qt, qh, qw, n};
    const auto maps = stss_query_maps(outputs, q);
    const int half = static_cast<int>(maps.size() / 2);
    for (std::size_t l = 0; l < maps.size(); ++l) {
      written.push_back(dir / query_map_name(prefix, q, static_cast<int>(l) - half));
      write_ppm(maps[l], written.back(), scale);
    }
    const auto m = outputs.m.find(n);
    if (m == outputs.m.end()) continue;
    for (std::size_t t = 0; t < m->second.frames(); ++t) {
      written.push_back(dir / norm_map_name(prefix, n, t));
      write_ppm(l2norm_map(m->second, t), written.back(), scale);
    }
  }
  return written;
}

#define MOSS_INSTANTIATE_VIZ(T)                                                                                \
  template std::vector<Heatmap> stss_query_maps<T>(const OrderOutputs<T>&, const QuerySelector&);             \
  template Heatmap l2norm_map<T>(const FeatureMap<T>&, std::size_t);                                           \
  template std::vector<std::filesystem::path> write_visualization<T>(                                          \
      const std::filesystem::path&, const std::string&, const OrderOutputs<T>&, std::size_t, std::size_t,      \
      std::size_t, const std::vector<int>&, std::size_t);

MOSS_INSTANTIATE_VIZ(float)
MOSS_INSTANTIATE_VIZ(double)

}  // namespace moss
