#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "moss/moss.hpp"

namespace moss {

enum class Colormap {
  signed_bwr,  ///< blue -> white -> red, for similarities
  norm_gray,   ///< black -> white, for norms
};

using Rgb = std::array<std::uint8_t, 3>;

/// Fixed 256-entry tables built with integer arithmetic only.
const std::array<Rgb, 256>& colormap_table(Colormap map);

struct Heatmap {
  Tensor<double> values;  ///< (H,W)
  Colormap colormap = Colormap::signed_bwr;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
};

/// Min-max normalized table index per pixel: floor(255 * (v - min) / (max - min) + 0.5).
/// A constant map uses index 128 (signed) or 0 (norm).
std::vector<std::uint8_t> colormap_indices(const Heatmap& h);

struct QuerySelector {
  std::size_t t = 0, h = 0, w = 0;
  int order = 1;
};

/// One (H,W) canvas per temporal offset; the (U,V) similarity patch of the
/// query is centred on (h, w), clipped at the borders, zero elsewhere.
template <class T>
std::vector<Heatmap> stss_query_maps(const OrderOutputs<T>& outputs, const QuerySelector& q);

/// values[h, w] = |M[t, h, w, :]|_2.
template <class T>
Heatmap l2norm_map(const FeatureMap<T>& m, std::size_t t);

/// Binary P6 pixmap bytes; every cell becomes a scale x scale block.
std::string encode_ppm(const Heatmap& h, std::size_t scale = 1);
void write_ppm(const Heatmap& h, const std::filesystem::path& path, std::size_t scale = 1);

std::string query_map_name(const std::string& prefix, const QuerySelector& q, int offset);
std::string norm_map_name(const std::string& prefix, int order, std::size_t t);

/// Writes the query maps of every requested order and the norm maps of every
/// frame. Returns the written paths in order.
template <class T>
std::vector<std::filesystem::path> write_visualization(const std::filesystem::path& dir, const std::string& prefix,
                                                       const OrderOutputs<T>& outputs, std::size_t qt, std::size_t qh,
                                                       std::size_t qw, const std::vector<int>& orders,
                                                       std::size_t scale = 1);

}  // namespace moss
