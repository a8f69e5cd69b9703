#pragma once

#include <string>
#include <utility>
#include <vector>

#include "moss/synthdata.hpp"
#include "moss/viz.hpp"

namespace moss::testing {

struct GoldenCase {
  std::string file;  ///< relative to the golden directory
  std::string bytes;
};

/// Constant feature map at order 1, and the order-1 query maps of
/// `moss visualize --toy 0 --orders 1 --query 2,6,6 --scale 1`.
inline std::vector<GoldenCase> golden_cases() {
  std::vector<GoldenCase> out;
  {
    MossConfig cfg;
    cfg.orders = {1};
    cfg.windows = {WindowSpec{3, 3, 5}};
    const FeatureMap<float> f(Tensor<float>({3, 6, 7, 4}, 0.5f));
    const auto maps = stss_query_maps(high_order_stss(f, cfg, 1, EncoderKind::vectorize), QuerySelector{1, 3, 3, 1});
    out.push_back({"constant_order1.ppm", encode_ppm(maps[1], 4)});
  }
  {
    MossConfig cfg;
    const auto embed = PatchEmbed::make(cfg.C, 5);
    const auto f = patch_embed<float>(gen_toy_scene(0).pixels, embed);
    const auto params = init_params<float>(cfg, cfg.seed);
    const QuerySelector q{2, 6, 6, 1};
    const auto maps = stss_query_maps(high_order_stss(f, cfg, 1, EncoderKind::learned, &params), q);
    const int half = static_cast<int>(maps.size() / 2);
    for (std::size_t l = 0; l < maps.size(); ++l) {
      out.push_back({"toy0/" + query_map_name("viz", q, static_cast<int>(l) - half), encode_ppm(maps[l])});
    }
  }
  return out;
}

}  // namespace moss::testing
