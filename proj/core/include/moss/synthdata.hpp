#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "moss/stss.hpp"

namespace moss {

enum class ShapeKind { circle, square, cross };

/// Straight motion starting at (x0, y0), moving (dx, dy) pixels per frame.
struct Translate {
  double x0 = 0, y0 = 0, dx = 0, dy = 0;
};

/// Orbit around (cx, cy). Clockwise is on screen (y grows downwards).
struct Orbit {
  double cx = 0, cy = 0, radius = 0, step = 0, phase = 0;
  bool cw = true;
};

using Trajectory = std::variant<Translate, Orbit>;

struct SceneObject {
  ShapeKind shape = ShapeKind::circle;
  double intensity = 1.0;
  double radius = 2.0;
  double arm = 1.0;  ///< half-width of the cross bars
  Trajectory path;
};

struct SceneSpec {
  std::size_t height = 32, width = 32, frames = 8;
  std::vector<SceneObject> objects;
  /// Move object centres to the nearest pixel centre before rasterizing.
  bool snap = true;
};

/// Continuous centre of an object at frame t.
std::pair<double, double> position_at(const Trajectory& path, std::size_t t);

/// Hard-edged rendering, background 0. Returns (T,H,W,1); when `masks` is
/// given it receives one (T,H,W) coverage mask per object, 1 where drawn.
Tensor<float> render_scene(const SceneSpec& spec, std::vector<std::vector<std::uint8_t>>* masks = nullptr);

struct MotionClip {
  Tensor<float> pixels;  ///< (T,H,W,1) in [0,1]
  int label = 0;         ///< 0 left, 1 right, 2 cw, 3 ccw
  std::uint64_t seed = 0;
  std::size_t index = 0;
};

inline constexpr int kNumClasses = 4;
const char* label_name(int label);

/// Frame reversal and horizontal mirroring both swap left/right and cw/ccw.
int swapped_label(int label);
MotionClip reverse_time(const MotionClip& clip);
MotionClip mirror_horizontal(const MotionClip& clip);

/// Randomization ranges of the motion-classification dataset.
struct MotionSpec {
  std::size_t canvas = 32;
  std::size_t frames = 8;
  double speed_min = 1.5, speed_max = 2.5;  ///< px per frame
  int radius_min = 2, radius_max = 3;       ///< object radius in px, inclusive
  double orbit_min = 4.0, orbit_max = 8.0;  ///< orbit radius in px
  double step_min = 0.39269908169872414, step_max = 0.78539816339744828;  ///< pi/8, pi/4
  double intensity_min = 0.3, intensity_max = 1.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const MotionSpec& s);
void from_json(const nlohmann::json& j, MotionSpec& s);

/// Scene of one clip; a pure function of (spec, label, seed, index).
SceneSpec motion_scene(const MotionSpec& spec, int label, std::uint64_t seed, std::size_t index);

/// n_per_class clips per label, ordered by label. Clip i depends only on (spec, seed, i).
std::vector<MotionClip> gen_motion_dataset(std::size_t n_per_class, std::uint64_t seed, const MotionSpec& spec = {});

/// Two sets of three patch-aligned objects on a 48x48 canvas, 5 frames. Set 1
/// moves horizontally, set 2 vertically; object k of set 1 and object k of
/// set 2 share shape and intensity.
struct ToyScene {
  static constexpr std::size_t kObjects = 6;
  Tensor<float> pixels;                            ///< (T,H,W,1)
  std::vector<std::vector<std::uint8_t>> masks;    ///< per object, (T,H,W)
  std::size_t frames = 0, height = 0, width = 0;

  static int set_of(std::size_t k) { return static_cast<int>(k / 3); }
  static std::size_t twin_of(std::size_t k) { return (k + 3) % kObjects; }
  bool covered(std::size_t k, std::size_t t, std::size_t y, std::size_t x) const {
    return masks[k][(t * height + y) * width + x] != 0;
  }
};

ToyScene gen_toy_scene(std::uint64_t seed);

/// Fixed (frozen) projection of non-overlapping patch x patch pixel blocks to C channels.
struct PatchEmbed {
  std::size_t patch = 4;
  Tensor<double> weight;  ///< (patch*patch, C), rows in raster order within the patch
  Tensor<double> bias;    ///< (C)

  std::size_t channels() const { return bias.size(); }
  /// Weights U(-scale, scale), bias U(-bias_scale, bias_scale).
  static PatchEmbed make(std::size_t channels, std::uint64_t seed, double scale = 0.25, double bias_scale = 0.25,
                         std::size_t patch = 4);
};

/// (T,H,W,1) pixels -> (T,H/p,W/p,C).
template <class T>
FeatureMap<T> patch_embed(const Tensor<float>& pixels, const PatchEmbed& embed);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(const std::string& bytes);

/// Writes clip_NNNNN.mosst per clip and manifest.json (index, label, seed, spec hash, split).
void save_dataset(const std::filesystem::path& dir, const std::vector<MotionClip>& clips, const MotionSpec& spec,
                  const std::string& split);

struct LoadedDataset {
  std::vector<MotionClip> clips;
  MotionSpec spec;
  std::string split;
};

LoadedDataset load_dataset(const std::filesystem::path& dir);

}  // namespace moss
