#include "moss/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "moss/serialize.hpp"

namespace moss {

namespace {

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

Rng clip_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

bool covers(const SceneObject& o, double dx, double dy) {
  const double ax = std::abs(dx), ay = std::abs(dy), r = o.radius;
  switch (o.shape) {
    case ShapeKind::circle: return dx * dx + dy * dy <= r * r + 0.3;
    case ShapeKind::square: return ax <= r && ay <= r;
    case ShapeKind::cross: return (ax <= r && ay <= o.arm) || (ax <= o.arm && ay <= r);
  }
  return false;
}

std::pair<double, double> render_centre(const SceneSpec& spec, const Trajectory& path, std::size_t t) {
  auto [x, y] = position_at(path, t);
  if (spec.snap) {
    x = std::floor(x) + 0.5;
    y = std::floor(y) + 0.5;
  }
  return {x, y};
}

// Moves a trajectory by whole pixels so the object's extent stays on the canvas in every frame.
void shift_inside(SceneObject& o, const SceneSpec& spec) {
  double lo_x = 1e300, hi_x = -1e300, lo_y = 1e300, hi_y = -1e300;
  for (std::size_t t = 0; t < spec.frames; ++t) {
    const auto [x, y] = render_centre(spec, o.path, t);
    lo_x = std::min(lo_x, x - o.radius);
    hi_x = std::max(hi_x, x + o.radius);
    lo_y = std::min(lo_y, y - o.radius);
    hi_y = std::max(hi_y, y + o.radius);
  }
  const auto W = static_cast<double>(spec.width), H = static_cast<double>(spec.height);
  if (hi_x - lo_x > W || hi_y - lo_y > H) throw ConfigError("object path does not fit on the canvas");
  double sx = 0, sy = 0;
  if (lo_x < 0) sx = std::ceil(-lo_x);
  if (hi_x > W) sx = -std::ceil(hi_x - W);
  if (lo_y < 0) sy = std::ceil(-lo_y);
  if (hi_y > H) sy = -std::ceil(hi_y - H);
  std::visit(
      [&](auto& p) {
        if constexpr (std::is_same_v<std::decay_t<decltype(p)>, Translate>) {
          p.x0 += sx;
          p.y0 += sy;
        } else {
          p.cx += sx;
          p.cy += sy;
        }
      },
      o.path);
}

}  // namespace

std::pair<double, double> position_at(const Trajectory& path, std::size_t t) {
  const auto ft = static_cast<double>(t);
  if (const auto* tr = std::get_if<Translate>(&path)) return {tr->x0 + tr->dx * ft, tr->y0 + tr->dy * ft};
  const auto& o = std::get<Orbit>(path);
  const double a = o.phase + (o.cw ? 1.0 : -1.0) * o.step * ft;
  return {o.cx + o.radius * std::cos(a), o.cy + o.radius * std::sin(a)};
}

Tensor<float> render_scene(const SceneSpec& spec, std::vector<std::vector<std::uint8_t>>* masks) {
  const std::size_t T = spec.frames, H = spec.height, W = spec.width;
  Tensor<float> pixels({T, H, W, 1});
  if (masks) masks->assign(spec.objects.size(), std::vector<std::uint8_t>(T * H * W, 0));
  for (std::size_t k = 0; k < spec.objects.size(); ++k) {
    const auto& o = spec.objects[k];
    for (std::size_t t = 0; t < T; ++t) {
      const auto [cx, cy] = render_centre(spec, o.path, t);
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          if (!covers(o, static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy)) continue;
          pixels[(t * H + y) * W + x] = static_cast<float>(o.intensity);
          if (masks) (*masks)[k][(t * H + y) * W + x] = 1;
        }
      }
    }
  }
  return pixels;
}

const char* label_name(int label) {
  static constexpr std::array<const char*, kNumClasses> names{"left", "right", "cw", "ccw"};
  if (label < 0 || label >= kNumClasses) throw InputError("label " + std::to_string(label) + " out of range");
  return names[label];
}

int swapped_label(int label) {
  label_name(label);
  return label ^ 1;
}

MotionClip reverse_time(const MotionClip& clip) {
  const auto& s = clip.pixels.shape();
  const std::size_t frame = s[1] * s[2] * s[3];
  MotionClip out = clip;
  for (std::size_t t = 0; t < s[0]; ++t) {
    std::copy_n(clip.pixels.ptr() + (s[0] - 1 - t) * frame, frame, out.pixels.ptr() + t * frame);
  }
  out.label = swapped_label(clip.label);
  return out;
}

MotionClip mirror_horizontal(const MotionClip& clip) {
  const auto& s = clip.pixels.shape();
  const std::size_t W = s[2];
  MotionClip out = clip;
  for (std::size_t row = 0; row < s[0] * s[1]; ++row) {
    for (std::size_t x = 0; x < W; ++x) out.pixels[row * W + x] = clip.pixels[row * W + (W - 1 - x)];
  }
  out.label = swapped_label(clip.label);
  return out;
}

void MotionSpec::validate() const {
  if (speed_min <= 0.0) throw ConfigError("motion speed must be positive (got " + std::to_string(speed_min) + ")");
  if (speed_min < 1.0) throw ConfigError("motion speed must be at least 1 px/frame");
  if (step_min < std::numbers::pi / 8 - 1e-12) throw ConfigError("angular step must be at least pi/8");
  if (speed_max < speed_min || step_max < step_min || orbit_max < orbit_min || radius_max < radius_min ||
      intensity_max < intensity_min) {
    throw ConfigError("motion spec ranges must satisfy min <= max");
  }
  if (radius_min < 1 || orbit_min <= 0.0) throw ConfigError("object and orbit radii must be positive");
  if (intensity_min <= 0.0 || intensity_max > 1.0) throw ConfigError("intensity must lie in (0, 1]");
  if (frames < 2 || canvas % 4 != 0 || canvas == 0) throw ConfigError("need >= 2 frames and a canvas divisible by 4");
  const double c = static_cast<double>(canvas);
  if (speed_max * static_cast<double>(frames - 1) + 2.0 * radius_max + 1.0 >= c ||
      2.0 * (orbit_max + radius_max) + 1.0 >= c) {
    throw ConfigError("motion ranges do not fit the canvas");
  }
}

void to_json(nlohmann::json& j, const MotionSpec& s) {
  j = nlohmann::json{{"canvas", s.canvas},       {"frames", s.frames},         {"speed_min", s.speed_min},
                     {"speed_max", s.speed_max}, {"radius_min", s.radius_min}, {"radius_max", s.radius_max},
                     {"orbit_min", s.orbit_min}, {"orbit_max", s.orbit_max},   {"step_min", s.step_min},
                     {"step_max", s.step_max},   {"intensity_min", s.intensity_min},
                     {"intensity_max", s.intensity_max}};
}

void from_json(const nlohmann::json& j, MotionSpec& s) {
  MotionSpec d;
  s.canvas = j.value("canvas", d.canvas);
  s.frames = j.value("frames", d.frames);
  s.speed_min = j.value("speed_min", d.speed_min);
  s.speed_max = j.value("speed_max", d.speed_max);
  s.radius_min = j.value("radius_min", d.radius_min);
  s.radius_max = j.value("radius_max", d.radius_max);
  s.orbit_min = j.value("orbit_min", d.orbit_min);
  s.orbit_max = j.value("orbit_max", d.orbit_max);
  s.step_min = j.value("step_min", d.step_min);
  s.step_max = j.value("step_max", d.step_max);
  s.intensity_min = j.value("intensity_min", d.intensity_min);
  s.intensity_max = j.value("intensity_max", d.intensity_max);
}

SceneSpec motion_scene(const MotionSpec& spec, int label, std::uint64_t seed, std::size_t index) {
  spec.validate();
  label_name(label);
  Rng rng = clip_rng(seed, index);
  SceneSpec scene;
  scene.height = scene.width = spec.canvas;
  scene.frames = spec.frames;

  SceneObject o;
  o.shape = static_cast<ShapeKind>(uniform_index(rng, 3));
  o.intensity = uniform(rng, spec.intensity_min, spec.intensity_max);
  o.radius = static_cast<double>(spec.radius_min) +
             static_cast<double>(uniform_index(rng, static_cast<std::uint64_t>(spec.radius_max - spec.radius_min + 1)));
  o.arm = std::max(1.0, std::floor(o.radius / 3.0));

  const double c = static_cast<double>(spec.canvas), r = o.radius;
  const double span = static_cast<double>(spec.frames - 1);
  // Both families draw a circle (centre, radius) from the same ranges; a
  // translation runs along a horizontal chord of it, so the per-frame position
  // statistics of the two families nearly match.
  const double R = uniform(rng, spec.orbit_min, spec.orbit_max);
  const double cx = uniform(rng, r + R, c - r - R);
  const double cy = uniform(rng, r + R, c - r - R);
  if (label < 2) {
    const double speed = uniform(rng, spec.speed_min, spec.speed_max);
    const double len = speed * span;
    const double y = cy + R * std::sin(uniform(rng, 0.0, 2.0 * std::numbers::pi));
    const double x0 = std::clamp(cx - 0.5 * len, r, c - r - len);
    o.path = label == 1 ? Translate{x0, y, speed, 0.0} : Translate{x0 + len, y, -speed, 0.0};
  } else {
    Orbit orbit;
    orbit.radius = R;
    orbit.cx = cx;
    orbit.cy = cy;
    orbit.step = uniform(rng, spec.step_min, spec.step_max);
    orbit.phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    orbit.cw = label == 2;
    o.path = orbit;
  }
  shift_inside(o, scene);
  scene.objects.push_back(o);
  return scene;
}

std::vector<MotionClip> gen_motion_dataset(std::size_t n_per_class, std::uint64_t seed, const MotionSpec& spec) {
  if (n_per_class == 0) throw ConfigError("n_per_class must be at least 1");
  spec.validate();
  std::vector<MotionClip> clips;
  clips.reserve(n_per_class * kNumClasses);
  for (int label = 0; label < kNumClasses; ++label) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      const std::size_t index = clips.size();
      clips.push_back(MotionClip{render_scene(motion_scene(spec, label, seed, index)), label, seed, index});
    }
  }
  return clips;
}

ToyScene gen_toy_scene(std::uint64_t seed) {
  constexpr std::size_t kPatch = 4, kGrid = 12, kFrames = 5;
  constexpr std::array<std::size_t, 3> kLanes{5, 7, 9};
  constexpr std::array<ShapeKind, 3> kShapes{ShapeKind::circle, ShapeKind::square, ShapeKind::cross};
  constexpr std::array<double, 3> kIntensity{0.9, 0.6, 0.4};

  Rng rng = clip_rng(seed, 0);
  std::array<std::size_t, 3> order{0, 1, 2};
  for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[uniform_index(rng, i + 1)]);
  const bool set1_forward = uniform_index(rng, 2) == 0;
  const bool set2_forward = uniform_index(rng, 2) == 0;

  SceneSpec spec;
  spec.height = spec.width = kGrid * kPatch;
  spec.frames = kFrames;
  spec.snap = false;
  const auto centre = [](std::size_t cell) { return static_cast<double>(cell * kPatch) + 2.0; };
  const double last = static_cast<double>(kFrames - 1);
  for (int set = 0; set < 2; ++set) {
    const bool forward = set == 0 ? set1_forward : set2_forward;
    const double start = forward ? centre(0) : centre(0) + last * kPatch;
    const double step = forward ? double(kPatch) : -double(kPatch);
    for (std::size_t k = 0; k < 3; ++k) {
      SceneObject o;
      o.shape = kShapes[order[k]];
      o.intensity = kIntensity[order[k]];
      o.radius = 1.5;
      o.arm = 0.5;
      const double lane = centre(kLanes[k]);
      o.path = set == 0 ? Translate{start, lane, step, 0.0} : Translate{lane, start, 0.0, step};
      spec.objects.push_back(o);
    }
  }
  ToyScene scene;
  scene.pixels = render_scene(spec, &scene.masks);
  scene.frames = spec.frames;
  scene.height = spec.height;
  scene.width = spec.width;
  return scene;
}

PatchEmbed PatchEmbed::make(std::size_t channels, std::uint64_t seed, double scale, double bias_scale,
                            std::size_t patch) {
  if (channels == 0 || patch == 0) throw ConfigError("patch embedding needs positive channels and patch size");
  Rng rng(seed);
  PatchEmbed e;
  e.patch = patch;
  e.weight = Tensor<double>({patch * patch, channels});
  e.bias = Tensor<double>({channels});
  for (auto& v : e.weight.data()) v = uniform(rng, -scale, scale);
  for (auto& v : e.bias.data()) v = uniform(rng, -bias_scale, bias_scale);
  return e;
}

template <class T>
FeatureMap<T> patch_embed(const Tensor<float>& pixels, const PatchEmbed& embed) {
  if (pixels.rank() != 4 || pixels.dim(3) != 1) {
    throw DimensionError("patch_embed expects (T,H,W,1) pixels, got " + to_string(pixels.shape()));
  }
  const std::size_t p = embed.patch, frames = pixels.dim(0), H = pixels.dim(1), W = pixels.dim(2);
  if (H % p != 0 || W % p != 0) {
    throw DimensionError("canvas " + std::to_string(H) + "x" + std::to_string(W) + " is not divisible by patch " +
                         std::to_string(p));
  }
  const std::size_t C = embed.channels(), gh = H / p, gw = W / p;
  if (embed.weight.shape() != Shape{p * p, C}) throw DimensionError("patch embedding weight has the wrong shape");
  Tensor<T> out({frames, gh, gw, C});
  std::vector<double> acc(C);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t gy = 0; gy < gh; ++gy) {
      for (std::size_t gx = 0; gx < gw; ++gx) {
        std::copy(embed.bias.ptr(), embed.bias.ptr() + C, acc.begin());
        for (std::size_t py = 0; py < p; ++py) {
          for (std::size_t px = 0; px < p; ++px) {
            const double v = pixels[(t * H + gy * p + py) * W + gx * p + px];
            if (v == 0.0) continue;
            const double* w = embed.weight.ptr() + (py * p + px) * C;
            for (std::size_t c = 0; c < C; ++c) acc[c] += v * w[c];
          }
        }
        T* dst = out.ptr() + ((t * gh + gy) * gw + gx) * C;
        for (std::size_t c = 0; c < C; ++c) dst[c] = static_cast<T>(acc[c]);
      }
    }
  }
  return FeatureMap<T>(std::move(out));
}

template FeatureMap<float> patch_embed<float>(const Tensor<float>&, const PatchEmbed&);
template FeatureMap<double> patch_embed<double>(const Tensor<float>&, const PatchEmbed&);

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string clip_file(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "clip_%05zu.mosst", index);
  return buf;
}

}  // namespace

void save_dataset(const std::filesystem::path& dir, const std::vector<MotionClip>& clips, const MotionSpec& spec,
                  const std::string& split) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  const nlohmann::json spec_json = spec;
  const std::string hash = hex64(fnv1a(spec_json.dump()));
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& clip : clips) {
    const auto file = clip_file(clip.index);
    save_tensor(dir / file, clip.pixels);
    entries.push_back({{"index", clip.index},
                       {"label", clip.label},
                       {"seed", clip.seed},
                       {"spec_hash", hash},
                       {"split", split},
                       {"file", file}});
  }
  const nlohmann::json manifest{{"spec", spec_json}, {"spec_hash", hash}, {"split", split}, {"clips", entries}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

LoadedDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("no manifest.json in " + dir.string());
  LoadedDataset out;
  try {
    const auto manifest = nlohmann::json::parse(is);
    out.spec = manifest.at("spec").get<MotionSpec>();
    out.split = manifest.value("split", std::string());
    const std::string hash = hex64(fnv1a(nlohmann::json(out.spec).dump()));
    for (const auto& e : manifest.at("clips")) {
      if (e.at("spec_hash").get<std::string>() != hash) {
        throw IoError("clip " + std::to_string(e.at("index").get<std::size_t>()) + " was generated from another spec");
      }
      MotionClip clip;
      clip.index = e.at("index").get<std::size_t>();
      clip.label = e.at("label").get<int>();
      clip.seed = e.at("seed").get<std::uint64_t>();
      label_name(clip.label);
      clip.pixels = load_tensor<float>(dir / e.at("file").get<std::string>());
      out.clips.push_back(std::move(clip));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  return out;
}

}  // namespace moss
