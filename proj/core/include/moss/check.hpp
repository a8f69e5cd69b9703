#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "moss/moss.hpp"
#include "moss/synthdata.hpp"

namespace moss {

/// Gradient norms below this count as zero in relative_error. A conv bias
/// followed by train-mode batchnorm has an exactly zero gradient, and its
/// finite-difference estimate is pure rounding noise.
inline constexpr double kGradFloor = 1e-3;

/// |a - n| / max(|a|, |n|, kGradFloor) over a whole tensor.
double relative_error(const Tensor<double>& analytic, const Tensor<double>& numeric);

struct GradReport {
  std::string component;
  double max_rel_err = 0.0;  ///< worst tensor (inputs and trainable parameters)
  std::string worst;         ///< name of that tensor
  std::size_t tensors = 0;
  bool pass = false;
};

/// Central-difference check of every input and trainable parameter of a graph
/// under the scalar loss sum(gy * y) with a random gy.
GradReport gradcheck_graph(const std::string& component, Graph<double>& graph, ParamStore<double>& params,
                           const std::vector<Tensor<double>>& inputs, Mode mode, std::uint64_t seed,
                           double tol = 1e-5, double step = 1e-6);

/// Primitives, stss, encoder, moss {1,2} and {1,2,3}, every fusion variant.
std::vector<GradReport> gradcheck_suite(std::uint64_t seed, double tol = 1e-5);

struct OracleCase {
  Shape shape;
  WindowSpec window;
  double max_diff = 0.0;
};

struct OracleReport {
  std::vector<OracleCase> cases;
  double max_diff = 0.0;
};

/// stss_forward vs stss_oracle in f32 over windows (1,3,3), (3,3,3), (3,5,5),
/// (5,9,9) and random shapes up to (8,14,14,64); every window also gets the
/// largest shape once.
OracleReport oracle_sweep(std::uint64_t seed, std::size_t instances = 50, const Exec& exec = {});

struct SeparabilityReport {
  std::size_t passed = 0, total = 0;
  double fraction() const { return total ? static_cast<double>(passed) / static_cast<double>(total) : 0.0; }
};

/// For each query on a moving object that has both a same-motion object and
/// its appearance twin inside the window: the order-2 mean similarity to the
/// same-motion objects beats the twin's, and the order-1 ordering is reversed.
/// Uses the vectorize encoder on patch_embed features.
SeparabilityReport toy_separability(const ToyScene& scene, const PatchEmbed& embed, const WindowSpec& window);

/// Patch-level masks: object k occupies cell (t, y, x) when any of its pixels does.
std::vector<std::vector<std::uint8_t>> patch_masks(const ToyScene& scene, std::size_t patch);

struct BenchRow {
  Shape shape;
  WindowSpec window;
  std::string variant;  ///< naive | blocked | parallel
  int threads = 1;
  double ms = 0.0;
  double gflops = 0.0;
};

inline constexpr const char* kBenchCsvHeader = "shape,window,variant,threads,ms,gflops";

/// Median wall time of `reps` runs.
BenchRow bench_stss(const Shape& shape, const WindowSpec& window, const std::string& variant, int threads,
                    std::size_t reps, std::uint64_t seed);
std::string to_csv(const BenchRow& row);

}  // namespace moss
