#pragma once

#include <cstddef>
#include <iosfwd>

#include "moss/parallel.hpp"
#include "moss/tensor.hpp"

namespace moss {

/// Local spatio-temporal window (L, U, V). Offsets span
/// [-L/2, L/2] x [-U/2, U/2] x [-V/2, V/2]; extents must be odd.
struct WindowSpec {
  int L = 5;
  int U = 9;
  int V = 9;

  void validate() const;
  int half_l() const { return L / 2; }
  int half_u() const { return U / 2; }
  int half_v() const { return V / 2; }
  std::size_t volume() const { return static_cast<std::size_t>(L) * U * V; }
  bool operator==(const WindowSpec&) const = default;
};

/// Cosine similarity with a hard zero-norm cutoff: vectors with norm <= norm_eps
/// have similarity 0 with everything and receive zero gradient.
struct SimilarityPolicy {
  double norm_eps = 1e-12;
};

/// (T, H, W, C) feature map.
template <class T>
class FeatureMap {
 public:
  FeatureMap() = default;
  explicit FeatureMap(Tensor<T> data);

  std::size_t frames() const { return data_.dim(0); }
  std::size_t height() const { return data_.dim(1); }
  std::size_t width() const { return data_.dim(2); }
  std::size_t channels() const { return data_.dim(3); }

  const Tensor<T>& tensor() const { return data_; }
  Tensor<T>& tensor() { return data_; }

 private:
  Tensor<T> data_;
};

/// (T, H, W, L, U, V) similarity volume: the first three axes index the query,
/// the last three the offset.
template <class T>
struct StssTensor {
  Tensor<T> data;
  WindowSpec window;
};

/// Blocked kernel: inverse norms are computed once per position and each
/// (query row, neighbor row) pair is swept over the V offsets. Parallel over
/// query rows; output is independent of the worker count.
template <class T>
StssTensor<T> stss_forward(const FeatureMap<T>& f, const WindowSpec& window, const SimilarityPolicy& policy = {},
                           const Exec& exec = {});

/// Literal six-nested-loop evaluation, used as the reference for the kernel.
template <class T>
StssTensor<T> stss_oracle(const FeatureMap<T>& f, const WindowSpec& window, const SimilarityPolicy& policy = {});

/// Gradient of sum(dS * S) with respect to the features. Each position
/// gathers its contributions as query and as neighbor, so workers never
/// write to the same element.
template <class T>
Tensor<T> stss_backward(const FeatureMap<T>& f, const WindowSpec& window, const SimilarityPolicy& policy,
                        const Tensor<T>& dS, const Exec& exec = {});

/// Floating-point operations of the dense volume: one length-C dot product per (query, offset).
std::size_t stss_flops(const Shape& feature_shape, const WindowSpec& window);

/// Tensor container followed by "WNDW" and three u32 window extents.
template <class T>
void write_stss(std::ostream& os, const StssTensor<T>& s);
template <class T>
StssTensor<T> read_stss(std::istream& is);

}  // namespace moss
