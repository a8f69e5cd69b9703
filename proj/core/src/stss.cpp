#include "moss/stss.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

#include "moss/serialize.hpp"

namespace moss {

void WindowSpec::validate() const {
  auto odd_positive = [](int e) { return e >= 1 && e % 2 == 1; };
  if (!odd_positive(L) || !odd_positive(U) || !odd_positive(V)) {
    throw ConfigError("window extents must be odd and >= 1, got (" + std::to_string(L) + "," + std::to_string(U) +
                      "," + std::to_string(V) + ")");
  }
}

template <class T>
FeatureMap<T>::FeatureMap(Tensor<T> data) : data_(std::move(data)) {
  if (data_.rank() != 4) throw DimensionError("feature map must be (T,H,W,C), got " + to_string(data_.shape()));
}

namespace {

struct Grid {
  std::ptrdiff_t t, h, w;
  std::size_t c;
  std::size_t positions() const { return static_cast<std::size_t>(t * h * w); }
  std::size_t index(std::ptrdiff_t ti, std::ptrdiff_t hi, std::ptrdiff_t wi) const {
    return static_cast<std::size_t>((ti * h + hi) * w + wi);
  }
};

template <class T>
Grid grid_of(const FeatureMap<T>& f) {
  return {static_cast<std::ptrdiff_t>(f.frames()), static_cast<std::ptrdiff_t>(f.height()),
          static_cast<std::ptrdiff_t>(f.width()), f.channels()};
}

// Four independent partial sums, combined in a fixed order. Symmetric in
// (a, b), so S[p, o] and S[p + o, -o] are bitwise equal.
template <class T>
inline double dot(const T* a, const T* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    s1 += static_cast<double>(a[i + 1]) * static_cast<double>(b[i + 1]);
    s2 += static_cast<double>(a[i + 2]) * static_cast<double>(b[i + 2]);
    s3 += static_cast<double>(a[i + 3]) * static_cast<double>(b[i + 3]);
  }
  for (; i < n; ++i) s0 += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return (s0 + s1) + (s2 + s3);
}

/// Inverse L2 norm per position; 0 marks a zero-norm position.
template <class T>
std::vector<double> inverse_norms(const Tensor<T>& f, std::size_t c, const SimilarityPolicy& policy) {
  const std::size_t n = f.size() / c;
  std::vector<double> inv(n, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    const T* v = f.ptr() + p * c;
    const double norm = std::sqrt(dot(v, v, c));
    inv[p] = norm > policy.norm_eps ? 1.0 / norm : 0.0;
  }
  return inv;
}

inline double clamp_unit(double x) { return std::clamp(x, -1.0, 1.0); }

}  // namespace

std::size_t stss_flops(const Shape& feature_shape, const WindowSpec& window) {
  if (feature_shape.size() != 4) return 0;
  return 2 * feature_shape[0] * feature_shape[1] * feature_shape[2] * feature_shape[3] * window.volume();
}

template <class T>
StssTensor<T> stss_forward(const FeatureMap<T>& f, const WindowSpec& window, const SimilarityPolicy& policy,
                           const Exec& exec) {
  window.validate();
  const Grid g = grid_of(f);
  const std::ptrdiff_t L = window.L, U = window.U, V = window.V;
  const std::ptrdiff_t hl = window.half_l(), hu = window.half_u(), hv = window.half_v();
  StssTensor<T> out{Tensor<T>({static_cast<std::size_t>(g.t), static_cast<std::size_t>(g.h),
                               static_cast<std::size_t>(g.w), static_cast<std::size_t>(L),
                               static_cast<std::size_t>(U), static_cast<std::size_t>(V)}),
                    window};
  const auto inv = inverse_norms(f.tensor(), g.c, policy);
  const T* fp = f.tensor().ptr();
  T* sp = out.data.ptr();
  const std::size_t per_query = window.volume();

  parallel_for(static_cast<std::size_t>(g.t * g.h), exec, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t row = r0; row < r1; ++row) {
      const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(row) / g.h;
      const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(row) % g.h;
      for (std::ptrdiff_t l = 0; l < L; ++l) {
        const std::ptrdiff_t tn = t + l - hl;
        if (tn < 0 || tn >= g.t) continue;
        for (std::ptrdiff_t u = 0; u < U; ++u) {
          const std::ptrdiff_t hn = h + u - hu;
          if (hn < 0 || hn >= g.h) continue;
          const bool self_row = (tn == t && hn == h);
          // Query row (t, h, :) against neighbor row (tn, hn, :).
          for (std::ptrdiff_t w = 0; w < g.w; ++w) {
            const std::size_t q = g.index(t, h, w);
            T* dst = sp + q * per_query + static_cast<std::size_t>((l * U + u) * V);
            const double iq = inv[q];
            if (iq == 0.0) continue;
            const T* a = fp + q * g.c;
            const std::ptrdiff_t v0 = std::max<std::ptrdiff_t>(0, hv - w);
            const std::ptrdiff_t v1 = std::min<std::ptrdiff_t>(V, g.w - w + hv);
            for (std::ptrdiff_t v = v0; v < v1; ++v) {
              const std::ptrdiff_t wn = w + v - hv;
              if (self_row && wn == w) {
                dst[v] = T{1};
                continue;
              }
              const std::size_t nb = g.index(tn, hn, wn);
              const double inb = inv[nb];
              if (inb == 0.0) continue;
              dst[v] = static_cast<T>(clamp_unit(dot(a, fp + nb * g.c, g.c) * (iq * inb)));
            }
          }
        }
      }
    }
  });
  return out;
}

template <class T>
StssTensor<T> stss_oracle(const FeatureMap<T>& f, const WindowSpec& window, const SimilarityPolicy& policy) {
  window.validate();
  const std::ptrdiff_t T_ = static_cast<std::ptrdiff_t>(f.frames());
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(f.height());
  const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(f.width());
  const std::size_t C = f.channels();
  const auto& F = f.tensor();
  StssTensor<T> out{Tensor<T>({f.frames(), f.height(), f.width(), static_cast<std::size_t>(window.L),
                               static_cast<std::size_t>(window.U), static_cast<std::size_t>(window.V)}),
                    window};
  for (std::ptrdiff_t t = 0; t < T_; ++t) {
    for (std::ptrdiff_t h = 0; h < H; ++h) {
      for (std::ptrdiff_t w = 0; w < W; ++w) {
        for (int l = 0; l < window.L; ++l) {
          for (int u = 0; u < window.U; ++u) {
            for (int v = 0; v < window.V; ++v) {
              const std::ptrdiff_t t2 = t + l - window.half_l();
              const std::ptrdiff_t h2 = h + u - window.half_u();
              const std::ptrdiff_t w2 = w + v - window.half_v();
              if (t2 < 0 || t2 >= T_ || h2 < 0 || h2 >= H || w2 < 0 || w2 >= W) continue;
              double ab = 0.0, aa = 0.0, bb = 0.0;
              for (std::size_t c = 0; c < C; ++c) {
                const double a = F.at(t, h, w, c);
                const double b = F.at(t2, h2, w2, c);
                ab += a * b;
                aa += a * a;
                bb += b * b;
              }
              const double na = std::sqrt(aa), nb = std::sqrt(bb);
              double s = 0.0;
              if (na > policy.norm_eps && nb > policy.norm_eps) {
                const bool self = (t2 == t && h2 == h && w2 == w);
                s = self ? 1.0 : std::clamp(ab / (na * nb), -1.0, 1.0);
              }
              out.data.at(t, h, w, l, u, v) = static_cast<T>(s);
            }
          }
        }
      }
    }
  }
  return out;
}

template <class T>
Tensor<T> stss_backward(const FeatureMap<T>& f, const WindowSpec& window, const SimilarityPolicy& policy,
                        const Tensor<T>& dS, const Exec& exec) {
  window.validate();
  const Grid g = grid_of(f);
  const Shape want{static_cast<std::size_t>(g.t),      static_cast<std::size_t>(g.h),
                   static_cast<std::size_t>(g.w),      static_cast<std::size_t>(window.L),
                   static_cast<std::size_t>(window.U), static_cast<std::size_t>(window.V)};
  if (dS.shape() != want) {
    throw DimensionError("stss_backward: upstream gradient " + to_string(dS.shape()) + " does not match " +
                         to_string(want));
  }
  const auto inv = inverse_norms(f.tensor(), g.c, policy);
  const T* fp = f.tensor().ptr();
  const T* dsp = dS.ptr();
  const std::ptrdiff_t L = window.L, U = window.U, V = window.V;
  const std::ptrdiff_t hl = window.half_l(), hu = window.half_u(), hv = window.half_v();
  const std::size_t per_query = window.volume();
  Tensor<T> dF(f.tensor().shape());
  T* dfp = dF.ptr();

  parallel_for(g.positions(), exec, [&](std::size_t p0, std::size_t p1) {
    std::vector<double> acc(g.c);
    for (std::size_t p = p0; p < p1; ++p) {
      const double ip = inv[p];
      if (ip == 0.0) continue;
      const std::ptrdiff_t t = static_cast<std::ptrdiff_t>(p) / (g.h * g.w);
      const std::ptrdiff_t h = (static_cast<std::ptrdiff_t>(p) / g.w) % g.h;
      const std::ptrdiff_t w = static_cast<std::ptrdiff_t>(p) % g.w;
      const T* a = fp + p * g.c;
      std::fill(acc.begin(), acc.end(), 0.0);
      double acc_cos = 0.0;
      for (std::ptrdiff_t l = 0; l < L; ++l) {
        const std::ptrdiff_t tn = t + l - hl;
        if (tn < 0 || tn >= g.t) continue;
        for (std::ptrdiff_t u = 0; u < U; ++u) {
          const std::ptrdiff_t hn = h + u - hu;
          if (hn < 0 || hn >= g.h) continue;
          for (std::ptrdiff_t v = 0; v < V; ++v) {
            const std::ptrdiff_t wn = w + v - hv;
            if (wn < 0 || wn >= g.w) continue;
            if (l == hl && u == hu && v == hv) continue;  // self-match is constant
            const std::size_t q = g.index(tn, hn, wn);
            const double iq = inv[q];
            if (iq == 0.0) continue;
            // p as query at offset o, and q as query at offset -o.
            const std::size_t o = static_cast<std::size_t>((l * U + u) * V + v);
            const std::size_t mirrored = per_query - 1 - o;
            const double weight = static_cast<double>(dsp[p * per_query + o]) +
                                  static_cast<double>(dsp[q * per_query + mirrored]);
            if (weight == 0.0) continue;
            const T* b = fp + q * g.c;
            const double cos = dot(a, b, g.c) * (ip * iq);
            acc_cos += weight * cos;
            const double wb = weight * iq;
            for (std::size_t c = 0; c < g.c; ++c) acc[c] += wb * static_cast<double>(b[c]);
          }
        }
      }
      // d cos(a,b)/da = (b/|b| - cos * a/|a|) / |a|
      T* da = dfp + p * g.c;
      for (std::size_t c = 0; c < g.c; ++c) {
        da[c] = static_cast<T>(ip * (acc[c] - acc_cos * static_cast<double>(a[c]) * ip));
      }
    }
  });
  return dF;
}

template <class T>
void write_stss(std::ostream& os, const StssTensor<T>& s) {
  write_tensor(os, s.data);
  os.write("WNDW", 4);
  io::write_u32(os, static_cast<std::uint32_t>(s.window.L));
  io::write_u32(os, static_cast<std::uint32_t>(s.window.U));
  io::write_u32(os, static_cast<std::uint32_t>(s.window.V));
}

template <class T>
StssTensor<T> read_stss(std::istream& is) {
  StssTensor<T> s;
  s.data = read_tensor<T>(is);
  if (io::read_bytes(is, 4) != "WNDW") throw IoError("missing WNDW window header");
  s.window.L = static_cast<int>(io::read_u32(is));
  s.window.U = static_cast<int>(io::read_u32(is));
  s.window.V = static_cast<int>(io::read_u32(is));
  s.window.validate();
  if (s.data.rank() != 6 || s.data.dim(3) != static_cast<std::size_t>(s.window.L) ||
      s.data.dim(4) != static_cast<std::size_t>(s.window.U) || s.data.dim(5) != static_cast<std::size_t>(s.window.V)) {
    throw IoError("STSS payload " + to_string(s.data.shape()) + " does not match its window header");
  }
  return s;
}

template class FeatureMap<float>;
template class FeatureMap<double>;

#define MOSS_INSTANTIATE_STSS(T)                                                                                    \
  template StssTensor<T> stss_forward<T>(const FeatureMap<T>&, const WindowSpec&, const SimilarityPolicy&,          \
                                         const Exec&);                                                              \
  template StssTensor<T> stss_oracle<T>(const FeatureMap<T>&, const WindowSpec&, const SimilarityPolicy&);          \
  template Tensor<T> stss_backward<T>(const FeatureMap<T>&, const WindowSpec&, const SimilarityPolicy&,             \
                                      const Tensor<T>&, const Exec&);                                               \
  template void write_stss<T>(std::ostream&, const StssTensor<T>&);                                                 \
  template StssTensor<T> read_stss<T>(std::istream&);

MOSS_INSTANTIATE_STSS(float)
MOSS_INSTANTIATE_STSS(double)

}  // namespace moss
