#include "moss/ops.hpp"

#include <algorithm>
#include <cmath>
#include <vector>
#include <numbers>

namespace moss::ops {

namespace {

std::size_t leading(const Tensor<float>& x) { return x.size() / x.shape().back(); }
std::size_t leading(const Tensor<double>& x) { return x.size() / x.shape().back(); }

template <class T>
void expect_shape(const Tensor<T>& t, const Shape& want, const char* what) {
  if (t.shape() != want) {
    throw DimensionError(std::string(what) + ": expected shape " + to_string(want) + ", got " + to_string(t.shape()));
  }
}

}  // namespace

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Exec& exec) {
  if (w.rank() != 2 || x.shape().back() != w.dim(0)) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " incompatible with weight " + to_string(w.shape()));
  }
  const std::size_t cin = w.dim(0), cout = w.dim(1);
  expect_shape(b, {cout}, "linear bias");
  Shape out_shape = x.shape();
  out_shape.back() = cout;
  Tensor<T> y(out_shape);
  const std::size_t rows = leading(x);
  const T* xp = x.ptr();
  const T* wp = w.ptr();
  T* yp = y.ptr();
  parallel_for(rows, exec, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t r = r0; r < r1; ++r) {
      T* yr = yp + r * cout;
      for (std::size_t j = 0; j < cout; ++j) yr[j] = b[j];
      const T* xr = xp + r * cin;
      for (std::size_t i = 0; i < cin; ++i) {
        const T xi = xr[i];
        const T* wi = wp + i * cout;
        for (std::size_t j = 0; j < cout; ++j) yr[j] += xi * wi[j];
      }
    }
  });
  return y;
}

template <class T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, const Exec& exec) {
  const std::size_t cin = w.dim(0), cout = w.dim(1);
  Shape ys = x.shape();
  ys.back() = cout;
  expect_shape(dy, ys, "linear backward upstream");
  const std::size_t rows = leading(x);
  LinearGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(w.shape()), Tensor<T>({cout})};
  const T* xp = x.ptr();
  const T* wp = w.ptr();
  const T* dyp = dy.ptr();
  T* dxp = g.dx.ptr();
  parallel_for(rows, exec, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t r = r0; r < r1; ++r) {
      const T* dyr = dyp + r * cout;
      T* dxr = dxp + r * cin;
      for (std::size_t i = 0; i < cin; ++i) {
        const T* wi = wp + i * cout;
        T acc{0};
        for (std::size_t j = 0; j < cout; ++j) acc += dyr[j] * wi[j];
        dxr[i] = acc;
      }
    }
  });
  T* dwp = g.dw.ptr();
  parallel_for(cin, exec, [&](std::size_t i0, std::size_t i1) {
    for (std::size_t r = 0; r < rows; ++r) {
      const T* dyr = dyp + r * cout;
      for (std::size_t i = i0; i < i1; ++i) {
        const T xi = xp[r * cin + i];
        T* dwi = dwp + i * cout;
        for (std::size_t j = 0; j < cout; ++j) dwi[j] += xi * dyr[j];
      }
    }
  });
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < cout; ++j) g.db[j] += dyp[r * cout + j];
  }
  return g;
}

namespace {

// Copies (n,h,w,c) into a zero border of one pixel: (n,h+2,w+2,c).
template <class T>
std::vector<T> pad_hw(const T* x, std::size_t n, std::size_t h, std::size_t w, std::size_t c) {
  std::vector<T> out(n * (h + 2) * (w + 2) * c, T{0});
  for (std::size_t ni = 0; ni < n; ++ni) {
    for (std::size_t hi = 0; hi < h; ++hi) {
      std::copy_n(x + (ni * h + hi) * w * c, w * c, out.data() + ((ni * (h + 2) + hi + 1) * (w + 2) + 1) * c);
    }
  }
  return out;
}

constexpr std::size_t kPosTile = 4;
constexpr std::size_t kChanTile = 16;

// y[p, co0:co0+CT] for kPosTile consecutive positions of one row. Each output
// accumulates bias, then taps in raster order, then input channels in order.
template <class T, std::size_t CT>
void conv_tile(const T* __restrict xrow, std::size_t row_stride, std::size_t npos, std::size_t cin,
               const T* __restrict k, const T* bias, std::size_t cout, std::size_t co0, T* __restrict y) {
  T acc[kPosTile][CT];
  for (std::size_t j = 0; j < kPosTile; ++j) {
    for (std::size_t c = 0; c < CT; ++c) acc[j][c] = bias ? bias[co0 + c] : T{0};
  }
  for (std::size_t ky = 0; ky < 3; ++ky) {
    for (std::size_t kx = 0; kx < 3; ++kx) {
      const T* xt = xrow + ky * row_stride + kx * cin;
      const T* kt = k + (ky * 3 + kx) * cin * cout + co0;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const T* kc = kt + ci * cout;
        for (std::size_t j = 0; j < kPosTile; ++j) {
          const T xv = j < npos ? xt[j * cin + ci] : T{0};
          for (std::size_t c = 0; c < CT; ++c) acc[j][c] += xv * kc[c];
        }
      }
    }
  }
  for (std::size_t j = 0; j < npos; ++j) {
    for (std::size_t c = 0; c < CT; ++c) y[j * cout + c] = acc[j][c];
  }
}

// Same as conv_tile for a runtime channel count below kChanTile.
template <class T>
void conv_tile_tail(const T* xrow, std::size_t row_stride, std::size_t npos, std::size_t cin, const T* k,
                    const T* bias, std::size_t cout, std::size_t co0, std::size_t ct, T* y) {
  for (std::size_t j = 0; j < npos; ++j) {
    for (std::size_t c = 0; c < ct; ++c) {
      T acc = bias ? bias[co0 + c] : T{0};
      for (std::size_t ky = 0; ky < 3; ++ky) {
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const T* xt = xrow + ky * row_stride + (kx + j) * cin;
          const T* kt = k + (ky * 3 + kx) * cin * cout + co0 + c;
          for (std::size_t ci = 0; ci < cin; ++ci) acc += xt[ci] * kt[ci * cout];
        }
      }
      y[j * cout + c] = acc;
    }
  }
}

// dk rows u0..u0+nu (u = tap * cin + ci), channels co0..co0+CT.
template <class T, std::size_t CT>
void kernel_grad_tile(const T* __restrict xpad, const T* __restrict dy, std::size_t n, std::size_t h, std::size_t w,
                      std::size_t cin, std::size_t cout, std::size_t u0, std::size_t nu, std::size_t co0,
                      T* __restrict dk) {
  T acc[kPosTile][CT] = {};
  std::size_t off[kPosTile] = {};
  for (std::size_t j = 0; j < nu; ++j) {
    const std::size_t tap = (u0 + j) / cin, ci = (u0 + j) % cin;
    off[j] = (tap / 3) * (w + 2) * cin + (tap % 3) * cin + ci;
  }
  const std::size_t row_stride = (w + 2) * cin;
  for (std::size_t ni = 0; ni < n; ++ni) {
    for (std::size_t hi = 0; hi < h; ++hi) {
      const T* xr = xpad + (ni * (h + 2) + hi) * row_stride;
      const T* dr = dy + (ni * h + hi) * w * cout + co0;
      for (std::size_t wi = 0; wi < w; ++wi) {
        const T* d = dr + wi * cout;
        for (std::size_t j = 0; j < kPosTile; ++j) {
          const T xv = j < nu ? xr[off[j] + wi * cin] : T{0};
          for (std::size_t c = 0; c < CT; ++c) acc[j][c] += xv * d[c];
        }
      }
    }
  }
  for (std::size_t j = 0; j < nu; ++j) {
    for (std::size_t c = 0; c < CT; ++c) dk[(u0 + j) * cout + co0 + c] = acc[j][c];
  }
}

template <class T>
void kernel_grad_tail(const T* xpad, const T* dy, std::size_t n, std::size_t h, std::size_t w, std::size_t cin,
                      std::size_t cout, std::size_t u0, std::size_t nu, std::size_t co0, T* dk) {
  const std::size_t row_stride = (w + 2) * cin;
  for (std::size_t j = 0; j < nu; ++j) {
    const std::size_t tap = (u0 + j) / cin, ci = (u0 + j) % cin;
    const std::size_t off = (tap / 3) * row_stride + (tap % 3) * cin + ci;
    for (std::size_t co = co0; co < cout; ++co) {
      T acc{0};
      for (std::size_t ni = 0; ni < n; ++ni) {
        for (std::size_t hi = 0; hi < h; ++hi) {
          const T* xr = xpad + (ni * (h + 2) + hi) * row_stride + off;
          const T* dr = dy + (ni * h + hi) * w * cout + co;
          for (std::size_t wi = 0; wi < w; ++wi) acc += xr[wi * cin] * dr[wi * cout];
        }
      }
      dk[(u0 + j) * cout + co] = acc;
    }
  }
}

// 3x3 "same" convolution of an already padded input.
template <class T>
void conv_padded(const T* xpad, std::size_t n, std::size_t h, std::size_t w, std::size_t cin, const T* k,
                 const T* bias, std::size_t cout, T* y, const Exec& exec) {
  const std::size_t row_stride = (w + 2) * cin;
  parallel_for(n * h, exec, [&](std::size_t r0, std::size_t r1) {
    for (std::size_t r = r0; r < r1; ++r) {
      const std::size_t ni = r / h, hi = r % h;
      const T* xrow = xpad + (ni * (h + 2) + hi) * row_stride;
      T* yrow = y + r * w * cout;
      for (std::size_t w0 = 0; w0 < w; w0 += kPosTile) {
        const std::size_t npos = std::min(kPosTile, w - w0);
        std::size_t co0 = 0;
        for (; co0 + kChanTile <= cout; co0 += kChanTile) {
          conv_tile<T, kChanTile>(xrow + w0 * cin, row_stride, npos, cin, k, bias, cout, co0, yrow + w0 * cout + co0);
        }
        if (co0 < cout) {
          conv_tile_tail(xrow + w0 * cin, row_stride, npos, cin, k, bias, cout, co0, cout - co0,
                         yrow + w0 * cout + co0);
        }
      }
    }
  });
}

}  // namespace

template <class T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& b, const Exec& exec) {
  if (x.rank() != 4) throw DimensionError("conv3x3: input must be (N,H,W,C), got " + to_string(x.shape()));
  if (k.rank() != 4 || k.dim(0) != 3 || k.dim(1) != 3 || k.dim(2) != x.dim(3)) {
    throw DimensionError("conv3x3: kernel " + to_string(k.shape()) + " incompatible with input " +
                         to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3), cout = k.dim(3);
  expect_shape(b, {cout}, "conv3x3 bias");
  Tensor<T> y({n, h, w, cout});
  const auto xpad = pad_hw(x.ptr(), n, h, w, cin);
  conv_padded(xpad.data(), n, h, w, cin, k.ptr(), b.ptr(), cout, y.ptr(), exec);
  return y;
}

template <class T>
Conv3x3Grads<T> conv3x3_backward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& dy, const Exec& exec) {
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3), cout = k.dim(3);
  expect_shape(dy, {n, h, w, cout}, "conv3x3 backward upstream");
  Conv3x3Grads<T> g{Tensor<T>(x.shape()), Tensor<T>(k.shape()), Tensor<T>({cout})};

  // dx is the convolution of dy with the spatially flipped, channel-transposed kernel.
  std::vector<T> kt(9 * cout * cin);
  for (std::size_t tap = 0; tap < 9; ++tap) {
    for (std::size_t ci = 0; ci < cin; ++ci) {
      for (std::size_t co = 0; co < cout; ++co) kt[((8 - tap) * cout + co) * cin + ci] = k[(tap * cin + ci) * cout + co];
    }
  }
  const auto dypad = pad_hw(dy.ptr(), n, h, w, cout);
  conv_padded<T>(dypad.data(), n, h, w, cout, kt.data(), nullptr, cin, g.dx.ptr(), exec);

  // dk[tap, ci, :] = sum over positions of x[pos + tap, ci] * dy[pos, :], in position order.
  const auto xpad = pad_hw(x.ptr(), n, h, w, cin);
  const std::size_t blocks = (9 * cin + kPosTile - 1) / kPosTile;
  parallel_for(blocks, exec, [&](std::size_t b0, std::size_t b1) {
    for (std::size_t blk = b0; blk < b1; ++blk) {
      const std::size_t u0 = blk * kPosTile, nu = std::min(kPosTile, 9 * cin - u0);
      std::size_t co0 = 0;
      for (; co0 + kChanTile <= cout; co0 += kChanTile) {
        kernel_grad_tile<T, kChanTile>(xpad.data(), dy.ptr(), n, h, w, cin, cout, u0, nu, co0, g.dk.ptr());
      }
      if (co0 < cout) kernel_grad_tail(xpad.data(), dy.ptr(), n, h, w, cin, cout, u0, nu, co0, g.dk.ptr());
    }
  });
  const T* dyp = dy.ptr();
  const std::size_t positions = n * h * w;
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t co = 0; co < cout; ++co) g.db[co] += dyp[p * cout + co];
  }
  return g;
}

template <class T>
BatchNormResult<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             const Tensor<T>& running_mean, const Tensor<T>& running_var, Mode mode,
                             const Exec& exec) {
  const std::size_t c = x.shape().back();
  expect_shape(gamma, {c}, "batchnorm gamma");
  expect_shape(beta, {c}, "batchnorm beta");
  expect_shape(running_mean, {c}, "batchnorm running mean");
  expect_shape(running_var, {c}, "batchnorm running var");
  const std::size_t rows = leading(x);
  if (mode == Mode::train && rows < 2) {
    throw DimensionError("batchnorm: train mode needs at least 2 positions per channel, got " + std::to_string(rows));
  }
  BatchNormResult<T> out{Tensor<T>(x.shape()), {}};
  auto& cache = out.cache;
  cache.mode = mode;
  cache.xhat = Tensor<T>(x.shape());
  cache.mean = Tensor<T>({c});
  cache.var = Tensor<T>({c});
  cache.invstd.assign(c, 0.0);
  const T* xp = x.ptr();
  parallel_for(c, exec, [&](std::size_t c0, std::size_t c1) {
    for (std::size_t ch = c0; ch < c1; ++ch) {
      double mean, var;
      if (mode == Mode::train) {
        double s = 0.0;
        for (std::size_t r = 0; r < rows; ++r) s += xp[r * c + ch];
        mean = s / static_cast<double>(rows);
        double ss = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
          const double d = xp[r * c + ch] - mean;
          ss += d * d;
        }
        var = ss / static_cast<double>(rows);
      } else {
        mean = running_mean[ch];
        var = running_var[ch];
      }
      const double invstd = 1.0 / std::sqrt(var + kBatchNormEps);
      cache.mean[ch] = static_cast<T>(mean);
      cache.var[ch] = static_cast<T>(var);
      cache.invstd[ch] = invstd;
      const double g = gamma[ch], bt = beta[ch];
      for (std::size_t r = 0; r < rows; ++r) {
        const double xh = (xp[r * c + ch] - mean) * invstd;
        cache.xhat[r * c + ch] = static_cast<T>(xh);
        out.y[r * c + ch] = static_cast<T>(g * xh + bt);
      }
    }
  });
  return out;
}

template <class T>
BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache, const Tensor<T>& gamma, const Tensor<T>& dy,
                                     const Exec& exec) {
  expect_shape(dy, cache.xhat.shape(), "batchnorm backward upstream");
  const std::size_t c = dy.shape().back();
  const std::size_t rows = leading(dy);
  BatchNormGrads<T> g{Tensor<T>(dy.shape()), Tensor<T>({c}), Tensor<T>({c})};
  parallel_for(c, exec, [&](std::size_t c0, std::size_t c1) {
    for (std::size_t ch = c0; ch < c1; ++ch) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t r = 0; r < rows; ++r) {
        const double d = dy[r * c + ch];
        sum_dy += d;
        sum_dy_xhat += d * cache.xhat[r * c + ch];
      }
      g.dbeta[ch] = static_cast<T>(sum_dy);
      g.dgamma[ch] = static_cast<T>(sum_dy_xhat);
      const double scale = gamma[ch] * cache.invstd[ch];
      if (cache.mode == Mode::train) {
        const double n = static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          const double d = dy[r * c + ch];
          g.dx[r * c + ch] =
              static_cast<T>(scale * (d - sum_dy / n - cache.xhat[r * c + ch] * sum_dy_xhat / n));
        }
      } else {
        for (std::size_t r = 0; r < rows; ++r) g.dx[r * c + ch] = static_cast<T>(scale * dy[r * c + ch]);
      }
    }
  });
  return g;
}

template <class T>
void update_running_stats(Tensor<T>& running_mean, Tensor<T>& running_var, const BatchNormCache<T>& cache,
                          double momentum) {
  if (cache.mode != Mode::train) return;
  for (std::size_t ch = 0; ch < running_mean.size(); ++ch) {
    running_mean[ch] = static_cast<T>((1.0 - momentum) * running_mean[ch] + momentum * cache.mean[ch]);
    running_var[ch] = static_cast<T>((1.0 - momentum) * running_var[ch] + momentum * cache.var[ch]);
  }
}

namespace {
constexpr double kGeluK = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluK * (x + kGeluA * x * x * x))); }

double gelu_derivative(double x) {
  const double th = std::tanh(kGeluK * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluK * (1.0 + 3.0 * kGeluA * x * x);
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x, const Exec& exec) {
  Tensor<T> y(x.shape());
  parallel_for(x.size(), exec, [&](std::size_t i0, std::size_t i1) {
    for (std::size_t i = i0; i < i1; ++i) y[i] = static_cast<T>(gelu_scalar(x[i]));
  });
  return y;
}

template <class T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy, const Exec& exec) {
  expect_shape(dy, x.shape(), "gelu backward upstream");
  Tensor<T> dx(x.shape());
  parallel_for(x.size(), exec, [&](std::size_t i0, std::size_t i1) {
    const T k = static_cast<T>(kGeluK), a = static_cast<T>(kGeluA), half = static_cast<T>(0.5);
    for (std::size_t i = i0; i < i1; ++i) {
      const T v = x[i];
      const T th = std::tanh(k * (v + a * v * v * v));
      dx[i] = dy[i] * (half * (T{1} + th) + half * v * (T{1} - th * th) * k * (T{1} + T{3} * a * v * v));
    }
  });
  return dx;
}

#define MOSS_INSTANTIATE_OPS(T)                                                                                   \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Exec&);                \
  template LinearGrads<T> linear_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Exec&);  \
  template Tensor<T> conv3x3<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Exec&);               \
  template Conv3x3Grads<T> conv3x3_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                               const Exec&);                                                      \
  template BatchNormResult<T> batchnorm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                           const Tensor<T>&, Mode, const Exec&);                                  \
  template BatchNormGrads<T> batchnorm_backward<T>(const BatchNormCache<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                                   const Exec&);                                                  \
  template void update_running_stats<T>(Tensor<T>&, Tensor<T>&, const BatchNormCache<T>&, double);               \
  template Tensor<T> gelu<T>(const Tensor<T>&, const Exec&);                                                      \
  template Tensor<T> gelu_backward<T>(const Tensor<T>&, const Tensor<T>&, const Exec&);

MOSS_INSTANTIATE_OPS(float)
MOSS_INSTANTIATE_OPS(double)

}  // namespace moss::ops
