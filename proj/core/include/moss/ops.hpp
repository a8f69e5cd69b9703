#pragma once

#include "moss/parallel.hpp"
#include "moss/tensor.hpp"

namespace moss {

enum class Mode { train, eval };

namespace ops {

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Every kernel below fixes the reduction order of each output element
// independently of the worker count, so parallel results equal sequential ones.

/// y[..., j] = sum_i x[..., i] * w[i, j] + b[j]; w is (Cin, Cout).
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Exec& exec = {});

template <class T>
struct LinearGrads {
  Tensor<T> dx, dw, db;
};

template <class T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, const Exec& exec = {});

/// 3x3 cross-correlation, stride 1, zero padding 1, over (H, W) of an
/// (N, H, W, Cin) input. Kernel layout is (3, 3, Cin, Cout).
template <class T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& b, const Exec& exec = {});

template <class T>
struct Conv3x3Grads {
  Tensor<T> dx, dk, db;
};

template <class T>
Conv3x3Grads<T> conv3x3_backward(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& dy, const Exec& exec = {});

/// Cached forward state of a batch-norm application. mean/var are the
/// statistics actually used for normalization (batch stats in train mode,
/// running stats in eval mode); var is the biased estimator.
template <class T>
struct BatchNormCache {
  Mode mode = Mode::train;
  Tensor<T> xhat;
  Tensor<T> mean, var;
  std::vector<double> invstd;
};

template <class T>
struct BatchNormResult {
  Tensor<T> y;
  BatchNormCache<T> cache;
};

/// Normalizes the last axis over all leading positions.
template <class T>
BatchNormResult<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             const Tensor<T>& running_mean, const Tensor<T>& running_var, Mode mode,
                             const Exec& exec = {});

template <class T>
struct BatchNormGrads {
  Tensor<T> dx, dgamma, dbeta;
};

template <class T>
BatchNormGrads<T> batchnorm_backward(const BatchNormCache<T>& cache, const Tensor<T>& gamma, const Tensor<T>& dy,
                                     const Exec& exec = {});

/// running <- (1 - momentum) * running + momentum * batch
template <class T>
void update_running_stats(Tensor<T>& running_mean, Tensor<T>& running_var, const BatchNormCache<T>& cache,
                          double momentum = kBatchNormMomentum);

/// Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <class T>
Tensor<T> gelu(const Tensor<T>& x, const Exec& exec = {});

template <class T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy, const Exec& exec = {});

double gelu_scalar(double x);
double gelu_derivative(double x);

}  // namespace ops
}  // namespace moss
