#pragma once

#include <string>

#include "moss/params.hpp"

namespace moss::layers {

// Parameter initialization. Weights and biases of linear and conv layers are
// drawn from U(-sqrt(1/fan_in), +sqrt(1/fan_in)).

template <class T>
void init_linear(ParamStore<T>& store, const std::string& prefix, std::size_t cin, std::size_t cout, Rng& rng);

/// Zero weights and bias.
template <class T>
void init_linear_zero(ParamStore<T>& store, const std::string& prefix, std::size_t cin, std::size_t cout);

/// Identity weights (cin == cout) and zero bias.
template <class T>
void init_linear_identity(ParamStore<T>& store, const std::string& prefix, std::size_t c);

template <class T>
void init_conv3x3(ParamStore<T>& store, const std::string& prefix, std::size_t cin, std::size_t cout, Rng& rng);

/// gamma = 1, beta = 0, running mean 0, running var 1 (running stats are not trainable).
template <class T>
void init_batchnorm(ParamStore<T>& store, const std::string& prefix, std::size_t c);

}  // namespace moss::layers
