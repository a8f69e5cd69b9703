#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <variant>

#include "moss/tensor.hpp"

namespace moss {

/// Binary tensor container:
///   "MOSST\0" | u8 dtype (0=f32, 1=f64) | u8 rank | rank x u32 LE extents | LE values
inline constexpr char kTensorMagic[6] = {'M', 'O', 'S', 'S', 'T', '\0'};

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t);

AnyTensor read_any_tensor(std::istream& is);

/// Reads a container and converts it to T if the stored dtype differs.
template <class T>
Tensor<T> read_tensor(std::istream& is);

template <class T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t);

template <class T>
Tensor<T> load_tensor(const std::filesystem::path& path);

namespace io {

void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_bytes(std::ostream& os, const std::string& s);
std::uint8_t read_u8(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
std::string read_bytes(std::istream& is, std::size_t n);

}  // namespace io

}  // namespace moss
