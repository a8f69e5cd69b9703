#include "moss/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace moss {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace io {

void write_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

void write_bytes(std::ostream& os, const std::string& s) { os.write(s.data(), static_cast<std::streamsize>(s.size())); }

namespace {
void read_exact(std::istream& is, char* dst, std::size_t n) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw IoError("unexpected end of stream");
}
}  // namespace

std::uint8_t read_u8(std::istream& is) {
  char c;
  read_exact(is, &c, 1);
  return static_cast<std::uint8_t>(c);
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v;
  read_exact(is, reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v;
  read_exact(is, reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

std::string read_bytes(std::istream& is, std::size_t n) {
  std::string s(n, '\0');
  read_exact(is, s.data(), n);
  return s;
}

}  // namespace io

template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  if (t.empty()) throw DimensionError("cannot serialize an empty tensor");
  os.write(kTensorMagic, sizeof kTensorMagic);
  io::write_u8(os, static_cast<std::uint8_t>(dtype_of<T>()));
  io::write_u8(os, static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) io::write_u32(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  if (!os) throw IoError("failed writing tensor");
}

namespace {

template <class T>
Tensor<T> read_payload(std::istream& is, Shape shape) {
  std::vector<T> data(numel(shape));
  const std::string raw = io::read_bytes(is, data.size() * sizeof(T));
  std::memcpy(data.data(), raw.data(), raw.size());
  return Tensor<T>(std::move(shape), std::move(data));
}

}  // namespace

AnyTensor read_any_tensor(std::istream& is) {
  const std::string magic = io::read_bytes(is, sizeof kTensorMagic);
  if (std::memcmp(magic.data(), kTensorMagic, sizeof kTensorMagic) != 0) {
    throw IoError("bad tensor magic");
  }
  const auto dtype = io::read_u8(is);
  const auto rank = io::read_u8(is);
  if (rank < 1 || rank > 6) throw IoError("bad tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = io::read_u32(is);
  switch (dtype) {
    case 0:
      return read_payload<float>(is, std::move(shape));
    case 1:
      return read_payload<double>(is, std::move(shape));
    default:
      throw IoError("unknown dtype tag " + std::to_string(dtype));
  }
}

template <class T>
Tensor<T> read_tensor(std::istream& is) {
  return std::visit(
      [](auto&& t) -> Tensor<T> {
        using Stored = typename std::decay_t<decltype(t)>::value_type;
        if constexpr (std::is_same_v<Stored, T>) {
          return std::move(t);
        } else {
          return t.template cast<T>();
        }
      },
      read_any_tensor(is));
}

template <class T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  write_tensor(os, t);
}

template <class T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path.string());
  return read_tensor<T>(is);
}

template void write_tensor<float>(std::ostream&, const Tensor<float>&);
template void write_tensor<double>(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor<float>(std::istream&);
template Tensor<double> read_tensor<double>(std::istream&);
template void save_tensor<float>(const std::filesystem::path&, const Tensor<float>&);
template void save_tensor<double>(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_tensor<float>(const std::filesystem::path&);
template Tensor<double> load_tensor<double>(const std::filesystem::path&);

}  // namespace moss
