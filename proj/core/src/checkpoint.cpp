#include "moss/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "moss/serialize.hpp"

namespace moss {

namespace {

constexpr char kMagic[8] = {'M', 'O', 'S', 'S', 'C', 'K', 'P', 'T'};

void write_string(std::ostream& os, const std::string& s) {
  io::write_u32(os, static_cast<std::uint32_t>(s.size()));
  io::write_bytes(os, s);
}

std::string read_string(std::istream& is) { return io::read_bytes(is, io::read_u32(is)); }

nlohmann::json read_json(std::istream& is, const char* what) {
  try {
    return nlohmann::json::parse(read_string(is));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint ") + what + " is not valid JSON: " + e.what());
  }
}

}  // namespace

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint " + tmp.string());
    os.write(kMagic, sizeof kMagic);
    const std::uint32_t count = static_cast<std::uint32_t>(ckpt.params.size() + (ckpt.embed ? 2 : 0));
    io::write_u32(os, count);
    for (const auto& [name, e] : ckpt.params) {
      write_string(os, name);
      io::write_u8(os, e.trainable ? 1 : 0);
      write_tensor(os, e.value);
    }
    if (ckpt.embed) {
      for (const auto& [name, t] : {std::pair{"embed.w", &ckpt.embed->weight}, std::pair{"embed.b", &ckpt.embed->bias}}) {
        write_string(os, name);
        io::write_u8(os, 0);
        write_tensor(os, *t);
      }
    }
    write_string(os, nlohmann::json(ckpt.model).dump());
    write_string(os, nlohmann::json(ckpt.train).dump());
    write_string(os, ckpt.metrics.dump());
    if (!os) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw IoError(path.string() + " is not a checkpoint");
  Checkpoint<T> ckpt;
  const std::uint32_t count = io::read_u32(is);
  std::optional<Tensor<double>> embed_w, embed_b;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = read_string(is);
    const bool trainable = io::read_u8(is) != 0;
    if (name == "embed.w" || name == "embed.b") {
      (name == "embed.w" ? embed_w : embed_b) = read_tensor<double>(is);
      continue;
    }
    ckpt.params.add(name, read_tensor<T>(is), trainable);
  }
  if (embed_w.has_value() != embed_b.has_value()) throw IoError("checkpoint holds half of the patch embedding");
  if (embed_w) {
    PatchEmbed e;
    e.weight = std::move(*embed_w);
    e.bias = std::move(*embed_b);
    std::size_t p = 1;
    while (p * p < e.weight.dim(0)) ++p;
    if (p * p != e.weight.dim(0) || e.weight.dim(1) != e.bias.size()) {
      throw IoError("checkpoint patch embedding has an invalid shape");
    }
    e.patch = p;
    ckpt.embed = std::move(e);
  }
  try {
    ckpt.model = read_json(is, "model config").get<ModelConfig>();
    ckpt.train = read_json(is, "train config").get<TrainConfig>();
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint holds an invalid config: ") + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint holds an invalid config: ") + e.what());
  }
  ckpt.metrics = read_json(is, "metrics");
  return ckpt;
}

template void save_checkpoint<float>(const std::filesystem::path&, const Checkpoint<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const Checkpoint<double>&);
template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace moss
