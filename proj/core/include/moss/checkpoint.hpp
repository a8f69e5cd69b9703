#pragma once

#include <filesystem>
#include <optional>

#include "moss/train.hpp"

namespace moss {

/// Everything needed to re-run evaluation: parameters, configs, metrics and
/// the frozen patch embedding.
template <class T>
struct Checkpoint {
  ParamStore<T> params;
  ModelConfig model;
  TrainConfig train;
  nlohmann::json metrics = nlohmann::json::object();
  std::optional<PatchEmbed> embed;
};

/// Layout: "MOSSCKPT" | u32 entry count | per entry: u32 name length, name,
/// u8 trainable, tensor container | u32-length-prefixed JSON for the model
/// config, train config and metrics. The embedding is stored as f64 entries
/// "embed.w" / "embed.b". Written to a temporary file and renamed.
template <class T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt);

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace moss
