#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "prunekit/gates.hpp"
#include "prunekit/network.hpp"

namespace prunekit {

inline constexpr const char* kCheckpointVersion = "prunekit-ckpt-v1";

struct CheckpointMeta {
  std::uint64_t seed = 0;
  int epoch = 0;
  double accuracy = 0.0;
  /// Free-form key/value pairs (keys and values must not contain whitespace).
  std::map<std::string, std::string> extra;

  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

struct Checkpoint {
  Network network;
  CheckpointMeta meta;
  /// Present when the stored model carries gates.
  std::optional<DecorationManifest> decoration;
};

/// Plain-text header followed by a little-endian float32 blob in one file.
/// See docs/checkpoint-format.md for the field-by-field layout.
void save_checkpoint(const Network& net, const CheckpointMeta& meta, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// In-memory forms of the same format.
std::string serialize_checkpoint(const Network& net, const CheckpointMeta& meta);
Checkpoint deserialize_checkpoint(const std::string& bytes);

}  // namespace prunekit
