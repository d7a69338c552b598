#pragma once

#include "tpmamba/autograd.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace tpmamba {

// File layout, little-endian:
//   "TPMB" | u32 version | u64 header bytes | UTF-8 JSON header | payload
// The header lists every tensor as {name, dtype, shape, byte_offset, byte_len}
// relative to the payload start, plus the config text, the seed, the payload
// size and its CRC32.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  Tensor<float> value;
};

struct Checkpoint {
  std::string config;
  std::uint64_t seed = 0;
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const;
};

Checkpoint snapshot(const ParameterList<float>& params, std::string config, std::uint64_t seed);
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint tensors into `params` in order. A parameter missing from
/// the checkpoint, a shape mismatch, or a checkpoint tensor with no matching
/// parameter throws InputError naming the tensor.
void load_parameters(const Checkpoint& ckpt, const ParameterList<float>& params);

}  // namespace tpmamba
