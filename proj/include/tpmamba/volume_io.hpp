#pragma once

#include "tpmamba/tensor.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace tpmamba {

enum class Intensity { hounsfield, normalized };

/// One CT-like volume. `voxels` is [D, H, W]; spacing is (sd, sh, sw) in mm.
struct VolumeRecord {
  std::string id;
  Tensor<float> voxels;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::optional<LabelMap> labels;
  Intensity intensity = Intensity::hounsfield;

  std::array<Index, 3> dims() const { return {voxels.dim(0), voxels.dim(1), voxels.dim(2)}; }
  /// Throws InputError on non-positive spacing or a label grid that differs from the voxels.
  void validate() const;
};

// RVOL layout, little-endian:
//   "RVOL" | u32 D | u32 H | u32 W | f32 sd | f32 sh | f32 sw | u8 dtype | D*H*W voxels
enum class VoxelType : std::uint8_t { u8 = 0, i16 = 1, f32 = 2 };

struct RvolVolume {
  Tensor<float> data;  // [D, H, W], converted to float
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  VoxelType dtype = VoxelType::f32;
};

void write_rvol(const std::filesystem::path& path, const Tensor<float>& data, const std::array<double, 3>& spacing,
                VoxelType dtype = VoxelType::f32);
void write_rvol(const std::filesystem::path& path, const LabelMap& labels, const std::array<double, 3>& spacing);
RvolVolume read_rvol(const std::filesystem::path& path);
LabelMap read_rvol_labels(const std::filesystem::path& path);

/// Dataset directory: `<id>_image.rvol` with an optional `<id>_label.rvol`, sorted by id.
struct DatasetEntry {
  std::string id;
  std::filesystem::path image;
  std::optional<std::filesystem::path> label;
};

std::vector<DatasetEntry> list_dataset(const std::filesystem::path& dir);
VolumeRecord load_record(const DatasetEntry& entry);
void save_record(const std::filesystem::path& dir, const VolumeRecord& rec);

}  // namespace tpmamba
