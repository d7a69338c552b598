#pragma once

#include "tpmamba/volume_io.hpp"

#include <filesystem>

namespace tpmamba {

/// Synthetic CT-like volume: K-1 ellipsoidal organs with distinct HU bands
/// plus Gaussian noise, intensities in [-200, 300]. Later organs overwrite
/// earlier ones where they overlap; every class covers at least 1% of voxels.
VolumeRecord synth_volume(const std::array<Index, 3>& dims, Index classes, std::uint64_t seed, std::string id);

/// Writes `n` volumes `case_XXX_{image,label}.rvol`; case i uses seed `seed + i`.
std::vector<VolumeRecord> gen_synth(Index n, const std::array<Index, 3>& dims, Index classes, std::uint64_t seed,
                                    const std::filesystem::path& out_dir);

}  // namespace tpmamba
