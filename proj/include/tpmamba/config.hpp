#pragma once

#include "tpmamba/encoder.hpp"
#include "tpmamba/preprocess.hpp"
#include "tpmamba/seg_head.hpp"

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>

namespace tpmamba {

struct TrainConfig {
  Index epochs = 1000;
  double lr_start = 2e-4;
  double lr_end = 0.0;
  double weight_decay = 1e-2;
  Index batch_size = 1;
  std::array<Index, 3> crop{96, 96, 96};
  std::uint64_t seed = 0;
  Index classes = 2;
  ViTConfig model;
  AugmentOptions augment;
  double window_overlap = 0.5;  // sliding-window evaluation

  /// Copies the crop into the augmentation options and the width into the adapter.
  void sync();
  void validate() const;
};

/// Parses flat `key=value` lines; `#` starts a comment. Keys are dotted paths
/// such as `adapter.scan_mode`. Unknown keys and malformed values throw ConfigError.
TrainConfig parse_config(std::istream& is, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path);
/// Applies one assignment to `cfg`.
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);
/// Every addressable key with its current value, in a fixed order.
std::string config_text(const TrainConfig& cfg);

}  // namespace tpmamba
