#pragma once

#include "tpmamba/checkpoint.hpp"
#include "tpmamba/config.hpp"
#include "tpmamba/optim.hpp"
#include "tpmamba/seg_head.hpp"

#include <functional>
#include <iosfwd>
#include <memory>

namespace tpmamba {

struct StepStats {
  double loss = 0;
  double dice = 0;  // hard foreground Dice of the training prediction
};

struct EpochMetrics {
  Index epoch = 0;
  double lr = 0;
  double loss = 0;
  double mean_dice = 0;
};

inline constexpr const char* kMetricsHeader = "epoch,lr,loss,mean_dice";
std::string metrics_row(const EpochMetrics& m);

/// Seeded model construction shared by training and inference.
std::unique_ptr<SegmentationModel<float>> build_model(const TrainConfig& cfg);

/// Sequential batch-size-B training loop. Records are visited in order; each
/// epoch is ceil(n / B) steps, all at the scheduled learning rate of that epoch.
class Trainer {
 public:
  Trainer(const TrainConfig& cfg, std::vector<VolumeRecord> raw);

  StepStats step(double lr);
  EpochMetrics run_epoch(Index epoch);
  /// Runs every epoch, writing the metrics CSV header and one row per epoch to `csv` if given.
  std::vector<EpochMetrics> fit(std::ostream* csv = nullptr,
                                const std::function<void(const EpochMetrics&)>& on_epoch = {});

  SegmentationModel<float>& model() { return *model_; }
  const TrainConfig& config() const { return cfg_; }
  Checkpoint checkpoint();

 private:
  TrainConfig cfg_;
  std::vector<VolumeRecord> raw_, preprocessed_;
  std::unique_ptr<SegmentationModel<float>> model_;
  std::unique_ptr<AdamW<float>> optim_;
  std::mt19937_64 rng_;
  std::size_t cursor_ = 0;
};

/// Forward pass on a whole [1, 1, D, H, W] window without recording.
Tensor<float> predict_logits(SegmentationModel<float>& model, const Tensor<float>& window);

/// Sliding-window prediction for one preprocessed record.
SegmentationOutput<float> segment(SegmentationModel<float>& model, const VolumeRecord& rec,
                                  const std::array<Index, 3>& window, double overlap);

struct EvalRow {
  std::string id;
  DiceResult dice;
};

/// Evaluates `model` on labelled raw records; rows in input order.
std::vector<EvalRow> evaluate(SegmentationModel<float>& model, const std::vector<VolumeRecord>& raw,
                              const std::array<Index, 3>& window, double overlap);
/// CSV: case,class_1..class_{K-1},mean with a trailing mean row.
void write_eval_csv(std::ostream& os, const std::vector<EvalRow>& rows, Index classes);

}  // namespace tpmamba
