#include "tpmamba/train.hpp"

#include <iomanip>
#include <ostream>
#include <sstream>

namespace tpmamba {

std::string metrics_row(const EpochMetrics& m) {
  std::ostringstream os;
  os << m.epoch << ',' << std::setprecision(9) << m.lr << ',' << m.loss << ',' << m.mean_dice;
  return os.str();
}

std::unique_ptr<SegmentationModel<float>> build_model(const TrainConfig& cfg) {
  TrainConfig c = cfg;
  c.sync();
  c.validate();
  return std::make_unique<SegmentationModel<float>>(c.model, c.classes, c.seed);
}

Trainer::Trainer(const TrainConfig& cfg, std::vector<VolumeRecord> raw)
    : cfg_(cfg), raw_(std::move(raw)), rng_(cfg.seed ^ 0x9e3779b97f4a7c15ULL) {
  cfg_.sync();
  cfg_.validate();
  if (raw_.empty()) throw InputError("training dataset is empty");
  for (const VolumeRecord& r : raw_) {
    if (!r.labels) throw InputError("training record " + r.id + " has no labels");
    preprocessed_.push_back(preprocess(r));
  }
  model_ = build_model(cfg_);
  optim_ = std::make_unique<AdamW<float>>(model_->parameters(), AdamWOptions{.weight_decay = cfg_.weight_decay});
}

StepStats Trainer::step(double lr) {
  const Index b = cfg_.batch_size;
  const auto& crop = cfg_.crop;
  const Index vox = crop[0] * crop[1] * crop[2];
  Tensor<float> x({b, 1, crop[0], crop[1], crop[2]});
  LabelMap y(Shape{b, crop[0], crop[1], crop[2]});
  for (Index i = 0; i < b; ++i) {
    const std::size_t k = cursor_++ % raw_.size();
    const VolumeRecord s = training_sample(raw_[k], preprocessed_[k], cfg_.augment, rng_);
    std::copy_n(s.voxels.data(), vox, x.data() + i * vox);
    std::copy_n(s.labels->data(), vox, y.data() + i * vox);
  }
  for (Index i = 0; i < y.size(); ++i) {
    if (y[i] >= cfg_.classes) throw InputError("label " + std::to_string(y[i]) + " exceeds classes - 1");
  }
  const ParameterList<float> params = model_->parameters();
  zero_grad(params);
  Tape<float> tape;
  StepStats stats;
  Tensor<float> logits;
  {
    TapeScope<float> scope(tape);
    const Var<float> out = (*model_)(constant(x));
    LossTerms<float> loss = dice_ce_loss(out, y);
    stats.loss = loss.total.value()[0];
    if (!std::isfinite(stats.loss)) throw NumericError("non-finite training loss");
    tape.backward(loss.total);
    logits = out.value();
  }
  tape.clear();
  optim_->step(lr);
  stats.dice = dice_score(argmax_labels(logits), y, cfg_.classes).mean;
  return stats;
}

EpochMetrics Trainer::run_epoch(Index epoch) {
  EpochMetrics m;
  m.epoch = epoch;
  m.lr = lr_schedule(epoch, cfg_.epochs, cfg_.lr_start, cfg_.lr_end);
  const Index steps = (static_cast<Index>(raw_.size()) + cfg_.batch_size - 1) / cfg_.batch_size;
  for (Index s = 0; s < steps; ++s) {
    const StepStats st = step(m.lr);
    m.loss += st.loss;
    m.mean_dice += st.dice;
  }
  m.loss /= static_cast<double>(steps);
  m.mean_dice /= static_cast<double>(steps);
  return m;
}

std::vector<EpochMetrics> Trainer::fit(std::ostream* csv, const std::function<void(const EpochMetrics&)>& on_epoch) {
  std::vector<EpochMetrics> history;
  if (csv) *csv << kMetricsHeader << '\n';
  for (Index e = 0; e < cfg_.epochs; ++e) {
    history.push_back(run_epoch(e));
    if (csv) *csv << metrics_row(history.back()) << '\n' << std::flush;
    if (on_epoch) on_epoch(history.back());
  }
  return history;
}

Checkpoint Trainer::checkpoint() { return snapshot(model_->parameters(), config_text(cfg_), cfg_.seed); }

Tensor<float> predict_logits(SegmentationModel<float>& model, const Tensor<float>& window) {
  NoGradScope<float> off;
  return model(constant(window)).value();
}

SegmentationOutput<float> segment(SegmentationModel<float>& model, const VolumeRecord& rec,
                                  const std::array<Index, 3>& window, double overlap) {
  const auto d = rec.dims();
  const Tensor<float> vol = rec.voxels.reshaped({1, 1, d[0], d[1], d[2]});
  const WindowModel<float> fn = [&model](const Tensor<float>& w) { return predict_logits(model, w); };
  return sliding_window_infer(vol, fn, SlidingWindowOptions{window, overlap});
}

std::vector<EvalRow> evaluate(SegmentationModel<float>& model, const std::vector<VolumeRecord>& raw,
                              const std::array<Index, 3>& window, double overlap) {
  std::vector<EvalRow> rows;
  for (const VolumeRecord& r : raw) {
    if (!r.labels) throw InputError("evaluation record " + r.id + " has no labels");
    const VolumeRecord p = preprocess(r);
    const SegmentationOutput<float> out = segment(model, p, window, overlap);
    const auto d = p.dims();
    rows.push_back({r.id, dice_score(out.labels.reshaped({d[0], d[1], d[2]}), *p.labels, model.classes())});
  }
  return rows;
}

void write_eval_csv(std::ostream& os, const std::vector<EvalRow>& rows, Index classes) {
  os << "case";
  for (Index k = 1; k < classes; ++k) os << ",class_" << k;
  os << ",mean\n";
  std::vector<double> sums(classes, 0.0);
  os << std::setprecision(6) << std::fixed;
  for (const EvalRow& r : rows) {
    os << r.id;
    for (std::size_t k = 0; k < r.dice.per_class.size(); ++k) {
      os << ',' << r.dice.per_class[k];
      sums[k] += r.dice.per_class[k];
    }
    os << ',' << r.dice.mean << '\n';
    sums[classes - 1] += r.dice.mean;
  }
  const double n = std::max<double>(1.0, static_cast<double>(rows.size()));
  os << "mean";
  for (Index k = 0; k < classes; ++k) os << ',' << sums[k] / n;
  os << '\n';
}

}  // namespace tpmamba
