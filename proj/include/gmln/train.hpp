#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gmln/checkpoint.hpp"
#include "gmln/model.hpp"
#include "gmln/study.hpp"

namespace gmln {

// ---- loss ----

struct LossConfig {
  double dice_weight = 1.0;
  double ce_weight = 1.0;
  double smooth = 1e-5;
  void validate() const;
};

struct LossResult {
  Var total;
  double dice = 0.0;  // soft Dice term, 1 - mean over classes
  double ce = 0.0;
  std::array<double, kClasses> class_dice{};
};

/// Soft Dice over softmax probabilities (sums over batch and voxels, averaged over
/// classes) plus mean voxel cross-entropy. `labels` is (B, D, H, W) flattened.
LossResult dice_ce_loss(const Var& logits, std::span<const std::uint8_t> labels,
                        const LossConfig& cfg = {});

// ---- optimizer ----

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Decoupled weight decay Adam. Gradients are looked up by parameter buffer on a tape.
class AdamW {
 public:
  AdamW(std::vector<ParamEntry> params, AdamWConfig cfg = {});

  struct StepResult {
    bool applied = false;
    std::string reason;  // set when a non-finite gradient aborted the step
  };
  /// Parameters without a gradient on `tape` are left untouched. Any non-finite
  /// gradient aborts the whole step before anything is modified.
  StepResult step(const Tape& tape, double lr);
  /// Same update with explicit gradients, parallel to the parameter list.
  StepResult step(const std::vector<Tensor>& grads, double lr);

  std::int64_t steps() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }

  /// Entries "m/<name>", "v/<name>" and "step", in VCKP framing.
  CheckpointFile state() const;
  void load_state(const CheckpointFile& file);

 private:
  std::vector<ParamEntry> params_;
  std::vector<Tensor> m_, v_;
  AdamWConfig cfg_;
  std::int64_t step_ = 0;
};

// ---- schedule ----

struct LrSchedule {
  double start = 4e-6;
  double peak = 4e-4;
  std::int64_t warmup_steps = 20;
  std::int64_t total_steps = 200;
  double power = 0.9;

  /// Warmup over 10% of `total` steps.
  static LrSchedule for_steps(std::int64_t total);
  void validate() const;
  /// Linear warmup start -> peak, then peak * (1 - (t - w) / (T - w))^power; t > T clamps.
  double at(std::int64_t step) const;
};

// ---- training loop ----

struct StepRecord {
  std::int64_t step = 0;  // 1-based index of the completed step
  double lr = 0, total = 0, dice = 0, ce = 0;
};

struct TrainConfig {
  std::int64_t steps = 200;
  int batch_size = 2;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 50;
  LossConfig loss;
  AdamWConfig adamw;
  std::optional<LrSchedule> schedule;  // default: LrSchedule::for_steps(steps)
  std::optional<double> constant_lr;   // overrides the schedule when set
  std::string out_dir;                 // empty: no files written
};

/// Seeded, resumable loop. The sample order depends only on (seed, step), so resuming
/// from a checkpoint needs nothing beyond the stored optimizer step count.
class Trainer {
 public:
  Trainer(GmlnModel& model, std::vector<const Study*> data, TrainConfig cfg);

  /// Runs one step. Throws NumericError on a non-finite loss or gradient without
  /// touching weights or files.
  StepRecord step();
  /// Runs until `cfg.steps` and writes the final checkpoint.
  std::vector<StepRecord> run(const std::function<void(const StepRecord&)>& on_step = {});

  std::int64_t completed() const { return optimizer_.steps(); }
  double lr_for(std::int64_t step) const;
  /// Study indices for the given 0-based step.
  std::vector<std::size_t> batch_indices(std::int64_t step) const;

  /// Writes `<out>/checkpoint.vckp`, `<out>/checkpoint.optim.vckp`, and a retained
  /// `<out>/step_<n>.vckp` copy.
  void save() const;
  /// Restores model and optimizer from `<dir>` and truncates the metrics log to match.
  void resume(const std::string& dir);

  const std::vector<StepRecord>& history() const { return history_; }
  static std::string metrics_line(const StepRecord& r);

 private:
  GmlnModel& model_;
  std::vector<const Study*> data_;
  TrainConfig cfg_;
  LrSchedule schedule_;
  AdamW optimizer_;
  std::vector<StepRecord> history_;
};

/// Evaluates the loss without updating anything (eval-mode normalization).
double evaluate_loss(const GmlnModel& model, std::span<const Study* const> data,
                     const LossConfig& cfg = {}, int batch_size = 2);

}  // namespace gmln
