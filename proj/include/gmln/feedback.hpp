#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gmln/model.hpp"
#include "gmln/study.hpp"
#include "json.hpp"

namespace gmln {

enum class Verdict { Adequate, Inadequate };

std::string_view verdict_name(Verdict v);
/// Exactly "Adequate" or "Inadequate".
std::optional<Verdict> parse_verdict(std::string_view text);

struct RatingRecord {
  std::string study;
  std::string prediction;
  Verdict verdict = Verdict::Inadequate;
  std::string rater;
  std::string ts;  // ISO-8601 UTC; filled on append when empty
  std::uint32_t model_version = 0;

  nlohmann::json to_json() const;
  static RatingRecord from_json(const nlohmann::json& j);
};

struct PredictionRecord {
  std::string id;  // "p-<study>-v<version>"
  std::string study;
  std::uint32_t model_version = 0;
  std::string file;  // relative to the store root

  nlohmann::json to_json() const;
  static PredictionRecord from_json(const nlohmann::json& j);
};

struct CycleRecord {
  std::uint32_t from_version = 0, to_version = 0;
  std::int64_t samples = 0;
  std::int64_t adequate_seen = 0;  // Adequate ratings in the log when the cycle ran
  std::string checkpoint;

  nlohmann::json to_json() const;
  static CycleRecord from_json(const nlohmann::json& j);
};

struct FeedbackCounts {
  std::int64_t studies = 0, predictions = 0, ratings = 0, adequate = 0, inadequate = 0, cycles = 0;
  bool operator==(const FeedbackCounts&) const = default;
};

/// On-disk layout under the root:
///   studies/<id>/           manifest and VSEG volumes
///   predictions/<pid>.vseg  predicted label volumes
///   checkpoints/model_v<N>.vckp
///   predictions.jsonl       prediction index, one JSON object per line
///   ratings.jsonl           append-only rating log
///   cycles.jsonl            fine-tune cycle log
/// The in-memory index is rebuilt from the three logs on open, so state after a
/// restart equals state before it.
class FeedbackStore {
 public:
  explicit FeedbackStore(std::string root);

  const std::string& root() const { return root_; }
  /// Re-reads every log from disk, discarding the in-memory index.
  void replay();

  /// Persists a study. Storing an id that already exists is rejected.
  void add_study(const Study& study);
  bool has_study(const std::string& id) const;
  Study load_study(const std::string& id) const;
  std::vector<std::string> study_ids() const;
  Dims3 study_dims(const std::string& id) const;

  /// Stores the volume (and the study if new) and returns "p-<study>-v<version>".
  /// Repeating the same (study, version) returns the existing id without rewriting.
  std::string record_prediction(const Study& study, const Volume& labels, std::uint32_t model_version);
  std::optional<PredictionRecord> prediction(const std::string& id) const;
  /// Highest model version predicted for the study.
  std::optional<PredictionRecord> latest_prediction(const std::string& study) const;
  Volume load_prediction(const std::string& id) const;

  /// Throws ReferenceError when the prediction or study is unknown or mismatched.
  void record_rating(RatingRecord rating);
  std::vector<RatingRecord> ratings() const;
  /// Most recent rating of any prediction of the study, in log order.
  std::optional<RatingRecord> latest_rating(const std::string& study) const;

  std::string checkpoint_path(std::uint32_t version) const;
  std::vector<std::uint32_t> checkpoint_versions() const;
  void record_cycle(const CycleRecord& cycle);
  std::vector<CycleRecord> cycles() const;
  /// Adequate ratings appended since the last recorded cycle.
  std::int64_t adequate_since_last_cycle() const;

  FeedbackCounts counts() const;
  /// Counts plus one status object per study, the shape served by the summary endpoint.
  nlohmann::json summary() const;

 private:
  void load_logs();
  std::string root_;
  mutable std::mutex mu_;
  std::map<std::string, Dims3> studies_;
  std::vector<PredictionRecord> predictions_;
  std::map<std::string, std::size_t> prediction_index_;
  std::vector<RatingRecord> ratings_;
  std::vector<CycleRecord> cycles_;
};

// ---- fine-tuning ----

struct FineTunePolicy {
  std::int64_t steps = 100;
  double lr_scale = 0.1;  // of the schedule peak, held constant
  std::int64_t min_samples = 2;
  /// Cycle automatically after this many new Adequate ratings; 0 means on command only.
  std::int64_t trigger_every = 0;
  /// Fraction of each batch drawn from replay studies (base training data).
  double replay_mix = 0.0;
  int batch_size = 2;
  void validate() const;
  double learning_rate() const;
};

/// Which stored predictions would train, without loading any volumes.
struct FineTuneSelection {
  std::vector<std::string> studies;
  std::vector<std::string> prediction_ids;  // parallel to `studies`
  /// Studies whose latest rating is Inadequate, in log order of that rating.
  std::vector<std::string> review_queue;
};

/// One entry per study whose latest rating is Adequate, using the newest prediction
/// (highest version) whose own latest rating is Adequate. Inadequate-latest studies go
/// to the review queue.
FineTuneSelection select_finetune(const FeedbackStore& store);

struct FineTuneSet {
  /// Stored images with the selected prediction as labels (pseudo-labels).
  std::vector<Study> pairs;
  std::vector<std::string> prediction_ids;
  std::vector<std::string> review_queue;
};

FineTuneSet collect_finetune_set(const FeedbackStore& store);

/// True when the policy has a count trigger and enough new Adequate ratings arrived.
bool finetune_due(const FeedbackStore& store, const FineTunePolicy& policy);

struct FineTuneReport {
  bool ran = false;
  std::string refused;  // reason when not run
  std::int64_t samples = 0;
  std::uint32_t from_version = 0, to_version = 0;
  std::vector<double> losses;  // training loss per step
  double loss_before = 0, loss_after = 0;  // over the feedback set, eval mode
  std::string checkpoint;
  nlohmann::json to_json() const;
};

/// Trains `model` in place on the collected set. A refused cycle leaves the model and
/// store untouched. A completed cycle makes sure the starting weights are saved, then
/// writes checkpoints/model_v<N+1>.vckp without removing older files.
FineTuneReport run_finetune_cycle(GmlnModel& model, FeedbackStore& store, const FineTunePolicy& policy,
                                  std::uint64_t seed, const std::vector<const Study*>& replay = {});

/// Adequate iff the mean WT/TC/ET Dice is at least `threshold`.
Verdict oracle_rater(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                     double threshold = 0.8);

}  // namespace gmln
