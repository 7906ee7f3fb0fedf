#include "gmln/feedback.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <regex>

#include "gmln/binio.hpp"
#include "gmln/checkpoint.hpp"
#include "gmln/error.hpp"
#include "gmln/metrics.hpp"
#include "gmln/rng.hpp"
#include "gmln/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace gmln {

namespace {

constexpr const char* kPredictionsLog = "predictions.jsonl";
constexpr const char* kRatingsLog = "ratings.jsonl";
constexpr const char* kCyclesLog = "cycles.jsonl";

void check_id(const std::string& id) {
  static const std::regex ok("[A-Za-z0-9][A-Za-z0-9._-]{0,127}");
  if (!std::regex_match(id, ok)) throw IngestionError("invalid study id '" + id + "'");
}

std::string now_utc() {
  const auto now = std::chrono::system_clock::now();
  const auto secs = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  char out[40];
  std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

// One JSON object per line. A final line without its newline is a torn append: it is
// cut off the file so later appends start clean. Anything else malformed is an error.
std::vector<json> read_jsonl(const std::string& path) {
  std::vector<json> out;
  if (!fs::exists(path)) return out;
  const std::string text = binio::read_file(path);
  std::size_t pos = 0;
  int line = 0;
  while (pos < text.size()) {
    ++line;
    const auto nl = text.find('\n', pos);
    const bool complete = nl != std::string::npos;
    if (!complete) {
      fs::resize_file(path, pos);
      break;
    }
    const auto piece = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (piece.empty()) continue;
    try {
      out.push_back(json::parse(piece));
    } catch (const json::exception& e) {
      throw FormatError(path + ": line " + std::to_string(line) + ": " + e.what());
    }
  }
  return out;
}

std::string manifest_path(const std::string& root, const std::string& id) {
  return (fs::path(root) / "studies" / id / (id + ".json")).string();
}

}  // namespace

std::string_view verdict_name(Verdict v) { return v == Verdict::Adequate ? "Adequate" : "Inadequate"; }

std::optional<Verdict> parse_verdict(std::string_view text) {
  if (text == "Adequate") return Verdict::Adequate;
  if (text == "Inadequate") return Verdict::Inadequate;
  return std::nullopt;
}

json RatingRecord::to_json() const {
  return {{"study", study}, {"prediction", prediction}, {"verdict", verdict_name(verdict)},
          {"rater", rater},  {"ts", ts},                 {"model_version", model_version}};
}

RatingRecord RatingRecord::from_json(const json& j) {
  RatingRecord r;
  try {
    r.study = j.at("study").get<std::string>();
    r.prediction = j.at("prediction").get<std::string>();
    const auto v = parse_verdict(j.at("verdict").get<std::string>());
    if (!v) throw FormatError("rating: invalid verdict " + j.at("verdict").dump());
    r.verdict = *v;
    r.rater = j.at("rater").get<std::string>();
    r.ts = j.at("ts").get<std::string>();
    r.model_version = j.at("model_version").get<std::uint32_t>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("rating: ") + e.what());
  }
  return r;
}

json PredictionRecord::to_json() const {
  return {{"id", id}, {"study", study}, {"model_version", model_version}, {"file", file}};
}

PredictionRecord PredictionRecord::from_json(const json& j) {
  try {
    return {j.at("id").get<std::string>(), j.at("study").get<std::string>(),
            j.at("model_version").get<std::uint32_t>(), j.at("file").get<std::string>()};
  } catch (const json::exception& e) {
    throw FormatError(std::string("prediction index: ") + e.what());
  }
}

json CycleRecord::to_json() const {
  return {{"from_version", from_version}, {"to_version", to_version}, {"samples", samples},
          {"adequate_seen", adequate_seen}, {"checkpoint", checkpoint}};
}

CycleRecord CycleRecord::from_json(const json& j) {
  try {
    return {j.at("from_version").get<std::uint32_t>(), j.at("to_version").get<std::uint32_t>(),
            j.at("samples").get<std::int64_t>(), j.at("adequate_seen").get<std::int64_t>(),
            j.at("checkpoint").get<std::string>()};
  } catch (const json::exception& e) {
    throw FormatError(std::string("cycle log: ") + e.what());
  }
}

// ---- store ----

FeedbackStore::FeedbackStore(std::string root) : root_(std::move(root)) {
  try {
    for (const char* d : {"studies", "predictions", "checkpoints"}) fs::create_directories(fs::path(root_) / d);
  } catch (const fs::filesystem_error& e) {
    throw StorageError(std::string("feedback store: ") + e.what());
  }
  load_logs();
}

void FeedbackStore::replay() {
  std::lock_guard lock(mu_);
  load_logs();
}

void FeedbackStore::load_logs() {
  studies_.clear();
  predictions_.clear();
  prediction_index_.clear();
  ratings_.clear();
  cycles_.clear();

  // A study exists once its manifest is written; the manifest goes last.
  for (const auto& entry : fs::directory_iterator(fs::path(root_) / "studies")) {
    if (!entry.is_directory()) continue;
    const auto id = entry.path().filename().string();
    const auto m = manifest_path(root_, id);
    if (!fs::exists(m)) continue;
    studies_[id] = gmln::load_study(m).dims();
  }
  for (const auto& j : read_jsonl((fs::path(root_) / kPredictionsLog).string())) {
    auto p = PredictionRecord::from_json(j);
    if (!studies_.count(p.study)) throw ReferenceError("prediction " + p.id + " references unknown study " + p.study);
    if (prediction_index_.count(p.id)) continue;
    prediction_index_[p.id] = predictions_.size();
    predictions_.push_back(std::move(p));
  }
  for (const auto& j : read_jsonl((fs::path(root_) / kRatingsLog).string())) {
    auto r = RatingRecord::from_json(j);
    if (!prediction_index_.count(r.prediction))
      throw ReferenceError("rating references unknown prediction " + r.prediction);
    ratings_.push_back(std::move(r));
  }
  for (const auto& j : read_jsonl((fs::path(root_) / kCyclesLog).string()))
    cycles_.push_back(CycleRecord::from_json(j));
}

void FeedbackStore::add_study(const Study& study) {
  check_id(study.id);
  study.validate();
  std::lock_guard lock(mu_);
  if (studies_.count(study.id)) throw IngestionError("study " + study.id + " already exists");
  // Only the images are kept; reference labels never enter the store.
  Study images = study;
  images.labels.reset();
  save_study((fs::path(root_) / "studies" / study.id).string(), images);
  studies_[study.id] = study.dims();
}

bool FeedbackStore::has_study(const std::string& id) const {
  std::lock_guard lock(mu_);
  return studies_.count(id) > 0;
}

Study FeedbackStore::load_study(const std::string& id) const {
  {
    std::lock_guard lock(mu_);
    if (!studies_.count(id)) throw ReferenceError("unknown study " + id);
  }
  return gmln::load_study(manifest_path(root_, id));
}

std::vector<std::string> FeedbackStore::study_ids() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> ids;
  for (const auto& [id, _] : studies_) ids.push_back(id);
  return ids;
}

Dims3 FeedbackStore::study_dims(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = studies_.find(id);
  if (it == studies_.end()) throw ReferenceError("unknown study " + id);
  return it->second;
}

std::string FeedbackStore::record_prediction(const Study& study, const Volume& labels,
                                             std::uint32_t model_version) {
  check_id(study.id);
  if (labels.type != VoxelType::u8 || labels.channels != 1 || labels.dims != study.dims())
    throw ShapeError("prediction for " + study.id + " must be a single-channel u8 volume of the study dims");
  for (auto v : labels.u8)
    if (v >= kClasses) throw DataError("prediction for " + study.id + " has label " + std::to_string(v));

  const std::string id = "p-" + study.id + "-v" + std::to_string(model_version);
  bool known_study;
  {
    std::lock_guard lock(mu_);
    if (prediction_index_.count(id)) return id;
    known_study = studies_.count(study.id) > 0;
  }
  if (!known_study) {
    try {
      add_study(study);
    } catch (const IngestionError&) {
      if (!has_study(study.id)) throw;
    }
  }

  std::lock_guard lock(mu_);
  if (prediction_index_.count(id)) return id;
  PredictionRecord rec{id, study.id, model_version, "predictions/" + id + ".vseg"};
  write_volume((fs::path(root_) / rec.file).string(), labels);
  binio::append_line((fs::path(root_) / kPredictionsLog).string(), rec.to_json().dump());
  prediction_index_[id] = predictions_.size();
  predictions_.push_back(std::move(rec));
  return id;
}

std::optional<PredictionRecord> FeedbackStore::prediction(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = prediction_index_.find(id);
  if (it == prediction_index_.end()) return std::nullopt;
  return predictions_[it->second];
}

std::optional<PredictionRecord> FeedbackStore::latest_prediction(const std::string& study) const {
  std::lock_guard lock(mu_);
  std::optional<PredictionRecord> best;
  for (const auto& p : predictions_)
    if (p.study == study && (!best || p.model_version > best->model_version)) best = p;
  return best;
}

Volume FeedbackStore::load_prediction(const std::string& id) const {
  auto p = prediction(id);
  if (!p) throw ReferenceError("unknown prediction " + id);
  return read_volume((fs::path(root_) / p->file).string());
}

void FeedbackStore::record_rating(RatingRecord rating) {
  std::lock_guard lock(mu_);
  auto it = prediction_index_.find(rating.prediction);
  if (it == prediction_index_.end()) throw ReferenceError("unknown prediction " + rating.prediction);
  const auto& p = predictions_[it->second];
  if (rating.study.empty()) rating.study = p.study;
  if (rating.study != p.study)
    throw ReferenceError("prediction " + p.id + " belongs to study " + p.study + ", not " + rating.study);
  rating.model_version = p.model_version;
  if (rating.ts.empty()) rating.ts = now_utc();
  binio::append_line((fs::path(root_) / kRatingsLog).string(), rating.to_json().dump());
  ratings_.push_back(std::move(rating));
}

std::vector<RatingRecord> FeedbackStore::ratings() const {
  std::lock_guard lock(mu_);
  return ratings_;
}

std::optional<RatingRecord> FeedbackStore::latest_rating(const std::string& study) const {
  std::lock_guard lock(mu_);
  for (auto it = ratings_.rbegin(); it != ratings_.rend(); ++it)
    if (it->study == study) return *it;
  return std::nullopt;
}

std::string FeedbackStore::checkpoint_path(std::uint32_t version) const {
  return (fs::path(root_) / "checkpoints" / ("model_v" + std::to_string(version) + ".vckp")).string();
}

std::vector<std::uint32_t> FeedbackStore::checkpoint_versions() const {
  static const std::regex name("model_v([0-9]+)\\.vckp");
  std::vector<std::uint32_t> out;
  for (const auto& e : fs::directory_iterator(fs::path(root_) / "checkpoints")) {
    std::smatch m;
    const auto f = e.path().filename().string();
    if (std::regex_match(f, m, name)) out.push_back(static_cast<std::uint32_t>(std::stoul(m[1])));
  }
  std::sort(out.begin(), out.end());
  return out;
}

void FeedbackStore::record_cycle(const CycleRecord& cycle) {
  std::lock_guard lock(mu_);
  binio::append_line((fs::path(root_) / kCyclesLog).string(), cycle.to_json().dump());
  cycles_.push_back(cycle);
}

std::vector<CycleRecord> FeedbackStore::cycles() const {
  std::lock_guard lock(mu_);
  return cycles_;
}

std::int64_t FeedbackStore::adequate_since_last_cycle() const {
  std::lock_guard lock(mu_);
  std::int64_t total = 0;
  for (const auto& r : ratings_) total += r.verdict == Verdict::Adequate;
  return total - (cycles_.empty() ? 0 : cycles_.back().adequate_seen);
}

FeedbackCounts FeedbackStore::counts() const {
  std::lock_guard lock(mu_);
  FeedbackCounts c;
  c.studies = static_cast<std::int64_t>(studies_.size());
  c.predictions = static_cast<std::int64_t>(predictions_.size());
  c.ratings = static_cast<std::int64_t>(ratings_.size());
  for (const auto& r : ratings_) (r.verdict == Verdict::Adequate ? c.adequate : c.inadequate) += 1;
  c.cycles = static_cast<std::int64_t>(cycles_.size());
  return c;
}

json FeedbackStore::summary() const {
  const auto c = counts();
  const auto sel = select_finetune(*this);
  json studies = json::array();
  for (const auto& id : study_ids()) {
    json s{{"id", id}};
    const auto d = study_dims(id);
    s["dims"] = {d[0], d[1], d[2]};
    const auto p = latest_prediction(id);
    s["prediction"] = p ? json(p->id) : json(nullptr);
    s["model_version"] = p ? json(p->model_version) : json(nullptr);
    const auto r = latest_rating(id);
    s["verdict"] = r ? json(verdict_name(r->verdict)) : json(nullptr);
    s["rated_prediction"] = r ? json(r->prediction) : json(nullptr);
    studies.push_back(std::move(s));
  }
  return {{"counts",
           {{"studies", c.studies},
            {"predictions", c.predictions},
            {"ratings", c.ratings},
            {"Adequate", c.adequate},
            {"Inadequate", c.inadequate},
            {"cycles", c.cycles}}},
          {"finetune_pairs", sel.studies.size()},
          {"adequate_since_last_cycle", adequate_since_last_cycle()},
          {"review_queue", sel.review_queue},
          {"studies", std::move(studies)}};
}

// ---- fine-tuning ----

void FineTunePolicy::validate() const {
  if (steps < 1) throw SpecError("fine-tune steps must be >= 1, got " + std::to_string(steps));
  if (!(lr_scale > 0.0 && lr_scale <= 1.0)) throw SpecError("fine-tune lr scale must be in (0, 1]");
  if (min_samples < 1) throw SpecError("fine-tune minimum sample count must be >= 1");
  if (trigger_every < 0) throw SpecError("fine-tune trigger count must be >= 0");
  if (!(replay_mix >= 0.0 && replay_mix < 1.0)) throw SpecError("replay mix must be in [0, 1)");
  if (batch_size < 1) throw SpecError("fine-tune batch size must be >= 1");
}

double FineTunePolicy::learning_rate() const { return lr_scale * LrSchedule{}.peak; }

FineTuneSelection select_finetune(const FeedbackStore& store) {
  const auto ratings = store.ratings();
  // Latest verdict per prediction and per study, in log order.
  std::map<std::string, Verdict> by_prediction;
  std::map<std::string, std::size_t> study_last;
  for (std::size_t i = 0; i < ratings.size(); ++i) {
    by_prediction[ratings[i].prediction] = ratings[i].verdict;
    study_last[ratings[i].study] = i;
  }
  std::vector<std::pair<std::size_t, std::string>> order;
  for (const auto& [study, idx] : study_last) order.emplace_back(idx, study);
  std::sort(order.begin(), order.end());

  FineTuneSelection sel;
  for (const auto& [idx, study] : order) {
    if (ratings[idx].verdict == Verdict::Inadequate) {
      sel.review_queue.push_back(study);
      continue;
    }
    std::optional<PredictionRecord> best;
    for (const auto& [pid, v] : by_prediction) {
      if (v != Verdict::Adequate) continue;
      auto p = store.prediction(pid);
      if (p && p->study == study && (!best || p->model_version > best->model_version)) best = p;
    }
    sel.studies.push_back(study);
    sel.prediction_ids.push_back(best->id);
  }
  return sel;
}

FineTuneSet collect_finetune_set(const FeedbackStore& store) {
  auto sel = select_finetune(store);
  FineTuneSet set;
  for (std::size_t i = 0; i < sel.studies.size(); ++i) {
    Study s = store.load_study(sel.studies[i]);
    s.labels = store.load_prediction(sel.prediction_ids[i]);
    set.pairs.push_back(std::move(s));
  }
  set.prediction_ids = std::move(sel.prediction_ids);
  set.review_queue = std::move(sel.review_queue);
  return set;
}

bool finetune_due(const FeedbackStore& store, const FineTunePolicy& policy) {
  return policy.trigger_every > 0 && store.adequate_since_last_cycle() >= policy.trigger_every;
}

json FineTuneReport::to_json() const {
  json j{{"ran", ran}, {"samples", samples}, {"from_version", from_version}, {"to_version", to_version}};
  if (!ran) {
    j["refused"] = refused;
    return j;
  }
  j["losses"] = losses;
  j["loss_before"] = loss_before;
  j["loss_after"] = loss_after;
  j["checkpoint"] = checkpoint;
  return j;
}

FineTuneReport run_finetune_cycle(GmlnModel& model, FeedbackStore& store, const FineTunePolicy& policy,
                                  std::uint64_t seed, const std::vector<const Study*>& replay) {
  policy.validate();
  FineTuneReport report;
  report.from_version = report.to_version = model.version();
  report.samples = static_cast<std::int64_t>(select_finetune(store).studies.size());
  if (report.samples < policy.min_samples) {
    report.refused = "insufficient feedback: " + std::to_string(report.samples) + " Adequate studies, need " +
                     std::to_string(policy.min_samples);
    return report;
  }
  auto set = collect_finetune_set(store);
  report.samples = static_cast<std::int64_t>(set.pairs.size());

  std::vector<const Study*> feedback;
  for (const auto& s : set.pairs) feedback.push_back(&s);
  std::vector<const Study*> data = feedback;
  if (policy.replay_mix > 0.0) {
    if (replay.empty()) throw ContractError("replay mix " + std::to_string(policy.replay_mix) + " needs replay studies");
    const auto n = static_cast<std::size_t>(
        std::lround(policy.replay_mix / (1.0 - policy.replay_mix) * static_cast<double>(feedback.size())));
    Rng rng(seed, "finetune.replay");
    for (std::size_t i = 0; i < n; ++i) data.push_back(replay[static_cast<std::size_t>(rng.below(replay.size()))]);
  }

  const std::uint32_t from = model.version();
  if (!fs::exists(store.checkpoint_path(from))) save_model(model, store.checkpoint_path(from));
  const auto before = snapshot(model);
  try {
    report.loss_before = evaluate_loss(model, feedback, {}, policy.batch_size);
    TrainConfig tc;
    tc.steps = policy.steps;
    tc.batch_size = policy.batch_size;
    tc.seed = seed;
    tc.constant_lr = policy.learning_rate();
    Trainer trainer(model, data, tc);
    for (const auto& r : trainer.run()) report.losses.push_back(r.total);
    report.loss_after = evaluate_loss(model, feedback, {}, policy.batch_size);

    model.set_version(from + 1);
    report.to_version = from + 1;
    report.checkpoint = store.checkpoint_path(from + 1);
    save_model(model, report.checkpoint);
  } catch (...) {
    restore(model, before);
    throw;
  }
  store.record_cycle({from, from + 1, report.samples, store.counts().adequate, report.checkpoint});
  report.ran = true;
  return report;
}

Verdict oracle_rater(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, double threshold) {
  return region_dice(pred, gt).mean >= threshold ? Verdict::Adequate : Verdict::Inadequate;
}

}  // namespace gmln
