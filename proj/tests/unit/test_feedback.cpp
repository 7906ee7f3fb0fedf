#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <fstream>
#include <set>
#include <unistd.h>

#include "gmln/binio.hpp"
#include "gmln/checkpoint.hpp"
#include "gmln/feedback.hpp"
#include "gmln/inference.hpp"
#include "gmln/metrics.hpp"
#include "gmln/phantom.hpp"
#include "gmln/rng.hpp"

using namespace gmln;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("gmln_fb_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<Study> phantoms(int n, std::uint64_t seed = 3) {
  PhantomConfig cfg;
  cfg.size = 16;
  cfg.seed = seed;
  std::vector<Study> out;
  for (int i = 0; i < n; ++i) out.push_back(generate_phantom(cfg, i));
  return out;
}

// The reference labels stand in for a prediction; `shift` corrupts that many voxels.
Volume fake_prediction(const Study& s, int shift = 0) {
  Volume v = *s.labels;
  for (int i = 0; i < shift; ++i) v.u8[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>((v.u8[i] + 1) % 4);
  return v;
}

RatingRecord rating(const std::string& pid, Verdict v, const std::string& rater = "r1") {
  RatingRecord r;
  r.prediction = pid;
  r.verdict = v;
  r.rater = rater;
  return r;
}

}  // namespace

// ---- verdicts and records ----

TEST(Verdict, ParsesExactNamesOnly) {
  EXPECT_EQ(parse_verdict("Adequate"), Verdict::Adequate);
  EXPECT_EQ(parse_verdict("Inadequate"), Verdict::Inadequate);
  for (const char* bad : {"adequate", "Maybe", "", "Adequate ", "ADEQUATE"}) EXPECT_FALSE(parse_verdict(bad)) << bad;
  EXPECT_EQ(verdict_name(Verdict::Adequate), "Adequate");
}

TEST(Verdict, RatingLineHasExactlyTheLogFields) {
  RatingRecord r{"s1", "p-s1-v0", Verdict::Inadequate, "dr-x", "2026-01-02T03:04:05.000Z", 4};
  auto j = r.to_json();
  std::set<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.insert(it.key());
  EXPECT_EQ(keys, (std::set<std::string>{"study", "prediction", "verdict", "rater", "ts", "model_version"}));
  EXPECT_EQ(j["verdict"], "Inadequate");
  auto back = RatingRecord::from_json(j);
  EXPECT_EQ(back.study, "s1");
  EXPECT_EQ(back.model_version, 4u);
  EXPECT_EQ(back.verdict, Verdict::Inadequate);
  j["verdict"] = "Maybe";
  EXPECT_THROW(RatingRecord::from_json(j), FormatError);
}

// ---- store ----

TEST(Store, PredictionRoundTripAndIndex) {
  auto root = scratch_dir("pred");
  auto data = phantoms(1);
  FeedbackStore store(root.string());
  const auto labels = fake_prediction(data[0], 17);
  const auto pid = store.record_prediction(data[0], labels, 0);
  EXPECT_EQ(pid, "p-" + data[0].id + "-v0");
  EXPECT_EQ(store.load_prediction(pid).u8, labels.u8);
  EXPECT_EQ(store.study_ids(), std::vector<std::string>{data[0].id});
  EXPECT_EQ(store.study_dims(data[0].id), data[0].dims());
  // Images are stored without the reference labels.
  auto again = store.load_study(data[0].id);
  EXPECT_FALSE(again.labels.has_value());
  EXPECT_EQ(again.modalities[2].f32, data[0].modalities[2].f32);
}

TEST(Store, PredictionIsIdempotentPerStudyAndVersion) {
  auto root = scratch_dir("idem");
  auto data = phantoms(1);
  FeedbackStore store(root.string());
  const auto a = store.record_prediction(data[0], fake_prediction(data[0]), 2);
  const auto b = store.record_prediction(data[0], fake_prediction(data[0], 5), 2);
  EXPECT_EQ(a, b);
  EXPECT_EQ(store.counts().predictions, 1);
  // The first stored volume is kept.
  EXPECT_EQ(store.load_prediction(a).u8, data[0].labels->u8);
  const auto c = store.record_prediction(data[0], fake_prediction(data[0]), 3);
  EXPECT_NE(a, c);
  EXPECT_EQ(store.latest_prediction(data[0].id)->id, c);
}

TEST(Store, RejectsBadPredictionsWithoutIndexEntry) {
  auto root = scratch_dir("badpred");
  auto data = phantoms(1);
  FeedbackStore store(root.string());
  auto wrong = Volume::labels({8, 8, 8}, std::vector<std::uint8_t>(512, 0));
  EXPECT_THROW(store.record_prediction(data[0], wrong, 0), ShapeError);
  auto bad = fake_prediction(data[0]);
  bad.u8[3] = 9;
  EXPECT_THROW(store.record_prediction(data[0], bad, 0), DataError);
  Study evil = data[0];
  evil.id = "../escape";
  EXPECT_THROW(store.record_prediction(evil, fake_prediction(data[0]), 0), IngestionError);
  EXPECT_EQ(store.counts().predictions, 0);
  EXPECT_FALSE(fs::exists(root / "predictions.jsonl"));
}

TEST(Store, DuplicateStudyRejected) {
  auto root = scratch_dir("dup");
  auto data = phantoms(1);
  FeedbackStore store(root.string());
  store.add_study(data[0]);
  EXPECT_THROW(store.add_study(data[0]), IngestionError);
  // Predicting on an already stored study is fine.
  EXPECT_NO_THROW(store.record_prediction(data[0], fake_prediction(data[0]), 0));
}

TEST(Store, RatingUpdatesCountsAndRejectsUnknownPrediction) {
  auto root = scratch_dir("rate");
  auto data = phantoms(2);
  FeedbackStore store(root.string());
  const auto pid = store.record_prediction(data[0], fake_prediction(data[0]), 1);
  store.record_rating(rating(pid, Verdict::Adequate));
  EXPECT_EQ(store.counts().adequate, 1);
  EXPECT_EQ(store.counts().inadequate, 0);
  const auto r = store.ratings().back();
  EXPECT_EQ(r.study, data[0].id);
  EXPECT_EQ(r.model_version, 1u);
  EXPECT_FALSE(r.ts.empty());
  EXPECT_EQ(r.ts.back(), 'Z');

  EXPECT_THROW(store.record_rating(rating("p-nope-v0", Verdict::Adequate)), ReferenceError);
  auto mismatch = rating(pid, Verdict::Adequate);
  mismatch.study = data[1].id;
  EXPECT_THROW(store.record_rating(mismatch), ReferenceError);
  EXPECT_EQ(store.counts().ratings, 1);
}

TEST(Store, ReplayAfterRestartReproducesState) {
  auto root = scratch_dir("replay");
  auto data = phantoms(4);
  FeedbackCounts before;
  nlohmann::json summary;
  {
    FeedbackStore store(root.string());
    for (int i = 0; i < 4; ++i) {
      const auto pid = store.record_prediction(data[i], fake_prediction(data[i]), 0);
      store.record_rating(rating(pid, i % 3 == 0 ? Verdict::Inadequate : Verdict::Adequate));
    }
    store.record_rating(rating("p-" + data[1].id + "-v0", Verdict::Inadequate, "r2"));
    before = store.counts();
    summary = store.summary();
  }
  FeedbackStore reopened(root.string());
  EXPECT_EQ(reopened.counts(), before);
  EXPECT_EQ(reopened.summary(), summary);
  EXPECT_EQ(before.adequate, 2);
  EXPECT_EQ(before.inadequate, 3);

  // Replaying in place gives the same answer.
  reopened.replay();
  EXPECT_EQ(reopened.summary(), summary);
}

TEST(Store, TornFinalLineIsDroppedCorruptLineIsNot) {
  auto root = scratch_dir("torn");
  auto data = phantoms(1);
  {
    FeedbackStore store(root.string());
    const auto pid = store.record_prediction(data[0], fake_prediction(data[0]), 0);
    store.record_rating(rating(pid, Verdict::Adequate));
  }
  {
    std::ofstream f(root / "ratings.jsonl", std::ios::app);
    f << R"({"study":"x","predic)";
  }
  {
    FeedbackStore store(root.string());
    EXPECT_EQ(store.counts().ratings, 1);
    store.record_rating(rating("p-" + data[0].id + "-v0", Verdict::Inadequate));
  }
  EXPECT_EQ(FeedbackStore(root.string()).counts().ratings, 2);
  {
    std::ofstream f(root / "ratings.jsonl", std::ios::app);
    f << "\n{not json}\n";
  }
  EXPECT_THROW(FeedbackStore(root.string()), FormatError);
}

TEST(Store, LogRatingReferencingMissingPredictionFailsReplay) {
  auto root = scratch_dir("dangling");
  auto data = phantoms(1);
  { FeedbackStore store(root.string()); store.record_prediction(data[0], fake_prediction(data[0]), 0); }
  binio::append_line((root / "ratings.jsonl").string(),
                     RatingRecord{data[0].id, "p-ghost-v0", Verdict::Adequate, "r", "t", 0}.to_json().dump());
  EXPECT_THROW(FeedbackStore(root.string()), ReferenceError);
}

TEST(Store, SummaryCarriesPerStudyStatus) {
  auto root = scratch_dir("summary");
  auto data = phantoms(3);
  FeedbackStore store(root.string());
  store.add_study(data[2]);
  const auto p0 = store.record_prediction(data[0], fake_prediction(data[0]), 0);
  store.record_prediction(data[1], fake_prediction(data[1]), 0);
  store.record_rating(rating(p0, Verdict::Adequate));
  auto s = store.summary();
  EXPECT_EQ(s["counts"]["studies"], 3);
  EXPECT_EQ(s["counts"]["Adequate"], 1);
  ASSERT_EQ(s["studies"].size(), 3u);
  for (const auto& st : s["studies"]) {
    EXPECT_EQ(st["dims"], nlohmann::json::array({16, 16, 16}));
    if (st["id"] == data[0].id) {
      EXPECT_EQ(st["verdict"], "Adequate");
      EXPECT_EQ(st["prediction"], p0);
      EXPECT_EQ(st["model_version"], 0);
    } else if (st["id"] == data[1].id) {
      EXPECT_TRUE(st["verdict"].is_null());
      EXPECT_FALSE(st["prediction"].is_null());
    } else {
      EXPECT_TRUE(st["prediction"].is_null());
    }
  }
}

// ---- fine-tune set ----

TEST(FineTuneSet, NoAdequateGivesEmptySet) {
  auto root = scratch_dir("empty");
  auto data = phantoms(1);
  FeedbackStore store(root.string());
  EXPECT_TRUE(collect_finetune_set(store).pairs.empty());
  const auto pid = store.record_prediction(data[0], fake_prediction(data[0]), 0);
  store.record_rating(rating(pid, Verdict::Inadequate));
  auto set = collect_finetune_set(store);
  EXPECT_TRUE(set.pairs.empty());
  EXPECT_EQ(set.review_queue, std::vector<std::string>{data[0].id});
}

TEST(FineTuneSet, ThreeAdequateTwoInadequate) {
  auto root = scratch_dir("3a2i");
  auto data = phantoms(5);
  FeedbackStore store(root.string());
  for (int i = 0; i < 5; ++i) {
    const auto pid = store.record_prediction(data[i], fake_prediction(data[i], i), 0);
    store.record_rating(rating(pid, i < 3 ? Verdict::Adequate : Verdict::Inadequate));
  }
  auto set = collect_finetune_set(store);
  ASSERT_EQ(set.pairs.size(), 3u);
  EXPECT_EQ(set.review_queue, (std::vector<std::string>{data[3].id, data[4].id}));
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(set.pairs[i].id, data[i].id);
    // Pseudo-label is the stored prediction, not the reference.
    EXPECT_EQ(set.pairs[i].labels->u8, fake_prediction(data[i], i).u8);
  }
}

TEST(FineTuneSet, DedupKeepsNewestAdequatePrediction) {
  auto root = scratch_dir("dedup");
  auto data = phantoms(1);
  FeedbackStore store(root.string());
  const auto v1 = store.record_prediction(data[0], fake_prediction(data[0], 1), 1);
  const auto v2 = store.record_prediction(data[0], fake_prediction(data[0], 2), 2);
  store.record_rating(rating(v2, Verdict::Adequate));
  store.record_rating(rating(v1, Verdict::Adequate));  // older version, rated later
  auto set = collect_finetune_set(store);
  ASSERT_EQ(set.pairs.size(), 1u);
  EXPECT_EQ(set.prediction_ids[0], v2);
  EXPECT_EQ(set.pairs[0].labels->u8, fake_prediction(data[0], 2).u8);
}

TEST(FineTuneSet, LatestVerdictWins) {
  auto root = scratch_dir("latest");
  auto data = phantoms(2);
  FeedbackStore store(root.string());
  const auto a = store.record_prediction(data[0], fake_prediction(data[0]), 0);
  const auto b = store.record_prediction(data[1], fake_prediction(data[1]), 0);
  store.record_rating(rating(a, Verdict::Adequate));
  store.record_rating(rating(a, Verdict::Inadequate, "r2"));
  store.record_rating(rating(b, Verdict::Inadequate));
  store.record_rating(rating(b, Verdict::Adequate, "r2"));
  auto set = collect_finetune_set(store);
  ASSERT_EQ(set.pairs.size(), 1u);
  EXPECT_EQ(set.pairs[0].id, data[1].id);
  EXPECT_EQ(set.review_queue, std::vector<std::string>{data[0].id});
}

TEST(FineTuneSet, RandomLogsNeverYieldInadequateOrDuplicates) {
  auto root = scratch_dir("random");
  auto data = phantoms(4);
  FeedbackStore store(root.string());
  Rng rng(11);
  std::vector<std::string> pids;
  for (int i = 0; i < 4; ++i)
    for (std::uint32_t v = 0; v < 3; ++v) pids.push_back(store.record_prediction(data[i], fake_prediction(data[i], v), v));
  for (int t = 0; t < 60; ++t) {
    const auto& pid = pids[static_cast<std::size_t>(rng.below(pids.size()))];
    store.record_rating(rating(pid, rng.below(2) ? Verdict::Adequate : Verdict::Inadequate));
    auto set = collect_finetune_set(store);
    std::set<std::string> seen;
    for (std::size_t k = 0; k < set.pairs.size(); ++k) {
      const auto& id = set.pairs[k].id;
      EXPECT_TRUE(seen.insert(id).second) << id;
      EXPECT_EQ(store.latest_rating(id)->verdict, Verdict::Adequate);
      // The chosen prediction's own latest verdict is Adequate.
      Verdict own = Verdict::Inadequate;
      for (const auto& r : store.ratings())
        if (r.prediction == set.prediction_ids[k]) own = r.verdict;
      EXPECT_EQ(own, Verdict::Adequate);
    }
    for (const auto& id : set.review_queue) {
      EXPECT_FALSE(seen.count(id));
      EXPECT_EQ(store.latest_rating(id)->verdict, Verdict::Inadequate);
    }
  }
}

// ---- policy and cycles ----

TEST(FineTunePolicy, Validation) {
  FineTunePolicy p;
  EXPECT_NO_THROW(p.validate());
  EXPECT_DOUBLE_EQ(p.learning_rate(), 4e-5);
  for (auto mutate : std::vector<std::function<void(FineTunePolicy&)>>{
           [](auto& q) { q.steps = 0; }, [](auto& q) { q.lr_scale = 0; }, [](auto& q) { q.lr_scale = 1.5; },
           [](auto& q) { q.min_samples = 0; }, [](auto& q) { q.replay_mix = 1.0; },
           [](auto& q) { q.trigger_every = -1; }}) {
    FineTunePolicy q;
    mutate(q);
    EXPECT_THROW(q.validate(), SpecError);
  }
}

TEST(FineTuneCycle, RefusedBelowMinimum) {
  auto root = scratch_dir("refuse");
  auto data = phantoms(1);
  FeedbackStore store(root.string());
  GmlnModel model(ModelConfig::tiny());
  const auto pid = store.record_prediction(data[0], fake_prediction(data[0]), 0);
  store.record_rating(rating(pid, Verdict::Adequate));
  const auto before = encode_checkpoint(snapshot(model));
  FineTunePolicy policy;
  policy.min_samples = 2;
  auto report = run_finetune_cycle(model, store, policy, 0);
  EXPECT_FALSE(report.ran);
  EXPECT_NE(report.refused.find("1"), std::string::npos);
  EXPECT_EQ(report.samples, 1);
  EXPECT_EQ(model.version(), 0u);
  EXPECT_EQ(encode_checkpoint(snapshot(model)), before);
  EXPECT_TRUE(store.checkpoint_versions().empty());
  EXPECT_EQ(store.counts().cycles, 0);
}

TEST(FineTuneCycle, ValidCycleBumpsVersionAndKeepsPriorCheckpoints) {
  auto root = scratch_dir("cycle");
  auto data = phantoms(3);
  FeedbackStore store(root.string());
  GmlnModel model(ModelConfig::tiny());
  for (auto& s : data) store.record_rating(rating(store.record_prediction(s, segment(model, s), 0), Verdict::Adequate));
  FineTunePolicy policy;
  policy.steps = 3;
  auto r1 = run_finetune_cycle(model, store, policy, 5);
  ASSERT_TRUE(r1.ran) << r1.refused;
  EXPECT_EQ(r1.from_version, 0u);
  EXPECT_EQ(r1.to_version, 1u);
  EXPECT_EQ(model.version(), 1u);
  EXPECT_EQ(r1.losses.size(), 3u);
  EXPECT_EQ(r1.samples, 3);
  EXPECT_TRUE(fs::exists(r1.checkpoint));
  EXPECT_EQ(store.checkpoint_versions(), (std::vector<std::uint32_t>{0, 1}));

  // The stored v1 checkpoint is the trained model.
  GmlnModel loaded(ModelConfig::tiny());
  load_model(loaded, store.checkpoint_path(1));
  EXPECT_EQ(loaded.version(), 1u);
  EXPECT_EQ(encode_checkpoint(snapshot(loaded)), encode_checkpoint(snapshot(model)));

  auto r2 = run_finetune_cycle(model, store, policy, 6);
  ASSERT_TRUE(r2.ran);
  EXPECT_EQ(r2.to_version, 2u);
  EXPECT_EQ(store.checkpoint_versions(), (std::vector<std::uint32_t>{0, 1, 2}));
  EXPECT_EQ(store.cycles().size(), 2u);
  EXPECT_EQ(FeedbackStore(root.string()).cycles().size(), 2u);

  const auto j = r2.to_json();
  EXPECT_EQ(j["losses"].size(), 3u);
  EXPECT_TRUE(j.contains("loss_before"));
}

TEST(FineTuneCycle, SameSeedIsBitwiseIdentical) {
  std::string bytes[2];
  for (int k = 0; k < 2; ++k) {
    auto root = scratch_dir("det" + std::to_string(k));
    auto data = phantoms(2);
    FeedbackStore store(root.string());
    GmlnModel model(ModelConfig::tiny());
    for (auto& s : data) store.record_rating(rating(store.record_prediction(s, segment(model, s), 0), Verdict::Adequate));
    FineTunePolicy policy;
    policy.steps = 2;
    run_finetune_cycle(model, store, policy, 9);
    bytes[k] = binio::read_file(store.checkpoint_path(1));
  }
  EXPECT_EQ(bytes[0], bytes[1]);
}

TEST(FineTuneCycle, ReplayMixNeedsReplayData) {
  auto root = scratch_dir("mix");
  auto data = phantoms(3);
  FeedbackStore store(root.string());
  GmlnModel model(ModelConfig::tiny());
  for (int i = 0; i < 2; ++i)
    store.record_rating(rating(store.record_prediction(data[i], fake_prediction(data[i]), 0), Verdict::Adequate));
  FineTunePolicy policy;
  policy.steps = 1;
  policy.replay_mix = 0.5;
  EXPECT_THROW(run_finetune_cycle(model, store, policy, 0), ContractError);
  EXPECT_EQ(model.version(), 0u);
  auto r = run_finetune_cycle(model, store, policy, 0, {&data[2]});
  EXPECT_TRUE(r.ran);
}

TEST(FineTuneCycle, CountTrigger) {
  auto root = scratch_dir("trigger");
  auto data = phantoms(3);
  FeedbackStore store(root.string());
  GmlnModel model(ModelConfig::tiny());
  FineTunePolicy policy;
  policy.steps = 1;
  policy.trigger_every = 2;
  EXPECT_FALSE(finetune_due(store, policy));
  store.record_rating(rating(store.record_prediction(data[0], fake_prediction(data[0]), 0), Verdict::Adequate));
  EXPECT_FALSE(finetune_due(store, policy));
  store.record_rating(rating(store.record_prediction(data[1], fake_prediction(data[1]), 0), Verdict::Adequate));
  EXPECT_TRUE(finetune_due(store, policy));
  ASSERT_TRUE(run_finetune_cycle(model, store, policy, 0).ran);
  EXPECT_FALSE(finetune_due(store, policy));
  EXPECT_EQ(store.adequate_since_last_cycle(), 0);
  policy.trigger_every = 0;
  store.record_rating(rating(store.record_prediction(data[2], fake_prediction(data[2]), 1), Verdict::Adequate));
  store.record_rating(rating("p-" + data[2].id + "-v1", Verdict::Adequate));
  EXPECT_FALSE(finetune_due(store, policy));
}

// ---- oracle rater ----

TEST(OracleRater, Cases) {
  auto data = phantoms(1);
  const auto& gt = data[0].labels->u8;
  EXPECT_EQ(oracle_rater(gt, gt), Verdict::Adequate);
  EXPECT_EQ(oracle_rater(std::vector<std::uint8_t>(gt.size(), 0), gt), Verdict::Inadequate);
  // Exactly at the threshold counts as Adequate.
  auto noisy = fake_prediction(data[0], 400).u8;
  const double mean = region_dice(noisy, gt).mean;
  ASSERT_LT(mean, 1.0);
  EXPECT_EQ(oracle_rater(noisy, gt, mean), Verdict::Adequate);
  EXPECT_EQ(oracle_rater(noisy, gt, std::nextafter(mean, 2.0)), Verdict::Inadequate);
}
