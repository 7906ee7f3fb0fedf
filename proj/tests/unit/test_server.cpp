#include <gtest/gtest.h>
#include <httplib.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <thread>
#include <unistd.h>

#include "gmln/feedback.hpp"
#include "gmln/phantom.hpp"
#include "gmln/server.hpp"
#include "gmln/slice.hpp"

using namespace gmln;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("gmln_srv_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Volume ramp(const Dims3& dims) {
  std::vector<float> v(static_cast<std::size_t>(dims[0] * dims[1] * dims[2]));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i);
  return Volume::scalar(dims, v);
}

Study phantom(int index, std::uint64_t seed = 4) {
  PhantomConfig cfg;
  cfg.size = 16;
  cfg.seed = seed;
  return generate_phantom(cfg, index);
}

httplib::MultipartFormDataItems upload_items(const Study& s, bool with_manifest = true) {
  httplib::MultipartFormDataItems items;
  for (int i = 0; i < kModalities; ++i)
    items.push_back({kModalityNames[i], encode_volume(s.modalities[i]), std::string(kModalityNames[i]) + ".vseg",
                     "application/octet-stream"});
  if (with_manifest) items.push_back({"manifest", json{{"id", s.id}}.dump(), "manifest.json", "application/json"});
  return items;
}

std::vector<httplib::MultipartFormData> without(httplib::MultipartFormDataItems items, const std::string& name) {
  std::erase_if(items, [&](const auto& it) { return it.name == name; });
  return items;
}

ServerConfig tiny_config(const fs::path& root) {
  ServerConfig cfg;
  cfg.port = 0;
  cfg.store_root = root.string();
  cfg.model = ModelConfig::tiny();
  cfg.policy.steps = 2;
  cfg.policy.min_samples = 2;
  return cfg;
}

json wait_job(httplib::Client& cli, const std::string& id, std::vector<std::string>* states = nullptr) {
  for (int i = 0; i < 6000; ++i) {
    auto r = cli.Get("/jobs/" + id);
    EXPECT_TRUE(r);
    auto j = json::parse(r->body);
    if (states && (states->empty() || states->back() != j["state"])) states->push_back(j["state"]);
    if (j["state"] == "done" || j["state"] == "failed") return j;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  ADD_FAILURE() << "job " << id << " did not finish";
  return {};
}

class ServerTest : public ::testing::Test {
 protected:
  void SetUp() override { root = scratch_dir(::testing::UnitTest::GetInstance()->current_test_info()->name()); }
  void launch(ServerConfig cfg) {
    server = std::make_unique<Server>(std::move(cfg));
    server->start();
    cli = std::make_unique<httplib::Client>("127.0.0.1", server->port());
    cli->set_read_timeout(120);
  }
  void launch() { launch(tiny_config(root)); }
  std::string upload(const Study& s) {
    auto r = cli->Post("/studies", upload_items(s));
    EXPECT_TRUE(r);
    EXPECT_EQ(r->status, 201) << r->body;
    return json::parse(r->body)["study_id"];
  }
  std::string segment(const std::string& id) {
    auto r = cli->Post("/studies/" + id + "/segment");
    EXPECT_EQ(r->status, 202) << r->body;
    auto j = wait_job(*cli, json::parse(r->body)["job_id"]);
    EXPECT_EQ(j["state"], "done") << j.dump();
    return j["result"]["prediction_id"];
  }
  int rate(const std::string& id, const std::string& verdict) {
    return cli->Post("/studies/" + id + "/rating", json{{"verdict", verdict}, {"rater", "t"}}.dump(), "application/json")
        ->status;
  }
  json summary() { return json::parse(cli->Get("/feedback/summary")->body); }

  fs::path root;
  std::unique_ptr<Server> server;
  std::unique_ptr<httplib::Client> cli;
};

}  // namespace

// ---- slices ----

TEST(Slice, AxesGiveExpectedShapesAndVoxels) {
  const Dims3 dims{2, 3, 4};
  auto v = ramp(dims);  // value = (d * 3 + h) * 4 + w, window 0..23
  auto at = [](const Image& img, int r, int c) { return img.pixels[static_cast<std::size_t>(r * img.width + c)]; };
  auto win = [](int x) { return static_cast<std::uint8_t>(std::lround(x / 23.0 * 255.0)); };
  auto d = gray_slice(v, 'd', 1);
  EXPECT_EQ(d.height, 3);
  EXPECT_EQ(d.width, 4);
  EXPECT_EQ(at(d, 2, 3), win((1 * 3 + 2) * 4 + 3));
  auto h = gray_slice(v, 'h', 2);
  EXPECT_EQ(h.height, 2);
  EXPECT_EQ(h.width, 4);
  EXPECT_EQ(at(h, 1, 1), win((1 * 3 + 2) * 4 + 1));
  auto w = gray_slice(v, 'w', 0);
  EXPECT_EQ(w.height, 2);
  EXPECT_EQ(w.width, 3);
  EXPECT_EQ(at(w, 1, 2), win((1 * 3 + 2) * 4 + 0));
  EXPECT_EQ(at(gray_slice(v, 'd', 0), 0, 0), 0);
  EXPECT_EQ(at(d, 2, 3), 255);
}

TEST(Slice, ConstantVolumeIsUniformGray) {
  auto v = Volume::scalar({4, 4, 4}, std::vector<float>(64, 3.0f));
  auto img = gray_slice(v, 'h', 2);
  for (auto p : img.pixels) EXPECT_EQ(p, 128);
}

TEST(Slice, OverlayBlendsLabelColors) {
  auto v = Volume::scalar({1, 1, 4}, {0.f, 1.f, 1.f, 1.f});
  auto l = Volume::labels({1, 1, 4}, {0, 1, 2, 3});
  auto img = overlay_slice(v, l, 'd', 0);
  ASSERT_EQ(img.channels, 4);
  auto px = [&](int i, int c) { return static_cast<int>(img.pixels[static_cast<std::size_t>(4 * i + c)]); };
  EXPECT_EQ(px(0, 0), 0);  // background keeps gray 0
  EXPECT_EQ(px(1, 0), 255);  // 0.6 * 255 + 0.4 * 255
  EXPECT_EQ(px(1, 1), 153);
  EXPECT_EQ(px(1, 2), 153);
  EXPECT_EQ(px(2, 0), 153);
  EXPECT_EQ(px(2, 1), 255);
  EXPECT_EQ(px(3, 0), 255);
  EXPECT_EQ(px(3, 1), 255);
  EXPECT_EQ(px(3, 2), 153);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(px(i, 3), 255);
}

TEST(Slice, PngRoundTrip) {
  auto v = ramp({3, 5, 7});
  for (const auto& img : {gray_slice(v, 'w', 6), overlay_slice(v, Volume::labels({3, 5, 7}, std::vector<std::uint8_t>(105, 2)), 'd', 1)}) {
    const auto png = encode_png(img);
    EXPECT_EQ(png.substr(1, 3), "PNG");
    auto back = decode_png(png);
    EXPECT_EQ(back.width, img.width);
    EXPECT_EQ(back.height, img.height);
    EXPECT_EQ(back.channels, img.channels);
    EXPECT_EQ(back.pixels, img.pixels);
  }
  EXPECT_THROW(decode_png("not a png"), FormatError);
}

TEST(Slice, RejectsBadAxisAndIndex) {
  auto v = ramp({2, 2, 2});
  EXPECT_THROW(gray_slice(v, 'x', 0), SpecError);
  EXPECT_THROW(gray_slice(v, 'd', 2), std::out_of_range);
  EXPECT_THROW(gray_slice(v, 'h', -1), std::out_of_range);
}

// ---- config ----

TEST(ServerConfig, Validation) {
  ServerConfig cfg;
  cfg.store_root = "x";
  EXPECT_NO_THROW(cfg.validate());
  cfg.queue_depth = 0;
  EXPECT_THROW(cfg.validate(), SpecError);
}

// ---- HTTP ----

TEST_F(ServerTest, UploadValidStudy) {
  launch();
  const auto s = phantom(0);
  EXPECT_EQ(upload(s), s.id);
  EXPECT_TRUE(server->store().has_study(s.id));
  EXPECT_EQ(summary()["counts"]["studies"], 1);
  // Same id again conflicts.
  EXPECT_EQ(cli->Post("/studies", upload_items(s))->status, 409);
}

TEST_F(ServerTest, UploadWithoutIdGetsDerivedId) {
  launch();
  auto items = without(upload_items(phantom(0)), "manifest");
  items.push_back({"manifest", "{}", "m.json", "application/json"});
  auto r = cli->Post("/studies", items);
  ASSERT_EQ(r->status, 201);
  const std::string id = json::parse(r->body)["study_id"];
  EXPECT_EQ(id.rfind("s-", 0), 0u);
  EXPECT_TRUE(server->store().has_study(id));
}

TEST_F(ServerTest, UploadMissingModalityNamesIt) {
  launch();
  auto r = cli->Post("/studies", without(upload_items(phantom(0)), "T1ce"));
  EXPECT_EQ(r->status, 400);
  EXPECT_NE(r->body.find("T1ce"), std::string::npos);
  EXPECT_EQ(cli->Post("/studies", without(upload_items(phantom(0)), "manifest"))->status, 400);
}

TEST_F(ServerTest, UploadDimMismatchNamesBothDims) {
  launch();
  auto s = phantom(0);
  s.modalities[2] = Volume::scalar({16, 16, 32}, std::vector<float>(16 * 16 * 32, 1.0f));
  auto r = cli->Post("/studies", upload_items(s));
  EXPECT_EQ(r->status, 400);
  EXPECT_NE(r->body.find("16x16x32"), std::string::npos) << r->body;
  EXPECT_NE(r->body.find("16x16x16"), std::string::npos) << r->body;
  EXPECT_NE(r->body.find("T2"), std::string::npos);
}

TEST_F(ServerTest, UploadRejectsBadVolumesAndIndivisibleDims) {
  launch();
  auto items = upload_items(phantom(0));
  items[1].content = "VSEG garbage";
  EXPECT_EQ(cli->Post("/studies", items)->status, 400);
  auto s = phantom(0);
  for (auto& m : s.modalities) m = Volume::scalar({8, 8, 8}, std::vector<float>(512, 1.0f));
  auto r = cli->Post("/studies", upload_items(s));
  EXPECT_EQ(r->status, 400);
  EXPECT_NE(r->body.find("multiples of 16"), std::string::npos);
}

TEST_F(ServerTest, OversizeUploadIs413) {
  auto cfg = tiny_config(root);
  cfg.max_upload_bytes = 4096;
  launch(cfg);
  auto r = cli->Post("/studies", upload_items(phantom(0)));
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 413);
  EXPECT_FALSE(server->store().has_study(phantom(0).id));
}

TEST_F(ServerTest, SegmentLifecycleAndIdempotentPrediction) {
  launch();
  const auto id = upload(phantom(0));
  auto r = cli->Post("/studies/" + id + "/segment");
  ASSERT_EQ(r->status, 202);
  std::vector<std::string> states;
  auto j = wait_job(*cli, json::parse(r->body)["job_id"], &states);
  ASSERT_EQ(j["state"], "done");
  EXPECT_EQ(j["kind"], "segment");
  EXPECT_EQ(j["study_id"], id);
  // Observed states are an ordered subsequence of queued -> running -> done.
  const std::vector<std::string> order{"queued", "running", "done"};
  std::size_t k = 0;
  for (const auto& s : states) {
    while (k < order.size() && order[k] != s) ++k;
    EXPECT_LT(k, order.size()) << s;
  }
  EXPECT_EQ(states.back(), "done");
  const std::string pid = j["result"]["prediction_id"];
  EXPECT_EQ(j["result"]["model_version"], 0);
  EXPECT_EQ(segment(id), pid);
  EXPECT_EQ(server->store().counts().predictions, 1);
}

TEST_F(ServerTest, UnknownIdsAre404) {
  launch();
  EXPECT_EQ(cli->Post("/studies/nope/segment")->status, 404);
  EXPECT_EQ(cli->Get("/jobs/j-999")->status, 404);
  EXPECT_EQ(cli->Get("/studies/nope/slice?axis=d&index=0")->status, 404);
  EXPECT_EQ(rate("nope", "Adequate"), 404);
}

TEST_F(ServerTest, SliceShapeOverlayAndRange) {
  launch();
  const auto id = upload(phantom(0));
  auto r = cli->Get("/studies/" + id + "/slice?axis=d&index=8&modality=FLAIR&overlay=0");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(r->get_header_value("Content-Type"), "image/png");
  auto img = decode_png(r->body);
  EXPECT_EQ(img.width, 16);
  EXPECT_EQ(img.height, 16);
  EXPECT_EQ(img.channels, 1);
  EXPECT_EQ(img.pixels, gray_slice(phantom(0).modalities[3], 'd', 8).pixels);

  EXPECT_EQ(cli->Get("/studies/" + id + "/slice?axis=d&index=8&overlay=1")->status, 404);
  EXPECT_EQ(cli->Get("/studies/" + id + "/slice?axis=h&index=16")->status, 416);
  EXPECT_EQ(cli->Get("/studies/" + id + "/slice?axis=w&index=-1")->status, 416);
  EXPECT_EQ(cli->Get("/studies/" + id + "/slice?axis=q&index=1")->status, 400);
  EXPECT_EQ(cli->Get("/studies/" + id + "/slice?axis=d&index=1&modality=PD")->status, 400);

  const auto pid = segment(id);
  auto o = cli->Get("/studies/" + id + "/slice?axis=w&index=3&modality=T1ce&overlay=1");
  ASSERT_EQ(o->status, 200);
  auto oimg = decode_png(o->body);
  EXPECT_EQ(oimg.channels, 4);
  EXPECT_EQ(oimg.pixels,
            overlay_slice(phantom(0).modalities[1], server->store().load_prediction(pid), 'w', 3).pixels);
}

TEST_F(ServerTest, ConstantStudySliceIsUniformGray) {
  launch();
  auto s = phantom(0);
  s.id = "flat";
  for (auto& m : s.modalities) m = Volume::scalar({16, 16, 16}, std::vector<float>(4096, 0.5f));
  upload(s);
  auto img = decode_png(cli->Get("/studies/flat/slice?axis=d&index=8")->body);
  for (auto p : img.pixels) ASSERT_EQ(p, img.pixels[0]);
}

TEST_F(ServerTest, RatingFlowAndValidation) {
  launch();
  const auto id = upload(phantom(0));
  EXPECT_EQ(rate(id, "Adequate"), 404);  // nothing predicted yet
  const auto pid = segment(id);
  EXPECT_EQ(rate(id, "Maybe"), 400);
  EXPECT_EQ(cli->Post("/studies/" + id + "/rating", "not json", "application/json")->status, 400);
  EXPECT_EQ(rate(id, "Adequate"), 204);
  auto s = summary();
  EXPECT_EQ(s["counts"]["Adequate"], 1);
  EXPECT_EQ(s["studies"][0]["verdict"], "Adequate");
  EXPECT_EQ(s["studies"][0]["prediction"], pid);
  // Durable before the response: an independent reader sees it.
  EXPECT_EQ(FeedbackStore(root.string()).counts().adequate, 1);
  const auto r = server->store().ratings().back();
  EXPECT_EQ(r.rater, "t");
  EXPECT_EQ(r.prediction, pid);
}

TEST_F(ServerTest, RestartReplaysIdenticalResponses) {
  launch();
  std::vector<std::string> ids;
  for (int i = 0; i < 3; ++i) ids.push_back(upload(phantom(i)));
  segment(ids[0]);
  segment(ids[1]);
  rate(ids[0], "Adequate");
  rate(ids[1], "Inadequate");
  rate(ids[0], "Inadequate");
  auto gets = [&] {
    std::vector<std::string> out{cli->Get("/feedback/summary")->body, cli->Get("/model/info")->body};
    for (const auto& id : ids) out.push_back(cli->Get("/studies/" + id + "/slice?axis=h&index=5&overlay=0")->body);
    out.push_back(cli->Get("/studies/" + ids[0] + "/slice?axis=h&index=5&overlay=1")->body);
    return out;
  };
  const auto before = gets();
  server->stop();
  launch();
  EXPECT_EQ(gets(), before);
}

TEST_F(ServerTest, FinetuneNeedsFeedbackThenBumpsVersion) {
  launch();
  auto r = cli->Post("/admin/finetune");
  EXPECT_EQ(r->status, 409);
  EXPECT_EQ(json::parse(r->body)["count"], 0);

  for (int i = 0; i < 2; ++i) {
    const auto id = upload(phantom(i));
    segment(id);
    EXPECT_EQ(rate(id, "Adequate"), 204);
  }
  auto info = json::parse(cli->Get("/model/info")->body);
  EXPECT_EQ(info["version"], 0);
  EXPECT_EQ(info["param_count"], GmlnModel(ModelConfig::tiny()).param_count());

  r = cli->Post("/admin/finetune");
  ASSERT_EQ(r->status, 202);
  auto j = wait_job(*cli, json::parse(r->body)["job_id"]);
  ASSERT_EQ(j["state"], "done") << j.dump();
  EXPECT_EQ(j["kind"], "finetune");
  EXPECT_EQ(j["result"]["to_version"], 1);
  EXPECT_EQ(j["result"]["losses"].size(), 2u);
  EXPECT_EQ(json::parse(cli->Get("/model/info")->body)["version"], 1);
  EXPECT_TRUE(fs::exists(root / "checkpoints" / "model_v0.vckp"));
  EXPECT_TRUE(fs::exists(root / "checkpoints" / "model_v1.vckp"));

  // New predictions carry the new version; a restart serves the newest checkpoint.
  const auto id = upload(phantom(5));
  EXPECT_EQ(segment(id), "p-" + id + "-v1");
  server->stop();
  launch();
  EXPECT_EQ(json::parse(cli->Get("/model/info")->body)["version"], 1);
}

TEST_F(ServerTest, BusyAndFullQueueAre503) {
  auto cfg = tiny_config(root);
  cfg.queue_depth = 1;
  cfg.policy.steps = 20;
  launch(cfg);
  std::vector<std::string> ids;
  for (int i = 0; i < 3; ++i) ids.push_back(upload(phantom(i)));
  for (int i = 0; i < 2; ++i) {
    segment(ids[i]);
    rate(ids[i], "Adequate");
  }
  auto r = cli->Post("/admin/finetune");
  ASSERT_EQ(r->status, 202);
  const std::string ft = json::parse(r->body)["job_id"];
  while (json::parse(cli->Get("/jobs/" + ft)->body)["state"] == "queued")
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  // The cycle holds the worker: one job may queue, the next is refused.
  EXPECT_EQ(cli->Post("/admin/finetune")->status, 503);
  EXPECT_EQ(cli->Post("/studies/" + ids[2] + "/segment")->status, 202);
  EXPECT_EQ(cli->Post("/studies/" + ids[2] + "/segment")->status, 503);
  EXPECT_EQ(json::parse(cli->Get("/jobs/" + ft)->body)["state"], "running");
  EXPECT_EQ(wait_job(*cli, ft)["state"], "done");
}

TEST_F(ServerTest, JobsRunInFifoOrder) {
  launch();
  std::vector<std::string> jobs;
  for (int i = 0; i < 4; ++i) {
    const auto id = upload(phantom(i));
    jobs.push_back(json::parse(cli->Post("/studies/" + id + "/segment")->body)["job_id"]);
  }
  for (const auto& j : jobs) EXPECT_EQ(wait_job(*cli, j)["state"], "done");
  EXPECT_EQ(server->start_order(), jobs);
}

TEST_F(ServerTest, CountTriggerQueuesFinetune) {
  auto cfg = tiny_config(root);
  cfg.policy.trigger_every = 2;
  launch(cfg);
  for (int i = 0; i < 2; ++i) {
    const auto id = upload(phantom(i));
    segment(id);
    rate(id, "Adequate");
  }
  for (int i = 0; i < 2000 && server->model_version() == 0; ++i) std::this_thread::sleep_for(std::chrono::milliseconds(10));
  EXPECT_EQ(server->model_version(), 1u);
  EXPECT_EQ(server->store().counts().cycles, 1);
}

TEST_F(ServerTest, ServesUiDirectory) {
  const auto ui = root / "ui";
  fs::create_directories(ui);
  std::ofstream(ui / "index.html") << "<html>ok</html>";
  auto cfg = tiny_config(root / "store");
  cfg.ui_dir = ui.string();
  launch(cfg);
  auto r = cli->Get("/ui/index.html");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(r->body, "<html>ok</html>");
}

TEST_F(ServerTest, StopDrainsRunningJobAndFailsQueued) {
  auto cfg = tiny_config(root);
  cfg.policy.steps = 10;
  launch(cfg);
  std::vector<std::string> ids;
  for (int i = 0; i < 3; ++i) ids.push_back(upload(phantom(i)));
  for (int i = 0; i < 2; ++i) {
    segment(ids[i]);
    rate(ids[i], "Adequate");
  }
  const std::string ft = json::parse(cli->Post("/admin/finetune")->body)["job_id"];
  const std::string seg = json::parse(cli->Post("/studies/" + ids[2] + "/segment")->body)["job_id"];
  while (server->job(ft)->state == JobState::queued) std::this_thread::sleep_for(std::chrono::milliseconds(2));
  server->stop();
  EXPECT_EQ(server->job(ft)->state, JobState::done);
  EXPECT_EQ(server->job(seg)->state, JobState::failed);
  EXPECT_TRUE(fs::exists(root / "checkpoints" / "model_v1.vckp"));
}
