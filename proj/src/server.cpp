#include "gmln/server.hpp"

#include <httplib.h>

#include <filesystem>

#include "gmln/checkpoint.hpp"
#include "gmln/error.hpp"
#include "gmln/inference.hpp"
#include "gmln/slice.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace gmln {

namespace {

std::string_view kind_name(JobKind k) { return k == JobKind::segment ? "segment" : "finetune"; }

std::string_view state_name(JobState s) {
  switch (s) {
    case JobState::queued: return "queued";
    case JobState::running: return "running";
    case JobState::done: return "done";
    default: return "failed";
  }
}

std::string dims_text(const Dims3& d) {
  return std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" + std::to_string(d[2]);
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, {{"error", message}});
}

// Content-derived id for uploads whose manifest names none.
std::string derived_id(const httplib::Request& req) {
  std::uint64_t h = 1469598103934665603ull;
  for (const char* m : kModalityNames)
    for (unsigned char c : req.get_file_value(m).content) h = (h ^ c) * 1099511628211ull;
  char buf[24];
  std::snprintf(buf, sizeof buf, "s-%012llx", static_cast<unsigned long long>(h & 0xffffffffffffull));
  return buf;
}

}  // namespace

void ServerConfig::validate() const {
  if (queue_depth < 1) throw SpecError("queue depth must be >= 1, got " + std::to_string(queue_depth));
  if (port < 0 || port > 65535) throw SpecError("port out of range: " + std::to_string(port));
  if (max_upload_bytes == 0) throw SpecError("max upload bytes must be positive");
  if (store_root.empty()) throw SpecError("store root is required");
  policy.validate();
}

json JobStatus::to_json() const {
  json j{{"job_id", id}, {"kind", kind_name(kind)}, {"state", state_name(state)}};
  if (!study.empty()) j["study_id"] = study;
  if (state == JobState::done) j["result"] = result;
  if (state == JobState::failed) j["error"] = error;
  return j;
}

Server::Server(ServerConfig config) : cfg_((config.validate(), std::move(config))), store_(cfg_.store_root) {
  model_ = std::make_unique<GmlnModel>(cfg_.model);
  if (!cfg_.checkpoint.empty()) {
    load_model(*model_, cfg_.checkpoint);
  } else if (auto versions = store_.checkpoint_versions(); !versions.empty()) {
    load_model(*model_, store_.checkpoint_path(versions.back()));
  }
  http_ = std::make_unique<httplib::Server>();
  http_->set_payload_max_length(cfg_.max_upload_bytes);
  routes();
  worker_thread_ = std::thread([this] { worker(); });
}

Server::~Server() { stop(); }

std::uint32_t Server::model_version() const {
  std::lock_guard lock(model_mu_);
  return model_->version();
}

std::int64_t Server::param_count() const {
  std::lock_guard lock(model_mu_);
  return model_->param_count();
}

std::optional<JobStatus> Server::job(const std::string& id) const {
  std::lock_guard lock(jobs_mu_);
  auto it = jobs_.find(id);
  if (it == jobs_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> Server::start_order() const {
  std::lock_guard lock(jobs_mu_);
  return started_;
}

int Server::bind() {
  if (port_ >= 0) return port_;
  port_ = cfg_.port == 0 ? http_->bind_to_any_port(cfg_.host) : (http_->bind_to_port(cfg_.host, cfg_.port) ? cfg_.port : -1);
  if (port_ < 0) throw StorageError("cannot bind " + cfg_.host + ":" + std::to_string(cfg_.port));
  return port_;
}

void Server::run() {
  bind();
  http_->listen_after_bind();
}

void Server::start() {
  bind();
  http_thread_ = std::thread([this] { http_->listen_after_bind(); });
  http_->wait_until_ready();
}

void Server::stop() {
  if (http_) http_->stop();
  if (http_thread_.joinable()) http_thread_.join();
  {
    std::lock_guard lock(jobs_mu_);
    if (stopping_ && !worker_thread_.joinable()) return;
    stopping_ = true;
    for (const auto& id : queue_) {
      jobs_[id].state = JobState::failed;
      jobs_[id].error = "server stopped before the job ran";
    }
    queue_.clear();
  }
  jobs_cv_.notify_all();
  if (worker_thread_.joinable()) worker_thread_.join();
}

bool Server::finetune_pending() const {
  for (const auto& [id, j] : jobs_)
    if (j.kind == JobKind::finetune && (j.state == JobState::queued || j.state == JobState::running)) return true;
  return false;
}

std::optional<std::string> Server::enqueue(JobKind kind, const std::string& study) {
  std::lock_guard lock(jobs_mu_);
  if (stopping_ || static_cast<int>(queue_.size()) >= cfg_.queue_depth) return std::nullopt;
  if (kind == JobKind::finetune && finetune_pending()) return std::nullopt;
  JobStatus st;
  st.id = "j-" + std::to_string(next_job_++);
  st.kind = kind;
  st.study = study;
  jobs_[st.id] = st;
  queue_.push_back(st.id);
  jobs_cv_.notify_one();
  return st.id;
}

void Server::maybe_trigger() {
  if (finetune_due(store_, cfg_.policy) &&
      static_cast<std::int64_t>(select_finetune(store_).studies.size()) >= cfg_.policy.min_samples)
    enqueue(JobKind::finetune, "");
}

void Server::worker() {
  for (;;) {
    JobStatus st;
    {
      std::unique_lock lock(jobs_mu_);
      jobs_cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) return;
      const auto id = queue_.front();
      queue_.pop_front();
      jobs_[id].state = JobState::running;
      started_.push_back(id);
      st = jobs_[id];
    }
    try {
      run_job(st);
      st.state = JobState::done;
    } catch (const std::exception& e) {
      st.state = JobState::failed;
      st.error = e.what();
    }
    std::lock_guard lock(jobs_mu_);
    jobs_[st.id] = st;
  }
}

void Server::run_job(JobStatus& st) {
  if (st.kind == JobKind::segment) {
    const Study study = store_.load_study(st.study);
    // Only this thread replaces the model, so reading it here needs no lock.
    const Volume labels = segment(*model_, study);
    const auto version = model_->version();
    const auto pid = store_.record_prediction(study, labels, version);
    st.result = {{"prediction_id", pid}, {"model_version", version}};
    maybe_trigger();
    return;
  }
  // Train a copy so requests keep reading the current weights until the swap.
  auto next = std::make_unique<GmlnModel>(cfg_.model);
  restore(*next, snapshot(*model_));
  const auto report = run_finetune_cycle(*next, store_, cfg_.policy, cfg_.seed + next->version());
  if (!report.ran) throw ContractError(report.refused);
  {
    std::lock_guard lock(model_mu_);
    model_ = std::move(next);
  }
  st.result = report.to_json();
}

void Server::routes() {
  auto& s = *http_;

  s.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  });

  s.Post("/studies", [this](const httplib::Request& req, httplib::Response& res) {
    if (req.body.size() > cfg_.max_upload_bytes) return send_error(res, 413, "upload exceeds limit");
    if (!req.is_multipart_form_data()) return send_error(res, 400, "expected multipart/form-data");
    for (const char* m : kModalityNames)
      if (!req.has_file(m)) return send_error(res, 400, std::string("missing modality ") + m);
    if (!req.has_file("manifest")) return send_error(res, 400, "missing manifest");

    json manifest;
    try {
      manifest = json::parse(req.get_file_value("manifest").content);
    } catch (const json::exception& e) {
      return send_error(res, 400, std::string("manifest is not valid JSON: ") + e.what());
    }
    if (!manifest.is_object()) return send_error(res, 400, "manifest must be a JSON object");

    Study study;
    if (manifest.contains("id") && !manifest["id"].is_string()) return send_error(res, 400, "manifest id must be a string");
    study.id = manifest.contains("id") ? manifest["id"].get<std::string>() : derived_id(req);
    if (manifest.contains("provenance") && manifest["provenance"].is_string())
      study.provenance = manifest["provenance"].get<std::string>();
    try {
      for (int i = 0; i < kModalities; ++i) {
        auto v = decode_volume(req.get_file_value(kModalityNames[i]).content, kModalityNames[i]);
        if (v.type != VoxelType::f32 || v.channels != 1)
          return send_error(res, 400, std::string(kModalityNames[i]) + " must be a single-channel float volume");
        study.modalities[static_cast<std::size_t>(i)] = std::move(v);
      }
    } catch (const FormatError& e) {
      return send_error(res, 400, e.what());
    }
    for (int i = 1; i < kModalities; ++i) {
      const auto& d = study.modalities[static_cast<std::size_t>(i)].dims;
      if (d != study.dims())
        return send_error(res, 400, std::string("dims mismatch: ") + kModalityNames[i] + " " + dims_text(d) + " vs T1 " +
                                        dims_text(study.dims()));
    }
    const int mult = cfg_.model.spatial_multiple();
    for (auto d : study.dims())
      if (d % mult != 0)
        return send_error(res, 400, "dims " + dims_text(study.dims()) + " must be multiples of " + std::to_string(mult));
    try {
      if (store_.has_study(study.id)) return send_error(res, 409, "study " + study.id + " already exists");
      store_.add_study(study);
    } catch (const IngestionError& e) {
      return send_error(res, 400, e.what());
    }
    send_json(res, 201, {{"study_id", study.id}});
  });

  s.Post(R"(/studies/([^/]+)/segment)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    if (!store_.has_study(id)) return send_error(res, 404, "unknown study " + id);
    auto job = enqueue(JobKind::segment, id);
    if (!job) return send_error(res, 503, "job queue full");
    send_json(res, 202, {{"job_id", *job}});
  });

  s.Get(R"(/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    auto st = job(req.matches[1]);
    if (!st) return send_error(res, 404, "unknown job " + std::string(req.matches[1]));
    send_json(res, 200, st->to_json());
  });

  s.Get(R"(/studies/([^/]+)/slice)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    if (!store_.has_study(id)) return send_error(res, 404, "unknown study " + id);
    const auto axis_text = req.has_param("axis") ? req.get_param_value("axis") : "d";
    const auto modality = req.has_param("modality") ? req.get_param_value("modality") : "T1";
    const auto overlay = req.has_param("overlay") ? req.get_param_value("overlay") : "0";
    if (axis_text.size() != 1 || std::string("dhw").find(axis_text[0]) == std::string::npos)
      return send_error(res, 400, "axis must be d, h or w");
    const int m = modality_index(modality);
    if (m < 0) return send_error(res, 400, "unknown modality " + modality);
    if (overlay != "0" && overlay != "1") return send_error(res, 400, "overlay must be 0 or 1");
    const char axis = axis_text[0];
    const auto dims = store_.study_dims(id);
    const auto extent = dims[static_cast<std::size_t>(std::string("dhw").find(axis))];
    std::int64_t index = extent / 2;
    if (req.has_param("index")) {
      try {
        std::size_t used = 0;
        index = std::stoll(req.get_param_value("index"), &used);
        if (used != req.get_param_value("index").size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        return send_error(res, 400, "index must be an integer");
      }
    }
    if (index < 0 || index >= extent)
      return send_error(res, 416, "index " + std::to_string(index) + " outside [0, " + std::to_string(extent) + ")");
    std::optional<PredictionRecord> pred;
    if (overlay == "1" && !(pred = store_.latest_prediction(id))) return send_error(res, 404, "no prediction for " + id);
    const Study study = store_.load_study(id);
    const auto& vol = study.modalities[static_cast<std::size_t>(m)];
    const auto img = pred ? overlay_slice(vol, store_.load_prediction(pred->id), axis, index) : gray_slice(vol, axis, index);
    res.status = 200;
    res.set_content(encode_png(img), "image/png");
  });

  s.Post(R"(/studies/([^/]+)/rating)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception&) {
      return send_error(res, 400, "body must be JSON {verdict, rater}");
    }
    const auto verdict = body.is_object() && body.contains("verdict") && body["verdict"].is_string()
                             ? parse_verdict(body["verdict"].get<std::string>())
                             : std::nullopt;
    if (!verdict) return send_error(res, 400, "verdict must be \"Adequate\" or \"Inadequate\"");
    if (!store_.has_study(id)) return send_error(res, 404, "unknown study " + id);
    const auto pred = store_.latest_prediction(id);
    if (!pred) return send_error(res, 404, "no prediction for " + id);
    RatingRecord r;
    r.study = id;
    r.prediction = pred->id;
    r.verdict = *verdict;
    r.rater = body.contains("rater") && body["rater"].is_string() ? body["rater"].get<std::string>() : "";
    store_.record_rating(r);
    maybe_trigger();
    res.status = 204;
  });

  s.Get("/feedback/summary", [this](const httplib::Request&, httplib::Response& res) {
    auto j = store_.summary();
    j["model_version"] = model_version();
    j["min_samples"] = cfg_.policy.min_samples;
    send_json(res, 200, j);
  });

  s.Post("/admin/finetune", [this](const httplib::Request&, httplib::Response& res) {
    const auto n = static_cast<std::int64_t>(select_finetune(store_).studies.size());
    if (n < cfg_.policy.min_samples)
      return send_json(res, 409, {{"error", "insufficient feedback"}, {"count", n}, {"required", cfg_.policy.min_samples}});
    auto job = enqueue(JobKind::finetune, "");
    if (!job) return send_error(res, 503, "busy: a fine-tune is pending or the queue is full");
    send_json(res, 202, {{"job_id", *job}});
  });

  s.Get("/model/info", [this](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"version", model_version()}, {"param_count", param_count()}});
  });

  if (!cfg_.ui_dir.empty()) {
    if (!fs::is_directory(cfg_.ui_dir)) throw StorageError("ui directory " + cfg_.ui_dir + " does not exist");
    s.set_mount_point("/ui", cfg_.ui_dir);
  }
}

}  // namespace gmln
