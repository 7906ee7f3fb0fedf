#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "gmln/feedback.hpp"
#include "gmln/model.hpp"
#include "json.hpp"

namespace httplib {
class Server;
}

namespace gmln {

struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::string store_root = "store";
  /// Weights to serve. Empty: the newest checkpoint in the store, else a fresh model.
  std::string checkpoint;
  ModelConfig model = ModelConfig::reference();
  std::size_t max_upload_bytes = 256u << 20;
  int queue_depth = 8;
  std::string ui_dir;  // served under /ui when set
  FineTunePolicy policy;
  std::uint64_t seed = 0;
  void validate() const;
};

enum class JobKind { segment, finetune };
enum class JobState { queued, running, done, failed };

struct JobStatus {
  std::string id;
  JobKind kind = JobKind::segment;
  JobState state = JobState::queued;
  std::string study;  // segment jobs
  nlohmann::json result;
  std::string error;
  nlohmann::json to_json() const;
};

/// HTTP front end over a FeedbackStore and one model. Model work runs on a single
/// worker thread in FIFO order; request handlers only read the store or append to it.
class Server {
 public:
  explicit Server(ServerConfig config);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds the socket and returns the port.
  int bind();
  /// Serves until stop(). Binds first if needed.
  void run();
  /// run() on a background thread; returns once the server accepts connections.
  void start();
  /// Stops accepting requests, lets the running job finish, fails the queued ones.
  void stop();

  int port() const { return port_; }
  FeedbackStore& store() { return store_; }
  std::uint32_t model_version() const;
  std::int64_t param_count() const;
  std::optional<JobStatus> job(const std::string& id) const;
  /// Ids in the order the worker started them.
  std::vector<std::string> start_order() const;

 private:
  void routes();
  void worker();
  std::optional<std::string> enqueue(JobKind kind, const std::string& study);
  void run_job(JobStatus& status);
  bool finetune_pending() const;
  void maybe_trigger();

  ServerConfig cfg_;
  FeedbackStore store_;
  std::unique_ptr<httplib::Server> http_;

  mutable std::mutex model_mu_;
  std::unique_ptr<GmlnModel> model_;

  mutable std::mutex jobs_mu_;
  std::condition_variable jobs_cv_;
  std::map<std::string, JobStatus> jobs_;
  std::deque<std::string> queue_;
  std::vector<std::string> started_;
  std::int64_t next_job_ = 1;
  bool stopping_ = false;

  std::thread worker_thread_, http_thread_;
  int port_ = -1;
};

}  // namespace gmln
