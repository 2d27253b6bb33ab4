#pragma once

#include <nlohmann/json.hpp>

#include <atomic>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "mogan/project.hpp"

namespace httplib {
class Server;
}

namespace mogan {

/// JSON-over-HTTP front end for a ProjectStore. Training runs on background
/// threads; status requests only read in-memory job state and project.json.
///
///   POST /projects                    multipart "image"            -> 201 {id, ...}
///   GET  /projects/{id}                                            -> project
///   PUT  /projects/{id}/roi           {"boxes": [[x0,y0,x1,y1]]}   -> project
///   POST /projects/{id}/train         TrainConfig overrides        -> 202 {job_id}
///   GET  /projects/{id}/status                                     -> {status, branch, scale, step, losses, ...}
///   GET  /projects/{id}/progress?since=k                           -> {records, next}
///   POST /projects/{id}/generate      {count, seed, band_px}       -> {samples}
///   POST /projects/{id}/edit          multipart "image", seed, band_px, min_edit_scale
///   POST /projects/{id}/animate       {kind, frames, level_max, fps, seed, band_px}
///   GET  /projects/{id}/metrics?samples=n&seed=s                   -> {reports}
///   GET  /samples/{id}                                             -> image/png
///   GET  /samples/{id}/record                                      -> SampleRecord
///
/// Errors are {"error": message} with 404 (unknown id), 409 (state conflict,
/// e.g. training already running) or 422 (validation failure).
class Service {
 public:
  explicit Service(ProjectStore& store);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop(); requires bind().
  void listen();
  /// bind + listen on a background thread.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  void stop();

  /// Blocks until every training job has finished.
  void wait_for_jobs();

  nlohmann::json status(const std::string& project_id) const;

 private:
  struct Job {
    std::string id;
    std::atomic<bool> running{true};
    std::mutex mutex;
    std::vector<ProgressRecord> records;
    std::string error;
    std::thread thread;
  };

  void routes();
  std::shared_ptr<Job> job(const std::string& project_id) const;
  std::string start_training(const std::string& project_id, const nlohmann::json& overrides);

  ProjectStore& store_;
  std::unique_ptr<httplib::Server> server_;
  std::thread listener_;
  mutable std::mutex jobs_mutex_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  std::atomic<uint64_t> job_counter_{0};
};

}  // namespace mogan
