#include "mogan/service.hpp"

#include <httplib.h>

#include <fstream>
#include <iostream>
#include <sstream>

#include "mogan/error.hpp"

namespace mogan {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void send_json(httplib::Response& res, const json& body, int code = 200) {
  res.status = code;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int code, const std::string& message) {
  send_json(res, json{{"error", message}}, code);
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed JSON body: ") + e.what());
  }
}

template <typename T>
T field(const json& body, const char* key, T fallback) {
  if (!body.contains(key)) return fallback;
  try {
    return body.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(std::string("field '") + key + "' has the wrong type");
  }
}

template <typename T>
T form_number(const httplib::Request& req, const std::string& key, T fallback) {
  std::string text;
  if (req.has_file(key)) {
    text = req.get_file_value(key).content;
  } else if (req.has_param(key)) {
    text = req.get_param_value(key);
  } else {
    return fallback;
  }
  try {
    std::size_t used = 0;
    T value;
    if constexpr (std::is_floating_point_v<T>) {
      value = static_cast<T>(std::stod(text, &used));
    } else if constexpr (std::is_unsigned_v<T>) {
      value = static_cast<T>(std::stoull(text, &used));
    } else {
      value = static_cast<T>(std::stoll(text, &used));
    }
    if (used != text.size()) throw std::invalid_argument(key);
    return value;
  } catch (const std::exception&) {
    throw ValidationError("field '" + key + "' must be a number");
  }
}

Image uploaded_image(const httplib::Request& req) {
  if (!req.has_file("image")) throw ValidationError("multipart field 'image' is required");
  const auto& content = req.get_file_value("image").content;
  return decode_image(std::vector<unsigned char>(content.begin(), content.end()));
}

using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

// Maps library errors onto HTTP status codes.
httplib::Server::Handler guarded(Handler h) {
  return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
    try {
      h(req, res);
    } catch (const NotFoundError& e) {
      send_error(res, 404, e.what());
    } catch (const StateError& e) {
      send_error(res, 409, e.what());
    } catch (const ValidationError& e) {
      send_error(res, 422, e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  };
}

}  // namespace

Service::Service(ProjectStore& store) : store_(store), server_(std::make_unique<httplib::Server>()) { routes(); }

Service::~Service() {
  stop();
  wait_for_jobs();
}

int Service::bind(const std::string& host, int port) {
  const int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void Service::listen() { server_->listen_after_bind(); }

int Service::start(const std::string& host, int port) {
  const int bound = bind(host, port);
  listener_ = std::thread([this] { listen(); });
  server_->wait_until_ready();
  return bound;
}

void Service::stop() {
  server_->stop();
  if (listener_.joinable()) listener_.join();
}

void Service::wait_for_jobs() {
  std::vector<std::shared_ptr<Job>> jobs;
  {
    std::lock_guard lock(jobs_mutex_);
    for (auto& [id, j] : jobs_) jobs.push_back(j);
  }
  for (auto& j : jobs) {
    if (j->thread.joinable()) j->thread.join();
  }
}

std::shared_ptr<Service::Job> Service::job(const std::string& project_id) const {
  std::lock_guard lock(jobs_mutex_);
  auto it = jobs_.find(project_id);
  return it == jobs_.end() ? nullptr : it->second;
}

std::string Service::start_training(const std::string& project_id, const json& overrides) {
  std::lock_guard lock(jobs_mutex_);
  if (auto it = jobs_.find(project_id); it != jobs_.end() && it->second->running) {
    throw StateError("training already running for project " + project_id);
  }
  store_.begin_training(project_id, overrides);

  auto j = std::make_shared<Job>();
  j->id = "job-" + std::to_string(++job_counter_);
  if (auto it = jobs_.find(project_id); it != jobs_.end() && it->second->thread.joinable()) {
    it->second->thread.join();
  }
  jobs_[project_id] = j;
  const auto log_path = store_.project_dir(project_id) / "progress.jsonl";
  j->thread = std::thread([this, j, project_id, log_path] {
    std::ofstream log(log_path, std::ios::app);
    JsonLinesSink file_sink(log);
    auto sink = [&](const ProgressRecord& r) {
      file_sink(r);
      std::lock_guard l(j->mutex);
      j->records.push_back(r);
    };
    try {
      store_.run_training(project_id, sink);
    } catch (const std::exception& e) {
      std::lock_guard l(j->mutex);
      j->error = e.what();
    }
    j->running = false;
  });
  return j->id;
}

json Service::status(const std::string& project_id) const {
  const auto info = store_.info(project_id);
  json out{{"id", info.id}, {"status", std::string(to_string(info.status))}, {"error", info.error}};
  out["running"] = false;
  auto j = job(project_id);
  if (!j) return out;
  std::lock_guard lock(j->mutex);
  out["job_id"] = j->id;
  out["running"] = j->running.load();
  if (!j->records.empty()) {
    const auto& r = j->records.back();
    out["branch"] = r.branch;
    out["scale"] = r.scale;
    out["coarsest"] = r.coarsest;
    out["step"] = r.step;
    out["steps_per_scale"] = r.steps_per_scale;
    out["losses"] = {{"l0_g", r.l0_g}, {"l0_d", r.l0_d}, {"l1", r.l1}, {"l2", r.l2}, {"gp", r.gp}};
  }
  out["records"] = j->records.size();
  return out;
}

void Service::routes() {
  auto& s = *server_;

  s.Post("/projects", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const auto id = store_.create(uploaded_image(req));
    send_json(res, json(store_.info(id)), 201);
  }));

  s.Get(R"(/projects/([A-Za-z0-9]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
    send_json(res, json(store_.info(req.matches[1])));
  }));

  s.Put(R"(/projects/([A-Za-z0-9]+)/roi)", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    const auto body = parse_body(req);
    store_.set_roi(id, boxes_from_json(body.is_array() ? body : body.value("boxes", json::array())));
    send_json(res, json(store_.info(id)));
  }));

  s.Post(R"(/projects/([A-Za-z0-9]+)/train)", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    const auto job_id = start_training(id, parse_body(req));
    send_json(res, json{{"job_id", job_id}, {"project_id", id}}, 202);
  }));

  s.Get(R"(/projects/([A-Za-z0-9]+)/status)", guarded([this](const httplib::Request& req, httplib::Response& res) {
    send_json(res, status(req.matches[1]));
  }));

  s.Get(R"(/projects/([A-Za-z0-9]+)/progress)", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    store_.info(id);
    const auto since = form_number<std::size_t>(req, "since", 0);
    json records = json::array();
    std::size_t next = since;
    if (auto j = job(id)) {
      std::lock_guard lock(j->mutex);
      for (std::size_t i = since; i < j->records.size(); ++i) records.push_back(j->records[i]);
      next = std::max(since, j->records.size());
    }
    send_json(res, json{{"records", records}, {"next", next}});
  }));

  s.Post(R"(/projects/([A-Za-z0-9]+)/generate)", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req);
    const auto samples = store_.generate(req.matches[1], field(body, "count", 1), field<uint64_t>(body, "seed", 0),
                                         field(body, "band_px", kDefaultBandPx));
    send_json(res, json{{"samples", samples}});
  }));

  s.Post(R"(/projects/([A-Za-z0-9]+)/edit)", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const auto r = store_.edit(req.matches[1], uploaded_image(req), form_number<uint64_t>(req, "seed", 0),
                               form_number<int>(req, "band_px", kDefaultBandPx),
                               form_number<int>(req, "min_edit_scale", 0));
    send_json(res, json(r));
  }));

  s.Post(R"(/projects/([A-Za-z0-9]+)/animate)", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req);
    const auto kind = augment_kind_from_string(field<std::string>(body, "kind", "rotation"));
    const auto result = store_.animate(req.matches[1], kind, field(body, "frames", 8), field(body, "level_max", 1.0),
                                       field(body, "fps", 8.0), field<uint64_t>(body, "seed", 0),
                                       field(body, "band_px", kDefaultBandPx));
    send_json(res, json{{"fps", result.fps}, {"frames", result.frames}});
  }));

  s.Get(R"(/projects/([A-Za-z0-9]+)/metrics)", guarded([this](const httplib::Request& req, httplib::Response& res) {
    EvalOptions options;
    options.num_samples = form_number<int>(req, "samples", 20);
    options.seed = form_number<uint64_t>(req, "seed", 0);
    options.band_px = form_number<int>(req, "band_px", kDefaultBandPx);
    if (options.num_samples < 2) throw ValidationError("samples must be >= 2");
    const auto reports = store_.metrics(req.matches[1], options);
    send_json(res, json{{"reports", reports}, {"markdown", render_markdown(reports)}});
  }));

  s.Get(R"(/samples/([A-Za-z0-9]+-[0-9]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
    const auto path = store_.sample_path(req.matches[1]);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFoundError("sample file missing");
    std::ostringstream bytes;
    bytes << in.rdbuf();
    res.set_content(bytes.str(), "image/png");
  }));

  s.Get(R"(/samples/([A-Za-z0-9]+-[0-9]+)/record)", guarded([this](const httplib::Request& req, httplib::Response& res) {
    send_json(res, json(store_.sample(req.matches[1])));
  }));
}

}  // namespace mogan
