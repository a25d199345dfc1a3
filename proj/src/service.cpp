#include "metaforge/service.hpp"

#include "httplib.h"

namespace metaforge::service {

using nlohmann::json;

json modules_json() {
  json out = json::array();
  for (const auto& m : registry_list()) {
    out.push_back({{"slot", to_string(m.slot)},
                   {"option", m.option},
                   {"id", m.id},
                   {"key", m.key},
                   {"implemented", m.implemented},
                   {"tags", m.tags}});
  }
  return out;
}

json compat_json(const CompatReport& report) {
  json violations = json::array();
  for (const auto& v : report.violations) {
    json slots = json::array();
    for (Slot s : v.slots) slots.push_back(to_string(s));
    violations.push_back({{"rule", v.rule}, {"message", v.message}, {"slots", slots}});
  }
  return {{"ok", report.ok()}, {"violations", violations}};
}

Generated generate(const PipelineConfig& cfg) {
  return {emit_command(cfg), config_file_name(cfg), serialize_config(cfg)};
}

std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::queued: return "queued";
    case RunStatus::running: return "running";
    case RunStatus::finished: return "finished";
    case RunStatus::failed: return "failed";
    case RunStatus::cancelled: return "cancelled";
  }
  return "unknown";
}

RunQueue::RunQueue() : worker_([this] { work(); }) {}

RunQueue::~RunQueue() {
  {
    std::lock_guard lock(mu_);
    stopping_ = true;
    cancel_ = true;
    for (const auto& id : pending_) runs_.at(id).status = RunStatus::cancelled;
    pending_.clear();
  }
  cv_.notify_all();
  worker_.join();
}

std::string RunQueue::submit(PipelineConfig cfg) {
  std::string id;
  {
    std::lock_guard lock(mu_);
    id = "run-" + std::to_string(next_id_++);
    runs_[id].cfg = std::move(cfg);
    pending_.push_back(id);
  }
  cv_.notify_all();
  return id;
}

std::optional<json> RunQueue::status(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = runs_.find(id);
  if (it == runs_.end()) return std::nullopt;
  const Run& r = it->second;
  json out = {{"id", id},
              {"status", to_string(r.status)},
              {"iterations", r.cfg.hyper.iterations},
              {"losses", r.losses}};
  if (!r.error.empty()) out["error"] = r.error;
  return out;
}

std::optional<RunStatus> RunQueue::state(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = runs_.find(id);
  if (it == runs_.end()) return std::nullopt;
  return it->second.status;
}

std::optional<runner::RunReport> RunQueue::report(const std::string& id) const {
  std::lock_guard lock(mu_);
  auto it = runs_.find(id);
  if (it == runs_.end()) return std::nullopt;
  return it->second.report;
}

bool RunQueue::wait(const std::string& id) const {
  std::unique_lock lock(mu_);
  if (!runs_.count(id)) return false;
  cv_.wait(lock, [&] {
    const auto s = runs_.at(id).status;
    return s != RunStatus::queued && s != RunStatus::running;
  });
  return true;
}

void RunQueue::work() {
  for (;;) {
    std::string id;
    PipelineConfig cfg;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return stopping_ || !pending_.empty(); });
      if (stopping_) return;
      id = pending_.front();
      pending_.pop_front();
      Run& r = runs_.at(id);
      r.status = RunStatus::running;
      cfg = r.cfg;
    }
    cv_.notify_all();

    runner::RunOptions options;
    options.cancel = &cancel_;
    options.on_iteration = [&](std::size_t, double loss) {
      std::lock_guard lock(mu_);
      runs_.at(id).losses.push_back(loss);
    };
    RunStatus final_status = RunStatus::finished;
    std::optional<runner::RunReport> report;
    std::string error;
    try {
      report = runner::run(cfg, options);
    } catch (const runner::RunCancelled& e) {
      final_status = RunStatus::cancelled;
      error = e.what();
    } catch (const std::exception& e) {
      final_status = RunStatus::failed;
      error = e.what();
    }
    {
      std::lock_guard lock(mu_);
      Run& r = runs_.at(id);
      r.status = final_status;
      r.report = std::move(report);
      r.error = std::move(error);
    }
    cv_.notify_all();
  }
}

namespace {

Response json_response(int status, const json& body) { return {status, body.dump(2) + "\n"}; }

Response error_response(int status, const std::string& message, const json& extra = json::object()) {
  json body = extra;
  body["error"] = message;
  return json_response(status, body);
}

// Parses a request body into a config; fills `failure` on error.
std::optional<PipelineConfig> body_config(const std::string& body, Response& failure) {
  try {
    return parse_config(body);
  } catch (const ConfigError& e) {
    json extra = json::object();
    if (!e.pointer().empty()) extra["pointer"] = e.pointer();
    if (e.byte_offset()) extra["byte_offset"] = *e.byte_offset();
    failure = error_response(400, e.what(), extra);
  } catch (const std::exception& e) {
    failure = error_response(400, e.what());
  }
  return std::nullopt;
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : path.substr(0, path.find('?'))) {
    if (c == '/') {
      if (!cur.empty()) parts.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) parts.push_back(std::move(cur));
  return parts;
}

}  // namespace

Service::Service() = default;
Service::~Service() { stop(); }

Response Service::handle(const std::string& method, const std::string& path,
                         const std::string& body) {
  const auto parts = split_path(path);
  Response failure;

  if (method == "GET" && parts == std::vector<std::string>{"modules"})
    return json_response(200, modules_json());

  if (method == "POST" && parts == std::vector<std::string>{"validate"}) {
    auto cfg = body_config(body, failure);
    if (!cfg) return failure;
    return json_response(200, compat_json(check_compat(*cfg)));
  }

  if (method == "POST" && parts == std::vector<std::string>{"generate"}) {
    auto cfg = body_config(body, failure);
    if (!cfg) return failure;
    const CompatReport report = check_compat(*cfg);
    if (!report.ok()) return json_response(422, compat_json(report));
    const Generated g = generate(*cfg);
    return json_response(200, {{"script", g.script}, {"config_file", g.config_file},
                               {"config", g.config}});
  }

  if (!parts.empty() && parts[0] == "runs") {
    if (method == "POST" && parts.size() == 1) {
      auto cfg = body_config(body, failure);
      if (!cfg) return failure;
      const CompatReport report = check_compat(*cfg);
      if (!report.ok()) return json_response(422, compat_json(report));
      const std::string id = runs_.submit(std::move(*cfg));
      return json_response(202, {{"id", id}});
    }
    if (method == "GET" && parts.size() == 2) {
      auto st = runs_.status(parts[1]);
      if (!st) return error_response(404, "unknown run '" + parts[1] + "'");
      return json_response(200, *st);
    }
    if (method == "GET" && parts.size() == 3 && parts[2] == "report") {
      auto state = runs_.state(parts[1]);
      if (!state) return error_response(404, "unknown run '" + parts[1] + "'");
      if (*state != RunStatus::finished)
        return error_response(409, "run '" + parts[1] + "' is " + std::string(to_string(*state)));
      return json_response(200, runner::to_json(*runs_.report(parts[1])));
    }
  }
  return error_response(404, "no route for " + method + " " + path);
}

int Service::bind(const std::string& host, int port) {
  http_ = std::make_unique<httplib::Server>();
  auto route = [this](const httplib::Request& req, httplib::Response& res) {
    const Response r = handle(req.method, req.path, req.body);
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  http_->set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Headers", "Content-Type"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
  http_->Get(R"(/.*)", route);
  http_->Post(R"(/.*)", route);
  http_->Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  if (port == 0) {
    const int bound = http_->bind_to_any_port(host);
    if (bound < 0) throw Error("cannot bind " + host);
    return bound;
  }
  if (!http_->bind_to_port(host, port))
    throw Error("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void Service::serve_bound() {
  if (!http_) throw Error("service is not bound");
  http_->listen_after_bind();
}

void Service::listen(const std::string& host, int port) {
  bind(host, port);
  serve_bound();
}

void Service::stop() {
  if (http_) http_->stop();
}

}  // namespace metaforge::service
