#pragma once

// HTTP/JSON service and the request handlers it shares with the CLI.

#include <atomic>
#include <condition_variable>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "json.hpp"
#include "metaforge/config.hpp"
#include "metaforge/registry.hpp"
#include "metaforge/runner.hpp"

namespace httplib {
class Server;
}

namespace metaforge::service {

// Shared by `metaforge list-modules --json` and GET /modules.
nlohmann::json modules_json();
// Shared by `metaforge validate --json` and POST /validate.
nlohmann::json compat_json(const CompatReport& report);

struct Generated {
  std::string script;       // emit_command output
  std::string config_file;  // config_file_name
  std::string config;       // serialize_config output
};
Generated generate(const PipelineConfig& cfg);

enum class RunStatus { queued, running, finished, failed, cancelled };
std::string_view to_string(RunStatus s);

// Single worker draining a FIFO of runs.
class RunQueue {
 public:
  RunQueue();
  ~RunQueue();  // cancels the active run, drops queued ones, joins
  RunQueue(const RunQueue&) = delete;
  RunQueue& operator=(const RunQueue&) = delete;

  std::string submit(PipelineConfig cfg);
  // {id, status, iterations, losses, error?}; empty for unknown ids.
  std::optional<nlohmann::json> status(const std::string& id) const;
  std::optional<RunStatus> state(const std::string& id) const;
  // Empty unless the run finished.
  std::optional<runner::RunReport> report(const std::string& id) const;
  // Blocks until the run leaves queued/running. False for unknown ids.
  bool wait(const std::string& id) const;

 private:
  struct Run {
    PipelineConfig cfg;
    RunStatus status = RunStatus::queued;
    std::vector<double> losses;
    std::optional<runner::RunReport> report;
    std::string error;
  };

  void work();

  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::map<std::string, Run> runs_;
  std::deque<std::string> pending_;
  std::size_t next_id_ = 1;
  bool stopping_ = false;
  std::atomic<bool> cancel_{false};
  std::thread worker_;
};

struct Response {
  int status = 200;
  std::string body;  // JSON
};

class Service {
 public:
  Service();
  ~Service();

  // Transport-independent routing: GET /modules, POST /validate,
  // POST /generate, POST /runs, GET /runs/{id}, GET /runs/{id}/report.
  Response handle(const std::string& method, const std::string& path, const std::string& body);

  RunQueue& runs() { return runs_; }

  // Binds and serves until stop(). port 0 picks a free port; bound_port()
  // reports it once listening.
  void listen(const std::string& host, int port);
  int bind(const std::string& host, int port);  // returns the port
  void serve_bound();                            // blocks
  void stop();

 private:
  RunQueue runs_;
  std::unique_ptr<httplib::Server> http_;
};

}  // namespace metaforge::service
