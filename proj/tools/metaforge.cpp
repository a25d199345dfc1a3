// metaforge command line: registry inspection, config validation, script
// generation, training runs, parameter sweeps and the HTTP service.

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "metaforge/config.hpp"
#include "metaforge/registry.hpp"
#include "metaforge/runner.hpp"
#include "metaforge/search.hpp"
#include "metaforge/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace metaforge;

namespace {

constexpr int kUsage = 2;

std::optional<std::uint64_t> env_u64(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  try {
    std::size_t used = 0;
    const auto n = std::stoull(v, &used);
    if (used == std::string(v).size()) return n;
  } catch (const std::exception&) {
  }
  throw Error(std::string(name) + " is not an unsigned integer: '" + v + "'");
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void print_violations(const CompatReport& report) {
  for (const auto& v : report.violations) {
    std::cerr << v.rule << " [";
    for (std::size_t i = 0; i < v.slots.size(); ++i)
      std::cerr << (i ? ", " : "") << to_string(v.slots[i]);
    std::cerr << "] " << v.message << "\n";
  }
}

int list_modules(bool as_json) {
  if (as_json) {
    std::cout << service::modules_json().dump(2) << "\n";
    return 0;
  }
  std::size_t w_slot = 4, w_id = 2, w_key = 3;
  for (const auto& m : registry_list()) {
    w_slot = std::max(w_slot, to_string(m.slot).size());
    w_id = std::max(w_id, m.id.size());
    w_key = std::max(w_key, m.key.size());
  }
  auto col = [](std::string_view s, std::size_t w) {
    return std::string(s) + std::string(w + 2 - s.size(), ' ');
  };
  std::cout << col("slot", w_slot) << col("id", w_id) << col("key", w_key) << "status\n";
  for (const auto& m : registry_list()) {
    std::cout << col(to_string(m.slot), w_slot) << col(m.id, w_id) << col(m.key, w_key)
              << (m.implemented ? "implemented" : "unimplemented") << "\n";
  }
  return 0;
}

int validate(const std::string& path, bool as_json) {
  const PipelineConfig cfg = load_config_file(path);
  const CompatReport report = check_compat(cfg);
  if (as_json) {
    std::cout << service::compat_json(report).dump(2) << "\n";
  } else if (report.ok()) {
    std::cout << "ok\n";
  } else {
    print_violations(report);
  }
  return report.ok() ? 0 : 1;
}

int generate(const std::string& path, const std::string& out_dir) {
  const PipelineConfig cfg = load_config_file(path);
  const CompatReport report = check_compat(cfg);
  if (!report.ok()) {
    print_violations(report);
    return 1;
  }
  const auto g = service::generate(cfg);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream(fs::path(out_dir) / g.config_file, std::ios::binary) << g.config;
  }
  std::cout << g.script;
  return 0;
}

runner::RunOptions run_options(std::optional<std::uint64_t> seed,
                               std::optional<std::size_t> threads) {
  runner::RunOptions o;
  o.seed = seed ? seed : env_u64("METAFORGE_SEED");
  if (threads) {
    o.threads = threads;
  } else if (auto t = env_u64("METAFORGE_THREADS")) {
    o.threads = static_cast<std::size_t>(*t);
  }
  return o;
}

int run(const std::string& path, std::optional<std::uint64_t> seed,
        std::optional<std::size_t> threads, const std::string& out, bool quiet) {
  const PipelineConfig cfg = load_config_file(path);
  const CompatReport report = check_compat(cfg);
  if (!report.ok()) {
    print_violations(report);
    return 1;
  }
  auto options = run_options(seed, threads);
  if (!quiet) {
    options.on_iteration = [n = cfg.hyper.iterations](std::size_t it, double loss) {
      if ((it + 1) % 100 == 0 || it + 1 == n)
        std::cerr << "iteration " << (it + 1) << "/" << n << " loss " << loss << "\n";
    };
  }
  const runner::RunReport r = runner::run(cfg, options);
  runner::write_report(out, r);
  std::cout << runner::render_report(r);
  return 0;
}

double score_of(const runner::RunReport& r) {
  return r.eval.metric == "accuracy" ? 1.0 - r.eval.post : r.eval.post;
}

int bench(const std::string& config_path, const std::string& space_path, const std::string& out) {
  const PipelineConfig base = load_config_file(config_path);
  const auto space = search::parse_space(json::parse(read_file(space_path)));
  const auto results = search::param_search(space, [&](const json& point) {
    PipelineConfig cfg = base;
    for (const auto& [name, value] : point.items()) set_hyper(cfg.hyper, name, value);
    const auto report = runner::run(cfg);
    return search::Outcome{score_of(report), runner::to_json(report)};
  });

  json doc = json::array();
  for (const auto& r : results) {
    json row = {{"point", r.point}};
    if (r.score) row["score"] = *r.score;
    else row["error"] = r.error;
    doc.push_back(row);
    std::cout << std::left << std::setw(14)
              << (r.score ? std::to_string(*r.score) : std::string("failed")) << r.point.dump()
              << (r.score ? "" : "  " + r.error) << "\n";
  }
  if (!out.empty()) std::ofstream(out, std::ios::binary) << doc.dump(2) << "\n";
  return 0;
}

service::Service* g_service = nullptr;

int serve(const std::string& host, int port) {
  service::Service svc;
  g_service = &svc;
  std::signal(SIGINT, [](int) {
    if (g_service) g_service->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_service) g_service->stop();
  });
  const int bound = svc.bind(host, port);
  std::cout << "listening on " << host << ":" << bound << std::endl;
  svc.serve_bound();
  g_service = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"metaforge: modular meta-learning pipelines"};
  app.require_subcommand(1);

  bool as_json = false;
  std::string config, out, space, host = "127.0.0.1";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  bool quiet = false;
  int port = 8080;

  auto* list = app.add_subcommand("list-modules", "List registered modules per slot");
  list->add_flag("--json", as_json, "Print the descriptor list as JSON");

  auto* val = app.add_subcommand("validate", "Check a config against the compatibility rules");
  val->add_option("config", config, "Config file")->required();
  val->add_flag("--json", as_json, "Print the report as JSON");

  auto* gen = app.add_subcommand("generate", "Print the launch script for a config");
  gen->add_option("config", config, "Config file")->required();
  gen->add_option("--out", out, "Also write the canonical config into this directory");

  auto* run_cmd = app.add_subcommand("run", "Meta-train and evaluate a config");
  run_cmd->add_option("--config", config, "Config file")->required();
  run_cmd->add_option("--seed", seed, "Override the config seed");
  run_cmd->add_option("--parallel", threads, "Worker threads")->check(CLI::Range(1, 1024));
  run_cmd->add_option("--out", out, "Report path")->default_val("report.json");
  run_cmd->add_flag("--quiet", quiet, "No progress output");

  auto* bench_cmd = app.add_subcommand("bench", "Sweep hyperparameters over a search space");
  bench_cmd->add_option("--config", config, "Base config file")->required();
  bench_cmd->add_option("--space", space, "Search space file")->required();
  bench_cmd->add_option("--out", out, "Write results as JSON");

  auto* dev = app.add_subcommand("device-check", "Report available execution modes");

  auto* rep = app.add_subcommand("report", "Render a stored run report");
  rep->add_option("report", out, "Report file")->required();

  auto* srv = app.add_subcommand("serve", "Start the HTTP service");
  srv->add_option("--host", host, "Bind address");
  srv->add_option("--port", port, "Port, 0 for any free port")->check(CLI::Range(0, 65535));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return kUsage;
  }

  try {
    if (*list) return list_modules(as_json);
    if (*val) return validate(config, as_json);
    if (*gen) return generate(config, out);
    if (*run_cmd) return run(config, seed, threads, out, quiet);
    if (*bench_cmd) return bench(config, space, out);
    if (*dev) {
      std::cout << runner::to_json(runner::device_check()).dump(2) << "\n";
      return 0;
    }
    if (*rep) {
      std::cout << runner::render_report(runner::read_report(out));
      return 0;
    }
    if (*srv) return serve(host, port);
  } catch (const CompatError& e) {
    print_violations(e.report());
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kUsage;
}
