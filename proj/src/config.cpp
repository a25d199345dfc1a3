#include "metaforge/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

namespace metaforge {

using nlohmann::json;

ConfigError::ConfigError(std::string message, std::string pointer)
    : Error("config " + (pointer.empty() ? std::string("/") : pointer) + ": " + message),
      pointer_(std::move(pointer)) {}

ConfigError::ConfigError(std::string message, std::size_t byte_offset)
    : Error("config at byte " + std::to_string(byte_offset) + ": " + message),
      offset_(byte_offset) {}

namespace {

std::string kind_of(const json& v) { return v.type_name(); }

std::uint64_t as_unsigned(const json& v, const std::string& ptr) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return v.get<std::uint64_t>();
  throw ConfigError("expected a non-negative integer, got " + kind_of(v) +
                        (v.is_number() ? " " + v.dump() : ""),
                    ptr);
}

std::int64_t as_signed(const json& v, const std::string& ptr) {
  if (v.is_number_integer()) return v.get<std::int64_t>();
  throw ConfigError("expected an integer, got " + kind_of(v), ptr);
}

double as_double(const json& v, const std::string& ptr) {
  if (!v.is_number()) throw ConfigError("expected a number, got " + kind_of(v), ptr);
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw ConfigError("expected a finite number", ptr);
  return d;
}

struct Field {
  const char* name;
  std::function<json(const Hyper&)> get;
  std::function<void(Hyper&, const json&, const std::string&)> set;
};

Field count(const char* name, std::size_t Hyper::*m, std::size_t lo,
            std::size_t hi = 1'000'000'000) {
  return {name, [m](const Hyper& h) { return json(h.*m); },
          [m, lo, hi](Hyper& h, const json& v, const std::string& ptr) {
            const std::uint64_t x = as_unsigned(v, ptr);
            if (x < lo || x > hi)
              throw ConfigError("must be in [" + std::to_string(lo) + ", " + std::to_string(hi) +
                                    "], got " + std::to_string(x),
                                ptr);
            h.*m = static_cast<std::size_t>(x);
          }};
}

// open: lower bound exclusive.
Field real(const char* name, double Hyper::*m, double lo, bool open) {
  return {name, [m](const Hyper& h) { return json(h.*m); },
          [m, lo, open](Hyper& h, const json& v, const std::string& ptr) {
            const double x = as_double(v, ptr);
            if (open ? !(x > lo) : !(x >= lo)) {
              std::ostringstream os;
              os << "must be " << (open ? "> " : ">= ") << lo << ", got " << x;
              throw ConfigError(os.str(), ptr);
            }
            h.*m = x;
          }};
}

Field flag(const char* name, bool Hyper::*m) {
  return {name, [m](const Hyper& h) { return json(h.*m); },
          [m](Hyper& h, const json& v, const std::string& ptr) {
            if (!v.is_boolean()) throw ConfigError("expected a boolean, got " + kind_of(v), ptr);
            h.*m = v.get<bool>();
          }};
}

// Empty `allowed` accepts any string.
Field text(const char* name, std::string Hyper::*m, std::vector<std::string> allowed) {
  return {name, [m](const Hyper& h) { return json(h.*m); },
          [m, allowed](Hyper& h, const json& v, const std::string& ptr) {
            if (!v.is_string()) throw ConfigError("expected a string, got " + kind_of(v), ptr);
            const auto s = v.get<std::string>();
            if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), s) == allowed.end()) {
              std::string list;
              for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + ("'" + a + "'");
              throw ConfigError("'" + s + "' is not one of " + list, ptr);
            }
            h.*m = s;
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(text("algorithm", &Hyper::algorithm,
                     {"", "maml", "fomaml", "reptile", "metasgd", "anil", "protonet",
                      "matchingnet"}));
    f.push_back(count("n_way", &Hyper::n_way, 2, 10000));
    f.push_back(count("k_shot", &Hyper::k_shot, 1, 10000));
    f.push_back(count("query_shots", &Hyper::query_shots, 0, 10000));
    f.push_back(count("split_t", &Hyper::split_t, 0, 10000));
    f.push_back(count("split_v", &Hyper::split_v, 0, 10000));
    f.push_back(real("lr_alpha", &Hyper::lr_alpha, 0.0, true));
    f.push_back(real("lr_beta", &Hyper::lr_beta, 0.0, true));
    f.push_back(count("inner_steps", &Hyper::inner_steps, 0, 100000));
    f.push_back(flag("first_order", &Hyper::first_order));
    f.push_back(real("lambda", &Hyper::lambda, 0.0, true));
    f.push_back(count("cg_iters", &Hyper::cg_iters, 1, 1000000));
    f.push_back(real("cg_tol", &Hyper::cg_tol, 0.0, true));
    f.push_back(real("sigma", &Hyper::sigma, 0.0, true));
    f.push_back(count("es_samples", &Hyper::es_samples, 2, 100000000));
    f.push_back(flag("antithetic", &Hyper::antithetic));
    f.push_back(count("meta_batch", &Hyper::meta_batch, 1, 100000));
    f.push_back(count("iterations", &Hyper::iterations, 0));
    f.push_back(count("eval_tasks", &Hyper::eval_tasks, 1, 1000000));
    f.push_back(count("eval_steps", &Hyper::eval_steps, 0, 100000));
    f.push_back({"hidden", [](const Hyper& h) { return json(h.hidden); },
                 [](Hyper& h, const json& v, const std::string& ptr) {
                   if (!v.is_array() || v.empty())
                     throw ConfigError("expected a nonempty array of layer widths", ptr);
                   std::vector<std::size_t> out;
                   for (std::size_t i = 0; i < v.size(); ++i) {
                     const auto w = as_unsigned(v[i], ptr + "/" + std::to_string(i));
                     if (w == 0 || w > 100000)
                       throw ConfigError("layer width must be in [1, 100000]",
                                         ptr + "/" + std::to_string(i));
                     out.push_back(static_cast<std::size_t>(w));
                   }
                   h.hidden = std::move(out);
                 }});
    f.push_back(text("activation", &Hyper::activation, {"tanh", "relu"}));
    f.push_back(count("conv_blocks", &Hyper::conv_blocks, 1, 64));
    f.push_back(count("conv_channels", &Hyper::conv_channels, 1, 4096));
    f.push_back(count("embed_dim", &Hyper::embed_dim, 1, 100000));
    f.push_back(text("optimizer", &Hyper::optimizer, {"sgd", "adam"}));
    f.push_back(count("num_classes", &Hyper::num_classes, 2, 1000000));
    f.push_back(count("per_class", &Hyper::per_class, 1, 1000000));
    f.push_back(count("feature_dim", &Hyper::feature_dim, 1, 1000000));
    f.push_back(real("blob_spread", &Hyper::blob_spread, 0.0, false));
    f.push_back(real("blob_noise", &Hyper::blob_noise, 0.0, true));
    f.push_back({"num_tasks", [](const Hyper& h) { return json(h.num_tasks); },
                 [](Hyper& h, const json& v, const std::string& ptr) {
                   const auto n = as_signed(v, ptr);
                   if (n != -1 && n < 1) throw ConfigError("must be -1 or >= 1", ptr);
                   h.num_tasks = n;
                 }});
    f.push_back(text("sampler", &Hyper::sampler,
                     {"uniform", "low_diversity", "high_diversity", "adaptive"}));
    f.push_back(text("data_path", &Hyper::data_path, {}));
    return f;
  }();
  return table;
}

const Field* find_field(const std::string& name) {
  for (const auto& f : fields())
    if (name == f.name) return &f;
  return nullptr;
}

void check_cross_fields(const PipelineConfig& cfg) {
  const Hyper& h = cfg.hyper;
  if (h.split_t == 0 && h.split_v > 0)
    throw ConfigError("split_v needs split_t > 0", "/hyper/split_v");
  if (h.antithetic && h.es_samples % 2 != 0)
    throw ConfigError("antithetic sampling needs an even sample count", "/hyper/es_samples");
  if (cfg.parallel > 1 && cfg.slot(Slot::training_method) != ".parallel()")
    throw ConfigError("parallel > 1 needs the .parallel() training method", "/parallel");
}

}  // namespace

std::vector<std::string> hyper_names() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.emplace_back(f.name);
  return out;
}

void set_hyper(Hyper& hyper, const std::string& name, const json& value) {
  const Field* f = find_field(name);
  if (!f) throw ConfigError("unknown hyperparameter '" + name + "'", "/hyper/" + name);
  f->set(hyper, value, "/hyper/" + name);
}

PipelineConfig config_from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("document must be an object", "");
  for (const auto& [key, _] : doc.items())
    if (key != "slots" && key != "modifiers" && key != "hyper" && key != "seed" &&
        key != "parallel")
      throw ConfigError("unknown key '" + key + "'", "/" + key);

  PipelineConfig cfg;
  if (!doc.contains("slots")) throw ConfigError("missing 'slots'", "/slots");
  const json& slots = doc.at("slots");
  if (!slots.is_object()) throw ConfigError("expected an object", "/slots");
  for (const auto& [key, _] : slots.items())
    if (!parse_slot(key)) throw ConfigError("unknown slot '" + key + "'", "/slots/" + key);
  for (Slot s : kSlots) {
    const std::string name(to_string(s));
    const std::string ptr = "/slots/" + name;
    if (!slots.contains(name)) throw ConfigError("missing slot '" + name + "'", ptr);
    const json& v = slots.at(name);
    if (!v.is_string()) throw ConfigError("expected a module id string", ptr);
    const ModuleDescriptor* m = find_module(s, v.get<std::string>());
    if (!m)
      throw ConfigError("unknown module '" + v.get<std::string>() + "' for slot '" + name + "'",
                        ptr);
    cfg.slot(s) = m->id;
  }

  if (doc.contains("modifiers")) {
    const json& mods = doc.at("modifiers");
    if (!mods.is_array()) throw ConfigError("expected an array", "/modifiers");
    for (std::size_t i = 0; i < mods.size(); ++i) {
      const std::string ptr = "/modifiers/" + std::to_string(i);
      if (!mods[i].is_string() || mods[i].get<std::string>() != "label_free")
        throw ConfigError("the only modifier is \"label_free\"", ptr);
      cfg.label_free = true;
    }
  }

  if (doc.contains("hyper")) {
    const json& hyper = doc.at("hyper");
    if (!hyper.is_object()) throw ConfigError("expected an object", "/hyper");
    for (const auto& [key, value] : hyper.items()) set_hyper(cfg.hyper, key, value);
  }
  if (doc.contains("seed")) cfg.seed = as_unsigned(doc.at("seed"), "/seed");
  if (doc.contains("parallel")) {
    const auto p = as_unsigned(doc.at("parallel"), "/parallel");
    if (p < 1 || p > 1024) throw ConfigError("must be in [1, 1024]", "/parallel");
    cfg.parallel = static_cast<std::size_t>(p);
  }
  check_cross_fields(cfg);
  return cfg;
}

PipelineConfig parse_config(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(e.what(), static_cast<std::size_t>(e.byte));
  }
  return config_from_json(doc);
}

json config_to_json(const PipelineConfig& cfg) {
  json doc;
  for (Slot s : kSlots) doc["slots"][std::string(to_string(s))] = cfg.slot(s);
  doc["modifiers"] = json::array();
  if (cfg.label_free) doc["modifiers"].push_back("label_free");
  doc["hyper"] = json::object();
  for (const auto& f : fields()) doc["hyper"][f.name] = f.get(cfg.hyper);
  doc["seed"] = cfg.seed;
  doc["parallel"] = cfg.parallel;
  return doc;
}

std::string serialize_config(const PipelineConfig& cfg) {
  return config_to_json(cfg).dump(2) + "\n";
}

PipelineConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'", "");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

}  // namespace metaforge
