#include "metaforge/registry.hpp"

#include <algorithm>
#include <cstdio>

#include "metaforge/config.hpp"
#include "metaforge/random.hpp"

namespace metaforge {

std::string_view to_string(Slot slot) {
  switch (slot) {
    case Slot::task_construction: return "task_construction";
    case Slot::meta_learner: return "meta_learner";
    case Slot::base_learner: return "base_learner";
    case Slot::backbone: return "backbone";
    case Slot::optimization_strategy: return "optimization_strategy";
    case Slot::training_method: return "training_method";
  }
  return "?";
}

std::optional<Slot> parse_slot(std::string_view name) {
  for (Slot s : kSlots)
    if (to_string(s) == name) return s;
  return std::nullopt;
}

UnknownModule::UnknownModule(Slot slot, std::string_view id)
    : Error("unknown module '" + std::string(id) + "' for slot '" + std::string(to_string(slot)) +
            "'") {}

namespace {

using S = Slot;

const std::vector<ModuleDescriptor>& table() {
  static const std::vector<ModuleDescriptor> t = {
      {S::task_construction, "Task for regression", ".dataload()+.taskre()", "taskre", true,
       {"regression", "needs_labels"}},
      {S::task_construction, "Task for classification", ".dataload()+.taskcl()", "taskcl", true,
       {"classification", "needs_labels"}},
      {S::task_construction, "Task for prediction", ".dataload()+.taskpre()", "taskpre", true,
       {"prediction", "needs_labels"}},
      {S::task_construction, "Task for unsupervised learning", "+.tasklabelfree()",
       "tasklabelfree", true, {"label_free", "additive"}},
      {S::task_construction, "Task for reinforcement learning", ".taskrein()", "taskrein", false,
       {"reinforcement", "exclusive"}},

      {S::meta_learner, "Optimization-based", ".metalearnerOp()", "metalearnerOp", true,
       {"optimization"}},
      {S::meta_learner, "Model-based", ".metalearnerMo()", "metalearnerMo", false, {"model"}},
      {S::meta_learner, "Metric-based", ".metalearnerMe()", "metalearnerMe", true, {"metric"}},
      {S::meta_learner, "Bayesian-based", ".metalearnerBaye()", "metalearnerBaye", false,
       {"bayesian"}},
      {S::meta_learner, "General-Learner", ".metalearner()", "metalearner", true,
       {"optimization", "alias"}},

      {S::base_learner, "classification", ".baselearner()+.lossce()", "lossce", true,
       {"loss:cross_entropy"}},
      {S::base_learner, "regression / prediction", ".baselearner()+.lossmse()", "lossmse", true,
       {"loss:mse"}},
      {S::base_learner, "unsupervised", ".baselearner()+.losscont()", "losscont", true,
       {"loss:contrastive"}},
      {S::base_learner, "reinforcement learning", ".baselearner()+.lossq()", "lossq", false,
       {"loss:q"}},

      {S::backbone, "Conv-N", "backbone = CONVN", "CONVN", true, {"higher_order_safe"}},
      {S::backbone, "VGG-16", "backbone = VGG16", "VGG16", false, {}},
      {S::backbone, "ResNet-N", "backbone = RESNETN", "RESNETN", false, {}},
      {S::backbone, "Transformer-based", "backbone = VIT", "VIT", false, {}},
      {S::backbone, "MLP", "backbone = MLP", "MLP", true, {"higher_order_safe"}},

      {S::optimization_strategy, "Implicit gradient", ".optimizerIG()", "optimizerIG", true,
       {"implicit", "needs_second_order"}},
      {S::optimization_strategy, "Differentiable proxies", ".optimizerDP()", "optimizerDP", true,
       {"unrolled", "needs_second_order"}},
      {S::optimization_strategy, "Single-level approximation", ".optimizerSA()", "optimizerSA",
       true, {"first_order"}},
      {S::optimization_strategy, "Derivative estimation", ".optimizerDE()", "optimizerDE", true,
       {"es"}},

      {S::training_method, "Serial computing", ".serial()", "serial", true, {"serial"}},
      {S::training_method, "Parallel computing", ".parallel()", "parallel", true, {"parallel"}},
      {S::training_method, "Multi-GPU/CPG", "train_gpu = N", "train_gpu", false, {"gpu"}},
      {S::training_method, "Notebook online", "online", "online", false, {"online"}},
  };
  return t;
}

std::string display(const ModuleDescriptor& m) { return "'" + m.id + "'"; }

bool is_label_free(const Selection& s) {
  return s.label_free || s.at(Slot::task_construction).has("label_free");
}

const std::vector<std::string> kInitAlgorithms = {"maml", "fomaml", "reptile", "metasgd", "anil"};
const std::vector<std::string> kMetricAlgorithms = {"protonet", "matchingnet"};

bool contains(const std::vector<std::string>& v, const std::string& x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

std::vector<Violation> r1(const Selection& s) {
  const auto& t = s.at(Slot::task_construction);
  if (!t.has("reinforcement")) return {};
  return {{"R1",
           display(t) + " must be used on its own and reinforcement learning tasks are not "
                        "supported by this toolkit",
           {Slot::task_construction}}};
}

std::vector<Violation> r2(const Selection& s) {
  if (!is_label_free(s) || s.at(Slot::base_learner).has("loss:contrastive")) return {};
  return {{"R2", "label-free tasks require the contrastive loss '.baselearner()+.losscont()'",
           {Slot::task_construction, Slot::base_learner}}};
}

std::vector<Violation> r3(const Selection& s) {
  if (!s.at(Slot::meta_learner).has("metric") || s.at(Slot::base_learner).has("loss:cross_entropy"))
    return {};
  return {{"R3",
           "metric-based meta-learners require the classification loss "
           "'.baselearner()+.lossce()'",
           {Slot::meta_learner, Slot::base_learner}}};
}

std::vector<Violation> r4(const Selection& s) {
  if (!s.at(Slot::optimization_strategy).has("implicit") || !s.first_order) return {};
  return {{"R4", "the implicit gradient strategy cannot be combined with first_order=true",
           {Slot::optimization_strategy}}};
}

std::vector<Violation> r5(const Selection& s) {
  if (!s.at(Slot::optimization_strategy).has("needs_second_order") ||
      s.at(Slot::backbone).has("higher_order_safe"))
    return {};
  return {{"R5",
           display(s.at(Slot::optimization_strategy)) + " needs second-order gradients, which " +
               display(s.at(Slot::backbone)) + " does not support",
           {Slot::optimization_strategy, Slot::backbone}}};
}

std::vector<Violation> r6(const Selection& s) {
  std::vector<Violation> out;
  for (Slot slot : kSlots) {
    const auto& m = s.at(slot);
    if (m.implemented || m.has("reinforcement") || m.has("bayesian")) continue;
    out.push_back({"R6", display(m) + " is registered but not implemented", {slot}});
  }
  return out;
}

std::vector<Violation> r7(const Selection& s) {
  const auto& m = s.at(Slot::meta_learner);
  if (!m.has("bayesian")) return {};
  return {{"R7", display(m) + ": registered, unimplemented", {Slot::meta_learner}}};
}

std::vector<Violation> r8(const Selection& s) {
  if (is_label_free(s)) return {};
  const auto& t = s.at(Slot::task_construction);
  const auto& b = s.at(Slot::base_learner);
  std::string need;
  if (t.has("regression") || t.has("prediction")) need = "loss:mse";
  if (t.has("classification")) need = "loss:cross_entropy";
  if (need.empty() || b.has(need)) return {};
  const std::string want =
      need == "loss:mse" ? ".baselearner()+.lossmse()" : ".baselearner()+.lossce()";
  return {{"R8", display(t) + " needs the loss '" + want + "'",
           {Slot::task_construction, Slot::base_learner}}};
}

std::vector<Violation> r9(const Selection& s) {
  if (s.algorithm.empty()) return {};
  const auto& m = s.at(Slot::meta_learner);
  const std::vector<std::string>* family = nullptr;
  if (m.has("optimization")) family = &kInitAlgorithms;
  if (m.has("metric")) family = &kMetricAlgorithms;
  if (!family || contains(*family, s.algorithm)) return {};
  return {{"R9", "algorithm '" + s.algorithm + "' does not belong to " + display(m),
           {Slot::meta_learner}}};
}

const std::vector<Rule>& rules() {
  static const std::vector<Rule> t = {
      {"R1", "reinforcement task construction is rejected", r1},
      {"R2", "LabelFree forces the contrastive loss", r2},
      {"R3", "metric-based meta-learners need the classification loss", r3},
      {"R4", "implicit strategy forbids first_order", r4},
      {"R5", "second-order strategies need a higher-order-safe backbone", r5},
      {"R6", "unimplemented descriptors cannot run", r6},
      {"R7", "Bayesian meta-learner is registered, unimplemented", r7},
      {"R8", "task construction fixes the supervised loss", r8},
      {"R9", "hyper.algorithm must belong to the meta-learner family", r9},
  };
  return t;
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::span<const ModuleDescriptor> registry_list() { return table(); }

std::vector<ModuleDescriptor> registry_list(Slot slot) {
  std::vector<ModuleDescriptor> out;
  for (const auto& m : table())
    if (m.slot == slot) out.push_back(m);
  return out;
}

const ModuleDescriptor* find_module(Slot slot, std::string_view id_or_key) {
  for (const auto& m : table())
    if (m.slot == slot && (m.id == id_or_key || m.key == id_or_key)) return &m;
  return nullptr;
}

const ModuleDescriptor& module_or_throw(Slot slot, std::string_view id_or_key) {
  const auto* m = find_module(slot, id_or_key);
  if (!m) throw UnknownModule(slot, id_or_key);
  return *m;
}

std::vector<std::string> CompatReport::rule_ids() const {
  std::vector<std::string> out;
  for (const auto& v : violations) out.push_back(v.rule);
  return out;
}

std::span<const Rule> rule_table() { return rules(); }

Selection select(const PipelineConfig& cfg) {
  Selection s;
  for (Slot slot : kSlots) s.modules[static_cast<std::size_t>(slot)] = &module_or_throw(slot, cfg.slot(slot));
  s.label_free = cfg.label_free;
  s.first_order = cfg.hyper.first_order;
  s.algorithm = cfg.hyper.algorithm;
  return s;
}

CompatReport check_compat(const Selection& selection) {
  CompatReport report;
  for (const auto& rule : rules())
    for (auto& v : rule.check(selection)) report.violations.push_back(std::move(v));
  std::stable_sort(report.violations.begin(), report.violations.end(),
                   [](const Violation& a, const Violation& b) {
                     if (a.rule != b.rule) return a.rule < b.rule;
                     return a.slots < b.slots;
                   });
  return report;
}

CompatReport check_compat(const PipelineConfig& cfg) { return check_compat(select(cfg)); }

std::string resolved_algorithm(const Selection& selection) {
  if (!selection.algorithm.empty()) return selection.algorithm;
  return selection.at(Slot::meta_learner).has("metric") ? "protonet" : "maml";
}

CompatError::CompatError(CompatReport report)
    : Error([&] {
        std::string msg = "configuration is not runnable:";
        for (const auto& v : report.violations) msg += "\n  " + v.rule + ": " + v.message;
        return msg;
      }()),
      report_(std::move(report)) {}

std::string config_file_name(const PipelineConfig& cfg) {
  return "metaforge-" + hex16(StableHash().add(serialize_config(cfg)).value()) + ".json";
}

std::string emit_command(const PipelineConfig& cfg) {
  CompatReport report = check_compat(cfg);
  if (!report.ok()) throw CompatError(std::move(report));
  const bool parallel = cfg.slot(Slot::training_method) == ".parallel()";
  const std::size_t threads = parallel ? cfg.parallel : 1;
  std::string out = "export METAFORGE_SEED=" + std::to_string(cfg.seed) +
                    " METAFORGE_THREADS=" + std::to_string(threads) + "\n";
  out += "metaforge run --config " + config_file_name(cfg);
  if (parallel) out += " --parallel " + std::to_string(cfg.parallel);
  out += "\n";
  return out;
}

}  // namespace metaforge
