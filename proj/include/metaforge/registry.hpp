#pragma once

// Building-block registry: one descriptor per slot option, the
// compatibility rule table and two-line command generation.

#include <array>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "metaforge/error.hpp"

namespace metaforge {

struct PipelineConfig;

enum class Slot {
  task_construction,
  meta_learner,
  base_learner,
  backbone,
  optimization_strategy,
  training_method
};

inline constexpr std::array<Slot, 6> kSlots = {
    Slot::task_construction,     Slot::meta_learner,     Slot::base_learner,
    Slot::backbone,              Slot::optimization_strategy, Slot::training_method};

std::string_view to_string(Slot slot);
std::optional<Slot> parse_slot(std::string_view name);

struct ModuleDescriptor {
  Slot slot;
  std::string option;  // human label
  std::string id;      // canonical module name
  std::string key;     // short alias accepted wherever an id is
  bool implemented = false;
  std::set<std::string> tags;

  bool has(std::string_view tag) const { return tags.count(std::string(tag)) > 0; }
};

// A slot value that names no descriptor. Distinct from a rule violation.
class UnknownModule : public Error {
 public:
  UnknownModule(Slot slot, std::string_view id);
};

// All descriptors in a fixed order (slot order, then table order).
std::span<const ModuleDescriptor> registry_list();
std::vector<ModuleDescriptor> registry_list(Slot slot);
// Looks up by canonical id or short key within a slot.
const ModuleDescriptor* find_module(Slot slot, std::string_view id_or_key);
const ModuleDescriptor& module_or_throw(Slot slot, std::string_view id_or_key);

struct Violation {
  std::string rule;     // "R1".."R9"
  std::string message;
  std::vector<Slot> slots;

  bool operator==(const Violation&) const = default;
};

struct CompatReport {
  std::vector<Violation> violations;  // sorted by rule id, then slot

  bool ok() const { return violations.empty(); }
  std::vector<std::string> rule_ids() const;
};

// Resolved view of a config that rules are evaluated against.
struct Selection {
  std::array<const ModuleDescriptor*, 6> modules{};
  bool label_free = false;
  bool first_order = false;
  std::string algorithm;  // hyper.algorithm, may be empty

  const ModuleDescriptor& at(Slot s) const { return *modules[static_cast<std::size_t>(s)]; }
};

struct Rule {
  std::string id;
  std::string summary;
  // Returns the violations this rule raises for a selection.
  std::vector<Violation> (*check)(const Selection&);
};

std::span<const Rule> rule_table();

Selection select(const PipelineConfig& cfg);
// Pure; throws UnknownModule for ids outside the registry.
CompatReport check_compat(const PipelineConfig& cfg);
CompatReport check_compat(const Selection& selection);

class CompatError : public Error {
 public:
  explicit CompatError(CompatReport report);
  const CompatReport& report() const { return report_; }

 private:
  CompatReport report_;
};

// Canonical file name the run line refers to: metaforge-<16 hex>.json.
std::string config_file_name(const PipelineConfig& cfg);

// Two LF-terminated lines: environment preparation and the run command.
// Throws CompatError when the config has violations.
std::string emit_command(const PipelineConfig& cfg);

// Default algorithm for the meta-learner family when hyper.algorithm is
// empty ("maml" for optimization-based, "protonet" for metric-based).
std::string resolved_algorithm(const Selection& selection);

}  // namespace metaforge
