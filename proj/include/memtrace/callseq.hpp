#pragma once

// Ordered API-call sequence rules over recovered calls.

#include <cstdint>
#include <istream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "memtrace/recon.hpp"

namespace memtrace::recon {

struct CallSequenceRule {
  std::string name;
  // Each step lists the callees that satisfy it.
  std::vector<std::vector<std::string>> steps;
};

struct RuleHit {
  std::string rule;
  std::uint32_t thread_id = 0;
  std::uint64_t first_seq = 0;
  std::uint64_t last_seq = 0;

  bool operator==(const RuleHit&) const = default;
};

class RulesParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The seven known evasive-technique sequences.
const std::vector<CallSequenceRule>& evasive_technique_rules();

/// True if `callee` is `pattern` or `pattern` with an A/W suffix.
bool callee_matches(std::string_view callee, std::string_view pattern);

/// A rule hits a thread when its steps occur in order, not necessarily
/// adjacent, among that thread's calls. Each (rule, thread) reports at most
/// one hit, the one that completes earliest. Hits are ordered by thread,
/// then by rule order.
std::vector<RuleHit> flag_call_sequences(const std::vector<CallRecord>& calls,
                                         const std::vector<CallSequenceRule>& rules);

/// JSON array of {"name": ..., "sequence": [step, ...]} where a step is a
/// callee name or an array of alternatives.
std::vector<CallSequenceRule> parse_rules(std::istream& in);
std::vector<CallSequenceRule> read_rules_file(const std::string& path);

}  // namespace memtrace::recon
