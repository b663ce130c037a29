#include "memtrace/callseq.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include <json.hpp>

namespace memtrace::recon {

const std::vector<CallSequenceRule>& evasive_technique_rules() {
  static const std::vector<CallSequenceRule> rules = {
      {"Early bird APC Code Injection",
       {{"CreateProcessA"}, {"WriteProcessMemory"}, {"QueueUserAPC"}, {"ResumeThread"}}},
      {"Process Injection",
       {{"OpenProcess"},
        {"VirtualAllocEx"},
        {"WriteProcessMemory"},
        {"CreateRemoteThread", "NtCreateThreadEx", "RtlCreateUserThread"}}},
      {"Load PE From Resource",
       {{"FindResource"}, {"SizeofResource"}, {"LoadResource"}, {"VirtualAlloc"}}},
      {"Module Execution Through Fibers",
       {{"ConvertThreadToFiber"}, {"VirtualAlloc"}, {"CreateFiber"}}},
      {"Module Execution Through Thread Pool",
       {{"CreateEvent"}, {"VirtualAlloc"}, {"CreateThreadpoolWait"}, {"SetThreadpoolWait"}}},
      {"Window Hooking", {{"LoadLibraryA"}, {"GetProcAddress"}, {"SetWindowsHookEx"}}},
      {"Map View of Section",
       {{"NtCreateSection"}, {"NtMapViewOfSection"}, {"RtlCreateUserThread"}}},
  };
  return rules;
}

bool callee_matches(std::string_view callee, std::string_view pattern) {
  if (callee == pattern) return true;
  return callee.size() == pattern.size() + 1 && callee.starts_with(pattern) &&
         (callee.back() == 'A' || callee.back() == 'W');
}

std::vector<RuleHit> flag_call_sequences(const std::vector<CallRecord>& calls,
                                         const std::vector<CallSequenceRule>& rules) {
  std::map<std::uint32_t, std::vector<const CallRecord*>> by_thread;
  for (const auto& c : calls) by_thread[c.thread_id].push_back(&c);

  std::vector<RuleHit> hits;
  for (auto& [tid, thread_calls] : by_thread) {
    std::stable_sort(thread_calls.begin(), thread_calls.end(),
                     [](const CallRecord* a, const CallRecord* b) { return a->seq < b->seq; });
    for (const auto& rule : rules) {
      if (rule.steps.empty()) continue;
      // Greedy earliest matching finds an ordered subsequence iff one exists.
      std::size_t step = 0;
      std::uint64_t first = 0;
      for (const CallRecord* c : thread_calls) {
        const auto& alts = rule.steps[step];
        if (std::none_of(alts.begin(), alts.end(),
                         [&](const std::string& p) { return callee_matches(c->callee, p); }))
          continue;
        if (step == 0) first = c->seq;
        if (++step == rule.steps.size()) {
          hits.push_back({rule.name, tid, first, c->seq});
          break;
        }
      }
    }
  }
  return hits;
}

std::vector<CallSequenceRule> parse_rules(std::istream& in) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw RulesParseError(std::string("rules: ") + e.what());
  }
  if (!doc.is_array()) throw RulesParseError("rules: top level must be an array");

  std::vector<CallSequenceRule> rules;
  for (const auto& item : doc) {
    if (!item.is_object() || !item.contains("name") || !item["name"].is_string() ||
        !item.contains("sequence") || !item["sequence"].is_array())
      throw RulesParseError("rules: each rule needs a string 'name' and an array 'sequence'");
    CallSequenceRule rule{item["name"].get<std::string>(), {}};
    for (const auto& step : item["sequence"]) {
      std::vector<std::string> alts;
      if (step.is_string()) {
        alts.push_back(step.get<std::string>());
      } else if (step.is_array() && !step.empty()) {
        for (const auto& alt : step) {
          if (!alt.is_string()) throw RulesParseError("rules: step alternatives must be strings");
          alts.push_back(alt.get<std::string>());
        }
      } else {
        throw RulesParseError("rules: step must be a string or a non-empty array of strings");
      }
      rule.steps.push_back(std::move(alts));
    }
    if (rule.steps.empty()) throw RulesParseError("rules: '" + rule.name + "' has no steps");
    rules.push_back(std::move(rule));
  }
  return rules;
}

std::vector<CallSequenceRule> read_rules_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw RulesParseError("cannot open rules file " + path);
  return parse_rules(in);
}

}  // namespace memtrace::recon
