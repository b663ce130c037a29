#pragma once

// Interpreter for ProgramModels on top of a Guest. Every memory access goes
// through Guest::check_access; violations are logged and emulated, never
// fatal.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "memtrace/guest.hpp"
#include "memtrace/model.hpp"
#include "memtrace/trace.hpp"

namespace memtrace::sim {

// Fixed layout of the simulated address space.
inline constexpr Address kUserHeapBase = 0x10000000;
inline constexpr Address kKernelPoolBase = 0xffffa00000000000;
inline constexpr Address kKernelCodeBase = 0xfffff80000001000;
inline constexpr Address kUserAllocatorCode = 0x7ff800001000;
inline constexpr Address kKernelAllocatorCode = 0xfffff80000100000;
inline constexpr std::uint64_t kStackReserve = 0x100000;
inline constexpr std::uint64_t kInstructionLength = 4;
// First stack-passed argument slot relative to SP at the call.
inline constexpr std::uint64_t kFirstStackArgSlot = 0x20;

class SimulationFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Violation {
  Address address = 0;
  AccessKind kind = AccessKind::Read;
  Cpl cpl = Cpl::User;
  EptProfileId profile = EptProfileId::Normal;
  Address rip = 0;

  bool operator==(const Violation&) const = default;
};

struct ModeTransition {
  std::uint64_t seq = 0;
  Cpl cpl = Cpl::User;

  bool operator==(const ModeTransition&) const = default;
};

/// What the model actually allocated; used as ground truth in tests.
struct AllocationTruth {
  std::string callee;
  Address base = 0;
  std::uint64_t size = 0;
  Address site_rip = 0;
};

struct RunResult {
  TraceLog log;
  std::vector<Violation> violations;
  std::vector<ModeTransition> transitions;
  std::optional<Address> entry_address;
  std::vector<AllocationTruth> allocations;
  std::vector<Address> injected_faults;
};

/// Guest with the model's module, stack, kernel code and extra regions
/// mapped. The entry page is left absent when the model says so.
Guest make_guest(const ProgramModel& model);

RunResult simulate(Guest& guest, const ProgramModel& model, const TrapConfig& config);
TraceLog run(Guest& guest, const ProgramModel& model, const TrapConfig& config);

struct EntryCapture {
  Address entry_address = 0;
  TraceLog prefix;  // events up to and including the entry violation
};

class EntryNotReached : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Revokes execute permission on the entry page, injects a page fault first
/// if that page is absent, reports the first fetch from it and restores the
/// permission.
EntryCapture capture_entry_point(Guest& guest, const ProgramModel& model,
                                 TrapConfig config = {});

std::vector<ModeTransition> mbec_transition_detect(Guest& guest, const ProgramModel& model,
                                                   TrapConfig config = {});
/// Transition detection for processors without MBEC: user fetches are made to
/// fault through the guest page tables and intercepted.
std::vector<ModeTransition> legacy_transition_detect(Guest& guest, const ProgramModel& model,
                                                     TrapConfig config = {});

/// Merges per-thread logs by taking one event from each in turn, then
/// renumbers seq globally.
TraceLog interleave_round_robin(const std::vector<TraceLog>& logs);

}  // namespace memtrace::sim
