#pragma once

// Abstract program models driven through the simulator, and the trap
// configuration that decides what the simulated hypervisor records.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "memtrace/guest.hpp"
#include "memtrace/trace.hpp"

namespace memtrace::sim {

/// Address or value operand: absolute, stack-pointer relative ("sp+0x20"),
/// or relative to the result of the k-th allocation in program order
/// ("a0+0x10").
struct Operand {
  enum class Base : std::uint8_t { Absolute, StackPointer, Allocation };

  Base base = Base::Absolute;
  std::size_t alloc_index = 0;
  std::int64_t disp = 0;

  static Operand absolute(std::uint64_t value) {
    return {Base::Absolute, 0, static_cast<std::int64_t>(value)};
  }
  static Operand sp(std::int64_t disp = 0) { return {Base::StackPointer, 0, disp}; }
  static Operand alloc(std::size_t index, std::int64_t disp = 0) {
    return {Base::Allocation, index, disp};
  }

  bool operator==(const Operand&) const = default;
};

std::string to_string(const Operand& op);
std::optional<Operand> parse_operand(std::string_view text);

struct MovRead {
  Operand addr;
  std::uint32_t size = 8;
  InstrCategory category = InstrCategory::IntMove;
  Signedness sign = Signedness::NotApplicable;
};

struct MovWrite {
  Operand addr;
  std::uint32_t size = 8;
  InstrCategory category = InstrCategory::IntMove;
  Signedness sign = Signedness::NotApplicable;
  Operand value;
};

struct Push {
  Operand value;
};

/// Fastcall: up to four register args, the rest stored to [SP+0x20+8k]
/// before the return address is pushed.
struct Call {
  std::string callee;
  InstrCategory category = InstrCategory::Call;  // call, api-call or syscall
  std::vector<Operand> args;
  std::vector<Operand> stack_args;
};

struct SubSp {
  std::uint64_t amount = 0;
};

struct XmmZero {
  Operand addr;
};

/// Call into a known allocator; the k-th Alloc defines operand base "ak".
struct Alloc {
  std::string callee;
  std::uint64_t size = 0;
  // Heap-manager bookkeeping writes issued from outside the main module.
  std::uint32_t noise = 0;
};

struct Ret {
  Operand value;  // return register
};

struct ModeSwitch {
  Cpl cpl = Cpl::User;
};

/// Instruction with no memory operand.
struct Nop {};

/// Continue fetching at another address (same privilege level).
struct Jmp {
  Operand target;
};

using Instruction =
    std::variant<MovRead, MovWrite, Push, Call, SubSp, XmmZero, Alloc, Ret, ModeSwitch, Nop, Jmp>;

struct Region {
  AddressRange range;
  bool present = true;
  bool operator==(const Region&) const = default;
};

enum class TransitionMode : std::uint8_t { None, Mbec, Legacy };

std::string_view to_string(TransitionMode mode);

struct TrapConfig {
  // Active profile when transition detection is off.
  EptProfileId profile = EptProfileId::Normal;
  TransitionMode transitions = TransitionMode::None;
  // Data accesses logged while allowed: everything, or only inside `watch`.
  bool watch_all = true;
  std::vector<AddressRange> watch;
  // Hidden hooks on call/ret and on stack-frame instructions (sub-sp).
  bool hook_calls = true;
  bool hook_stack_ops = true;
  bool capture_entry = false;
  // Inject page faults over every fresh allocation.
  bool prefault_allocations = false;
  std::uint32_t thread_id = 0;
};

struct ProgramModel {
  std::vector<Instruction> code;
  std::uint64_t entry_page = 0x401;
  std::uint64_t entry_offset = 0;
  Address sp_init = 0x7ff000;
  Cpl initial_cpl = Cpl::User;
  bool entry_present = true;
  // Defaults to 16 pages starting at the entry page.
  std::optional<AddressRange> module_range;
  std::vector<Region> regions;
  std::optional<TrapConfig> trap;

  Address entry_address() const { return page_base(entry_page) + entry_offset; }
  AddressRange effective_module_range() const;
};

class ModelParseError : public std::runtime_error {
 public:
  ModelParseError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// One JSON record per line: a header (entry_page, sp_init, ...) followed by
/// one instruction per line keyed by "op".
ProgramModel parse_model(std::istream& in);
ProgramModel parse_model(std::string_view text);
ProgramModel read_model_file(const std::string& path);
void serialize_model(const ProgramModel& model, std::ostream& out);
std::string serialize_model(const ProgramModel& model);

}  // namespace memtrace::sim
