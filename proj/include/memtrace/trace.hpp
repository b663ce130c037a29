#pragma once

// Event model and on-disk trace format shared by the simulator and the
// analysis passes.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace memtrace {

using Address = std::uint64_t;

enum class Cpl : std::uint8_t { User, Kernel };

enum class AccessKind : std::uint8_t { Read, Write, Execute };

enum class InstrCategory : std::uint8_t {
  IntMove,
  FloatMove,
  XmmZeroStore,
  Push,
  Call,
  Ret,
  SubSp,
  Syscall,
  ApiCall,
  Other,
};

enum class Signedness : std::uint8_t { Signed, Unsigned, NotApplicable };

// Annotation attached by the simulator to events that do not correspond to a
// plain data access.
enum class EventTag : std::uint8_t {
  None,
  PageFault,   // hypervisor-injected page fault
  Entry,       // first execution of the main module's entry point
  Transition,  // first instruction fetched after a user/kernel mode switch
  HookRead,    // read of a hidden-hook byte served from the pristine page
};

/// What the decoder reports about the instruction behind an access.
struct InstrDescriptor {
  InstrCategory category = InstrCategory::Other;
  Signedness signedness = Signedness::NotApplicable;
  std::optional<std::string> callee;
  // Argument registers consumed by the call, in RCX, RDX, R8, R9 order.
  std::optional<std::vector<std::uint64_t>> register_args;

  bool operator==(const InstrDescriptor&) const = default;
};

struct AccessEvent {
  std::uint64_t seq = 0;
  std::uint32_t thread_id = 0;
  Cpl cpl = Cpl::User;
  AccessKind kind = AccessKind::Read;
  Address address = 0;
  std::uint32_t operand_size = 1;
  InstrDescriptor instr;
  Address rip = 0;
  // Data moved by the instruction (loaded or stored value, pushed return
  // address). Ret events carry the return register (RAX); sub-sp events carry
  // the subtracted amount.
  std::optional<std::uint64_t> value;
  EventTag tag = EventTag::None;

  bool operator==(const AccessEvent&) const = default;
};

/// Half-open virtual address range [lo, hi).
struct AddressRange {
  Address lo = 0;
  Address hi = 0;

  bool contains(Address a) const { return a >= lo && a < hi; }
  bool empty() const { return hi <= lo; }
  bool operator==(const AddressRange&) const = default;
};

struct TraceLog {
  std::vector<AccessEvent> events;
  AddressRange module_range;

  bool operator==(const TraceLog&) const = default;
};

/// Ordered relative offsets used as a behavioral signature.
struct AddressPattern {
  std::vector<std::int64_t> offsets;
  Address base = 0;
  std::optional<std::vector<std::uint32_t>> sizes;

  std::size_t size() const { return offsets.size(); }
  bool empty() const { return offsets.empty(); }
  bool operator==(const AddressPattern&) const = default;
};

class TraceParseError : public std::runtime_error {
 public:
  TraceParseError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class TraceOrderError : public std::runtime_error {
 public:
  TraceOrderError(std::size_t line, std::uint64_t previous, std::uint64_t seq);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Text names used by the file format.
std::string_view to_string(Cpl cpl);
std::string_view to_string(AccessKind kind);
std::string_view to_string(InstrCategory category);
std::string_view to_string(Signedness signedness);
std::string_view to_string(EventTag tag);
std::optional<Cpl> parse_cpl(std::string_view text);
std::optional<AccessKind> parse_access_kind(std::string_view text);
std::optional<InstrCategory> parse_instr_category(std::string_view text);
std::optional<Signedness> parse_signedness(std::string_view text);
std::optional<EventTag> parse_event_tag(std::string_view text);

std::string format_hex(std::uint64_t value);
// Accepts "0x..." hex or plain decimal.
std::optional<std::uint64_t> parse_u64(std::string_view text);

bool is_call_like(InstrCategory category);
bool is_valid_operand_size(std::uint32_t size);

// Checks the per-event invariants; returns a description of the first broken
// one.
std::optional<std::string> validate_event(const AccessEvent& event);

TraceLog parse_trace(std::istream& in);
TraceLog parse_trace(std::string_view text);
void serialize_trace(const TraceLog& log, std::ostream& out);
std::string serialize_trace(const TraceLog& log);

TraceLog read_trace_file(const std::string& path);
void write_trace_file(const TraceLog& log, const std::string& path);

std::map<std::uint32_t, std::vector<AccessEvent>> split_by_thread(const TraceLog& log);

/// Offsets of each event's address relative to `base`, or to the lowest
/// accessed address when no base is given. Event order is preserved.
AddressPattern normalize_offsets(const std::vector<AccessEvent>& events,
                                 std::optional<Address> base = std::nullopt);

}  // namespace memtrace
