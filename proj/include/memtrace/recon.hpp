#pragma once

// Recovery of allocation bases and call parameters from a trace.

#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "memtrace/trace.hpp"

namespace memtrace::recon {

inline constexpr std::uint64_t kPageSize = 4096;
inline constexpr std::uint64_t kShadowSpace = 0x20;
inline constexpr std::uint64_t kFirstStackArgSlot = 0x20;
inline constexpr std::uint64_t kXmmStoreWidth = 16;

enum class AllocationSource : std::uint8_t { HeapHook, CallParam, StackPattern };

std::string_view to_string(AllocationSource source);

struct AllocationRecord {
  Address base = 0;
  std::uint64_t size = 0;  // 0 when unknown
  AllocationSource source = AllocationSource::HeapHook;
  Address site_rip = 0;
  std::optional<Address> return_address;

  bool operator==(const AllocationRecord&) const = default;
};

struct CallRecord {
  std::string callee;
  InstrCategory category = InstrCategory::Call;
  std::uint64_t seq = 0;
  std::uint32_t thread_id = 0;
  Address site_rip = 0;
  std::array<std::uint64_t, 4> reg_params{};
  std::vector<std::uint64_t> stack_params;
  std::size_t param_count = 0;
  Address return_address = 0;
  // One flag per parameter (param_count entries).
  std::vector<bool> pointer_flags;

  /// Registers in use followed by stack parameters.
  std::vector<std::uint64_t> params() const;
};

/// Address ranges treated as valid memory when deciding whether a value is a
/// pointer: known allocations, the main module, and every page the trace
/// touched.
class KnownMemory {
 public:
  KnownMemory() = default;
  static KnownMemory from_log(const TraceLog& log, const std::vector<AllocationRecord>& allocations);

  void add_range(AddressRange range);
  void add_page_of(Address a);
  bool contains(Address a) const;

 private:
  std::vector<AddressRange> ranges_;
  std::set<std::uint64_t> pages_;
};

std::vector<AllocationRecord> find_allocations(const TraceLog& log,
                                               const std::set<std::string>& allocator_names);
std::vector<AllocationRecord> find_allocations(const TraceLog& log);

/// `call_event` must be a call or api-call event of `log`. Stack parameters
/// are the writes to [SP+0x20], [SP+0x28], ... made since the previous call
/// or return in the same thread, where SP is the value before the return
/// address push.
CallRecord recover_call(const TraceLog& log, const AccessEvent& call_event,
                        const KnownMemory& known);
CallRecord recover_call(const TraceLog& log, const AccessEvent& call_event);

/// Every call, api-call and syscall in seq order.
std::vector<CallRecord> recover_calls(const TraceLog& log, const KnownMemory& known);
std::vector<CallRecord> recover_calls(const TraceLog& log);

std::vector<AllocationRecord> find_stack_buffers(const TraceLog& log);

/// Heap hooks, pointer-valued call parameters and stack patterns merged by
/// base. Ties keep heap-hook, then stack-pattern, then call-param. Sorted by
/// base.
std::vector<AllocationRecord> collect_bases(const TraceLog& log);

}  // namespace memtrace::recon
