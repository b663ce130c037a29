#pragma once

// Simulated guest memory behind an EPT-style permission layer.
//
// Guest-physical equals host-physical here, so the only thing the second
// level translation contributes is permissions. Four EPT pointers are kept
// alive at once and exactly one of them is active:
//
//   normal              everything allowed except per-page overrides
//   user-exec-denied    instruction fetch at CPL 3 traps
//   kernel-exec-denied  instruction fetch at CPL 0 traps
//   execute-only        every data read and write traps
//
// A per-page override replaces the profile mask for that page. Hidden hooks
// make a page execute-only: fetches see the hooked bytes, reads are served
// from the pristine copy.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "memtrace/trace.hpp"

namespace memtrace::sim {

inline constexpr std::uint64_t kPageSize = 4096;

inline std::uint64_t page_of(Address a) { return a / kPageSize; }
inline Address page_base(std::uint64_t page) { return page * kPageSize; }

/// Bits 63..47 all equal.
bool is_canonical(Address a);

enum class EptProfileId : std::uint8_t { Normal, UserExecDenied, KernelExecDenied, ExecuteOnly };

inline constexpr std::array<EptProfileId, 4> kAllProfiles = {
    EptProfileId::Normal, EptProfileId::UserExecDenied, EptProfileId::KernelExecDenied,
    EptProfileId::ExecuteOnly};

std::string_view to_string(EptProfileId id);
/// Throws std::invalid_argument for unknown names.
EptProfileId parse_profile(std::string_view name);

struct PagePerms {
  bool read = true;
  bool write = true;
  bool exec_user = true;
  bool exec_kernel = true;
  bool present = true;
  bool hidden_hook = false;

  bool operator==(const PagePerms&) const = default;
};

struct EptProfile {
  EptProfileId id = EptProfileId::Normal;
  std::map<std::uint64_t, PagePerms> overrides;
};

enum class AccessVerdict : std::uint8_t { Allowed, Violation, PageFault };

enum class InjectOutcome : std::uint8_t { Injected, AlreadyPresent };

class Guest {
 public:
  Guest();

  /// Reserves [lo, hi) as allocatable. Pages become present now or on first
  /// touch (demand-zero).
  void map_region(AddressRange range, bool present);
  bool is_mapped(Address a) const;
  bool is_present(Address a) const;
  std::size_t present_page_count() const { return pages_.size(); }
  std::vector<std::uint64_t> present_pages() const;

  /// Guest OS demand paging: materialises a zero page inside a mapped region.
  /// Returns false when the address is outside every mapped region.
  bool demand_page(Address a);

  AccessVerdict check_access(Address a, AccessKind kind, Cpl cpl) const;
  /// Permissions the active profile grants on the page, after overrides and
  /// hooks; nullopt for a not-present page.
  std::optional<PagePerms> effective_perms(Address a) const;

  EptProfileId active_profile() const { return active_; }
  void switch_profile(EptProfileId id);
  const EptProfile& profile(EptProfileId id) const;
  void set_override(EptProfileId id, std::uint64_t page, const PagePerms& perms);
  void clear_override(EptProfileId id, std::uint64_t page);

  void install_hidden_hook(Address a, std::span<const std::uint8_t> hooked_bytes);
  void remove_hidden_hooks(std::uint64_t page);
  bool is_hooked(Address a) const;

  InjectOutcome inject_page_fault(Address a);

  /// Bytes a data read observes (pristine bytes on hooked pages).
  std::vector<std::uint8_t> read_bytes(Address a, std::size_t n) const;
  /// Bytes an instruction fetch observes (hooked bytes win).
  std::vector<std::uint8_t> fetch_bytes(Address a, std::size_t n) const;
  void write_bytes(Address a, std::span<const std::uint8_t> bytes);

  std::uint64_t read_value(Address a, std::uint32_t size) const;
  void write_value(Address a, std::uint32_t size, std::uint64_t value);

  Cpl mode() const { return mode_; }
  void set_mode(Cpl cpl) { mode_ = cpl; }

  std::optional<Address> pending_fault;

 private:
  struct Page {
    PagePerms perms;
    std::vector<std::uint8_t> pristine = std::vector<std::uint8_t>(kPageSize, 0);
    std::map<std::uint16_t, std::uint8_t> hooked;
  };

  const Page* find_page(Address a) const;
  Page& present_page(Address a);

  std::map<std::uint64_t, Page> pages_;
  std::vector<AddressRange> mapped_;
  std::array<EptProfile, 4> profiles_;
  EptProfileId active_ = EptProfileId::Normal;
  Cpl mode_ = Cpl::User;
};

}  // namespace memtrace::sim
