#include "memtrace/guest.hpp"

#include <algorithm>

#include <fmt/format.h>

namespace memtrace::sim {

bool is_canonical(Address a) {
  const std::uint64_t upper = a >> 47;
  return upper == 0 || upper == 0x1ffff;
}

std::string_view to_string(EptProfileId id) {
  switch (id) {
    case EptProfileId::Normal: return "normal";
    case EptProfileId::UserExecDenied: return "user-exec-denied";
    case EptProfileId::KernelExecDenied: return "kernel-exec-denied";
    case EptProfileId::ExecuteOnly: return "execute-only";
  }
  return "?";
}

EptProfileId parse_profile(std::string_view name) {
  for (auto id : kAllProfiles)
    if (to_string(id) == name) return id;
  throw std::invalid_argument(fmt::format("unknown EPT profile '{}'", name));
}

Guest::Guest() {
  for (std::size_t i = 0; i < profiles_.size(); ++i) profiles_[i].id = kAllProfiles[i];
}

void Guest::map_region(AddressRange range, bool present) {
  if (range.empty()) return;
  mapped_.push_back(range);
  if (!present) return;
  for (auto p = page_of(range.lo); p <= page_of(range.hi - 1); ++p) pages_.try_emplace(p);
}

bool Guest::is_mapped(Address a) const {
  return std::any_of(mapped_.begin(), mapped_.end(),
                     [a](const AddressRange& r) { return r.contains(a); });
}

bool Guest::is_present(Address a) const { return pages_.contains(page_of(a)); }

std::vector<std::uint64_t> Guest::present_pages() const {
  std::vector<std::uint64_t> out;
  out.reserve(pages_.size());
  for (const auto& [page, _] : pages_) out.push_back(page);
  return out;
}

bool Guest::demand_page(Address a) {
  if (is_present(a)) return true;
  if (!is_mapped(a)) return false;
  pages_.try_emplace(page_of(a));
  return true;
}

const Guest::Page* Guest::find_page(Address a) const {
  auto it = pages_.find(page_of(a));
  return it == pages_.end() ? nullptr : &it->second;
}

Guest::Page& Guest::present_page(Address a) {
  auto it = pages_.find(page_of(a));
  if (it == pages_.end())
    throw std::out_of_range(fmt::format("page {:#x} is not present", page_base(page_of(a))));
  return it->second;
}

std::optional<PagePerms> Guest::effective_perms(Address a) const {
  const Page* page = find_page(a);
  if (!page) return std::nullopt;

  const EptProfile& prof = profiles_[static_cast<std::size_t>(active_)];
  PagePerms perms = page->perms;
  if (auto ov = prof.overrides.find(page_of(a)); ov != prof.overrides.end()) {
    perms = ov->second;
    perms.hidden_hook = perms.hidden_hook || page->perms.hidden_hook;
  } else {
    switch (active_) {
      case EptProfileId::Normal: break;
      case EptProfileId::UserExecDenied: perms.exec_user = false; break;
      case EptProfileId::KernelExecDenied: perms.exec_kernel = false; break;
      case EptProfileId::ExecuteOnly:
        perms.read = false;
        perms.write = false;
        break;
    }
  }
  // Execute-only: a writable but unreadable EPT entry is not a valid encoding.
  if (perms.hidden_hook) {
    perms.read = false;
    perms.write = false;
  }
  perms.present = true;
  return perms;
}

AccessVerdict Guest::check_access(Address a, AccessKind kind, Cpl cpl) const {
  auto perms = effective_perms(a);
  if (!perms) return AccessVerdict::PageFault;
  bool allowed = false;
  switch (kind) {
    case AccessKind::Read: allowed = perms->read; break;
    case AccessKind::Write: allowed = perms->write; break;
    case AccessKind::Execute:
      allowed = cpl == Cpl::User ? perms->exec_user : perms->exec_kernel;
      break;
  }
  return allowed ? AccessVerdict::Allowed : AccessVerdict::Violation;
}

void Guest::switch_profile(EptProfileId id) {
  if (static_cast<std::size_t>(id) >= profiles_.size())
    throw std::invalid_argument("switch_profile: unknown profile id");
  active_ = id;
}

const EptProfile& Guest::profile(EptProfileId id) const {
  return profiles_.at(static_cast<std::size_t>(id));
}

void Guest::set_override(EptProfileId id, std::uint64_t page, const PagePerms& perms) {
  profiles_.at(static_cast<std::size_t>(id)).overrides[page] = perms;
}

void Guest::clear_override(EptProfileId id, std::uint64_t page) {
  profiles_.at(static_cast<std::size_t>(id)).overrides.erase(page);
}

void Guest::install_hidden_hook(Address a, std::span<const std::uint8_t> hooked_bytes) {
  for (std::size_t i = 0; i < hooked_bytes.size(); ++i) {
    const Address at = a + i;
    auto it = pages_.find(page_of(at));
    if (it == pages_.end())
      throw std::invalid_argument(
          fmt::format("install_hidden_hook: page of {:#x} is not present", at));
    it->second.hooked[static_cast<std::uint16_t>(at % kPageSize)] = hooked_bytes[i];
    it->second.perms.hidden_hook = true;
  }
}

void Guest::remove_hidden_hooks(std::uint64_t page) {
  auto it = pages_.find(page);
  if (it == pages_.end()) return;
  it->second.hooked.clear();
  it->second.perms.hidden_hook = false;
}

bool Guest::is_hooked(Address a) const {
  const Page* page = find_page(a);
  return page && page->hooked.contains(static_cast<std::uint16_t>(a % kPageSize));
}

InjectOutcome Guest::inject_page_fault(Address a) {
  pending_fault = a;
  auto [it, inserted] = pages_.try_emplace(page_of(a));
  if (inserted && !is_mapped(a))
    mapped_.push_back({page_base(page_of(a)), page_base(page_of(a)) + kPageSize});
  return inserted ? InjectOutcome::Injected : InjectOutcome::AlreadyPresent;
}

std::vector<std::uint8_t> Guest::read_bytes(Address a, std::size_t n) const {
  std::vector<std::uint8_t> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (const Page* page = find_page(a + i)) out[i] = page->pristine[(a + i) % kPageSize];
  }
  return out;
}

std::vector<std::uint8_t> Guest::fetch_bytes(Address a, std::size_t n) const {
  std::vector<std::uint8_t> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const Page* page = find_page(a + i);
    if (!page) continue;
    const auto off = static_cast<std::uint16_t>((a + i) % kPageSize);
    auto hook = page->hooked.find(off);
    out[i] = hook != page->hooked.end() ? hook->second : page->pristine[off];
  }
  return out;
}

void Guest::write_bytes(Address a, std::span<const std::uint8_t> bytes) {
  for (std::size_t i = 0; i < bytes.size(); ++i)
    present_page(a + i).pristine[(a + i) % kPageSize] = bytes[i];
}

std::uint64_t Guest::read_value(Address a, std::uint32_t size) const {
  auto bytes = read_bytes(a, std::min<std::uint32_t>(size, 8));
  std::uint64_t value = 0;
  for (std::size_t i = bytes.size(); i-- > 0;) value = (value << 8) | bytes[i];
  return value;
}

void Guest::write_value(Address a, std::uint32_t size, std::uint64_t value) {
  std::vector<std::uint8_t> bytes(size, 0);
  for (std::uint32_t i = 0; i < size && i < 8; ++i) bytes[i] = (value >> (8 * i)) & 0xff;
  write_bytes(a, bytes);
}

}  // namespace memtrace::sim
