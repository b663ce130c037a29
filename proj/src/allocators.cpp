#include "memtrace/allocators.hpp"

#include <algorithm>
#include <array>

namespace memtrace {

namespace {

using enum AllocatorScope;

// NtAllocateVirtualMemory and friends receive the size through a pointer; the
// simulator passes the value itself in that slot.
constexpr std::array<AllocatorInfo, 21> kAllocators = {{
    {"malloc", User, 0, std::nullopt, false},
    {"calloc", User, 1, 0, false},
    {"realloc", User, 1, std::nullopt, false},
    {"LocalAlloc", User, 1, std::nullopt, false},
    {"GlobalAlloc", User, 1, std::nullopt, false},
    {"VirtualAlloc", User, 1, std::nullopt, true},
    {"CreateFileMapping", User, 4, std::nullopt, true},
    {"MapViewOfFile", User, 4, std::nullopt, true},
    {"HeapAlloc", User, 2, std::nullopt, false},
    {"CoTaskMemAlloc", User, 0, std::nullopt, false},
    {"NtAllocateVirtualMemory", Both, 3, std::nullopt, true},
    {"NtAllocateVirtualMemoryEx", Both, 2, std::nullopt, true},
    {"ExAllocatePool", Kernel, 1, std::nullopt, false},
    {"ExAllocatePoolWithTag", Kernel, 1, std::nullopt, false},
    {"ExAllocatePoolWithQuota", Kernel, 1, std::nullopt, false},
    {"MmAllocateContiguousMemory", Kernel, 0, std::nullopt, true},
    {"MmAllocateNonCachedMemory", Kernel, 0, std::nullopt, true},
    {"MmAllocatePagesForMdl", Kernel, 3, std::nullopt, true},
    {"MmAllocatePagesForMdlEx", Kernel, 3, std::nullopt, true},
    {"MmAllocateSystemMemory", Kernel, std::nullopt, std::nullopt, true},
    {"MmAllocateContiguousNodeMemory", Kernel, 0, std::nullopt, true},
}};

}  // namespace

std::span<const AllocatorInfo> allocator_table() { return kAllocators; }

const AllocatorInfo* find_allocator(std::string_view name) {
  auto it = std::find_if(kAllocators.begin(), kAllocators.end(),
                         [&](const AllocatorInfo& info) { return info.name == name; });
  return it == kAllocators.end() ? nullptr : &*it;
}

std::set<std::string> default_allocator_names() {
  std::set<std::string> names;
  for (const auto& info : kAllocators) names.emplace(info.name);
  return names;
}

std::optional<std::uint64_t> allocation_size(const AllocatorInfo& info,
                                             std::span<const std::uint64_t> params) {
  if (!info.size_param || *info.size_param >= params.size()) return std::nullopt;
  std::uint64_t size = params[*info.size_param];
  if (info.count_param) {
    if (*info.count_param >= params.size()) return std::nullopt;
    size *= params[*info.count_param];
  }
  return size;
}

}  // namespace memtrace
