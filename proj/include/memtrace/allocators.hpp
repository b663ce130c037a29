#pragma once

// Known memory allocation routines (user and kernel mode) and where each one
// takes its requested size.

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace memtrace {

enum class AllocatorScope : std::uint8_t { User, Kernel, Both };

struct AllocatorInfo {
  std::string_view name;
  AllocatorScope scope;
  // Zero-based parameter index holding the byte count; nullopt when the
  // size cannot be read off a single parameter.
  std::optional<std::size_t> size_param;
  // calloc-style: size = param[size_param] * param[count_param].
  std::optional<std::size_t> count_param;
  // Returns page-granular memory.
  bool page_aligned;
};

std::span<const AllocatorInfo> allocator_table();
const AllocatorInfo* find_allocator(std::string_view name);
std::set<std::string> default_allocator_names();

/// Requested byte count of an allocator call given its full parameter list
/// (registers followed by stack slots); nullopt when it cannot be read.
std::optional<std::uint64_t> allocation_size(const AllocatorInfo& info,
                                             std::span<const std::uint64_t> params);

}  // namespace memtrace
