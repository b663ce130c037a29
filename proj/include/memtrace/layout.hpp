#pragma once

// Field layout reconstruction for one allocation.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "memtrace/recon.hpp"
#include "memtrace/trace.hpp"

namespace memtrace::recon {

inline constexpr std::uint64_t kDefaultLayoutWindow = 0x1000;
// Shortest run of adjacent single-byte fields folded into a char array.
inline constexpr std::size_t kMinByteRun = 3;

enum class FieldCategory : std::uint8_t {
  Char,
  UnsignedChar,
  Short,
  UnsignedShort,
  Int,
  UnsignedInt,
  LongLong,
  UnsignedLongLong,
  Float,
  Double,
  Pointer,
  CharArray,
};

/// C spelling of the element type ("unsigned short", "void*", "char" for arrays).
std::string_view c_type_name(FieldCategory category);
/// Stable identifier used in reports ("unsigned-short", "pointer", "char-array").
std::string_view to_string(FieldCategory category);
FieldCategory parse_field_category(std::string_view text);

struct FieldAccess {
  std::uint32_t size = 0;
  InstrCategory category = InstrCategory::IntMove;
  Signedness signedness = Signedness::NotApplicable;
  std::optional<std::uint64_t> value;
};

struct FieldRecord {
  std::uint64_t offset = 0;
  std::uint64_t size = 0;
  FieldCategory category = FieldCategory::CharArray;
  std::size_t evidence = 0;  // accesses backing this field
  std::vector<std::string> notes;

  std::uint64_t end() const { return offset + size; }
};

struct LayoutRecord {
  Address base = 0;
  std::uint64_t total_size = 0;
  std::vector<FieldRecord> fields;
  std::vector<std::string> warnings;
};

struct FieldType {
  FieldCategory category = FieldCategory::Char;
  std::uint32_t size = 1;
  std::vector<std::string> notes;
};

/// Type of the field at one offset. The widest access decides the size;
/// float moves make it float/double, an unsigned access with no signed one
/// makes it unsigned, and an 8-byte integer value inside known memory makes
/// it a pointer. `accesses` must not be empty.
FieldType infer_field_type(std::span<const FieldAccess> accesses, const KnownMemory& known);

/// Two passes over the accesses inside [base, base + size). The first groups
/// them by offset, the second assigns types, folds byte runs into arrays,
/// resolves overlaps and fills untouched gaps. The layout always spans the
/// whole window, which is `size` or kDefaultLayoutWindow.
LayoutRecord reconstruct_layout(const TraceLog& log, Address base,
                                std::optional<std::uint64_t> size, const KnownMemory& known);
LayoutRecord reconstruct_layout(const TraceLog& log, Address base,
                                std::optional<std::uint64_t> size = std::nullopt);

/// C struct declaration with one member per field.
std::string render_c(const LayoutRecord& layout, std::string_view name = {});

/// Report document: base, total_size, fields[{offset, size, category,
/// evidence, notes}], warnings and the C rendering.
std::string layout_to_json(const LayoutRecord& layout);
LayoutRecord layout_from_json(std::string_view text);

}  // namespace memtrace::recon
