#include "memtrace/layout.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

#include <fmt/format.h>
#include <json.hpp>

namespace memtrace::recon {

namespace {

constexpr const char* kAmbiguousRunNote =
    "ambiguous: adjacent byte accesses may belong to more than one array";
constexpr const char* kUntouchedNote = "untouched";

struct CategoryName {
  FieldCategory category;
  std::string_view id;
  std::string_view c_name;
};

constexpr CategoryName kCategoryNames[] = {
    {FieldCategory::Char, "char", "char"},
    {FieldCategory::UnsignedChar, "unsigned-char", "unsigned char"},
    {FieldCategory::Short, "short", "short"},
    {FieldCategory::UnsignedShort, "unsigned-short", "unsigned short"},
    {FieldCategory::Int, "int", "int"},
    {FieldCategory::UnsignedInt, "unsigned-int", "unsigned int"},
    {FieldCategory::LongLong, "long-long", "long long"},
    {FieldCategory::UnsignedLongLong, "unsigned-long-long", "unsigned long long"},
    {FieldCategory::Float, "float", "float"},
    {FieldCategory::Double, "double", "double"},
    {FieldCategory::Pointer, "pointer", "void*"},
    {FieldCategory::CharArray, "char-array", "char"},
};

bool is_layout_access(const AccessEvent& ev) {
  if (ev.tag != EventTag::None || ev.kind == AccessKind::Execute) return false;
  switch (ev.instr.category) {
    case InstrCategory::IntMove:
    case InstrCategory::FloatMove:
    case InstrCategory::Other:
      break;
    default:
      return false;
  }
  return ev.operand_size == 1 || ev.operand_size == 2 || ev.operand_size == 4 ||
         ev.operand_size == 8;
}

bool is_byte_scalar(const FieldRecord& f) {
  return f.size == 1 &&
         (f.category == FieldCategory::Char || f.category == FieldCategory::UnsignedChar);
}

std::vector<FieldRecord> resolve_overlaps(std::vector<FieldRecord> candidates) {
  std::vector<FieldRecord> out;
  for (auto& cand : candidates) {
    if (out.empty() || cand.offset >= out.back().end()) {
      out.push_back(std::move(cand));
      continue;
    }
    FieldRecord& last = out.back();
    last.evidence += cand.evidence;
    if (cand.end() <= last.end()) {
      last.notes.push_back(
          fmt::format("overlapping {}-byte access at +{:#x}", cand.size, cand.offset));
    } else {
      last.notes.push_back(fmt::format("overlapping accesses at +{:#x} and +{:#x}; merged",
                                       last.offset, cand.offset));
      last.size = cand.end() - last.offset;
      last.category = FieldCategory::CharArray;
    }
  }
  return out;
}

std::vector<FieldRecord> fold_byte_runs(std::vector<FieldRecord> fields) {
  std::vector<FieldRecord> out;
  for (std::size_t i = 0; i < fields.size();) {
    std::size_t j = i + 1;
    if (is_byte_scalar(fields[i]))
      while (j < fields.size() && is_byte_scalar(fields[j]) &&
             fields[j].offset == fields[j - 1].end())
        ++j;
    if (j - i >= kMinByteRun) {
      FieldRecord run{fields[i].offset, j - i, FieldCategory::CharArray, 0, {}};
      for (std::size_t k = i; k < j; ++k) run.evidence += fields[k].evidence;
      run.notes.emplace_back(kAmbiguousRunNote);
      out.push_back(std::move(run));
      i = j;
    } else {
      out.push_back(std::move(fields[i]));
      ++i;
    }
  }
  return out;
}

std::vector<FieldRecord> fill_gaps(std::vector<FieldRecord> fields, std::uint64_t total) {
  std::vector<FieldRecord> out;
  std::uint64_t cursor = 0;
  auto gap = [&](std::uint64_t upto) {
    if (upto > cursor)
      out.push_back({cursor, upto - cursor, FieldCategory::CharArray, 0, {kUntouchedNote}});
  };
  for (auto& f : fields) {
    gap(f.offset);
    cursor = f.end();
    out.push_back(std::move(f));
  }
  gap(total);
  return out;
}

}  // namespace

std::string_view c_type_name(FieldCategory category) {
  for (const auto& n : kCategoryNames)
    if (n.category == category) return n.c_name;
  return "char";
}

std::string_view to_string(FieldCategory category) {
  for (const auto& n : kCategoryNames)
    if (n.category == category) return n.id;
  return "char-array";
}

FieldCategory parse_field_category(std::string_view text) {
  for (const auto& n : kCategoryNames)
    if (n.id == text) return n.category;
  throw std::invalid_argument(fmt::format("unknown field category '{}'", text));
}

FieldType infer_field_type(std::span<const FieldAccess> accesses, const KnownMemory& known) {
  if (accesses.empty()) throw std::invalid_argument("infer_field_type: no accesses");

  FieldType out;
  std::uint32_t max_size = 0;
  std::vector<std::uint32_t> sizes;
  for (const auto& a : accesses) {
    max_size = std::max(max_size, a.size);
    if (std::find(sizes.begin(), sizes.end(), a.size) == sizes.end()) sizes.push_back(a.size);
  }
  out.size = max_size;
  if (sizes.size() > 1) {
    std::sort(sizes.begin(), sizes.end());
    std::string list;
    for (auto s : sizes) list += (list.empty() ? "" : ",") + std::to_string(s);
    out.notes.push_back(fmt::format("conflicting access sizes {{{}}}; using {}", list, max_size));
  }

  bool is_float = false, any_signed = false, any_unsigned = false, is_pointer = false;
  for (const auto& a : accesses) {
    if (a.size != max_size) continue;
    is_float |= a.category == InstrCategory::FloatMove;
    any_signed |= a.signedness == Signedness::Signed;
    any_unsigned |= a.signedness == Signedness::Unsigned;
    is_pointer |= a.category != InstrCategory::FloatMove && a.value && known.contains(*a.value);
  }
  const bool is_unsigned = any_unsigned && !any_signed;

  switch (max_size) {
    case 1:
      out.category = is_unsigned ? FieldCategory::UnsignedChar : FieldCategory::Char;
      break;
    case 2:
      out.category = is_unsigned ? FieldCategory::UnsignedShort : FieldCategory::Short;
      break;
    case 4:
      out.category = is_float      ? FieldCategory::Float
                     : is_unsigned ? FieldCategory::UnsignedInt
                                   : FieldCategory::Int;
      break;
    case 8:
      out.category = is_float      ? FieldCategory::Double
                     : is_pointer  ? FieldCategory::Pointer
                     : is_unsigned ? FieldCategory::UnsignedLongLong
                                   : FieldCategory::LongLong;
      break;
    default:
      out.category = FieldCategory::CharArray;
      out.notes.push_back(fmt::format("unsupported access size {}", max_size));
      break;
  }
  return out;
}

LayoutRecord reconstruct_layout(const TraceLog& log, Address base,
                                std::optional<std::uint64_t> size, const KnownMemory& known) {
  const std::uint64_t window = size.value_or(kDefaultLayoutWindow);
  LayoutRecord layout;
  layout.base = base;
  layout.total_size = window;

  // Phase 1: group accesses by offset.
  std::map<std::uint64_t, std::vector<FieldAccess>> by_offset;
  std::size_t straddling = 0;
  for (const auto& ev : log.events) {
    if (!is_layout_access(ev)) continue;
    if (!log.module_range.empty() && !log.module_range.contains(ev.rip)) continue;
    if (ev.address < base || ev.address - base >= window) continue;
    const std::uint64_t offset = ev.address - base;
    if (offset + ev.operand_size > window) {
      ++straddling;
      continue;
    }
    by_offset[offset].push_back(
        {ev.operand_size, ev.instr.category, ev.instr.signedness, ev.value});
  }
  if (straddling > 0)
    layout.warnings.push_back(
        fmt::format("{} access(es) crossing the end of the window ignored", straddling));

  if (by_offset.empty()) {
    layout.warnings.push_back(fmt::format("no accesses in [{:#x}, {:#x})", base, base + window));
    if (window > 0)
      layout.fields.push_back({0, window, FieldCategory::CharArray, 0, {kUntouchedNote}});
    return layout;
  }

  // Phase 2: type each offset, then normalize into a tiling of the window.
  std::vector<FieldRecord> candidates;
  for (const auto& [offset, accesses] : by_offset) {
    FieldType t = infer_field_type(accesses, known);
    candidates.push_back({offset, t.size, t.category, accesses.size(), std::move(t.notes)});
  }
  layout.fields = fill_gaps(fold_byte_runs(resolve_overlaps(std::move(candidates))), window);
  return layout;
}

LayoutRecord reconstruct_layout(const TraceLog& log, Address base,
                                std::optional<std::uint64_t> size) {
  auto allocations = find_allocations(log);
  const auto stack = find_stack_buffers(log);
  allocations.insert(allocations.end(), stack.begin(), stack.end());
  return reconstruct_layout(log, base, size, KnownMemory::from_log(log, allocations));
}

std::string render_c(const LayoutRecord& layout, std::string_view name) {
  std::string out = fmt::format("struct {} {{  // base {:#x}, size {:#x}\n",
                                name.empty() ? fmt::format("layout_{:x}", layout.base)
                                             : std::string(name),
                                layout.base, layout.total_size);
  for (const auto& f : layout.fields) {
    std::string decl;
    if (f.category == FieldCategory::CharArray) {
      const bool gap = f.evidence == 0;
      decl = fmt::format("char {}_{:x}[{}];", gap ? "pad" : "bytes", f.offset, f.size);
    } else {
      decl = fmt::format("{} field_{:x};", c_type_name(f.category), f.offset);
    }
    std::string comment = fmt::format("+{:#x}", f.offset);
    for (const auto& note : f.notes) comment += "; " + note;
    out += fmt::format("  {:<36} // {}\n", decl, comment);
  }
  out += "};\n";
  return out;
}

std::string layout_to_json(const LayoutRecord& layout) {
  nlohmann::ordered_json doc;
  doc["base"] = format_hex(layout.base);
  doc["total_size"] = layout.total_size;
  auto& fields = doc["fields"] = nlohmann::ordered_json::array();
  for (const auto& f : layout.fields) {
    nlohmann::ordered_json jf;
    jf["offset"] = f.offset;
    jf["size"] = f.size;
    jf["category"] = std::string(to_string(f.category));
    jf["evidence"] = f.evidence;
    jf["notes"] = f.notes;
    fields.push_back(std::move(jf));
  }
  doc["warnings"] = layout.warnings;
  doc["c_decl"] = render_c(layout);
  return doc.dump(2) + "\n";
}

LayoutRecord layout_from_json(std::string_view text) {
  try {
    const auto doc = nlohmann::json::parse(text);
    LayoutRecord layout;
    const auto base = parse_u64(doc.at("base").get<std::string>());
    if (!base) throw std::invalid_argument("layout report: bad base");
    layout.base = *base;
    layout.total_size = doc.at("total_size").get<std::uint64_t>();
    for (const auto& jf : doc.at("fields")) {
      layout.fields.push_back({jf.at("offset").get<std::uint64_t>(),
                               jf.at("size").get<std::uint64_t>(),
                               parse_field_category(jf.at("category").get<std::string>()),
                               jf.at("evidence").get<std::size_t>(),
                               jf.value("notes", std::vector<std::string>{})});
    }
    layout.warnings = doc.value("warnings", std::vector<std::string>{});
    return layout;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("layout report: ") + e.what());
  }
}

}  // namespace memtrace::recon
