#include "memtrace/trace.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

namespace memtrace {

using ojson = nlohmann::ordered_json;

TraceParseError::TraceParseError(std::size_t line, const std::string& what)
    : std::runtime_error(fmt::format("line {}: {}", line, what)), line_(line) {}

TraceOrderError::TraceOrderError(std::size_t line, std::uint64_t previous, std::uint64_t seq)
    : std::runtime_error(
          fmt::format("line {}: seq {} does not follow seq {}", line, seq, previous)),
      line_(line) {}

namespace {

constexpr std::pair<InstrCategory, std::string_view> kCategoryNames[] = {
    {InstrCategory::IntMove, "int-move"},
    {InstrCategory::FloatMove, "float-move"},
    {InstrCategory::XmmZeroStore, "xmm-zero-store"},
    {InstrCategory::Push, "push"},
    {InstrCategory::Call, "call"},
    {InstrCategory::Ret, "ret"},
    {InstrCategory::SubSp, "sub-sp"},
    {InstrCategory::Syscall, "syscall"},
    {InstrCategory::ApiCall, "api-call"},
    {InstrCategory::Other, "other"},
};

constexpr std::pair<EventTag, std::string_view> kTagNames[] = {
    {EventTag::None, ""},
    {EventTag::PageFault, "pf"},
    {EventTag::Entry, "entry"},
    {EventTag::Transition, "mode"},
    {EventTag::HookRead, "hook"},
};

template <typename E, std::size_t N>
std::optional<E> lookup(const std::pair<E, std::string_view> (&table)[N], std::string_view text) {
  for (const auto& [value, name] : table)
    if (name == text) return value;
  return std::nullopt;
}

template <typename E, std::size_t N>
std::string_view name_of(const std::pair<E, std::string_view> (&table)[N], E value) {
  for (const auto& [v, name] : table)
    if (v == value) return name;
  return "?";
}

std::uint64_t json_u64(const ojson& j, std::string_view key, std::size_t line) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (j.is_number_integer() && j.get<std::int64_t>() >= 0) return j.get<std::uint64_t>();
  if (j.is_string()) {
    if (auto v = parse_u64(j.get_ref<const std::string&>())) return *v;
  }
  throw TraceParseError(line, fmt::format("key '{}' is not an unsigned integer", key));
}

const ojson& require(const ojson& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) throw TraceParseError(line, fmt::format("missing key '{}'", key));
  return *it;
}

std::string require_string(const ojson& obj, const char* key, std::size_t line) {
  const auto& v = require(obj, key, line);
  if (!v.is_string()) throw TraceParseError(line, fmt::format("key '{}' must be a string", key));
  return v.get<std::string>();
}

AccessEvent event_from_json(const ojson& j, std::size_t line) {
  AccessEvent ev;
  ev.seq = json_u64(require(j, "seq", line), "seq", line);
  auto tid = json_u64(require(j, "tid", line), "tid", line);
  if (tid > UINT32_MAX) throw TraceParseError(line, "tid out of range");
  ev.thread_id = static_cast<std::uint32_t>(tid);

  auto cpl = parse_cpl(require_string(j, "cpl", line));
  if (!cpl) throw TraceParseError(line, "cpl must be \"u\" or \"k\"");
  ev.cpl = *cpl;
  auto kind = parse_access_kind(require_string(j, "kind", line));
  if (!kind) throw TraceParseError(line, "kind must be \"r\", \"w\" or \"x\"");
  ev.kind = *kind;
  ev.address = json_u64(require(j, "addr", line), "addr", line);
  auto size = json_u64(require(j, "size", line), "size", line);
  if (size > 16) throw TraceParseError(line, "size out of range");
  ev.operand_size = static_cast<std::uint32_t>(size);
  ev.rip = json_u64(require(j, "rip", line), "rip", line);

  const auto& instr = require(j, "instr", line);
  if (!instr.is_object()) throw TraceParseError(line, "instr must be an object");
  auto cat = parse_instr_category(require_string(instr, "cat", line));
  if (!cat) throw TraceParseError(line, "unknown instr category");
  ev.instr.category = *cat;
  if (instr.contains("sign")) {
    auto sign = parse_signedness(require_string(instr, "sign", line));
    if (!sign) throw TraceParseError(line, "unknown signedness");
    ev.instr.signedness = *sign;
  }
  if (instr.contains("callee")) ev.instr.callee = require_string(instr, "callee", line);
  if (instr.contains("args")) {
    const auto& args = instr.at("args");
    if (!args.is_array() || args.size() > 4)
      throw TraceParseError(line, "args must be an array of at most 4 values");
    std::vector<std::uint64_t> values;
    for (const auto& a : args) values.push_back(json_u64(a, "args", line));
    ev.instr.register_args = std::move(values);
  }
  if (j.contains("val")) ev.value = json_u64(j.at("val"), "val", line);
  if (j.contains("tag")) {
    auto tag = parse_event_tag(require_string(j, "tag", line));
    if (!tag || *tag == EventTag::None) throw TraceParseError(line, "unknown tag");
    ev.tag = *tag;
  }
  if (auto problem = validate_event(ev)) throw TraceParseError(line, *problem);
  return ev;
}

ojson event_to_json(const AccessEvent& ev) {
  ojson j;
  j["seq"] = ev.seq;
  j["tid"] = ev.thread_id;
  j["cpl"] = to_string(ev.cpl);
  j["kind"] = to_string(ev.kind);
  j["addr"] = format_hex(ev.address);
  j["size"] = ev.operand_size;
  j["rip"] = format_hex(ev.rip);
  ojson instr;
  instr["cat"] = to_string(ev.instr.category);
  instr["sign"] = to_string(ev.instr.signedness);
  if (ev.instr.callee) instr["callee"] = *ev.instr.callee;
  if (ev.instr.register_args) {
    ojson args = ojson::array();
    for (auto a : *ev.instr.register_args) args.push_back(format_hex(a));
    instr["args"] = std::move(args);
  }
  j["instr"] = std::move(instr);
  if (ev.value) j["val"] = format_hex(*ev.value);
  if (ev.tag != EventTag::None) j["tag"] = to_string(ev.tag);
  return j;
}

}  // namespace

std::string_view to_string(Cpl cpl) { return cpl == Cpl::User ? "u" : "k"; }

std::string_view to_string(AccessKind kind) {
  switch (kind) {
    case AccessKind::Read: return "r";
    case AccessKind::Write: return "w";
    case AccessKind::Execute: return "x";
  }
  return "?";
}

std::string_view to_string(InstrCategory category) { return name_of(kCategoryNames, category); }

std::string_view to_string(Signedness signedness) {
  switch (signedness) {
    case Signedness::Signed: return "signed";
    case Signedness::Unsigned: return "unsigned";
    case Signedness::NotApplicable: return "n/a";
  }
  return "?";
}

std::string_view to_string(EventTag tag) { return name_of(kTagNames, tag); }

std::optional<Cpl> parse_cpl(std::string_view text) {
  if (text == "u") return Cpl::User;
  if (text == "k") return Cpl::Kernel;
  return std::nullopt;
}

std::optional<AccessKind> parse_access_kind(std::string_view text) {
  if (text == "r") return AccessKind::Read;
  if (text == "w") return AccessKind::Write;
  if (text == "x") return AccessKind::Execute;
  return std::nullopt;
}

std::optional<InstrCategory> parse_instr_category(std::string_view text) {
  return lookup(kCategoryNames, text);
}

std::optional<Signedness> parse_signedness(std::string_view text) {
  if (text == "signed") return Signedness::Signed;
  if (text == "unsigned") return Signedness::Unsigned;
  if (text == "n/a") return Signedness::NotApplicable;
  return std::nullopt;
}

std::optional<EventTag> parse_event_tag(std::string_view text) { return lookup(kTagNames, text); }

std::string format_hex(std::uint64_t value) { return fmt::format("{:#x}", value); }

std::optional<std::uint64_t> parse_u64(std::string_view text) {
  int radix = 10;
  if (text.size() > 2 && text[0] == '0' && (text[1] == 'x' || text[1] == 'X')) {
    text.remove_prefix(2);
    radix = 16;
  }
  if (text.empty()) return std::nullopt;
  std::uint64_t value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value, radix);
  if (ec != std::errc{} || ptr != text.data() + text.size()) return std::nullopt;
  return value;
}

bool is_call_like(InstrCategory category) {
  return category == InstrCategory::Call || category == InstrCategory::Syscall ||
         category == InstrCategory::ApiCall;
}

bool is_valid_operand_size(std::uint32_t size) {
  return size == 1 || size == 2 || size == 4 || size == 8 || size == 16;
}

std::optional<std::string> validate_event(const AccessEvent& ev) {
  const auto cat = ev.instr.category;
  if (!is_valid_operand_size(ev.operand_size))
    return fmt::format("operand size {} not in {{1,2,4,8,16}}", ev.operand_size);
  if (ev.kind == AccessKind::Execute && ev.operand_size != 1)
    return std::string("execute events must have operand size 1");
  if (cat == InstrCategory::FloatMove && ev.operand_size != 4 && ev.operand_size != 8)
    return std::string("float-move requires operand size 4 or 8");
  if (cat == InstrCategory::XmmZeroStore && ev.operand_size != 16)
    return std::string("xmm-zero-store requires operand size 16");
  if (ev.operand_size == 16 && cat != InstrCategory::XmmZeroStore)
    return std::string("operand size 16 is reserved for xmm-zero-store");
  if (ev.instr.callee.has_value() != is_call_like(cat))
    return std::string("callee must be present exactly for call, syscall and api-call");
  const bool wants_args = cat == InstrCategory::Call || cat == InstrCategory::ApiCall;
  if (ev.instr.register_args.has_value() != wants_args)
    return std::string("args must be present exactly for call and api-call");
  if (ev.instr.register_args && ev.instr.register_args->size() > 4)
    return std::string("at most 4 register args");
  return std::nullopt;
}

TraceLog parse_trace(std::istream& in) {
  TraceLog log;
  std::string line;
  std::size_t line_no = 0;
  bool first = true;
  std::optional<std::uint64_t> last_seq;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;

    ojson j;
    try {
      j = ojson::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw TraceParseError(line_no, fmt::format("malformed record: {}", e.what()));
    }
    if (!j.is_object()) throw TraceParseError(line_no, "record is not an object");

    if (first) {
      first = false;
      if (auto it = j.find("module_range"); it != j.end()) {
        if (!it->is_object()) throw TraceParseError(line_no, "module_range must be an object");
        log.module_range.lo = json_u64(require(*it, "lo", line_no), "lo", line_no);
        log.module_range.hi = json_u64(require(*it, "hi", line_no), "hi", line_no);
        continue;
      }
    }

    auto ev = event_from_json(j, line_no);
    if (last_seq && ev.seq <= *last_seq) throw TraceOrderError(line_no, *last_seq, ev.seq);
    last_seq = ev.seq;
    log.events.push_back(std::move(ev));
  }
  return log;
}

TraceLog parse_trace(std::string_view text) {
  std::istringstream in{std::string(text)};
  return parse_trace(in);
}

void serialize_trace(const TraceLog& log, std::ostream& out) {
  if (log.events.empty() && log.module_range == AddressRange{}) return;
  ojson header;
  header["module_range"] = {{"lo", format_hex(log.module_range.lo)},
                            {"hi", format_hex(log.module_range.hi)}};
  out << header.dump() << '\n';
  for (const auto& ev : log.events) out << event_to_json(ev).dump() << '\n';
}

std::string serialize_trace(const TraceLog& log) {
  std::ostringstream out;
  serialize_trace(log, out);
  return out.str();
}

TraceLog read_trace_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trace file: " + path);
  return parse_trace(in);
}

void write_trace_file(const TraceLog& log, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write trace file: " + path);
  serialize_trace(log, out);
}

std::map<std::uint32_t, std::vector<AccessEvent>> split_by_thread(const TraceLog& log) {
  std::map<std::uint32_t, std::vector<AccessEvent>> threads;
  for (const auto& ev : log.events) threads[ev.thread_id].push_back(ev);
  return threads;
}

AddressPattern normalize_offsets(const std::vector<AccessEvent>& events,
                                 std::optional<Address> base) {
  if (!base) {
    if (events.empty())
      throw std::invalid_argument("normalize_offsets: empty event list needs an explicit base");
    base = std::min_element(events.begin(), events.end(),
                            [](const auto& a, const auto& b) { return a.address < b.address; })
               ->address;
  }
  AddressPattern pattern;
  pattern.base = *base;
  pattern.offsets.reserve(events.size());
  std::vector<std::uint32_t> sizes;
  sizes.reserve(events.size());
  for (const auto& ev : events) {
    pattern.offsets.push_back(static_cast<std::int64_t>(ev.address - *base));
    sizes.push_back(ev.operand_size);
  }
  pattern.sizes = std::move(sizes);
  return pattern;
}

}  // namespace memtrace
