#include "memtrace/model.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "memtrace/allocators.hpp"

namespace memtrace::sim {

using ojson = nlohmann::ordered_json;

ModelParseError::ModelParseError(std::size_t line, const std::string& what)
    : std::runtime_error(fmt::format("model line {}: {}", line, what)), line_(line) {}

std::string to_string(const Operand& op) {
  auto with_disp = [&](std::string head) {
    if (op.disp > 0) return fmt::format("{}+{:#x}", head, op.disp);
    if (op.disp < 0) return fmt::format("{}-{:#x}", head, -static_cast<std::uint64_t>(op.disp));
    return head;
  };
  switch (op.base) {
    case Operand::Base::Absolute: return format_hex(static_cast<std::uint64_t>(op.disp));
    case Operand::Base::StackPointer: return with_disp("sp");
    case Operand::Base::Allocation: return with_disp(fmt::format("a{}", op.alloc_index));
  }
  return "?";
}

std::optional<Operand> parse_operand(std::string_view text) {
  auto parse_disp = [](std::string_view rest) -> std::optional<std::int64_t> {
    if (rest.empty()) return 0;
    const char sign = rest.front();
    if (sign != '+' && sign != '-') return std::nullopt;
    auto magnitude = parse_u64(rest.substr(1));
    if (!magnitude || *magnitude > static_cast<std::uint64_t>(INT64_MAX)) return std::nullopt;
    const auto m = static_cast<std::int64_t>(*magnitude);
    return sign == '+' ? m : -m;
  };

  if (text.starts_with("sp")) {
    auto disp = parse_disp(text.substr(2));
    if (!disp) return std::nullopt;
    return Operand::sp(*disp);
  }
  if (text.size() >= 2 && text[0] == 'a' && text[1] >= '0' && text[1] <= '9') {
    std::size_t index = 0;
    const char* first = text.data() + 1;
    const char* last = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(first, last, index);
    if (ec != std::errc{}) return std::nullopt;
    auto disp = parse_disp(text.substr(static_cast<std::size_t>(ptr - text.data())));
    if (!disp) return std::nullopt;
    return Operand::alloc(index, *disp);
  }
  if (auto value = parse_u64(text)) return Operand::absolute(*value);
  return std::nullopt;
}

std::string_view to_string(TransitionMode mode) {
  switch (mode) {
    case TransitionMode::None: return "none";
    case TransitionMode::Mbec: return "mbec";
    case TransitionMode::Legacy: return "legacy";
  }
  return "?";
}

AddressRange ProgramModel::effective_module_range() const {
  if (module_range) return *module_range;
  return {page_base(entry_page), page_base(entry_page + 16)};
}

namespace {

struct Reader {
  const ojson& obj;
  std::size_t line;

  [[noreturn]] void fail(const std::string& what) const { throw ModelParseError(line, what); }

  bool has(const char* key) const { return obj.contains(key); }

  const ojson& at(const char* key) const {
    auto it = obj.find(key);
    if (it == obj.end()) fail(fmt::format("missing key '{}'", key));
    return *it;
  }

  std::uint64_t u64(const ojson& v, const char* key) const {
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return v.get<std::uint64_t>();
    if (v.is_string())
      if (auto parsed = parse_u64(v.get_ref<const std::string&>())) return *parsed;
    fail(fmt::format("key '{}' is not an unsigned integer", key));
  }
  std::uint64_t u64(const char* key) const { return u64(at(key), key); }
  std::uint64_t u64_or(const char* key, std::uint64_t fallback) const {
    return has(key) ? u64(key) : fallback;
  }

  bool flag_or(const char* key, bool fallback) const {
    if (!has(key)) return fallback;
    if (!at(key).is_boolean()) fail(fmt::format("key '{}' must be a boolean", key));
    return at(key).get<bool>();
  }

  std::string str(const char* key) const {
    const auto& v = at(key);
    if (!v.is_string()) fail(fmt::format("key '{}' must be a string", key));
    return v.get<std::string>();
  }

  Operand operand(const ojson& v, const char* key) const {
    if (v.is_number_unsigned() || v.is_number_integer()) return Operand::absolute(u64(v, key));
    if (v.is_string()) {
      if (auto op = parse_operand(v.get_ref<const std::string&>())) return *op;
    }
    fail(fmt::format("key '{}' is not a valid operand", key));
  }
  Operand operand(const char* key) const { return operand(at(key), key); }
  Operand operand_or(const char* key, Operand fallback) const {
    return has(key) ? operand(key) : fallback;
  }

  std::vector<Operand> operands(const char* key) const {
    std::vector<Operand> out;
    if (!has(key)) return out;
    if (!at(key).is_array()) fail(fmt::format("key '{}' must be an array", key));
    for (const auto& v : at(key)) out.push_back(operand(v, key));
    return out;
  }

  Cpl cpl(const char* key) const {
    auto c = parse_cpl(str(key));
    if (!c) fail("cpl must be \"u\" or \"k\"");
    return *c;
  }

  AddressRange range(const ojson& v) const {
    Reader r{v, line};
    if (!v.is_object()) fail("range must be an object with lo and hi");
    AddressRange out{r.u64("lo"), r.u64("hi")};
    if (out.hi < out.lo) fail("range hi below lo");
    return out;
  }
};

std::uint32_t checked_mov_size(const Reader& r, InstrCategory cat) {
  auto size = r.u64_or("size", 8);
  if (size != 1 && size != 2 && size != 4 && size != 8) r.fail("mov size must be 1, 2, 4 or 8");
  if (cat == InstrCategory::FloatMove && size != 4 && size != 8)
    r.fail("float-move requires size 4 or 8");
  return static_cast<std::uint32_t>(size);
}

InstrCategory mov_category(const Reader& r) {
  if (!r.has("cat")) return InstrCategory::IntMove;
  auto cat = parse_instr_category(r.str("cat"));
  if (!cat || (*cat != InstrCategory::IntMove && *cat != InstrCategory::FloatMove &&
               *cat != InstrCategory::Other))
    r.fail("mov category must be int-move, float-move or other");
  return *cat;
}

Signedness mov_sign(const Reader& r) {
  if (!r.has("sign")) return Signedness::NotApplicable;
  auto sign = parse_signedness(r.str("sign"));
  if (!sign) r.fail("sign must be signed, unsigned or n/a");
  return *sign;
}

Instruction parse_instruction(const Reader& r) {
  const std::string op = r.str("op");
  if (op == "mov-read") {
    MovRead in;
    in.addr = r.operand("addr");
    in.category = mov_category(r);
    in.size = checked_mov_size(r, in.category);
    in.sign = mov_sign(r);
    return in;
  }
  if (op == "mov-write") {
    MovWrite in;
    in.addr = r.operand("addr");
    in.category = mov_category(r);
    in.size = checked_mov_size(r, in.category);
    in.sign = mov_sign(r);
    in.value = r.operand_or("value", Operand::absolute(0));
    return in;
  }
  if (op == "push") return Push{r.operand_or("value", Operand::absolute(0))};
  if (op == "call") {
    Call in;
    in.callee = r.str("callee");
    if (in.callee.empty()) r.fail("callee must not be empty");
    if (r.has("cat")) {
      auto cat = parse_instr_category(r.str("cat"));
      if (!cat || !is_call_like(*cat)) r.fail("call category must be call, api-call or syscall");
      in.category = *cat;
    }
    in.args = r.operands("args");
    if (in.args.size() > 4) r.fail("at most 4 register args; pass the rest in 'stack'");
    in.stack_args = r.operands("stack");
    if (r.has("n_stack")) {
      auto n = r.u64("n_stack");
      if (in.stack_args.empty()) in.stack_args.assign(n, Operand::absolute(0));
      else if (n != in.stack_args.size()) r.fail("n_stack disagrees with stack");
    }
    if (!in.stack_args.empty() && in.args.size() != 4)
      r.fail("stack args require all 4 register args");
    if (in.category == InstrCategory::Syscall && (!in.args.empty() || !in.stack_args.empty()))
      r.fail("syscall takes no modelled args");
    return in;
  }
  if (op == "sub-sp") return SubSp{r.u64("amount")};
  if (op == "xmm-zero") return XmmZero{r.operand("addr")};
  if (op == "alloc") {
    Alloc in;
    in.callee = r.str("callee");
    if (!find_allocator(in.callee)) r.fail(fmt::format("'{}' is not a known allocator", in.callee));
    in.size = r.u64("size");
    auto noise = r.u64_or("noise", 0);
    if (noise > 64) r.fail("noise must be at most 64");
    in.noise = static_cast<std::uint32_t>(noise);
    return in;
  }
  if (op == "ret") return Ret{r.operand_or("value", Operand::absolute(0))};
  if (op == "mode-switch") return ModeSwitch{r.cpl("cpl")};
  if (op == "nop") return Nop{};
  if (op == "jmp") return Jmp{r.operand("addr")};
  r.fail(fmt::format("unknown op '{}'", op));
}

TrapConfig parse_trap(const Reader& r) {
  TrapConfig trap;
  if (r.has("profile")) {
    try {
      trap.profile = parse_profile(r.str("profile"));
    } catch (const std::invalid_argument& e) {
      r.fail(e.what());
    }
  }
  if (r.has("transitions")) {
    const auto mode = r.str("transitions");
    if (mode == "none") trap.transitions = TransitionMode::None;
    else if (mode == "mbec") trap.transitions = TransitionMode::Mbec;
    else if (mode == "legacy") trap.transitions = TransitionMode::Legacy;
    else r.fail("transitions must be none, mbec or legacy");
  }
  trap.watch_all = r.flag_or("watch_all", trap.watch_all);
  if (r.has("watch")) {
    if (!r.at("watch").is_array()) r.fail("watch must be an array");
    for (const auto& w : r.at("watch")) trap.watch.push_back(r.range(w));
  }
  trap.hook_calls = r.flag_or("hook_calls", trap.hook_calls);
  trap.hook_stack_ops = r.flag_or("hook_stack_ops", trap.hook_stack_ops);
  trap.capture_entry = r.flag_or("capture_entry", trap.capture_entry);
  trap.prefault_allocations = r.flag_or("prefault", trap.prefault_allocations);
  auto tid = r.u64_or("tid", 0);
  if (tid > UINT32_MAX) r.fail("tid out of range");
  trap.thread_id = static_cast<std::uint32_t>(tid);
  return trap;
}

void parse_header(const Reader& r, ProgramModel& model) {
  model.entry_page = r.u64("entry_page");
  model.entry_offset = r.u64_or("entry_offset", 0);
  if (model.entry_offset >= kPageSize) r.fail("entry_offset must lie within the entry page");
  model.sp_init = r.u64("sp_init");
  if (r.has("cpl")) model.initial_cpl = r.cpl("cpl");
  model.entry_present = r.flag_or("entry_present", true);
  if (r.has("module_range")) model.module_range = r.range(r.at("module_range"));
  if (r.has("regions")) {
    if (!r.at("regions").is_array()) r.fail("regions must be an array");
    for (const auto& reg : r.at("regions")) {
      Reader rr{reg, r.line};
      model.regions.push_back({r.range(reg), rr.flag_or("present", true)});
    }
  }
  if (r.has("trap")) {
    if (!r.at("trap").is_object()) r.fail("trap must be an object");
    model.trap = parse_trap(Reader{r.at("trap"), r.line});
  }
}

ojson range_json(const AddressRange& range) {
  return ojson{{"lo", format_hex(range.lo)}, {"hi", format_hex(range.hi)}};
}

ojson operands_json(const std::vector<Operand>& ops) {
  ojson arr = ojson::array();
  for (const auto& op : ops) arr.push_back(to_string(op));
  return arr;
}

ojson instruction_json(const Instruction& instr) {
  return std::visit(
      [](const auto& in) -> ojson {
        using T = std::decay_t<decltype(in)>;
        ojson j;
        if constexpr (std::is_same_v<T, MovRead> || std::is_same_v<T, MovWrite>) {
          j["op"] = std::is_same_v<T, MovRead> ? "mov-read" : "mov-write";
          j["addr"] = to_string(in.addr);
          j["size"] = in.size;
          j["cat"] = std::string(to_string(in.category));
          j["sign"] = std::string(to_string(in.sign));
          if constexpr (std::is_same_v<T, MovWrite>) j["value"] = to_string(in.value);
        } else if constexpr (std::is_same_v<T, Push>) {
          j["op"] = "push";
          j["value"] = to_string(in.value);
        } else if constexpr (std::is_same_v<T, Call>) {
          j["op"] = "call";
          j["callee"] = in.callee;
          j["cat"] = std::string(to_string(in.category));
          j["args"] = operands_json(in.args);
          if (!in.stack_args.empty()) j["stack"] = operands_json(in.stack_args);
        } else if constexpr (std::is_same_v<T, SubSp>) {
          j["op"] = "sub-sp";
          j["amount"] = format_hex(in.amount);
        } else if constexpr (std::is_same_v<T, XmmZero>) {
          j["op"] = "xmm-zero";
          j["addr"] = to_string(in.addr);
        } else if constexpr (std::is_same_v<T, Alloc>) {
          j["op"] = "alloc";
          j["callee"] = in.callee;
          j["size"] = format_hex(in.size);
          if (in.noise) j["noise"] = in.noise;
        } else if constexpr (std::is_same_v<T, Ret>) {
          j["op"] = "ret";
          j["value"] = to_string(in.value);
        } else if constexpr (std::is_same_v<T, ModeSwitch>) {
          j["op"] = "mode-switch";
          j["cpl"] = std::string(memtrace::to_string(in.cpl));
        } else if constexpr (std::is_same_v<T, Nop>) {
          j["op"] = "nop";
        } else if constexpr (std::is_same_v<T, Jmp>) {
          j["op"] = "jmp";
          j["addr"] = to_string(in.target);
        }
        return j;
      },
      instr);
}

}  // namespace

ProgramModel parse_model(std::istream& in) {
  ProgramModel model;
  std::string line;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    ojson j;
    try {
      j = ojson::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ModelParseError(line_no, fmt::format("malformed record: {}", e.what()));
    }
    if (!j.is_object()) throw ModelParseError(line_no, "record is not an object");
    Reader r{j, line_no};
    if (!header_seen) {
      if (r.has("op")) r.fail("first record must be the header (entry_page, sp_init)");
      parse_header(r, model);
      header_seen = true;
      continue;
    }
    model.code.push_back(parse_instruction(r));
  }
  if (!header_seen) throw ModelParseError(line_no, "missing header record");
  return model;
}

ProgramModel parse_model(std::string_view text) {
  std::istringstream in{std::string(text)};
  return parse_model(in);
}

ProgramModel read_model_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open model file: " + path);
  return parse_model(in);
}

void serialize_model(const ProgramModel& model, std::ostream& out) {
  ojson header;
  header["entry_page"] = format_hex(model.entry_page);
  if (model.entry_offset) header["entry_offset"] = format_hex(model.entry_offset);
  header["sp_init"] = format_hex(model.sp_init);
  header["cpl"] = std::string(memtrace::to_string(model.initial_cpl));
  header["entry_present"] = model.entry_present;
  if (model.module_range) header["module_range"] = range_json(*model.module_range);
  if (!model.regions.empty()) {
    ojson regions = ojson::array();
    for (const auto& reg : model.regions) {
      auto j = range_json(reg.range);
      j["present"] = reg.present;
      regions.push_back(std::move(j));
    }
    header["regions"] = std::move(regions);
  }
  if (model.trap) {
    const auto& t = *model.trap;
    ojson trap;
    trap["profile"] = std::string(to_string(t.profile));
    trap["transitions"] = std::string(to_string(t.transitions));
    trap["watch_all"] = t.watch_all;
    ojson watch = ojson::array();
    for (const auto& w : t.watch) watch.push_back(range_json(w));
    trap["watch"] = std::move(watch);
    trap["hook_calls"] = t.hook_calls;
    trap["hook_stack_ops"] = t.hook_stack_ops;
    trap["capture_entry"] = t.capture_entry;
    trap["prefault"] = t.prefault_allocations;
    trap["tid"] = t.thread_id;
    header["trap"] = std::move(trap);
  }
  out << header.dump() << '\n';
  for (const auto& instr : model.code) out << instruction_json(instr).dump() << '\n';
}

std::string serialize_model(const ProgramModel& model) {
  std::ostringstream out;
  serialize_model(model, out);
  return out.str();
}

}  // namespace memtrace::sim
