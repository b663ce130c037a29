#pragma once

// Seeded random generators for property tests.

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "memtrace/layout.hpp"
#include "memtrace/model.hpp"
#include "memtrace/trace.hpp"

namespace testgen {

using namespace memtrace;

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t range(std::uint64_t lo, std::uint64_t hi) {  // inclusive
    return std::uniform_int_distribution<std::uint64_t>(lo, hi)(eng_);
  }
  std::int64_t srange(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(eng_);
  }
  bool chance(double p) { return std::bernoulli_distribution(p)(eng_); }
  std::uint64_t bits() { return eng_(); }
  template <class T>
  const T& pick(const std::vector<T>& v) {
    return v[range(0, v.size() - 1)];
  }
  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

inline const std::vector<std::string>& callee_names() {
  static const std::vector<std::string> names = {
      "CreateFileA", "ReadFile", "CloseHandle", "NtQuerySystemInformation", "memcpy",
      "RtlInitUnicodeString", "GetTickCount", "Sleep", "NtReadVirtualMemory"};
  return names;
}

/// One event satisfying every AccessEvent/InstrDescriptor invariant.
inline AccessEvent random_event(Rng& rng, std::uint64_t seq, std::uint32_t threads = 4) {
  static const std::vector<InstrCategory> cats = {
      InstrCategory::IntMove, InstrCategory::FloatMove, InstrCategory::XmmZeroStore,
      InstrCategory::Push,    InstrCategory::Call,      InstrCategory::Ret,
      InstrCategory::SubSp,   InstrCategory::Syscall,   InstrCategory::ApiCall,
      InstrCategory::Other};
  static const std::vector<Signedness> signs = {Signedness::Signed, Signedness::Unsigned,
                                                Signedness::NotApplicable};
  static const std::vector<EventTag> tags = {EventTag::None, EventTag::PageFault, EventTag::Entry,
                                             EventTag::Transition, EventTag::HookRead};
  AccessEvent ev;
  ev.seq = seq;
  ev.thread_id = static_cast<std::uint32_t>(rng.range(0, threads - 1));
  ev.cpl = rng.chance(0.5) ? Cpl::User : Cpl::Kernel;
  ev.instr.category = rng.pick(cats);
  ev.instr.signedness = rng.pick(signs);
  ev.address = rng.bits();
  ev.rip = rng.bits();

  switch (ev.instr.category) {
    case InstrCategory::FloatMove:
      ev.kind = rng.chance(0.5) ? AccessKind::Read : AccessKind::Write;
      ev.operand_size = rng.chance(0.5) ? 4 : 8;
      break;
    case InstrCategory::XmmZeroStore:
      ev.kind = AccessKind::Write;
      ev.operand_size = 16;
      break;
    case InstrCategory::Syscall:
    case InstrCategory::SubSp:
      ev.kind = AccessKind::Execute;
      ev.operand_size = 1;
      break;
    default: {
      static const std::vector<AccessKind> kinds = {AccessKind::Read, AccessKind::Write,
                                                    AccessKind::Execute};
      static const std::vector<std::uint32_t> sizes = {1, 2, 4, 8};
      ev.kind = rng.pick(kinds);
      ev.operand_size = ev.kind == AccessKind::Execute ? 1 : rng.pick(sizes);
    }
  }
  if (is_call_like(ev.instr.category)) ev.instr.callee = rng.pick(callee_names());
  if (ev.instr.category == InstrCategory::Call || ev.instr.category == InstrCategory::ApiCall) {
    std::vector<std::uint64_t> args(rng.range(0, 4));
    for (auto& a : args) a = rng.bits();
    ev.instr.register_args = args;
  }
  if (rng.chance(0.6)) ev.value = rng.bits();
  if (rng.chance(0.2)) ev.tag = rng.pick(tags);
  return ev;
}

inline TraceLog random_log(Rng& rng, std::size_t n, std::uint32_t threads = 4) {
  TraceLog log;
  if (rng.chance(0.8)) {
    const auto lo = rng.range(0, 1ull << 47);
    log.module_range = {lo, lo + rng.range(1, 1ull << 24)};
  }
  std::uint64_t seq = rng.range(0, 100);
  for (std::size_t i = 0; i < n; ++i) {
    log.events.push_back(random_event(rng, seq, threads));
    seq += rng.range(1, 5);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Program models

inline constexpr Address kDataLo = 0x20000000;
inline constexpr Address kDataHi = 0x20010000;

inline sim::ProgramModel base_model() {
  sim::ProgramModel m;
  m.entry_page = 0x401;
  m.sp_init = 0x7ff000;
  m.regions.push_back({{kDataLo, kDataHi}, true});
  return m;
}

/// Straight-line model drawing every instruction kind except mode switches
/// and jumps. Stack depth is tracked so returns never leave the stack region.
inline sim::ProgramModel random_model(Rng& rng, std::size_t n_ops) {
  using namespace sim;
  ProgramModel m = base_model();
  std::vector<std::uint64_t> alloc_sizes;
  std::uint64_t depth = 0;  // bytes below sp_init
  static const std::vector<std::uint32_t> sizes = {1, 2, 4, 8};
  static const std::vector<std::string> allocators = {"malloc", "HeapAlloc", "VirtualAlloc",
                                                      "calloc", "ExAllocatePoolWithTag",
                                                      "MmAllocatePagesForMdlEx", "LocalAlloc"};

  auto data_operand = [&](std::uint32_t size) -> Operand {
    const auto r = rng.range(0, 2);
    if (r == 1 && !alloc_sizes.empty()) {
      const auto k = rng.range(0, alloc_sizes.size() - 1);
      const auto room = alloc_sizes[k] >= size ? alloc_sizes[k] - size : 0;
      return Operand::alloc(k, static_cast<std::int64_t>(rng.range(0, room)));
    }
    if (r == 2) return Operand::sp(static_cast<std::int64_t>(rng.range(0, 0x80)));
    return Operand::absolute(rng.range(kDataLo, kDataHi - 16));
  };
  auto value_operand = [&]() -> Operand {
    if (!alloc_sizes.empty() && rng.chance(0.2))
      return Operand::alloc(rng.range(0, alloc_sizes.size() - 1));
    return Operand::absolute(rng.range(0, 1ull << 40));
  };

  for (std::size_t i = 0; i < n_ops; ++i) {
    switch (rng.range(0, 9)) {
      case 0: {
        MovRead in;
        in.category = rng.chance(0.2) ? InstrCategory::FloatMove : InstrCategory::IntMove;
        in.size = in.category == InstrCategory::FloatMove ? (rng.chance(0.5) ? 4 : 8)
                                                          : rng.pick(sizes);
        in.sign = static_cast<Signedness>(rng.range(0, 2));
        in.addr = data_operand(in.size);
        m.code.push_back(in);
        break;
      }
      case 1: {
        MovWrite in;
        in.size = rng.pick(sizes);
        in.sign = static_cast<Signedness>(rng.range(0, 2));
        in.addr = data_operand(in.size);
        in.value = value_operand();
        m.code.push_back(in);
        break;
      }
      case 2:
        m.code.push_back(Push{value_operand()});
        depth += 8;
        break;
      case 3: {
        Call in;
        const auto kind = rng.range(0, 4);
        in.category = kind == 0 ? InstrCategory::Syscall
                      : kind == 1 ? InstrCategory::Call
                                  : InstrCategory::ApiCall;
        in.callee = rng.pick(callee_names());
        if (in.category != InstrCategory::Syscall) {
          const auto n = rng.range(0, 8);
          for (std::uint64_t k = 0; k < std::min<std::uint64_t>(n, 4); ++k)
            in.args.push_back(value_operand());
          if (n > 4) {
            in.args.resize(4, Operand::absolute(0));
            for (std::uint64_t k = 4; k < n; ++k) in.stack_args.push_back(value_operand());
          }
          depth += 8;
        }
        m.code.push_back(in);
        break;
      }
      case 4: {
        const auto amount = rng.range(1, 0x10) * 8;
        m.code.push_back(SubSp{amount});
        depth += amount;
        break;
      }
      case 5: {
        Operand addr = data_operand(16);
        if (addr.base == Operand::Base::Allocation &&
            alloc_sizes[addr.alloc_index] < 16)
          addr = Operand::absolute(rng.range(kDataLo, kDataHi - 16));
        m.code.push_back(XmmZero{addr});
        break;
      }
      case 6: {
        Alloc in;
        in.callee = rng.pick(allocators);
        in.size = rng.range(1, 0x300);
        in.noise = static_cast<std::uint32_t>(rng.range(0, 2));
        alloc_sizes.push_back(in.size);
        m.code.push_back(in);
        break;
      }
      case 7:
        if (depth >= 8) {
          m.code.push_back(Ret{value_operand()});
          depth -= 8;
        } else {
          m.code.push_back(Nop{});
        }
        break;
      default:
        m.code.push_back(Nop{});
    }
  }
  return m;
}

/// Model alternating privilege levels with filler instructions. Kernel code
/// runs from its own region; user code from the module.
inline sim::ProgramModel random_mode_switch_model(Rng& rng, std::size_t n_ops) {
  using namespace sim;
  ProgramModel m = base_model();
  m.initial_cpl = rng.chance(0.5) ? Cpl::User : Cpl::Kernel;
  Cpl cpl = m.initial_cpl;
  for (std::size_t i = 0; i < n_ops; ++i) {
    const auto r = rng.range(0, 5);
    if (r == 0) {
      cpl = rng.chance(0.8) ? (cpl == Cpl::User ? Cpl::Kernel : Cpl::User) : cpl;
      m.code.push_back(ModeSwitch{cpl});
    } else if (r == 1) {
      m.code.push_back(MovRead{Operand::absolute(rng.range(kDataLo, kDataHi - 8)), 8,
                               InstrCategory::IntMove, Signedness::NotApplicable});
    } else if (r == 2) {
      m.code.push_back(MovWrite{Operand::absolute(rng.range(kDataLo, kDataHi - 8)), 4,
                                InstrCategory::IntMove, Signedness::Signed,
                                Operand::absolute(rng.range(0, 100))});
    } else {
      m.code.push_back(Nop{});
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Structure layouts

struct TruthField {
  std::uint64_t offset;
  std::uint32_t size;
  recon::FieldCategory category;
};

struct TruthLayout {
  std::vector<TruthField> fields;
  std::uint64_t total_size = 0;
};

/// 1-12 scalar fields with random padding. No three single-byte fields are
/// packed back to back, since such a run is reported as one char array.
inline TruthLayout random_layout(Rng& rng) {
  using recon::FieldCategory;
  static const std::vector<std::vector<FieldCategory>> by_size = {
      {FieldCategory::Char, FieldCategory::UnsignedChar},
      {FieldCategory::Short, FieldCategory::UnsignedShort},
      {FieldCategory::Int, FieldCategory::UnsignedInt, FieldCategory::Float},
      {FieldCategory::LongLong, FieldCategory::UnsignedLongLong, FieldCategory::Double,
       FieldCategory::Pointer}};
  static const std::vector<std::uint32_t> sizes = {1, 2, 4, 8};

  TruthLayout layout;
  std::uint64_t cursor = 0;
  std::size_t packed_bytes = 0;
  const auto n = rng.range(1, 12);
  for (std::uint64_t i = 0; i < n; ++i) {
    const auto size_index = rng.range(0, 3);
    const std::uint32_t size = sizes[size_index];
    std::uint64_t offset = (cursor + size - 1) / size * size;  // natural alignment
    if (rng.chance(0.3)) offset += size * rng.range(1, 3);
    if (size == 1 && offset == cursor && packed_bytes >= 2) offset += 1;
    packed_bytes = size == 1 ? (offset == cursor ? packed_bytes + 1 : 1) : 0;
    layout.fields.push_back({offset, size, rng.pick(by_size[size_index])});
    cursor = offset + size;
  }
  layout.total_size = cursor + (rng.chance(0.5) ? rng.range(0, 8) : 0);
  return layout;
}

/// Allocates the structure and touches every field once with an instruction
/// whose descriptor matches the field type.
inline sim::ProgramModel layout_model(Rng& rng, const TruthLayout& layout) {
  using namespace sim;
  using recon::FieldCategory;
  ProgramModel m = base_model();
  m.code.push_back(Alloc{"malloc", layout.total_size, 2});
  for (const auto& f : layout.fields) {
    InstrCategory cat = InstrCategory::IntMove;
    Signedness sign = Signedness::Signed;
    Operand value = Operand::absolute(rng.range(0, 0xfff));
    switch (f.category) {
      case FieldCategory::UnsignedChar:
      case FieldCategory::UnsignedShort:
      case FieldCategory::UnsignedInt:
      case FieldCategory::UnsignedLongLong:
        sign = Signedness::Unsigned;
        break;
      case FieldCategory::Float:
      case FieldCategory::Double:
        cat = InstrCategory::FloatMove;
        sign = Signedness::NotApplicable;
        break;
      case FieldCategory::Pointer:
        sign = Signedness::NotApplicable;
        value = Operand::alloc(0);
        break;
      default:
        if (rng.chance(0.3)) sign = Signedness::NotApplicable;  // defaults to signed
    }
    const Operand addr = Operand::alloc(0, static_cast<std::int64_t>(f.offset));
    if (f.category != FieldCategory::Pointer && rng.chance(0.4))
      m.code.push_back(MovRead{addr, f.size, cat, sign});
    else
      m.code.push_back(MovWrite{addr, f.size, cat, sign, value});
  }
  return m;
}

// ---------------------------------------------------------------------------
// Offset patterns

/// Offsets in [0, limit), drawn from a small pool half the time so that
/// repeats and exact matches are common.
inline std::vector<std::int64_t> random_pattern(Rng& rng, std::size_t max_len,
                                                std::uint64_t limit = 1u << 16) {
  std::vector<std::int64_t> out(rng.range(0, max_len));
  const bool pooled = rng.chance(0.5);
  for (auto& v : out)
    v = static_cast<std::int64_t>(pooled ? 8 * rng.range(0, 7) : rng.range(0, limit - 1));
  return out;
}

/// Copy of `p` with a few elements jittered, replaced, inserted or removed.
inline std::vector<std::int64_t> mutate_pattern(Rng& rng, std::vector<std::int64_t> p,
                                                std::size_t max_len,
                                                std::uint64_t limit = 1u << 16) {
  for (std::uint64_t k = 0, n = rng.range(0, 4); k < n; ++k) {
    const auto op = rng.range(0, 3);
    if (op == 0 && !p.empty()) {
      auto& v = p[rng.range(0, p.size() - 1)];
      v = std::clamp<std::int64_t>(v + rng.srange(-8, 8), 0, static_cast<std::int64_t>(limit - 1));
    } else if (op == 1 && !p.empty()) {
      p[rng.range(0, p.size() - 1)] = static_cast<std::int64_t>(rng.range(0, limit - 1));
    } else if (op == 2 && p.size() < max_len) {
      p.insert(p.begin() + static_cast<std::ptrdiff_t>(rng.range(0, p.size())),
               static_cast<std::int64_t>(rng.range(0, limit - 1)));
    } else if (op == 3 && !p.empty()) {
      p.erase(p.begin() + static_cast<std::ptrdiff_t>(rng.range(0, p.size() - 1)));
    }
  }
  return p;
}

/// Pattern pair: unrelated half the time, otherwise one derived from the other.
inline std::pair<std::vector<std::int64_t>, std::vector<std::int64_t>> random_pattern_pair(
    Rng& rng, std::size_t max_len = 32, std::uint64_t limit = 1u << 16) {
  auto p = random_pattern(rng, max_len, limit);
  auto q = rng.chance(0.5) ? random_pattern(rng, max_len, limit)
                           : mutate_pattern(rng, p, max_len, limit);
  return {std::move(p), std::move(q)};
}

}  // namespace testgen
