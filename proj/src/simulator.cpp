#include "memtrace/simulator.hpp"

#include <algorithm>

#include <fmt/format.h>

#include "memtrace/allocators.hpp"

namespace memtrace::sim {

namespace {

Address align_up(Address a, std::uint64_t alignment) {
  return (a + alignment - 1) / alignment * alignment;
}

class Machine {
 public:
  Machine(Guest& guest, const ProgramModel& model, const TrapConfig& config)
      : guest_(guest), model_(model), cfg_(config) {}

  RunResult execute();

 private:
  Address& current_rip() { return cpl_ == Cpl::User ? user_rip_ : kernel_rip_; }
  Address allocator_rip() const {
    return cpl_ == Cpl::User ? kUserAllocatorCode : kKernelAllocatorCode;
  }

  bool monitored(Address a) const {
    return cfg_.watch_all || std::any_of(cfg_.watch.begin(), cfg_.watch.end(),
                                         [a](const AddressRange& r) { return r.contains(a); });
  }

  std::uint64_t eval(const Operand& op) const;
  void emit(AccessKind kind, Address addr, std::uint32_t size, InstrDescriptor instr, Address rip,
            std::optional<std::uint64_t> value, EventTag tag = EventTag::None);
  void ensure_present(Address addr, std::uint32_t size);
  std::uint64_t data_access(AccessKind kind, Address addr, std::uint32_t size,
                            const InstrDescriptor& instr, Address rip,
                            std::uint64_t write_value = 0, bool forced = false,
                            std::optional<std::uint64_t> logged_value = std::nullopt);
  void fetch(Address rip);
  void note_violation(Address addr, AccessKind kind, Address rip) {
    out_.violations.push_back({addr, kind, cpl_, guest_.active_profile(), rip});
  }
  void store_stack_args(const std::vector<std::uint64_t>& values, Address rip);
  void push_return_address(const InstrDescriptor& instr, Address rip);
  void pop_return(std::uint64_t return_value, Address rip);

  void step(const MovRead& in, Address rip);
  void step(const MovWrite& in, Address rip);
  void step(const Push& in, Address rip);
  void step(const Call& in, Address rip);
  void step(const SubSp& in, Address rip);
  void step(const XmmZero& in, Address rip);
  void step(const Alloc& in, Address rip);
  void step(const Ret& in, Address rip);
  void step(const ModeSwitch& in, Address rip);
  void step(const Nop&, Address) {}
  void step(const Jmp& in, Address rip);

  Guest& guest_;
  const ProgramModel& model_;
  const TrapConfig& cfg_;
  RunResult out_;

  std::uint64_t seq_ = 0;
  Address sp_ = 0;
  Address user_rip_ = 0;
  Address kernel_rip_ = kKernelCodeBase;
  Cpl cpl_ = Cpl::User;
  Cpl legacy_guard_ = Cpl::User;
  bool entry_pending_ = false;
  bool jumped_ = false;
  std::vector<Address> alloc_bases_;
  Address user_heap_ = kUserHeapBase;
  Address kernel_heap_ = kKernelPoolBase;
};

std::uint64_t Machine::eval(const Operand& op) const {
  switch (op.base) {
    case Operand::Base::Absolute: return static_cast<std::uint64_t>(op.disp);
    case Operand::Base::StackPointer: return sp_ + static_cast<std::uint64_t>(op.disp);
    case Operand::Base::Allocation:
      if (op.alloc_index >= alloc_bases_.size())
        throw SimulationFault(fmt::format("operand {} refers to an allocation not yet made",
                                          to_string(op)));
      return alloc_bases_[op.alloc_index] + static_cast<std::uint64_t>(op.disp);
  }
  return 0;
}

void Machine::emit(AccessKind kind, Address addr, std::uint32_t size, InstrDescriptor instr,
                   Address rip, std::optional<std::uint64_t> value, EventTag tag) {
  AccessEvent ev;
  ev.seq = seq_++;
  ev.thread_id = cfg_.thread_id;
  ev.cpl = cpl_;
  ev.kind = kind;
  ev.address = addr;
  ev.operand_size = size;
  ev.instr = std::move(instr);
  ev.rip = rip;
  ev.value = value;
  ev.tag = tag;
  out_.log.events.push_back(std::move(ev));
}

void Machine::ensure_present(Address addr, std::uint32_t size) {
  for (Address a = addr; a < addr + size; a = page_base(page_of(a) + 1)) {
    if (!is_canonical(a))
      throw SimulationFault(fmt::format("non-canonical address {:#x}", a));
    if (!guest_.demand_page(a))
      throw SimulationFault(fmt::format("access to unmapped address {:#x}", a));
  }
}

std::uint64_t Machine::data_access(AccessKind kind, Address addr, std::uint32_t size,
                                   const InstrDescriptor& instr, Address rip,
                                   std::uint64_t write_value, bool forced,
                                   std::optional<std::uint64_t> logged_value) {
  ensure_present(addr, size);

  bool violation = false;
  bool hook_hit = false;
  for (Address a = addr; a < addr + size; ++a) {
    if (a == addr || a % kPageSize == 0)
      violation = violation || guest_.check_access(a, kind, cpl_) == AccessVerdict::Violation;
    hook_hit = hook_hit || (kind == AccessKind::Read && guest_.is_hooked(a));
  }

  std::optional<std::uint64_t> value;
  if (kind == AccessKind::Write) {
    guest_.write_value(addr, size, write_value);
    if (size < 8) value = write_value & ((std::uint64_t{1} << (8 * size)) - 1);
    else if (size == 8) value = write_value;
  } else {
    value = guest_.read_value(addr, size);
  }
  if (logged_value) value = logged_value;

  if (violation) note_violation(addr, kind, rip);
  if (violation || forced || monitored(addr))
    emit(kind, addr, size, instr, rip, value, hook_hit ? EventTag::HookRead : EventTag::None);
  return kind == AccessKind::Read ? guest_.read_value(addr, size) : write_value;
}

void Machine::fetch(Address rip) {
  if (!is_canonical(rip)) throw SimulationFault(fmt::format("fetch from non-canonical {:#x}", rip));
  const InstrDescriptor exec_instr{};
  const bool entry_fetch =
      entry_pending_ && cpl_ == Cpl::User && page_of(rip) == model_.entry_page;

  if (!guest_.is_present(rip)) {
    if (entry_fetch) {
      guest_.inject_page_fault(rip);
      out_.injected_faults.push_back(rip);
      emit(AccessKind::Execute, rip, 1, exec_instr, rip, std::nullopt, EventTag::PageFault);
    } else if (!guest_.demand_page(rip)) {
      throw SimulationFault(fmt::format("instruction fetch from unmapped address {:#x}", rip));
    }
  }

  if (entry_fetch &&
      guest_.check_access(rip, AccessKind::Execute, cpl_) == AccessVerdict::Violation) {
    note_violation(rip, AccessKind::Execute, rip);
    emit(AccessKind::Execute, rip, 1, exec_instr, rip, std::nullopt, EventTag::Entry);
    out_.entry_address = rip;
    for (auto id : kAllProfiles) guest_.clear_override(id, model_.entry_page);
    entry_pending_ = false;
  }

  if (cfg_.transitions == TransitionMode::Mbec &&
      guest_.check_access(rip, AccessKind::Execute, cpl_) == AccessVerdict::Violation) {
    const auto active = guest_.active_profile();
    const bool to_user = active == EptProfileId::UserExecDenied && cpl_ == Cpl::User;
    const bool to_kernel = active == EptProfileId::KernelExecDenied && cpl_ == Cpl::Kernel;
    if (to_user || to_kernel) {
      note_violation(rip, AccessKind::Execute, rip);
      out_.transitions.push_back({seq_, cpl_});
      emit(AccessKind::Execute, rip, 1, exec_instr, rip, std::nullopt, EventTag::Transition);
      guest_.switch_profile(to_user ? EptProfileId::KernelExecDenied
                                    : EptProfileId::UserExecDenied);
    }
  } else if (cfg_.transitions == TransitionMode::Legacy && legacy_guard_ != cpl_) {
    // The guard page-table bit makes this fetch raise #PF, which the
    // exception bitmap routes to us; the fault is swallowed.
    out_.transitions.push_back({seq_, cpl_});
    emit(AccessKind::Execute, rip, 1, exec_instr, rip, std::nullopt, EventTag::Transition);
    legacy_guard_ = cpl_;
  }

  if (guest_.check_access(rip, AccessKind::Execute, cpl_) == AccessVerdict::Violation) {
    note_violation(rip, AccessKind::Execute, rip);
    emit(AccessKind::Execute, rip, 1, exec_instr, rip, std::nullopt);
  }
}

void Machine::store_stack_args(const std::vector<std::uint64_t>& values, Address rip) {
  for (std::size_t k = 0; k < values.size(); ++k)
    data_access(AccessKind::Write, sp_ + kFirstStackArgSlot + 8 * k, 8,
                {InstrCategory::IntMove, Signedness::NotApplicable, {}, {}}, rip, values[k]);
}

void Machine::push_return_address(const InstrDescriptor& instr, Address rip) {
  sp_ -= 8;
  data_access(AccessKind::Write, sp_, 8, instr, rip, rip + kInstructionLength, cfg_.hook_calls);
}

void Machine::pop_return(std::uint64_t return_value, Address rip) {
  data_access(AccessKind::Read, sp_, 8, {InstrCategory::Ret, Signedness::NotApplicable, {}, {}},
              rip, 0, cfg_.hook_calls, return_value);
  sp_ += 8;
}

void Machine::step(const MovRead& in, Address rip) {
  data_access(AccessKind::Read, eval(in.addr), in.size, {in.category, in.sign, {}, {}}, rip);
}

void Machine::step(const MovWrite& in, Address rip) {
  data_access(AccessKind::Write, eval(in.addr), in.size, {in.category, in.sign, {}, {}}, rip,
              eval(in.value));
}

void Machine::step(const Push& in, Address rip) {
  const auto value = eval(in.value);
  sp_ -= 8;
  data_access(AccessKind::Write, sp_, 8, {InstrCategory::Push, Signedness::NotApplicable, {}, {}},
              rip, value);
}

void Machine::step(const Call& in, Address rip) {
  if (in.category == InstrCategory::Syscall) {
    if (cfg_.hook_calls)
      emit(AccessKind::Execute, rip, 1,
           {InstrCategory::Syscall, Signedness::NotApplicable, in.callee, std::nullopt}, rip,
           std::nullopt);
    return;
  }
  std::vector<std::uint64_t> regs;
  for (const auto& a : in.args) regs.push_back(eval(a));
  std::vector<std::uint64_t> stack;
  for (const auto& a : in.stack_args) stack.push_back(eval(a));

  store_stack_args(stack, rip);
  push_return_address({in.category, Signedness::NotApplicable, in.callee, std::move(regs)}, rip);
}

void Machine::step(const SubSp& in, Address rip) {
  sp_ -= in.amount;
  if (cfg_.hook_stack_ops)
    emit(AccessKind::Execute, sp_, 1, {InstrCategory::SubSp, Signedness::NotApplicable, {}, {}},
         rip, in.amount);
}

void Machine::step(const XmmZero& in, Address rip) {
  data_access(AccessKind::Write, eval(in.addr), 16,
              {InstrCategory::XmmZeroStore, Signedness::NotApplicable, {}, {}}, rip, 0);
}

void Machine::step(const Alloc& in, Address rip) {
  const AllocatorInfo* info = find_allocator(in.callee);
  if (!info) throw SimulationFault("unknown allocator " + in.callee);

  std::size_t n_params = 1;
  if (info->size_param) n_params = std::max(n_params, *info->size_param + 1);
  if (info->count_param) n_params = std::max(n_params, *info->count_param + 1);
  std::vector<std::uint64_t> params(n_params, 0);
  if (info->size_param) params[*info->size_param] = in.size;
  if (info->count_param) params[*info->count_param] = 1;

  std::vector<std::uint64_t> regs(params.begin(), params.begin() + std::min<std::size_t>(4, n_params));
  std::vector<std::uint64_t> stack;
  if (n_params > 4) {
    regs.resize(4, 0);
    stack.assign(params.begin() + 4, params.end());
  }
  store_stack_args(stack, rip);
  push_return_address({InstrCategory::ApiCall, Signedness::NotApplicable, in.callee, regs}, rip);

  Address& cursor = cpl_ == Cpl::User ? user_heap_ : kernel_heap_;
  const Address base =
      info->page_aligned ? align_up(cursor + 16, kPageSize) : align_up(cursor + 16, 16);
  cursor = base + std::max<std::uint64_t>(in.size, 1);
  guest_.map_region({base - 16, base + std::max<std::uint64_t>(in.size, 1)}, false);
  alloc_bases_.push_back(base);
  out_.allocations.push_back({in.callee, base, in.size, rip});

  const Address inner_rip = allocator_rip();
  for (std::uint32_t i = 0; i < in.noise; ++i)
    data_access(AccessKind::Write, base - 16 + 8 * (i % 2), 8,
                {InstrCategory::IntMove, Signedness::Unsigned, {}, {}}, inner_rip, in.size + i);

  if (cfg_.prefault_allocations) {
    for (auto p = page_of(base); p <= page_of(base + std::max<std::uint64_t>(in.size, 1) - 1);
         ++p) {
      const Address at = std::max(base, page_base(p));
      if (guest_.is_present(at)) continue;
      guest_.inject_page_fault(at);
      out_.injected_faults.push_back(at);
      emit(AccessKind::Read, at, 1, {}, rip, std::nullopt, EventTag::PageFault);
    }
  }

  pop_return(base, inner_rip);
}

void Machine::step(const Ret& in, Address rip) { pop_return(eval(in.value), rip); }

void Machine::step(const ModeSwitch& in, Address) {
  cpl_ = in.cpl;
  guest_.set_mode(in.cpl);
}

void Machine::step(const Jmp& in, Address) {
  current_rip() = eval(in.target);
  jumped_ = true;
}

RunResult Machine::execute() {
  out_.log.module_range = model_.effective_module_range();
  sp_ = model_.sp_init;
  user_rip_ = model_.entry_address();
  cpl_ = model_.initial_cpl;
  legacy_guard_ = cpl_;
  guest_.set_mode(cpl_);

  if (cfg_.transitions == TransitionMode::Mbec)
    guest_.switch_profile(cpl_ == Cpl::Kernel ? EptProfileId::UserExecDenied
                                              : EptProfileId::KernelExecDenied);
  else
    guest_.switch_profile(cfg_.profile);

  if (cfg_.capture_entry) {
    entry_pending_ = true;
    PagePerms revoked;
    revoked.exec_user = false;
    revoked.exec_kernel = false;
    for (auto id : kAllProfiles) guest_.set_override(id, model_.entry_page, revoked);
  }

  for (const auto& instr : model_.code) {
    const Address rip = current_rip();
    Address& rip_slot = current_rip();
    fetch(rip);
    guest_.pending_fault.reset();
    jumped_ = false;
    std::visit([&](const auto& in) { step(in, rip); }, instr);
    if (!jumped_) rip_slot = rip + kInstructionLength;
  }

  if (entry_pending_)
    for (auto id : kAllProfiles) guest_.clear_override(id, model_.entry_page);
  return std::move(out_);
}

}  // namespace

Guest make_guest(const ProgramModel& model) {
  Guest guest;
  const auto module = model.effective_module_range();
  guest.map_region(module, false);
  for (auto p = page_of(module.lo); module.hi > module.lo && p <= page_of(module.hi - 1); ++p) {
    if (p == model.entry_page && !model.entry_present) continue;
    guest.demand_page(page_base(p));
  }
  guest.map_region({page_base(model.entry_page), page_base(model.entry_page + 1)}, false);
  if (model.entry_present) guest.demand_page(model.entry_address());
  guest.map_region({model.sp_init - kStackReserve, model.sp_init + kPageSize}, false);
  guest.map_region({kKernelCodeBase, kKernelCodeBase + 0x100000}, false);
  for (const auto& region : model.regions) guest.map_region(region.range, region.present);
  return guest;
}

RunResult simulate(Guest& guest, const ProgramModel& model, const TrapConfig& config) {
  return Machine(guest, model, config).execute();
}

TraceLog run(Guest& guest, const ProgramModel& model, const TrapConfig& config) {
  return simulate(guest, model, config).log;
}

EntryCapture capture_entry_point(Guest& guest, const ProgramModel& model, TrapConfig config) {
  config.capture_entry = true;
  auto result = simulate(guest, model, config);
  if (!result.entry_address)
    throw EntryNotReached(fmt::format("model finished without executing entry page {:#x}",
                                      page_base(model.entry_page)));
  EntryCapture capture;
  capture.entry_address = *result.entry_address;
  capture.prefix.module_range = result.log.module_range;
  for (auto& ev : result.log.events) {
    const bool last = ev.tag == EventTag::Entry;
    capture.prefix.events.push_back(std::move(ev));
    if (last) break;
  }
  return capture;
}

std::vector<ModeTransition> mbec_transition_detect(Guest& guest, const ProgramModel& model,
                                                   TrapConfig config) {
  config.transitions = TransitionMode::Mbec;
  return simulate(guest, model, config).transitions;
}

std::vector<ModeTransition> legacy_transition_detect(Guest& guest, const ProgramModel& model,
                                                     TrapConfig config) {
  config.transitions = TransitionMode::Legacy;
  return simulate(guest, model, config).transitions;
}

TraceLog interleave_round_robin(const std::vector<TraceLog>& logs) {
  TraceLog merged;
  bool have_range = false;
  for (const auto& log : logs) {
    if (log.module_range.empty()) continue;
    if (!have_range) {
      merged.module_range = log.module_range;
      have_range = true;
    } else {
      merged.module_range.lo = std::min(merged.module_range.lo, log.module_range.lo);
      merged.module_range.hi = std::max(merged.module_range.hi, log.module_range.hi);
    }
  }
  std::vector<std::size_t> cursor(logs.size(), 0);
  bool progress = true;
  while (progress) {
    progress = false;
    for (std::size_t i = 0; i < logs.size(); ++i) {
      if (cursor[i] >= logs[i].events.size()) continue;
      merged.events.push_back(logs[i].events[cursor[i]++]);
      progress = true;
    }
  }
  for (std::size_t i = 0; i < merged.events.size(); ++i) merged.events[i].seq = i;
  return merged;
}

}  // namespace memtrace::sim
