#include <algorithm>
#include <map>

#include "memtrace/allocators.hpp"
#include "memtrace/recon.hpp"

namespace memtrace::recon {

std::string_view to_string(AllocationSource source) {
  switch (source) {
    case AllocationSource::HeapHook: return "heap-hook";
    case AllocationSource::CallParam: return "call-param";
    case AllocationSource::StackPattern: return "stack-pattern";
  }
  return "?";
}

std::vector<std::uint64_t> CallRecord::params() const {
  std::vector<std::uint64_t> out;
  const std::size_t regs = std::min<std::size_t>(param_count, 4);
  out.assign(reg_params.begin(), reg_params.begin() + regs);
  out.insert(out.end(), stack_params.begin(), stack_params.end());
  return out;
}

KnownMemory KnownMemory::from_log(const TraceLog& log,
                                  const std::vector<AllocationRecord>& allocations) {
  KnownMemory known;
  if (!log.module_range.empty()) known.add_range(log.module_range);
  for (const auto& rec : allocations)
    if (rec.size > 0) known.add_range({rec.base, rec.base + rec.size});
  for (const auto& ev : log.events)
    if (ev.kind != AccessKind::Execute && ev.tag == EventTag::None) known.add_page_of(ev.address);
  return known;
}

void KnownMemory::add_range(AddressRange range) {
  if (!range.empty()) ranges_.push_back(range);
}

void KnownMemory::add_page_of(Address a) { pages_.insert(a / kPageSize); }

bool KnownMemory::contains(Address a) const {
  if (pages_.contains(a / kPageSize)) return true;
  return std::any_of(ranges_.begin(), ranges_.end(),
                     [a](const AddressRange& r) { return r.contains(a); });
}

namespace {

bool is_call_push(const AccessEvent& ev) {
  return ev.kind == AccessKind::Write &&
         (ev.instr.category == InstrCategory::Call || ev.instr.category == InstrCategory::ApiCall);
}

std::size_t index_of(const TraceLog& log, const AccessEvent& ev) {
  auto it = std::lower_bound(log.events.begin(), log.events.end(), ev.seq,
                             [](const AccessEvent& e, std::uint64_t seq) { return e.seq < seq; });
  if (it == log.events.end() || it->seq != ev.seq)
    throw std::invalid_argument("event is not part of the trace");
  return static_cast<std::size_t>(it - log.events.begin());
}

std::vector<std::uint64_t> stack_params_before(const TraceLog& log, std::size_t call_index) {
  const AccessEvent& call = log.events[call_index];
  const Address sp_at_call = call.address + 8;
  std::map<std::uint64_t, std::uint64_t> slots;  // slot index -> latest value
  for (std::size_t i = call_index; i-- > 0;) {
    const AccessEvent& ev = log.events[i];
    if (ev.thread_id != call.thread_id) continue;
    if (is_call_push(ev) || ev.instr.category == InstrCategory::Ret) break;
    if (ev.kind != AccessKind::Write || ev.operand_size != 8 || !ev.value) continue;
    const Address first = sp_at_call + kFirstStackArgSlot;
    if (ev.address < first || (ev.address - first) % 8 != 0) continue;
    slots.try_emplace((ev.address - first) / 8, *ev.value);
  }
  std::vector<std::uint64_t> params;
  for (std::uint64_t k = 0; slots.contains(k); ++k) params.push_back(slots.at(k));
  return params;
}

CallRecord recover_call_at(const TraceLog& log, std::size_t index, const KnownMemory& known) {
  const AccessEvent& ev = log.events[index];
  CallRecord rec;
  rec.callee = ev.instr.callee.value_or("");
  rec.category = ev.instr.category;
  rec.seq = ev.seq;
  rec.thread_id = ev.thread_id;
  rec.site_rip = ev.rip;
  if (ev.instr.category == InstrCategory::Syscall) return rec;

  const auto& regs = ev.instr.register_args;
  const std::size_t reg_count = regs ? regs->size() : 0;
  for (std::size_t i = 0; i < reg_count && i < 4; ++i) rec.reg_params[i] = (*regs)[i];
  rec.stack_params = stack_params_before(log, index);
  rec.param_count = rec.stack_params.empty() ? reg_count : 4 + rec.stack_params.size();
  rec.return_address = ev.value.value_or(ev.rip);
  for (auto value : rec.params()) rec.pointer_flags.push_back(known.contains(value));
  return rec;
}

}  // namespace

std::vector<AllocationRecord> find_allocations(const TraceLog& log,
                                               const std::set<std::string>& allocator_names) {
  std::vector<AllocationRecord> out;
  const KnownMemory none;
  for (std::size_t i = 0; i < log.events.size(); ++i) {
    const AccessEvent& call = log.events[i];
    if (!is_call_push(call) || !call.instr.callee || !allocator_names.contains(*call.instr.callee))
      continue;

    // The matching return pops the slot the call pushed.
    const AccessEvent* ret = nullptr;
    for (std::size_t j = i + 1; j < log.events.size(); ++j) {
      const AccessEvent& ev = log.events[j];
      if (ev.thread_id == call.thread_id && ev.instr.category == InstrCategory::Ret &&
          ev.address == call.address) {
        ret = &ev;
        break;
      }
    }
    if (!ret || !ret->value) continue;

    AllocationRecord rec;
    rec.base = *ret->value;
    rec.source = AllocationSource::HeapHook;
    rec.site_rip = call.rip;
    rec.return_address = call.value;
    if (const AllocatorInfo* info = find_allocator(*call.instr.callee)) {
      const auto params = recover_call_at(log, i, none).params();
      rec.size = allocation_size(*info, params).value_or(0);
    }
    out.push_back(rec);
  }
  return out;
}

std::vector<AllocationRecord> find_allocations(const TraceLog& log) {
  return find_allocations(log, default_allocator_names());
}

CallRecord recover_call(const TraceLog& log, const AccessEvent& call_event,
                        const KnownMemory& known) {
  if (!is_call_like(call_event.instr.category))
    throw std::invalid_argument("recover_call: event is not a call");
  return recover_call_at(log, index_of(log, call_event), known);
}

CallRecord recover_call(const TraceLog& log, const AccessEvent& call_event) {
  return recover_call(log, call_event, KnownMemory::from_log(log, find_allocations(log)));
}

std::vector<CallRecord> recover_calls(const TraceLog& log, const KnownMemory& known) {
  std::vector<CallRecord> out;
  for (std::size_t i = 0; i < log.events.size(); ++i) {
    const auto& ev = log.events[i];
    if (is_call_push(ev) || ev.instr.category == InstrCategory::Syscall)
      out.push_back(recover_call_at(log, i, known));
  }
  return out;
}

std::vector<CallRecord> recover_calls(const TraceLog& log) {
  return recover_calls(log, KnownMemory::from_log(log, find_allocations(log)));
}

std::vector<AllocationRecord> find_stack_buffers(const TraceLog& log) {
  std::vector<AllocationRecord> out;
  for (const auto& [tid, events] : split_by_thread(log)) {
    for (std::size_t i = 0; i < events.size(); ++i) {
      const AccessEvent& ev = events[i];
      if (ev.instr.category == InstrCategory::SubSp && ev.value && *ev.value > kShadowSpace) {
        // A frame that ends in a call keeps its lowest 0x20 bytes as shadow
        // space for the callee.
        std::uint64_t shadow = 0;
        for (std::size_t j = i + 1; j < events.size(); ++j) {
          const auto cat = events[j].instr.category;
          if (cat == InstrCategory::SubSp || cat == InstrCategory::Ret) break;
          if (is_call_push(events[j])) {
            shadow = kShadowSpace;
            break;
          }
        }
        out.push_back({ev.address + shadow, *ev.value - shadow, AllocationSource::StackPattern,
                       ev.rip, std::nullopt});
      }

      if (ev.instr.category == InstrCategory::XmmZeroStore && ev.kind == AccessKind::Write &&
          (i == 0 || events[i - 1].instr.category != InstrCategory::XmmZeroStore ||
           events[i - 1].address + kXmmStoreWidth != ev.address)) {
        std::size_t run = 1;
        while (i + run < events.size() &&
               events[i + run].instr.category == InstrCategory::XmmZeroStore &&
               events[i + run].kind == AccessKind::Write &&
               events[i + run].address == ev.address + kXmmStoreWidth * run)
          ++run;
        out.push_back({ev.address, kXmmStoreWidth * run, AllocationSource::StackPattern, ev.rip,
                       std::nullopt});
      }
    }
  }
  return out;
}

std::vector<AllocationRecord> collect_bases(const TraceLog& log) {
  auto heap = find_allocations(log);
  auto stack = find_stack_buffers(log);

  std::vector<AllocationRecord> sized = heap;
  sized.insert(sized.end(), stack.begin(), stack.end());
  const auto known = KnownMemory::from_log(log, sized);

  auto rank = [](AllocationSource s) {
    switch (s) {
      case AllocationSource::HeapHook: return 0;
      case AllocationSource::StackPattern: return 1;
      case AllocationSource::CallParam: return 2;
    }
    return 3;
  };
  std::map<Address, AllocationRecord> merged;
  auto offer = [&](const AllocationRecord& rec) {
    auto [it, inserted] = merged.try_emplace(rec.base, rec);
    if (!inserted && rank(rec.source) < rank(it->second.source)) it->second = rec;
  };
  for (const auto& rec : heap) offer(rec);
  for (const auto& rec : stack) offer(rec);

  const auto allocator_names = default_allocator_names();
  for (const auto& call : recover_calls(log, known)) {
    if (allocator_names.contains(call.callee)) continue;
    const auto params = call.params();
    for (std::size_t k = 0; k < params.size(); ++k)
      if (call.pointer_flags[k])
        offer({params[k], 0, AllocationSource::CallParam, call.site_rip, std::nullopt});
  }

  std::vector<AllocationRecord> out;
  out.reserve(merged.size());
  for (auto& [_, rec] : merged) out.push_back(rec);
  return out;
}

}  // namespace memtrace::recon
