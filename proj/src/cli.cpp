#include "memtrace/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "memtrace/callseq.hpp"
#include "memtrace/layout.hpp"
#include "memtrace/model.hpp"
#include "memtrace/recon.hpp"
#include "memtrace/signature.hpp"
#include "memtrace/simulator.hpp"
#include "memtrace/trace.hpp"

namespace memtrace::cli {

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  std::vector<std::string> inputs;
  std::string out_path;
  std::string base_text;
  std::string size_text;
  std::string rules_path;
  std::optional<std::uint64_t> tau;
  std::optional<double> threshold;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_output(const std::string& path, const std::string& text, std::ostream& fallback) {
  if (path.empty()) {
    fallback << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write " + path);
  out << text;
}

std::optional<Address> parse_base(const std::string& text) {
  if (text.empty()) return std::nullopt;
  if (!(text.starts_with("0x") || text.starts_with("0X")))
    throw UsageError("--base must be a hex address such as 0x1000, got '" + text + "'");
  const auto v = parse_u64(text);
  if (!v) throw UsageError("--base must be a hex address such as 0x1000, got '" + text + "'");
  return v;
}

std::optional<std::uint64_t> parse_size(const std::string& text) {
  if (text.empty()) return std::nullopt;
  const auto v = parse_u64(text);
  if (!v || *v == 0) throw UsageError("--size must be a positive number, got '" + text + "'");
  return v;
}

std::uint64_t resolve_tau(const Options& opt, const Environment& env,
                          std::optional<std::uint64_t> from_signature = std::nullopt) {
  if (opt.tau) return *opt.tau;
  if (env.tau) {
    const auto v = parse_u64(*env.tau);
    if (!v) throw UsageError("MEMTRACE_TAU must be a non-negative integer, got '" + *env.tau + "'");
    return *v;
  }
  return from_signature.value_or(signature::kDefaultTau);
}

struct LoadedPattern {
  AddressPattern pattern;
  std::optional<std::uint64_t> tau_default;
};

// A file holding a single JSON object with "offsets" is a signature;
// anything else is read as a trace.
LoadedPattern load_pattern(const std::string& path) {
  const std::string text = slurp(path);
  const auto doc = nlohmann::json::parse(text, nullptr, false);
  if (!doc.is_discarded() && doc.is_object() && doc.contains("offsets")) {
    const auto sig = signature::signature_from_json(text);
    return {signature::to_pattern(sig), sig.tau_default};
  }
  const TraceLog log = parse_trace(std::string_view(text));
  return {signature::extract_pattern(log, recon::collect_bases(log)), std::nullopt};
}

int cmd_simulate(const Options& opt, std::ostream& out, std::ostream& err) {
  const sim::ProgramModel model = sim::read_model_file(opt.inputs.at(0));
  sim::TrapConfig config;
  if (model.trap) {
    config = *model.trap;
  } else {
    config.transitions = sim::TransitionMode::Mbec;
    config.capture_entry = true;
  }
  sim::Guest guest = sim::make_guest(model);
  const sim::RunResult result = sim::simulate(guest, model, config);
  const std::string text = serialize_trace(result.log);
  if (opt.out_path.empty()) {
    out << text;
    err << fmt::format("{} events\n", result.log.events.size());
  } else {
    write_output(opt.out_path, text, out);
    out << fmt::format("{} events\n", result.log.events.size());
  }
  return kExitOk;
}

int cmd_reconstruct(const Options& opt, std::ostream& out, std::ostream& err) {
  const auto base = parse_base(opt.base_text);
  const auto size = parse_size(opt.size_text);
  const TraceLog log = read_trace_file(opt.inputs.at(0));

  std::vector<std::pair<Address, std::optional<std::uint64_t>>> targets;
  if (base) {
    targets.emplace_back(*base, size);
  } else {
    for (const auto& rec : recon::collect_bases(log))
      targets.emplace_back(rec.base, rec.size ? std::optional(rec.size) : size);
    if (targets.empty()) err << "warning: no allocation bases found; pass --base\n";
  }

  std::string reports;
  for (const auto& [b, s] : targets) {
    const auto layout = recon::reconstruct_layout(log, b, s);
    for (const auto& w : layout.warnings) err << "warning: " << w << "\n";
    out << recon::render_c(layout);
    reports += recon::layout_to_json(layout);
  }
  if (!opt.out_path.empty()) write_output(opt.out_path, reports, out);
  return kExitOk;
}

int cmd_sign(const Options& opt, const Environment& env, std::ostream& out) {
  const auto base = parse_base(opt.base_text);
  const auto size = parse_size(opt.size_text);
  const TraceLog log = read_trace_file(opt.inputs.at(0));
  std::vector<recon::AllocationRecord> bases;
  if (base)
    bases.push_back({*base, size.value_or(0), recon::AllocationSource::CallParam, 0, std::nullopt});
  else
    bases = recon::collect_bases(log);
  const auto pattern = signature::extract_pattern(log, bases);
  const auto sig = signature::make_signature(pattern, resolve_tau(opt, env));
  write_output(opt.out_path, signature::signature_to_json(sig), out);
  return kExitOk;
}

int cmd_match(const Options& opt, const Environment& env, std::ostream& out) {
  const auto sig = load_pattern(opt.inputs.at(0));
  const auto target = load_pattern(opt.inputs.at(1));
  const auto tau = resolve_tau(opt, env, sig.tau_default);
  const auto report = signature::match(sig.pattern, target.pattern, tau,
                                         opt.threshold.value_or(signature::kDefaultThreshold));
  write_output(opt.out_path, signature::match_report_to_json(report), out);
  return report.verdict ? kExitOk : kExitNoMatch;
}

int cmd_diff(const Options& opt, const Environment& env, std::ostream& out, std::ostream& err) {
  const auto a = load_pattern(opt.inputs.at(0));
  const auto b = load_pattern(opt.inputs.at(1));
  const auto tau = resolve_tau(opt, env, a.tau_default);
  const auto report = signature::diff_modified(
      a.pattern.offsets, b.pattern.offsets, tau,
      opt.threshold.value_or(signature::kDefaultDiffThreshold));
  write_output(opt.out_path, signature::diff_report_to_json(report), out);
  if (report.declined) {
    err << fmt::format("not similar: ratio {:.4f} below threshold {:.4f}\n", report.ratio,
                       report.threshold);
    return kExitNoMatch;
  }
  return kExitOk;
}

int cmd_bases(const Options& opt, std::ostream& out) {
  const TraceLog log = read_trace_file(opt.inputs.at(0));
  std::string text;
  for (const auto& rec : recon::collect_bases(log))
    text += fmt::format("{:#x} size={:#x} source={} site={:#x}\n", rec.base, rec.size,
                        recon::to_string(rec.source), rec.site_rip);
  write_output(opt.out_path, text, out);
  return kExitOk;
}

int cmd_flags(const Options& opt, std::ostream& out) {
  const auto rules = opt.rules_path.empty() ? recon::evasive_technique_rules()
                                            : recon::read_rules_file(opt.rules_path);
  const TraceLog log = read_trace_file(opt.inputs.at(0));
  std::string text;
  for (const auto& hit : recon::flag_call_sequences(recon::recover_calls(log), rules))
    text += fmt::format("{}\ttid={}\tseq={}..{}\n", hit.rule, hit.thread_id, hit.first_seq,
                        hit.last_seq);
  write_output(opt.out_path, text, out);
  return kExitOk;
}

}  // namespace

Environment process_environment() {
  Environment env;
  if (const char* tau = std::getenv("MEMTRACE_TAU")) env.tau = tau;
  return env;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err,
        const Environment& env) {
  CLI::App app{"Memory-trace analysis: simulate, reconstruct layouts, sign and match"};
  app.name("memtrace");
  app.require_subcommand(1);
  Options opt;

  auto add_out = [&](CLI::App* sub) {
    sub->add_option("--out", opt.out_path, "Output path (default: stdout)");
  };
  auto add_tau = [&](CLI::App* sub) {
    sub->add_option("--tau", opt.tau, "Offset alignment threshold")->check(CLI::NonNegativeNumber);
  };
  auto add_threshold = [&](CLI::App* sub) {
    sub->add_option("--threshold", opt.threshold, "Similarity threshold")
        ->check(CLI::Range(0.0, 1.0));
  };

  auto* simulate = app.add_subcommand("simulate", "Run a program model and write its trace");
  simulate->add_option("model", opt.inputs, "Model file")->required()->expected(1);
  add_out(simulate);

  auto* reconstruct = app.add_subcommand("reconstruct", "Reconstruct a structure layout");
  reconstruct->add_option("trace", opt.inputs, "Trace file")->required()->expected(1);
  reconstruct->add_option("--base", opt.base_text, "Base address (hex)");
  reconstruct->add_option("--size", opt.size_text, "Window size");
  add_out(reconstruct);

  auto* sign = app.add_subcommand("sign", "Extract an address-pattern signature from a trace");
  sign->add_option("trace", opt.inputs, "Trace file")->required()->expected(1);
  sign->add_option("--base", opt.base_text, "Base address (hex)");
  sign->add_option("--size", opt.size_text, "Allocation size");
  add_tau(sign);
  add_out(sign);

  auto* match = app.add_subcommand("match", "Match a signature against a trace or signature");
  match->add_option("inputs", opt.inputs, "Signature, then target")->required()->expected(2);
  add_tau(match);
  add_threshold(match);
  add_out(match);

  auto* diff = app.add_subcommand("diff", "Localize modifications between two patterns");
  diff->add_option("inputs", opt.inputs, "Original, then modified")->required()->expected(2);
  add_tau(diff);
  add_threshold(diff);
  add_out(diff);

  auto* bases = app.add_subcommand("bases", "List discovered allocation bases");
  bases->add_option("trace", opt.inputs, "Trace file")->required()->expected(1);
  add_out(bases);

  auto* flags = app.add_subcommand("flags", "Flag known API-call sequences");
  flags->add_option("trace", opt.inputs, "Trace file")->required()->expected(1);
  flags->add_option("--rules", opt.rules_path, "Rules file (JSON)");
  add_out(flags);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (simulate->parsed()) return cmd_simulate(opt, out, err);
    if (reconstruct->parsed()) return cmd_reconstruct(opt, out, err);
    if (sign->parsed()) return cmd_sign(opt, env, out);
    if (match->parsed()) return cmd_match(opt, env, out);
    if (diff->parsed()) return cmd_diff(opt, env, out, err);
    if (bases->parsed()) return cmd_bases(opt, out);
    if (flags->parsed()) return cmd_flags(opt, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  return run(args, out, err, process_environment());
}

}  // namespace memtrace::cli
