#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "unistack/abi.hpp"
#include "unistack/bytes.hpp"
#include "unistack/codegen.hpp"
#include "unistack/corpus.hpp"
#include "unistack/driver.hpp"
#include "unistack/emu.hpp"
#include "unistack/image.hpp"
#include "unistack/layout.hpp"
#include "unistack/migrate.hpp"
#include "unistack/stackmap.hpp"

using namespace unistack;

namespace {

enum Exit { kOk = 0, kDivergence = 1, kUsage = 2, kInternal = 3 };

// Bad input from the user: missing files, unparsable programs, bad schedules.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::uint64_t seed = 1;
  std::uint64_t fuel = 10'000'000;
  bool block_align = false;
  bool no_remat = false, no_callsite_align = false, no_imm_unify = false, no_addr_restrict = false,
       no_two_addr = false, no_zero_rule = false;

  codegen::UnifyOptions options() const {
    codegen::UnifyOptions o;
    o.remat = !no_remat;
    o.callsite_align = !no_callsite_align;
    o.imm_unify = !no_imm_unify;
    o.addr_restrict = !no_addr_restrict;
    o.two_addr = !no_two_addr;
    o.zero_rule = !no_zero_rule;
    o.block_align = block_align;
    return o;
  }
};

bool is_image(const std::vector<std::uint8_t>& bytes) {
  static const char magic[] = "USTKIMG";
  return bytes.size() >= 8 && std::equal(magic, magic + 7, bytes.begin());
}

std::vector<std::uint8_t> slurp(const std::string& path) {
  if (!std::filesystem::exists(path)) throw UsageError("no such file: " + path);
  return read_file(path);
}

ir::Program parse_source(const std::vector<std::uint8_t>& bytes, const std::string& path) {
  auto r = ir::parse_program(std::string(bytes.begin(), bytes.end()));
  if (!r.ok()) {
    std::string msg = path + ": program does not parse";
    for (const auto& d : r.diagnostics) msg += "\n  " + ir::to_string(d);
    throw UsageError(msg);
  }
  auto diags = ir::validate(*r.program);
  if (!diags.empty()) {
    std::string msg = path + ": program is invalid";
    for (const auto& d : diags) msg += "\n  " + ir::to_string(d);
    throw UsageError(msg);
  }
  return *r.program;
}

ir::Program load_program(const std::string& path) {
  auto bytes = slurp(path);
  if (is_image(bytes)) throw UsageError(path + ": expected an IR program, found an image");
  return parse_source(bytes, path);
}

MachineImage load_image_file(const std::string& path) {
  auto bytes = slurp(path);
  if (!is_image(bytes)) throw UsageError(path + ": not an image container");
  MachineImage img = deserialize_image(bytes);
  img.index();
  return img;
}

Target parse_target_or_throw(const std::string& s) {
  auto t = parse_target(s);
  if (!t) throw UsageError("unknown target '" + s + "'");
  return *t;
}

// Both images of an input: an IR program is built, one or two image files are read.
std::pair<MachineImage, MachineImage> images_of(const std::vector<std::string>& inputs, const Globals& g) {
  if (inputs.size() == 1) {
    auto bytes = slurp(inputs[0]);
    if (is_image(bytes)) throw UsageError("two images are needed, or one IR program");
    auto b = driver::build(parse_source(bytes, inputs[0]), g.options());
    return {b.link.x64, b.link.a64};
  }
  if (inputs.size() != 2) throw UsageError("expected one IR program or two images");
  auto a = load_image_file(inputs[0]);
  auto b = load_image_file(inputs[1]);
  if (a.target == b.target) throw UsageError("both images are for " + std::string(target_name(a.target)));
  if (a.target == Target::A64) std::swap(a, b);
  return {a, b};
}

MachineImage image_for(const std::string& input, const std::optional<Target>& target, const Globals& g) {
  auto bytes = slurp(input);
  if (is_image(bytes)) {
    MachineImage img = deserialize_image(bytes);
    if (target && img.target != *target)
      throw UsageError(input + " is a " + std::string(target_name(img.target)) + " image");
    img.index();
    return img;
  }
  auto b = driver::build(parse_source(bytes, input), g.options());
  return target.value_or(Target::X64) == Target::X64 ? b.link.x64 : b.link.a64;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot write " + path);
  f << text;
}

std::string five(const emu::FivePoint& p) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  for (double v : {p.min, p.q1, p.median, p.q3, p.max}) os << std::setw(10) << v;
  return os.str();
}

int cmd_compile(const std::string& input, const std::string& target, const std::string& emit, const std::string& out,
                const Globals& g) {
  auto p = load_program(input);
  std::vector<Target> ts;
  if (target == "both") ts = {Target::X64, Target::A64};
  else ts = {parse_target_or_throw(target)};
  if (emit != "mir" && emit != "asm") throw UsageError("--emit must be mir or asm");
  std::ostringstream os;
  for (Target t : ts) {
    int cs = 0;
    for (const auto& f : p.functions) {
      mir::MachineFunction mf;
      if (emit == "mir") {
        mf = codegen::select_instructions(p, f, t, g.options(), cs);
      } else {
        mf = codegen::compile_function(p, f, t, g.options(), cs);
        layout::assign_sizes(mf);
      }
      cs += static_cast<int>(mf.callsites.size());
      os << mir::print_function(mf) << "\n";
    }
  }
  if (out.empty()) std::cout << os.str();
  else write_text(out, os.str());
  return kOk;
}

int cmd_link(const std::string& input, std::string prefix, bool strip, const Globals& g) {
  auto p = load_program(input);
  auto b = driver::build(p, g.options());
  if (prefix.empty()) prefix = std::filesystem::path(input).replace_extension().string();
  for (auto* img : {&b.link.x64, &b.link.a64}) {
    std::string path = prefix + "." + std::string(target_name(img->target)) + ".img";
    write_file(path, serialize_image(strip ? strip_stackmaps(*img) : *img));
    std::cout << "wrote " << path << " (" << img->text_bytes() << " text bytes)\n";
  }
  std::cout << "callsites " << b.link.x64.callsites.size() << ", pad bytes " << b.link.pad_bytes << "\n";
  std::cout << b.report.to_text();
  return b.report.equivalent ? kOk : kDivergence;
}

int cmd_verify(const std::vector<std::string>& inputs, const Globals& g) {
  auto [x, a] = images_of(inputs, g);
  if (!x.has_stackmaps || !a.has_stackmaps) throw UsageError("verification needs images with stackmap sections");
  auto rep = stackmap::verify_layout(x.stackmaps, a.stackmaps);
  std::cout << rep.to_text();
  return rep.equivalent ? kOk : kDivergence;
}

int cmd_run(const std::string& input, const std::string& target, const std::string& trace_path, const Globals& g) {
  std::optional<Target> t;
  if (!target.empty()) t = parse_target_or_throw(target);
  auto img = std::make_shared<const MachineImage>(image_for(input, t, g));
  auto s = emu::load_image(img);
  emu::Trace trace;
  auto r = emu::run(s, g.fuel, &trace);
  for (auto v : s.output) std::cout << v << "\n";
  if (!trace_path.empty()) write_text(trace_path, trace.to_text());
  if (r.status != emu::Status::Halted) {
    std::cerr << "status: " << emu::status_name(r.status);
    if (!r.fault.empty()) std::cerr << " (" << r.fault << ")";
    std::cerr << "\n";
    return kInternal;
  }
  return kOk;
}

int cmd_migrate(const std::vector<std::string>& inputs, const std::string& schedule, const std::string& dir,
                const Globals& g) {
  migrate::MigrationSchedule sched;
  try {
    sched = migrate::parse_schedule(schedule);
  } catch (const migrate::MigrateError& e) {
    throw UsageError(e.what());
  }
  for (std::size_t i = 1; i < sched.size(); ++i)
    if (sched[i].from != sched[i - 1].to)
      throw UsageError("schedule entry cs@" + std::to_string(sched[i].occurrence) + " migrates from " +
                       std::string(target_name(sched[i].from)) + " but execution is on " +
                       std::string(target_name(sched[i - 1].to)));
  auto [x, a] = images_of(inputs, g);
  auto xi = std::make_shared<const MachineImage>(x), ai = std::make_shared<const MachineImage>(a);
  Target start = sched.empty() ? Target::X64 : sched.front().from;
  migrate::MigrationOptions mo;
  mo.fuel = g.fuel;
  if (!dir.empty()) mo.checkpoint_dir = dir;
  auto r = migrate::migrate_run(xi, ai, start, sched, mo);

  auto native = emu::load_image(start == Target::X64 ? xi : ai);
  emu::run(native, g.fuel);

  for (auto v : r.output) std::cout << v << "\n";
  for (const auto& m : r.migrations)
    std::cerr << "migrated at cs@" << m.point.occurrence << " (callsite " << m.callsite << ") "
              << target_name(m.point.from) << ">" << target_name(m.point.to) << ": " << m.register_bytes
              << " register bytes, " << m.image_bytes << " checkpoint bytes, memory "
              << (m.memory_unchanged ? "unchanged" : "CHANGED") << "\n";
  for (const auto& u : r.unreached) std::cerr << "unreached: cs@" << u.occurrence << "\n";
  std::cerr << "status: " << emu::status_name(r.status) << ", " << r.migrations.size() << " migrations, output "
            << (r.output == native.output ? "matches" : "DIFFERS FROM") << " native run\n";
  if (r.status != emu::Status::Halted) return kInternal;
  return r.output == native.output ? kOk : kDivergence;
}

int cmd_stats(const std::vector<std::string>& inputs, const std::string& dump, const Globals& g) {
  auto [x, a] = images_of(inputs, g);
  std::ostringstream table, data;
  table << std::left << std::setw(8) << "target" << std::setw(13) << "metric" << std::right << std::setw(10) << "min"
        << std::setw(10) << "q1" << std::setw(10) << "median" << std::setw(10) << "q3" << std::setw(10) << "max"
        << "\n";
  int rc = kOk;
  std::optional<emu::StackStats> first;
  for (auto* img : {&x, &a}) {
    auto s = emu::load_image(*img);
    emu::Trace t;
    auto r = emu::run(s, g.fuel, &t);
    if (r.status != emu::Status::Halted) throw std::runtime_error("run did not halt: " + std::string(emu::status_name(r.status)));
    auto st = emu::stack_stats(t);
    std::string tn(target_name(img->target));
    table << std::left << std::setw(8) << tn << std::setw(13) << "frame-size" << five(st.frame_size) << "\n";
    table << std::left << std::setw(8) << tn << std::setw(13) << "frame-count" << five(st.frame_count) << "\n";
    for (auto [name, fp] : {std::pair{"frame_size", st.frame_size}, std::pair{"frame_count", st.frame_count}})
      data << tn << ' ' << name << ' ' << fp.min << ' ' << fp.q1 << ' ' << fp.median << ' ' << fp.q3 << ' ' << fp.max
           << '\n';
    data << tn << " samples " << st.samples << '\n';
    if (first && !(*first == st)) rc = kDivergence;
    first = st;
  }
  std::cout << table.str();
  if (rc != kOk) std::cout << "summaries differ between targets\n";
  if (!dump.empty()) write_text(dump, data.str());
  return rc;
}

int cmd_disasm(const std::string& input, const std::string& target, const Globals& g) {
  std::optional<Target> t;
  if (!target.empty()) t = parse_target_or_throw(target);
  std::cout << disassemble(image_for(input, t, g));
  return kOk;
}

int cmd_corpus(std::size_t count, const std::string& out, bool minimal, bool check, const Globals& g) {
  corpus::CorpusSpec spec = minimal ? corpus::CorpusSpec::minimal(g.seed) : corpus::CorpusSpec{};
  spec.seed = g.seed;
  spec.count = count;
  if (!out.empty()) std::filesystem::create_directories(out);
  int hits[6] = {0};
  std::size_t divergent = 0;
  for (std::size_t i = 0; i < count; ++i) {
    std::string text = corpus::generate_program_text(spec, i);
    if (!out.empty()) {
      std::ostringstream name;
      name << "prog-" << std::setw(4) << std::setfill('0') << i << ".ir";
      write_text((std::filesystem::path(out) / name.str()).string(), text);
    }
    auto p = corpus::generate_program(spec, i);
    auto b = driver::build(p, g.options());
    auto c = driver::coverage(b);
    bool flags[6] = {c.remat, c.callsite_align, c.imm_unify, c.addr_restrict, c.two_addr, c.zero_rule};
    for (int k = 0; k < 6; ++k) hits[k] += flags[k];
    if (!b.report.equivalent) {
      ++divergent;
      if (check) std::cout << "program " << i << ": " << b.report.divergences.size() << " divergent values\n";
    }
  }
  std::cout << "programs " << count << " (seed " << g.seed << ")\n";
  std::cout << "coverage (programs exercising each rule):\n";
  for (int k = 0; k < 6; ++k) std::cout << "  " << std::left << std::setw(16) << driver::kRuleNames[k] << hits[k] << "\n";
  std::cout << "divergent " << divergent << "\n";
  return check && divergent > 0 ? kDivergence : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Unified-layout compiler, linker, emulator and migration tool for the x64/a64 pair"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Corpus seed");
  app.add_option("--fuel", g.fuel, "Maximum instructions per run");
  app.add_flag("--block-align", g.block_align, "Align loop headers to 16 bytes and iterate padding to a fixpoint");
  app.add_flag("--no-remat", g.no_remat, "Disable address rematerialization");
  app.add_flag("--no-callsite-align", g.no_callsite_align, "Disable return-address alignment");
  app.add_flag("--no-imm-unify", g.no_imm_unify, "Use each target's own immediate rules");
  app.add_flag("--no-addr-restrict", g.no_addr_restrict, "Allow scaled-index addressing on x64");
  app.add_flag("--no-two-addr", g.no_two_addr, "Keep three-address arithmetic on a64");
  app.add_flag("--no-zero-rule", g.no_zero_rule, "Use each target's own zero materialization");

  std::string input, target, ctarget = "both", emit = "asm", out, trace, schedule, dir, dump;
  std::vector<std::string> inputs;
  bool strip = false, minimal = false, check = false;
  std::size_t count = 100;

  auto* compile = app.add_subcommand("compile", "Lower an IR program and print the machine listing");
  compile->add_option("input", input, "IR program")->required();
  compile->add_option("--target", ctarget, "x64, a64 or both");
  compile->add_option("--emit", emit, "mir (before allocation) or asm");
  compile->add_option("-o,--output", out, "Write the listing to a file");

  auto* link = app.add_subcommand("link", "Compile and link both images");
  link->add_option("input", input, "IR program")->required();
  link->add_option("-o,--output", out, "Output prefix; images go to PREFIX.x64.img and PREFIX.a64.img");
  link->add_flag("--strip-stackmaps", strip, "Omit the stackmap sections");

  auto* verify = app.add_subcommand("verify", "Cross-check the stackmaps of two images");
  verify->add_option("inputs", inputs, "Two images, or one IR program")->required()->expected(1, 2);

  auto* run = app.add_subcommand("run", "Execute an image and print its output");
  run->add_option("input", input, "Image or IR program")->required();
  run->add_option("--target", target, "Target to build when the input is IR (default x64)");
  run->add_option("--trace", trace, "Write the call trace to a file");

  auto* mig = app.add_subcommand("migrate", "Run with migrations between the targets");
  mig->add_option("inputs", inputs, "Two images, or one IR program")->required()->expected(1, 2);
  mig->add_option("--schedule", schedule, "cs@k:x64>a64,cs@m:a64>x64,...")->required();
  mig->add_option("--checkpoint-dir", dir, "Write each checkpoint here and read it back");

  auto* stats = app.add_subcommand("stats", "Stack frame size and count summaries");
  stats->add_option("inputs", inputs, "Two images, or one IR program")->required()->expected(1, 2);
  stats->add_option("--dump", dump, "Write the summaries as whitespace-separated records");

  auto* disasm = app.add_subcommand("disasm", "Print an image listing");
  disasm->add_option("input", input, "Image or IR program")->required();
  disasm->add_option("--target", target, "Target to build when the input is IR (default x64)");

  auto* abi_dump = app.add_subcommand("abi-dump", "Print the register role table");

  auto* corp = app.add_subcommand("corpus", "Generate the seeded program corpus and report rule coverage");
  corp->add_option("--count", count, "Number of programs");
  corp->add_option("--out", out, "Directory for the generated programs");
  corp->add_flag("--minimal", minimal, "Straight-line single-function programs");
  corp->add_flag("--check", check, "Exit 1 if any program is divergent under the given flags");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (compile->parsed()) return cmd_compile(input, ctarget, emit, out, g);
    if (link->parsed()) return cmd_link(input, out, strip, g);
    if (verify->parsed()) return cmd_verify(inputs, g);
    if (run->parsed()) return cmd_run(input, target, trace, g);
    if (mig->parsed()) return cmd_migrate(inputs, schedule, dir, g);
    if (stats->parsed()) return cmd_stats(inputs, dump, g);
    if (disasm->parsed()) return cmd_disasm(input, target, g);
    if (abi_dump->parsed()) {
      std::cout << abi::dump_table();
      return kOk;
    }
    if (corp->parsed()) return cmd_corpus(count, out, minimal, check, g);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kUsage;
}
