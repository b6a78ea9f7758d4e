#include <algorithm>
#include <string>
#include <vector>

#include "doctest.h"
#include "fixtures.hpp"
#include "unistack/codegen.hpp"
#include "unistack/corpus.hpp"
#include "unistack/driver.hpp"
#include "unistack/layout.hpp"

using namespace unistack;
using mir::Op;

namespace {

mir::MachineInstr instr(mir::Op op) {
  mir::MachineInstr mi;
  mi.op = op;
  return mi;
}

// A function of `fill` bytes of NOPs followed by one call (callsite 0).
mir::MachineFunction filler_then_call(Target t, std::uint32_t fill) {
  mir::MachineFunction mf;
  mf.name = "f";
  mf.target = t;
  for (std::uint32_t b = 0; b < fill; b += layout::nop_size(t)) mf.code.push_back(instr(Op::Nop));
  mir::MachineInstr call;
  call.op = Op::Call;
  call.sym = "g";
  call.callsite = 0;
  mf.code.push_back(call);
  mf.callsites = {0};
  layout::assign_sizes(mf);
  return mf;
}

std::pair<mir::MachineFunction, mir::MachineFunction> sized_pair(const ir::Program& p, const char* name,
                                                                 const codegen::UnifyOptions& o = {}) {
  const auto& f = *p.find_function(name);
  auto x = codegen::compile_function(p, f, Target::X64, o);
  auto a = codegen::compile_function(p, f, Target::A64, o);
  layout::assign_sizes(x);
  layout::assign_sizes(a);
  return {x, a};
}

// main first so it sits at the code base.
const char* kCallAfterStore = R"(
func main() -> i64 {
  local x: i64
entry:
  %xa = addr-of-local x
  store %xa, 1
  %v0 = load %xa
  emit %v0
  %r = call f(%xa)
  emit %r
  ret 0
}
func f(a: i64) -> i64 {
entry:
  ret %a
}
)";

}  // namespace

TEST_CASE("a64 instructions are 4 bytes, x64 sizes follow the table") {
  mir::MachineInstr mi;
  for (Op op : {Op::Nop, Op::Call, Op::Jmp, Op::Add, Op::Load, Op::Ret}) {
    mi.op = op;
    CHECK(layout::instr_size(mi, Target::A64) == 4);
  }
  auto x = [](mir::MachineInstr m) { return layout::instr_size(m, Target::X64); };
  CHECK(x(instr(Op::Nop)) == 1);
  CHECK(x(instr(Op::Call)) == 5);
  CHECK(x(instr(Op::Jmp)) == 5);
  CHECK(x(instr(Op::Push)) == 1);
  CHECK(x(instr(Op::Pop)) == 1);
  CHECK(x(instr(Op::Add)) == 3);
  CHECK(x(instr(Op::GlobalAddr)) == 7);
  auto ld = instr(Op::Load);
  ld.mem.disp = -16;
  CHECK(x(ld) == 4);
  ld.mem.disp = -4096;
  CHECK(x(ld) == 7);
  auto mv = instr(Op::MovImm);
  mv.imm = 0x123456789;
  CHECK(x(mv) == 10);
}

TEST_CASE("symbol addresses") {
  auto one = layout::assign_symbol_addresses({{"main", 30}}, {{"main", 44}});
  REQUIRE(one.size() == 1);
  CHECK(one[0].second == 0x1000);

  auto two = layout::assign_symbol_addresses({{"a", 40}, {"b", 8}}, {{"a", 96}, {"b", 8}});
  REQUIRE(two.size() == 2);
  CHECK(two[1].second == 0x1000 + (96 + kSymbolGranule - 1) / kSymbolGranule * kSymbolGranule);
  CHECK(two[1].second == 0x1080);

  CHECK(layout::assign_symbol_addresses({}, {}).empty());
}

TEST_CASE("call after a store: three bytes apart before alignment, equal after") {
  auto p = fixtures::parse(kCallAfterStore);
  auto [x, a] = sized_pair(p, "main");
  auto xo = layout::return_offsets(x);
  auto ao = layout::return_offsets(a);
  REQUIRE(xo.size() == 1);
  CHECK(kCodeBase + xo[0] == 0x1025);
  CHECK(kCodeBase + ao[0] == 0x1028);

  auto plan = layout::align_callsites(x, a);
  REQUIRE(plan.size() == 1);
  CHECK(plan[0].target == Target::X64);
  CHECK(plan[0].pad == 3);
  CHECK(plan[0].x64_prefix == 0);
  CHECK(layout::return_offsets(x, plan)[0] == layout::return_offsets(a, plan)[0]);

  auto b = driver::build(p);
  const auto* cx = b.link.x64.callsite(0);
  const auto* ca = b.link.a64.callsite(0);
  REQUIRE(cx);
  REQUIRE(ca);
  CHECK(cx->return_addr == 0x1028);
  CHECK(ca->return_addr == 0x1028);
  CHECK(cx->call_addr == 0x1023);
}

TEST_CASE("no padding when return offsets already agree") {
  auto plan = layout::align_callsites(filler_then_call(Target::X64, 7), filler_then_call(Target::A64, 8));
  REQUIRE(plan.size() == 1);
  CHECK(plan[0].pad == 0);
  CHECK_FALSE(plan[0].target);
}

TEST_CASE("a64 shortfall of 6 bytes splits as 8 + 2") {
  // X64 returns at 9 + 5 = 14, A64 at 4 + 4 = 8.
  auto x = filler_then_call(Target::X64, 9);
  auto a = filler_then_call(Target::A64, 4);
  REQUIRE(layout::return_offsets(x)[0] - layout::return_offsets(a)[0] == 6);

  // Enumerate splits: A64 adds a (multiple of 4), X64 adds b, ends equal,
  // total minimal.
  std::uint32_t best_a = 0, best_b = 0, best = ~0u;
  for (std::uint32_t ea = 0; ea <= 32; ea += 4)
    for (std::uint32_t eb = 0; eb <= 32; ++eb)
      if (8 + ea == 14 + eb && ea + eb < best) best = ea + eb, best_a = ea, best_b = eb;
  REQUIRE(best_a == 8);
  REQUIRE(best_b == 2);

  auto plan = layout::align_callsites(x, a);
  REQUIRE(plan.size() == 1);
  CHECK(plan[0].target == Target::A64);
  CHECK(plan[0].pad == best_a);
  CHECK(plan[0].x64_prefix == best_b);
  CHECK(layout::return_offsets(x, plan)[0] == layout::return_offsets(a, plan)[0]);
}

TEST_CASE("jump over padding") {
  auto run = [](Target t, std::uint32_t pad) {
    layout::PaddingPlan plan{{0, t, pad, false, 0}};
    return layout::apply_jump_over(plan)[0];
  };
  auto p17 = run(Target::X64, 17);
  CHECK(p17.uses_jump);
  CHECK(p17.pad == 17);
  CHECK_FALSE(run(Target::X64, 5).uses_jump);
  CHECK(run(Target::X64, 6).uses_jump);
  CHECK(run(Target::A64, 8).uses_jump);
  CHECK_FALSE(run(Target::A64, 4).uses_jump);

  // A 17-byte pad becomes a 5-byte jump and 12 bytes of NOPs.
  auto x = filler_then_call(Target::X64, 0);
  layout::apply_padding(x, {p17}, {});
  REQUIRE(x.code.size() == 1 + 12 + 1);
  CHECK(x.code[0].op == Op::JmpPad);
  CHECK(x.code[0].size == 5);
  std::uint32_t nop_bytes = 0;
  for (std::size_t i = 1; i + 1 < x.code.size(); ++i) {
    CHECK(x.code[i].op == Op::Nop);
    nop_bytes += x.code[i].size;
  }
  CHECK(nop_bytes == 12);

  auto a = filler_then_call(Target::A64, 0);
  layout::apply_padding(a, {run(Target::A64, 8)}, {});
  REQUIRE(a.code.size() == 3);
  CHECK(a.code[0].op == Op::JmpPad);
  CHECK(a.code[0].size == 4);
  CHECK(a.code[1].op == Op::Nop);
  CHECK(a.code[1].size == 4);
}

TEST_CASE("fixpoint without block alignment is a single pass") {
  auto p = fixtures::parse(fixtures::kHotFunc);
  auto [x, a] = sized_pair(p, "main");
  auto fp = layout::accumulated_padding_fixpoint(x, a, false);
  CHECK(fp.converged);
  CHECK(fp.iterations == 1);
  CHECK(fp.plan == layout::apply_jump_over(layout::align_callsites(x, a)));
  CHECK(fp.x64_blocks.empty());
  CHECK(fp.a64_blocks.empty());
}

TEST_CASE("a loop header shifts a later callsite and the fixpoint settles") {
  auto p = fixtures::parse(fixtures::kHotFunc);
  auto [x, a] = sized_pair(p, "main");
  REQUIRE(layout::loop_headers(x).size() == 1);
  auto fp = layout::accumulated_padding_fixpoint(x, a, true);
  CHECK(fp.converged);
  CHECK(fp.iterations >= 2);
  CHECK(fp.iterations <= 3);
  CHECK(layout::return_offsets(x, fp.plan, fp.x64_blocks) == layout::return_offsets(a, fp.plan, fp.a64_blocks));

  // Applying the result puts every loop header on a 16-byte boundary.
  for (auto mf : {x, a}) {
    const auto& blocks = mf.target == Target::X64 ? fp.x64_blocks : fp.a64_blocks;
    auto headers = layout::loop_headers(mf);
    layout::apply_padding(mf, fp.plan, blocks);
    std::uint64_t off = 0;
    for (const auto& mi : mf.code) {
      if (mi.op == Op::Label && std::count(headers.begin(), headers.end(), mi.label)) CHECK(off % 16 == 0);
      off += mi.size;
    }
  }
}

TEST_CASE("fixpoint converges on the corpus") {
  corpus::CorpusSpec s;
  s.seed = 8;
  s.count = 100;
  codegen::UnifyOptions o;
  o.block_align = true;
  int worst = 0;
  for (const auto& p : corpus::generate_corpus(s)) {
    auto b = driver::build(p, o);
    for (const auto& fp : b.link.fixpoints) {
      CHECK(fp.converged);
      worst = std::max(worst, fp.iterations);
    }
    CHECK(b.report.equivalent);
  }
  CHECK(worst <= layout::kFixpointCap);
}

TEST_CASE("linked images agree on symbols and return addresses") {
  auto check = [](const driver::Build& b) {
    const auto &x = b.link.x64, &a = b.link.a64;
    REQUIRE(x.functions.size() == a.functions.size());
    for (std::size_t i = 0; i < x.functions.size(); ++i) {
      CHECK(x.functions[i].name == a.functions[i].name);
      CHECK(x.functions[i].addr == a.functions[i].addr);
      CHECK(x.functions[i].addr % kSymbolGranule == 0);
    }
    CHECK(x.globals == a.globals);
    REQUIRE(x.callsites.size() == a.callsites.size());
    for (std::size_t i = 0; i < x.callsites.size(); ++i) CHECK(x.callsites[i].return_addr == a.callsites[i].return_addr);
    for (const auto& pad : b.link.plan) {
      if (pad.target) CHECK(pad.uses_jump == (pad.pad > layout::jump_size(*pad.target)));
      else CHECK(pad.pad == 0);
      CHECK(pad.x64_prefix <= 3);
    }
    // Decoding from each function start visits exactly the emitted sizes.
    for (const auto* img : {&x, &a})
      for (const auto& fs : img->functions) {
        std::uint64_t pc = fs.addr;
        while (pc < fs.addr + fs.size) {
          const auto* mi = img->at(pc);
          REQUIRE(mi);
          REQUIRE(mi->size > 0);
          pc += mi->size;
        }
        CHECK(pc == fs.addr + fs.size);
      }
  };
  check(driver::build(fixtures::parse(fixtures::kHotFunc)));
  auto empty = driver::build(fixtures::parse("func main() { ret 0 }"));
  CHECK(empty.link.x64.functions.size() == 1);
  CHECK(empty.link.x64.functions[0].addr == 0x1000);
  check(empty);
  corpus::CorpusSpec s;
  s.seed = 4;
  s.count = 40;
  for (const auto& p : corpus::generate_corpus(s)) check(driver::build(p));
}

TEST_CASE("linker refuses mismatched callsite lists") {
  auto p = fixtures::parse(fixtures::kHotFunc);
  auto xs = codegen::compile_program(p, Target::X64);
  auto as = codegen::compile_program(p, Target::A64);
  as[1].callsites.push_back(99);
  CHECK_THROWS_AS(layout::link(p, xs, as, {}, 0), layout::LayoutError);
}
