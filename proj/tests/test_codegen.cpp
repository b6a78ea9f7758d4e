#include <algorithm>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "fixtures.hpp"
#include "unistack/codegen.hpp"
#include "unistack/corpus.hpp"

using namespace unistack;
using abi::Role;
using mir::Op;

namespace {

const ir::Function& fn(const ir::Program& p, const char* name) {
  const auto* f = p.find_function(name);
  REQUIRE(f);
  return *f;
}

mir::MachineFunction compile(const ir::Program& p, const char* name, Target t,
                             const codegen::UnifyOptions& o = {}) {
  return codegen::compile_function(p, fn(p, name), t, o);
}

// (value name, spill offset) for every IR value that ended up in a slot.
std::multimap<std::string, std::int64_t> spill_set(const mir::MachineFunction& mf) {
  std::multimap<std::string, std::int64_t> out;
  for (const auto& b : mf.values) {
    if (b.kind != mir::ValueBinding::Kind::Vreg || b.vreg >= mf.vreg_loc.size()) continue;
    const auto& loc = mf.vreg_loc[b.vreg];
    if (loc.kind == mir::VregLocation::Kind::Spill) out.emplace(b.name, mf.frame.spills.at(loc.slot));
  }
  return out;
}

bool reads_callee_saved(const mir::MachineInstr& mi) {
  return mi.dst.is_phys() && (mi.dst.role() == Role::CS0 || mi.dst.role() == Role::CS1);
}

std::vector<ir::Program> small_corpus(std::uint64_t seed, std::size_t n) {
  corpus::CorpusSpec s;
  s.seed = seed;
  s.count = n;
  return corpus::generate_corpus(s);
}

const char* kCallTwo = R"(
global g: i64 = 9
func f(a: i64) -> i64 {
entry:
  ret %a
}
func main() -> i64 {
  local x: i64
entry:
  %z = const 0
  %xa = addr-of-local x
  %ga = addr-of-global g
  %v = load %ga
  %w = add %v, 1
  %r = call f(%v)
  store %xa, %z
  %s = add %r, %v
  %s2 = add %s, %w
  %t = add %s2, 5
  emit %t
  emit %z
  ret 0
}
)";

}  // namespace

TEST_CASE("arithmetic immediates match the encodable set") {
  constexpr std::uint64_t kLimit = 1ull << 25;
  std::vector<bool> enc(kLimit, false);
  for (std::uint64_t i = 0; i < 4096; ++i) {
    enc[i] = true;
    enc[i * 4096] = true;
  }
  std::uint64_t mismatches = 0;
  for (std::uint64_t v = 0; v < kLimit; ++v) mismatches += codegen::legal_arith_immediate(v) != enc[v];
  CHECK(mismatches == 0);
  CHECK(codegen::legal_arith_immediate(0));
  CHECK(codegen::legal_arith_immediate(4095));
  CHECK(codegen::legal_arith_immediate(4096));
  CHECK_FALSE(codegen::legal_arith_immediate(4097));
  CHECK_FALSE(codegen::legal_arith_immediate(~0ull));
  CHECK_FALSE(codegen::legal_arith_immediate(1ull << 24));
}

TEST_CASE("move immediates count 16-bit chunks") {
  CHECK(codegen::legal_move_immediate(0) == 1);
  CHECK(codegen::legal_move_immediate(0x10000) == 1);
  CHECK(codegen::legal_move_immediate(0x123456789ABCDEF0ull) == 4);
  std::mt19937_64 rng(11);
  for (int k = 0; k < 2000; ++k) {
    std::uint64_t v = rng();
    v &= rng() | rng();  // knock out some chunks
    int chunks = 0;
    for (int s = 0; s < 64; s += 16) chunks += ((v >> s) & 0xFFFF) != 0;
    CHECK(codegen::legal_move_immediate(v) == std::max(chunks, 1));
  }
}

TEST_CASE("local and global address forms") {
  auto p = fixtures::parse(kCallTwo);
  const auto& main = fn(p, "main");
  for (Target t : kTargets) {
    auto mf = codegen::select_instructions(p, main, t);
    CAPTURE(target_name(t));
    const auto* xa = mf.binding("xa");
    REQUIRE(xa);
    CHECK(xa->kind == mir::ValueBinding::Kind::RematAddr);
    int global_loads = 0;
    for (std::size_t i = 0; i < mf.code.size(); ++i) {
      const auto& mi = mf.code[i];
      if (mi.op == Op::GlobalAddr) {
        CHECK(mi.remat);
        REQUIRE(i + 1 < mf.code.size());
        if (mf.code[i + 1].op == Op::Load && mf.code[i + 1].mem.base == mi.dst) ++global_loads;
      }
    }
    CHECK(global_loads == 1);
  }
  // An address that escapes into a call is computed in a register.
  auto hot = fixtures::parse(fixtures::kHotFunc);
  auto x = codegen::select_instructions(hot, fn(hot, "main"), Target::X64);
  auto a = codegen::select_instructions(hot, fn(hot, "main"), Target::A64);
  for (const auto* mf : {&x, &a}) {
    int local_addrs = 0;
    for (const auto& mi : mf->code)
      if (mi.op == Op::LocalAddr) {
        CHECK(mi.remat);
        ++local_addrs;
      }
    CHECK(local_addrs == 1);
  }
  auto find = [](const mir::MachineFunction& mf, Op op) {
    return *std::find_if(mf.code.begin(), mf.code.end(), [&](const auto& mi) { return mi.op == op; });
  };
  CHECK(mir::render(find(x, Op::LocalAddr), Target::X64).rfind("lea ", 0) == 0);
  CHECK(mir::render(find(a, Op::LocalAddr), Target::A64).find("r29") != std::string::npos);
}

TEST_CASE("zero lives in a temporary on x64") {
  auto p = fixtures::parse(kCallTwo);
  auto mf = compile(p, "main", Target::X64);
  CHECK(mf.stats.zero_materializations > 0);
  int zero_defs = 0;
  for (const auto& mi : mf.code) {
    if (mi.op == Op::MovImm && mi.imm == 0) {
      ++zero_defs;
      REQUIRE(mi.dst.is_phys());
      CHECK_FALSE(reads_callee_saved(mi));
      CHECK(abi::info(mi.dst.role()).saved_by != abi::SavedBy::Callee);
    }
  }
  CHECK(zero_defs > 0);
}

TEST_CASE("a64 reads zero from the zero register") {
  auto p = fixtures::parse(kCallTwo);
  auto mf = compile(p, "main", Target::A64);
  bool saw = false;
  for (const auto& mi : mf.code) saw |= mi.op == Op::Mov && mi.src1 == mir::Reg::phys(Role::ZERO);
  CHECK(saw);
}

TEST_CASE("two-address conversion") {
  auto p = fixtures::parse(R"(
func main(a: i64, b: i64) -> i64 {
entry:
  %c = add %a, %b
  %d = add %c, %a
  %e = add %d, 7
  emit %d
  emit %e
  ret 0
}
)");
  const auto& f = fn(p, "main");
  auto sel = codegen::select_instructions(p, f, Target::A64);
  auto conv = codegen::convert_two_address(sel);
  auto vreg_of = [&](const char* v) { return mir::Reg::virt(conv.binding(v)->vreg); };

  auto def_of = [&](const mir::MachineFunction& mf, mir::Reg r) -> const mir::MachineInstr* {
    for (const auto& mi : mf.code)
      if (mi.dst == r && mi.op != Op::Mov) return &mi;
    return nullptr;
  };
  auto copies_into = [&](const mir::MachineFunction& mf, mir::Reg r) {
    int n = 0;
    for (const auto& mi : mf.code) n += mi.op == Op::Mov && mi.dst == r;
    return n;
  };

  // %c = %a + %b with %a still live: copy a into c, then c += b.
  const auto* c = def_of(conv, vreg_of("c"));
  REQUIRE(c);
  CHECK(c->src1 == c->dst);
  CHECK(copies_into(conv, vreg_of("c")) == 1);

  // %d = %c + %a with %c live afterwards? No: only %d and %e use it, so
  // %c is dead after and the add is done in place.
  const auto* d = def_of(conv, vreg_of("d"));
  REQUIRE(d);
  CHECK(d->src1 == d->dst);

  // %e = %d + 7: x64 picks its three-operand escape, a64 keeps three-address.
  const auto* e = def_of(conv, vreg_of("e"));
  REQUIRE(e);
  CHECK(e->op == Op::AddImm);
  CHECK(e->src1 != e->dst);
  auto x = codegen::select_instructions(p, f, Target::X64);
  const auto* xe = def_of(x, mir::Reg::virt(x.binding("e")->vreg));
  REQUIRE(xe);
  CHECK(xe->op == Op::AddImm);
  CHECK(xe->src1 != xe->dst);
  CHECK(conv.stats.three_address_escapes == 1);
  CHECK(conv.stats.two_address_rewrites >= 2);
}

TEST_CASE("hot_func: address of x is recomputed, no callee-saved register used") {
  auto p = fixtures::parse(fixtures::kHotFunc);
  for (Target t : kTargets) {
    auto mf = compile(p, "main", t);
    CHECK(mf.used_callee_saved.empty());
    CHECK(mf.frame.spills.empty());
    CHECK(mf.stats.remat_uses > 0);
  }
  codegen::UnifyOptions no_remat;
  no_remat.remat = false;
  auto x = compile(p, "main", Target::X64, no_remat);
  CHECK(std::count(x.used_callee_saved.begin(), x.used_callee_saved.end(), Role::CS0) == 1);
}

TEST_CASE("few live values need no spill slots") {
  auto p = fixtures::parse(R"(
func main(a: i64) -> i64 {
entry:
  %b = add %a, 1
  %c = add %a, 2
  %d = add %a, 3
  %e = add %b, %c
  %f = add %e, %d
  emit %f
  ret 0
}
)");
  for (Target t : kTargets) CHECK(compile(p, "main", t).frame.spills.empty());
}

TEST_CASE("twenty live values spill identically") {
  std::string text = "global g: i64[160]\nfunc main() -> i64 {\nentry:\n  %p = addr-of-global g\n";
  for (int i = 0; i < 20; ++i)
    text += "  %q" + std::to_string(i) + " = add %p, " + std::to_string(8 * i) + "\n  %v" + std::to_string(i) +
            " = load %q" + std::to_string(i) + "\n";
  text += "  %s0 = add %v0, %v1\n";
  for (int i = 2; i < 20; ++i)
    text += "  %s" + std::to_string(i - 1) + " = add %s" + std::to_string(i - 2) + ", %v" + std::to_string(i) + "\n";
  text += "  emit %s18\n  ret 0\n}\n";
  auto p = fixtures::parse(text);
  auto x = compile(p, "main", Target::X64);
  auto a = compile(p, "main", Target::A64);
  CHECK_FALSE(x.frame.spills.empty());
  CHECK(x.frame == a.frame);
  CHECK(spill_set(x) == spill_set(a));
  CHECK_FALSE(spill_set(x).empty());
}

TEST_CASE("frame of a leaf without locals") {
  auto p = fixtures::parse("func main() { ret 0 }");
  for (Target t : kTargets) {
    auto fl = compile(p, "main", t).frame;
    CHECK(fl.return_slot == 0);
    CHECK(fl.fp_slot == -8);
    CHECK(fl.callee_saved.empty());
    CHECK(fl.emergency_slot == -16);
    // retaddr + saved FP + emergency = 24 bytes, rounded to 16.
    CHECK(fl.size == (8 + 8 + 8 + 15) / 16 * 16);
    CHECK(fl.size == 32);
  }
}

TEST_CASE("small locals are aligned to at least 4 bytes") {
  auto p = fixtures::parse(R"(
func main() -> i64 {
  local a: i64
  local b: i64[4]
  local c: i64[1]
  local d: i64[4]
entry:
  ret 0
}
)");
  for (Target t : kTargets) {
    auto fl = compile(p, "main", t).frame;
    REQUIRE(fl.locals.size() == 4);
    // Slots below the emergency slot at -16: a[-24,-16), b[-28,-24),
    // c at -32 (1 byte rounded to 4-aligned), d[-36,-32).
    CHECK(fl.locals == std::vector<std::int64_t>{-24, -28, -32, -36});
    for (auto o : fl.locals) CHECK(o % 4 == 0);
  }
}

TEST_CASE("callee-saved area sits between FP and the emergency slot") {
  auto p = fixtures::parse(R"(
func f() -> i64 {
entry:
  ret 1
}
func main(a: i64, b: i64) -> i64 {
entry:
  %x = add %a, %b
  %y = mul %a, %b
  %r = call f()
  %s = add %x, %y
  %t = add %s, %r
  emit %t
  ret 0
}
)");
  auto x = compile(p, "main", Target::X64);
  auto a = compile(p, "main", Target::A64);
  using P = std::pair<Role, std::int64_t>;
  CHECK(x.frame.callee_saved == std::vector<P>{{Role::CS0, -16}, {Role::CS1, -24}});
  CHECK(x.frame.emergency_slot == -32);
  CHECK(x.frame == a.frame);
}

TEST_CASE("corpus: frames, spills and lowering invariants") {
  int funcs = 0;
  for (const auto& p : small_corpus(21, 60)) {
    auto xs = codegen::compile_program(p, Target::X64);
    auto as = codegen::compile_program(p, Target::A64);
    REQUIRE(xs.size() == as.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      CAPTURE(xs[i].name);
      CHECK(xs[i].frame == as[i].frame);
      CHECK(spill_set(xs[i]) == spill_set(as[i]));
      for (const auto* mf : {&xs[i], &as[i]}) {
        for (const auto& mi : mf->code) {
          CHECK_FALSE(mi.mem.index.valid());
          if (mir::is_arith_with_imm(mi.op) && mi.op != Op::MulImm)
            CHECK(codegen::legal_arith_immediate(static_cast<std::uint64_t>(mi.imm)));
        }
      }
      // X64 zero rule: no callee-saved register is set to 0.
      for (const auto& mi : xs[i].code)
        if (mi.op == Op::MovImm && mi.imm == 0) CHECK_FALSE(reads_callee_saved(mi));
      ++funcs;
    }
  }
  CHECK(funcs > 100);
}

TEST_CASE("compilation is deterministic") {
  for (const auto& p : small_corpus(5, 10))
    for (Target t : kTargets) CHECK(codegen::compile_program(p, t) == codegen::compile_program(p, t));
}

TEST_CASE("native lowering differs where the rules bite") {
  auto p = fixtures::parse(R"(
global g: i64[8]
func main(i: i64) -> i64 {
entry:
  %p = addr-of-global g
  %o = mul %i, 8
  %q = add %p, %o
  %v = load %q
  %w = add %v, 5000
  emit %w
  ret 0
}
)");
  auto native = codegen::UnifyOptions::native();
  auto x = compile(p, "main", Target::X64, native);
  bool scaled = false, wide_imm = false;
  for (const auto& mi : x.code) {
    scaled |= mi.mem.index.valid() && mi.mem.scale == 8;
    wide_imm |= mi.op == Op::AddImm && !codegen::legal_arith_immediate(static_cast<std::uint64_t>(mi.imm));
  }
  CHECK(scaled);
  CHECK(wide_imm);
  auto u = compile(p, "main", Target::X64);
  CHECK(u.stats.scaled_index_patterns == 1);
  for (const auto& mi : u.code) CHECK_FALSE(mi.mem.index.valid());
}
