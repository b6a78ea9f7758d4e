#include <set>
#include <sstream>
#include <string>

#include "doctest.h"
#include "fixtures.hpp"
#include "unistack/abi.hpp"
#include "unistack/driver.hpp"
#include "unistack/emu.hpp"

using namespace unistack;
using abi::Role;

TEST_CASE("register map examples") {
  CHECK(abi::map_register("rdi", Target::X64, Target::A64) == "r0");
  CHECK(abi::map_register("rsp", Target::X64, Target::A64) == "SP");
  CHECK(abi::map_register("xmm3", Target::X64, Target::A64) == "v3");
  CHECK(abi::map_register("r19", Target::A64, Target::X64) == "rbx");
  CHECK(abi::map_register("rbx", Target::X64, Target::A64) == "r19");
  CHECK(abi::map_register("rbp", Target::X64, Target::A64) == "r29");
  CHECK(abi::map_register("r15", Target::X64, Target::A64) == "r20");
  CHECK(abi::map_register("r14", Target::X64, Target::A64) == "r18");
}

TEST_CASE("link register has no x64 counterpart") {
  CHECK_THROWS_AS(abi::map_register("r30", Target::A64, Target::X64), abi::NoCounterpart);
  CHECK_THROWS_AS(abi::map_register("eax", Target::X64, Target::A64), abi::UnknownRegister);
  CHECK_FALSE(abi::exists_on(Role::LR, Target::X64));
  CHECK_FALSE(abi::exists_on(Role::ZERO, Target::X64));
  CHECK(abi::exists_on(Role::LR, Target::A64));
}

TEST_CASE("mapping is a bijection on both register files") {
  for (Target from : kTargets) {
    std::set<std::string> images;
    std::size_t mapped = 0;
    for (const auto& ri : abi::all_roles()) {
      auto name = abi::physical_name(ri.role, from);
      if (name.empty() || !abi::exists_on(ri.role, other(from))) continue;
      auto there = abi::map_register(name, from, other(from));
      CHECK(abi::map_register(there, other(from), from) == name);
      images.insert(there);
      ++mapped;
    }
    CHECK(images.size() == mapped);
    CHECK(mapped == 16 + 16);  // GPR roles without LR/ZERO, plus F0..F15
  }
}

TEST_CASE("role table invariants") {
  using abi::SavedBy;
  for (Role r : {Role::SP, Role::FP, Role::CS0, Role::CS1}) CHECK(abi::info(r).saved_by == SavedBy::Callee);
  for (int i = 0; i < 16; ++i) CHECK(abi::info(abi::fpr(i)).saved_by == SavedBy::Caller);
  for (int i = 0; i < 6; ++i) CHECK(abi::info(abi::arg_gpr(i)).saved_by == SavedBy::Caller);
  CHECK(abi::info(Role::RET0).saved_by == SavedBy::Caller);
  // Each physical name maps back to exactly one role.
  for (Target t : kTargets)
    for (const auto& ri : abi::all_roles())
      if (abi::exists_on(ri.role, t)) CHECK(abi::role_of(abi::physical_name(ri.role, t), t) == ri.role);
}

TEST_CASE("argument classification") {
  CHECK(abi::classify_argument(0, ir::Type::I64) == abi::ArgLocation{true, Role::ARG0, 0});
  CHECK(abi::classify_argument(5, ir::Type::Ptr) == abi::ArgLocation{true, Role::ARG5, 0});
  CHECK(abi::classify_argument(2, ir::Type::F64) == abi::ArgLocation{true, Role::F2, 0});
  auto seventh = abi::classify_argument(6, ir::Type::I64);
  CHECK_FALSE(seventh.in_register);
  // Hand layout: the caller stores the overflow argument at [SP], the call
  // then places the return address at [SP-8], so the argument sits one
  // slot above the return-address slot.
  const std::int64_t ret_slot = -8, arg_slot = 0;
  CHECK(seventh.stack_offset == arg_slot - ret_slot);
  CHECK(abi::classify_argument(8, ir::Type::F64).stack_offset == 8);
  CHECK(abi::classify_argument(9, ir::Type::F64).stack_offset == 16);

  auto locs = abi::assign_arguments({ir::Type::F64, ir::Type::I64, ir::Type::F64, ir::Type::Ptr});
  REQUIRE(locs.size() == 4);
  CHECK(locs[0].reg == Role::F0);
  CHECK(locs[1].reg == Role::ARG0);
  CHECK(locs[2].reg == Role::F1);
  CHECK(locs[3].reg == Role::ARG1);
}

TEST_CASE("stack arguments reach the callee on both targets") {
  auto p = fixtures::parse(R"(
func pick(a: i64, b: i64, c: i64, d: i64, e: i64, f: i64, g: i64, h: i64) -> i64 {
entry:
  %x = mul %g, 10
  %y = add %x, %h
  ret %y
}
func main() -> i64 {
entry:
  %r = call pick(1, 2, 3, 4, 5, 6, 7, 8)
  emit %r
  ret 0
}
)");
  auto b = driver::build(p);
  CHECK(b.report.equivalent);
  for (const auto* img : {&b.link.x64, &b.link.a64}) {
    auto s = emu::load_image(*img);
    auto r = emu::run(s, 100000);
    CHECK(r.status == emu::Status::Halted);
    REQUIRE(s.output.size() == 1);
    CHECK(s.output[0] == 78);
  }
}

TEST_CASE("callee-saved order") {
  std::vector<Role> expect{Role::FP, Role::CS0, Role::CS1};
  CHECK(abi::callee_saved_order(Target::X64) == expect);
  CHECK(abi::callee_saved_order(Target::A64) == expect);
}

TEST_CASE("allocation order prefers temporaries, then callee-saved") {
  const auto& g = abi::allocation_order(abi::RegClass::GPR);
  REQUIRE(g.size() >= 7);
  for (int i = 0; i < 5; ++i) CHECK(g[static_cast<std::size_t>(i)] == static_cast<Role>(static_cast<int>(Role::TMP0) + i));
  CHECK(g[g.size() - 2] == Role::CS0);
  CHECK(g.back() == Role::CS1);
  CHECK(abi::allocation_order(abi::RegClass::FPR).size() == 16);
}

TEST_CASE("dump table has one row per role") {
  std::istringstream in(abi::dump_table());
  std::string line;
  std::getline(in, line);
  CHECK(line == "role\tx64\ta64\tsaved-by");
  int rows = 0;
  bool saw_lr = false;
  while (std::getline(in, line)) {
    ++rows;
    if (line.rfind("LR\t", 0) == 0) {
      saw_lr = true;
      CHECK(line == "LR\t-\tr30\tcallee");
    }
  }
  CHECK(saw_lr);
  CHECK(rows == static_cast<int>(abi::kRoleCount) + 1);  // plus the RET1 alias
}
