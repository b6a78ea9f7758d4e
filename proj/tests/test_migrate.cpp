#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "doctest.h"
#include "fixtures.hpp"
#include "unistack/corpus.hpp"
#include "unistack/driver.hpp"
#include "unistack/emu.hpp"
#include "unistack/migrate.hpp"

using namespace unistack;
using abi::Role;

namespace {

struct Images {
  std::shared_ptr<const MachineImage> x64, a64;
  const MachineImage& of(Target t) const { return t == Target::X64 ? *x64 : *a64; }
  std::shared_ptr<const MachineImage> ptr(Target t) const { return t == Target::X64 ? x64 : a64; }
};

Images images(const ir::Program& p, bool strip = false) {
  auto b = driver::build(p);
  REQUIRE(b.report.equivalent);
  auto fix = [&](MachineImage img) { return std::make_shared<const MachineImage>(strip ? strip_stackmaps(img) : img); };
  return {fix(b.link.x64), fix(b.link.a64)};
}

// Runs natively until just before the k-th dynamic call (1-based).
emu::MachineState pause_at(std::shared_ptr<const MachineImage> img, std::uint64_t k) {
  auto s = emu::load_image(img);
  emu::RunOptions o;
  o.pause_before_call = [k](const emu::MachineState& st) { return st.calls + 1 == k; };
  auto r = emu::run(s, o);
  REQUIRE(r.paused);
  return s;
}

std::vector<std::uint64_t> native_output(const MachineImage& img) {
  auto s = emu::load_image(img);
  auto r = emu::run(s, corpus::kCorpusFuel);
  REQUIRE(r.status == emu::Status::Halted);
  return s.output;
}

std::uint64_t fnv(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (auto b : bytes) h = (h ^ b) * 0x100000001b3ull;
  return h;
}

std::uint64_t stack_word(const migrate::Checkpoint& cp, std::uint64_t addr) {
  std::uint64_t v;
  std::memcpy(&v, cp.stack.data() + (addr - cp.sp), 8);
  return v;
}

const char* kDeep = R"(
func main() -> i64 {
entry:
  %a = call f1(1)
  %b = call f1(2)
  %s = add %a, %b
  emit %s
  ret 0
}
func f1(n: i64) -> i64 {
entry:
  %x = call f2(%n)
  %y = add %x, %n
  ret %y
}
func f2(n: i64) -> i64 {
entry:
  %x = call f3(%n)
  %y = mul %x, 3
  ret %y
}
func f3(n: i64) -> i64 {
entry:
  %y = add %n, 40
  ret %y
}
)";

}  // namespace

TEST_CASE("checkpoint in the second iteration holds one accumulation") {
  auto p = fixtures::parse(fixtures::kHotFunc);
  auto im = images(p);
  auto ir = emu::interpret(p, 1'000'000, 2);
  REQUIRE(ir.paused);
  std::uint64_t sum_oracle;
  std::memcpy(&sum_oracle, ir.locals.at("sum").data(), 8);
  CHECK(sum_oracle == 28);

  for (Target t : kTargets) {
    auto s = pause_at(im.ptr(t), 2);
    auto cp = migrate::checkpoint(s);
    CHECK(cp.source == t);
    CHECK(cp.calls == 1);
    CHECK(cp.callsite == 0);
    CHECK(cp.pc == im.of(t).callsite(0)->return_addr);
    const auto& rec = im.of(t).stackmaps.at(0);
    std::int64_t sum_slot = 0;
    for (const auto& [name, loc] : rec.values)
      if (name == "sum") sum_slot = loc.offset;
    const std::uint64_t base = cp.regs.at(Role::FP) + 8;
    CHECK(stack_word(cp, base + static_cast<std::uint64_t>(sum_slot)) == sum_oracle);
  }
}

TEST_CASE("checkpoint away from a call is refused") {
  auto im = images(fixtures::parse(fixtures::kHotFunc));
  auto s = emu::load_image(im.x64);
  CHECK_THROWS_AS(migrate::checkpoint(s), migrate::MigrateError);
}

TEST_CASE("restore without rewrite resumes identically") {
  auto im = images(fixtures::parse(kDeep));
  for (Target t : kTargets) {
    const auto native = native_output(im.of(t));
    for (std::uint64_t k = 1; k <= 6; ++k) {
      auto s = pause_at(im.ptr(t), k);
      auto cp = migrate::checkpoint(s);
      auto r = migrate::restore(im.ptr(t), cp);
      CHECK(migrate::checkpoint(r) == cp);
      emu::run(r, 1'000'000);
      CHECK(r.status == emu::Status::Halted);
      CHECK(r.output == native);
    }
  }
}

TEST_CASE("callee-saved rbx carries over to r19") {
  auto p = fixtures::parse(R"(
func f() -> i64 {
entry:
  ret 1
}
func main(a: i64, b: i64) -> i64 {
entry:
  %x = add %a, 17
  %r = call f()
  %t = add %x, %r
  emit %t
  ret 0
}
)");
  auto im = images(p);
  auto s = pause_at(im.x64, 1);
  auto cp = migrate::checkpoint(s);
  CHECK(abi::physical_name(Role::CS0, Target::X64) == "rbx");
  CHECK(cp.regs.at(Role::CS0) == 17);
  auto moved = migrate::rewrite_checkpoint(cp, Target::A64);
  CHECK(moved.source == Target::A64);
  CHECK(abi::map_register("rbx", Target::X64, Target::A64) == "r19");
  CHECK(moved.regs.at(Role::CS0) == 17);
  auto r = migrate::restore(im.a64, moved);
  CHECK(r.reg(*abi::role_of("r19", Target::A64)) == 17);
  emu::run(r, 100000);
  CHECK(r.output == std::vector<std::uint64_t>{18});
}

TEST_CASE("rewrite copies memory verbatim and is an involution") {
  auto im = images(fixtures::parse(kDeep));
  for (std::uint64_t k = 1; k <= 6; ++k) {
    auto cp = migrate::checkpoint(pause_at(im.x64, k));
    auto there = migrate::rewrite_checkpoint(cp, Target::A64);
    CHECK(fnv(there.stack) == fnv(cp.stack));
    CHECK(fnv(there.globals) == fnv(cp.globals));
    CHECK(there.pc == cp.pc);
    CHECK(there.sp == cp.sp);
    CHECK(there.output == cp.output);
    CHECK_FALSE(cp.regs.count(Role::LR));
    CHECK(there.regs.count(Role::LR));
    auto back = migrate::rewrite_checkpoint(there, Target::X64);
    CHECK(back == cp);
  }
}

TEST_CASE("rewritten link register equals a native a64 run at depth 3") {
  auto im = images(fixtures::parse(kDeep));
  // Calls in order: f1(1), f2, f3, f1(2), f2, f3. The third one is made
  // from f2, three frames deep.
  auto x = pause_at(im.x64, 3);
  auto moved = migrate::rewrite_checkpoint(migrate::checkpoint(x), Target::A64);
  auto a = pause_at(im.a64, 3);
  CHECK(moved.regs.at(Role::LR) == a.reg(Role::LR));
  CHECK(a.reg(Role::LR) == a.read64(a.reg(Role::FP) + 8));
  CHECK(moved.regs.at(Role::LR) != 0);
  // Every register and the memory agree with the native state.
  auto native = migrate::checkpoint(a);
  CHECK(moved == native);
}

TEST_CASE("restore refuses an image of another program") {
  auto im = images(fixtures::parse(fixtures::kHotFunc));
  auto other = images(fixtures::parse(kDeep));
  auto cp = migrate::checkpoint(pause_at(im.x64, 1));
  CHECK_THROWS_AS(migrate::restore(other.x64, cp), migrate::MigrateError);
  CHECK_THROWS_AS(migrate::restore(im.a64, cp), migrate::MigrateError);  // not rewritten
}

TEST_CASE("schedules") {
  using migrate::MigrationPoint;
  auto s = migrate::parse_schedule("cs@1:x64>a64,cs@3:a64>x64");
  REQUIRE(s.size() == 2);
  CHECK(s[0] == MigrationPoint{1, Target::X64, Target::A64});
  CHECK(s[1] == MigrationPoint{3, Target::A64, Target::X64});
  CHECK(migrate::format_schedule(s) == "cs@1:x64>a64,cs@3:a64>x64");
  CHECK(migrate::parse_schedule("").empty());
  CHECK_THROWS(migrate::parse_schedule("cs@3:x64>a64,cs@3:a64>x64"));
  CHECK_THROWS(migrate::parse_schedule("cs@0:x64>a64"));
  CHECK_THROWS(migrate::parse_schedule("cs@2:x64>x64"));
  CHECK_THROWS(migrate::parse_schedule("at 2"));

  auto e = migrate::every_call(4, Target::A64);
  CHECK(migrate::format_schedule(e) == "cs@1:a64>x64,cs@2:x64>a64,cs@3:a64>x64,cs@4:x64>a64");
  auto pp = migrate::ping_pong(40, 10, Target::X64);
  REQUIRE(pp.size() == 20);
  for (std::size_t i = 1; i < pp.size(); ++i) {
    CHECK(pp[i].occurrence > pp[i - 1].occurrence);
    CHECK(pp[i].from == pp[i - 1].to);
  }
  CHECK(pp.back().to == Target::X64);
}

TEST_CASE("migration runs match native output") {
  auto p = fixtures::parse(fixtures::kHotFunc);
  auto im = images(p);
  const auto native = native_output(*im.x64);

  auto none = migrate::migrate_run(im.x64, im.a64, Target::X64, {});
  CHECK(none.output == native);
  CHECK(none.migrations.empty());
  CHECK(none.final_target == Target::X64);

  auto once = migrate::migrate_run(im.x64, im.a64, Target::X64, migrate::parse_schedule("cs@1:x64>a64"));
  CHECK(once.status == emu::Status::Halted);
  CHECK(once.output == native);
  CHECK(once.final_target == Target::A64);
  REQUIRE(once.migrations.size() == 1);
  CHECK(once.migrations[0].memory_unchanged);
  CHECK(once.migrations[0].involution);
  CHECK(once.migrations[0].register_bytes > 0);
  CHECK(once.migrations[0].image_bytes > once.migrations[0].register_bytes);

  auto late = migrate::migrate_run(im.x64, im.a64, Target::X64, migrate::parse_schedule("cs@2:x64>a64,cs@9:a64>x64"));
  CHECK(late.output == native);
  REQUIRE(late.unreached.size() == 1);
  CHECK(late.unreached[0].occurrence == 9);

  CHECK_THROWS(migrate::migrate_run(im.x64, im.a64, Target::X64, migrate::parse_schedule("cs@1:a64>x64")));
}

TEST_CASE("every call and ping-pong on the corpus, with stripped images") {
  corpus::CorpusSpec spec;
  spec.seed = 17;
  spec.count = 30;
  int migrations = 0;
  for (const auto& p : corpus::generate_corpus(spec)) {
    auto ir = emu::interpret(p, corpus::kCorpusFuel);
    REQUIRE(ir.status == emu::Status::Halted);
    auto im = images(p, true);
    CHECK_FALSE(im.x64->has_stackmaps);
    for (Target start : kTargets) {
      auto r = migrate::migrate_run(im.x64, im.a64, start, migrate::every_call(ir.calls, start),
                                    {corpus::kCorpusFuel, std::nullopt});
      CHECK(r.status == emu::Status::Halted);
      CHECK(r.output == ir.output);
      CHECK(r.unreached.empty());
      for (const auto& m : r.migrations) {
        CHECK(m.memory_unchanged);
        CHECK(m.involution);
      }
      migrations += static_cast<int>(r.migrations.size());
    }
    if (ir.calls >= 20) {
      auto r = migrate::migrate_run(im.x64, im.a64, Target::X64, migrate::ping_pong(ir.calls, 10, Target::X64));
      CHECK(r.output == ir.output);
      CHECK(r.migrations.size() == 20);
    }
  }
  CHECK(migrations > 200);
}

TEST_CASE("checkpoint files round-trip bit-exactly") {
  auto im = images(fixtures::parse(kDeep));
  auto cp = migrate::checkpoint(pause_at(im.a64, 5));
  auto bytes = migrate::serialize_checkpoint(cp);
  REQUIRE(bytes.size() > 16);
  CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "USTKCKPT");
  auto back = migrate::deserialize_checkpoint(bytes);
  CHECK(back == cp);
  CHECK(migrate::serialize_checkpoint(back) == bytes);
  bytes.resize(bytes.size() - 3);
  CHECK_THROWS(migrate::deserialize_checkpoint(bytes));

  auto dir = std::filesystem::temp_directory_path() / "unistack-ckpt-test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  auto r = migrate::migrate_run(im.x64, im.a64, Target::X64, migrate::every_call(6, Target::X64),
                                {1'000'000, dir.string()});
  CHECK(r.output == native_output(*im.x64));
  int files = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    std::ifstream in(e.path(), std::ios::binary);
    std::vector<std::uint8_t> b((std::istreambuf_iterator<char>(in)), {});
    CHECK(migrate::serialize_checkpoint(migrate::deserialize_checkpoint(b)) == b);
    ++files;
  }
  CHECK(files == 6);
  std::filesystem::remove_all(dir);
}
