#include <cstring>
#include <map>
#include <string>
#include <vector>

#include "doctest.h"
#include "fixtures.hpp"
#include "unistack/corpus.hpp"
#include "unistack/driver.hpp"
#include "unistack/emu.hpp"
#include "unistack/stackmap.hpp"

using namespace unistack;
using stackmap::ValueLocation;

namespace {

const stackmap::StackMapRecord* record(const MachineImage& img, int callsite) {
  for (const auto& r : img.stackmaps)
    if (r.callsite == callsite) return &r;
  return nullptr;
}

struct Sample {
  int callsite;
  std::vector<std::pair<std::string, std::uint64_t>> values;
  bool operator==(const Sample&) const = default;
};

// Reads every stored location of the pending call's record, at every
// dynamic call, straight from the machine state.
std::vector<Sample> sample_callsites(const MachineImage& img) {
  std::vector<Sample> out;
  auto s = emu::load_image(img);
  emu::RunOptions o;
  o.fuel = corpus::kCorpusFuel;
  o.pause_before_call = [&](const emu::MachineState& st) {
    const auto* mi = st.current();
    const auto* rec = record(img, mi->callsite);
    REQUIRE(rec);
    const std::uint64_t frame_base = st.reg(abi::Role::FP) + 8;
    Sample smp{mi->callsite, {}};
    for (const auto& [name, loc] : rec->values) {
      switch (loc.kind) {
        case ValueLocation::Kind::Register: smp.values.emplace_back(name, st.reg(loc.role)); break;
        case ValueLocation::Kind::StackSlot:
          smp.values.emplace_back(name, st.read64(frame_base + static_cast<std::uint64_t>(loc.offset)));
          break;
        case ValueLocation::Kind::Constant: smp.values.emplace_back(name, loc.value); break;
        case ValueLocation::Kind::Recomputed: break;
      }
    }
    out.push_back(std::move(smp));
    return false;
  };
  auto r = emu::run(s, o);
  CHECK(r.status == emu::Status::Halted);
  return out;
}

}  // namespace

TEST_CASE("hot_func callsite record") {
  auto b = driver::build(fixtures::parse(fixtures::kHotFunc));
  for (const auto* img : {&b.link.x64, &b.link.a64}) {
    REQUIRE(img->stackmaps.size() == 1);
    const auto& r = img->stackmaps[0];
    CHECK(r.function == "main");
    CHECK(r.address == img->callsite(0)->return_addr);
    std::map<std::string, ValueLocation> m(r.values.begin(), r.values.end());
    CHECK(m.at("sum").kind == ValueLocation::Kind::StackSlot);
    CHECK(m.at("x").kind == ValueLocation::Kind::StackSlot);
    CHECK(m.at("%xa") == ValueLocation::recomputed());
    for (const auto& [name, loc] : r.values) CHECK(loc.kind != ValueLocation::Kind::Register);
  }
  CHECK(b.report.equivalent);
  CHECK(b.report.divergences.empty());
}

TEST_CASE("callsite with nothing live") {
  auto b = driver::build(fixtures::parse(R"(
func g() -> i64 {
entry:
  ret 3
}
func main() -> i64 {
entry:
  %r = call g()
  emit %r
  ret 0
}
)"));
  REQUIRE(b.link.x64.stackmaps.size() == 1);
  CHECK(b.link.x64.stackmaps[0].values.empty());
  CHECK(b.link.a64.stackmaps[0].values.empty());
  CHECK(b.report.equivalent);
}

TEST_CASE("value held in CS0 across a call") {
  auto p = fixtures::parse(R"(
func f() -> i64 {
entry:
  ret 1
}
func main(a: i64, b: i64) -> i64 {
entry:
  %x = add %a, %b
  %r = call f()
  %t = add %x, %r
  emit %t
  ret 0
}
)");
  CHECK(stackmap::live_across_calls(p, *p.find_function("main")) == std::vector<std::vector<std::string>>{{"x"}});
  auto b = driver::build(p);
  for (const auto* img : {&b.link.x64, &b.link.a64}) {
    const auto* r = record(*img, 0);
    REQUIRE(r);
    REQUIRE(r->values.size() == 1);
    CHECK(r->values[0].first == "%x");
    CHECK(r->values[0].second == ValueLocation::reg(abi::Role::CS0));
  }
}

TEST_CASE("verification reports each differing location") {
  stackmap::StackMapRecord a{0, 0x1028, "main", {{"%v", ValueLocation::slot(-24)}, {"%w", ValueLocation::constant(5)}}};
  auto b = a;
  CHECK(stackmap::verify_layout({a}, {b}).equivalent);

  b.values[0].second = ValueLocation::slot(-16);
  auto rep = stackmap::verify_layout({a}, {b});
  CHECK_FALSE(rep.equivalent);
  REQUIRE(rep.divergences.size() == 1);
  CHECK(rep.divergences[0] == stackmap::Divergence{0, "%v", "slot(-24)", "slot(-16)"});
  auto text = rep.to_text();
  CHECK(text.find("status: divergent") != std::string::npos);
  CHECK(text.find("divergences: 1") != std::string::npos);

  auto c = a;
  c.address = 0x1030;
  CHECK_FALSE(stackmap::verify_layout({a}, {c}).equivalent);
  CHECK_FALSE(stackmap::verify_layout({a}, {}).equivalent);
  CHECK(stackmap::verify_layout({}, {}).to_text().rfind("status: equivalent", 0) == 0);
}

TEST_CASE("disabling remat shows up as a divergence") {
  codegen::UnifyOptions o;
  o.remat = false;
  auto b = driver::build(fixtures::parse(fixtures::kHotFunc), o);
  CHECK_FALSE(b.report.equivalent);
  bool xa = false;
  for (const auto& d : b.report.divergences) xa |= d.value == "%xa";
  CHECK(xa);
}

TEST_CASE("recorded locations hold the interpreter's values") {
  auto p = fixtures::parse(fixtures::kHotFunc);
  auto b = driver::build(p);
  auto xs = sample_callsites(b.link.x64);
  auto as = sample_callsites(b.link.a64);
  REQUIRE(xs.size() == 3);
  CHECK(xs == as);
  for (std::size_t k = 0; k < xs.size(); ++k) {
    auto ir = emu::interpret(p, 1'000'000, k + 1);
    REQUIRE(ir.paused);
    for (const auto& [name, v] : xs[k].values) {
      CAPTURE(name);
      REQUIRE(ir.locals.count(name));
      std::uint64_t w;
      std::memcpy(&w, ir.locals[name].data(), 8);
      CHECK(w == v);
    }
  }
}

TEST_CASE("recorded locations agree across targets on the corpus") {
  corpus::CorpusSpec s;
  s.seed = 12;
  s.count = 40;
  std::size_t samples = 0;
  for (const auto& p : corpus::generate_corpus(s)) {
    auto b = driver::build(p);
    REQUIRE(b.report.equivalent);
    auto xs = sample_callsites(b.link.x64);
    auto as = sample_callsites(b.link.a64);
    CHECK(xs == as);
    samples += xs.size();
  }
  CHECK(samples > 100);
}
