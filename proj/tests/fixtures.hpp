// IR programs shared by the unit and acceptance tests.
#pragma once

#include <stdexcept>
#include <string>

#include "unistack/ir.hpp"

namespace fixtures {

// The motivating loop: sum accumulates hot_func(&x) over three iterations.
inline const char* kHotFunc = R"(
func main() -> i64 {
  local sum: i64
  local x: i64
  local i: i64
entry:
  %sa = addr-of-local sum
  %xa = addr-of-local x
  %ia = addr-of-local i
  store %sa, 0
  store %xa, 5
  store %ia, 0
  br loop
loop:
  %r = call hot_func(%xa)
  %s = load %sa
  %s2 = add %s, %r
  store %sa, %s2
  %i = load %ia
  %i2 = add %i, 1
  store %ia, %i2
  %c = cmp lt %i2, 3
  br-cond %c, loop, done
done:
  %t = load %sa
  emit %t
  ret 0
}

func hot_func(p: ptr) -> i64 {
entry:
  %v = load %p
  %w = mul %v, %v
  %r = add %w, 3
  ret %r
}
)";

inline unistack::ir::Program parse(const std::string& text) {
  auto r = unistack::ir::parse_program(text);
  if (!r.ok()) throw std::runtime_error("fixture does not parse: " + unistack::ir::to_string(r.diagnostics.at(0)));
  return *r.program;
}

}  // namespace fixtures
