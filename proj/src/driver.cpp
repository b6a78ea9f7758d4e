#include "unistack/driver.hpp"

#include "unistack/bytes.hpp"

namespace unistack::driver {

std::uint64_t program_hash(const ir::Program& p, const codegen::UnifyOptions& o) {
  std::string bits;
  for (bool b : {o.remat, o.callsite_align, o.imm_unify, o.addr_restrict, o.two_addr, o.zero_rule, o.block_align,
                 o.jump_over})
    bits += b ? '1' : '0';
  return fnv1a(bits, fnv1a(ir::print_program(p)));
}

Build build(const ir::Program& p, const codegen::UnifyOptions& o) {
  auto diags = ir::validate(p);
  if (!diags.empty()) throw StageError("validate", ir::to_string(diags.front()));
  Build b;
  b.hash = program_hash(p, o);
  try {
    b.x64 = codegen::compile_program(p, Target::X64, o);
    b.a64 = codegen::compile_program(p, Target::A64, o);
  } catch (const std::exception& e) {
    throw StageError("compile", e.what());
  }
  try {
    b.link = layout::link(p, b.x64, b.a64, o, b.hash);
  } catch (const std::exception& e) {
    throw StageError("link", e.what());
  }
  try {
    stackmap::attach_stackmaps(b.link.x64, p, b.x64);
    stackmap::attach_stackmaps(b.link.a64, p, b.a64);
  } catch (const std::exception& e) {
    throw StageError("stackmap", e.what());
  }
  b.report = stackmap::verify_layout(b.link.x64.stackmaps, b.link.a64.stackmaps);
  return b;
}

Coverage& Coverage::operator|=(const Coverage& o) {
  remat |= o.remat;
  callsite_align |= o.callsite_align;
  imm_unify |= o.imm_unify;
  addr_restrict |= o.addr_restrict;
  two_addr |= o.two_addr;
  zero_rule |= o.zero_rule;
  return *this;
}

Coverage coverage(const Build& b) {
  auto sx = codegen::total_stats(b.x64), sa = codegen::total_stats(b.a64);
  Coverage c;
  c.remat = sx.remat_uses > 0 || sa.remat_uses > 0;
  for (const auto& pad : b.link.plan) c.callsite_align |= pad.pad > 0 || pad.x64_prefix > 0;
  c.imm_unify = sx.pinned_constants > 0 || sa.pinned_constants > 0;
  c.addr_restrict = sx.scaled_index_patterns > 0;
  c.two_addr = sa.two_address_rewrites > 0;
  c.zero_rule = sx.zero_materializations > 0 || sa.zero_materializations > 0;
  return c;
}

TextSize native_text_size(const ir::Program& p) {
  auto o = codegen::UnifyOptions::native();
  TextSize t;
  t.x64 = layout::link_single(p, codegen::compile_program(p, Target::X64, o), 0).text_bytes();
  t.a64 = layout::link_single(p, codegen::compile_program(p, Target::A64, o), 0).text_bytes();
  return t;
}

TextSize unified_text_size(const Build& b) { return {b.link.x64.text_bytes(), b.link.a64.text_bytes()}; }

codegen::UnifyOptions without_rule(int i) {
  codegen::UnifyOptions o;
  switch (i) {
    case 0: o.remat = false; break;
    case 1: o.callsite_align = false; break;
    case 2: o.imm_unify = false; break;
    case 3: o.addr_restrict = false; break;
    case 4: o.two_addr = false; break;
    case 5: o.zero_rule = false; break;
    default: break;
  }
  return o;
}

}  // namespace unistack::driver
