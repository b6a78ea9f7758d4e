#include "unistack/mir.hpp"

#include <cstdio>
#include <sstream>

namespace unistack::mir {

CodegenStats& CodegenStats::operator+=(const CodegenStats& o) {
  remat_uses += o.remat_uses;
  pinned_constants += o.pinned_constants;
  zero_materializations += o.zero_materializations;
  two_address_rewrites += o.two_address_rewrites;
  three_address_escapes += o.three_address_escapes;
  scaled_index_patterns += o.scaled_index_patterns;
  imm_materializations += o.imm_materializations;
  spills += o.spills;
  return *this;
}

std::uint32_t MachineFunction::new_vreg(abi::RegClass cls) {
  vreg_class.push_back(cls);
  vreg_loc.emplace_back();
  return static_cast<std::uint32_t>(vreg_class.size() - 1);
}

const ValueBinding* MachineFunction::binding(std::string_view value) const {
  for (const auto& b : values)
    if (b.name == value) return &b;
  return nullptr;
}

namespace {

void add_mem(std::vector<Reg>& out, const Mem& m) {
  if (m.base.valid()) out.push_back(m.base);
  if (m.index.valid()) out.push_back(m.index);
}

}  // namespace

std::vector<Reg> uses(const MachineInstr& mi) {
  std::vector<Reg> out;
  switch (mi.op) {
    case Op::Mov:
    case Op::FMov:
    case Op::AddImm:
    case Op::SubImm:
    case Op::MulImm:
    case Op::CmpImm:
    case Op::Emit:
    case Op::EmitF:
    case Op::Push:
      out.push_back(mi.src1);
      break;
    case Op::MovK:
      out.push_back(mi.dst);
      break;
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::FAdd:
    case Op::FMul:
    case Op::Cmp:
      out.push_back(mi.src1);
      out.push_back(mi.src2);
      break;
    case Op::Load:
    case Op::FLoad:
      add_mem(out, mi.mem);
      break;
    case Op::Store:
    case Op::FStore:
      out.push_back(mi.src1);
      add_mem(out, mi.mem);
      break;
    case Op::LocalAddr:
      out.push_back(Reg::phys(abi::Role::FP));
      break;
    default:
      break;
  }
  return out;
}

std::vector<Reg> defs(const MachineInstr& mi) {
  switch (mi.op) {
    case Op::Mov:
    case Op::FMov:
    case Op::MovImm:
    case Op::MovK:
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::AddImm:
    case Op::SubImm:
    case Op::MulImm:
    case Op::Load:
    case Op::FLoad:
    case Op::FAdd:
    case Op::FMul:
    case Op::LocalAddr:
    case Op::GlobalAddr:
    case Op::Pop:
      return {mi.dst};
    default:
      return {};
  }
}

bool is_branch(Op op) { return op == Op::Jmp || op == Op::BCond || op == Op::JmpPad; }

bool is_arith_with_imm(Op op) {
  return op == Op::AddImm || op == Op::SubImm || op == Op::MulImm || op == Op::CmpImm;
}

std::string format_reg(Reg r, Target t) {
  if (r.is_virt()) return "%v" + std::to_string(r.id);
  if (r.is_phys()) return std::string(abi::physical_name(r.role(), t));
  return "_";
}

namespace {

std::string hex(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string format_mem(const Mem& m, Target t) {
  std::ostringstream os;
  os << '[';
  if (m.slot != SlotKind::None) {
    static const char* names[] = {"", "local", "spill", "incoming"};
    os << names[static_cast<int>(m.slot)] << '#' << m.slot_index;
  } else {
    os << format_reg(m.base, t);
    if (m.index.valid()) os << " + " << format_reg(m.index, t) << '*' << int(m.scale);
    if (m.disp > 0) os << " + " << m.disp;
    if (m.disp < 0) os << " - " << -m.disp;
  }
  os << ']';
  return os.str();
}

const char* cond_suffix(ir::CmpPred p) {
  switch (p) {
    case ir::CmpPred::Eq: return "eq";
    case ir::CmpPred::Ne: return "ne";
    case ir::CmpPred::Lt: return "lt";
    case ir::CmpPred::Le: return "le";
    case ir::CmpPred::Gt: return "gt";
    case ir::CmpPred::Ge: return "ge";
  }
  return "?";
}

std::string branch_target(const MachineInstr& mi) {
  if (mi.target != 0) return hex(mi.target);
  return ".L" + std::to_string(mi.label);
}

}  // namespace

std::string render(const MachineInstr& mi, Target t) {
  const bool x = t == Target::X64;
  auto R = [&](Reg r) { return format_reg(r, t); };
  std::ostringstream os;
  auto three = [&](const char* xop, const char* aop) {
    if (x)
      os << xop << ' ' << R(mi.dst) << ", " << R(mi.src2);
    else
      os << aop << ' ' << R(mi.dst) << ", " << R(mi.src1) << ", " << R(mi.src2);
  };
  auto three_imm = [&](const char* xop, const char* aop) {
    if (x && mi.dst != mi.src1 && mi.op == Op::AddImm)
      os << "lea " << R(mi.dst) << ", [" << R(mi.src1) << " + " << mi.imm << ']';
    else if (x && mi.dst != mi.src1 && mi.op == Op::SubImm)
      os << "lea " << R(mi.dst) << ", [" << R(mi.src1) << " - " << mi.imm << ']';
    else if (x && mi.dst != mi.src1)
      os << xop << ' ' << R(mi.dst) << ", " << R(mi.src1) << ", " << mi.imm;
    else if (x)
      os << xop << ' ' << R(mi.dst) << ", " << mi.imm;
    else
      os << aop << ' ' << R(mi.dst) << ", " << R(mi.src1) << ", #" << mi.imm;
  };
  switch (mi.op) {
    case Op::Label: os << ".L" << mi.label << ':' << (mi.loop_header ? "  ; loop header" : ""); break;
    case Op::Nop: os << "nop"; break;
    case Op::JmpPad: os << (x ? "jmp " : "b ") << hex(mi.target) << "  ; skip padding"; break;
    case Op::Mov: os << "mov " << R(mi.dst) << ", " << R(mi.src1); break;
    case Op::FMov: os << (x ? "movapd " : "fmov ") << R(mi.dst) << ", " << R(mi.src1); break;
    case Op::MovImm:
      if (x)
        os << (mi.imm == 0 ? "xor " : "mov ") << R(mi.dst) << ", " << (mi.imm == 0 ? R(mi.dst) : hex(static_cast<std::uint64_t>(mi.imm)));
      else
        os << "movz " << R(mi.dst) << ", #" << hex(static_cast<std::uint64_t>(mi.imm) >> mi.shift) << ", lsl #" << int(mi.shift);
      break;
    case Op::MovK:
      os << (x ? "movk " : "movk ") << R(mi.dst) << ", #" << hex(static_cast<std::uint64_t>(mi.imm)) << ", lsl #"
         << int(mi.shift);
      break;
    case Op::Add: three("add", "add"); break;
    case Op::Sub: three("sub", "sub"); break;
    case Op::Mul: three("imul", "mul"); break;
    case Op::FAdd:
      os << (x ? "vaddsd " : "fadd ") << R(mi.dst) << ", " << R(mi.src1) << ", " << R(mi.src2);
      break;
    case Op::FMul:
      os << (x ? "vmulsd " : "fmul ") << R(mi.dst) << ", " << R(mi.src1) << ", " << R(mi.src2);
      break;
    case Op::AddImm: three_imm("add", "add"); break;
    case Op::SubImm: three_imm("sub", "sub"); break;
    case Op::MulImm: three_imm("imul", "mul"); break;
    case Op::Load: os << (x ? "mov " : "ldr ") << R(mi.dst) << ", " << format_mem(mi.mem, t); break;
    case Op::FLoad: os << (x ? "movsd " : "ldr ") << R(mi.dst) << ", " << format_mem(mi.mem, t); break;
    case Op::Store:
      if (x)
        os << "mov " << format_mem(mi.mem, t) << ", " << R(mi.src1);
      else
        os << "str " << R(mi.src1) << ", " << format_mem(mi.mem, t);
      break;
    case Op::FStore:
      if (x)
        os << "movsd " << format_mem(mi.mem, t) << ", " << R(mi.src1);
      else
        os << "str " << R(mi.src1) << ", " << format_mem(mi.mem, t);
      break;
    case Op::LocalAddr:
      if (x)
        os << "lea " << R(mi.dst) << ", [rbp " << (mi.imm < 0 ? "- " : "+ ") << (mi.imm < 0 ? -mi.imm : mi.imm) << ']';
      else
        os << (mi.imm < 0 ? "sub " : "add ") << R(mi.dst) << ", r29, #" << (mi.imm < 0 ? -mi.imm : mi.imm);
      break;
    case Op::GlobalAddr:
      if (x)
        os << "lea " << R(mi.dst) << ", [rip + " << mi.sym << ']';
      else
        os << "adrp " << R(mi.dst) << ", " << mi.sym;
      break;
    case Op::Cmp: os << "cmp " << R(mi.src1) << ", " << R(mi.src2); break;
    case Op::CmpImm: os << "cmp " << R(mi.src1) << (x ? ", " : ", #") << mi.imm; break;
    case Op::BCond: os << (x ? "j" : "b.") << cond_suffix(mi.cond) << ' ' << branch_target(mi); break;
    case Op::Jmp: os << (x ? "jmp " : "b ") << branch_target(mi); break;
    case Op::Call:
      os << (x ? "call " : "bl ") << mi.sym;
      if (mi.prefix) os << "  ; +" << int(mi.prefix) << " prefix bytes";
      os << "  ; callsite " << mi.callsite;
      break;
    case Op::Ret: os << "ret"; break;
    case Op::Emit: os << "emit " << R(mi.src1); break;
    case Op::EmitF: os << "emit " << R(mi.src1); break;
    case Op::Push: os << "push " << R(mi.src1); break;
    case Op::Pop: os << "pop " << R(mi.dst); break;
  }
  if (mi.remat) os << "  ; remat";
  return os.str();
}

std::string print_function(const MachineFunction& mf, bool absolute) {
  std::ostringstream os;
  os << mf.name << ":  ; " << target_name(mf.target) << ", frame " << mf.frame.size << " bytes\n";
  std::uint64_t off = 0;
  for (const auto& mi : mf.code) {
    char buf[48];
    std::uint64_t at = absolute ? mi.addr : off;
    std::snprintf(buf, sizeof buf, "  %6llx  %2u  ", static_cast<unsigned long long>(at), mi.size);
    os << buf << render(mi, mf.target) << '\n';
    off += mi.size;
  }
  return os.str();
}

}  // namespace unistack::mir
