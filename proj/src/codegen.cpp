#include "unistack/codegen.hpp"

#include <algorithm>
#include <bit>
#include <map>
#include <set>
#include <unordered_map>

namespace unistack::codegen {

using abi::RegClass;
using abi::Role;
using mir::MachineFunction;
using mir::MachineInstr;
using mir::Mem;
using mir::Op;
using mir::Reg;
using mir::SlotKind;
using mir::ValueBinding;

UnifyOptions UnifyOptions::native() {
  UnifyOptions o;
  o.remat = o.callsite_align = o.imm_unify = o.addr_restrict = o.two_addr = o.zero_rule = false;
  return o;
}

bool legal_arith_immediate(std::uint64_t v) { return v < 4096 || (v % 4096 == 0 && v < (1ull << 24)); }

int legal_move_immediate(std::uint64_t v) {
  int n = 0;
  for (int s = 0; s < 64; s += 16)
    if ((v >> s) & 0xFFFF) ++n;
  return n == 0 ? 1 : n;
}

// ---------------------------------------------------------------------------
// Instruction selection

namespace {

struct ValueInfo {
  ir::Type type = ir::Type::I64;
  const ir::Instr* def = nullptr;
  int uses = 0;
  bool address_only = true;  // every use is the address operand of a memory op
  ValueBinding::Kind kind = ValueBinding::Kind::Vreg;
  std::uint32_t vreg = 0;
  std::int64_t constant = 0;
  // scaled-index fold (X64 without the addressing restriction)
  ir::Operand fold_base, fold_index;
  std::uint8_t fold_scale = 0;
};

class Selector {
 public:
  Selector(const ir::Program& p, const ir::Function& f, Target t, const UnifyOptions& o, int cs)
      : p_(p), f_(f), t_(t), o_(o), next_callsite_(cs) {}

  MachineFunction run() {
    mf_.name = f_.name;
    mf_.target = t_;
    for (const auto& l : f_.locals) mf_.local_sizes.push_back(l.size);
    analyze();
    decide_kinds();
    for (std::size_t b = 0; b < f_.blocks.size(); ++b) {
      MachineInstr label;
      label.op = Op::Label;
      label.label = static_cast<int>(b);
      emit(label);
      if (b == 0) lower_params();
      const auto& instrs = f_.blocks[b].instrs;
      for (std::size_t i = 0; i < instrs.size(); ++i) lower(instrs[i], i + 1 < instrs.size() ? &instrs[i + 1] : nullptr);
    }
    for (const auto& [name, type] : order_)
      (void)type, mf_.values.push_back(binding_of(name));
    return std::move(mf_);
  }

 private:
  const ir::Program& p_;
  const ir::Function& f_;
  Target t_;
  UnifyOptions o_;
  int next_callsite_;
  MachineFunction mf_;
  std::unordered_map<std::string, ValueInfo> vals_;
  std::vector<std::pair<std::string, ir::Type>> order_;
  const ir::Instr* pending_cmp_ = nullptr;

  bool x64() const { return t_ == Target::X64; }

  void emit(MachineInstr mi) { mf_.code.push_back(std::move(mi)); }

  ValueBinding binding_of(const std::string& name) {
    ValueBinding b;
    b.name = name;
    auto it = vals_.find(name);
    if (it == vals_.end()) return b;
    const ValueInfo& v = it->second;
    b.kind = v.kind;
    b.vreg = v.vreg;
    b.constant = v.constant;
    return b;
  }

  static RegClass cls(ir::Type t) { return ir::is_integer(t) ? RegClass::GPR : RegClass::FPR; }

  void analyze() {
    order_ = ir::value_types(p_, f_);
    for (const auto& [name, type] : order_) vals_[name].type = type;
    for (const auto& b : f_.blocks) {
      for (const auto& in : b.instrs) {
        if (!in.result.empty()) vals_[in.result].def = &in;
        for (std::size_t k = 0; k < in.args.size(); ++k) {
          const auto& a = in.args[k];
          if (!a.is_value()) continue;
          auto& v = vals_[a.name];
          ++v.uses;
          bool addr = k == 0 && (in.op == ir::Opcode::Load || in.op == ir::Opcode::FLoad ||
                                 in.op == ir::Opcode::Store || in.op == ir::Opcode::FStore);
          if (!addr) v.address_only = false;
        }
      }
    }
  }

  std::optional<std::int64_t> const_value(const ir::Operand& op) const {
    if (!op.is_value()) return op.imm;
    auto it = vals_.find(op.name);
    if (it == vals_.end() || !it->second.def || it->second.def->op != ir::Opcode::Const) return std::nullopt;
    return it->second.def->args[0].imm;
  }

  void decide_kinds() {
    using K = ValueBinding::Kind;
    for (const auto& [name, type] : order_) {
      ValueInfo& v = vals_[name];
      if (!v.def) continue;  // parameter
      switch (v.def->op) {
        case ir::Opcode::Const: {
          std::int64_t c = v.def->args[0].imm;
          v.constant = c;
          if (c == 0) {
            v.kind = o_.zero_rule ? K::RematConst : (x64() ? K::Vreg : K::ZeroReg);
          } else if (legal_arith_immediate(static_cast<std::uint64_t>(c)) || v.uses < 2) {
            v.kind = K::RematConst;
          } else if (o_.imm_unify) {
            v.kind = K::Vreg;
          } else {
            v.kind = x64() ? K::RematConst : K::Vreg;
          }
          break;
        }
        case ir::Opcode::AddrOfLocal:
          v.kind = (o_.remat || !x64()) ? K::RematAddr : K::Vreg;
          break;
        case ir::Opcode::AddrOfGlobal:
          v.kind = o_.remat ? K::RematAddr : K::Vreg;
          break;
        case ir::Opcode::Cmp:
          v.kind = K::None;
          break;
        default:
          v.kind = K::Vreg;
      }
    }
    // Scaled-index candidates: add base, (mul i, {1,2,4,8}) feeding only
    // memory addresses.
    for (const auto& [name, type] : order_) {
      ValueInfo& v = vals_[name];
      if (!v.def || v.def->op != ir::Opcode::Add || v.uses == 0 || !v.address_only) continue;
      for (int side = 0; side < 2; ++side) {
        const auto& m = v.def->args[side];
        const auto& base = v.def->args[1 - side];
        if (!m.is_value() || !base.is_value()) continue;
        auto mit = vals_.find(m.name);
        if (mit == vals_.end() || !mit->second.def || mit->second.def->op != ir::Opcode::Mul || mit->second.uses != 1)
          continue;
        const ir::Instr& mul = *mit->second.def;
        for (int ms = 0; ms < 2; ++ms) {
          auto sc = const_value(mul.args[ms]);
          const auto& idx = mul.args[1 - ms];
          if (!sc || !idx.is_value() || (*sc != 1 && *sc != 2 && *sc != 4 && *sc != 8)) continue;
          if (const_value(idx)) continue;
          ++mf_.stats.scaled_index_patterns;
          if (x64() && !o_.addr_restrict) {
            v.kind = ValueBinding::Kind::Folded;
            v.fold_base = base;
            v.fold_index = idx;
            v.fold_scale = static_cast<std::uint8_t>(*sc);
            mit->second.kind = ValueBinding::Kind::Folded;
          }
          side = 2;
          break;
        }
      }
    }
    for (const auto& [name, type] : order_) {
      ValueInfo& v = vals_[name];
      if (v.kind == K::Vreg) {
        v.vreg = mf_.new_vreg(cls(v.type));
        if (v.def && v.def->op == ir::Opcode::Const) ++mf_.stats.pinned_constants;
      }
    }
  }

  // -- operand helpers -----------------------------------------------------

  void materialize(Reg dst, std::int64_t value, bool remat, bool seq) {
    auto u = static_cast<std::uint64_t>(value);
    if (u == 0) ++mf_.stats.zero_materializations;
    if (u == 0 && !x64()) {
      MachineInstr mi;
      mi.op = Op::Mov;
      mi.dst = dst;
      mi.src1 = Reg::phys(Role::ZERO);
      mi.remat = remat;
      mi.call_seq = seq;
      emit(mi);
      return;
    }
    if (legal_move_immediate(u) > 1) ++mf_.stats.imm_materializations;
    bool first = true;
    for (int s = 0; s < 64; s += 16) {
      std::uint64_t chunk = (u >> s) & 0xFFFF;
      if (chunk == 0 && !(u == 0 && s == 0)) continue;
      MachineInstr mi;
      mi.op = first ? Op::MovImm : Op::MovK;
      mi.dst = dst;
      mi.imm = first ? static_cast<std::int64_t>(chunk << s) : static_cast<std::int64_t>(chunk);
      mi.shift = static_cast<std::uint8_t>(s);
      mi.remat = remat;
      mi.call_seq = seq;
      emit(mi);
      first = false;
    }
  }

  void address_into(Reg dst, const ir::Instr& def, bool remat, bool seq) {
    MachineInstr mi;
    mi.dst = dst;
    mi.remat = remat;
    mi.call_seq = seq;
    if (def.op == ir::Opcode::AddrOfLocal) {
      mi.op = Op::LocalAddr;
      mi.mem.slot = SlotKind::Local;
      mi.mem.slot_index = static_cast<std::uint32_t>(local_index(def.symbol));
    } else {
      mi.op = Op::GlobalAddr;
      mi.sym = def.symbol;
    }
    emit(mi);
  }

  int local_index(const std::string& name) const {
    for (std::size_t i = 0; i < f_.locals.size(); ++i)
      if (f_.locals[i].name == name) return static_cast<int>(i);
    throw CodegenError("unknown local '" + name + "'");
  }

  const ValueInfo& info(const std::string& name) const {
    auto it = vals_.find(name);
    if (it == vals_.end()) throw CodegenError("unknown value '%" + name + "'");
    return it->second;
  }

  /// Writes the operand's value into `dst` (a physical or fresh register).
  void value_into(Reg dst, const ir::Operand& op, bool seq) {
    using K = ValueBinding::Kind;
    if (!op.is_value()) return materialize(dst, op.imm, false, seq);
    const ValueInfo& v = info(op.name);
    switch (v.kind) {
      case K::RematConst:
        ++mf_.stats.remat_uses;
        return materialize(dst, v.constant, true, seq);
      case K::RematAddr:
        ++mf_.stats.remat_uses;
        return address_into(dst, *v.def, true, seq);
      case K::ZeroReg:
      case K::Vreg: {
        MachineInstr mi;
        mi.op = ir::is_integer(v.type) ? Op::Mov : Op::FMov;
        mi.dst = dst;
        mi.src1 = v.kind == K::ZeroReg ? Reg::phys(Role::ZERO) : Reg::virt(v.vreg);
        mi.call_seq = seq;
        emit(mi);
        return;
      }
      case K::Folded: {
        Reg r = folded_address(v);
        MachineInstr mi;
        mi.op = Op::Mov;
        mi.dst = dst;
        mi.src1 = r;
        mi.call_seq = seq;
        emit(mi);
        return;
      }
      case K::None:
        break;
    }
    throw CodegenError("value '%" + op.name + "' has no machine representation");
  }

  /// A register holding the operand's value at this point.
  Reg operand_reg(const ir::Operand& op, RegClass rc = RegClass::GPR) {
    using K = ValueBinding::Kind;
    if (op.is_value()) {
      const ValueInfo& v = info(op.name);
      if (v.kind == K::Vreg) return Reg::virt(v.vreg);
      if (v.kind == K::ZeroReg) return Reg::phys(Role::ZERO);
      rc = cls(v.type);
    }
    Reg r = Reg::virt(mf_.new_vreg(rc));
    value_into(r, op, false);
    return r;
  }

  Reg folded_address(const ValueInfo& v) {
    // Only reached when a folded address escapes into a non-memory use,
    // which the candidate analysis rules out.
    (void)v;
    throw CodegenError("folded address used outside a memory operand");
  }

  /// Immediate usable directly by an arithmetic instruction, under the
  /// target's active legality predicate.
  std::optional<std::int64_t> foldable_imm(const ir::Operand& op, bool mul = false) const {
    std::int64_t c;
    if (!op.is_value()) {
      c = op.imm;
    } else {
      const ValueInfo& v = info(op.name);
      if (v.kind != ValueBinding::Kind::RematConst) return std::nullopt;
      c = v.constant;
    }
    if (x64() && !o_.imm_unify) {
      if (c < INT32_MIN || c > INT32_MAX) return std::nullopt;
      return c;
    }
    if (mul) return std::nullopt;
    if (c < 0 || !legal_arith_immediate(static_cast<std::uint64_t>(c))) return std::nullopt;
    return c;
  }

  Mem address_operand(const ir::Operand& op) {
    using K = ValueBinding::Kind;
    Mem m;
    if (op.is_value()) {
      const ValueInfo& v = info(op.name);
      if (v.kind == K::RematAddr && v.def->op == ir::Opcode::AddrOfLocal) {
        ++mf_.stats.remat_uses;
        m.slot = SlotKind::Local;
        m.slot_index = static_cast<std::uint32_t>(local_index(v.def->symbol));
        return m;
      }
      if (v.kind == K::Folded) {
        m.base = operand_reg(v.fold_base);
        m.index = operand_reg(v.fold_index);
        m.scale = v.fold_scale;
        return m;
      }
    }
    m.base = operand_reg(op);
    return m;
  }

  Reg result_reg(const ir::Instr& in) { return Reg::virt(info(in.result).vreg); }

  bool emits_result(const ir::Instr& in) const {
    if (in.result.empty()) return false;
    return info(in.result).kind == ValueBinding::Kind::Vreg;
  }

  // -- lowering ------------------------------------------------------------

  void lower_params() {
    std::vector<ir::Type> types;
    for (const auto& prm : f_.params) types.push_back(prm.type);
    auto locs = abi::assign_arguments(types);
    for (std::size_t i = 0; i < f_.params.size(); ++i) {
      const ValueInfo& v = info(f_.params[i].name);
      if (v.uses == 0) continue;
      MachineInstr mi;
      mi.dst = Reg::virt(v.vreg);
      mi.call_seq = true;
      if (locs[i].in_register) {
        mi.op = ir::is_integer(types[i]) ? Op::Mov : Op::FMov;
        mi.src1 = Reg::phys(locs[i].reg);
      } else {
        mi.op = ir::is_integer(types[i]) ? Op::Load : Op::FLoad;
        mi.mem.slot = SlotKind::Incoming;
        mi.mem.slot_index = static_cast<std::uint32_t>(locs[i].stack_offset / 8);
      }
      emit(mi);
    }
  }

  void arith(const ir::Instr& in) {
    Reg d = result_reg(in);
    const auto& a = in.args[0];
    const auto& b = in.args[1];
    MachineInstr mi;
    mi.dst = d;
    const bool mul = in.op == ir::Opcode::Mul;
    auto reg_op = in.op == ir::Opcode::Add ? Op::Add : in.op == ir::Opcode::Sub ? Op::Sub : Op::Mul;
    auto imm_op = in.op == ir::Opcode::Add ? Op::AddImm : in.op == ir::Opcode::Sub ? Op::SubImm : Op::MulImm;
    if (auto ib = foldable_imm(b, mul)) {
      mi.op = imm_op;
      mi.src1 = operand_reg(a);
      mi.imm = *ib;
    } else if (auto ia = in.op != ir::Opcode::Sub ? foldable_imm(a, mul) : std::nullopt) {
      mi.op = imm_op;
      mi.src1 = operand_reg(b);
      mi.imm = *ia;
    } else {
      mi.op = reg_op;
      mi.src1 = operand_reg(a);
      mi.src2 = operand_reg(b);
    }
    emit(mi);
  }

  void lower_call(const ir::Instr& in) {
    const ir::Function* callee = p_.find_function(in.symbol);
    if (!callee) throw CodegenError("unresolved call target '" + in.symbol + "'");
    std::vector<ir::Type> types;
    for (const auto& prm : callee->params) types.push_back(prm.type);
    auto locs = abi::assign_arguments(types);
    std::int64_t stack_bytes = 0;
    for (std::size_t k = 0; k < locs.size(); ++k) {
      if (locs[k].in_register) continue;
      stack_bytes = std::max(stack_bytes, locs[k].stack_offset);
      Reg r = operand_reg(in.args[k], cls(types[k]));
      MachineInstr st;
      st.op = ir::is_integer(types[k]) ? Op::Store : Op::FStore;
      st.src1 = r;
      st.mem.base = Reg::phys(Role::SP);
      st.mem.disp = locs[k].stack_offset - 8;
      st.call_seq = true;
      emit(st);
    }
    mf_.frame.outgoing_size = std::max(mf_.frame.outgoing_size, stack_bytes);
    for (std::size_t k = 0; k < locs.size(); ++k)
      if (locs[k].in_register) value_into(Reg::phys(locs[k].reg), in.args[k], true);
    MachineInstr call;
    call.op = Op::Call;
    call.sym = in.symbol;
    call.callsite = next_callsite_++;
    call.call_seq = true;
    mf_.callsites.push_back(call.callsite);
    emit(call);
    if (!x64()) {
      // LR is caller-clobbered by the call; reload it from the return slot.
      MachineInstr lr;
      lr.op = Op::Load;
      lr.dst = Reg::phys(Role::LR);
      lr.mem.base = Reg::phys(Role::FP);
      lr.mem.disp = mir::FrameLayout::fp_disp(0);
      lr.call_seq = true;
      emit(lr);
    }
    if (!in.result.empty() && info(in.result).uses > 0) {
      MachineInstr mv;
      mv.op = ir::is_integer(callee->ret) ? Op::Mov : Op::FMov;
      mv.dst = result_reg(in);
      mv.src1 = Reg::phys(abi::return_register(callee->ret));
      mv.call_seq = true;
      emit(mv);
    } else if (!in.result.empty()) {
      vals_[in.result].kind = ValueBinding::Kind::None;
    }
  }

  void lower(const ir::Instr& in, const ir::Instr* next) {
    (void)next;
    using ir::Opcode;
    switch (in.op) {
      case Opcode::Const:
        if (emits_result(in)) materialize(result_reg(in), in.args[0].imm, false, false);
        break;
      case Opcode::AddrOfLocal:
      case Opcode::AddrOfGlobal:
        if (emits_result(in)) address_into(result_reg(in), in, false, false);
        break;
      case Opcode::Add:
      case Opcode::Sub:
      case Opcode::Mul:
        if (emits_result(in)) arith(in);
        break;
      case Opcode::FAdd:
      case Opcode::FMul: {
        MachineInstr mi;
        mi.op = in.op == Opcode::FAdd ? Op::FAdd : Op::FMul;
        mi.dst = result_reg(in);
        mi.src1 = operand_reg(in.args[0], RegClass::FPR);
        mi.src2 = operand_reg(in.args[1], RegClass::FPR);
        emit(mi);
        break;
      }
      case Opcode::Load:
      case Opcode::FLoad: {
        MachineInstr mi;
        mi.op = in.op == Opcode::Load ? Op::Load : Op::FLoad;
        mi.mem = address_operand(in.args[0]);
        mi.dst = result_reg(in);
        emit(mi);
        break;
      }
      case Opcode::Store:
      case Opcode::FStore: {
        MachineInstr mi;
        mi.op = in.op == Opcode::Store ? Op::Store : Op::FStore;
        mi.src1 = operand_reg(in.args[1], in.op == Opcode::Store ? RegClass::GPR : RegClass::FPR);
        mi.mem = address_operand(in.args[0]);
        emit(mi);
        break;
      }
      case Opcode::Call:
        lower_call(in);
        break;
      case Opcode::Cmp:
        pending_cmp_ = &in;
        break;
      case Opcode::BrCond: {
        if (!pending_cmp_) throw CodegenError("br-cond without a preceding cmp");
        const ir::Instr& c = *pending_cmp_;
        pending_cmp_ = nullptr;
        MachineInstr cmp;
        cmp.src1 = operand_reg(c.args[0]);
        if (auto ib = foldable_imm(c.args[1])) {
          cmp.op = Op::CmpImm;
          cmp.imm = *ib;
        } else {
          cmp.op = Op::Cmp;
          cmp.src2 = operand_reg(c.args[1]);
        }
        emit(cmp);
        MachineInstr bc;
        bc.op = Op::BCond;
        bc.cond = c.pred;
        bc.label = f_.block_index(in.targets[0]);
        emit(bc);
        MachineInstr j;
        j.op = Op::Jmp;
        j.label = f_.block_index(in.targets[1]);
        emit(j);
        break;
      }
      case Opcode::Br: {
        MachineInstr j;
        j.op = Op::Jmp;
        j.label = f_.block_index(in.targets[0]);
        emit(j);
        break;
      }
      case Opcode::Ret: {
        if (!in.args.empty()) value_into(Reg::phys(abi::return_register(f_.ret)), in.args[0], true);
        MachineInstr r;
        r.op = Op::Ret;
        emit(r);
        break;
      }
      case Opcode::Emit: {
        bool fp = in.args[0].is_value() && !ir::is_integer(info(in.args[0].name).type);
        MachineInstr mi;
        mi.op = fp ? Op::EmitF : Op::Emit;
        mi.src1 = operand_reg(in.args[0], fp ? RegClass::FPR : RegClass::GPR);
        emit(mi);
        break;
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Liveness over virtual registers

struct Bits {
  std::vector<std::uint64_t> w;
  explicit Bits(std::size_t n = 0) : w((n + 63) / 64) {}
  bool test(std::size_t i) const { return (w[i / 64] >> (i % 64)) & 1; }
  void set(std::size_t i) { w[i / 64] |= 1ull << (i % 64); }
  void reset(std::size_t i) { w[i / 64] &= ~(1ull << (i % 64)); }
  bool merge(const Bits& o) {
    bool changed = false;
    for (std::size_t k = 0; k < w.size(); ++k) {
      auto n = w[k] | o.w[k];
      changed |= n != w[k];
      w[k] = n;
    }
    return changed;
  }
};

struct BlockRange {
  std::size_t begin, end;  // [begin, end) instruction indices
  std::vector<int> succ;
};

std::vector<BlockRange> blocks_of(const MachineFunction& mf) {
  std::vector<BlockRange> bs;
  std::map<int, int> by_label;
  for (std::size_t i = 0; i < mf.code.size(); ++i) {
    if (mf.code[i].op == Op::Label || bs.empty()) {
      if (!bs.empty()) bs.back().end = i;
      bs.push_back({i, mf.code.size(), {}});
      if (mf.code[i].op == Op::Label) by_label[mf.code[i].label] = static_cast<int>(bs.size() - 1);
    }
  }
  for (std::size_t b = 0; b < bs.size(); ++b) {
    bool falls = true;
    for (std::size_t i = bs[b].begin; i < bs[b].end; ++i) {
      const auto& mi = mf.code[i];
      if (mi.op == Op::BCond || mi.op == Op::Jmp) bs[b].succ.push_back(by_label.at(mi.label));
      if (mi.op == Op::Jmp || mi.op == Op::Ret) falls = false;
    }
    if (falls && b + 1 < bs.size()) bs[b].succ.push_back(static_cast<int>(b + 1));
  }
  return bs;
}

/// live_after[i]: vregs live immediately after instruction i.
std::vector<Bits> live_after(const MachineFunction& mf) {
  const std::size_t nv = mf.vreg_class.size();
  auto bs = blocks_of(mf);
  std::vector<Bits> in(bs.size(), Bits(nv)), out(bs.size(), Bits(nv));
  auto transfer = [&](std::size_t b, Bits live, std::vector<Bits>* per) {
    for (std::size_t i = bs[b].end; i-- > bs[b].begin;) {
      if (per) (*per)[i] = live;
      for (Reg r : mir::defs(mf.code[i]))
        if (r.is_virt()) live.reset(r.id);
      for (Reg r : mir::uses(mf.code[i]))
        if (r.is_virt()) live.set(r.id);
    }
    return live;
  };
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t b = bs.size(); b-- > 0;) {
      for (int s : bs[b].succ) changed |= out[b].merge(in[s]);
      Bits li = transfer(b, out[b], nullptr);
      changed |= in[b].merge(li);
    }
  }
  std::vector<Bits> per(mf.code.size(), Bits(nv));
  for (std::size_t b = 0; b < bs.size(); ++b) transfer(b, out[b], &per);
  return per;
}

bool is_int_arith(Op op) {
  return op == Op::Add || op == Op::Sub || op == Op::Mul || op == Op::AddImm || op == Op::SubImm ||
         op == Op::MulImm;
}

void rename_vreg(MachineFunction& mf, std::uint32_t from, std::uint32_t to) {
  auto fix = [&](Reg& r) {
    if (r.is_virt() && r.id == from) r.id = to;
  };
  for (auto& mi : mf.code) {
    fix(mi.dst);
    fix(mi.src1);
    fix(mi.src2);
    fix(mi.mem.base);
    fix(mi.mem.index);
  }
  for (auto& b : mf.values)
    if (b.kind == ValueBinding::Kind::Vreg && b.vreg == from) b.vreg = to;
}

// A zero temporary merged into a long-lived result would put the constant
// in whatever register that result gets, possibly a callee-saved one.
bool is_zero_def(const MachineFunction& mf, std::size_t before, std::uint32_t v) {
  for (std::size_t k = before; k-- > 0;) {
    const MachineInstr& mi = mf.code[k];
    if (!(mi.dst.is_virt() && mi.dst.id == v)) continue;
    return (mi.op == Op::MovImm && mi.imm == 0 && mi.shift == 0) ||
           (mi.op == Op::Mov && mi.src1 == Reg::phys(Role::ZERO));
  }
  return false;
}

}  // namespace

MachineFunction select_instructions(const ir::Program& p, const ir::Function& f, Target t, const UnifyOptions& opts,
                                    int first_callsite) {
  return Selector(p, f, t, opts, first_callsite).run();
}

MachineFunction convert_two_address(MachineFunction mf) {
  std::vector<Bits> live;
  bool stale = true;
  for (std::size_t i = 0; i < mf.code.size(); ++i) {
    MachineInstr& mi = mf.code[i];
    if (!is_int_arith(mi.op) || !mi.dst.is_virt() || !mi.src1.is_virt() || mi.dst == mi.src1) continue;
    if (stale) live = live_after(mf), stale = false;
    const std::uint32_t d = mi.dst.id, a = mi.src1.id;
    bool src_live = live[i].test(a);
    if (src_live && mi.op == Op::AddImm) {
      ++mf.stats.three_address_escapes;
      continue;
    }
    ++mf.stats.two_address_rewrites;
    stale = true;
    if (!src_live && !is_zero_def(mf, i, a)) {
      // Merging is only sound if `a` is never redefined while `d` is live.
      bool clash = false;
      for (std::size_t k = 0; k < mf.code.size() && !clash; ++k)
        if (k != i && live[k].test(d))
          for (Reg r : mir::defs(mf.code[k])) clash |= r.is_virt() && r.id == a;
      if (!clash) {
        rename_vreg(mf, d, a);
        continue;
      }
    }
    MachineInstr copy;
    copy.op = Op::Mov;
    copy.dst = mi.dst;
    copy.src1 = mi.src1;
    mi.src1 = mi.dst;
    mf.code.insert(mf.code.begin() + static_cast<std::ptrdiff_t>(i), copy);
    ++i;
  }
  return mf;
}

// ---------------------------------------------------------------------------
// Register allocation

namespace {

struct Interval {
  std::uint32_t vreg;
  std::size_t start, end;
  bool crosses_call = false;
  bool in_region = false;
  bool temp = false;
  int reg = -1;  // Role index while active
};

}  // namespace

MachineFunction allocate_registers(MachineFunction mf) {
  std::set<std::uint32_t> temps;
  std::set<std::uint32_t> spilled;
  std::uint32_t next_slot = 0;
  for (int round = 0;; ++round) {
    if (round > 10000) throw CodegenError("register allocation did not terminate");
    const std::size_t nv = mf.vreg_class.size();
    auto live = live_after(mf);
    std::vector<std::size_t> lo(nv, SIZE_MAX), hi(nv, 0);
    auto touch = [&](std::uint32_t v, std::size_t pos) {
      lo[v] = std::min(lo[v], pos);
      hi[v] = std::max(hi[v], pos);
    };
    std::vector<std::size_t> calls, region;
    for (std::size_t i = 0; i < mf.code.size(); ++i) {
      const auto& mi = mf.code[i];
      if (mi.op == Op::Call) calls.push_back(i);
      if (mi.call_seq) region.push_back(i);
      for (Reg r : mir::uses(mi))
        if (r.is_virt()) touch(r.id, i);
      for (Reg r : mir::defs(mi))
        if (r.is_virt()) touch(r.id, i);
      for (std::size_t w = 0; w < live[i].w.size(); ++w) {
        std::uint64_t bits = live[i].w[w];
        while (bits) {
          int k = std::countr_zero(bits);
          bits &= bits - 1;
          touch(static_cast<std::uint32_t>(w * 64 + k), i);
        }
      }
    }
    std::vector<Interval> ivs;
    for (std::uint32_t v = 0; v < nv; ++v) {
      if (lo[v] == SIZE_MAX || spilled.count(v)) continue;
      Interval iv{v, lo[v], hi[v]};
      auto c = std::upper_bound(calls.begin(), calls.end(), iv.start);
      iv.crosses_call = c != calls.end() && *c < iv.end;
      auto r = std::lower_bound(region.begin(), region.end(), iv.start);
      iv.in_region = r != region.end() && *r <= iv.end;
      iv.temp = temps.count(v) > 0;
      ivs.push_back(iv);
    }
    std::sort(ivs.begin(), ivs.end(), [](const Interval& a, const Interval& b) {
      return a.start != b.start ? a.start < b.start : a.vreg < b.vreg;
    });

    std::vector<std::uint32_t> to_spill;
    std::vector<Interval*> active;
    std::vector<int> assignment(nv, -1);
    for (auto& cur : ivs) {
      std::erase_if(active, [&](Interval* a) { return a->end <= cur.start; });
      RegClass rc = mf.vreg_class[cur.vreg];
      std::vector<Role> allowed;
      for (Role r : abi::allocation_order(rc)) {
        if (cur.crosses_call && abi::info(r).saved_by != abi::SavedBy::Callee) continue;
        if (cur.in_region && abi::is_arg_or_ret(r)) continue;
        allowed.push_back(r);
      }
      auto busy = [&](Role r) {
        return std::any_of(active.begin(), active.end(), [&](Interval* a) { return a->reg == int(abi::index(r)); });
      };
      int chosen = -1;
      for (Role r : allowed)
        if (!busy(r)) {
          chosen = static_cast<int>(abi::index(r));
          break;
        }
      if (chosen < 0) {
        Interval* victim = nullptr;
        for (Interval* a : active) {
          if (a->temp || mf.vreg_class[a->vreg] != rc) continue;
          if (std::find(allowed.begin(), allowed.end(), abi::role_at(a->reg)) == allowed.end()) continue;
          if (!victim || a->end > victim->end || (a->end == victim->end && a->vreg > victim->vreg)) victim = a;
        }
        if (cur.temp && !victim) throw CodegenError("allocator overflow in " + mf.name);
        if (victim && (cur.temp || victim->end > cur.end)) {
          chosen = victim->reg;
          to_spill.push_back(victim->vreg);
          std::erase(active, victim);
          assignment[victim->vreg] = -1;
        } else {
          to_spill.push_back(cur.vreg);
          continue;
        }
      }
      cur.reg = chosen;
      assignment[cur.vreg] = chosen;
      active.push_back(&cur);
    }

    if (to_spill.empty()) {
      for (std::uint32_t v = 0; v < nv; ++v) {
        if (spilled.count(v)) continue;
        if (assignment[v] >= 0) {
          mf.vreg_loc[v].kind = mir::VregLocation::Kind::Register;
          mf.vreg_loc[v].role = abi::role_at(static_cast<std::size_t>(assignment[v]));
        }
      }
      auto fix = [&](Reg& r) {
        if (!r.is_virt()) return;
        int a = assignment[r.id];
        if (a < 0) throw CodegenError("unassigned virtual register in " + mf.name);
        r = Reg::phys(abi::role_at(static_cast<std::size_t>(a)));
      };
      for (auto& mi : mf.code) {
        fix(mi.dst);
        fix(mi.src1);
        fix(mi.src2);
        fix(mi.mem.base);
        fix(mi.mem.index);
      }
      // Self-copies left by coalescing. Hand-off moves stay so both targets
      // keep the same call sequence.
      std::erase_if(mf.code, [](const MachineInstr& mi) {
        return (mi.op == Op::Mov || mi.op == Op::FMov) && mi.dst == mi.src1 && !mi.call_seq;
      });
      mf.used_callee_saved.clear();
      for (Role cs : {Role::CS0, Role::CS1}) {
        bool used = false;
        for (const auto& mi : mf.code)
          for (Reg r : {mi.dst, mi.src1, mi.src2, mi.mem.base, mi.mem.index})
            if (r.is_phys() && r.role() == cs) used = true;
        if (used) mf.used_callee_saved.push_back(cs);
      }
      mf.allocated = true;
      return mf;
    }

    // Spill: every reference becomes a short temp around a slot access.
    std::sort(to_spill.begin(), to_spill.end(), [&](std::uint32_t a, std::uint32_t b) {
      return lo[a] != lo[b] ? lo[a] < lo[b] : a < b;
    });
    std::map<std::uint32_t, std::uint32_t> slot_of;
    for (std::uint32_t v : to_spill) {
      slot_of[v] = next_slot++;
      spilled.insert(v);
      mf.vreg_loc[v].kind = mir::VregLocation::Kind::Spill;
      mf.vreg_loc[v].slot = slot_of[v];
      ++mf.stats.spills;
    }
    std::vector<MachineInstr> out;
    out.reserve(mf.code.size() * 2);
    for (auto mi : mf.code) {
      std::map<std::uint32_t, std::uint32_t> tmp;
      auto sub = [&](Reg& r) {
        if (!r.is_virt() || !slot_of.count(r.id)) return;
        auto [it, fresh] = tmp.try_emplace(r.id, 0);
        if (fresh) {
          it->second = mf.new_vreg(mf.vreg_class[r.id]);
          temps.insert(it->second);
        }
        r.id = it->second;
      };
      auto used = mir::uses(mi);
      auto defd = mir::defs(mi);
      std::vector<std::pair<std::uint32_t, bool>> reloads, stores;
      for (Reg r : used)
        if (r.is_virt() && slot_of.count(r.id) &&
            std::find_if(reloads.begin(), reloads.end(), [&](auto& p) { return p.first == r.id; }) == reloads.end())
          reloads.push_back({r.id, true});
      for (Reg r : defd)
        if (r.is_virt() && slot_of.count(r.id)) stores.push_back({r.id, true});
      MachineInstr orig = mi;
      sub(mi.dst);
      sub(mi.src1);
      sub(mi.src2);
      sub(mi.mem.base);
      sub(mi.mem.index);
      for (auto [v, _] : reloads) {
        MachineInstr ld;
        ld.op = mf.vreg_class[v] == RegClass::GPR ? Op::Load : Op::FLoad;
        ld.dst = Reg::virt(tmp.at(v));
        ld.mem.slot = SlotKind::Spill;
        ld.mem.slot_index = slot_of.at(v);
        ld.call_seq = orig.call_seq;
        out.push_back(ld);
      }
      out.push_back(mi);
      for (auto [v, _] : stores) {
        MachineInstr st;
        st.op = mf.vreg_class[v] == RegClass::GPR ? Op::Store : Op::FStore;
        st.src1 = Reg::virt(tmp.at(v));
        st.mem.slot = SlotKind::Spill;
        st.mem.slot_index = slot_of.at(v);
        st.call_seq = orig.call_seq;
        out.push_back(st);
      }
    }
    mf.code = std::move(out);
  }
}

// ---------------------------------------------------------------------------
// Frame layout

namespace {

std::int64_t align_down(std::int64_t v, std::int64_t a) {
  std::int64_t r = v % a;
  if (r < 0) r += a;
  return v - r;
}

std::int64_t round_up(std::int64_t v, std::int64_t a) { return (v + a - 1) / a * a; }

void adjust_sp(std::vector<MachineInstr>& out, Op op, Reg dst, Reg src, std::int64_t amount) {
  while (amount > 0) {
    std::int64_t chunk = amount < 4096 ? amount : std::min<std::int64_t>(amount / 4096 * 4096, (1 << 24) - 4096);
    MachineInstr mi;
    mi.op = op;
    mi.dst = dst;
    mi.src1 = src;
    mi.imm = chunk;
    out.push_back(mi);
    src = dst;
    amount -= chunk;
  }
}

}  // namespace

MachineFunction build_frame_layout(MachineFunction mf) {
  if (!mf.allocated) throw CodegenError("frame layout requires an allocated function");
  mir::FrameLayout fl;
  fl.outgoing_size = mf.frame.outgoing_size;
  std::int64_t cursor = fl.fp_slot;
  for (Role r : abi::callee_saved_order(mf.target)) {
    if (r == Role::FP) continue;
    if (std::find(mf.used_callee_saved.begin(), mf.used_callee_saved.end(), r) == mf.used_callee_saved.end())
      continue;
    cursor -= 8;
    fl.callee_saved.emplace_back(r, cursor);
  }
  cursor -= 8;
  fl.emergency_slot = cursor;
  for (std::uint32_t sz : mf.local_sizes) {
    std::int64_t natural = sz >= 8 ? 8 : static_cast<std::int64_t>(std::bit_ceil(std::max<std::uint32_t>(sz, 1)));
    std::int64_t a = std::max<std::int64_t>(natural, 4);
    cursor = align_down(cursor - sz, a);
    fl.locals.push_back(cursor);
  }
  std::uint32_t nspill = 0;
  for (const auto& l : mf.vreg_loc)
    if (l.kind == mir::VregLocation::Kind::Spill) nspill = std::max(nspill, l.slot + 1);
  cursor = align_down(cursor, 8);
  for (std::uint32_t k = 0; k < nspill; ++k) {
    cursor -= 8;
    fl.spills.push_back(cursor);
  }
  fl.size = round_up(8 - cursor + fl.outgoing_size, 16);
  mf.frame = fl;

  auto resolve = [&](Mem& m) {
    switch (m.slot) {
      case SlotKind::None: return;
      case SlotKind::Local: m.disp = fl.fp_disp(fl.locals.at(m.slot_index)); break;
      case SlotKind::Spill: m.disp = fl.fp_disp(fl.spills.at(m.slot_index)); break;
      case SlotKind::Incoming: m.disp = fl.fp_disp(8 * static_cast<std::int64_t>(m.slot_index)); break;
    }
    m.base = Reg::phys(Role::FP);
    m.slot = SlotKind::None;
    m.slot_index = 0;
  };

  const Reg sp = Reg::phys(Role::SP), fp = Reg::phys(Role::FP), lr = Reg::phys(Role::LR);
  const std::int64_t ncs = static_cast<std::int64_t>(fl.callee_saved.size());
  std::vector<MachineInstr> out;
  auto push = [&](Op op, Reg dst, Reg src, std::int64_t imm = 0) {
    MachineInstr mi;
    mi.op = op;
    mi.dst = dst;
    mi.src1 = src;
    mi.imm = imm;
    out.push_back(mi);
  };
  auto mem_op = [&](Op op, Reg reg, Reg base, std::int64_t disp) {
    MachineInstr mi;
    mi.op = op;
    (op == Op::Store ? mi.src1 : mi.dst) = reg;
    mi.mem.base = base;
    mi.mem.disp = disp;
    out.push_back(mi);
  };
  if (mf.target == Target::X64) {
    push(Op::Push, {}, fp);
    push(Op::Mov, fp, sp);
    for (auto& [r, off] : fl.callee_saved) push(Op::Push, {}, Reg::phys(r));
    adjust_sp(out, Op::SubImm, sp, sp, fl.size - 16 - 8 * ncs);
  } else {
    mem_op(Op::Store, lr, sp, -8);
    mem_op(Op::Store, fp, sp, -16);
    push(Op::SubImm, fp, sp, 16);
    for (auto& [r, off] : fl.callee_saved) mem_op(Op::Store, Reg::phys(r), fp, fl.fp_disp(off));
    adjust_sp(out, Op::SubImm, sp, sp, fl.size);
  }
  for (auto mi : mf.code) {
    resolve(mi.mem);
    if (mi.op == Op::LocalAddr && mi.mem.slot == SlotKind::None && mi.mem.base == fp) {
      mi.imm = mi.mem.disp;
      mi.mem = {};
    }
    if (mi.op != Op::Ret) {
      out.push_back(mi);
      continue;
    }
    if (mf.target == Target::X64) {
      if (ncs == 0)
        push(Op::Mov, sp, fp);
      else
        push(Op::SubImm, sp, fp, 8 * ncs);
      for (auto it = fl.callee_saved.rbegin(); it != fl.callee_saved.rend(); ++it) push(Op::Pop, Reg::phys(it->first), {});
      push(Op::Pop, fp, {});
    } else {
      for (auto& [r, off] : fl.callee_saved) mem_op(Op::Load, Reg::phys(r), fp, fl.fp_disp(off));
      push(Op::AddImm, sp, fp, 16);
      mem_op(Op::Load, lr, sp, -8);
      mem_op(Op::Load, fp, sp, -16);
    }
    out.push_back(mi);
  }
  mf.code = std::move(out);
  return mf;
}

MachineFunction compile_function(const ir::Program& p, const ir::Function& f, Target t, const UnifyOptions& opts,
                                 int first_callsite) {
  auto mf = select_instructions(p, f, t, opts, first_callsite);
  if (t == Target::X64 || opts.two_addr) mf = convert_two_address(std::move(mf));
  mf = allocate_registers(std::move(mf));
  return build_frame_layout(std::move(mf));
}

std::vector<MachineFunction> compile_program(const ir::Program& p, Target t, const UnifyOptions& opts) {
  std::vector<MachineFunction> out;
  int cs = 0;
  for (const auto& f : p.functions) {
    out.push_back(compile_function(p, f, t, opts, cs));
    cs += static_cast<int>(out.back().callsites.size());
  }
  return out;
}

mir::CodegenStats total_stats(const std::vector<MachineFunction>& fs) {
  mir::CodegenStats s;
  for (const auto& f : fs) s += f.stats;
  return s;
}

}  // namespace unistack::codegen
