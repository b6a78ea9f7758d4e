#include "unistack/emu.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>
#include <unordered_map>

namespace unistack::emu {

using abi::Role;
using mir::MachineInstr;
using mir::Op;
using mir::Reg;

std::string_view status_name(Status s) {
  switch (s) {
    case Status::Running: return "running";
    case Status::Halted: return "halted";
    case Status::Fault: return "fault";
    case Status::FuelExhausted: return "fuel-exhausted";
  }
  return "?";
}

namespace {

constexpr std::uint64_t kStackLow = kStackBase - kStackSize;

std::string hex(std::uint64_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << v;
  return os.str();
}

}  // namespace

std::uint64_t MachineState::read64(std::uint64_t addr) const {
  const std::uint8_t* p = nullptr;
  if (addr >= data_base && addr + 8 <= data_base + data.size() && addr + 8 > addr) {
    p = &data[addr - data_base];
  } else if (addr >= kStackLow && addr + 8 <= kStackBase) {
    // Bytes below the touched part of the stack read as zero.
    std::uint64_t low = kStackBase - stack.size();
    if (addr < low) {
      std::uint64_t v = 0;
      for (std::uint64_t i = 0; i < 8; ++i)
        if (addr + i >= low) v |= static_cast<std::uint64_t>(stack[addr + i - low]) << (8 * i);
      return v;
    }
    p = &stack[addr - low];
  } else {
    throw EmuError("memory fault reading " + hex(addr));
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void MachineState::write64(std::uint64_t addr, std::uint64_t v) {
  std::uint8_t* p = nullptr;
  if (addr >= data_base && addr + 8 <= data_base + data.size() && addr + 8 > addr) {
    p = &data[addr - data_base];
  } else if (addr >= kStackLow && addr + 8 <= kStackBase) {
    std::uint64_t need = kStackBase - addr;
    if (stack.size() < need) {
      std::uint64_t grown = std::min<std::uint64_t>(kStackSize, std::max<std::uint64_t>(need, 2 * stack.size()));
      stack.insert(stack.begin(), grown - stack.size(), 0);
    }
    p = &stack[addr - (kStackBase - stack.size())];
  } else {
    throw EmuError("memory fault writing " + hex(addr));
  }
  for (int i = 0; i < 8; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

const MachineInstr* MachineState::current() const { return image ? image->at(pc) : nullptr; }

MachineState load_image(std::shared_ptr<const MachineImage> img) {
  if (!img) throw EmuError("no image");
  if (!img->at(img->entry)) throw EmuError("malformed image: entry is not an instruction");
  MachineState s;
  s.target = img->target;
  s.image = img;
  s.data_base = img->data_base;
  s.data = img->data;
  s.stack.assign(4096, 0);
  s.pc = img->entry;
  s.set_reg(Role::SP, kStackBase);
  if (s.target == Target::X64) {
    // The startup call pushed a zero return address.
    s.set_reg(Role::SP, kStackBase - 8);
    s.write64(kStackBase - 8, 0);
  } else {
    s.set_reg(Role::LR, 0);
  }
  return s;
}

MachineState load_image(const MachineImage& img) { return load_image(std::make_shared<const MachineImage>(img)); }

namespace {

std::uint64_t rd(const MachineState& s, Reg r) {
  if (!r.is_phys()) throw EmuError("decode fault: operand is not a machine register");
  Role role = r.role();
  if (!abi::exists_on(role, s.target))
    throw EmuError("decode fault: " + std::string(abi::role_id(role)) + " does not exist on " +
                   std::string(target_name(s.target)));
  if (role == Role::ZERO) return 0;
  return s.reg(role);
}

void wr(MachineState& s, Reg r, std::uint64_t v) {
  if (!r.is_phys()) throw EmuError("decode fault: operand is not a machine register");
  Role role = r.role();
  if (!abi::exists_on(role, s.target))
    throw EmuError("decode fault: " + std::string(abi::role_id(role)) + " does not exist on " +
                   std::string(target_name(s.target)));
  if (role == Role::ZERO) return;
  s.set_reg(role, v);
}

std::uint64_t ea(const MachineState& s, const mir::Mem& m) {
  std::uint64_t a = static_cast<std::uint64_t>(m.disp);
  if (m.base.valid()) a += rd(s, m.base);
  if (m.index.valid()) a += rd(s, m.index) * m.scale;
  return a;
}

double f(std::uint64_t v) { return std::bit_cast<double>(v); }
std::uint64_t bits(double d) { return std::bit_cast<std::uint64_t>(d); }

bool holds(ir::CmpPred p, std::int64_t a, std::int64_t b) {
  switch (p) {
    case ir::CmpPred::Eq: return a == b;
    case ir::CmpPred::Ne: return a != b;
    case ir::CmpPred::Lt: return a < b;
    case ir::CmpPred::Le: return a <= b;
    case ir::CmpPred::Gt: return a > b;
    case ir::CmpPred::Ge: return a >= b;
  }
  return false;
}

void execute(MachineState& s, const MachineInstr& mi) {
  const bool x64 = s.target == Target::X64;
  std::uint64_t next = s.pc + mi.size;
  auto imm = static_cast<std::uint64_t>(mi.imm);
  switch (mi.op) {
    case Op::Label: throw EmuError("decode fault: label in image");
    case Op::Nop: break;
    case Op::JmpPad:
    case Op::Jmp: next = mi.target; break;
    case Op::Mov:
    case Op::FMov: wr(s, mi.dst, rd(s, mi.src1)); break;
    case Op::MovImm: wr(s, mi.dst, imm); break;
    case Op::MovK: {
      std::uint64_t mask = 0xFFFFull << mi.shift;
      wr(s, mi.dst, (rd(s, mi.dst) & ~mask) | ((imm & 0xFFFF) << mi.shift));
      break;
    }
    case Op::Add: wr(s, mi.dst, rd(s, mi.src1) + rd(s, mi.src2)); break;
    case Op::Sub: wr(s, mi.dst, rd(s, mi.src1) - rd(s, mi.src2)); break;
    case Op::Mul: wr(s, mi.dst, rd(s, mi.src1) * rd(s, mi.src2)); break;
    case Op::AddImm: wr(s, mi.dst, rd(s, mi.src1) + imm); break;
    case Op::SubImm: wr(s, mi.dst, rd(s, mi.src1) - imm); break;
    case Op::MulImm: wr(s, mi.dst, rd(s, mi.src1) * imm); break;
    case Op::Load:
    case Op::FLoad: wr(s, mi.dst, s.read64(ea(s, mi.mem))); break;
    case Op::Store:
    case Op::FStore: s.write64(ea(s, mi.mem), rd(s, mi.src1)); break;
    case Op::FAdd: wr(s, mi.dst, bits(f(rd(s, mi.src1)) + f(rd(s, mi.src2)))); break;
    case Op::FMul: wr(s, mi.dst, bits(f(rd(s, mi.src1)) * f(rd(s, mi.src2)))); break;
    case Op::LocalAddr: wr(s, mi.dst, s.reg(Role::FP) + imm); break;
    case Op::GlobalAddr: wr(s, mi.dst, mi.target); break;
    case Op::Cmp:
      s.cmp_lhs = static_cast<std::int64_t>(rd(s, mi.src1));
      s.cmp_rhs = static_cast<std::int64_t>(rd(s, mi.src2));
      break;
    case Op::CmpImm:
      s.cmp_lhs = static_cast<std::int64_t>(rd(s, mi.src1));
      s.cmp_rhs = mi.imm;
      break;
    case Op::BCond:
      if (holds(mi.cond, s.cmp_lhs, s.cmp_rhs)) next = mi.target;
      break;
    case Op::Call:
      if (x64) {
        std::uint64_t sp = s.reg(Role::SP) - 8;
        s.write64(sp, next);
        s.set_reg(Role::SP, sp);
      } else {
        s.set_reg(Role::LR, next);
      }
      ++s.calls;
      next = mi.target;
      break;
    case Op::Ret:
      if (x64) {
        std::uint64_t sp = s.reg(Role::SP);
        next = s.read64(sp);
        s.set_reg(Role::SP, sp + 8);
      } else {
        next = s.reg(Role::LR);
      }
      if (next == 0) s.status = Status::Halted;
      break;
    case Op::Emit:
    case Op::EmitF: s.output.push_back(rd(s, mi.src1)); break;
    case Op::Push: {
      if (!x64) throw EmuError("decode fault: push on a64");
      std::uint64_t sp = s.reg(Role::SP) - 8;
      s.write64(sp, rd(s, mi.src1));
      s.set_reg(Role::SP, sp);
      break;
    }
    case Op::Pop: {
      if (!x64) throw EmuError("decode fault: pop on a64");
      std::uint64_t sp = s.reg(Role::SP);
      wr(s, mi.dst, s.read64(sp));
      s.set_reg(Role::SP, sp + 8);
      break;
    }
  }
  s.pc = next;
}

}  // namespace

void step(MachineState& s) {
  if (s.halted()) return;
  const MachineInstr* mi = s.current();
  if (!mi) {
    s.status = Status::Fault;
    s.fault = "decode fault: pc " + hex(s.pc) + " is not an instruction boundary";
    return;
  }
  try {
    execute(s, *mi);
    ++s.steps;
  } catch (const EmuError& e) {
    s.status = Status::Fault;
    s.fault = e.what();
  }
}

namespace {

std::int64_t frame_of(const MachineState& s, std::uint64_t addr, std::string* name) {
  const FunctionSymbol* f = s.image->function_at(addr);
  if (!f) return 0;
  if (name) *name = f->name;
  return f->frame_size;
}

// Address of the return-address slot: pushed on x64, about to be stored
// just below SP on a64.
std::uint64_t frame_base_at_entry(const MachineState& s) {
  return s.target == Target::X64 ? s.reg(Role::SP) : s.reg(Role::SP) - 8;
}

}  // namespace

RunResult run(MachineState& s, const RunOptions& opts) {
  RunResult r;
  Trace* t = opts.trace;
  if (t && t->events.empty() && t->frames.empty() && !s.halted()) {
    TraceEvent e;
    e.kind = TraceEvent::Kind::Entry;
    e.frame_size = frame_of(s, s.pc, &e.function);
    t->frames.push_back(e.frame_size);
    t->names.push_back(e.function);
    e.depth = 1;
    e.sp = frame_base_at_entry(s);
    t->events.push_back(e);
  }
  std::uint64_t used = 0;
  while (!s.halted()) {
    const MachineInstr* mi = s.current();
    if (mi && mi->op == Op::Call && opts.pause_before_call && opts.pause_before_call(s)) {
      r.paused = true;
      break;
    }
    if (used >= opts.fuel) {
      s.status = Status::FuelExhausted;
      break;
    }
    ++used;
    if (t && mi && mi->op == Op::Call) {
      TraceEvent e;
      e.kind = TraceEvent::Kind::Callsite;
      e.callsite = mi->callsite;
      e.sp = s.reg(Role::SP);
      e.fp = s.reg(Role::FP);
      e.frame_size = t->frames.empty() ? 0 : t->frames.back();
      e.function = t->names.empty() ? "" : t->names.back();
      e.depth = static_cast<int>(t->frames.size());
      t->events.push_back(e);
    }
    const bool is_ret = mi && mi->op == Op::Ret;
    step(s);
    if (!t || s.status == Status::Fault) continue;
    if (mi && mi->op == Op::Call) {
      TraceEvent e;
      e.kind = TraceEvent::Kind::Entry;
      e.frame_size = frame_of(s, s.pc, &e.function);
      t->frames.push_back(e.frame_size);
      t->names.push_back(e.function);
      e.depth = static_cast<int>(t->frames.size());
      e.sp = frame_base_at_entry(s);
      t->events.push_back(e);
    } else if (is_ret && !t->frames.empty()) {
      TraceEvent e;
      e.kind = TraceEvent::Kind::Exit;
      e.frame_size = t->frames.back();
      e.function = t->names.back();
      e.depth = static_cast<int>(t->frames.size());
      e.sp = s.reg(Role::SP) - 8;  // the popped frame's base
      t->frames.pop_back();
      t->names.pop_back();
      t->events.push_back(e);
    }
  }
  r.status = s.status;
  r.steps = used;
  r.fault = s.fault;
  return r;
}

RunResult run(MachineState& s, std::uint64_t fuel, Trace* trace) {
  RunOptions o;
  o.fuel = fuel;
  o.trace = trace;
  return run(s, o);
}

std::string Trace::to_text() const {
  std::ostringstream os;
  for (const auto& e : events) {
    switch (e.kind) {
      case TraceEvent::Kind::Entry: os << "entry " << e.function; break;
      case TraceEvent::Kind::Exit: os << "exit " << e.function; break;
      case TraceEvent::Kind::Callsite: os << "callsite " << e.callsite << " in " << e.function; break;
    }
    os << " depth=" << e.depth << " frame=" << e.frame_size << std::hex;
    if (e.kind == TraceEvent::Kind::Callsite) os << " sp=0x" << e.sp << " fp=0x" << e.fp;
    else os << " base=0x" << e.sp;
    os << std::dec << "\n";
  }
  return os.str();
}

FivePoint five_point(std::vector<double> xs) {
  if (xs.empty()) throw EmuError("empty sample set");
  std::sort(xs.begin(), xs.end());
  auto q = [&](double p) {
    double h = (static_cast<double>(xs.size()) - 1) * p;
    auto lo = static_cast<std::size_t>(std::floor(h));
    std::size_t hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (h - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
  };
  return {xs.front(), q(0.25), q(0.5), q(0.75), xs.back()};
}

StackStats stack_stats(const Trace& t) {
  std::vector<double> sizes, counts;
  std::vector<std::int64_t> live;
  std::size_t samples = 0;
  auto sample = [&] {
    ++samples;
    counts.push_back(static_cast<double>(live.size()));
    for (auto f : live) sizes.push_back(static_cast<double>(f));
  };
  for (const auto& e : t.events) {
    switch (e.kind) {
      case TraceEvent::Kind::Entry:
        live.push_back(e.frame_size);
        sample();
        break;
      case TraceEvent::Kind::Callsite: sample(); break;
      case TraceEvent::Kind::Exit:
        if (!live.empty()) live.pop_back();
        break;
    }
  }
  if (samples == 0) throw EmuError("empty trace");
  StackStats s;
  s.frame_size = five_point(sizes);
  s.frame_count = five_point(counts);
  s.samples = samples;
  return s;
}

}  // namespace unistack::emu

namespace unistack::emu {

namespace {

struct Frame {
  const ir::Function* fn = nullptr;
  int block = 0;
  std::size_t ip = 0;
  std::map<std::string, std::uint64_t> values;
  std::map<std::string, std::uint64_t> local_addr;
  std::uint64_t stack_mark = 0;
  std::string result;  // caller value receiving the return
};

class Interp {
 public:
  Interp(const ir::Program& p) : p_(p) {
    std::uint64_t a = kDataBase;
    for (const auto& g : p.globals) {
      globals_[g.name] = a;
      for (std::size_t k = 0; k < g.init.size(); ++k) mem_[a + k] = g.init[k];
      a += (g.init.size() + 7) / 8 * 8;
    }
  }

  InterpResult run(std::uint64_t fuel, std::optional<std::uint64_t> pause_at) {
    InterpResult r;
    try {
      const ir::Function* m = p_.find_function(p_.entry);
      if (!m) throw EmuError("no entry function '" + p_.entry + "'");
      push(*m, {}, "");
      while (!stack_.empty()) {
        if (r.steps >= fuel) {
          r.status = Status::FuelExhausted;
          break;
        }
        Frame& fr = stack_.back();
        const auto& blk = fr.fn->blocks.at(fr.block);
        if (fr.ip >= blk.instrs.size()) throw EmuError("fell off block '" + blk.label + "'");
        const ir::Instr& in = blk.instrs[fr.ip];
        if (in.op == ir::Opcode::Call && pause_at && calls_ + 1 == *pause_at) {
          r.paused = true;
          r.function = fr.fn->name;
          r.depth = static_cast<int>(stack_.size());
          r.values = fr.values;
          for (const auto& l : fr.fn->locals) {
            std::vector<std::uint8_t> bytes(l.size);
            for (std::uint32_t k = 0; k < l.size; ++k) bytes[k] = byte(fr.local_addr.at(l.name) + k);
            r.locals[l.name] = std::move(bytes);
          }
          break;
        }
        ++r.steps;
        exec(in);
      }
      if (stack_.empty()) r.status = Status::Halted;
    } catch (const EmuError& e) {
      r.status = Status::Fault;
      r.fault = e.what();
    }
    r.output = out_;
    r.calls = calls_;
    return r;
  }

 private:
  std::uint8_t byte(std::uint64_t a) const {
    auto it = mem_.find(a);
    return it == mem_.end() ? 0 : it->second;
  }

  std::uint64_t load(std::uint64_t a) {
    check(a);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(byte(a + i)) << (8 * i);
    return v;
  }

  void store(std::uint64_t a, std::uint64_t v) {
    check(a);
    for (int i = 0; i < 8; ++i) mem_[a + i] = static_cast<std::uint8_t>(v >> (8 * i));
  }

  void check(std::uint64_t a) const {
    bool in_data = a >= kDataBase && a < kDataBase + (1u << 30);
    bool in_stack = a >= kStackBase - kStackSize && a + 8 <= kStackBase;
    if (!in_data && !in_stack) throw EmuError("memory fault at " + hex(a));
  }

  std::uint64_t val(const ir::Operand& o) const {
    if (!o.is_value()) return static_cast<std::uint64_t>(o.imm);
    const auto& vs = stack_.back().values;
    auto it = vs.find(o.name);
    if (it == vs.end()) throw EmuError("undefined value %" + o.name);
    return it->second;
  }

  void push(const ir::Function& f, const std::vector<std::uint64_t>& args, std::string result) {
    if (stack_.size() > 10000) throw EmuError("call depth exceeded");
    Frame fr;
    fr.fn = &f;
    fr.stack_mark = sp_;
    fr.result = std::move(result);
    for (const auto& l : f.locals) {
      std::uint64_t size = (l.size + 7) / 8 * 8;
      if (sp_ - size < kStackBase - kStackSize) throw EmuError("stack overflow");
      sp_ -= size;
      fr.local_addr[l.name] = sp_;
      for (std::uint64_t k = 0; k < size; ++k) mem_.erase(sp_ + k);
    }
    for (std::size_t k = 0; k < f.params.size(); ++k) fr.values[f.params[k].name] = args.at(k);
    stack_.push_back(std::move(fr));
  }

  void jump(const std::string& label) {
    Frame& fr = stack_.back();
    int b = fr.fn->block_index(label);
    if (b < 0) throw EmuError("unknown block '" + label + "'");
    fr.block = b;
    fr.ip = 0;
  }

  void exec(const ir::Instr& in) {
    using ir::Opcode;
    Frame& fr = stack_.back();
    auto def = [&](std::uint64_t v) {
      if (!in.result.empty()) fr.values[in.result] = v;
    };
    auto a = [&](std::size_t k) { return val(in.args.at(k)); };
    switch (in.op) {
      case Opcode::Const: def(a(0)); break;
      case Opcode::Add: def(a(0) + a(1)); break;
      case Opcode::Sub: def(a(0) - a(1)); break;
      case Opcode::Mul: def(a(0) * a(1)); break;
      case Opcode::FAdd: def(bits(f(a(0)) + f(a(1)))); break;
      case Opcode::FMul: def(bits(f(a(0)) * f(a(1)))); break;
      case Opcode::Load:
      case Opcode::FLoad: def(load(a(0))); break;
      case Opcode::Store:
      case Opcode::FStore: store(a(0), a(1)); break;
      case Opcode::AddrOfLocal: def(fr.local_addr.at(in.symbol)); break;
      case Opcode::AddrOfGlobal: {
        auto it = globals_.find(in.symbol);
        if (it == globals_.end()) throw EmuError("unknown global '" + in.symbol + "'");
        def(it->second);
        break;
      }
      case Opcode::Emit: out_.push_back(a(0)); break;
      case Opcode::Cmp: {
        cmp_ = holds(in.pred, static_cast<std::int64_t>(a(0)), static_cast<std::int64_t>(a(1)));
        def(cmp_ ? 1 : 0);
        break;
      }
      case Opcode::Br: jump(in.targets.at(0)); return;
      case Opcode::BrCond: jump(in.targets.at(a(0) ? 0 : 1)); return;
      case Opcode::Call: {
        const ir::Function* callee = p_.find_function(in.symbol);
        if (!callee) throw EmuError("unresolved call '" + in.symbol + "'");
        std::vector<std::uint64_t> args;
        for (std::size_t k = 0; k < in.args.size(); ++k) args.push_back(a(k));
        ++calls_;
        ++fr.ip;
        push(*callee, args, in.result);
        return;
      }
      case Opcode::Ret: {
        std::uint64_t v = in.args.empty() ? 0 : a(0);
        sp_ = fr.stack_mark;
        std::string dst = fr.result;
        stack_.pop_back();
        if (!stack_.empty() && !dst.empty()) stack_.back().values[dst] = v;
        return;
      }
    }
    ++fr.ip;
  }

  const ir::Program& p_;
  std::map<std::string, std::uint64_t> globals_;
  std::unordered_map<std::uint64_t, std::uint8_t> mem_;
  std::vector<Frame> stack_;
  std::vector<std::uint64_t> out_;
  std::uint64_t sp_ = kStackBase;
  std::uint64_t calls_ = 0;
  bool cmp_ = false;
};

}  // namespace

InterpResult interpret(const ir::Program& p, std::uint64_t fuel, std::optional<std::uint64_t> pause_at_call) {
  return Interp(p).run(fuel, pause_at_call);
}

}  // namespace unistack::emu
