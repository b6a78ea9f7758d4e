#include "unistack/layout.hpp"

#include <algorithm>
#include <set>
#include <unordered_map>

namespace unistack::layout {

using mir::MachineFunction;
using mir::MachineInstr;
using mir::Op;

namespace {

bool fits8(std::int64_t v) { return v >= -128 && v <= 127; }
bool fits32(std::int64_t v) { return v >= INT32_MIN && v <= INT32_MAX; }

std::uint32_t mem_size(const mir::Mem& m) { return (fits8(m.disp) ? 4 : 7) + (m.index.valid() ? 1 : 0); }

}  // namespace

std::uint32_t instr_size(const MachineInstr& mi, Target t) {
  if (mi.op == Op::Label) return 0;
  if (t == Target::A64) return 4;
  switch (mi.op) {
    case Op::Label: return 0;
    case Op::Nop: return 1;
    case Op::JmpPad:
    case Op::Jmp: return 5;
    case Op::BCond: return 6;
    case Op::Call: return 5 + mi.prefix;
    case Op::Ret:
    case Op::Push:
    case Op::Pop: return 1;
    case Op::Mov:
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
    case Op::Cmp: return 3;
    case Op::FMov:
    case Op::FAdd:
    case Op::FMul: return 4;
    case Op::AddImm:
    case Op::SubImm:
      if (mi.dst != mi.src1) return fits8(mi.imm) ? 4 : 7;  // lea
      return 7;
    case Op::MulImm:
    case Op::CmpImm: return 7;
    case Op::MovImm:
      if (mi.imm == 0) return 3;
      return fits32(mi.imm) ? 7 : 10;
    case Op::MovK: return 10;
    case Op::Load:
    case Op::Store:
    case Op::FLoad:
    case Op::FStore: return mem_size(mi.mem);
    case Op::LocalAddr: return fits8(mi.imm) ? 4 : 7;
    case Op::GlobalAddr: return 7;
    case Op::Emit:
    case Op::EmitF: return 2;
  }
  return 0;
}

void assign_sizes(MachineFunction& mf) {
  for (auto& mi : mf.code) mi.size = instr_size(mi, mf.target);
}

SymbolTable assign_symbol_addresses(const std::vector<std::pair<std::string, std::uint64_t>>& x64,
                                    const std::vector<std::pair<std::string, std::uint64_t>>& a64) {
  if (x64.size() != a64.size()) throw LayoutError("symbol lists differ in length");
  SymbolTable out;
  std::uint64_t cur = kCodeBase;
  for (std::size_t i = 0; i < x64.size(); ++i) {
    if (x64[i].first != a64[i].first) throw LayoutError("symbol order differs at " + x64[i].first);
    out.emplace_back(x64[i].first, cur);
    std::uint64_t end = cur + std::max(x64[i].second, a64[i].second);
    cur = (end + kSymbolGranule - 1) / kSymbolGranule * kSymbolGranule;
    if (cur > kDataBase) throw LayoutError("code section overflows into the data section");
  }
  return out;
}

namespace {

const CallsitePad* find_pad(const PaddingPlan& plan, int callsite) {
  for (const auto& p : plan)
    if (p.callsite == callsite) return &p;
  return nullptr;
}

std::uint32_t base_size(const MachineInstr& mi, Target t) {
  if (mi.op == Op::Call) {
    MachineInstr c = mi;
    c.prefix = 0;
    return instr_size(c, t);
  }
  return mi.size ? mi.size : instr_size(mi, t);
}

/// Walks a function with a candidate plan applied, calling `on_label` with
/// each label's offset (returning the pad to insert) and collecting the
/// call end offsets.
template <typename OnLabel>
std::vector<std::uint64_t> walk(const MachineFunction& mf, const PaddingPlan& plan, OnLabel on_label) {
  std::vector<std::uint64_t> ends;
  std::uint64_t off = 0;
  for (const auto& mi : mf.code) {
    if (mi.op == Op::Label) {
      off += on_label(mi, off);
      continue;
    }
    std::uint64_t sz = base_size(mi, mf.target);
    if (mi.op == Op::Call) {
      if (const CallsitePad* p = find_pad(plan, mi.callsite)) {
        if (p->target == mf.target) off += p->pad;
        if (mf.target == Target::X64) sz += p->x64_prefix;
      }
      off += sz;
      ends.push_back(off);
      continue;
    }
    off += sz;
  }
  return ends;
}

}  // namespace

std::vector<std::uint64_t> return_offsets(const MachineFunction& mf, const PaddingPlan& plan,
                                          const BlockPads& blocks) {
  return walk(mf, plan, [&](const MachineInstr& mi, std::uint64_t) -> std::uint64_t {
    auto it = blocks.find(mi.label);
    return it == blocks.end() ? 0 : it->second;
  });
}

PaddingPlan align_callsites(const MachineFunction& x64, const MachineFunction& a64, const BlockPads& x64_blocks,
                            const BlockPads& a64_blocks) {
  if (x64.callsites != a64.callsites) throw LayoutError("callsite lists differ in " + x64.name);
  PaddingPlan plan;
  for (std::size_t k = 0; k < x64.callsites.size(); ++k) {
    auto xo = return_offsets(x64, plan, x64_blocks);
    auto ao = return_offsets(a64, plan, a64_blocks);
    CallsitePad pad;
    pad.callsite = x64.callsites[k];
    if (xo[k] < ao[k]) {
      pad.target = Target::X64;
      pad.pad = static_cast<std::uint32_t>(ao[k] - xo[k]);
    } else if (ao[k] < xo[k]) {
      std::uint64_t d = xo[k] - ao[k];
      std::uint64_t rounded = (d + 3) / 4 * 4;
      pad.target = Target::A64;
      pad.pad = static_cast<std::uint32_t>(rounded);
      pad.x64_prefix = static_cast<std::uint32_t>(rounded - d);
    }
    plan.push_back(pad);
  }
  return plan;
}

PaddingPlan apply_jump_over(PaddingPlan plan) {
  for (auto& p : plan) p.uses_jump = p.target && p.pad > jump_size(*p.target);
  return plan;
}

std::vector<int> loop_headers(const MachineFunction& mf) {
  std::unordered_map<int, std::size_t> at;
  for (std::size_t i = 0; i < mf.code.size(); ++i)
    if (mf.code[i].op == Op::Label) at[mf.code[i].label] = i;
  std::set<int> out;
  for (std::size_t i = 0; i < mf.code.size(); ++i) {
    const auto& mi = mf.code[i];
    if ((mi.op == Op::Jmp || mi.op == Op::BCond) && at.count(mi.label) && at[mi.label] <= i) out.insert(mi.label);
  }
  return {out.begin(), out.end()};
}

BlockPads align_blocks(const MachineFunction& mf, const PaddingPlan& plan) {
  auto headers = loop_headers(mf);
  BlockPads pads;
  walk(mf, plan, [&](const MachineInstr& mi, std::uint64_t off) -> std::uint64_t {
    if (!std::binary_search(headers.begin(), headers.end(), mi.label)) return 0;
    auto pad = static_cast<std::uint32_t>((16 - off % 16) % 16);
    if (pad) pads[mi.label] = pad;
    return pad;
  });
  return pads;
}

FixpointResult accumulated_padding_fixpoint(const MachineFunction& x64, const MachineFunction& a64,
                                            bool block_align, bool callsite_align, int cap) {
  FixpointResult r;
  PaddingPlan prev;
  for (int it = 1; it <= cap; ++it) {
    r.iterations = it;
    PaddingPlan plan = callsite_align ? align_callsites(x64, a64, r.x64_blocks, r.a64_blocks) : PaddingPlan{};
    if (!block_align) {
      r.plan = plan;
      r.converged = true;
      return r;
    }
    BlockPads bx = align_blocks(x64, plan), ba = align_blocks(a64, plan);
    const bool stable = bx == r.x64_blocks && ba == r.a64_blocks;
    r.x64_blocks = std::move(bx);
    r.a64_blocks = std::move(ba);
    prev = std::exchange(r.plan, plan);
    if (stable) {
      r.converged = true;
      return r;
    }
  }
  for (std::size_t k = 0; k < r.plan.size(); ++k)
    if (k >= prev.size() || !(prev[k] == r.plan[k])) r.oscillating.push_back(r.plan[k].callsite);
  return r;
}

void apply_padding(MachineFunction& mf, const PaddingPlan& plan, const BlockPads& blocks) {
  const Target t = mf.target;
  std::vector<MachineInstr> out;
  auto nops = [&](std::uint32_t bytes) {
    for (std::uint32_t b = 0; b < bytes; b += nop_size(t)) {
      MachineInstr n;
      n.op = Op::Nop;
      n.size = nop_size(t);
      out.push_back(n);
    }
  };
  for (auto mi : mf.code) {
    if (mi.op == Op::Label) {
      if (auto it = blocks.find(mi.label); it != blocks.end()) nops(it->second);
    }
    if (mi.op == Op::Call) {
      if (const CallsitePad* p = find_pad(plan, mi.callsite)) {
        if (p->target == t && p->pad > 0) {
          if (p->uses_jump) {
            MachineInstr j;
            j.op = Op::JmpPad;
            j.size = jump_size(t);
            out.push_back(j);
            nops(p->pad - jump_size(t));
          } else {
            nops(p->pad);
          }
        }
        if (t == Target::X64) mi.prefix = static_cast<std::uint8_t>(p->x64_prefix);
      }
    }
    mi.size = instr_size(mi, t);
    out.push_back(mi);
  }
  mf.code = std::move(out);
}

namespace {

void layout_data(const ir::Program& p, MachineImage& img) {
  std::uint64_t cur = kDataBase;
  img.data_base = kDataBase;
  for (const auto& g : p.globals) {
    cur = (cur + 7) / 8 * 8;
    img.globals.push_back({g.name, cur, g.init.size()});
    img.data.resize(cur - kDataBase);
    img.data.insert(img.data.end(), g.init.begin(), g.init.end());
    cur += g.init.size();
  }
}

/// Freezes addresses for one target given the shared symbol table.
MachineImage emit_image(const ir::Program& p, const std::vector<MachineFunction>& fs, const SymbolTable& syms,
                        std::uint64_t hash) {
  MachineImage img;
  img.target = fs.empty() ? Target::X64 : fs.front().target;
  img.program_hash = hash;
  layout_data(p, img);
  std::unordered_map<std::string, std::uint64_t> addr;
  for (const auto& [n, a] : syms) addr[n] = a;
  for (const auto& g : img.globals) addr[g.name] = g.addr;
  for (std::size_t i = 0; i < fs.size(); ++i) {
    const auto& mf = fs[i];
    std::uint64_t base = syms[i].second;
    std::unordered_map<int, std::uint64_t> label_addr;
    std::uint64_t off = base;
    for (const auto& mi : mf.code) {
      if (mi.op == Op::Label) label_addr[mi.label] = off;
      off += mi.size;
    }
    img.functions.push_back({mf.name, base, off - base, mf.frame.size});
    off = base;
    for (std::size_t k = 0; k < mf.code.size(); ++k) {
      MachineInstr mi = mf.code[k];
      mi.addr = off;
      off += mi.size;
      if (mi.op == Op::Label) continue;
      switch (mi.op) {
        case Op::Jmp:
        case Op::BCond: mi.target = label_addr.at(mi.label); break;
        case Op::Call: mi.target = addr.at(mi.sym); break;
        case Op::GlobalAddr: mi.target = addr.at(mi.sym); break;
        case Op::JmpPad: {
          std::uint64_t a = off;
          for (std::size_t j = k + 1; j < mf.code.size() && mf.code[j].op != Op::Call; ++j) a += mf.code[j].size;
          mi.target = a;
          break;
        }
        default: break;
      }
      if (mi.op == Op::Call) img.callsites.push_back({mi.callsite, mf.name, mi.addr, mi.addr + mi.size});
      img.code.push_back(std::move(mi));
    }
  }
  if (auto it = addr.find(p.entry); it != addr.end()) img.entry = it->second;
  img.index();
  return img;
}

void check_image(const MachineImage& img) {
  for (std::size_t i = 0; i < img.code.size(); ++i) {
    const auto& mi = img.code[i];
    if (mi.size != instr_size(mi, img.target)) throw LayoutError("size model disagreement at an instruction");
    if (mi.size == 0) throw LayoutError("zero-size instruction in image");
    if (i + 1 < img.code.size() && img.code[i + 1].addr != mi.addr + mi.size &&
        !img.function_at(img.code[i + 1].addr))
      throw LayoutError("gap inside a function body");
    if (mi.op == Op::JmpPad) {
      const auto* c = img.at(mi.target);
      if (!c || c->op != Op::Call) throw LayoutError("jump-over does not land on its call");
    }
    if (mi.mem.index.valid() && mi.mem.scale == 0) throw LayoutError("index register without scale");
  }
}

}  // namespace

LinkResult link(const ir::Program& p, std::vector<MachineFunction> x64, std::vector<MachineFunction> a64,
                const codegen::UnifyOptions& opts, std::uint64_t program_hash) {
  if (x64.size() != a64.size()) throw LayoutError("function lists differ");
  LinkResult r;
  for (std::size_t i = 0; i < x64.size(); ++i) {
    assign_sizes(x64[i]);
    assign_sizes(a64[i]);
    FixpointResult fx = accumulated_padding_fixpoint(x64[i], a64[i], opts.block_align, opts.callsite_align);
    if (!fx.converged) {
      std::string cs;
      for (int c : fx.oscillating) cs += " " + std::to_string(c);
      throw LayoutError("padding fixpoint did not converge in " + x64[i].name + "; oscillating callsites:" + cs);
    }
    if (opts.jump_over) fx.plan = apply_jump_over(fx.plan);
    apply_padding(x64[i], fx.plan, fx.x64_blocks);
    apply_padding(a64[i], fx.plan, fx.a64_blocks);
    for (const auto& pad : fx.plan) {
      r.pad_bytes += pad.pad + pad.x64_prefix;
      r.plan.push_back(pad);
    }
    for (const auto& [l, b] : fx.x64_blocks) r.pad_bytes += b;
    for (const auto& [l, b] : fx.a64_blocks) r.pad_bytes += b;
    r.fixpoints.push_back(std::move(fx));
  }
  std::vector<std::pair<std::string, std::uint64_t>> sx, sa;
  for (const auto& f : x64) {
    std::uint64_t n = 0;
    for (const auto& mi : f.code) n += mi.size;
    sx.emplace_back(f.name, n);
  }
  for (const auto& f : a64) {
    std::uint64_t n = 0;
    for (const auto& mi : f.code) n += mi.size;
    sa.emplace_back(f.name, n);
  }
  SymbolTable syms = assign_symbol_addresses(sx, sa);
  r.x64 = emit_image(p, x64, syms, program_hash);
  r.a64 = emit_image(p, a64, syms, program_hash);
  r.x64.target = Target::X64;
  r.a64.target = Target::A64;
  check_image(r.x64);
  check_image(r.a64);
  if (opts.callsite_align) {
    if (r.x64.callsites.size() != r.a64.callsites.size()) throw LayoutError("callsite tables differ in size");
    for (std::size_t k = 0; k < r.x64.callsites.size(); ++k) {
      const auto& cx = r.x64.callsites[k];
      const auto& ca = r.a64.callsites[k];
      if (cx.id != ca.id || cx.return_addr != ca.return_addr)
        throw LayoutError("return addresses differ at callsite " + std::to_string(cx.id));
    }
  }
  return r;
}

MachineImage link_single(const ir::Program& p, std::vector<MachineFunction> fs, std::uint64_t program_hash) {
  std::vector<std::pair<std::string, std::uint64_t>> sizes;
  for (auto& f : fs) {
    assign_sizes(f);
    std::uint64_t n = 0;
    for (const auto& mi : f.code) n += mi.size;
    sizes.emplace_back(f.name, n);
  }
  SymbolTable syms = assign_symbol_addresses(sizes, sizes);
  MachineImage img = emit_image(p, fs, syms, program_hash);
  check_image(img);
  return img;
}

}  // namespace unistack::layout
