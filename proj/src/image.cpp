#include "unistack/image.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "unistack/bytes.hpp"

namespace unistack {

namespace stackmap {

std::string to_string(const ValueLocation& loc) {
  switch (loc.kind) {
    case ValueLocation::Kind::Register: return "reg(" + std::string(abi::role_id(loc.role)) + ")";
    case ValueLocation::Kind::StackSlot: return "slot(" + std::to_string(loc.offset) + ")";
    case ValueLocation::Kind::Constant: return "const(" + std::to_string(static_cast<std::int64_t>(loc.value)) + ")";
    case ValueLocation::Kind::Recomputed: return "recomputed";
  }
  return "?";
}

}  // namespace stackmap

void MachineImage::index() {
  decoder_.clear();
  for (std::size_t i = 0; i < code.size(); ++i) decoder_[code[i].addr] = i;
}

std::optional<std::size_t> MachineImage::index_of(std::uint64_t addr) const {
  auto it = decoder_.find(addr);
  if (it == decoder_.end()) return std::nullopt;
  return it->second;
}

const mir::MachineInstr* MachineImage::at(std::uint64_t addr) const {
  auto i = index_of(addr);
  return i ? &code[*i] : nullptr;
}

const FunctionSymbol* MachineImage::function_at(std::uint64_t addr) const {
  for (const auto& f : functions)
    if (addr >= f.addr && addr < f.addr + f.size) return &f;
  return nullptr;
}

const FunctionSymbol* MachineImage::function(std::string_view name) const {
  for (const auto& f : functions)
    if (f.name == name) return &f;
  return nullptr;
}

const GlobalSymbol* MachineImage::global(std::string_view name) const {
  for (const auto& g : globals)
    if (g.name == name) return &g;
  return nullptr;
}

const CallsiteEntry* MachineImage::callsite(int id) const {
  for (const auto& c : callsites)
    if (c.id == id) return &c;
  return nullptr;
}

const CallsiteEntry* MachineImage::callsite_returning_to(std::uint64_t return_addr) const {
  for (const auto& c : callsites)
    if (c.return_addr == return_addr) return &c;
  return nullptr;
}

std::uint64_t MachineImage::text_bytes() const {
  std::uint64_t n = 0;
  for (const auto& mi : code) n += mi.size;
  return n;
}

// ---------------------------------------------------------------------------
// Container

namespace {

constexpr char kMagic[8] = {'U', 'S', 'T', 'K', 'I', 'M', 'G', 0};

void put_reg(ByteWriter& w, mir::Reg r) {
  w.u8(static_cast<std::uint8_t>(r.kind));
  w.u32(r.id);
}

mir::Reg get_reg(ByteReader& r) {
  mir::Reg g;
  auto k = r.u8();
  if (k > 2) throw FormatError("bad register kind");
  g.kind = static_cast<mir::Reg::Kind>(k);
  g.id = r.u32();
  if (g.is_phys() && g.id >= abi::kRoleCount) throw FormatError("bad register role");
  return g;
}

void put_instr(ByteWriter& w, const mir::MachineInstr& mi) {
  w.u64(mi.addr);
  w.u32(mi.size);
  w.u8(static_cast<std::uint8_t>(mi.op));
  put_reg(w, mi.dst);
  put_reg(w, mi.src1);
  put_reg(w, mi.src2);
  w.i64(mi.imm);
  w.u8(mi.shift);
  put_reg(w, mi.mem.base);
  put_reg(w, mi.mem.index);
  w.u8(mi.mem.scale);
  w.i64(mi.mem.disp);
  w.u8(static_cast<std::uint8_t>(mi.cond));
  w.u64(mi.target);
  w.i32(mi.callsite);
  w.i32(mi.label);
  w.u8(mi.prefix);
  w.u8(static_cast<std::uint8_t>(mi.remat | (mi.call_seq << 1) | (mi.loop_header << 2)));
  w.str(mi.sym);
}

mir::MachineInstr get_instr(ByteReader& r) {
  mir::MachineInstr mi;
  mi.addr = r.u64();
  mi.size = r.u32();
  auto op = r.u8();
  if (op > static_cast<std::uint8_t>(mir::Op::Pop)) throw FormatError("bad opcode");
  mi.op = static_cast<mir::Op>(op);
  mi.dst = get_reg(r);
  mi.src1 = get_reg(r);
  mi.src2 = get_reg(r);
  mi.imm = r.i64();
  mi.shift = r.u8();
  mi.mem.base = get_reg(r);
  mi.mem.index = get_reg(r);
  mi.mem.scale = r.u8();
  mi.mem.disp = r.i64();
  auto c = r.u8();
  if (c > 5) throw FormatError("bad condition");
  mi.cond = static_cast<ir::CmpPred>(c);
  mi.target = r.u64();
  mi.callsite = r.i32();
  mi.label = r.i32();
  mi.prefix = r.u8();
  auto flags = r.u8();
  mi.remat = flags & 1;
  mi.call_seq = (flags >> 1) & 1;
  mi.loop_header = (flags >> 2) & 1;
  mi.sym = r.str();
  return mi;
}

void put_location(ByteWriter& w, const stackmap::ValueLocation& l) {
  w.u8(static_cast<std::uint8_t>(l.kind));
  w.u8(static_cast<std::uint8_t>(l.role));
  w.i64(l.offset);
  w.u64(l.value);
}

stackmap::ValueLocation get_location(ByteReader& r) {
  stackmap::ValueLocation l;
  auto k = r.u8();
  if (k > 3) throw FormatError("bad location kind");
  l.kind = static_cast<stackmap::ValueLocation::Kind>(k);
  auto role = r.u8();
  if (role >= abi::kRoleCount) throw FormatError("bad location role");
  l.role = static_cast<abi::Role>(role);
  l.offset = r.i64();
  l.value = r.u64();
  return l;
}

}  // namespace

std::vector<std::uint8_t> serialize_image(const MachineImage& img) {
  ByteWriter w;
  w.raw(std::span(reinterpret_cast<const std::uint8_t*>(kMagic), sizeof kMagic));
  w.u32(kImageVersion);
  w.u8(static_cast<std::uint8_t>(img.target));
  w.u8(img.has_stackmaps ? 1 : 0);
  w.u64(img.program_hash);
  w.u64(img.entry);
  w.u32(img.has_stackmaps ? 5 : 4);

  ByteWriter syms;
  syms.u32(static_cast<std::uint32_t>(img.functions.size()));
  for (const auto& f : img.functions) {
    syms.str(f.name);
    syms.u64(f.addr);
    syms.u64(f.size);
    syms.i64(f.frame_size);
  }
  syms.u32(static_cast<std::uint32_t>(img.globals.size()));
  for (const auto& g : img.globals) {
    syms.str(g.name);
    syms.u64(g.addr);
    syms.u64(g.size);
  }
  w.section("SYMS", syms);

  ByteWriter data;
  data.u64(img.data_base);
  data.u64(img.data.size());
  data.raw(img.data);
  w.section("DATA", data);

  ByteWriter code;
  code.u32(static_cast<std::uint32_t>(img.code.size()));
  for (const auto& mi : img.code) put_instr(code, mi);
  w.section("CODE", code);

  ByteWriter calls;
  calls.u32(static_cast<std::uint32_t>(img.callsites.size()));
  for (const auto& c : img.callsites) {
    calls.i32(c.id);
    calls.str(c.function);
    calls.u64(c.call_addr);
    calls.u64(c.return_addr);
  }
  w.section("CALL", calls);

  if (img.has_stackmaps) {
    ByteWriter sm;
    sm.u32(static_cast<std::uint32_t>(img.stackmaps.size()));
    for (const auto& rec : img.stackmaps) {
      sm.i32(rec.callsite);
      sm.u64(rec.address);
      sm.str(rec.function);
      sm.u32(static_cast<std::uint32_t>(rec.values.size()));
      for (const auto& [name, loc] : rec.values) {
        sm.str(name);
        put_location(sm, loc);
      }
    }
    w.section("STKM", sm);
  }
  return w.take();
}

MachineImage deserialize_image(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto magic = r.raw(sizeof kMagic);
  if (!std::equal(magic.begin(), magic.end(), reinterpret_cast<const std::uint8_t*>(kMagic)))
    throw FormatError("not an image container");
  if (auto v = r.u32(); v != kImageVersion) throw FormatError("unsupported image version " + std::to_string(v));
  MachineImage img;
  auto t = r.u8();
  if (t > 1) throw FormatError("bad target");
  img.target = static_cast<Target>(t);
  img.has_stackmaps = r.u8() & 1;
  img.program_hash = r.u64();
  img.entry = r.u64();
  auto nsec = r.u32();
  bool seen_code = false;
  for (std::uint32_t s = 0; s < nsec; ++s) {
    auto tag = r.tag();
    auto len = r.u64();
    ByteReader body(r.raw(len));
    if (tag == "SYMS") {
      auto nf = body.u32();
      for (std::uint32_t i = 0; i < nf; ++i) {
        FunctionSymbol f;
        f.name = body.str();
        f.addr = body.u64();
        f.size = body.u64();
        f.frame_size = body.i64();
        img.functions.push_back(f);
      }
      auto ng = body.u32();
      for (std::uint32_t i = 0; i < ng; ++i) {
        GlobalSymbol g;
        g.name = body.str();
        g.addr = body.u64();
        g.size = body.u64();
        img.globals.push_back(g);
      }
    } else if (tag == "DATA") {
      img.data_base = body.u64();
      auto n = body.u64();
      auto d = body.raw(n);
      img.data.assign(d.begin(), d.end());
    } else if (tag == "CODE") {
      seen_code = true;
      auto n = body.u32();
      for (std::uint32_t i = 0; i < n; ++i) img.code.push_back(get_instr(body));
    } else if (tag == "CALL") {
      auto n = body.u32();
      for (std::uint32_t i = 0; i < n; ++i) {
        CallsiteEntry c;
        c.id = body.i32();
        c.function = body.str();
        c.call_addr = body.u64();
        c.return_addr = body.u64();
        img.callsites.push_back(c);
      }
    } else if (tag == "STKM") {
      auto n = body.u32();
      for (std::uint32_t i = 0; i < n; ++i) {
        stackmap::StackMapRecord rec;
        rec.callsite = body.i32();
        rec.address = body.u64();
        rec.function = body.str();
        auto nv = body.u32();
        for (std::uint32_t k = 0; k < nv; ++k) {
          auto name = body.str();
          rec.values.emplace_back(std::move(name), get_location(body));
        }
        img.stackmaps.push_back(std::move(rec));
      }
    } else {
      continue;  // unknown sections are skipped
    }
    if (!body.done()) throw FormatError("trailing bytes in section " + tag);
  }
  if (!r.done()) throw FormatError("trailing bytes after sections");
  if (!seen_code) throw FormatError("image has no code section");
  if (img.has_stackmaps && img.stackmaps.empty() && !img.callsites.empty())
    throw FormatError("stackmap flag set without a stackmap section");
  img.index();
  return img;
}

MachineImage strip_stackmaps(MachineImage img) {
  img.has_stackmaps = false;
  img.stackmaps.clear();
  return img;
}

std::string disassemble(const MachineImage& img) {
  std::ostringstream os;
  char buf[64];
  os << "; target " << target_name(img.target) << ", entry ";
  std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(img.entry));
  os << buf << ", program hash ";
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(img.program_hash));
  os << buf << "\n";
  for (const auto& g : img.globals) {
    std::snprintf(buf, sizeof buf, "%8llx", static_cast<unsigned long long>(g.addr));
    os << "; global " << buf << ' ' << g.name << " (" << g.size << " bytes)\n";
  }
  const FunctionSymbol* cur = nullptr;
  for (const auto& mi : img.code) {
    const FunctionSymbol* f = img.function_at(mi.addr);
    if (f != cur && f) {
      std::snprintf(buf, sizeof buf, "%llx", static_cast<unsigned long long>(f->addr));
      os << "\n" << buf << " <" << f->name << ">:  ; frame " << f->frame_size << " bytes\n";
      cur = f;
    }
    std::snprintf(buf, sizeof buf, "  %8llx  %2u  ", static_cast<unsigned long long>(mi.addr), mi.size);
    os << buf << mir::render(mi, img.target) << '\n';
  }
  if (!img.callsites.empty()) os << "\n; callsites\n";
  for (const auto& c : img.callsites) {
    std::snprintf(buf, sizeof buf, "  %4d  call %8llx  return %8llx  ", c.id,
                  static_cast<unsigned long long>(c.call_addr), static_cast<unsigned long long>(c.return_addr));
    os << buf << c.function << '\n';
  }
  if (img.has_stackmaps) {
    os << "\n; stackmaps\n";
    for (const auto& rec : img.stackmaps) {
      os << "  callsite " << rec.callsite << " in " << rec.function << ':';
      for (const auto& [name, loc] : rec.values) os << " " << name << '=' << stackmap::to_string(loc);
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace unistack
