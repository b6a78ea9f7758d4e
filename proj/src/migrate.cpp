#include "unistack/migrate.hpp"

#include <charconv>
#include <filesystem>
#include <sstream>

#include "unistack/bytes.hpp"

namespace unistack::migrate {

using abi::Role;

namespace {

constexpr char kMagic[8] = {'U', 'S', 'T', 'K', 'C', 'K', 'P', 'T'};

std::uint64_t stack_low() { return kStackBase - kStackSize; }

}  // namespace

Checkpoint checkpoint(const emu::MachineState& s) {
  if (!s.image) throw MigrateError("state has no image");
  const mir::MachineInstr* mi = s.current();
  if (s.halted() || !mi || mi->op != mir::Op::Call) throw MigrateError("not at a callsite");
  const CallsiteEntry* cs = s.image->callsite(mi->callsite);
  if (!cs || cs->call_addr != s.pc) throw MigrateError("not at a callsite: call is missing from the callsite table");

  Checkpoint cp;
  cp.source = s.target;
  cp.program_hash = s.image->program_hash;
  cp.pc = cs->return_addr;
  cp.callsite = cs->id;
  cp.calls = s.calls;
  for (std::size_t i = 0; i < abi::kRoleCount; ++i) {
    Role r = abi::role_at(i);
    if (r == Role::ZERO || !abi::exists_on(r, s.target)) continue;
    cp.regs[r] = s.reg(r);
  }
  cp.sp = s.reg(Role::SP);
  if (cp.sp < stack_low() || cp.sp > kStackBase) throw MigrateError("stack pointer outside the stack region");
  std::uint64_t low = kStackBase - s.stack.size();
  if (cp.sp >= low) {
    cp.stack.assign(s.stack.begin() + static_cast<std::ptrdiff_t>(cp.sp - low), s.stack.end());
  } else {
    cp.stack.assign(low - cp.sp, 0);
    cp.stack.insert(cp.stack.end(), s.stack.begin(), s.stack.end());
  }
  cp.data_base = s.data_base;
  cp.globals = s.data;
  cp.output = s.output;
  return cp;
}

Checkpoint rewrite_checkpoint(const Checkpoint& cp, Target to) {
  if (cp.source == to) throw MigrateError("checkpoint is already for " + std::string(target_name(to)));
  Checkpoint out = cp;
  out.source = to;
  out.regs.clear();
  for (const auto& [r, v] : cp.regs) {
    if (abi::exists_on(r, to)) {
      out.regs[r] = v;
    } else if (r != Role::LR) {
      throw MigrateError("unmappable live register " + std::string(abi::physical_name(r, cp.source)));
    }
  }
  if (to == Target::A64) {
    // The prologue stacked the return address just above the saved FP.
    auto fp = cp.regs.at(Role::FP);
    std::uint64_t slot = fp + 8;
    if (slot < cp.sp || slot + 8 > kStackBase) throw MigrateError("return-address slot outside the captured stack");
    std::uint64_t off = slot - cp.sp, v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(cp.stack[off + i]) << (8 * i);
    out.regs[Role::LR] = v;
  }
  return out;
}

emu::MachineState restore(std::shared_ptr<const MachineImage> img, const Checkpoint& cp) {
  if (!img) throw MigrateError("no image");
  if (img->program_hash != cp.program_hash) throw MigrateError("image/checkpoint mismatch: program hash differs");
  if (img->target != cp.source)
    throw MigrateError("image/checkpoint mismatch: checkpoint is for " + std::string(target_name(cp.source)));
  const CallsiteEntry* cs = img->callsite_returning_to(cp.pc);
  if (!cs || cs->id != cp.callsite) throw MigrateError("image/checkpoint mismatch: no call returns to the saved pc");
  if (cp.globals.size() != img->data.size() || cp.data_base != img->data_base)
    throw MigrateError("image/checkpoint mismatch: globals size differs");
  if (cp.sp + cp.stack.size() != kStackBase) throw MigrateError("malformed checkpoint: stack does not end at the base");

  emu::MachineState s = emu::load_image(img);
  s.regs.fill(0);
  for (const auto& [r, v] : cp.regs) {
    if (!abi::exists_on(r, img->target)) throw MigrateError("register not present on target");
    s.set_reg(r, v);
  }
  s.set_reg(Role::SP, cp.sp);
  s.stack = cp.stack;
  s.data = cp.globals;
  s.output = cp.output;
  s.pc = cs->call_addr;
  s.calls = cp.calls;
  return s;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& cp) {
  ByteWriter w;
  w.raw(std::span(reinterpret_cast<const std::uint8_t*>(kMagic), sizeof kMagic));
  w.u32(kCheckpointVersion);
  w.u32(4);

  ByteWriter meta;
  meta.u8(static_cast<std::uint8_t>(cp.source));
  meta.u64(cp.program_hash);
  meta.u64(cp.pc);
  meta.i32(cp.callsite);
  meta.u64(cp.calls);
  meta.u64(cp.output.size());
  for (auto v : cp.output) meta.u64(v);
  w.section("META", meta);

  ByteWriter regs;
  regs.u32(static_cast<std::uint32_t>(cp.regs.size()));
  for (const auto& [r, v] : cp.regs) {
    regs.str(abi::role_id(r));
    regs.u64(v);
  }
  w.section("REGS", regs);

  ByteWriter stack;
  stack.u64(cp.sp);
  stack.u64(cp.stack.size());
  stack.raw(cp.stack);
  w.section("STAK", stack);

  ByteWriter globals;
  globals.u64(cp.data_base);
  globals.u64(cp.globals.size());
  globals.raw(cp.globals);
  w.section("GLOB", globals);
  return w.take();
}

Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto magic = r.raw(sizeof kMagic);
  if (!std::equal(magic.begin(), magic.end(), reinterpret_cast<const std::uint8_t*>(kMagic)))
    throw FormatError("not a checkpoint container");
  if (auto v = r.u32(); v != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(v));
  Checkpoint cp;
  auto nsec = r.u32();
  bool meta = false, regs = false, stack = false, globals = false;
  for (std::uint32_t k = 0; k < nsec; ++k) {
    auto tag = r.tag();
    auto len = r.u64();
    if (len > r.remaining()) throw FormatError("truncated container");
    ByteReader s(r.raw(static_cast<std::size_t>(len)));
    if (tag == "META") {
      auto t = s.u8();
      if (t > 1) throw FormatError("bad target");
      cp.source = static_cast<Target>(t);
      cp.program_hash = s.u64();
      cp.pc = s.u64();
      cp.callsite = s.i32();
      cp.calls = s.u64();
      auto n = s.u64();
      if (n > s.remaining() / 8) throw FormatError("truncated container");
      cp.output.resize(n);
      for (auto& v : cp.output) v = s.u64();
      meta = true;
    } else if (tag == "REGS") {
      auto n = s.u32();
      for (std::uint32_t i = 0; i < n; ++i) {
        auto id = s.str();
        auto role = abi::parse_role_id(id);
        if (!role) throw FormatError("unknown register role '" + id + "'");
        cp.regs[*role] = s.u64();
      }
      regs = true;
    } else if (tag == "STAK") {
      cp.sp = s.u64();
      auto n = s.u64();
      auto b = s.raw(static_cast<std::size_t>(n));
      cp.stack.assign(b.begin(), b.end());
      stack = true;
    } else if (tag == "GLOB") {
      cp.data_base = s.u64();
      auto n = s.u64();
      auto b = s.raw(static_cast<std::size_t>(n));
      cp.globals.assign(b.begin(), b.end());
      globals = true;
    }
    if (!s.done() && (tag == "META" || tag == "REGS" || tag == "STAK" || tag == "GLOB"))
      throw FormatError("trailing bytes in section " + tag);
  }
  if (!meta || !regs || !stack || !globals) throw FormatError("checkpoint is missing a section");
  if (!r.done()) throw FormatError("trailing bytes after checkpoint");
  return cp;
}

MigrationSchedule parse_schedule(std::string_view text) {
  MigrationSchedule out;
  auto bad = [&](std::string_view item, const std::string& why) {
    return MigrateError("bad schedule entry '" + std::string(item) + "': " + why);
  };
  std::size_t pos = 0;
  while (pos <= text.size() && !text.empty()) {
    auto end = text.find(',', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view item = text.substr(pos, end - pos);
    pos = end + 1;
    if (item.substr(0, 3) != "cs@") throw bad(item, "expected cs@<k>:<from>><to>");
    auto colon = item.find(':');
    auto arrow = item.find('>');
    if (colon == std::string_view::npos || arrow == std::string_view::npos || arrow < colon)
      throw bad(item, "expected cs@<k>:<from>><to>");
    MigrationPoint pt;
    auto num = item.substr(3, colon - 3);
    auto [p, ec] = std::from_chars(num.data(), num.data() + num.size(), pt.occurrence);
    if (ec != std::errc() || p != num.data() + num.size() || pt.occurrence == 0)
      throw bad(item, "occurrence must be a positive integer");
    auto from = parse_target(item.substr(colon + 1, arrow - colon - 1));
    auto to = parse_target(item.substr(arrow + 1));
    if (!from || !to) throw bad(item, "unknown target");
    if (*from == *to) throw bad(item, "source and destination are the same");
    pt.from = *from;
    pt.to = *to;
    if (!out.empty() && pt.occurrence <= out.back().occurrence) throw bad(item, "occurrences must strictly increase");
    out.push_back(pt);
    if (end == text.size()) break;
  }
  return out;
}

std::string format_schedule(const MigrationSchedule& s) {
  std::ostringstream os;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << "cs@" << s[i].occurrence << ':' << target_name(s[i].from) << '>' << target_name(s[i].to);
  }
  return os.str();
}

MigrationSchedule every_call(std::uint64_t n, Target start) {
  MigrationSchedule s;
  Target cur = start;
  for (std::uint64_t k = 1; k <= n; ++k) {
    s.push_back({k, cur, other(cur)});
    cur = other(cur);
  }
  return s;
}

MigrationSchedule ping_pong(std::uint64_t n, int trips, Target start) {
  MigrationSchedule s;
  std::uint64_t legs = 2 * static_cast<std::uint64_t>(trips);
  Target cur = start;
  for (std::uint64_t i = 0; i < legs; ++i) {
    std::uint64_t k = 1 + i * n / legs;
    if (!s.empty() && k <= s.back().occurrence) k = s.back().occurrence + 1;
    if (k > n) break;
    s.push_back({k, cur, other(cur)});
    cur = other(cur);
  }
  return s;
}

MigrationResult migrate_run(std::shared_ptr<const MachineImage> x64, std::shared_ptr<const MachineImage> a64,
                            Target start, const MigrationSchedule& sched, const MigrationOptions& opts) {
  if (!x64 || !a64) throw MigrateError("missing image");
  if (x64->target != Target::X64 || a64->target != Target::A64) throw MigrateError("images have the wrong targets");
  if (x64->program_hash != a64->program_hash) throw MigrateError("images come from different links");
  auto image_for = [&](Target t) { return t == Target::X64 ? x64 : a64; };

  MigrationResult res;
  Target cur = start;
  emu::MachineState s = emu::load_image(image_for(cur));
  std::size_t next = 0;
  std::uint64_t fuel = opts.fuel;
  if (opts.checkpoint_dir) std::filesystem::create_directories(*opts.checkpoint_dir);

  for (;;) {
    emu::RunOptions ro;
    ro.fuel = fuel;
    ro.pause_before_call = [&](const emu::MachineState& st) {
      return next < sched.size() && st.calls + 1 == sched[next].occurrence;
    };
    auto rr = emu::run(s, ro);
    res.steps += rr.steps;
    fuel -= rr.steps;
    if (!rr.paused) break;

    const MigrationPoint& pt = sched[next];
    if (pt.from != cur)
      throw MigrateError("schedule entry cs@" + std::to_string(pt.occurrence) + " migrates from " +
                         std::string(target_name(pt.from)) + " but execution is on " + std::string(target_name(cur)));
    Checkpoint cp = checkpoint(s);
    Checkpoint rw = rewrite_checkpoint(cp, pt.to);

    MigrationRecord rec;
    rec.point = pt;
    rec.callsite = cp.callsite;
    rec.pc = cp.pc;
    rec.memory_unchanged = cp.stack == rw.stack && cp.globals == rw.globals && cp.sp == rw.sp;
    rec.involution = rewrite_checkpoint(rw, pt.from).regs == cp.regs;
    rec.register_bytes = rw.regs.size() * 8;

    auto bytes = serialize_checkpoint(rw);
    if (opts.checkpoint_dir) {
      auto path = (std::filesystem::path(*opts.checkpoint_dir) / ("ckpt-" + std::to_string(pt.occurrence) + ".bin"));
      write_file(path.string(), bytes);
      bytes = read_file(path.string());
    }
    Checkpoint moved = deserialize_checkpoint(bytes);
    if (serialize_checkpoint(moved) != bytes) throw MigrateError("checkpoint container does not round-trip");
    rec.image_bytes = bytes.size();
    res.migrations.push_back(rec);

    s = restore(image_for(pt.to), moved);
    cur = pt.to;
    ++next;
  }
  res.unreached.assign(sched.begin() + static_cast<std::ptrdiff_t>(next), sched.end());
  res.status = s.status;
  res.fault = s.fault;
  res.final_target = cur;
  res.output = s.output;
  return res;
}

}  // namespace unistack::migrate
