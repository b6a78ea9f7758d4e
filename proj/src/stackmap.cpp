#include "unistack/stackmap.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

namespace unistack::stackmap {

std::vector<std::vector<std::string>> live_across_calls(const ir::Program& p, const ir::Function& f) {
  const std::size_t nb = f.blocks.size();
  std::vector<std::set<std::string>> live_in(nb), live_out(nb);
  std::vector<std::vector<int>> succ(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    if (f.blocks[b].instrs.empty()) continue;
    for (const auto& l : f.blocks[b].instrs.back().targets) succ[b].push_back(f.block_index(l));
  }
  auto step_back = [](std::set<std::string>& live, const ir::Instr& in) {
    if (!in.result.empty()) live.erase(in.result);
    for (const auto& a : in.args)
      if (a.is_value()) live.insert(a.name);
  };
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t b = nb; b-- > 0;) {
      std::set<std::string> out;
      for (int s : succ[b])
        if (s >= 0) out.insert(live_in[s].begin(), live_in[s].end());
      std::set<std::string> in = out;
      for (auto it = f.blocks[b].instrs.rbegin(); it != f.blocks[b].instrs.rend(); ++it) step_back(in, *it);
      if (out != live_out[b] || in != live_in[b]) {
        live_out[b] = std::move(out);
        live_in[b] = std::move(in);
        changed = true;
      }
    }
  }
  std::map<std::string, std::size_t> rank;
  for (const auto& [name, t] : ir::value_types(p, f)) rank.emplace(name, rank.size());
  std::vector<std::vector<std::string>> out;
  for (std::size_t b = 0; b < nb; ++b) {
    std::set<std::string> live = live_out[b];
    std::vector<std::vector<std::string>> calls;
    const auto& instrs = f.blocks[b].instrs;
    for (auto it = instrs.rbegin(); it != instrs.rend(); ++it) {
      if (it->op == ir::Opcode::Call) {
        std::vector<std::string> vs;
        for (const auto& v : live)
          if (v != it->result) vs.push_back(v);
        std::sort(vs.begin(), vs.end(), [&](const std::string& a, const std::string& c) { return rank[a] < rank[c]; });
        calls.push_back(std::move(vs));
      }
      step_back(live, *it);
    }
    out.insert(out.end(), calls.rbegin(), calls.rend());
  }
  return out;
}

std::vector<StackMapRecord> emit_stackmaps(const ir::Program& p, const ir::Function& f,
                                           const mir::MachineFunction& mf, const MachineImage& img) {
  auto live = live_across_calls(p, f);
  if (live.size() != mf.callsites.size()) throw StackMapError("callsite count mismatch in " + f.name);
  std::vector<StackMapRecord> out;
  for (std::size_t k = 0; k < mf.callsites.size(); ++k) {
    StackMapRecord rec;
    rec.callsite = mf.callsites[k];
    rec.function = f.name;
    const CallsiteEntry* ce = img.callsite(rec.callsite);
    if (!ce) throw StackMapError("callsite " + std::to_string(rec.callsite) + " missing from image");
    rec.address = ce->return_addr;
    for (std::size_t l = 0; l < f.locals.size(); ++l)
      rec.values.emplace_back(f.locals[l].name, ValueLocation::slot(mf.frame.locals.at(l)));
    for (const auto& v : live[k]) {
      const mir::ValueBinding* b = mf.binding(v);
      if (!b) throw StackMapError("unresolved location for %" + v);
      ValueLocation loc;
      using K = mir::ValueBinding::Kind;
      switch (b->kind) {
        case K::RematConst: loc = ValueLocation::constant(static_cast<std::uint64_t>(b->constant)); break;
        case K::ZeroReg: loc = ValueLocation::constant(0); break;
        case K::RematAddr:
        case K::Folded: loc = ValueLocation::recomputed(); break;
        case K::Vreg: {
          const auto& vl = mf.vreg_loc.at(b->vreg);
          if (vl.kind == mir::VregLocation::Kind::Register)
            loc = ValueLocation::reg(vl.role);
          else if (vl.kind == mir::VregLocation::Kind::Spill)
            loc = ValueLocation::slot(mf.frame.spills.at(vl.slot));
          else
            throw StackMapError("unresolved location for %" + v);
          break;
        }
        case K::None: throw StackMapError("live value %" + v + " has no representation");
      }
      rec.values.emplace_back("%" + v, loc);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

void attach_stackmaps(MachineImage& img, const ir::Program& p, const std::vector<mir::MachineFunction>& fs) {
  img.stackmaps.clear();
  for (std::size_t i = 0; i < fs.size(); ++i) {
    auto recs = emit_stackmaps(p, p.functions.at(i), fs[i], img);
    img.stackmaps.insert(img.stackmaps.end(), recs.begin(), recs.end());
  }
  img.has_stackmaps = true;
}

namespace {

std::string hex(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

VerificationReport verify_layout(const std::vector<StackMapRecord>& a, const std::vector<StackMapRecord>& b) {
  VerificationReport r;
  std::map<int, const StackMapRecord*> ma, mb;
  for (const auto& x : a) ma[x.callsite] = &x;
  for (const auto& x : b) mb[x.callsite] = &x;
  std::set<int> ids;
  for (auto& [id, _] : ma) ids.insert(id);
  for (auto& [id, _] : mb) ids.insert(id);
  for (int id : ids) {
    auto ia = ma.find(id), ib = mb.find(id);
    if (ia == ma.end() || ib == mb.end()) {
      r.divergences.push_back({id, "<callsite>", ia == ma.end() ? "missing" : "present",
                               ib == mb.end() ? "missing" : "present"});
      continue;
    }
    const StackMapRecord& ra = *ia->second;
    const StackMapRecord& rb = *ib->second;
    if (ra.address != rb.address) r.divergences.push_back({id, "<address>", hex(ra.address), hex(rb.address)});
    std::size_t n = std::max(ra.values.size(), rb.values.size());
    for (std::size_t k = 0; k < n; ++k) {
      const auto* va = k < ra.values.size() ? &ra.values[k] : nullptr;
      const auto* vb = k < rb.values.size() ? &rb.values[k] : nullptr;
      if (!va || !vb || va->first != vb->first) {
        r.divergences.push_back({id, va ? va->first : vb->first, va ? va->first + "=" + to_string(va->second) : "absent",
                                 vb ? vb->first + "=" + to_string(vb->second) : "absent"});
        continue;
      }
      if (!(va->second == vb->second))
        r.divergences.push_back({id, va->first, to_string(va->second), to_string(vb->second)});
    }
  }
  r.equivalent = r.divergences.empty();
  return r;
}

std::string VerificationReport::to_text() const {
  std::ostringstream os;
  os << "status: " << (equivalent ? "equivalent" : "divergent") << "\n";
  os << "divergences: " << divergences.size() << "\n";
  for (const auto& d : divergences)
    os << "callsite " << d.callsite << " value " << d.value << " a=" << d.a << " b=" << d.b << "\n";
  return os.str();
}

}  // namespace unistack::stackmap
