#include "unistack/abi.hpp"

#include <sstream>

namespace unistack {

std::string_view target_name(Target t) { return t == Target::X64 ? "x64" : "a64"; }

std::optional<Target> parse_target(std::string_view s) {
  if (s == "x64") return Target::X64;
  if (s == "a64") return Target::A64;
  return std::nullopt;
}

}  // namespace unistack

namespace unistack::abi {

namespace {

using enum Role;
constexpr auto GPR = RegClass::GPR;
constexpr auto FPR = RegClass::FPR;
constexpr auto Callee = SavedBy::Callee;
constexpr auto Caller = SavedBy::Caller;

// clang-format off
constexpr std::array<RoleInfo, kRoleCount> kRoles{{
  {SP,   "SP",   GPR, Callee, "rsp", "SP"},
  {FP,   "FP",   GPR, Callee, "rbp", "r29"},
  {LR,   "LR",   GPR, Callee, "",    "r30"},
  {CS0,  "CS0",  GPR, Callee, "rbx", "r19"},
  {CS1,  "CS1",  GPR, Callee, "r15", "r20"},
  {RET0, "RET0", GPR, Caller, "rax", "r8"},
  {ARG0, "ARG0", GPR, Caller, "rdi", "r0"},
  {ARG1, "ARG1", GPR, Caller, "rsi", "r1"},
  {ARG2, "ARG2", GPR, Caller, "rdx", "r2"},
  {ARG3, "ARG3", GPR, Caller, "rcx", "r3"},
  {ARG4, "ARG4", GPR, Caller, "r8",  "r4"},
  {ARG5, "ARG5", GPR, Caller, "r9",  "r5"},
  {TMP0, "TMP0", GPR, Caller, "r10", "r6"},
  {TMP1, "TMP1", GPR, Caller, "r11", "r7"},
  {TMP2, "TMP2", GPR, Caller, "r12", "r16"},
  {TMP3, "TMP3", GPR, Caller, "r13", "r17"},
  {TMP4, "TMP4", GPR, Caller, "r14", "r18"},
  {F0,  "F0",  FPR, Caller, "xmm0",  "v0"},
  {F1,  "F1",  FPR, Caller, "xmm1",  "v1"},
  {F2,  "F2",  FPR, Caller, "xmm2",  "v2"},
  {F3,  "F3",  FPR, Caller, "xmm3",  "v3"},
  {F4,  "F4",  FPR, Caller, "xmm4",  "v4"},
  {F5,  "F5",  FPR, Caller, "xmm5",  "v5"},
  {F6,  "F6",  FPR, Caller, "xmm6",  "v6"},
  {F7,  "F7",  FPR, Caller, "xmm7",  "v7"},
  {F8,  "F8",  FPR, Caller, "xmm8",  "v8"},
  {F9,  "F9",  FPR, Caller, "xmm9",  "v9"},
  {F10, "F10", FPR, Caller, "xmm10", "v10"},
  {F11, "F11", FPR, Caller, "xmm11", "v11"},
  {F12, "F12", FPR, Caller, "xmm12", "v12"},
  {F13, "F13", FPR, Caller, "xmm13", "v13"},
  {F14, "F14", FPR, Caller, "xmm14", "v14"},
  {F15, "F15", FPR, Caller, "xmm15", "v15"},
  {ZERO, "ZERO", GPR, SavedBy::None, "", "xzr"},
}};
// clang-format on

}  // namespace

const RoleInfo& info(Role r) { return kRoles[index(r)]; }
const std::array<RoleInfo, kRoleCount>& all_roles() { return kRoles; }

std::string_view role_id(Role r) { return info(r).id; }

std::optional<Role> parse_role_id(std::string_view s) {
  for (const auto& ri : kRoles)
    if (ri.id == s) return ri.role;
  if (s == "RET1") return kRet1;
  return std::nullopt;
}

bool exists_on(Role r, Target t) { return !physical_name(r, t).empty(); }

std::string_view physical_name(Role r, Target t) {
  const auto& ri = info(r);
  return t == Target::X64 ? ri.x64 : ri.a64;
}

std::optional<Role> role_of(std::string_view physical, Target t) {
  for (const auto& ri : kRoles)
    if ((t == Target::X64 ? ri.x64 : ri.a64) == physical && !physical.empty()) return ri.role;
  return std::nullopt;
}

std::string map_register(std::string_view physical, Target from, Target to) {
  auto r = role_of(physical, from);
  if (!r) throw UnknownRegister("unknown " + std::string(target_name(from)) + " register '" + std::string(physical) + "'");
  auto name = physical_name(*r, to);
  if (name.empty())
    throw NoCounterpart(std::string(physical) + " has no " + std::string(target_name(to)) + " counterpart");
  return std::string(name);
}

ArgLocation classify_argument(int index, ir::Type type) {
  const bool integer = ir::is_integer(type);
  const int regs = integer ? kIntArgRegs : kFloatArgRegs;
  if (index < regs) return {true, integer ? arg_gpr(index) : fpr(index), 0};
  return {false, Role::SP, 8 * static_cast<std::int64_t>(index - regs + 1)};
}

std::vector<ArgLocation> assign_arguments(const std::vector<ir::Type>& types) {
  std::vector<ArgLocation> out;
  int ints = 0, floats = 0;
  std::int64_t overflow = 0;
  for (ir::Type t : types) {
    int& counter = ir::is_integer(t) ? ints : floats;
    ArgLocation loc = classify_argument(counter++, t);
    if (!loc.in_register) loc.stack_offset = 8 * ++overflow;
    out.push_back(loc);
  }
  return out;
}

Role return_register(ir::Type t) { return ir::is_integer(t) ? Role::RET0 : Role::F0; }

std::vector<Role> callee_saved_order(Target) { return {Role::FP, Role::CS0, Role::CS1}; }

const std::vector<Role>& allocation_order(RegClass cls) {
  static const std::vector<Role> gpr{TMP0, TMP1, TMP2, TMP3, TMP4, ARG0, ARG1, ARG2,
                                     ARG3, ARG4, ARG5, RET0, CS0,  CS1};
  static const std::vector<Role> fprs{F8, F9, F10, F11, F12, F13, F14, F15,
                                      F0, F1, F2,  F3,  F4,  F5,  F6,  F7};
  return cls == RegClass::GPR ? gpr : fprs;
}

bool is_arg_or_ret(Role r) { return (r >= ARG0 && r <= ARG5) || r == RET0 || (r >= F0 && r <= F7); }

std::string dump_table() {
  std::ostringstream os;
  os << "role\tx64\ta64\tsaved-by\n";
  auto saved = [](SavedBy s) {
    switch (s) {
      case SavedBy::Callee: return "callee";
      case SavedBy::Caller: return "caller";
      case SavedBy::None: return "none";
    }
    return "?";
  };
  auto name = [](std::string_view n) { return n.empty() ? std::string_view("-") : n; };
  for (const auto& ri : kRoles) {
    os << ri.id << '\t' << name(ri.x64) << '\t' << name(ri.a64) << '\t' << saved(ri.saved_by) << '\n';
    if (ri.role == RET0) os << "RET1\trdx\tr2\tcaller\n";
  }
  return os.str();
}

}  // namespace unistack::abi
