// Unified register model shared by both dialects.
//
// Every physical register of either target is addressed through a
// target-neutral RegisterRole; the two per-target name tables realize the
// cross-ISA correspondence. Registers live in the machine layers as roles, so
// a value held in CS0 on X64 (rbx) is held in CS0 on A64 (r19) by
// construction.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "unistack/ir.hpp"

namespace unistack {

enum class Target : std::uint8_t { X64, A64 };

inline constexpr std::array<Target, 2> kTargets{Target::X64, Target::A64};

std::string_view target_name(Target t);
std::optional<Target> parse_target(std::string_view s);
constexpr Target other(Target t) { return t == Target::X64 ? Target::A64 : Target::X64; }

}  // namespace unistack

namespace unistack::abi {

// clang-format off
enum class Role : std::uint8_t {
  SP, FP, LR, CS0, CS1, RET0,
  ARG0, ARG1, ARG2, ARG3, ARG4, ARG5,
  TMP0, TMP1, TMP2, TMP3, TMP4,
  F0, F1, F2, F3, F4, F5, F6, F7, F8, F9, F10, F11, F12, F13, F14, F15,
  ZERO,
};
// clang-format on

inline constexpr std::size_t kRoleCount = static_cast<std::size_t>(Role::ZERO) + 1;

/// RET1 shares ARG2's register (rdx / r2). The role is resolved at the use
/// site; our IR only returns a single value so it is never live.
inline constexpr Role kRet1 = Role::ARG2;

enum class RegClass : std::uint8_t { GPR, FPR };
enum class SavedBy : std::uint8_t { Callee, Caller, None };

struct RoleInfo {
  Role role;
  std::string_view id;  // canonical role id, e.g. "CS0"
  RegClass cls;
  SavedBy saved_by;
  std::string_view x64;  // empty: no counterpart on that target
  std::string_view a64;
};

const RoleInfo& info(Role r);
const std::array<RoleInfo, kRoleCount>& all_roles();

constexpr std::size_t index(Role r) { return static_cast<std::size_t>(r); }
constexpr Role role_at(std::size_t i) { return static_cast<Role>(i); }
constexpr bool is_fpr(Role r) { return r >= Role::F0 && r <= Role::F15; }
constexpr Role fpr(int n) { return static_cast<Role>(static_cast<int>(Role::F0) + n); }
constexpr Role arg_gpr(int n) { return static_cast<Role>(static_cast<int>(Role::ARG0) + n); }

std::string_view role_id(Role r);
std::optional<Role> parse_role_id(std::string_view s);

/// True iff the role has a physical register on `t`.
bool exists_on(Role r, Target t);
std::string_view physical_name(Role r, Target t);
std::optional<Role> role_of(std::string_view physical, Target t);

/// Raised when a register has no Table-1 counterpart on the other target
/// (the A64 link register). Migration handles that case explicitly.
class NoCounterpart : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UnknownRegister : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string map_register(std::string_view physical, Target from, Target to);

/// Argument location. Register arguments name a role; stack arguments give
/// the byte offset above the callee's return-address slot.
struct ArgLocation {
  bool in_register = true;
  Role reg = Role::ARG0;
  std::int64_t stack_offset = 0;
  bool operator==(const ArgLocation&) const = default;
};

inline constexpr int kIntArgRegs = 6;
inline constexpr int kFloatArgRegs = 8;

/// `index` counts arguments of the same register class (integer/ptr or f64).
/// Overflowing arguments are numbered from 1 within their class.
ArgLocation classify_argument(int index, ir::Type type);

/// Locations for a whole signature. Overflow slots are assigned in argument
/// order across both classes, starting 8 bytes above the return address.
std::vector<ArgLocation> assign_arguments(const std::vector<ir::Type>& types);

/// Role holding a return value of the given type.
Role return_register(ir::Type t);

std::vector<Role> callee_saved_order(Target t);

/// Roles the register allocator may hand out, in preference order. The list
/// is the same for both targets.
const std::vector<Role>& allocation_order(RegClass cls);

bool is_arg_or_ret(Role r);

/// Renders the role table: role, x64-name, a64-name, saved-by.
std::string dump_table();

}  // namespace unistack::abi
