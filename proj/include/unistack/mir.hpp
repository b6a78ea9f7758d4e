// Machine-level representation shared by both dialects.
//
// One opcode set covers both targets; a handful of opcodes are
// dialect-specific (Push/Pop exist only on X64, LR/ZERO only on A64). The
// dialects differ in byte sizes, textual mnemonics, and call/return
// mechanics, which is exactly the surface the layout rules have to unify.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unistack/abi.hpp"
#include "unistack/ir.hpp"

namespace unistack::mir {

struct Reg {
  enum class Kind : std::uint8_t { None, Virt, Phys };
  Kind kind = Kind::None;
  std::uint32_t id = 0;

  static constexpr Reg none() { return {}; }
  static constexpr Reg virt(std::uint32_t n) { return {Kind::Virt, n}; }
  static constexpr Reg phys(abi::Role r) { return {Kind::Phys, static_cast<std::uint32_t>(r)}; }

  constexpr bool valid() const { return kind != Kind::None; }
  constexpr bool is_virt() const { return kind == Kind::Virt; }
  constexpr bool is_phys() const { return kind == Kind::Phys; }
  constexpr abi::Role role() const { return static_cast<abi::Role>(id); }
  bool operator==(const Reg&) const = default;
};

enum class Op : std::uint8_t {
  Label,  // block marker, no encoding
  Nop,
  JmpPad,  // jump-over-padding: skips the NOPs in front of a call
  Mov,
  MovImm,  // dst = imm (the first 16-bit chunk, already shifted into place)
  MovK,    // dst[shift +: 16] = imm, other bits kept
  Add,
  Sub,
  Mul,
  AddImm,
  SubImm,
  MulImm,
  Load,
  Store,
  FLoad,
  FStore,
  FAdd,
  FMul,
  FMov,
  LocalAddr,   // dst = FP + imm
  GlobalAddr,  // dst = &sym
  Cmp,
  CmpImm,
  BCond,
  Jmp,
  Call,
  Ret,
  Emit,
  EmitF,
  Push,  // X64 only
  Pop,   // X64 only
};

enum class SlotKind : std::uint8_t { None, Local, Spill, Incoming };

/// Memory operand: [base + index*scale + disp]. Frame references carry a
/// slot until the frame layout resolves them to FP-relative displacements.
struct Mem {
  Reg base;
  Reg index;
  std::uint8_t scale = 0;
  std::int64_t disp = 0;
  SlotKind slot = SlotKind::None;
  std::uint32_t slot_index = 0;
  bool operator==(const Mem&) const = default;
};

struct MachineInstr {
  Op op = Op::Nop;
  Reg dst;
  Reg src1;
  Reg src2;
  std::int64_t imm = 0;
  std::uint8_t shift = 0;
  Mem mem;
  ir::CmpPred cond = ir::CmpPred::Eq;
  int label = -1;  // Label: block id; Jmp/BCond: target block id
  std::string sym;
  int callsite = -1;
  bool remat = false;        // recomputed at its use instead of kept live
  bool call_seq = false;     // part of an argument/result hand-off sequence
  bool loop_header = false;  // Label only
  std::uint8_t prefix = 0;   // X64 redundant prefix bytes on a call
  std::uint32_t size = 0;    // assigned by the layout size model
  std::uint64_t addr = 0;    // assigned at link
  std::uint64_t target = 0;  // resolved branch/call/global address

  bool operator==(const MachineInstr&) const = default;
};

/// Byte offsets are relative to the frame base, i.e. the address of the
/// return-address slot; everything else lives below it.
struct FrameLayout {
  std::int64_t return_slot = 0;
  std::int64_t fp_slot = -8;
  std::vector<std::pair<abi::Role, std::int64_t>> callee_saved;
  std::int64_t emergency_slot = 0;
  std::vector<std::int64_t> locals;
  std::vector<std::int64_t> spills;
  std::int64_t outgoing_size = 0;
  std::int64_t size = 0;  // bytes from SP up to the top of the return slot

  /// Displacement from FP for a frame-base-relative offset (FP points at
  /// the saved-FP slot).
  static constexpr std::int64_t fp_disp(std::int64_t offset) { return offset + 8; }
  bool operator==(const FrameLayout&) const = default;
};

/// How an IR value is realized in a machine function.
struct ValueBinding {
  enum class Kind : std::uint8_t {
    Vreg,        // lives in a virtual register
    RematConst,  // recomputed or folded at each use
    RematAddr,   // address recomputed at each use
    Folded,      // absorbed into an addressing mode
    ZeroReg,     // read from the hardware zero register
    None,        // no value (dead call result etc.)
  };
  std::string name;
  Kind kind = Kind::None;
  std::uint32_t vreg = 0;
  std::int64_t constant = 0;
};

/// Final home of a virtual register after allocation.
struct VregLocation {
  enum class Kind : std::uint8_t { Unassigned, Register, Spill };
  Kind kind = Kind::Unassigned;
  abi::Role role = abi::Role::TMP0;
  std::uint32_t slot = 0;
  bool operator==(const VregLocation&) const = default;
};

struct CodegenStats {
  int remat_uses = 0;
  int pinned_constants = 0;
  int zero_materializations = 0;
  int two_address_rewrites = 0;
  int three_address_escapes = 0;
  int scaled_index_patterns = 0;
  int imm_materializations = 0;
  int spills = 0;

  CodegenStats& operator+=(const CodegenStats& o);
};

struct MachineFunction {
  std::string name;
  Target target = Target::X64;
  std::vector<MachineInstr> code;
  FrameLayout frame;
  std::vector<int> callsites;  // ids in program order
  std::vector<abi::RegClass> vreg_class;
  std::vector<VregLocation> vreg_loc;
  std::vector<ValueBinding> values;
  std::vector<abi::Role> used_callee_saved;
  std::vector<std::uint32_t> local_sizes;  // declaration order
  bool allocated = false;
  CodegenStats stats;

  std::uint32_t new_vreg(abi::RegClass cls);
  const ValueBinding* binding(std::string_view value) const;
  bool operator==(const MachineFunction& o) const {
    return name == o.name && target == o.target && code == o.code && frame == o.frame &&
           callsites == o.callsites && vreg_loc == o.vreg_loc;
  }
};

/// Registers read by `mi`, in operand order (virtual and physical).
std::vector<Reg> uses(const MachineInstr& mi);
/// Registers written by `mi`.
std::vector<Reg> defs(const MachineInstr& mi);

bool is_branch(Op op);
bool is_arith_with_imm(Op op);

std::string format_reg(Reg r, Target t);
/// One instruction in the target dialect's assembly syntax.
std::string render(const MachineInstr& mi, Target t);
/// Listing of a function: one instruction per line with function-relative
/// offsets (or absolute addresses once linked).
std::string print_function(const MachineFunction& mf, bool absolute = false);

}  // namespace unistack::mir
