// Lowering from IR to machine functions under the unification rules.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "unistack/abi.hpp"
#include "unistack/ir.hpp"
#include "unistack/mir.hpp"

namespace unistack::codegen {

/// Each flag enables one unification rule. Turning a rule off makes the
/// affected target fall back to its native lowering for that category.
struct UnifyOptions {
  bool remat = true;            // recompute local/global addresses at use
  bool callsite_align = true;   // NOP-pad calls to equal return addresses
  bool imm_unify = true;        // one immediate legality predicate for both
  bool addr_restrict = true;    // no scaled-index memory operands
  bool two_addr = true;         // A64 mirrors X64's two-address arithmetic
  bool zero_rule = true;        // zero is a short-lived temp on both targets
  bool block_align = false;     // 16-byte loop headers plus padding fixpoint
  bool jump_over = true;        // jump over long NOP runs

  /// All six unification rules off: each target lowers natively.
  static UnifyOptions native();
  bool operator==(const UnifyOptions&) const = default;
};

class CodegenError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

bool legal_arith_immediate(std::uint64_t v);
/// Number of 16-bit move/insert steps needed to build `v`.
int legal_move_immediate(std::uint64_t v);

/// Lowers `f` with virtual registers. Callsite ids are numbered from
/// `first_callsite` in program order.
mir::MachineFunction select_instructions(const ir::Program& p, const ir::Function& f, Target t,
                                         const UnifyOptions& opts = {}, int first_callsite = 0);

/// Ties the destination of integer arithmetic to its first source.
mir::MachineFunction convert_two_address(mir::MachineFunction mf);

/// Deterministic linear scan over role registers; rewrites spilled vregs
/// and replaces every virtual register with a physical role.
mir::MachineFunction allocate_registers(mir::MachineFunction mf);

/// Computes the frame, resolves frame references, inserts prologue and
/// epilogues. Returns the function with `frame` filled in.
mir::MachineFunction build_frame_layout(mir::MachineFunction mf);

/// All passes for one function.
mir::MachineFunction compile_function(const ir::Program& p, const ir::Function& f, Target t,
                                      const UnifyOptions& opts = {}, int first_callsite = 0);

/// Every function of `p` in declaration order.
std::vector<mir::MachineFunction> compile_program(const ir::Program& p, Target t,
                                                  const UnifyOptions& opts = {});

mir::CodegenStats total_stats(const std::vector<mir::MachineFunction>& fs);

}  // namespace unistack::codegen
