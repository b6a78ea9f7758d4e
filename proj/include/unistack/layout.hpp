// Sizes, addresses, callsite alignment and linking.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "unistack/codegen.hpp"
#include "unistack/image.hpp"
#include "unistack/ir.hpp"
#include "unistack/mir.hpp"

namespace unistack::layout {

class LayoutError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Byte size of one instruction. A64 is fixed at 4; X64 follows the table
/// documented in docs/format.md.
std::uint32_t instr_size(const mir::MachineInstr& mi, Target t);
constexpr std::uint32_t jump_size(Target t) { return t == Target::X64 ? 5 : 4; }
constexpr std::uint32_t nop_size(Target t) { return t == Target::X64 ? 1 : 4; }

void assign_sizes(mir::MachineFunction& mf);

struct CallsitePad {
  int callsite = -1;
  std::optional<Target> target;  // side receiving NOP bytes
  std::uint32_t pad = 0;
  bool uses_jump = false;
  std::uint32_t x64_prefix = 0;  // prefix bytes on the X64 call when A64 rounds up
  bool operator==(const CallsitePad&) const = default;
};
using PaddingPlan = std::vector<CallsitePad>;

/// NOP bytes inserted in front of a block label.
using BlockPads = std::map<int, std::uint32_t>;

using SymbolTable = std::vector<std::pair<std::string, std::uint64_t>>;

/// Places each symbol at the next granule boundary past the larger of the
/// two bodies. Inputs are (name, byte size) in the same order for both.
SymbolTable assign_symbol_addresses(const std::vector<std::pair<std::string, std::uint64_t>>& x64,
                                    const std::vector<std::pair<std::string, std::uint64_t>>& a64);

/// Function-relative next-instruction offset of every call, in order.
std::vector<std::uint64_t> return_offsets(const mir::MachineFunction& mf, const PaddingPlan& plan = {},
                                          const BlockPads& blocks = {});

/// One forward pass equalizing every return offset of a function pair.
PaddingPlan align_callsites(const mir::MachineFunction& x64, const mir::MachineFunction& a64,
                            const BlockPads& x64_blocks = {}, const BlockPads& a64_blocks = {});

PaddingPlan apply_jump_over(PaddingPlan plan);

/// Labels that are targets of a backward branch.
std::vector<int> loop_headers(const mir::MachineFunction& mf);

/// NOPs aligning every loop header to 16 bytes, given the callsite plan.
BlockPads align_blocks(const mir::MachineFunction& mf, const PaddingPlan& plan);

struct FixpointResult {
  PaddingPlan plan;
  BlockPads x64_blocks, a64_blocks;
  int iterations = 0;
  bool converged = false;
  std::vector<int> oscillating;  // callsites still moving when the cap hit
};

inline constexpr int kFixpointCap = 16;

FixpointResult accumulated_padding_fixpoint(const mir::MachineFunction& x64, const mir::MachineFunction& a64,
                                            bool block_align, bool callsite_align = true, int cap = kFixpointCap);

/// Inserts the plan's NOPs, jumps and prefixes plus block padding.
void apply_padding(mir::MachineFunction& mf, const PaddingPlan& plan, const BlockPads& blocks);

struct LinkResult {
  MachineImage x64, a64;
  PaddingPlan plan;                      // every callsite of the program
  std::vector<FixpointResult> fixpoints;  // per function
  std::uint64_t pad_bytes = 0;            // NOP + jump + prefix bytes, both targets
};

/// Links the two compiled programs into images with frozen addresses.
/// Refuses (LayoutError) when an alignment invariant does not hold.
LinkResult link(const ir::Program& p, std::vector<mir::MachineFunction> x64, std::vector<mir::MachineFunction> a64,
                const codegen::UnifyOptions& opts, std::uint64_t program_hash);

/// Single-target link with no cross-target alignment (native baseline).
MachineImage link_single(const ir::Program& p, std::vector<mir::MachineFunction> fs, std::uint64_t program_hash);

}  // namespace unistack::layout
