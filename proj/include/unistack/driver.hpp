// The compile -> link -> stackmap -> verify pipeline shared by the CLI and tests.
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "unistack/codegen.hpp"
#include "unistack/ir.hpp"
#include "unistack/layout.hpp"
#include "unistack/stackmap.hpp"

namespace unistack::driver {

/// Failure inside one pipeline stage; what() is prefixed with the stage.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& msg) : std::runtime_error(stage + ": " + msg), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// FNV-1a over the printed program and the option bits.
std::uint64_t program_hash(const ir::Program& p, const codegen::UnifyOptions& o);

struct Build {
  std::uint64_t hash = 0;
  std::vector<mir::MachineFunction> x64, a64;  // before padding
  layout::LinkResult link;                     // images carry stackmaps
  stackmap::VerificationReport report;
};

/// Validates, compiles both targets, links and verifies.
Build build(const ir::Program& p, const codegen::UnifyOptions& o = {});

/// Which unification rules had something to act on in this program.
struct Coverage {
  bool remat = false;
  bool callsite_align = false;
  bool imm_unify = false;
  bool addr_restrict = false;
  bool two_addr = false;
  bool zero_rule = false;
  Coverage& operator|=(const Coverage& o);
  bool all() const { return remat && callsite_align && imm_unify && addr_restrict && two_addr && zero_rule; }
};

Coverage coverage(const Build& b);

/// Text bytes of each target compiled natively (all rules off, no padding).
struct TextSize {
  std::uint64_t x64 = 0, a64 = 0;
  std::uint64_t total() const { return x64 + a64; }
};

TextSize native_text_size(const ir::Program& p);
TextSize unified_text_size(const Build& b);

/// The six rule names used by the --no-<rule> flags, in flag order.
inline constexpr const char* kRuleNames[] = {"remat", "callsite-align", "imm-unify",
                                             "addr-restrict", "two-addr", "zero-rule"};
/// Options with exactly rule `i` of kRuleNames turned off.
codegen::UnifyOptions without_rule(int i);

}  // namespace unistack::driver
