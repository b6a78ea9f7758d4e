// Per-callsite live-value maps and the cross-target layout check.
#pragma once

#include <string>
#include <vector>

#include "unistack/image.hpp"
#include "unistack/ir.hpp"
#include "unistack/mir.hpp"

namespace unistack::stackmap {

class StackMapError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// IR values live across each call of `f` (the call's own result excluded),
/// one list per call in program order, each in definition order.
std::vector<std::vector<std::string>> live_across_calls(const ir::Program& p, const ir::Function& f);

/// One record per callsite of `mf`. Locals are listed first by name as
/// stack slots, then live values as "%name". `img` supplies the unified
/// return addresses.
std::vector<StackMapRecord> emit_stackmaps(const ir::Program& p, const ir::Function& f,
                                           const mir::MachineFunction& mf, const MachineImage& img);

/// Emits records for a whole program and stores them in the image.
void attach_stackmaps(MachineImage& img, const ir::Program& p, const std::vector<mir::MachineFunction>& fs);

struct Divergence {
  int callsite = -1;
  std::string value;
  std::string a, b;
  bool operator==(const Divergence&) const = default;
};

struct VerificationReport {
  bool equivalent = true;
  std::vector<Divergence> divergences;
  /// Structured text: a status line, then one line per divergence.
  std::string to_text() const;
};

VerificationReport verify_layout(const std::vector<StackMapRecord>& a, const std::vector<StackMapRecord>& b);

}  // namespace unistack::stackmap
