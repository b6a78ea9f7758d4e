// Interpreters for linked images of both dialects, plus a direct IR
// interpreter used as the output oracle.
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "unistack/abi.hpp"
#include "unistack/image.hpp"
#include "unistack/ir.hpp"

namespace unistack::emu {

class EmuError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Status : std::uint8_t { Running, Halted, Fault, FuelExhausted };
std::string_view status_name(Status s);

struct MachineState {
  Target target = Target::X64;
  std::array<std::uint64_t, abi::kRoleCount> regs{};
  std::uint64_t pc = 0;
  std::int64_t cmp_lhs = 0, cmp_rhs = 0;  // operands of the last compare
  std::uint64_t data_base = kDataBase;
  std::vector<std::uint8_t> data;
  std::vector<std::uint8_t> stack;  // [kStackBase - stack.size(), kStackBase), grown on write
  std::vector<std::uint64_t> output;
  Status status = Status::Running;
  std::string fault;
  std::uint64_t steps = 0;
  std::uint64_t calls = 0;  // dynamic call instructions executed
  std::shared_ptr<const MachineImage> image;

  std::uint64_t reg(abi::Role r) const { return regs[abi::index(r)]; }
  void set_reg(abi::Role r, std::uint64_t v) { regs[abi::index(r)] = v; }
  bool halted() const { return status != Status::Running; }

  /// 64-bit little-endian access to data or stack; throws EmuError outside.
  std::uint64_t read64(std::uint64_t addr) const;
  void write64(std::uint64_t addr, std::uint64_t v);
  /// Current instruction or nullptr when PC is off an instruction boundary.
  const mir::MachineInstr* current() const;
};

/// Globals initialized, SP at the stack base (X64 additionally holds the
/// zero return address pushed by the startup call), PC at the entry symbol.
MachineState load_image(std::shared_ptr<const MachineImage> img);
MachineState load_image(const MachineImage& img);

/// Executes one instruction. Faults stop the machine with a diagnostic.
void step(MachineState& s);

struct TraceEvent {
  enum class Kind : std::uint8_t { Entry, Exit, Callsite };
  Kind kind = Kind::Entry;
  int callsite = -1;
  std::string function;
  std::uint64_t sp = 0, fp = 0;  // Entry/Exit: sp holds the frame base
  std::int64_t frame_size = 0;
  int depth = 0;  // frames live after the event (Exit: before popping)
};

struct Trace {
  std::vector<TraceEvent> events;
  std::vector<std::int64_t> frames;  // live frame sizes while recording
  std::vector<std::string> names;
  /// Text form: one event per line.
  std::string to_text() const;
};

struct RunOptions {
  std::uint64_t fuel = 10'000'000;
  Trace* trace = nullptr;
  /// Called before a call instruction executes; returning true pauses
  /// the machine at that instruction (status stays Running).
  std::function<bool(const MachineState&)> pause_before_call;
};

struct RunResult {
  Status status = Status::Running;
  std::uint64_t steps = 0;
  bool paused = false;
  std::string fault;
};

RunResult run(MachineState& s, const RunOptions& opts);
RunResult run(MachineState& s, std::uint64_t fuel, Trace* trace = nullptr);

struct FivePoint {
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
  bool operator==(const FivePoint&) const = default;
};

/// Linear interpolation between closest ranks (sorted input not required).
FivePoint five_point(std::vector<double> xs);

struct StackStats {
  FivePoint frame_size;
  FivePoint frame_count;
  std::size_t samples = 0;
  bool operator==(const StackStats&) const = default;
};

/// Samples at every function entry and every callsite occurrence.
StackStats stack_stats(const Trace& t);

// ---------------------------------------------------------------------------
// Reference interpreter

struct InterpResult {
  Status status = Status::Running;
  std::vector<std::uint64_t> output;
  std::uint64_t steps = 0;
  std::uint64_t calls = 0;
  std::string fault;
  bool paused = false;
  // Snapshot of the innermost frame when paused before a call.
  std::string function;
  int depth = 0;
  std::map<std::string, std::vector<std::uint8_t>> locals;
  std::map<std::string, std::uint64_t> values;
};

/// Evaluates the IR directly with wrapping 64-bit integer arithmetic and
/// IEEE doubles. `pause_at_call` (1-based dynamic call count) stops just
/// before that call executes.
InterpResult interpret(const ir::Program& p, std::uint64_t fuel = 10'000'000,
                       std::optional<std::uint64_t> pause_at_call = std::nullopt);

}  // namespace unistack::emu
