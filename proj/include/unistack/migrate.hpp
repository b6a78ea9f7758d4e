// Checkpoint, register rewrite and restore across the two targets.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "unistack/abi.hpp"
#include "unistack/emu.hpp"
#include "unistack/image.hpp"

namespace unistack::migrate {

class MigrateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  Target source = Target::X64;
  std::uint64_t program_hash = 0;
  // Return address of the pending call. Call instructions may start at
  // different addresses on the two targets; their return addresses do not.
  std::uint64_t pc = 0;
  int callsite = -1;
  std::uint64_t calls = 0;  // dynamic calls executed before this point
  std::map<abi::Role, std::uint64_t> regs;
  std::uint64_t sp = 0;
  std::vector<std::uint8_t> stack;  // [sp, stack base)
  std::uint64_t data_base = kDataBase;
  std::vector<std::uint8_t> globals;
  std::vector<std::uint64_t> output;
  bool operator==(const Checkpoint&) const = default;
};

/// Captures the state paused immediately before a call instruction.
Checkpoint checkpoint(const emu::MachineState& s);

/// Renames the register file for `to`; memory is copied untouched. Toward
/// A64 the link register is reloaded from the current frame's return slot.
Checkpoint rewrite_checkpoint(const Checkpoint& cp, Target to);

/// A runnable state of `img` positioned at the checkpointed call.
emu::MachineState restore(std::shared_ptr<const MachineImage> img, const Checkpoint& cp);

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& cp);
Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes);

struct MigrationPoint {
  std::uint64_t occurrence = 0;  // 1-based dynamic call count
  Target from = Target::X64, to = Target::A64;
  bool operator==(const MigrationPoint&) const = default;
};

using MigrationSchedule = std::vector<MigrationPoint>;

/// Parses "cs@k:x64>a64,cs@m:a64>x64". Occurrences must strictly increase.
MigrationSchedule parse_schedule(std::string_view text);
std::string format_schedule(const MigrationSchedule& s);

/// A migration at each of the first `n` call occurrences, alternating
/// direction and starting from `start`.
MigrationSchedule every_call(std::uint64_t n, Target start);

/// `trips` round trips spread over `n` call occurrences.
MigrationSchedule ping_pong(std::uint64_t n, int trips, Target start);

struct MigrationRecord {
  MigrationPoint point;
  int callsite = -1;
  std::uint64_t pc = 0;
  std::size_t register_bytes = 0;  // register section rewritten
  std::size_t image_bytes = 0;     // serialized checkpoint size
  bool memory_unchanged = false;   // stack and globals byte-identical
  bool involution = false;         // rewrite there and back restores registers
};

struct MigrationResult {
  emu::Status status = emu::Status::Running;
  std::string fault;
  Target final_target = Target::X64;
  std::vector<std::uint64_t> output;
  std::vector<MigrationRecord> migrations;
  std::vector<MigrationPoint> unreached;
  std::uint64_t steps = 0;
};

struct MigrationOptions {
  std::uint64_t fuel = 10'000'000;
  std::optional<std::string> checkpoint_dir;  // write and re-read each checkpoint here
};

/// Runs from `start`'s entry point, migrating at every scheduled point.
MigrationResult migrate_run(std::shared_ptr<const MachineImage> x64, std::shared_ptr<const MachineImage> a64,
                            Target start, const MigrationSchedule& sched, const MigrationOptions& opts = {});

}  // namespace unistack::migrate
