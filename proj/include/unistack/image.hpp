// Linked machine images and their container format.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "unistack/abi.hpp"
#include "unistack/mir.hpp"

namespace unistack {

inline constexpr std::uint64_t kCodeBase = 0x1000;
inline constexpr std::uint64_t kSymbolGranule = 64;
inline constexpr std::uint64_t kDataBase = 0x10000000;
inline constexpr std::uint64_t kStackBase = 0x800000000000;
inline constexpr std::uint64_t kStackSize = 1u << 20;

namespace stackmap {

struct ValueLocation {
  enum class Kind : std::uint8_t { Register, StackSlot, Constant, Recomputed };
  Kind kind = Kind::Recomputed;
  abi::Role role = abi::Role::SP;  // Register
  std::int64_t offset = 0;         // StackSlot: bytes from the frame base
  std::uint64_t value = 0;         // Constant

  static ValueLocation reg(abi::Role r) { return {Kind::Register, r, 0, 0}; }
  static ValueLocation slot(std::int64_t off) { return {Kind::StackSlot, abi::Role::SP, off, 0}; }
  static ValueLocation constant(std::uint64_t v) { return {Kind::Constant, abi::Role::SP, 0, v}; }
  static ValueLocation recomputed() { return {}; }
  bool operator==(const ValueLocation&) const = default;
};

std::string to_string(const ValueLocation& loc);

struct StackMapRecord {
  int callsite = -1;
  std::uint64_t address = 0;  // return address of the call
  std::string function;
  std::vector<std::pair<std::string, ValueLocation>> values;
  bool operator==(const StackMapRecord&) const = default;
};

}  // namespace stackmap

struct FunctionSymbol {
  std::string name;
  std::uint64_t addr = 0;
  std::uint64_t size = 0;
  std::int64_t frame_size = 0;
  bool operator==(const FunctionSymbol&) const = default;
};

struct GlobalSymbol {
  std::string name;
  std::uint64_t addr = 0;
  std::uint64_t size = 0;
  bool operator==(const GlobalSymbol&) const = default;
};

struct CallsiteEntry {
  int id = -1;
  std::string function;
  std::uint64_t call_addr = 0;
  std::uint64_t return_addr = 0;
  bool operator==(const CallsiteEntry&) const = default;
};

struct MachineImage {
  Target target = Target::X64;
  std::uint64_t program_hash = 0;
  std::uint64_t entry = 0;
  std::vector<FunctionSymbol> functions;
  std::vector<GlobalSymbol> globals;
  std::uint64_t data_base = kDataBase;
  std::vector<std::uint8_t> data;
  std::vector<mir::MachineInstr> code;  // ascending addresses, no zero-size records
  std::vector<CallsiteEntry> callsites;
  bool has_stackmaps = false;
  std::vector<stackmap::StackMapRecord> stackmaps;

  /// Rebuilds the address -> instruction index map.
  void index();
  const mir::MachineInstr* at(std::uint64_t addr) const;
  std::optional<std::size_t> index_of(std::uint64_t addr) const;
  const FunctionSymbol* function_at(std::uint64_t addr) const;
  const FunctionSymbol* function(std::string_view name) const;
  const GlobalSymbol* global(std::string_view name) const;
  const CallsiteEntry* callsite(int id) const;
  /// Callsite whose call instruction ends at `return_addr`.
  const CallsiteEntry* callsite_returning_to(std::uint64_t return_addr) const;
  /// Sum of instruction sizes (padding included).
  std::uint64_t text_bytes() const;

  bool operator==(const MachineImage& o) const {
    return target == o.target && program_hash == o.program_hash && entry == o.entry && functions == o.functions &&
           globals == o.globals && data_base == o.data_base && data == o.data && code == o.code &&
           callsites == o.callsites && has_stackmaps == o.has_stackmaps && stackmaps == o.stackmaps;
  }

 private:
  std::unordered_map<std::uint64_t, std::size_t> decoder_;
};

inline constexpr std::uint32_t kImageVersion = 1;

std::vector<std::uint8_t> serialize_image(const MachineImage& img);
/// Throws FormatError on malformed or truncated input.
MachineImage deserialize_image(std::span<const std::uint8_t> bytes);

MachineImage strip_stackmaps(MachineImage img);

/// Readable listing of the whole image.
std::string disassemble(const MachineImage& img);

}  // namespace unistack
