// Source IR shared by both backends: a register-based three-address form
// with named locals, a line-oriented text syntax, and a validator.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace unistack::ir {

enum class Type : std::uint8_t { I64, F64, Ptr };

/// i64 and ptr share the integer register class; f64 lives in FPRs.
constexpr bool is_integer(Type t) { return t != Type::F64; }

enum class Opcode : std::uint8_t {
  Const,
  Add,
  Sub,
  Mul,
  Load,
  Store,
  AddrOfLocal,
  AddrOfGlobal,
  Call,
  Br,
  BrCond,
  Cmp,
  Ret,
  Emit,
  FAdd,
  FMul,
  FLoad,
  FStore,
};

enum class CmpPred : std::uint8_t { Eq, Ne, Lt, Le, Gt, Ge };

struct SourcePos {
  int line = 0;
  int column = 0;
};

struct Operand {
  enum class Kind : std::uint8_t { Value, Imm };
  Kind kind = Kind::Imm;
  std::string name;  // Value: referenced value without the '%' sigil
  std::int64_t imm = 0;

  static Operand value(std::string n) { return {Kind::Value, std::move(n), 0}; }
  static Operand immediate(std::int64_t v) { return {Kind::Imm, {}, v}; }
  bool is_value() const { return kind == Kind::Value; }
  bool operator==(const Operand&) const = default;
};

struct Instr {
  Opcode op = Opcode::Const;
  std::string result;  // empty when the instruction defines nothing
  std::vector<Operand> args;
  std::string symbol;                // local / global / callee name
  std::vector<std::string> targets;  // branch labels
  CmpPred pred = CmpPred::Eq;
  SourcePos pos;

  bool is_terminator() const {
    return op == Opcode::Br || op == Opcode::BrCond || op == Opcode::Ret;
  }
  bool operator==(const Instr& o) const {
    return op == o.op && result == o.result && args == o.args && symbol == o.symbol &&
           targets == o.targets && pred == o.pred;
  }
};

struct Block {
  std::string label;
  std::vector<Instr> instrs;
  bool operator==(const Block&) const = default;
};

struct Param {
  std::string name;
  Type type = Type::I64;
  bool operator==(const Param&) const = default;
};

struct Local {
  std::string name;
  Type type = Type::I64;
  std::uint32_t size = 8;
  bool operator==(const Local&) const = default;
};

struct Function {
  std::string name;
  std::vector<Param> params;
  std::vector<Local> locals;
  std::vector<Block> blocks;
  Type ret = Type::I64;
  SourcePos pos;

  const Local* find_local(std::string_view n) const;
  int block_index(std::string_view label) const;
  bool operator==(const Function& o) const {
    return name == o.name && params == o.params && locals == o.locals && blocks == o.blocks &&
           ret == o.ret;
  }
};

struct Global {
  std::string name;
  Type type = Type::I64;
  std::vector<std::uint8_t> init;  // little-endian, size is a multiple of 8
  SourcePos pos;
  bool operator==(const Global& o) const {
    return name == o.name && type == o.type && init == o.init;
  }
};

struct Program {
  std::vector<Global> globals;
  std::vector<Function> functions;
  std::string entry = "main";

  const Function* find_function(std::string_view n) const;
  const Global* find_global(std::string_view n) const;
  int function_index(std::string_view n) const;
  bool operator==(const Program&) const = default;
};

struct Diagnostic {
  SourcePos pos;
  std::string function;  // empty for program-level diagnostics
  std::string message;
};

std::string to_string(const Diagnostic& d);

struct ParseResult {
  std::optional<Program> program;
  std::vector<Diagnostic> diagnostics;
  bool ok() const { return program.has_value(); }
};

/// Parses IR text. On success the program has passed name resolution
/// (unique symbols, resolvable call targets); structural checks live in
/// validate().
ParseResult parse_program(std::string_view text);

/// Empty iff every program and function invariant holds. Order is
/// deterministic: program-level first, then functions in declaration order.
std::vector<Diagnostic> validate(const Program& p);

std::string print_program(const Program& p);

std::string_view opcode_name(Opcode op);
std::string_view type_name(Type t);
std::string_view pred_name(CmpPred p);

/// Type of every named value in `f` (params and instruction results), in
/// definition order. Values with inconsistent definitions are skipped.
std::vector<std::pair<std::string, Type>> value_types(const Program& p, const Function& f);

}  // namespace unistack::ir
