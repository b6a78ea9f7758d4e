#include "unistack/ir.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <cstring>
#include <map>
#include <set>
#include <sstream>
#include <unordered_map>
#include <utility>

namespace unistack::ir {

const Local* Function::find_local(std::string_view n) const {
  for (const auto& l : locals)
    if (l.name == n) return &l;
  return nullptr;
}

int Function::block_index(std::string_view label) const {
  for (std::size_t i = 0; i < blocks.size(); ++i)
    if (blocks[i].label == label) return static_cast<int>(i);
  return -1;
}

const Function* Program::find_function(std::string_view n) const {
  for (const auto& f : functions)
    if (f.name == n) return &f;
  return nullptr;
}

const Global* Program::find_global(std::string_view n) const {
  for (const auto& g : globals)
    if (g.name == n) return &g;
  return nullptr;
}

int Program::function_index(std::string_view n) const {
  for (std::size_t i = 0; i < functions.size(); ++i)
    if (functions[i].name == n) return static_cast<int>(i);
  return -1;
}

std::string to_string(const Diagnostic& d) {
  std::ostringstream os;
  os << d.pos.line << ":" << d.pos.column << ": ";
  if (!d.function.empty()) os << "in '" << d.function << "': ";
  os << d.message;
  return os.str();
}

namespace {

struct OpInfo {
  std::string_view name;
  Opcode op;
};

constexpr OpInfo kOps[] = {
    {"const", Opcode::Const},
    {"add", Opcode::Add},
    {"sub", Opcode::Sub},
    {"mul", Opcode::Mul},
    {"load", Opcode::Load},
    {"store", Opcode::Store},
    {"addr-of-local", Opcode::AddrOfLocal},
    {"addr-of-global", Opcode::AddrOfGlobal},
    {"call", Opcode::Call},
    {"br", Opcode::Br},
    {"br-cond", Opcode::BrCond},
    {"cmp", Opcode::Cmp},
    {"ret", Opcode::Ret},
    {"emit", Opcode::Emit},
    {"fadd", Opcode::FAdd},
    {"fmul", Opcode::FMul},
    {"fload", Opcode::FLoad},
    {"fstore", Opcode::FStore},
};

constexpr std::string_view kPreds[] = {"eq", "ne", "lt", "le", "gt", "ge"};

std::optional<Opcode> lookup_opcode(std::string_view s) {
  for (const auto& o : kOps)
    if (o.name == s) return o.op;
  return std::nullopt;
}

std::optional<Type> lookup_type(std::string_view s) {
  if (s == "i64") return Type::I64;
  if (s == "f64") return Type::F64;
  if (s == "ptr") return Type::Ptr;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Lexer

enum class Tok : std::uint8_t { Ident, Value, Int, Float, Punct, Arrow, Newline, End, Bad };

struct Token {
  Tok kind = Tok::End;
  std::string text;
  std::int64_t ival = 0;
  double fval = 0;
  SourcePos pos;
};

bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool ident_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-';
}

std::vector<Token> lex(std::string_view src) {
  std::vector<Token> out;
  int line = 1, col = 1;
  std::size_t i = 0;
  auto advance = [&](std::size_t n) {
    for (std::size_t k = 0; k < n; ++k, ++i) {
      if (src[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
  };
  while (i < src.size()) {
    char c = src[i];
    SourcePos pos{line, col};
    if (c == '\n') {
      out.push_back({Tok::Newline, "\\n", 0, 0, pos});
      advance(1);
    } else if (c == ' ' || c == '\t' || c == '\r') {
      advance(1);
    } else if (c == '#') {
      while (i < src.size() && src[i] != '\n') advance(1);
    } else if (c == '-' && i + 1 < src.size() && src[i + 1] == '>') {
      out.push_back({Tok::Arrow, "->", 0, 0, pos});
      advance(2);
    } else if (std::isdigit(static_cast<unsigned char>(c)) ||
               (c == '-' && i + 1 < src.size() &&
                std::isdigit(static_cast<unsigned char>(src[i + 1])))) {
      std::size_t j = i + 1;
      bool is_float = false;
      bool hex = c == '0' && j < src.size() && (src[j] == 'x' || src[j] == 'X');
      if (hex) ++j;
      while (j < src.size()) {
        char d = src[j];
        if (std::isxdigit(static_cast<unsigned char>(d)) && (hex || std::isdigit(static_cast<unsigned char>(d)))) {
          ++j;
        } else if (!hex && (d == '.' || d == 'e' || d == 'E')) {
          is_float = true;
          ++j;
          if (j < src.size() && (src[j] == '-' || src[j] == '+') && (d == 'e' || d == 'E')) ++j;
        } else if (d == '_') {
          ++j;
        } else {
          break;
        }
      }
      std::string text(src.substr(i, j - i));
      Token t{is_float ? Tok::Float : Tok::Int, text, 0, 0, pos};
      std::string clean;
      for (char ch : text)
        if (ch != '_') clean.push_back(ch);
      if (is_float) {
        char* end = nullptr;
        t.fval = std::strtod(clean.c_str(), &end);
        if (end != clean.c_str() + clean.size()) t.kind = Tok::Bad;
      } else {
        bool neg = clean[0] == '-';
        std::string_view digits(clean);
        if (neg) digits.remove_prefix(1);
        int base = 10;
        if (digits.size() > 2 && digits[0] == '0' && (digits[1] == 'x' || digits[1] == 'X')) {
          digits.remove_prefix(2);
          base = 16;
        }
        std::uint64_t v = 0;
        auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), v, base);
        if (ec != std::errc() || p != digits.data() + digits.size()) t.kind = Tok::Bad;
        t.ival = static_cast<std::int64_t>(neg ? (~v + 1) : v);
      }
      out.push_back(std::move(t));
      advance(j - i);
    } else if (c == '%' && i + 1 < src.size() && ident_start(src[i + 1])) {
      std::size_t j = i + 1;
      while (j < src.size() && ident_char(src[j])) ++j;
      out.push_back({Tok::Value, std::string(src.substr(i + 1, j - i - 1)), 0, 0, pos});
      advance(j - i);
    } else if (ident_start(c)) {
      std::size_t j = i;
      while (j < src.size() && ident_char(src[j])) ++j;
      out.push_back({Tok::Ident, std::string(src.substr(i, j - i)), 0, 0, pos});
      advance(j - i);
    } else if (std::strchr("(){}[],:=", c) != nullptr) {
      out.push_back({Tok::Punct, std::string(1, c), 0, 0, pos});
      advance(1);
    } else {
      out.push_back({Tok::Bad, std::string(1, c), 0, 0, pos});
      advance(1);
    }
  }
  out.push_back({Tok::End, "<eof>", 0, 0, {line, col}});
  return out;
}

// ---------------------------------------------------------------------------
// Parser

struct SyntaxError {
  SourcePos pos;
  std::string message;
};

std::string describe(const Token& t) {
  switch (t.kind) {
    case Tok::Newline: return "end of line";
    case Tok::End: return "end of input";
    case Tok::Value: return "'%" + t.text + "'";
    default: return "'" + t.text + "'";
  }
}

class Parser {
 public:
  explicit Parser(std::vector<Token> toks) : toks_(std::move(toks)) {}

  ParseResult run() {
    Program prog;
    bool saw_entry = false;
    while (peek().kind != Tok::End) {
      try {
        if (peek().kind == Tok::Newline) {
          ++pos_;
        } else if (is_ident("global")) {
          prog.globals.push_back(parse_global());
        } else if (is_ident("func")) {
          prog.functions.push_back(parse_function());
        } else if (is_ident("entry")) {
          ++pos_;
          prog.entry = expect_ident("entry function name").text;
          saw_entry = true;
          expect_eol();
        } else {
          fail(peek(), "'func', 'global' or 'entry'");
        }
      } catch (const SyntaxError& e) {
        diags_.push_back({e.pos, current_fn_, e.message});
        current_fn_.clear();
        recover_toplevel();
      }
    }
    (void)saw_entry;
    if (diags_.empty()) resolve(prog);
    ParseResult r;
    r.diagnostics = std::move(diags_);
    if (r.diagnostics.empty()) r.program = std::move(prog);
    return r;
  }

 private:
  const Token& peek(std::size_t k = 0) const { return toks_[std::min(pos_ + k, toks_.size() - 1)]; }
  const Token& next() { return toks_[std::min(pos_++, toks_.size() - 1)]; }
  bool is_ident(std::string_view s) const { return peek().kind == Tok::Ident && peek().text == s; }
  bool is_punct(char c) const { return peek().kind == Tok::Punct && peek().text[0] == c; }

  [[noreturn]] void fail(const Token& t, std::string expected) {
    throw SyntaxError{t.pos, "syntax error: expected " + expected + ", found " + describe(t)};
  }
  void expect_punct(char c) {
    if (!is_punct(c)) fail(peek(), std::string("'") + c + "'");
    ++pos_;
  }
  const Token& expect_ident(const char* what) {
    if (peek().kind != Tok::Ident) fail(peek(), what);
    return next();
  }
  void expect_eol() {
    if (peek().kind == Tok::Newline) {
      ++pos_;
      return;
    }
    if (peek().kind == Tok::End || is_punct('}')) return;
    fail(peek(), "end of line");
  }
  void skip_newlines() {
    while (peek().kind == Tok::Newline) ++pos_;
  }
  void recover_toplevel() {
    // Skip to the next line that starts a top-level item.
    while (peek().kind != Tok::End) {
      if (peek().kind == Tok::Newline) {
        ++pos_;
        if (is_ident("func") || is_ident("global") || is_ident("entry")) return;
      } else {
        ++pos_;
      }
    }
  }

  Type parse_type() {
    const Token& t = expect_ident("type");
    auto ty = lookup_type(t.text);
    if (!ty) throw SyntaxError{t.pos, "syntax error: expected type (i64, f64, ptr), found " + describe(t)};
    return *ty;
  }

  std::int64_t parse_int() {
    if (peek().kind != Tok::Int) fail(peek(), "integer");
    return next().ival;
  }

  Global parse_global() {
    Global g;
    g.pos = next().pos;
    g.name = expect_ident("global name").text;
    expect_punct(':');
    g.type = parse_type();
    std::int64_t size = 8;
    if (is_punct('[')) {
      ++pos_;
      const Token& st = peek();
      size = parse_int();
      if (size <= 0 || size % 8 != 0) throw SyntaxError{st.pos, "global size must be a positive multiple of 8"};
      expect_punct(']');
    }
    std::vector<std::uint64_t> vals;
    if (is_punct('=')) {
      ++pos_;
      for (;;) {
        const Token& t = next();
        if (t.kind == Tok::Int) {
          vals.push_back(g.type == Type::F64 ? std::bit_cast<std::uint64_t>(static_cast<double>(t.ival))
                                             : static_cast<std::uint64_t>(t.ival));
        } else if (t.kind == Tok::Float && g.type == Type::F64) {
          vals.push_back(std::bit_cast<std::uint64_t>(t.fval));
        } else {
          fail(t, "initializer value");
        }
        if (!is_punct(',')) break;
        ++pos_;
      }
    }
    if (static_cast<std::int64_t>(vals.size()) * 8 > size) {
      throw SyntaxError{g.pos, "initializer larger than global '" + g.name + "'"};
    }
    g.init.assign(static_cast<std::size_t>(size), 0);
    for (std::size_t k = 0; k < vals.size(); ++k)
      for (int b = 0; b < 8; ++b) g.init[k * 8 + b] = static_cast<std::uint8_t>(vals[k] >> (8 * b));
    expect_eol();
    return g;
  }

  Function parse_function() {
    Function f;
    f.pos = next().pos;
    f.name = expect_ident("function name").text;
    current_fn_ = f.name;
    expect_punct('(');
    if (!is_punct(')')) {
      for (;;) {
        Param p;
        p.name = expect_ident("parameter name").text;
        expect_punct(':');
        p.type = parse_type();
        f.params.push_back(std::move(p));
        if (!is_punct(',')) break;
        ++pos_;
      }
    }
    expect_punct(')');
    if (peek().kind == Tok::Arrow) {
      ++pos_;
      f.ret = parse_type();
    }
    skip_newlines();
    expect_punct('{');
    Block* cur = nullptr;
    auto ensure_block = [&](SourcePos) -> Block& {
      if (cur == nullptr) {
        f.blocks.push_back(Block{"entry", {}});
        cur = &f.blocks.back();
      }
      return *cur;
    };
    for (;;) {
      if (peek().kind == Tok::Newline) {
        ++pos_;
        continue;
      }
      if (is_punct('}')) {
        ++pos_;
        break;
      }
      if (peek().kind == Tok::End) fail(peek(), "'}'");
      try {
        if (is_ident("local")) {
          const Token& kw = next();
          Local l;
          l.name = expect_ident("local name").text;
          expect_punct(':');
          l.type = parse_type();
          if (is_punct('[')) {
            ++pos_;
            std::int64_t sz = parse_int();
            if (sz <= 0 || sz > (1 << 20)) throw SyntaxError{kw.pos, "bad local size"};
            l.size = static_cast<std::uint32_t>(sz);
            expect_punct(']');
          }
          f.locals.push_back(std::move(l));
          expect_eol();
        } else if (peek().kind == Tok::Ident && peek(1).kind == Tok::Punct && peek(1).text == ":") {
          std::string label = next().text;
          ++pos_;
          f.blocks.push_back(Block{label, {}});
          cur = &f.blocks.back();
          expect_eol();
        } else {
          Instr in = parse_instr();
          ensure_block(in.pos).instrs.push_back(std::move(in));
          expect_eol();
        }
      } catch (const SyntaxError& e) {
        diags_.push_back({e.pos, f.name, e.message});
        while (peek().kind != Tok::Newline && peek().kind != Tok::End && !is_punct('}')) ++pos_;
      }
    }
    current_fn_.clear();
    expect_eol();
    return f;
  }

  Operand parse_operand() {
    const Token& t = next();
    if (t.kind == Tok::Value) return Operand::value(t.text);
    if (t.kind == Tok::Int) return Operand::immediate(t.ival);
    fail(t, "operand");
  }

  void parse_operand_list(Instr& in, std::size_t n) {
    for (std::size_t k = 0; k < n; ++k) {
      if (k > 0) expect_punct(',');
      in.args.push_back(parse_operand());
    }
  }

  Instr parse_instr() {
    Instr in;
    in.pos = peek().pos;
    if (peek().kind == Tok::Value) {
      in.result = next().text;
      expect_punct('=');
    }
    const Token& opt = peek();
    if (opt.kind != Tok::Ident) fail(opt, "opcode");
    auto op = lookup_opcode(opt.text);
    if (!op) throw SyntaxError{opt.pos, "unknown opcode '" + opt.text + "'"};
    ++pos_;
    in.op = *op;
    switch (in.op) {
      case Opcode::Const: {
        if (peek().kind != Tok::Int) fail(peek(), "integer constant");
        in.args.push_back(Operand::immediate(next().ival));
        break;
      }
      case Opcode::Add:
      case Opcode::Sub:
      case Opcode::Mul:
      case Opcode::FAdd:
      case Opcode::FMul:
      case Opcode::Store:
      case Opcode::FStore:
        parse_operand_list(in, 2);
        break;
      case Opcode::Load:
      case Opcode::FLoad:
      case Opcode::Emit:
        parse_operand_list(in, 1);
        break;
      case Opcode::Ret:
        if (peek().kind != Tok::Newline && peek().kind != Tok::End && !is_punct('}')) parse_operand_list(in, 1);
        break;
      case Opcode::AddrOfLocal:
      case Opcode::AddrOfGlobal:
        in.symbol = expect_ident("symbol name").text;
        break;
      case Opcode::Call: {
        in.symbol = expect_ident("callee name").text;
        expect_punct('(');
        if (!is_punct(')')) {
          for (;;) {
            in.args.push_back(parse_operand());
            if (!is_punct(',')) break;
            ++pos_;
          }
        }
        expect_punct(')');
        break;
      }
      case Opcode::Br:
        in.targets.push_back(expect_ident("block label").text);
        break;
      case Opcode::BrCond:
        in.args.push_back(parse_operand());
        expect_punct(',');
        in.targets.push_back(expect_ident("block label").text);
        expect_punct(',');
        in.targets.push_back(expect_ident("block label").text);
        break;
      case Opcode::Cmp: {
        const Token& pt = expect_ident("comparison predicate");
        bool found = false;
        for (std::size_t k = 0; k < std::size(kPreds); ++k) {
          if (kPreds[k] == pt.text) {
            in.pred = static_cast<CmpPred>(k);
            found = true;
          }
        }
        if (!found) throw SyntaxError{pt.pos, "syntax error: expected comparison predicate, found " + describe(pt)};
        parse_operand_list(in, 2);
        break;
      }
    }
    return in;
  }

  void resolve(const Program& p) {
    std::set<std::string> symbols;
    for (const auto& g : p.globals)
      if (!symbols.insert(g.name).second) diags_.push_back({g.pos, "", "duplicate symbol '" + g.name + "'"});
    for (const auto& f : p.functions)
      if (!symbols.insert(f.name).second) diags_.push_back({f.pos, "", "duplicate symbol '" + f.name + "'"});
    for (const auto& f : p.functions) {
      std::set<std::string> names;
      for (const auto& prm : f.params)
        if (!names.insert(prm.name).second) diags_.push_back({f.pos, f.name, "duplicate symbol '" + prm.name + "'"});
      std::set<std::string> locals;
      for (const auto& l : f.locals)
        if (!locals.insert(l.name).second) diags_.push_back({f.pos, f.name, "duplicate symbol '" + l.name + "'"});
      std::set<std::string> labels;
      for (const auto& b : f.blocks) {
        if (!labels.insert(b.label).second)
          diags_.push_back({f.pos, f.name, "duplicate symbol '" + b.label + "'"});
        for (const auto& in : b.instrs) {
          if (in.op == Opcode::Call && !p.find_function(in.symbol))
            diags_.push_back({in.pos, f.name, "unresolved call target '" + in.symbol + "'"});
          if (in.op == Opcode::AddrOfLocal && !f.find_local(in.symbol))
            diags_.push_back({in.pos, f.name, "unknown local '" + in.symbol + "'"});
          if (in.op == Opcode::AddrOfGlobal && !p.find_global(in.symbol))
            diags_.push_back({in.pos, f.name, "unknown global '" + in.symbol + "'"});
        }
      }
    }
  }

  std::vector<Token> toks_;
  std::size_t pos_ = 0;
  std::vector<Diagnostic> diags_;
  std::string current_fn_;
};

}  // namespace

ParseResult parse_program(std::string_view text) { return Parser(lex(text)).run(); }

std::string_view opcode_name(Opcode op) {
  for (const auto& o : kOps)
    if (o.op == op) return o.name;
  return "?";
}

std::string_view type_name(Type t) {
  switch (t) {
    case Type::I64: return "i64";
    case Type::F64: return "f64";
    case Type::Ptr: return "ptr";
  }
  return "?";
}

std::string_view pred_name(CmpPred p) { return kPreds[static_cast<std::size_t>(p)]; }

// ---------------------------------------------------------------------------
// Printer

namespace {

void print_operand(std::ostream& os, const Operand& o) {
  if (o.is_value())
    os << '%' << o.name;
  else
    os << o.imm;
}

std::string print_double(double d) {
  char buf[64];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, d);
    if (std::strtod(buf, nullptr) == d) break;
  }
  std::string s(buf);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

}  // namespace

std::string print_program(const Program& p) {
  std::ostringstream os;
  if (p.entry != "main") os << "entry " << p.entry << "\n";
  for (const auto& g : p.globals) {
    os << "global " << g.name << ": " << type_name(g.type);
    if (g.init.size() != 8) os << '[' << g.init.size() << ']';
    std::size_t n = g.init.size() / 8;
    while (n > 0) {
      bool zero = true;
      for (int b = 0; b < 8; ++b) zero = zero && g.init[(n - 1) * 8 + b] == 0;
      if (!zero) break;
      --n;
    }
    if (n > 0) {
      os << " =";
      for (std::size_t k = 0; k < n; ++k) {
        std::uint64_t v = 0;
        for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(g.init[k * 8 + b]) << (8 * b);
        os << (k ? ", " : " ");
        if (g.type == Type::F64)
          os << print_double(std::bit_cast<double>(v));
        else
          os << static_cast<std::int64_t>(v);
      }
    }
    os << "\n";
  }
  for (const auto& f : p.functions) {
    os << "\nfunc " << f.name << '(';
    for (std::size_t k = 0; k < f.params.size(); ++k)
      os << (k ? ", " : "") << f.params[k].name << ": " << type_name(f.params[k].type);
    os << ") -> " << type_name(f.ret) << " {\n";
    for (const auto& l : f.locals) {
      os << "  local " << l.name << ": " << type_name(l.type);
      if (l.size != 8) os << '[' << l.size << ']';
      os << "\n";
    }
    for (const auto& b : f.blocks) {
      os << b.label << ":\n";
      for (const auto& in : b.instrs) {
        os << "  ";
        if (!in.result.empty()) os << '%' << in.result << " = ";
        os << opcode_name(in.op);
        switch (in.op) {
          case Opcode::AddrOfLocal:
          case Opcode::AddrOfGlobal:
            os << ' ' << in.symbol;
            break;
          case Opcode::Call:
            os << ' ' << in.symbol << '(';
            for (std::size_t k = 0; k < in.args.size(); ++k) {
              if (k) os << ", ";
              print_operand(os, in.args[k]);
            }
            os << ')';
            break;
          case Opcode::Br:
            os << ' ' << in.targets[0];
            break;
          case Opcode::BrCond:
            os << ' ';
            print_operand(os, in.args[0]);
            os << ", " << in.targets[0] << ", " << in.targets[1];
            break;
          case Opcode::Cmp:
            os << ' ' << pred_name(in.pred);
            [[fallthrough]];
          default:
            for (std::size_t k = 0; k < in.args.size(); ++k) {
              os << (k ? ", " : " ");
              print_operand(os, in.args[k]);
            }
        }
        os << "\n";
      }
    }
    os << "}\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Validator

namespace {

std::optional<Type> result_type(const Program& p, const Instr& in,
                                const std::unordered_map<std::string, Type>& types) {
  auto ty = [&](const Operand& o) -> Type {
    if (!o.is_value()) return Type::I64;
    auto it = types.find(o.name);
    return it == types.end() ? Type::I64 : it->second;
  };
  switch (in.op) {
    case Opcode::Const:
    case Opcode::Mul:
    case Opcode::Load:
    case Opcode::Cmp:
      return Type::I64;
    case Opcode::Add:
    case Opcode::Sub:
      if (in.args.size() == 2 && (ty(in.args[0]) == Type::Ptr || ty(in.args[1]) == Type::Ptr)) return Type::Ptr;
      return Type::I64;
    case Opcode::AddrOfLocal:
    case Opcode::AddrOfGlobal:
      return Type::Ptr;
    case Opcode::FAdd:
    case Opcode::FMul:
    case Opcode::FLoad:
      return Type::F64;
    case Opcode::Call:
      if (const Function* callee = p.find_function(in.symbol)) return callee->ret;
      return Type::I64;
    default:
      return std::nullopt;
  }
}

bool defines_value(Opcode op) {
  switch (op) {
    case Opcode::Store:
    case Opcode::FStore:
    case Opcode::Br:
    case Opcode::BrCond:
    case Opcode::Ret:
    case Opcode::Emit:
      return false;
    default:
      return true;
  }
}

std::vector<std::vector<int>> successors(const Function& f) {
  std::vector<std::vector<int>> succ(f.blocks.size());
  for (std::size_t b = 0; b < f.blocks.size(); ++b) {
    if (f.blocks[b].instrs.empty()) continue;
    const Instr& t = f.blocks[b].instrs.back();
    for (const auto& l : t.targets) {
      int idx = f.block_index(l);
      if (idx >= 0) succ[b].push_back(idx);
    }
  }
  return succ;
}

void validate_function(const Program& p, const Function& f, std::vector<Diagnostic>& out) {
  auto diag = [&](SourcePos pos, std::string msg) { out.push_back({pos, f.name, std::move(msg)}); };
  if (f.blocks.empty()) {
    diag(f.pos, "function has no blocks");
    return;
  }

  // Definitions and types, in block order.
  std::unordered_map<std::string, Type> types;
  for (const auto& prm : f.params) types[prm.name] = prm.type;
  std::set<std::string> defined;
  for (const auto& prm : f.params) defined.insert(prm.name);
  for (const auto& b : f.blocks) {
    for (const auto& in : b.instrs) {
      if (in.result.empty()) continue;
      if (!defines_value(in.op)) {
        diag(in.pos, std::string("'") + std::string(opcode_name(in.op)) + "' does not produce a value");
        continue;
      }
      if (!defined.insert(in.result).second) {
        diag(in.pos, "duplicate value definition '%" + in.result + "'");
        continue;
      }
      if (auto t = result_type(p, in, types)) types[in.result] = *t;
    }
  }

  auto type_of = [&](const Operand& o) -> std::optional<Type> {
    if (!o.is_value()) return Type::I64;
    auto it = types.find(o.name);
    if (it == types.end()) return std::nullopt;
    return it->second;
  };

  for (std::size_t bi = 0; bi < f.blocks.size(); ++bi) {
    const Block& b = f.blocks[bi];
    if (b.instrs.empty() || !b.instrs.back().is_terminator()) {
      SourcePos pos = b.instrs.empty() ? f.pos : b.instrs.back().pos;
      diag(pos, "missing terminator in block '" + b.label + "'");
    }
    for (std::size_t ii = 0; ii < b.instrs.size(); ++ii) {
      const Instr& in = b.instrs[ii];
      if (in.is_terminator() && ii + 1 != b.instrs.size())
        diag(in.pos, "instruction after terminator in block '" + b.label + "'");
      for (const auto& l : in.targets)
        if (f.block_index(l) < 0) diag(in.pos, "unknown block label '" + l + "'");
      for (const auto& a : in.args)
        if (a.is_value() && !defined.count(a.name)) diag(in.pos, "undefined value '%" + a.name + "'");

      auto need = [&](std::size_t n) {
        if (in.args.size() != n) {
          diag(in.pos, std::string("operand mismatch: '") + std::string(opcode_name(in.op)) + "' takes " +
                           std::to_string(n) + " operands");
          return false;
        }
        return true;
      };
      auto want_int = [&](std::size_t k) {
        auto t = type_of(in.args[k]);
        if (t && !is_integer(*t)) diag(in.pos, "operand mismatch: integer operand expected");
      };
      auto want_ptr = [&](std::size_t k) {
        auto t = type_of(in.args[k]);
        if (t && *t != Type::Ptr) diag(in.pos, "operand mismatch: pointer operand expected");
      };
      auto want_float = [&](std::size_t k) {
        auto t = type_of(in.args[k]);
        if (t && *t != Type::F64) diag(in.pos, "operand mismatch: f64 operand expected");
      };
      if (defines_value(in.op) && in.op != Opcode::Call && in.result.empty())
        diag(in.pos, std::string("'") + std::string(opcode_name(in.op)) + "' requires a result");

      switch (in.op) {
        case Opcode::Const:
          need(1);
          break;
        case Opcode::Add:
        case Opcode::Sub:
          if (need(2)) {
            want_int(0);
            want_int(1);
          }
          break;
        case Opcode::Mul:
        case Opcode::Cmp:
          if (need(2)) {
            auto t0 = type_of(in.args[0]), t1 = type_of(in.args[1]);
            if ((t0 && *t0 != Type::I64) || (t1 && *t1 != Type::I64))
              diag(in.pos, "operand mismatch: i64 operands expected");
          }
          break;
        case Opcode::Load:
        case Opcode::FLoad:
          if (need(1)) want_ptr(0);
          break;
        case Opcode::Store:
          if (need(2)) {
            want_ptr(0);
            want_int(1);
          }
          break;
        case Opcode::FStore:
          if (need(2)) {
            want_ptr(0);
            want_float(1);
          }
          break;
        case Opcode::FAdd:
        case Opcode::FMul:
          if (need(2)) {
            want_float(0);
            want_float(1);
          }
          break;
        case Opcode::Emit:
          need(1);
          break;
        case Opcode::AddrOfLocal:
        case Opcode::AddrOfGlobal:
          need(0);
          break;
        case Opcode::Br:
          need(0);
          if (in.targets.size() != 1) diag(in.pos, "operand mismatch: 'br' takes one label");
          break;
        case Opcode::BrCond: {
          if (!need(1)) break;
          bool fused = ii > 0 && b.instrs[ii - 1].op == Opcode::Cmp && in.args[0].is_value() &&
                       b.instrs[ii - 1].result == in.args[0].name;
          if (!fused) diag(in.pos, "br-cond condition must come from the immediately preceding cmp");
          break;
        }
        case Opcode::Ret:
          if (need(1)) {
            auto t = type_of(in.args[0]);
            if (t && is_integer(*t) != is_integer(f.ret)) diag(in.pos, "operand mismatch: return type");
          }
          break;
        case Opcode::Call: {
          const Function* callee = p.find_function(in.symbol);
          if (!callee) {
            diag(in.pos, "unresolved call target '" + in.symbol + "'");
            break;
          }
          if (callee->params.size() != in.args.size()) {
            diag(in.pos, "call arity mismatch for '" + in.symbol + "'");
            break;
          }
          for (std::size_t k = 0; k < in.args.size(); ++k) {
            auto t = type_of(in.args[k]);
            if (t && is_integer(*t) != is_integer(callee->params[k].type))
              diag(in.pos, "operand mismatch: argument " + std::to_string(k) + " of '" + in.symbol + "'");
          }
          break;
        }
      }
      if (in.op == Opcode::AddrOfLocal && !f.find_local(in.symbol))
        diag(in.pos, "unknown local '" + in.symbol + "'");
      if (in.op == Opcode::AddrOfGlobal && !p.find_global(in.symbol))
        diag(in.pos, "unknown global '" + in.symbol + "'");
      if (in.op == Opcode::Cmp) {
        // The result is only consumed by the fused branch.
        bool ok = ii + 1 < b.instrs.size() && b.instrs[ii + 1].op == Opcode::BrCond;
        int uses = 0;
        for (const auto& bb : f.blocks)
          for (const auto& u : bb.instrs)
            for (const auto& a : u.args) uses += a.is_value() && a.name == in.result;
        if (!ok || uses != 1) diag(in.pos, "cmp result must feed only the next br-cond");
      }
    }
  }

  // Definite-definition dataflow: a use is legal iff its value is defined on
  // every path from entry.
  const std::size_t nb = f.blocks.size();
  auto succ = successors(f);
  std::vector<std::vector<int>> pred(nb);
  for (std::size_t b = 0; b < nb; ++b)
    for (int s : succ[b]) pred[static_cast<std::size_t>(s)].push_back(static_cast<int>(b));
  std::vector<bool> reachable(nb, false);
  std::vector<int> work{0};
  reachable[0] = true;
  while (!work.empty()) {
    int b = work.back();
    work.pop_back();
    for (int s : succ[static_cast<std::size_t>(b)])
      if (!reachable[static_cast<std::size_t>(s)]) {
        reachable[static_cast<std::size_t>(s)] = true;
        work.push_back(s);
      }
  }
  std::vector<std::set<std::string>> in_sets(nb, defined), out_sets(nb, defined);
  in_sets[0].clear();
  for (const auto& prm : f.params) in_sets[0].insert(prm.name);
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t b = 0; b < nb; ++b) {
      if (!reachable[b]) continue;
      std::set<std::string> in;
      if (b == 0) {
        for (const auto& prm : f.params) in.insert(prm.name);
      } else {
        bool first = true;
        for (int pb : pred[b]) {
          if (!reachable[static_cast<std::size_t>(pb)]) continue;
          const auto& o = out_sets[static_cast<std::size_t>(pb)];
          if (first) {
            in = o;
            first = false;
          } else {
            std::set<std::string> tmp;
            std::set_intersection(in.begin(), in.end(), o.begin(), o.end(), std::inserter(tmp, tmp.begin()));
            in = std::move(tmp);
          }
        }
      }
      std::set<std::string> out = in;
      for (const auto& ins : f.blocks[b].instrs)
        if (!ins.result.empty()) out.insert(ins.result);
      if (in != in_sets[b] || out != out_sets[b]) {
        in_sets[b] = std::move(in);
        out_sets[b] = std::move(out);
        changed = true;
      }
    }
  }
  for (std::size_t b = 0; b < nb; ++b) {
    if (!reachable[b]) continue;
    std::set<std::string> live = in_sets[b];
    for (const auto& ins : f.blocks[b].instrs) {
      for (const auto& a : ins.args)
        if (a.is_value() && defined.count(a.name) && !live.count(a.name))
          diag(ins.pos, "use before def of '%" + a.name + "'");
      if (!ins.result.empty()) live.insert(ins.result);
    }
  }
}

}  // namespace

std::vector<Diagnostic> validate(const Program& p) {
  std::vector<Diagnostic> out;
  if (!p.find_function(p.entry)) out.push_back({{}, "", "entry function '" + p.entry + "' not found"});
  std::set<std::string> symbols;
  for (const auto& g : p.globals) {
    if (!symbols.insert(g.name).second) out.push_back({g.pos, "", "duplicate symbol '" + g.name + "'"});
    if (g.init.empty() || g.init.size() % 8 != 0)
      out.push_back({g.pos, "", "global '" + g.name + "' size must be a positive multiple of 8"});
  }
  for (const auto& f : p.functions)
    if (!symbols.insert(f.name).second) out.push_back({f.pos, "", "duplicate symbol '" + f.name + "'"});
  for (const auto& f : p.functions) validate_function(p, f, out);
  return out;
}

std::vector<std::pair<std::string, Type>> value_types(const Program& p, const Function& f) {
  std::vector<std::pair<std::string, Type>> out;
  std::unordered_map<std::string, Type> types;
  for (const auto& prm : f.params) {
    types[prm.name] = prm.type;
    out.emplace_back(prm.name, prm.type);
  }
  for (const auto& b : f.blocks)
    for (const auto& in : b.instrs) {
      if (in.result.empty() || types.count(in.result)) continue;
      if (auto t = result_type(p, in, types)) {
        types[in.result] = *t;
        out.emplace_back(in.result, *t);
      }
    }
  return out;
}

}  // namespace unistack::ir
