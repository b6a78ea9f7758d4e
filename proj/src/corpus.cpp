#include "unistack/corpus.hpp"

#include <algorithm>
#include <random>
#include <sstream>
#include <stdexcept>

namespace unistack::corpus {

CorpusSpec CorpusSpec::minimal(std::uint64_t seed) {
  CorpusSpec s;
  s.seed = seed;
  s.count = 1;
  s.max_functions = 1;
  s.max_call_depth = 0;
  s.p_call = 0;
  s.p_loop = 0;
  s.f64_share = 0;
  s.probes = false;
  return s;
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

struct Sig {
  std::string name;
  std::vector<ir::Type> params;
  ir::Type ret = ir::Type::I64;
  int depth = 0;
};

struct GlobalInfo {
  std::string name;
  std::uint32_t size = 8;
  bool f64 = false;
};

struct Ptr {
  std::string name;
  std::uint32_t extent = 8;
};

class Gen {
 public:
  Gen(const CorpusSpec& s, std::size_t index) : s_(s), rng_(splitmix(s.seed ^ splitmix(index + 1))) {}

  std::string run() {
    int nf = 1 + static_cast<int>(u(static_cast<std::uint64_t>(std::max(1, s_.max_functions))));
    if (s_.probes && nf < 2 && s_.max_functions >= 2) nf = 2;
    int ng = static_cast<int>(u(3));
    for (int g = 0; g < ng; ++g) {
      GlobalInfo gi{"g" + std::to_string(g), static_cast<std::uint32_t>(8 * (1 + u(3))), false};
      out_ << "global " << gi.name << ": i64";
      if (gi.size != 8) out_ << '[' << gi.size << ']';
      out_ << " =";
      for (std::uint32_t w = 0; w < gi.size / 8; ++w) out_ << (w ? ", " : " ") << small();
      out_ << "\n";
      globals_.push_back(gi);
    }
    if (s_.f64_share > 0) {
      GlobalInfo gi{"fg", 16, true};
      out_ << "global fg: f64[16] = " << (1 + u(9)) << ".5, " << (1 + u(9)) << ".25\n";
      globals_.push_back(gi);
    }
    for (int k = 0; k < nf; ++k) {
      Sig sig;
      sig.name = k == nf - 1 ? "main" : "f" + std::to_string(k);
      if (k != nf - 1) {
        int np = static_cast<int>(u(4));
        for (int i = 0; i < np; ++i) {
          if (chance(s_.f64_share)) sig.params.push_back(ir::Type::F64);
          else if (chance(0.25)) sig.params.push_back(ir::Type::Ptr);
          else sig.params.push_back(ir::Type::I64);
        }
        if (chance(s_.f64_share)) sig.ret = ir::Type::F64;
      }
      sigs_.push_back(sig);
      function(k, k == nf - 1);
    }
    return out_.str();
  }

 private:
  std::uint64_t u(std::uint64_t n) { return n == 0 ? 0 : rng_() % n; }
  bool chance(double p) { return static_cast<double>(rng_() >> 11) * 0x1.0p-53 < p; }
  std::int64_t small() { return static_cast<std::int64_t>(u(100)); }

  std::string fresh() { return "v" + std::to_string(next_++); }

  void line(const std::string& s) { body_ << "  " << s << "\n"; }

  const std::string& pick(const std::vector<std::string>& pool) {
    std::size_t w = std::min<std::size_t>(pool.size(), static_cast<std::size_t>(std::max(1, s_.max_live_values)));
    return pool[pool.size() - 1 - u(w)];
  }

  std::string int_operand() {
    if (ints_.empty() || chance(0.25)) return std::to_string(constant());
    return "%" + pick(ints_);
  }

  std::int64_t constant() {
    switch (u(6)) {
      case 0: return 0;
      case 1: return 4096 * static_cast<std::int64_t>(1 + u(4095));
      case 2: return 4097 + static_cast<std::int64_t>(u(100000));
      case 3: return static_cast<std::int64_t>(0x10000ull * (1 + u(0xffff)));
      case 4: return static_cast<std::int64_t>(rng_() | 1);
      default: return 1 + small();
    }
  }

  std::string def_int(const std::string& rhs) {
    auto v = fresh();
    line("%" + v + " = " + rhs);
    ints_.push_back(v);
    return v;
  }

  // A word-aligned pointer into one of the function's memory objects.
  std::string element(const Ptr& p) {
    std::uint32_t words = p.extent / 8;
    std::uint32_t w = static_cast<std::uint32_t>(u(words));
    if (w == 0) return "%" + p.name;
    auto v = fresh();
    line("%" + v + " = add %" + p.name + ", " + std::to_string(8 * w));
    return "%" + v;
  }

  void arith() {
    static const char* ops[] = {"add", "sub", "mul"};
    const char* op = ops[u(3)];
    if (ints_.empty()) {
      def_int("const " + std::to_string(constant()));
      return;
    }
    if (chance(0.2)) {
      def_int("const " + std::to_string(constant()));
      return;
    }
    std::string a = "%" + pick(ints_);
    def_int(std::string(op) + " " + a + ", " + int_operand());
  }

  void memory() {
    if (ptrs_.empty()) return;
    const Ptr& p = ptrs_[u(ptrs_.size())];
    std::string addr = element(p);
    if (chance(0.5)) def_int("load " + addr);
    else line("store " + addr + ", " + int_operand());
  }

  void fop() {
    if (ptrs_.empty()) return;
    if (floats_.empty() || chance(0.3)) {
      const Ptr& p = fptr();
      auto v = fresh();
      line("%" + v + " = fload " + element(p));
      floats_.push_back(v);
      return;
    }
    if (chance(0.2)) {
      line("fstore " + element(fptr()) + ", %" + pick(floats_));
      return;
    }
    auto v = fresh();
    line("%" + v + " = " + (chance(0.5) ? "fadd" : "fmul") + " %" + pick(floats_) + ", %" + pick(floats_));
    floats_.push_back(v);
  }

  const Ptr& fptr() {
    for (const auto& p : ptrs_)
      if (p.name == "pfg") return p;
    return ptrs_[u(ptrs_.size())];
  }

  void emit() {
    if (!floats_.empty() && chance(s_.f64_share)) {
      line("emit %" + pick(floats_));
    } else if (!ints_.empty()) {
      line("emit %" + pick(ints_));
    }
  }

  // Callees reachable from function k without exceeding the depth limit.
  std::vector<int> callees() const {
    std::vector<int> out;
    for (int g = 0; g < fn_; ++g)
      if (sigs_[g].depth + 1 <= s_.max_call_depth) out.push_back(g);
    return out;
  }

  bool call() {
    auto cs = callees();
    if (cs.empty()) return false;
    int g = cs[u(cs.size())];
    const Sig& sig = sigs_[g];
    std::string args;
    for (std::size_t i = 0; i < sig.params.size(); ++i) {
      std::string a;
      switch (sig.params[i]) {
        case ir::Type::I64: a = int_operand(); break;
        case ir::Type::Ptr:
          if (ptrs_.empty()) return false;
          a = "%" + ptrs_[u(ptrs_.size())].name;
          break;
        case ir::Type::F64:
          if (floats_.empty()) return false;
          a = "%" + pick(floats_);
          break;
      }
      args += (i ? ", " : "") + a;
    }
    auto v = fresh();
    line("%" + v + " = call " + sig.name + "(" + args + ")");
    (sig.ret == ir::Type::F64 ? floats_ : ints_).push_back(v);
    depth_ = std::max(depth_, sig.depth + 1);
    return true;
  }

  // A call that probes may use: every parameter is satisfiable.
  void probe_call() {
    for (int tries = 0; tries < 8; ++tries)
      if (call()) return;
  }

  void section(int n) {
    double total = s_.p_arith + s_.p_memory + s_.p_call + s_.p_emit + s_.f64_share;
    for (int i = 0; i < n; ++i) {
      double r = static_cast<double>(rng_() >> 11) * 0x1.0p-53 * total;
      if ((r -= s_.p_arith) < 0) arith();
      else if ((r -= s_.p_memory) < 0) memory();
      else if ((r -= s_.p_call) < 0) call();
      else if ((r -= s_.p_emit) < 0) emit();
      else fop();
    }
  }

  // Snippets that make each unification rule observable at a callsite.
  void probes() {
    if (!s_.probes || callees().empty()) return;
    if (ints_.empty()) def_int("load %ps0");
    if (chance(0.35)) {
      // Address of a local live across a call.
      auto a = fresh();
      line("%" + a + " = addr-of-local s0");
      probe_call();
      line("store %" + a + ", " + int_operand());
    }
    if (chance(0.35)) {
      // Zero constant live across a call.
      auto z = fresh();
      line("%" + z + " = const 0");
      probe_call();
      def_int("add %" + pick(ints_) + ", %" + z);
    }
    if (chance(0.35)) {
      // Large constant used on both sides of a call.
      auto k = fresh();
      line("%" + k + " = const " + std::to_string(0x12345 + u(0x10000)));
      def_int("add %" + pick(ints_) + ", %" + k);
      probe_call();
      def_int("sub %" + pick(ints_) + ", %" + k);
    }
    if (chance(0.35)) {
      // Scaled index address live across a call.
      auto ix = fresh(), sc = fresh(), ea = fresh();
      line("%" + ix + " = load %pidx");
      line("%" + sc + " = mul %" + ix + ", 8");
      line("%" + ea + " = add %parr, %" + sc);
      probe_call();
      def_int("load %" + ea);
    }
    if (chance(0.35)) {
      // Two values across a call; the second one's register is reused
      // by a sum that also crosses the next call.
      auto f = fresh(), a = fresh(), w = fresh(), c = fresh();
      line("%" + f + " = load %ps0");
      line("%" + a + " = load %parr");
      probe_call();
      line("%" + w + " = add %" + f + ", 1");
      line("%" + c + " = add %" + a + ", %" + w);
      probe_call();
      line("emit %" + c);
    }
  }

  void function(int k, bool is_main) {
    fn_ = k;
    body_.str("");
    ints_.clear();
    floats_.clear();
    ptrs_.clear();
    next_ = 0;
    depth_ = 0;
    const Sig sig = sigs_[k];

    struct LocalDecl {
      std::string name;
      std::uint32_t size;
    };
    std::vector<LocalDecl> locals{{"s0", 8}, {"arr", 32}, {"idx", 8}};
    int extra = static_cast<int>(u(3));
    for (int i = 0; i < extra; ++i) locals.push_back({"l" + std::to_string(i), static_cast<std::uint32_t>(8 * (1 + u(3)))});
    bool loop = chance(s_.p_loop);
    if (loop) locals.push_back({"ctr", 8});

    std::ostringstream head;
    head << "\nfunc " << sig.name << "(";
    for (std::size_t i = 0; i < sig.params.size(); ++i)
      head << (i ? ", " : "") << "a" << i << ": " << ir::type_name(sig.params[i]);
    head << ") -> " << ir::type_name(sig.ret) << " {\n";
    for (const auto& l : locals) {
      head << "  local " << l.name << ": i64";
      if (l.size != 8) head << '[' << l.size << ']';
      head << "\n";
    }
    body_ << "entry:\n";

    for (std::size_t i = 0; i < sig.params.size(); ++i) {
      std::string n = "a" + std::to_string(i);
      switch (sig.params[i]) {
        case ir::Type::I64: ints_.push_back(n); break;
        case ir::Type::Ptr: ptrs_.push_back({n, 8}); break;
        case ir::Type::F64: floats_.push_back(n); break;
      }
    }
    // Every word of every local is written before anything can read it.
    for (const auto& l : locals) {
      std::string p = "p" + l.name;
      line("%" + p + " = addr-of-local " + l.name);
      for (std::uint32_t w = 0; w < l.size / 8; ++w) {
        std::int64_t init = l.name == "idx" ? static_cast<std::int64_t>(u(4)) : l.name == "ctr" ? 0 : small();
        if (w == 0) {
          line("store %" + p + ", " + std::to_string(init));
        } else {
          auto e = fresh();
          line("%" + e + " = add %" + p + ", " + std::to_string(8 * w));
          line("store %" + e + ", " + std::to_string(init));
        }
      }
      if (l.name != "idx" && l.name != "ctr") ptrs_.push_back({p, l.size});
    }
    for (const auto& g : globals_) {
      if (!g.f64 && !chance(0.5)) continue;
      std::string p = "p" + g.name;
      line("%" + p + " = addr-of-global " + g.name);
      ptrs_.push_back({p, g.size});
    }

    int ops = 1 + static_cast<int>(u(static_cast<std::uint64_t>(std::max(1, s_.max_block_ops))));
    section(ops / 2 + 1);
    if (loop) {
      int trip = 1 + static_cast<int>(u(static_cast<std::uint64_t>(std::max(1, s_.max_trip))));
      line("br loop");
      body_ << "loop:\n";
      section(ops / 2);
      probes();
      auto c = fresh(), c1 = fresh(), t = fresh();
      line("%" + c + " = load %pctr");
      line("%" + c1 + " = add %" + c + ", 1");
      line("store %pctr, %" + c1);
      line("%" + t + " = cmp lt %" + c1 + ", " + std::to_string(trip));
      line("br-cond %" + t + ", loop, done");
      body_ << "done:\n";
    } else {
      probes();
    }
    section(ops / 2);

    if (is_main) {
      if (ints_.empty()) def_int("load %ps0");
      line("emit %" + pick(ints_));
      line("ret 0");
    } else if (sig.ret == ir::Type::F64) {
      if (floats_.empty()) {
        auto v = fresh();
        line("%" + v + " = fload %" + fptr().name);
        floats_.push_back(v);
      }
      line("ret %" + pick(floats_));
    } else {
      if (ints_.empty()) def_int("load %ps0");
      line("ret %" + pick(ints_));
    }
    out_ << head.str() << body_.str() << "}\n";
    sigs_[k].depth = depth_;
  }

  const CorpusSpec& s_;
  std::mt19937_64 rng_;
  std::ostringstream out_, body_;
  std::vector<GlobalInfo> globals_;
  std::vector<Sig> sigs_;
  std::vector<std::string> ints_, floats_;
  std::vector<Ptr> ptrs_;
  int next_ = 0;
  int fn_ = 0;
  int depth_ = 0;
};

}  // namespace

std::string generate_program_text(const CorpusSpec& spec, std::size_t index) { return Gen(spec, index).run(); }

ir::Program generate_program(const CorpusSpec& spec, std::size_t index) {
  std::string text = generate_program_text(spec, index);
  auto r = ir::parse_program(text);
  if (!r.ok()) throw std::logic_error("generated program does not parse: " + ir::to_string(r.diagnostics.at(0)));
  auto d = ir::validate(*r.program);
  if (!d.empty()) throw std::logic_error("generated program is invalid: " + ir::to_string(d.at(0)) + "\n" + text);
  return *r.program;
}

std::vector<ir::Program> generate_corpus(const CorpusSpec& spec) {
  std::vector<ir::Program> out;
  out.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) out.push_back(generate_program(spec, i));
  return out;
}

}  // namespace unistack::corpus
