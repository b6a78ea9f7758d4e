// Seeded random IR programs for the property suites.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unistack/ir.hpp"

namespace unistack::corpus {

struct CorpusSpec {
  std::uint64_t seed = 1;
  std::size_t count = 100;
  int max_functions = 4;    // including main
  int max_call_depth = 3;   // longest static call chain below main
  int max_live_values = 8;  // operand window over recently defined values
  int max_block_ops = 10;   // random operations per straight-line section
  int max_trip = 3;         // loop trip counts are 1..max_trip
  double p_arith = 0.40;
  double p_memory = 0.25;
  double p_call = 0.15;
  double p_emit = 0.10;
  double p_loop = 0.6;      // per function
  double f64_share = 0.10;  // share of operations on doubles
  bool probes = true;       // snippets exercising each unification rule

  /// One straight-line main: no calls, loops, doubles or probes.
  static CorpusSpec minimal(std::uint64_t seed);
};

/// Deterministic in the spec: the same spec yields byte-identical text.
std::string generate_program_text(const CorpusSpec& spec, std::size_t index);

/// Every program parses and validates; throws std::logic_error otherwise.
ir::Program generate_program(const CorpusSpec& spec, std::size_t index);
std::vector<ir::Program> generate_corpus(const CorpusSpec& spec);

/// Loops are bounded by constant trip counts and calls form a DAG, so
/// every program halts; this bounds the reference interpreter's steps.
inline constexpr std::uint64_t kCorpusFuel = 5'000'000;

}  // namespace unistack::corpus
