#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "bct/config.hpp"
#include "bct/layer.hpp"

namespace bct {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;  // measured value against its threshold
};

struct VerifyReport {
  std::vector<CheckResult> checks;
  bool all_passed() const;
};

// Runs the invariant suite on random instances drawn from `seed`:
// softmax normalization, sequential == parallel writes (32- and 64-bit),
// write-order invariance, layer causality, bounded cache bytes, analytic vs
// finite-difference gradients, and baseline incremental == one-shot.
VerifyReport run_invariant_suite(std::uint64_t seed);

void print_verify_table(std::ostream& os, const VerifyReport& report);

// Step-by-step rendering of the write path on a human-sized layer.
struct DemoTranscript {
  std::string text;
  CacheState<double> final_state;
};

// Refuses (ConfigError) capacity > 8 or any width > 4.
DemoTranscript run_demo(const ModelConfig& config, const Matrix<double>& xs,
                        const LayerParams<double>& params, CacheState<double> initial);

}  // namespace bct
