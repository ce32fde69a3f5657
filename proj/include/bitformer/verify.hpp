// SPDX-License-Identifier: Apache-2.0
//
// Self-contained property suites: packed kernels against naive oracles,
// the ternary-product identity, surrogate-gradient finite differences,
// exact recovery of the score residual, and packed vs simulated forwards.
// No corpus, checkpoint or network access required.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bitformer {

struct CheckResult {
  std::string suite;
  std::string property;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

struct VerifyOptions {
  std::uint64_t seed = 1;
  std::vector<std::string> only;  // empty → all suites
};

/// "kernel", "ternary", "gradients", "recovery", "train-eval".
const std::vector<std::string>& verify_suite_names();
/// Throws ConfigError for an unknown suite name in `only`.
std::vector<CheckResult> run_verify(const VerifyOptions& opts);
std::string format_results(const std::vector<CheckResult>& results);

CheckResult verify_kernel(std::uint64_t seed, std::size_t instances = 500, std::size_t max_dim = 130);
CheckResult verify_ternary(std::uint64_t seed, std::size_t instances = 500, std::size_t max_dim = 130);
/// One result per binarizer / primitive, each over `points` random instances.
std::vector<CheckResult> verify_gradients(std::uint64_t seed, std::size_t points = 10, double tolerance = 1e-4);
CheckResult verify_recovery(std::uint64_t seed, std::size_t inputs = 50, std::size_t hidden = 8,
                            double tolerance = 1e-8);
CheckResult verify_train_eval(std::uint64_t seed, std::size_t inputs = 20, double tolerance = 1e-8);

}  // namespace bitformer
