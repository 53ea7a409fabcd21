#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "condist/numerics.hpp"

namespace condist {

struct GradCertOptions {
  int instances = 20;
  int batch = 2;
  int height = 16;
  int width = 16;
  int num_classes = 4;
  double eps = 1e-5;
  double tol = 1e-4;
  std::uint64_t seed = 0x5eed;
  // Mutation hook: analytic gradients are scaled by (1 + perturbation)
  // before comparison. Zero for a real certification.
  double perturbation = 0.0;
};

struct GradCertCase {
  std::string suite;
  int instance = 0;
  GradCheckReport report;
};

struct GradCertSuite {
  std::string name;
  std::vector<GradCertCase> cases;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
  bool passed = true;
};

struct GradCertResult {
  std::vector<GradCertSuite> suites;
  bool passed() const;
};

// Suites: supervised, condist under all four grouping/filtering toggles,
// total, and the model objective with proximal term.
GradCertResult run_gradcert(const GradCertOptions& options = {});

}  // namespace condist
