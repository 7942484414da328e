#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pixsplat {

// Central finite differences against the analytic backward passes on small
// seeded scenes. Scalar objectives are random linear functionals of the
// module output unless the module is a loss.
struct GradCheckOptions {
  double rel_tol = 1e-4;
  double end_to_end_rel_tol = 1e-3;  // module "pipeline"
  double abs_floor = 1e-7;
  double step = 1e-6;
  std::uint64_t seed = 0;
  int samples = 24;  // coordinates checked per parameter tensor
};

struct GradCheckEntry {
  std::string name;
  double analytic = 0.0;
  double numeric = 0.0;
  double error = 0.0;      // |analytic - numeric|
  double tolerance = 0.0;  // max(rel_tol * max(|a|, |n|), abs_floor)
  bool pass = false;
};

struct GradCheckReport {
  std::string module;
  std::vector<GradCheckEntry> entries;

  std::size_t failures() const;
  bool passed() const { return failures() == 0; }
};

// geometry, raster, reconstruct, tonemap, loss, pipeline.
const std::vector<std::string>& gradcheck_modules();

// Throws InvalidArgument for an unknown module name.
GradCheckReport gradcheck_module(const std::string& module, const GradCheckOptions& options = {});

}  // namespace pixsplat
