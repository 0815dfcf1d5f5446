#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dsran/tape.hpp"

namespace dsran {

struct GradCheckGroup {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  double step = 0.0;
  double tol = 0.0;
  std::vector<GradCheckGroup> groups;
};

// A builder reconstructs the scalar loss from the current host parameter
// values; the binder passed in is the one through which parameters must be
// bound so their analytic gradients can be read back.
using LossBuilder = std::function<Value(Tape&, Binder&)>;

// Compares reverse-mode gradients against central finite differences,
// entry by entry, for every named parameter matrix. The error reported is
// |a - b| / max(1, |a|, |b|), so small gradients are compared absolutely.
GradCheckReport gradcheck(const LossBuilder& build_loss,
                          const std::vector<std::pair<std::string, Mat*>>& params,
                          double step = 1e-6, double tol = 1e-4,
                          bool inject_bug = false);

}  // namespace dsran
