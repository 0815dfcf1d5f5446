#include "dsran/gradcheck.hpp"

#include <cmath>

namespace dsran {

namespace {

double eval_loss(const LossBuilder& build_loss, bool inject_bug) {
  Tape tape;
  tape.inject_grad_bug(inject_bug);
  Binder bind(tape);
  Value loss = build_loss(tape, bind);
  const double v = loss.scalar();
  if (!std::isfinite(v)) throw_domain("NonFinite", "gradcheck: loss is not finite");
  return v;
}

}  // namespace

GradCheckReport gradcheck(const LossBuilder& build_loss,
                          const std::vector<std::pair<std::string, Mat*>>& params,
                          double step, double tol, bool inject_bug) {
  GradCheckReport report;
  report.step = step;
  report.tol = tol;

  // One reverse-mode pass captures the analytic gradient of every parameter.
  std::vector<Mat> analytic;
  analytic.reserve(params.size());
  {
    Tape tape;
    tape.inject_grad_bug(inject_bug);
    Binder bind(tape);
    Value loss = build_loss(tape, bind);
    if (!std::isfinite(loss.scalar())) throw_domain("NonFinite", "gradcheck: loss is not finite");
    tape.backward(loss);
    for (const auto& [name, mat] : params) {
      (void)name;
      analytic.push_back(bind.grad_of(*mat));
    }
  }

  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& [name, mat] = params[p];
    GradCheckGroup group{name, 0.0};
    for (Index i = 0; i < mat->rows(); ++i) {
      for (Index j = 0; j < mat->cols(); ++j) {
        const double saved = (*mat)(i, j);
        (*mat)(i, j) = saved + step;
        const double f_plus = eval_loss(build_loss, inject_bug);
        (*mat)(i, j) = saved - step;
        const double f_minus = eval_loss(build_loss, inject_bug);
        (*mat)(i, j) = saved;
        const double fd = (f_plus - f_minus) / (2.0 * step);
        const double an = analytic[p](i, j);
        const double denom = std::max({1.0, std::abs(fd), std::abs(an)});
        group.max_rel_err = std::max(group.max_rel_err, std::abs(fd - an) / denom);
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, group.max_rel_err);
    report.groups.push_back(std::move(group));
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace dsran
