#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "mixskd/graph.hpp"
#include "mixskd/ops.hpp"

namespace mixskd {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::int64_t worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    bool pass = false;
};

// Central-difference check of a scalar-valued graph builder against the
// tape's analytic gradient. The builder is re-run per perturbed coordinate,
// so it must be deterministic. Paths severed by detach() are constants of
// the declared function: the check compares gradients of the declared
// differentiable paths only, which means a builder that routes x through
// detach() will (correctly) disagree with the numeric derivative of its
// value; callers freeze such inputs instead of checking through them.
template <typename Real>
GradCheckReport finite_diff_gradcheck(const std::function<Var(Graph<Real>&, Var)>& build, const Tensor<Real>& x0,
                                      Real eps, Real rel_tol) {
    auto eval = [&](const Tensor<Real>& x) {
        Graph<Real> g;
        Var xv = g.leaf(x, false);
        Var loss = build(g, xv);
        const Tensor<Real>& lv = g.value(loss);
        if (lv.numel() != 1) throw InvalidShapeError("gradcheck: builder must produce a scalar");
        const double v = static_cast<double>(lv.data[0]);
        if (std::isnan(v)) throw EvaluationError("gradcheck: function evaluated to NaN");
        return v;
    };

    Graph<Real> g;
    Var xv = g.leaf(x0, true);
    Var loss = build(g, xv);
    if (g.value(loss).numel() != 1) throw InvalidShapeError("gradcheck: builder must produce a scalar");
    if (std::isnan(static_cast<double>(g.value(loss).data[0])))
        throw EvaluationError("gradcheck: function evaluated to NaN");
    g.backward(loss);
    const Tensor<Real> analytic = g.grad(xv);

    GradCheckReport report;
    Tensor<Real> x = x0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const Real keep = x[i];
        x[i] = keep + eps;
        const double fp = eval(x);
        x[i] = keep - eps;
        const double fm = eval(x);
        x[i] = keep;
        const double numeric = (fp - fm) / (2.0 * static_cast<double>(eps));
        const double a = static_cast<double>(analytic[i]);
        const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
        const double rel = std::abs(a - numeric) / denom;
        if (rel > report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report.pass = report.max_rel_err <= static_cast<double>(rel_tol);
    return report;
}

}  // namespace mixskd
