#pragma once

// Central-difference verification harness. Owns nothing: callers supply a
// deterministic scalar function of a flat parameter vector plus the analytic
// gradient route to check against.

#include <cmath>
#include <functional>
#include <vector>

namespace msd {

struct GradCheckProblem {
    std::vector<double> params;
    // Scalar objective value at the given parameters.
    std::function<double(const std::vector<double>&)> eval;
    // Analytic (reverse-mode) gradient at the given parameters.
    std::function<std::vector<double>(const std::vector<double>&)> grad;
};

struct FiniteDiffReport {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double worst_numeric = 0.0;
    double worst_analytic = 0.0;
};

// Compares (f(p + h e_i) - f(p - h e_i)) / 2h against the analytic gradient
// for every coordinate. Relative error uses a |.| + 1e-8 denominator.
inline FiniteDiffReport finite_diff_check(const GradCheckProblem& problem, double h = 1e-5) {
    FiniteDiffReport report;
    const std::vector<double> analytic = problem.grad(problem.params);
    std::vector<double> p = problem.params;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double saved = p[i];
        p[i] = saved + h;
        const double f_plus = problem.eval(p);
        p[i] = saved - h;
        const double f_minus = problem.eval(p);
        p[i] = saved;
        const double numeric = (f_plus - f_minus) / (2.0 * h);
        const double denom = std::max(std::abs(numeric), std::abs(analytic[i])) + 1e-8;
        const double rel = std::abs(numeric - analytic[i]) / denom;
        if (rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.worst_numeric = numeric;
            report.worst_analytic = analytic[i];
        }
    }
    return report;
}

}  // namespace msd
