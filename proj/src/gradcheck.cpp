#include "ensdown/gradcheck.hpp"

#include "ensdown/error.hpp"

#include <algorithm>
#include <cmath>

namespace ensdown {

GradCheckResult finite_diff_check(const std::function<double(std::span<const double>)>& f,
                                  std::span<const double> params, std::span<const double> analytic, double epsilon,
                                  std::span<const std::size_t> coords, double abs_floor) {
    if (!(epsilon > 0.0)) throw ValueError("finite_diff_check: epsilon must be positive");
    if (analytic.size() != params.size()) throw ShapeError("finite_diff_check: gradient and parameter sizes differ");

    std::vector<double> x(params.begin(), params.end());
    GradCheckResult result;
    auto check = [&](std::size_t i) {
        const double saved = x[i];
        x[i] = saved + epsilon;
        const double up = f(x);
        x[i] = saved - epsilon;
        const double down = f(x);
        x[i] = saved;
        const double numeric = (up - down) / (2.0 * epsilon);
        const double a = analytic[i];
        const double denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
        const double rel = std::abs(a - numeric) / denom;
        if (rel > result.max_rel_error || result.checked == 0) {
            result.max_rel_error = rel;
            result.worst_index = i;
            result.analytic = a;
            result.numeric = numeric;
        }
        ++result.checked;
    };
    if (coords.empty()) {
        for (std::size_t i = 0; i < x.size(); ++i) check(i);
    } else {
        for (std::size_t i : coords) {
            if (i >= x.size()) throw ValueError("finite_diff_check: coordinate out of range");
            check(i);
        }
    }
    return result;
}

} // namespace ensdown
