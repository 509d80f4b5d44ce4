#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace ensdown {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t checked = 0;
};

/// Compares `analytic` against central differences of `f` around `params`.
///
/// Relative error per coordinate is |a - n| / max(|a|, |n|, abs_floor); the
/// floor keeps coordinates whose true gradient is zero from dividing rounding
/// noise by zero. When `coords` is empty every coordinate is checked.
GradCheckResult finite_diff_check(const std::function<double(std::span<const double>)>& f,
                                  std::span<const double> params, std::span<const double> analytic, double epsilon,
                                  std::span<const std::size_t> coords = {}, double abs_floor = 1e-6);

} // namespace ensdown
