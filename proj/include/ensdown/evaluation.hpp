#pragma once

#include "ensdown/ensemble.hpp"
#include "ensdown/grid.hpp"

#include <json.hpp>

#include <set>
#include <span>
#include <string>
#include <vector>

namespace ensdown {

/// A per-gridpoint metric and its spatial mean.
struct MetricMap {
    std::vector<double> per_gridpoint;
    double spatial_mean = 0.0;
};

enum class SpatialWeighting { uniform, cos_lat };

/// Normalized per-gridpoint weights (sum 1) for a [.., H, W] field.
std::vector<double> spatial_weights(const GridField& grid, SpatialWeighting weighting);

/// Weighted mean; uniform when `weights` is empty.
double spatial_mean(std::span<const double> values, std::span<const double> weights = {});

/// Root mean square error over time for each column of [T, G] arrays.
MetricMap rmse(const Tensor& mu, const Tensor& y, std::span<const double> weights = {});

/// Fraction of time steps with lower <= y <= upper, per gridpoint.
MetricMap coverage_ratio(const Tensor& lower, const Tensor& upper, const Tensor& y,
                         std::span<const double> weights = {});

/// Keeps time steps whose month is in `months`, in order. Throws ValueError
/// when nothing is left.
GridField filter_season(const GridField& field, const std::set<int>& months);

/// Time mean per cell over `period`, as a flat [C*H*W] vector.
std::vector<double> climatology(const GridField& field, const PeriodSpec& period);

/// "all", "summer" or "months:1,2,...".
std::string season_label(const std::set<int>& months);
std::set<int> parse_season(const std::string& text);

struct EvalReport {
    std::string period;
    std::string season;
    std::size_t members = 1;
    double level = 0.95;
    MetricMap rmse;
    MetricMap coverage;
};

/// RMSE and interval coverage of one Gaussian prediction against targets y [T, G].
EvalReport evaluate_prediction(const Tensor& mu, const Tensor& sigma2, const Tensor& y, const std::string& period,
                               const std::string& season, std::size_t members, double level,
                               std::span<const double> weights = {});

struct SweepOptions {
    std::set<int> season = kSummerMonths;
    double level = 0.95;
    SpatialWeighting weighting = SpatialWeighting::uniform;
};

struct SweepResult {
    /// One report per (period, M), periods outermost, M = 1..|members|.
    std::vector<EvalReport> reports;
    /// Per (period, M): max over gridpoints of rmse(mu*) - mean_m rmse(mu_m).
    std::vector<double> convexity_gap;
    /// Per period, the individual member RMSE maps.
    std::vector<std::vector<MetricMap>> member_rmse;

    const EvalReport& at(const std::string& period, std::size_t members) const;
    /// True when every convexity gap is <= tolerance.
    bool convexity_holds(double tolerance = 1e-12) const;
};

/// Evaluates the aggregate of the first M members for every M and period.
SweepResult sweep_ensemble_size(const Ensemble& ensemble, const GridField& predictors, const GridField& predictand,
                                std::span<const PeriodSpec> periods, const SweepOptions& options = {});

struct CoverageMapReport {
    std::string period;
    std::string season;
    std::size_t members = 0;
    std::vector<double> single;
    std::vector<double> ensemble;
    std::vector<double> difference; // ensemble - single
    double single_mean = 0.0;
    double ensemble_mean = 0.0;
    double difference_mean = 0.0;
};

CoverageMapReport coverage_map_report(const EvalReport& single, const EvalReport& ensemble);

/// Mean of `values` over cells where `mask` is nonzero.
double masked_mean(std::span<const double> values, std::span<const double> mask);

inline constexpr const char* kReportCsvHeader = "period,season,M,gridpoint_id,lat,lon,metric,value\n";

/// Tidy long CSV: rows for every gridpoint and a MEAN row per metric.
/// `grid` supplies lat/lon of the predictand gridpoints.
std::string reports_csv(std::span<const EvalReport> reports, const GridField& grid);
std::string coverage_maps_csv(std::span<const CoverageMapReport> maps, const GridField& grid);

nlohmann::json reports_summary(std::span<const EvalReport> reports);

} // namespace ensdown
