#include "ensdown/evaluation.hpp"

#include "ensdown/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace ensdown {

std::vector<double> spatial_weights(const GridField& grid, SpatialWeighting weighting) {
    const std::size_t h = grid.lat.size(), w = grid.lon.size();
    std::vector<double> weights(h * w, 1.0);
    if (weighting == SpatialWeighting::cos_lat) {
        for (std::size_t i = 0; i < h; ++i) {
            const double c = std::cos(grid.lat[i] * std::numbers::pi / 180.0);
            for (std::size_t j = 0; j < w; ++j) weights[i * w + j] = c;
        }
    }
    double total = 0.0;
    for (double v : weights) total += v;
    for (double& v : weights) v /= total;
    return weights;
}

double spatial_mean(std::span<const double> values, std::span<const double> weights) {
    if (values.empty()) throw ValueError("spatial_mean: empty map");
    double total = 0.0;
    if (weights.empty()) {
        for (double v : values) total += v;
        return total / static_cast<double>(values.size());
    }
    if (weights.size() != values.size()) throw ShapeError("spatial_mean: weights do not match map size");
    for (std::size_t i = 0; i < values.size(); ++i) total += values[i] * weights[i];
    return total;
}

namespace {

void require_tg(const char* op, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": expected equal [T,G] arrays, got " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
    }
    if (a.dim(0) == 0) throw ShapeError(std::string(op) + ": no time steps");
}

} // namespace

MetricMap rmse(const Tensor& mu, const Tensor& y, std::span<const double> weights) {
    require_tg("rmse", mu, y);
    const std::size_t t_count = mu.dim(0), g_count = mu.dim(1);
    MetricMap out;
    out.per_gridpoint.assign(g_count, 0.0);
    for (std::size_t t = 0; t < t_count; ++t) {
        for (std::size_t g = 0; g < g_count; ++g) {
            const double e = mu[t * g_count + g] - y[t * g_count + g];
            out.per_gridpoint[g] += e * e;
        }
    }
    for (double& v : out.per_gridpoint) v = std::sqrt(v / static_cast<double>(t_count));
    out.spatial_mean = spatial_mean(out.per_gridpoint, weights);
    return out;
}

MetricMap coverage_ratio(const Tensor& lower, const Tensor& upper, const Tensor& y, std::span<const double> weights) {
    require_tg("coverage_ratio", lower, y);
    require_tg("coverage_ratio", upper, y);
    const std::size_t t_count = y.dim(0), g_count = y.dim(1);
    MetricMap out;
    std::vector<std::size_t> inside(g_count, 0);
    for (std::size_t t = 0; t < t_count; ++t) {
        for (std::size_t g = 0; g < g_count; ++g) {
            const std::size_t i = t * g_count + g;
            if (lower[i] > upper[i]) throw ValueError("coverage_ratio: lower bound above upper bound");
            if (lower[i] <= y[i] && y[i] <= upper[i]) ++inside[g];
        }
    }
    out.per_gridpoint.resize(g_count);
    for (std::size_t g = 0; g < g_count; ++g) {
        out.per_gridpoint[g] = static_cast<double>(inside[g]) / static_cast<double>(t_count);
    }
    out.spatial_mean = spatial_mean(out.per_gridpoint, weights);
    return out;
}

GridField filter_season(const GridField& field, const std::set<int>& months) {
    for (int m : months) days_in_month(m);
    std::vector<std::size_t> keep;
    for (std::size_t t = 0; t < field.time.size(); ++t) {
        if (months.count(month_of(field.time[t]))) keep.push_back(t);
    }
    if (keep.empty()) throw ValueError("season filter " + season_label(months) + " leaves no time steps");
    if (keep.size() == field.time.size()) return field;
    return field.take(keep);
}

std::vector<double> climatology(const GridField& field, const PeriodSpec& period) {
    const GridField sel = select_period(field, period);
    const std::size_t cells = sel.step_size();
    std::vector<double> mean(cells, 0.0);
    for (std::size_t t = 0; t < sel.steps(); ++t) {
        for (std::size_t c = 0; c < cells; ++c) mean[c] += sel.values[t * cells + c];
    }
    for (double& v : mean) v /= static_cast<double>(sel.steps());
    return mean;
}

std::string season_label(const std::set<int>& months) {
    if (months.empty() || months.size() == 12) return "all";
    if (months == kSummerMonths) return "summer";
    std::string s = "months:";
    bool first = true;
    for (int m : months) {
        if (!first) s += ",";
        s += std::to_string(m);
        first = false;
    }
    return s;
}

std::set<int> parse_season(const std::string& text) {
    if (text == "all") {
        std::set<int> all;
        for (int m = 1; m <= 12; ++m) all.insert(m);
        return all;
    }
    if (text == "summer") return kSummerMonths;
    if (text == "winter") return {12, 1, 2};
    std::string list = text.rfind("months:", 0) == 0 ? text.substr(7) : text;
    std::set<int> months;
    std::stringstream ss(list);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            const int m = std::stoi(item);
            days_in_month(m);
            months.insert(m);
        } catch (const std::logic_error&) {
            throw ValueError("malformed season '" + text + "'");
        }
    }
    if (months.empty()) throw ValueError("malformed season '" + text + "'");
    return months;
}

EvalReport evaluate_prediction(const Tensor& mu, const Tensor& sigma2, const Tensor& y, const std::string& period,
                               const std::string& season, std::size_t members, double level,
                               std::span<const double> weights) {
    const auto [lower, upper] = predictive_interval(mu, sigma2, level);
    EvalReport r;
    r.period = period;
    r.season = season;
    r.members = members;
    r.level = level;
    r.rmse = rmse(mu, y, weights);
    r.coverage = coverage_ratio(lower, upper, y, weights);
    return r;
}

const EvalReport& SweepResult::at(const std::string& period, std::size_t members) const {
    for (const auto& r : reports) {
        if (r.period == period && r.members == members) return r;
    }
    throw ValueError("no sweep entry for period " + period + " and M=" + std::to_string(members));
}

bool SweepResult::convexity_holds(double tolerance) const {
    for (double gap : convexity_gap) {
        if (gap > tolerance) return false;
    }
    return true;
}

SweepResult sweep_ensemble_size(const Ensemble& ensemble, const GridField& predictors, const GridField& predictand,
                                std::span<const PeriodSpec> periods, const SweepOptions& options) {
    if (ensemble.members.empty()) throw ValueError("sweep_ensemble_size: empty ensemble");
    const auto weights = spatial_weights(predictand, options.weighting);
    const std::string season = season_label(options.season);
    SweepResult result;
    for (const PeriodSpec& period : periods) {
        GridField x = select_period(predictors, period);
        GridField y = select_period(predictand, period);
        if (!options.season.empty()) {
            x = filter_season(x, options.season);
            y = filter_season(y, options.season);
        }
        auto [xa, ya] = align_time(x, y);
        const Tensor target = ya.values.reshaped(Shape{ya.steps(), ya.step_size()});

        std::vector<Prediction> preds;
        std::vector<MetricMap> member_rmse;
        for (std::size_t m = 0; m < ensemble.size(); ++m) {
            preds.push_back(predict_member(ensemble, m, xa));
            member_rmse.push_back(rmse(preds.back().mu, target, weights));
        }
        for (std::size_t k = 1; k <= ensemble.size(); ++k) {
            const EnsemblePrediction agg = aggregate(std::span<const Prediction>(preds.data(), k));
            result.reports.push_back(evaluate_prediction(agg.mu_star, agg.sigma2_star, target, period.label(), season, k,
                                                         options.level, weights));
            double gap = -std::numeric_limits<double>::infinity();
            const auto& ens_rmse = result.reports.back().rmse.per_gridpoint;
            for (std::size_t g = 0; g < ens_rmse.size(); ++g) {
                double mean_member = 0.0;
                for (std::size_t m = 0; m < k; ++m) mean_member += member_rmse[m].per_gridpoint[g];
                mean_member /= static_cast<double>(k);
                gap = std::max(gap, ens_rmse[g] - mean_member);
            }
            result.convexity_gap.push_back(gap);
        }
        result.member_rmse.push_back(std::move(member_rmse));
    }
    return result;
}

CoverageMapReport coverage_map_report(const EvalReport& single, const EvalReport& ensemble) {
    if (single.period != ensemble.period || single.season != ensemble.season) {
        throw ValueError("coverage_map_report: reports cover different periods or seasons");
    }
    if (single.coverage.per_gridpoint.size() != ensemble.coverage.per_gridpoint.size()) {
        throw ShapeError("coverage_map_report: reports are on different grids");
    }
    CoverageMapReport r;
    r.period = single.period;
    r.season = single.season;
    r.members = ensemble.members;
    r.single = single.coverage.per_gridpoint;
    r.ensemble = ensemble.coverage.per_gridpoint;
    r.difference.resize(r.single.size());
    for (std::size_t g = 0; g < r.single.size(); ++g) r.difference[g] = r.ensemble[g] - r.single[g];
    r.single_mean = spatial_mean(r.single);
    r.ensemble_mean = spatial_mean(r.ensemble);
    r.difference_mean = spatial_mean(r.difference);
    return r;
}

double masked_mean(std::span<const double> values, std::span<const double> mask) {
    if (values.size() != mask.size()) throw ShapeError("masked_mean: mask does not match map size");
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (mask[i] != 0.0) {
            total += values[i];
            ++n;
        }
    }
    if (n == 0) throw ValueError("masked_mean: empty mask");
    return total / static_cast<double>(n);
}

namespace {

void append_rows(std::string& out, const std::string& prefix, const std::string& metric,
                 std::span<const double> values, double mean, const GridField& grid) {
    const std::size_t w = grid.lon.size();
    if (values.size() != grid.lat.size() * w) throw ShapeError("report map does not match the grid");
    for (std::size_t g = 0; g < values.size(); ++g) {
        out += prefix + std::to_string(g) + "," + format_double(grid.lat[g / w]) + "," + format_double(grid.lon[g % w]) +
               "," + metric + "," + format_double(values[g]) + "\n";
    }
    out += prefix + "MEAN,,," + metric + "," + format_double(mean) + "\n";
}

} // namespace

std::string reports_csv(std::span<const EvalReport> reports, const GridField& grid) {
    std::string out = kReportCsvHeader;
    for (const auto& r : reports) {
        const std::string prefix = r.period + "," + r.season + "," + std::to_string(r.members) + ",";
        append_rows(out, prefix, "rmse", r.rmse.per_gridpoint, r.rmse.spatial_mean, grid);
        append_rows(out, prefix, "coverage", r.coverage.per_gridpoint, r.coverage.spatial_mean, grid);
    }
    return out;
}

std::string coverage_maps_csv(std::span<const CoverageMapReport> maps, const GridField& grid) {
    std::string out = kReportCsvHeader;
    for (const auto& m : maps) {
        const std::string prefix = m.period + "," + m.season + "," + std::to_string(m.members) + ",";
        append_rows(out, prefix, "coverage_single", m.single, m.single_mean, grid);
        append_rows(out, prefix, "coverage_ensemble", m.ensemble, m.ensemble_mean, grid);
        append_rows(out, prefix, "coverage_difference", m.difference, m.difference_mean, grid);
    }
    return out;
}

nlohmann::json reports_summary(std::span<const EvalReport> reports) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : reports) {
        rows.push_back({{"period", r.period},
                        {"season", r.season},
                        {"M", r.members},
                        {"level", r.level},
                        {"rmse_mean", r.rmse.spatial_mean},
                        {"coverage_mean", r.coverage.spatial_mean}});
    }
    return rows;
}

} // namespace ensdown
