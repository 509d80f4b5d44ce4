#include "support.hpp"

#include "ensdown/ensemble.hpp"
#include "ensdown/error.hpp"
#include "ensdown/evaluation.hpp"
#include "ensdown/synth.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace ensdown;
using testing::make_field;
using testing::random_tensor;

TEST_CASE("rmse") {
    const Tensor y = random_tensor(Shape{5, 3}, 1);
    SUBCASE("perfect prediction") {
        const MetricMap r = rmse(y, y);
        for (double v : r.per_gridpoint) CHECK(v == 0.0);
        CHECK(r.spatial_mean == 0.0);
    }
    SUBCASE("constant error") {
        Tensor mu = y;
        for (auto& v : mu.data()) v += 2.0;
        const MetricMap r = rmse(mu, y);
        for (double v : r.per_gridpoint) CHECK(v == doctest::Approx(2.0).epsilon(1e-14));
        CHECK(r.spatial_mean == doctest::Approx(2.0).epsilon(1e-14));
    }
    SUBCASE("hand example") {
        const MetricMap r = rmse(Tensor::from(Shape{3, 1}, {0, 3, 4}), Tensor(Shape{3, 1}, 0.0));
        CHECK(r.per_gridpoint[0] == doctest::Approx(std::sqrt(25.0 / 3.0)).epsilon(1e-15));
        CHECK(r.per_gridpoint[0] == doctest::Approx(2.8868).epsilon(1e-4));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(rmse(Tensor(Shape{2, 3}), Tensor(Shape{3, 2})), ShapeError);
        CHECK_THROWS_AS(rmse(Tensor(Shape{0, 3}), Tensor(Shape{0, 3})), ShapeError);
    }
}

TEST_CASE("coverage_ratio") {
    const Tensor mu = random_tensor(Shape{20, 4}, 2);
    const Tensor s2(Shape{20, 4}, 1.0);
    auto [lo, hi] = predictive_interval(mu, s2, 0.95);
    SUBCASE("targets at the mean") {
        const MetricMap c = coverage_ratio(lo, hi, mu);
        for (double v : c.per_gridpoint) CHECK(v == 1.0);
    }
    SUBCASE("targets outside") {
        Tensor y = mu;
        for (auto& v : y.data()) v += 10.0;
        CHECK(coverage_ratio(lo, hi, y).spatial_mean == 0.0);
    }
    SUBCASE("boundary counts as inside") {
        CHECK(coverage_ratio(lo, hi, hi).spatial_mean == 1.0);
        CHECK(coverage_ratio(lo, hi, lo).spatial_mean == 1.0);
    }
    SUBCASE("calibrated Gaussian targets") {
        std::mt19937_64 rng(3);
        std::normal_distribution<double> nd;
        const std::size_t T = 10000;
        Tensor m(Shape{T, 3}), v(Shape{T, 3}), y(Shape{T, 3});
        for (std::size_t i = 0; i < m.size(); ++i) {
            m[i] = 5.0 * nd(rng);
            v[i] = 0.5 + std::abs(nd(rng));
            y[i] = m[i] + std::sqrt(v[i]) * nd(rng);
        }
        auto [l, u] = predictive_interval(m, v, 0.95);
        const MetricMap c = coverage_ratio(l, u, y);
        for (double g : c.per_gridpoint) CHECK(std::abs(g - 0.95) < 0.01);
    }
    SUBCASE("monotone in interval width") {
        std::mt19937_64 rng(4);
        std::normal_distribution<double> nd;
        Tensor y(Shape{20, 4});
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = mu[i] + 1.5 * nd(rng);
        MetricMap prev = coverage_ratio(lo, hi, y);
        for (double scale : {1.2, 1.5, 2.0, 4.0}) {
            Tensor l2 = lo, u2 = hi;
            for (std::size_t i = 0; i < l2.size(); ++i) {
                l2[i] = mu[i] - scale * (mu[i] - lo[i]);
                u2[i] = mu[i] + scale * (hi[i] - mu[i]);
            }
            const MetricMap c = coverage_ratio(l2, u2, y);
            for (std::size_t g = 0; g < 4; ++g) CHECK(c.per_gridpoint[g] >= prev.per_gridpoint[g]);
            prev = c;
        }
    }
    SUBCASE("spatial mean is the map average") {
        const MetricMap c = coverage_ratio(lo, hi, random_tensor(Shape{20, 4}, 5, -2.0, 2.0));
        double avg = 0.0;
        for (double v : c.per_gridpoint) avg += v / 4.0;
        CHECK(std::abs(avg - c.spatial_mean) < 1e-12);
        for (double v : c.per_gridpoint) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
    CHECK_THROWS_AS(coverage_ratio(hi, lo, mu), ValueError);
    CHECK_THROWS_AS(coverage_ratio(lo, hi, Tensor(Shape{20, 3})), ShapeError);
}

TEST_CASE("spatial weights") {
    const GridField g = make_field(1980, 1980, 1, 3, 2, [](auto, auto, auto, auto) { return 0.0; });
    const auto u = spatial_weights(g, SpatialWeighting::uniform);
    for (double w : u) CHECK(w == doctest::Approx(1.0 / 6.0));
    const auto c = spatial_weights(g, SpatialWeighting::cos_lat);
    double total = 0.0;
    for (double w : c) total += w;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(c[0] > c[4]); // southern rows weigh more
    const std::vector<double> values{1, 2, 3, 4, 5, 6};
    CHECK(spatial_mean(values, u) == doctest::Approx(3.5).epsilon(1e-14));
    CHECK(spatial_mean(values) == 3.5);
}

TEST_CASE("filter_season") {
    const GridField year = make_field(1990, 1990, 1, 1, 1, [](auto t, auto, auto, auto) { return double(t); });
    CHECK(filter_season(year, kSummerMonths).steps() == 92);
    CHECK(filter_season(year, {2}).steps() == 28);
    CHECK(filter_season(year, parse_season("all")).values == year.values);
    CHECK(filter_season(year, parse_season("winter")).steps() == 31 + 31 + 28);
    const GridField jja = filter_season(year, kSummerMonths);
    for (std::size_t t = 1; t < jja.steps(); ++t) CHECK(jja.time[t] > jja.time[t - 1]);
    CHECK(month_of(jja.time.front()) == 6);
    CHECK(month_of(jja.time.back()) == 8);

    SUBCASE("disjoint month sets partition the time axis") {
        const GridField decade = make_field(1990, 1999, 1, 1, 1, [](auto t, auto, auto, auto) { return double(t); });
        std::vector<DayIndex> all;
        for (const std::set<int>& part : {std::set<int>{1, 2, 3, 4}, std::set<int>{5, 6, 7, 8}, std::set<int>{9, 10, 11, 12}}) {
            const GridField f = filter_season(decade, part);
            all.insert(all.end(), f.time.begin(), f.time.end());
        }
        std::sort(all.begin(), all.end());
        CHECK(all == decade.time);
    }
    SUBCASE("empty result") {
        const GridField summer = filter_season(year, kSummerMonths);
        CHECK_THROWS_AS(filter_season(summer, {1}), ValueError);
        CHECK_THROWS(filter_season(year, {13}));
    }
}

TEST_CASE("season labels") {
    CHECK(season_label(kSummerMonths) == "summer");
    CHECK(season_label(parse_season("all")) == "all");
    CHECK(season_label({1, 2}) == "months:1,2");
    CHECK(parse_season("months:1,2") == std::set<int>{1, 2});
    CHECK(parse_season("6,7,8") == kSummerMonths);
    CHECK_THROWS_AS(parse_season("spring"), ValueError);
    CHECK_THROWS_AS(parse_season("0,1"), ValueError);
}

TEST_CASE("climatology") {
    const GridField c = make_field(1970, 1975, 1, 2, 2, [](auto, auto, auto, auto) { return 3.5; });
    for (double v : climatology(c, PeriodSpec(1970, 1975))) CHECK(v == 3.5);
    const GridField alt =
        make_field(1970, 1971, 1, 2, 2, [](std::size_t t, auto, auto, auto) { return t % 2 ? 1.0 : -1.0; });
    for (double v : climatology(alt, PeriodSpec(1970, 1971))) CHECK(v == 0.0);
    CHECK_THROWS_AS(climatology(c, PeriodSpec(1990, 1991)), ValueError);

    SUBCASE("recovers the generator climatology") {
        SynthConfig sc;
        sc.start_year = 1970;
        sc.end_year = 2005;
        sc.fine_height = sc.fine_width = 16;
        sc.seasonal_amplitude = 0.0;
        sc.warming_rate = 0.0;
        sc.nonlinearity = 0.0;
        const PseudoReality data = generate_pseudo_reality(sc, 4);
        const auto clim = climatology(data.predictand, PeriodSpec(1970, 2005));
        const std::size_t T = data.predictand.steps(), G = clim.size();
        // AR(1) weather inflates the standard error by sqrt((1+phi)/(1-phi))
        const double phi = data.truth.persistence;
        const double inflation = std::sqrt((1.0 + phi) / (1.0 - phi));
        std::size_t outside = 0;
        for (std::size_t g = 0; g < G; ++g) {
            double ss = 0.0;
            for (std::size_t t = 0; t < T; ++t) {
                const double d = data.predictand.values[t * G + g] - clim[g];
                ss += d * d;
            }
            const double se = std::sqrt(ss / (T - 1) / T) * inflation;
            if (std::abs(clim[g] - data.truth.climatology[g]) > 3.0 * se) ++outside;
        }
        CHECK(outside <= G / 100 + 1);
    }
}

TEST_CASE("coverage map report") {
    EvalReport a;
    a.period = "2071-2100";
    a.season = "summer";
    a.members = 1;
    a.coverage.per_gridpoint = {0.8, 0.9, 0.7, 1.0};
    a.coverage.spatial_mean = 0.85;
    EvalReport b = a;
    b.members = 10;
    SUBCASE("identical inputs") {
        const auto r = coverage_map_report(a, b);
        for (double d : r.difference) CHECK(d == 0.0);
        CHECK(r.difference_mean == 0.0);
    }
    SUBCASE("difference of means") {
        b.coverage.per_gridpoint = {0.85, 0.97, 0.71, 0.99};
        const auto r = coverage_map_report(a, b);
        CHECK(std::abs(r.difference_mean - (r.ensemble_mean - r.single_mean)) < 1e-12);
        CHECK(r.members == 10);
    }
    SUBCASE("mismatches") {
        b.period = "2006-2040";
        CHECK_THROWS_AS(coverage_map_report(a, b), ValueError);
        b = a;
        b.coverage.per_gridpoint.pop_back();
        CHECK_THROWS_AS(coverage_map_report(a, b), ShapeError);
    }
    const std::vector<double> vals{1, 2, 3, 4}, mask{1, 0, 1, 0};
    CHECK(masked_mean(vals, mask) == 2.0);
    CHECK_THROWS_AS(masked_mean(vals, std::vector<double>(4, 0.0)), ValueError);
}

TEST_CASE("ensemble size sweep") {
    // small nonstationary dataset on a 4x4 coarse / 8x8 fine grid
    SynthConfig sc;
    sc.coarse_height = sc.coarse_width = 4;
    sc.fine_height = sc.fine_width = 8;
    sc.channels = 3;
    sc.start_year = 1990;
    sc.end_year = 2012;
    const PseudoReality data = generate_pseudo_reality(sc, 5);
    DeepESDConfig mc = testing::small_model(3, 4, 4, 64);
    TrainConfig tc;
    tc.learning_rate = 1e-2;
    tc.max_epochs = 3;
    tc.patience = 1;
    const GridField xt = select_period(data.predictors, PeriodSpec(1990, 2000));
    const GridField yt = select_period(data.predictand, PeriodSpec(1990, 2000));
    const Ensemble ens = train_ensemble(xt, yt, mc, tc, 3, 8, 3);

    const std::vector<PeriodSpec> periods{{2001, 2005}, {2006, 2012}};
    const SweepResult s = sweep_ensemble_size(ens, data.predictors, data.predictand, periods);
    REQUIRE(s.reports.size() == 3 * 2);
    CHECK(s.convexity_gap.size() == 6);
    CHECK(s.convexity_holds());
    CHECK(s.reports[0].period == "2001-2005");
    CHECK(s.reports[0].members == 1);
    CHECK(s.reports[5].members == 3);

    // the M=1 row equals evaluating member 0 directly
    const GridField x = filter_season(select_period(data.predictors, periods[0]), kSummerMonths);
    const GridField y = filter_season(select_period(data.predictand, periods[0]), kSummerMonths);
    const Prediction p = predict_member(ens, 0, x);
    const EvalReport direct = evaluate_prediction(p.mu, p.sigma2, y.values.reshaped(Shape{y.steps(), 64}), "2001-2005",
                                                  "summer", 1, 0.95);
    CHECK(direct.rmse.per_gridpoint == s.at("2001-2005", 1).rmse.per_gridpoint);
    CHECK(direct.coverage.per_gridpoint == s.at("2001-2005", 1).coverage.per_gridpoint);
    CHECK_THROWS_AS((void)s.at("1990-1991", 1), ValueError);

    // convexity checked directly from the member maps
    for (std::size_t pi = 0; pi < 2; ++pi) {
        const auto& full = s.at(periods[pi].label(), 3).rmse.per_gridpoint;
        for (std::size_t g = 0; g < 64; ++g) {
            double mean_member = 0.0;
            for (const auto& m : s.member_rmse[pi]) mean_member += m.per_gridpoint[g] / 3.0;
            CHECK(full[g] <= mean_member + 1e-12);
        }
    }

    SUBCASE("tidy csv") {
        const std::string csv = reports_csv(s.reports, data.predictand);
        std::istringstream in(csv);
        std::string line;
        std::getline(in, line);
        CHECK(line + "\n" == kReportCsvHeader);
        std::size_t rows = 0, mean_rows = 0;
        while (std::getline(in, line)) {
            ++rows;
            if (line.find(",MEAN,") != std::string::npos) ++mean_rows;
            CHECK(std::count(line.begin(), line.end(), ',') == 7);
        }
        // (M, period) x metric x (gridpoints + MEAN)
        CHECK(rows == 6 * 2 * 65);
        CHECK(mean_rows == 12);
        CHECK(csv.find('\r') == std::string::npos);
        CHECK(csv.find("2001-2005,summer,1,0,") != std::string::npos);
    }
    SUBCASE("summary json") {
        const auto j = reports_summary(s.reports);
        REQUIRE(j.size() == 6);
        CHECK(j[0].at("rmse_mean").get<double>() == s.reports[0].rmse.spatial_mean);
    }
}
