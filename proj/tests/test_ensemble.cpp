#include "support.hpp"

#include "ensdown/ensemble.hpp"
#include "ensdown/error.hpp"
#include "ensdown/io.hpp"
#include "ensdown/seeds.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

using namespace ensdown;
using testing::random_tensor;

namespace {

Prediction make_pred(std::initializer_list<double> mu, std::initializer_list<double> s2, int member) {
    Prediction p;
    p.mu = Tensor::from(Shape{1, mu.size()}, mu);
    p.sigma2 = Tensor::from(Shape{1, s2.size()}, s2);
    p.member = member;
    return p;
}

std::vector<Prediction> random_members(std::size_t M, std::size_t T, std::size_t G, std::uint64_t seed) {
    std::vector<Prediction> out;
    for (std::size_t m = 0; m < M; ++m) {
        Prediction p;
        p.mu = random_tensor(Shape{T, G}, seed * 100 + 2 * m, -5.0, 25.0);
        p.sigma2 = random_tensor(Shape{T, G}, seed * 100 + 2 * m + 1, 0.1, 4.0);
        p.member = static_cast<int>(m);
        out.push_back(std::move(p));
    }
    return out;
}

double Phi(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

TrainConfig quick_train() {
    TrainConfig tc;
    tc.learning_rate = 1e-2;
    tc.max_epochs = 3;
    tc.patience = 1;
    return tc;
}

} // namespace

TEST_CASE("member seeds") {
    std::set<std::uint64_t> seen;
    for (std::size_t m = 0; m < 10; ++m) {
        CHECK(member_seed(42, m) == splitmix64(42 + m));
        seen.insert(member_seed(42, m));
    }
    CHECK(seen.size() == 10);
    // independent oracle of splitmix64 for a fixed input
    CHECK(splitmix64(0) == 0xE220A8397B1DCDAFull);
}

TEST_CASE("aggregate hand examples") {
    SUBCASE("single member is the identity") {
        const std::vector<Prediction> one{make_pred({1.5, -2.0}, {0.3, 2.0}, 0)};
        const auto a = aggregate(one);
        CHECK(a.mu_star == one[0].mu);
        CHECK(a.sigma2_star == one[0].sigma2);
        CHECK(a.members == 1);
    }
    SUBCASE("two members") {
        const std::vector<Prediction> two{make_pred({0.0}, {1.0}, 0), make_pred({2.0}, {1.0}, 1)};
        const auto a = aggregate(two);
        CHECK(a.mu_star[0] == 1.0);
        CHECK(a.sigma2_star[0] == 2.0);
        const auto b = aggregate_second_moment(two);
        CHECK(b.mu_star[0] == 1.0);
        CHECK(b.sigma2_star[0] == 2.0);
    }
    SUBCASE("identical members reproduce the member exactly") {
        auto members = random_members(1, 4, 6, 3);
        for (int m = 1; m < 7; ++m) {
            Prediction p = members[0];
            p.member = m;
            members.push_back(p);
        }
        const auto a = aggregate(members);
        CHECK(a.mu_star == members[0].mu);
        CHECK(a.sigma2_star == members[0].sigma2);
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(aggregate(std::vector<Prediction>{}), ValueError);
        const std::vector<Prediction> bad{make_pred({0.0}, {1.0}, 0), make_pred({0.0, 1.0}, {1.0, 1.0}, 1)};
        CHECK_THROWS_AS(aggregate(bad), ShapeError);
    }
}

TEST_CASE("aggregate properties on random members") {
    for (std::size_t M : {2u, 5u, 10u}) {
        auto members = random_members(M, 7, 9, M);
        const auto a = aggregate(members);
        const auto b = aggregate_second_moment(members);
        for (std::size_t i = 0; i < a.mu_star.size(); ++i) {
            double mean_var = 0.0, mean_mu = 0.0;
            for (const auto& p : members) {
                mean_var += p.sigma2[i];
                mean_mu += p.mu[i];
            }
            mean_var /= static_cast<double>(M);
            mean_mu /= static_cast<double>(M);
            double spread = 0.0;
            for (const auto& p : members) spread += (p.mu[i] - mean_mu) * (p.mu[i] - mean_mu);
            spread /= static_cast<double>(M);

            CHECK(a.mu_star[i] == doctest::Approx(mean_mu).epsilon(1e-14));
            CHECK(std::abs(a.sigma2_star[i] - (mean_var + spread)) < 1e-10);
            CHECK(std::abs(a.sigma2_star[i] - b.sigma2_star[i]) < 1e-10);
            CHECK(a.sigma2_star[i] >= mean_var);
            CHECK(a.sigma2_star[i] > mean_var); // means are distinct here
        }
        // permutation invariance, bitwise
        std::mt19937_64 rng(M);
        for (int rep = 0; rep < 5; ++rep) {
            std::shuffle(members.begin(), members.end(), rng);
            const auto c = aggregate(members);
            CHECK(c.mu_star == a.mu_star);
            CHECK(c.sigma2_star == a.sigma2_star);
        }
    }
}

TEST_CASE("equal member means give exactly the mean variance") {
    std::vector<Prediction> members{make_pred({3.0, -1.0}, {0.5, 1.0}, 0), make_pred({3.0, -1.0}, {1.5, 3.0}, 1)};
    const auto a = aggregate(members);
    CHECK(a.sigma2_star[0] == 1.0);
    CHECK(a.sigma2_star[1] == 2.0);
}

TEST_CASE("aggregate matches Monte Carlo moments of the mixture") {
    std::mt19937_64 rng(99);
    std::normal_distribution<double> nd;
    for (std::size_t M : {2u, 5u, 10u}) {
        const auto members = random_members(M, 1, 1, 50 + M);
        const auto a = aggregate(members);
        const std::size_t draws = 200000;
        std::uniform_int_distribution<std::size_t> pick(0, M - 1);
        double s = 0.0, ss = 0.0;
        std::vector<double> xs(draws);
        for (std::size_t k = 0; k < draws; ++k) {
            const auto& p = members[pick(rng)];
            xs[k] = p.mu[0] + std::sqrt(p.sigma2[0]) * nd(rng);
            s += xs[k];
        }
        const double mean = s / draws;
        for (double x : xs) ss += (x - mean) * (x - mean);
        const double var = ss / (draws - 1);
        double m4 = 0.0;
        for (double x : xs) m4 += std::pow(x - mean, 4);
        m4 /= draws;
        const double se_mean = std::sqrt(var / draws);
        const double se_var = std::sqrt((m4 - var * var) / draws);
        CHECK(std::abs(a.mu_star[0] - mean) < 3.0 * se_mean);
        CHECK(std::abs(a.sigma2_star[0] - var) < 3.0 * se_var);
    }
}

TEST_CASE("normal quantiles and intervals") {
    CHECK(normal_interval_z(0.95) == 1.959963984540054);
    CHECK(normal_interval_z(0.90) == 1.6448536269514722);
    CHECK(normal_interval_z(0.99) == 2.5758293035489004);
    for (double p = 0.001; p < 1.0; p += 0.0237) CHECK(std::abs(Phi(normal_quantile(p)) - p) < 1e-9);
    CHECK(std::abs(normal_quantile(0.975) - 1.959963984540054) < 1e-6);
    CHECK(std::abs(normal_interval_z(0.8) - 1.2815515655446004) < 1e-6);
    CHECK(std::abs(normal_quantile(1e-10) + 6.361340902404056) < 1e-6);
    CHECK_THROWS_AS(normal_interval_z(0.0), ValueError);
    CHECK_THROWS_AS(normal_interval_z(1.0), ValueError);
    CHECK_THROWS_AS(normal_quantile(1.0), ValueError);

    auto [lo, hi] = predictive_interval(Tensor::from(Shape{1}, {0.0}), Tensor::from(Shape{1}, {1.0}), 0.95);
    CHECK(lo[0] == doctest::Approx(-1.959964).epsilon(1e-6));
    CHECK(hi[0] == doctest::Approx(1.959964).epsilon(1e-6));
    auto [lo2, hi2] = predictive_interval(Tensor::from(Shape{1}, {10.0}), Tensor::from(Shape{1}, {4.0}), 0.95);
    CHECK(lo2[0] == doctest::Approx(6.080072).epsilon(1e-7));
    CHECK(hi2[0] == doctest::Approx(13.919928).epsilon(1e-7));
    CHECK_THROWS_AS(predictive_interval(Tensor::from(Shape{1}, {0.0}), Tensor::from(Shape{1}, {1.0}), 1.0), ValueError);
    CHECK_THROWS_AS(predictive_interval(Tensor::from(Shape{1}, {0.0}), Tensor::from(Shape{1}, {0.0}), 0.95), ValueError);
}

TEST_CASE("train_ensemble") {
    const auto d = testing::linear_gaussian(2, 21);
    const DeepESDConfig mc = testing::small_model(2, 2, 2, 4);
    const TrainConfig tc = quick_train();

    SUBCASE("one member equals a single training run with the derived seed") {
        const Ensemble e = train_ensemble(d.x, d.y, mc, tc, 1, 77);
        TrainConfig single = tc;
        single.seed = member_seed(77, 0);
        const TrainedModel m = train(d.x, d.y, mc, single);
        REQUIRE(e.size() == 1);
        CHECK(e.members[0].params.tensors == m.params.tensors);
        CHECK(e.members[0].history.size() == m.history.size());
        CHECK(e.members[0].params.metadata.at("member") == 0);
        CHECK(e.member_seeds[0] == single.seed);
    }
    SUBCASE("deterministic, distinct members, independent of worker count") {
        const Ensemble a = train_ensemble(d.x, d.y, mc, tc, 4, 5, 1);
        const Ensemble b = train_ensemble(d.x, d.y, mc, tc, 4, 5, 3);
        REQUIRE(a.size() == 4);
        for (std::size_t m = 0; m < 4; ++m) CHECK(a.members[m].params == b.members[m].params);
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = i + 1; j < 4; ++j) CHECK_FALSE(a.members[i].params.tensors == a.members[j].params.tensors);
        CHECK(a.root_seed == 5);
        std::set<std::uint64_t> seeds(a.member_seeds.begin(), a.member_seeds.end());
        CHECK(seeds.size() == 4);
        CHECK(a.target == TargetGrid::of(d.y));
    }
    SUBCASE("divergence names the member") {
        GridField y = d.y;
        for (auto& v : y.values.data()) v = 1e200;
        try {
            train_ensemble(d.x, y, mc, tc, 2, 1, 2);
            FAIL("expected divergence");
        } catch (const DivergenceError& e) {
            CHECK(std::string(e.what()).starts_with("member 0"));
        }
    }
    CHECK_THROWS_AS(train_ensemble(d.x, d.y, mc, tc, 0, 1), ValueError);
}

TEST_CASE("ensemble prediction and persistence") {
    const auto d = testing::linear_gaussian(2, 22);
    const DeepESDConfig mc = testing::small_model(2, 2, 2, 4);
    const Ensemble e = train_ensemble(d.x, d.y, mc, quick_train(), 3, 9, 3);

    const Prediction p0 = predict_member(e, 0, d.x);
    CHECK(p0.member == 0);
    const auto one = predict_ensemble(e, d.x, 1);
    CHECK(one.mu_star == p0.mu);
    CHECK(one.sigma2_star == p0.sigma2);
    CHECK(predict_ensemble(e, d.x).members == 3);
    CHECK_THROWS_AS(predict_ensemble(e, d.x, 4), ValueError);

    const GridField wrong = testing::make_field(1980, 1980, 3, 2, 2, [](auto, auto, auto, auto) { return 0.0; });
    CHECK_THROWS_AS(predict_member(e, 0, wrong), ConfigMismatchError);

    const auto dir = testing::scratch_dir("ensemble");
    save_ensemble(e, dir / "ens");
    for (const char* f : {"ensemble.json", "standardizer.json", "member_00.params", "member_02.params",
                          "member_01_history.csv"}) {
        CHECK(std::filesystem::exists(dir / "ens" / f));
    }
    for (const auto& entry : std::filesystem::directory_iterator(dir / "ens")) {
        CHECK_FALSE(entry.path().string().ends_with(".partial"));
    }
    const auto manifest = nlohmann::json::parse(io::read_file(dir / "ens" / "ensemble.json"));
    CHECK(manifest.at("M") == 3);
    CHECK(manifest.at("root_seed") == 9);
    CHECK(manifest.at("config_hash") == config_hash(mc, quick_train()));

    const Ensemble back = load_ensemble(dir / "ens");
    REQUIRE(back.size() == 3);
    for (std::size_t m = 0; m < 3; ++m) {
        CHECK(back.members[m].params == e.members[m].params);
        CHECK(back.members[m].history.size() == e.members[m].history.size());
    }
    CHECK(back.member_seeds == e.member_seeds);
    CHECK(back.target == e.target);
    CHECK(back.stats() == e.stats());
    CHECK(predict_ensemble(back, d.x).mu_star == predict_ensemble(e, d.x).mu_star);

    SUBCASE("tampered member file is rejected") {
        std::string bytes = io::read_file(dir / "ens" / "member_01.params");
        bytes[bytes.size() - 1] ^= 1;
        io::atomic_write(dir / "ens" / "member_01.params", bytes);
        CHECK_THROWS_AS(load_ensemble(dir / "ens"), FormatError);
    }
    SUBCASE("missing directory") { CHECK_THROWS(load_ensemble(dir / "nope")); }
}
