#include "ensdown/ensemble.hpp"

#include "ensdown/error.hpp"
#include "ensdown/io.hpp"
#include "ensdown/seeds.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <thread>

namespace ensdown {

const DeepESDConfig& Ensemble::model_config() const {
    if (members.empty()) throw ValueError("empty ensemble");
    return members.front().params.config;
}

const StandardizationStats& Ensemble::stats() const {
    if (members.empty()) throw ValueError("empty ensemble");
    return members.front().stats;
}

TargetGrid TargetGrid::of(const GridField& predictand) {
    TargetGrid t;
    t.lat = predictand.lat;
    t.lon = predictand.lon;
    if (!predictand.variables.empty()) t.variable = predictand.variables.front();
    if (!predictand.units.empty()) t.units = predictand.units.front();
    return t;
}

std::uint64_t member_seed(std::uint64_t root_seed, std::size_t index) {
    return splitmix64(root_seed + static_cast<std::uint64_t>(index));
}

Ensemble train_ensemble(const GridField& x, const GridField& y, const DeepESDConfig& model_config,
                        const TrainConfig& train_config, std::size_t members, std::uint64_t root_seed,
                        std::size_t workers) {
    if (members == 0) throw ValueError("train_ensemble: need at least one member");
    Ensemble ens;
    ens.root_seed = root_seed;
    ens.train_config = train_config;
    ens.target = TargetGrid::of(y);
    for (std::size_t m = 0; m < members; ++m) ens.member_seeds.push_back(member_seed(root_seed, m));
    ens.members.resize(members);

    std::vector<std::exception_ptr> errors(members);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t m = next++; m < members; m = next++) {
            try {
                TrainConfig cfg = train_config;
                cfg.seed = ens.member_seeds[m];
                ens.members[m] = train(x, y, model_config, cfg);
                ens.members[m].params.metadata["member"] = m;
            } catch (...) {
                errors[m] = std::current_exception();
            }
        }
    };
    workers = std::clamp<std::size_t>(workers, 1, members);
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    }
    for (std::size_t m = 0; m < members; ++m) {
        if (!errors[m]) continue;
        try {
            std::rethrow_exception(errors[m]);
        } catch (const DivergenceError& e) {
            throw DivergenceError("member " + std::to_string(m) + ": " + e.what());
        } catch (const std::exception& e) {
            throw Error("member " + std::to_string(m) + ": " + e.what());
        }
    }
    return ens;
}

namespace {

std::vector<const Prediction*> sorted_members(std::span<const Prediction> predictions) {
    if (predictions.empty()) throw ValueError("aggregate: no member predictions");
    std::vector<const Prediction*> order;
    for (const auto& p : predictions) {
        if (p.mu.shape() != predictions[0].mu.shape() || p.sigma2.shape() != p.mu.shape()) {
            throw ShapeError("aggregate: member predictions have different shapes");
        }
        order.push_back(&p);
    }
    std::stable_sort(order.begin(), order.end(), [](const Prediction* a, const Prediction* b) { return a->member < b->member; });
    return order;
}

} // namespace

EnsemblePrediction aggregate(std::span<const Prediction> predictions) {
    const auto order = sorted_members(predictions);
    const std::size_t n = order.front()->mu.size();
    const double m = static_cast<double>(order.size());
    // Means are accumulated as offsets from the lowest-index member, which keeps
    // M identical members exact and avoids cancellation for large mu.
    const Prediction& ref = *order.front();
    EnsemblePrediction out{Tensor(ref.mu.shape(), 0.0), Tensor(ref.mu.shape(), 0.0), order.size()};
    auto mu = out.mu_star.data();
    auto var = out.sigma2_star.data();
    for (const Prediction* p : order) {
        for (std::size_t i = 0; i < n; ++i) {
            mu[i] += p->mu[i] - ref.mu[i];
            var[i] += p->sigma2[i] - ref.sigma2[i];
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        mu[i] = ref.mu[i] + mu[i] / m;
        var[i] = ref.sigma2[i] + var[i] / m;
    }
    std::vector<double> spread(n, 0.0);
    for (const Prediction* p : order) {
        for (std::size_t i = 0; i < n; ++i) {
            const double d = p->mu[i] - mu[i];
            spread[i] += d * d;
        }
    }
    for (std::size_t i = 0; i < n; ++i) var[i] += spread[i] / m;
    return out;
}

EnsemblePrediction aggregate_second_moment(std::span<const Prediction> predictions) {
    const auto order = sorted_members(predictions);
    const std::size_t n = order.front()->mu.size();
    const double m = static_cast<double>(order.size());
    EnsemblePrediction out{Tensor(order.front()->mu.shape(), 0.0), Tensor(order.front()->mu.shape(), 0.0),
                           order.size()};
    auto mu = out.mu_star.data();
    auto var = out.sigma2_star.data();
    for (const Prediction* p : order) {
        for (std::size_t i = 0; i < n; ++i) {
            mu[i] += p->mu[i];
            var[i] += p->sigma2[i] + p->mu[i] * p->mu[i];
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        mu[i] /= m;
        var[i] = var[i] / m - mu[i] * mu[i];
    }
    return out;
}

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw ValueError("normal_quantile: p must be in (0,1)");
    // Acklam's rational approximation with one Halley refinement step.
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                   1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                   6.680131188771972e+01,  -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                   -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                   3.754408661907416e+00};
    constexpr double p_low = 0.02425;
    double x;
    if (p < p_low) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - p_low) {
        const double q = p - 0.5;
        const double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
    const double u = e * std::sqrt(2.0 * 3.14159265358979323846) * std::exp(x * x / 2.0);
    return x - u / (1.0 + x * u / 2.0);
}

double normal_interval_z(double level) {
    if (!(level > 0.0 && level < 1.0)) {
        throw ValueError("interval level must be strictly between 0 and 1, got " + format_double(level));
    }
    if (level == 0.90) return 1.6448536269514722;
    if (level == 0.95) return 1.959963984540054;
    if (level == 0.99) return 2.5758293035489004;
    return normal_quantile(0.5 + level / 2.0);
}

std::pair<Tensor, Tensor> predictive_interval(const Tensor& mu, const Tensor& sigma2, double level) {
    if (mu.shape() != sigma2.shape()) throw ShapeError("predictive_interval: mu and sigma2 shapes differ");
    const double z = normal_interval_z(level);
    Tensor lower(mu.shape()), upper(mu.shape());
    for (std::size_t i = 0; i < mu.size(); ++i) {
        if (!(sigma2[i] > 0.0)) throw ValueError("predictive_interval: sigma2 must be positive");
        const double half = z * std::sqrt(sigma2[i]);
        lower[i] = mu[i] - half;
        upper[i] = mu[i] + half;
    }
    return {std::move(lower), std::move(upper)};
}

Prediction predict_member(const Ensemble& ensemble, std::size_t index, const GridField& predictors) {
    const TrainedModel& member = ensemble.members.at(index);
    const DeepESDConfig& cfg = member.params.config;
    if (predictors.channels() != cfg.input_channels || predictors.height() != cfg.coarse_height ||
        predictors.width() != cfg.coarse_width) {
        throw ConfigMismatchError("predictor grid [" + std::to_string(predictors.channels()) + "," +
                                  std::to_string(predictors.height()) + "," + std::to_string(predictors.width()) +
                                  "] does not match the ensemble input [" + std::to_string(cfg.input_channels) + "," +
                                  std::to_string(cfg.coarse_height) + "," + std::to_string(cfg.coarse_width) + "]");
    }
    const GridField z = apply_standardizer(predictors, member.stats);
    Prediction p = forward(member.params, z.values);
    p.member = static_cast<int>(index);
    return p;
}

EnsemblePrediction predict_ensemble(const Ensemble& ensemble, const GridField& predictors, std::size_t members_used) {
    if (members_used == 0) members_used = ensemble.size();
    if (members_used > ensemble.size()) {
        throw ValueError("requested " + std::to_string(members_used) + " members from an ensemble of " +
                         std::to_string(ensemble.size()));
    }
    std::vector<Prediction> preds;
    for (std::size_t m = 0; m < members_used; ++m) preds.push_back(predict_member(ensemble, m, predictors));
    return aggregate(preds);
}

std::string config_hash(const DeepESDConfig& model_config, const TrainConfig& train_config) {
    nlohmann::json j = {{"model", model_config.to_json()}, {"train", train_config.to_json()}};
    j["train"].erase("seed");
    return io::sha256_hex(j.dump());
}

namespace {

std::string member_stem(std::size_t m) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "member_%02zu", m);
    return buf;
}

} // namespace

void save_ensemble(const Ensemble& ensemble, const std::filesystem::path& dir) {
    if (ensemble.members.empty()) throw ValueError("save_ensemble: empty ensemble");
    std::filesystem::create_directories(dir);
    const auto& stats = ensemble.stats();
    for (const auto& m : ensemble.members) {
        if (!(m.params.config == ensemble.model_config())) throw ValueError("save_ensemble: members disagree on config");
        if (!(m.stats == stats)) throw ValueError("save_ensemble: members disagree on standardization");
    }
    const std::string stats_text = stats.to_json().dump();
    io::atomic_write(dir / "standardizer.json", stats_text);

    nlohmann::json members = nlohmann::json::array();
    for (std::size_t m = 0; m < ensemble.size(); ++m) {
        const TrainedModel& member = ensemble.members[m];
        const std::string params_bytes = save_params(member.params);
        const std::string history = history_csv(member.history);
        const std::string stem = member_stem(m);
        io::atomic_write(dir / (stem + ".params"), params_bytes);
        io::atomic_write(dir / (stem + "_history.csv"), history);
        members.push_back({{"index", m},
                           {"seed", ensemble.member_seeds[m]},
                           {"params", stem + ".params"},
                           {"params_sha256", io::sha256_hex(params_bytes)},
                           {"history", stem + "_history.csv"},
                           {"history_sha256", io::sha256_hex(history)},
                           {"stopped_epoch", member.stopped_epoch},
                           {"best_epoch", member.best_epoch},
                           {"best_val_nll", member.best_val_nll}});
    }
    const nlohmann::json manifest = {
        {"format", "ENSDOWN-ENSEMBLE-v1"},
        {"M", ensemble.size()},
        {"root_seed", ensemble.root_seed},
        {"member_seeds", ensemble.member_seeds},
        {"config_hash", config_hash(ensemble.model_config(), ensemble.train_config)},
        {"model_config", ensemble.model_config().to_json()},
        {"train_config", ensemble.train_config.to_json()},
        {"target_grid",
         {{"lat", ensemble.target.lat},
          {"lon", ensemble.target.lon},
          {"variable", ensemble.target.variable},
          {"units", ensemble.target.units}}},
        {"standardizer", "standardizer.json"},
        {"standardizer_sha256", io::sha256_hex(stats_text)},
        {"members", members},
    };
    io::atomic_write(dir / "ensemble.json", manifest.dump(2) + "\n");
}

namespace {

std::vector<EpochRecord> parse_history(const std::string& text) {
    std::vector<EpochRecord> out;
    std::size_t pos = text.find('\n');
    while (pos != std::string::npos && pos + 1 < text.size()) {
        const std::size_t end = text.find('\n', pos + 1);
        const std::string line = text.substr(pos + 1, end - pos - 1);
        EpochRecord r;
        int best = 0;
        if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%d", &r.epoch, &r.train_nll, &r.val_nll, &best) != 4) {
            throw FormatError("malformed history line: " + line);
        }
        r.is_best = best != 0;
        out.push_back(r);
        pos = end;
    }
    return out;
}

} // namespace

Ensemble load_ensemble(const std::filesystem::path& dir) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(io::read_file(dir / "ensemble.json"));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("corrupt ensemble manifest: ") + e.what());
    }
    Ensemble ens;
    try {
        const auto model_config = DeepESDConfig::from_json(manifest.at("model_config"));
        ens.train_config = TrainConfig::from_json(manifest.at("train_config"));
        ens.root_seed = manifest.at("root_seed").get<std::uint64_t>();
        ens.member_seeds = manifest.at("member_seeds").get<std::vector<std::uint64_t>>();
        const auto& target = manifest.at("target_grid");
        ens.target.lat = target.at("lat").get<std::vector<double>>();
        ens.target.lon = target.at("lon").get<std::vector<double>>();
        ens.target.variable = target.at("variable").get<std::string>();
        ens.target.units = target.at("units").get<std::string>();
        if (manifest.at("config_hash") != config_hash(model_config, ens.train_config)) {
            throw ConfigMismatchError("ensemble manifest config hash does not match its configs");
        }
        const std::string stats_text = io::read_file(dir / manifest.at("standardizer").get<std::string>());
        if (io::sha256_hex(stats_text) != manifest.at("standardizer_sha256")) {
            throw FormatError("standardizer.json does not match the manifest hash");
        }
        const auto stats = StandardizationStats::from_json(nlohmann::json::parse(stats_text));
        for (const auto& entry : manifest.at("members")) {
            const std::string bytes = io::read_file(dir / entry.at("params").get<std::string>());
            if (io::sha256_hex(bytes) != entry.at("params_sha256")) {
                throw FormatError(entry.at("params").get<std::string>() + " does not match the manifest hash");
            }
            TrainedModel member;
            member.params = load_params(bytes, model_config);
            member.stats = stats;
            const auto hist_path = dir / entry.at("history").get<std::string>();
            if (std::filesystem::exists(hist_path)) member.history = parse_history(io::read_file(hist_path));
            member.stopped_epoch = entry.at("stopped_epoch").get<std::size_t>();
            member.best_epoch = entry.at("best_epoch").get<std::size_t>();
            member.best_val_nll = entry.at("best_val_nll").get<double>();
            ens.members.push_back(std::move(member));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("incomplete ensemble manifest: ") + e.what());
    }
    if (ens.members.size() != manifest.at("M").get<std::size_t>() || ens.member_seeds.size() != ens.members.size()) {
        throw FormatError("ensemble manifest member count is inconsistent");
    }
    return ens;
}

} // namespace ensdown
