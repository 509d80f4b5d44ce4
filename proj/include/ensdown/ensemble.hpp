#pragma once

#include "ensdown/grid.hpp"
#include "ensdown/model.hpp"
#include "ensdown/training.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

namespace ensdown {

/// Coordinates and naming of the predictand grid the members were trained on.
struct TargetGrid {
    std::vector<double> lat;
    std::vector<double> lon;
    std::string variable = "tas";
    std::string units = "degC";

    static TargetGrid of(const GridField& predictand);
    friend bool operator==(const TargetGrid&, const TargetGrid&) = default;
};

/// Independently trained members sharing one model config.
struct Ensemble {
    std::vector<TrainedModel> members;
    std::vector<std::uint64_t> member_seeds;
    std::uint64_t root_seed = 0;
    TrainConfig train_config;
    TargetGrid target;

    std::size_t size() const { return members.size(); }
    const DeepESDConfig& model_config() const;
    /// Standardization shared by all members.
    const StandardizationStats& stats() const;
};

/// Equal-weight mixture moments of M member predictions.
struct EnsemblePrediction {
    Tensor mu_star;     // [T, G]
    Tensor sigma2_star; // [T, G]
    std::size_t members = 0;
};

/// Seed of member `index`: splitmix64(root_seed + index).
std::uint64_t member_seed(std::uint64_t root_seed, std::size_t index);

/// Trains `members` models, each with its own derived seed (init, validation
/// split and shuffling), on up to `workers` threads. The result does not
/// depend on `workers`. A member failure is rethrown naming the member index.
Ensemble train_ensemble(const GridField& x, const GridField& y, const DeepESDConfig& model_config,
                        const TrainConfig& train_config, std::size_t members, std::uint64_t root_seed,
                        std::size_t workers = 1);

/// mu* = mean(mu_m); sigma2* = mean(sigma2_m) + mean((mu_m - mu*)^2).
/// Members are summed in ascending `member` order, so the result is
/// independent of the order of `predictions`.
EnsemblePrediction aggregate(std::span<const Prediction> predictions);

/// The raw second-moment form mean(sigma2_m + mu_m^2) - mu*^2; kept as a
/// cross-check for aggregate().
EnsemblePrediction aggregate_second_moment(std::span<const Prediction> predictions);

/// Two-sided standard-normal quantile for a central interval at `level`.
double normal_interval_z(double level);

/// Inverse standard-normal CDF (rational approximation, |error| < 1e-8).
double normal_quantile(double p);

/// (mu - z*sigma, mu + z*sigma) elementwise.
std::pair<Tensor, Tensor> predictive_interval(const Tensor& mu, const Tensor& sigma2, double level);

/// Predictions of member `index` for raw (unstandardized) predictors.
Prediction predict_member(const Ensemble& ensemble, std::size_t index, const GridField& predictors);

/// Aggregate of the first `members_used` members (all when 0).
EnsemblePrediction predict_ensemble(const Ensemble& ensemble, const GridField& predictors,
                                    std::size_t members_used = 0);

/// Directory layout: ensemble.json (M, seeds, config hash, file hashes),
/// standardizer.json, member_NN.params, member_NN_history.csv.
void save_ensemble(const Ensemble& ensemble, const std::filesystem::path& dir);
Ensemble load_ensemble(const std::filesystem::path& dir);

/// SHA-256 over the canonical JSON of the model and training configs.
std::string config_hash(const DeepESDConfig& model_config, const TrainConfig& train_config);

} // namespace ensdown
