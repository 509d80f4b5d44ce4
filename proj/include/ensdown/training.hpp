#pragma once

#include "ensdown/autodiff.hpp"
#include "ensdown/grid.hpp"
#include "ensdown/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace ensdown {

/// Per-(channel, lat, lon) mean and population std of the predictors over
/// the training period.
struct StandardizationStats {
    Tensor mean; // [C, H, W]
    Tensor std;  // [C, H, W]
    PeriodSpec computed_over;
    std::size_t constant_cells = 0; // cells whose std was replaced by 1

    nlohmann::json to_json() const;
    static StandardizationStats from_json(const nlohmann::json& j);

    friend bool operator==(const StandardizationStats&, const StandardizationStats&) = default;
};

struct TrainConfig {
    double learning_rate = 1e-4;
    std::size_t batch_size = 64;
    std::size_t max_epochs = 500;
    std::size_t patience = 30;
    double val_fraction = 0.10;
    std::uint64_t seed = 0;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    /// Start the dense head at the training climatology: mu bias = per-gridpoint
    /// mean of y, sigma bias such that sigma matches its per-gridpoint std.
    bool init_output_bias = false;

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct EpochRecord {
    std::size_t epoch = 0; // 0 = before the first update
    double train_nll = 0.0;
    double val_nll = 0.0;
    bool is_best = false;
};

struct TrainedModel {
    ModelParams params; // best-validation checkpoint
    StandardizationStats stats;
    std::vector<EpochRecord> history;
    std::size_t stopped_epoch = 0;
    std::size_t best_epoch = 0;
    double best_val_nll = 0.0;
};

/// Optional callbacks, used by tests to observe batches and epochs.
struct TrainObserver {
    std::function<void(std::size_t epoch, std::span<const std::size_t> batch)> on_batch;
    std::function<void(const EpochRecord&)> on_epoch;
};

/// Mean over all elements of 0.5*log(2*pi*sigma2) + (y - mu)^2 / (2*sigma2).
double gaussian_nll(std::span<const double> mu, std::span<const double> sigma2, std::span<const double> y);

/// Same loss recorded on a tape, differentiable in mu and sigma2.
ad::Var gaussian_nll(const ad::Var& mu, const ad::Var& sigma2, const Tensor& y);

StandardizationStats fit_standardizer(const GridField& x, const PeriodSpec& period);
GridField apply_standardizer(const GridField& x, const StandardizationStats& stats);
GridField invert_standardizer(const GridField& z, const StandardizationStats& stats);

struct TrainValSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
};

/// Random split without replacement; |val| = round(val_fraction * n). Both lists sorted.
TrainValSplit split_train_val(std::size_t n_samples, double val_fraction, std::uint64_t seed);

/// Fits one model on time-aligned predictors x [T,C,h,w] and predictand y [T,1,H,W].
/// Predictors are standardized with stats from x; y stays in physical units.
TrainedModel train(const GridField& x, const GridField& y, const DeepESDConfig& model_config,
                   const TrainConfig& train_config, const TrainObserver* observer = nullptr);

/// Mean NLL of `params` on standardized inputs and targets [N, G].
double evaluate_nll(const ModelParams& params, const Tensor& x, const Tensor& y);

/// CSV with header "epoch,train_nll,val_nll,is_best".
std::string history_csv(const std::vector<EpochRecord>& history);

/// Shortest decimal text that parses back to exactly `v`.
std::string format_double(double v);

} // namespace ensdown
