#pragma once

#include "ensdown/evaluation.hpp"
#include "ensdown/grid.hpp"
#include "ensdown/model.hpp"
#include "ensdown/synth.hpp"
#include "ensdown/training.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace ensdown::cli {

namespace fs = std::filesystem;

/// Training window and evaluation periods of the experiment.
struct DatasetSplit {
    PeriodSpec train{1980, 2002};
    std::vector<PeriodSpec> eval{{2006, 2040}, {2041, 2070}, {2071, 2100}};
    PeriodSpec climatology{1970, 2005};

    /// Throws ValueError when the training period overlaps an evaluation period.
    void validate() const;
};

/// Layers of configuration: defaults, then a JSON config file, then flags.
/// Each layer is a JSON object with optional "synth", "model", "train" and
/// "run" sections; later layers win key by key.
struct ConfigLayers {
    nlohmann::json file = nlohmann::json::object();
    nlohmann::json flags = nlohmann::json::object();

    /// Section `name` of defaults merged with the file and the flags.
    nlohmann::json resolve(const std::string& name, const nlohmann::json& defaults) const;
};

nlohmann::json load_config_file(const fs::path& path);

/// min(members, hardware threads), overridden by ENSDOWN_WORKERS.
std::size_t default_workers(std::size_t members);

/// Training profile used by the experiment command (smaller epoch budget
/// and a larger step than the standalone train defaults).
TrainConfig experiment_train_defaults();

/// Writes `dir/manifest.json` with hashes of every other regular file under
/// `dir` (relative paths, recursive).
nlohmann::json write_manifest(const fs::path& dir, const std::string& command, const nlohmann::json& config,
                              const nlohmann::json& seeds, const nlohmann::json& inputs,
                              std::chrono::steady_clock::time_point started);

/// Hashes of every regular file under `dir` except manifest files.
nlohmann::json artifact_hashes(const fs::path& dir);

struct SynthOptions {
    fs::path out_dir;
    SynthConfig config;
    std::uint64_t seed = 0;
};

/// predictors.grid, predictand.grid, truth.json and manifest.json.
nlohmann::json run_synth(const SynthOptions& options);

struct TrainOptions {
    fs::path predictors;
    fs::path predictand;
    fs::path out_dir;
    /// Only conv_channels, kernel_size and sigma_floor are taken from here;
    /// the rest follows the data.
    DeepESDConfig model;
    TrainConfig train;
    PeriodSpec train_period{1980, 2002};
    std::size_t members = 10;
    std::uint64_t seed = 0;
    std::size_t workers = 0; // 0 = default_workers
};

/// Model config matching the shapes of a predictor/predictand pair.
DeepESDConfig model_config_for(const GridField& predictors, const GridField& predictand,
                               const DeepESDConfig& architecture);

nlohmann::json run_train(const TrainOptions& options);

struct PredictOptions {
    fs::path ensemble_dir;
    fs::path predictors;
    fs::path out_dir;
    std::vector<PeriodSpec> periods; // empty = the three evaluation periods
    std::size_t members_used = 0;    // 0 = all
    double level = 0.95;
};

/// Prediction grid with channels mu, sigma2, lower, upper for `period`.
GridField prediction_grid(const EnsemblePrediction& prediction, const TargetGrid& target,
                          const std::vector<DayIndex>& time, double level, const std::string& period);

std::string prediction_file_name(const PeriodSpec& period, std::size_t members);

nlohmann::json run_predict(const PredictOptions& options);

struct EvaluateOptions {
    std::vector<fs::path> predictions; // prediction grid files
    fs::path predictand;
    fs::path out_dir;
    std::vector<PeriodSpec> periods; // empty = the three evaluation periods
    std::set<int> season = kSummerMonths;
    double level = 0.95;
    SpatialWeighting weighting = SpatialWeighting::uniform;
    bool sweep = false;
    fs::path ensemble_dir; // sweep mode
    fs::path predictors;   // sweep mode
};

/// report.csv, coverage_maps.csv, summary.json and manifest.json.
nlohmann::json run_evaluate(const EvaluateOptions& options);

struct ExperimentOptions {
    fs::path out_dir;
    std::uint64_t seed = 0;
    std::size_t repeats = 1;
    std::size_t members = 10;
    std::size_t workers = 0;
    SynthConfig synth;
    DeepESDConfig model;
    TrainConfig train = experiment_train_defaults();
    DatasetSplit split;
    std::set<int> season = kSummerMonths;
    double level = 0.95;
    bool write_data = false;        // keep the generated grid files
    bool write_predictions = false; // keep per-period prediction grids
};

/// Generator seed of repeat `r`.
std::uint64_t repeat_seed(std::uint64_t seed, std::size_t r);

/// Runs synth, train, predict and evaluate per repeat and writes verdict.json.
/// Stage failures are rethrown as "<stage>: <message>".
nlohmann::json run_experiment(const ExperimentOptions& options);

} // namespace ensdown::cli
