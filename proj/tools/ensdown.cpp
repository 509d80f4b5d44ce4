// ensdown: synthesize data, train deep ensembles, predict and evaluate.

#include "ensdown/error.hpp"
#include "ensdown/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace {

using nlohmann::json;
using namespace ensdown;
using namespace ensdown::cli;

// Large tensors are allocated and freed every training step; keeping them
// on the heap instead of fresh mmaps avoids repeated page faults.
void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

template <class T>
void flag(CLI::App* app, json& layer, const std::string& name, const std::string& section, const std::string& key,
          const std::string& help) {
    app->add_option_function<T>(name, [&layer, section, key](const T& v) { layer[section][key] = v; }, help);
}

void synth_flags(CLI::App* app, json& flags) {
    app->add_option_function<std::size_t>(
        "--coarse", [&flags](const std::size_t& v) { flags["synth"]["coarse_height"] = flags["synth"]["coarse_width"] = v; },
        "Coarse grid size (square)");
    app->add_option_function<std::size_t>(
        "--fine", [&flags](const std::size_t& v) { flags["synth"]["fine_height"] = flags["synth"]["fine_width"] = v; },
        "Fine grid size (square)");
    flag<std::size_t>(app, flags, "--channels", "synth", "channels", "Predictor channels");
    flag<int>(app, flags, "--start-year", "synth", "start_year", "First simulated year");
    flag<int>(app, flags, "--end-year", "synth", "end_year", "Last simulated year");
    flag<double>(app, flags, "--seasonal-amplitude", "synth", "seasonal_amplitude", "Seasonal cycle half range");
    flag<double>(app, flags, "--warming-rate", "synth", "warming_rate", "Warming per decade after the trend start");
    flag<double>(app, flags, "--latent-noise", "synth", "latent_noise", "Weather anomaly std");
    flag<double>(app, flags, "--coarse-noise", "synth", "coarse_noise", "Predictor noise std");
    flag<double>(app, flags, "--fine-noise", "synth", "fine_noise", "Predictand noise std outside summer");
    flag<double>(app, flags, "--summer-multiplier", "synth", "summer_noise_multiplier", "Summer noise multiplier");
    flag<double>(app, flags, "--nonlinearity", "synth", "nonlinearity", "Strength of the saturating map");
    flag<std::uint64_t>(app, flags, "--pattern-seed", "synth", "pattern_seed", "Seed of the spatial patterns");
}

void model_flags(CLI::App* app, json& flags) {
    flag<std::vector<std::size_t>>(app, flags, "--conv-channels", "model", "conv_channels", "Kernels per conv layer");
    flag<std::size_t>(app, flags, "--kernel-size", "model", "kernel_size", "Conv kernel size (odd)");
    flag<double>(app, flags, "--sigma-floor", "model", "sigma_floor", "Added to softplus before squaring");
}

void train_flags(CLI::App* app, json& flags) {
    flag<double>(app, flags, "--learning-rate", "train", "learning_rate", "Adam step size");
    flag<std::size_t>(app, flags, "--batch-size", "train", "batch_size", "Mini-batch size");
    flag<std::size_t>(app, flags, "--max-epochs", "train", "max_epochs", "Epoch limit");
    flag<std::size_t>(app, flags, "--patience", "train", "patience", "Epochs without improvement before stopping");
    flag<double>(app, flags, "--val-fraction", "train", "val_fraction", "Random validation share");
    flag<bool>(app, flags, "--init-output-bias", "train", "init_output_bias",
               "Start the output layer at the training climatology (true/false)");
}

std::vector<PeriodSpec> parse_periods(const std::vector<std::string>& texts) {
    std::vector<PeriodSpec> out;
    for (const auto& t : texts) out.push_back(PeriodSpec::parse(t));
    return out;
}

void print(const json& j) { std::cout << j.dump(2) << "\n"; }

} // namespace

int main(int argc, char** argv) {
    tune_allocator();

    CLI::App app{"Probabilistic downscaling with deep ensembles"};
    app.require_subcommand(1);
    std::string config_path;
    app.add_option("--config", config_path, "JSON config file with synth/model/train/run sections")
        ->check(CLI::ExistingFile);

    ConfigLayers layers;
    json& flags = layers.flags;

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic predictor/predictand pair");
    std::string synth_out;
    synth->add_option("--out", synth_out, "Output directory")->required();
    flag<std::uint64_t>(synth, flags, "--seed", "run", "seed", "Weather seed");
    synth_flags(synth, flags);

    // train
    auto* train = app.add_subcommand("train", "Train an ensemble of DeepESD members");
    std::string train_x, train_y, train_out;
    train->add_option("--predictors", train_x, "Predictor grid file")->required()->check(CLI::ExistingFile);
    train->add_option("--predictand", train_y, "Predictand grid file")->required()->check(CLI::ExistingFile);
    train->add_option("--out", train_out, "Ensemble directory")->required();
    flag<std::uint64_t>(train, flags, "--seed", "run", "seed", "Root seed of the members");
    flag<std::size_t>(train, flags, "--members", "run", "members", "Ensemble size");
    flag<std::size_t>(train, flags, "--workers", "run", "workers", "Parallel training threads");
    flag<std::string>(train, flags, "--train-period", "run", "train_period", "Training years, e.g. 1980-2002");
    model_flags(train, flags);
    train_flags(train, flags);

    // predict
    auto* predict = app.add_subcommand("predict", "Write ensemble predictions for periods");
    std::string pred_ens, pred_x, pred_out;
    std::vector<std::string> pred_periods;
    std::size_t members_used = 0;
    double pred_level = 0.95;
    predict->add_option("--ensemble", pred_ens, "Ensemble directory")->required()->check(CLI::ExistingDirectory);
    predict->add_option("--predictors", pred_x, "Predictor grid file")->required()->check(CLI::ExistingFile);
    predict->add_option("--out", pred_out, "Output directory")->required();
    predict->add_option("--period", pred_periods, "Period(s), e.g. 2071-2100");
    predict->add_option("--members-used", members_used, "Use the first k members (0 = all)");
    predict->add_option("--level", pred_level, "Interval level");

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "RMSE and coverage reports");
    EvaluateOptions eval_opts;
    std::vector<std::string> eval_preds, eval_periods;
    std::string eval_y, eval_out, eval_season = "summer", eval_weighting = "uniform", eval_ens, eval_x;
    evaluate->add_option("predictions,--predictions", eval_preds, "Prediction grid files");
    evaluate->add_option("--predictand", eval_y, "Predictand grid file")->required()->check(CLI::ExistingFile);
    evaluate->add_option("--out", eval_out, "Output directory")->required();
    evaluate->add_option("--period", eval_periods, "Period(s), e.g. 2071-2100");
    evaluate->add_option("--season", eval_season, "all, summer, winter or a month list such as 6,7,8");
    evaluate->add_option("--level", eval_opts.level, "Interval level");
    evaluate->add_option("--weighting", eval_weighting, "uniform or cos_lat")
        ->check(CLI::IsMember({"uniform", "cos_lat"}));
    evaluate->add_flag("--sweep", eval_opts.sweep, "Sweep ensemble sizes 1..M");
    evaluate->add_option("--ensemble", eval_ens, "Ensemble directory (sweep)");
    evaluate->add_option("--predictors", eval_x, "Predictor grid file (sweep)");

    // experiment
    auto* experiment = app.add_subcommand("experiment", "Full synthetic pipeline with a verdict");
    std::string exp_out, exp_season = "summer";
    double exp_level = 0.95;
    bool write_data = false, write_predictions = false;
    experiment->add_option("--out", exp_out, "Output directory")->required();
    flag<std::uint64_t>(experiment, flags, "--seed", "run", "seed", "Root seed");
    flag<std::size_t>(experiment, flags, "--repeats", "run", "repeats", "Number of generator seeds");
    flag<std::size_t>(experiment, flags, "--members", "run", "members", "Ensemble size");
    flag<std::size_t>(experiment, flags, "--workers", "run", "workers", "Parallel training threads");
    experiment->add_option("--season", exp_season, "Evaluation season");
    experiment->add_option("--level", exp_level, "Interval level");
    experiment->add_flag("--write-data", write_data, "Keep generated grid files");
    experiment->add_flag("--write-predictions", write_predictions, "Keep prediction grid files");
    synth_flags(experiment, flags);
    model_flags(experiment, flags);
    train_flags(experiment, flags);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (!config_path.empty()) layers.file = load_config_file(config_path);

        if (*synth) {
            const json run = layers.resolve("run", {{"seed", 0}});
            SynthOptions o;
            o.out_dir = synth_out;
            o.seed = run.at("seed").get<std::uint64_t>();
            o.config = SynthConfig::from_json(layers.resolve("synth", SynthConfig{}.to_json()));
            print(run_synth(o).at("artifacts"));
        } else if (*train) {
            const json run = layers.resolve(
                "run", {{"seed", 0}, {"members", 10}, {"workers", 0}, {"train_period", "1980-2002"}});
            TrainOptions o;
            o.predictors = train_x;
            o.predictand = train_y;
            o.out_dir = train_out;
            o.seed = run.at("seed").get<std::uint64_t>();
            o.members = run.at("members").get<std::size_t>();
            o.workers = run.at("workers").get<std::size_t>();
            o.train_period = PeriodSpec::parse(run.at("train_period").get<std::string>());
            o.model = DeepESDConfig::from_json(layers.resolve("model", DeepESDConfig{}.to_json()));
            o.train = TrainConfig::from_json(layers.resolve("train", TrainConfig{}.to_json()));
            print(run_train(o).at("artifacts"));
        } else if (*predict) {
            PredictOptions o;
            o.ensemble_dir = pred_ens;
            o.predictors = pred_x;
            o.out_dir = pred_out;
            o.periods = parse_periods(pred_periods);
            o.members_used = members_used;
            o.level = pred_level;
            print(run_predict(o).at("artifacts"));
        } else if (*evaluate) {
            for (const auto& p : eval_preds) eval_opts.predictions.emplace_back(p);
            eval_opts.predictand = eval_y;
            eval_opts.out_dir = eval_out;
            eval_opts.periods = parse_periods(eval_periods);
            eval_opts.season = parse_season(eval_season);
            eval_opts.weighting = eval_weighting == "cos_lat" ? SpatialWeighting::cos_lat : SpatialWeighting::uniform;
            eval_opts.ensemble_dir = eval_ens;
            eval_opts.predictors = eval_x;
            print(run_evaluate(eval_opts).at("artifacts"));
        } else if (*experiment) {
            const json run =
                layers.resolve("run", {{"seed", 0}, {"repeats", 1}, {"members", 10}, {"workers", 0}});
            ExperimentOptions o;
            o.out_dir = exp_out;
            o.seed = run.at("seed").get<std::uint64_t>();
            o.repeats = run.at("repeats").get<std::size_t>();
            o.members = run.at("members").get<std::size_t>();
            o.workers = run.at("workers").get<std::size_t>();
            o.season = parse_season(exp_season);
            o.level = exp_level;
            o.write_data = write_data;
            o.write_predictions = write_predictions;
            o.synth = SynthConfig::from_json(layers.resolve("synth", SynthConfig{}.to_json()));
            o.model = DeepESDConfig::from_json(layers.resolve("model", DeepESDConfig{}.to_json()));
            o.train = TrainConfig::from_json(layers.resolve("train", experiment_train_defaults().to_json()));
            const json verdict = run_experiment(o);
            print({{"median", verdict.at("median")}, {"checks", verdict.at("checks")}, {"pass", verdict.at("pass")}});
        }
    } catch (const json::exception& e) {
        std::cerr << "ensdown: invalid configuration value: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "ensdown: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
