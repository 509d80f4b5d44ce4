#include "ensdown/pipeline.hpp"

#include "ensdown/ensemble.hpp"
#include "ensdown/error.hpp"
#include "ensdown/io.hpp"
#include "ensdown/seeds.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <limits>
#include <map>
#include <thread>
#include <type_traits>

namespace ensdown::cli {

namespace {

using Clock = std::chrono::steady_clock;

const DatasetSplit kDefaultSplit{};

std::vector<PeriodSpec> periods_or_default(const std::vector<PeriodSpec>& periods) {
    return periods.empty() ? kDefaultSplit.eval : periods;
}

nlohmann::json period_labels(const std::vector<PeriodSpec>& periods) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& p : periods) out.push_back(p.label());
    return out;
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void progress(const std::string& message) { std::clog << "ensdown: " << message << std::endl; }

std::string elapsed(Clock::time_point t0) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f s", std::chrono::duration<double>(Clock::now() - t0).count());
    return buf;
}

template <class F>
auto stage(const std::string& name, F&& body) -> decltype(body()) {
    const auto t0 = Clock::now();
    try {
        if constexpr (std::is_void_v<decltype(body())>) {
            body();
            progress(name + " done in " + elapsed(t0));
        } else {
            auto out = body();
            progress(name + " done in " + elapsed(t0));
            return out;
        }
    } catch (const std::exception& e) {
        throw Error(name + ": " + e.what());
    }
}

void write_json(const fs::path& path, const nlohmann::json& j) { io::atomic_write(path, j.dump(2) + "\n"); }

} // namespace

void DatasetSplit::validate() const {
    for (const auto& p : eval) {
        if (p.start_year <= train.end_year && train.start_year <= p.end_year) {
            throw ValueError("dataset split: training period " + train.label() + " overlaps evaluation period " +
                             p.label());
        }
    }
}

nlohmann::json ConfigLayers::resolve(const std::string& name, const nlohmann::json& defaults) const {
    nlohmann::json out = defaults;
    for (const nlohmann::json* layer : {&file, &flags}) {
        if (layer->contains(name)) {
            const auto& section = layer->at(name);
            if (!section.is_object()) throw ValueError("config section '" + name + "' must be an object");
            out.merge_patch(section);
        }
    }
    return out;
}

nlohmann::json load_config_file(const fs::path& path) {
    try {
        auto j = nlohmann::json::parse(io::read_file(path));
        if (!j.is_object()) throw ValueError("config file must hold a JSON object");
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("config file " + path.string() + ": " + e.what());
    }
}

std::size_t default_workers(std::size_t members) {
    if (const char* env = std::getenv("ENSDOWN_WORKERS"); env && *env) {
        char* end = nullptr;
        const unsigned long v = std::strtoul(env, &end, 10);
        if (*end != '\0' || v == 0) throw ValueError(std::string("ENSDOWN_WORKERS must be a positive integer, got '") + env + "'");
        return v;
    }
    const std::size_t cores = std::max(1u, std::thread::hardware_concurrency());
    return std::max<std::size_t>(1, std::min(members, cores));
}

TrainConfig experiment_train_defaults() {
    TrainConfig c;
    c.learning_rate = 1e-3;
    c.max_epochs = 15;
    c.patience = 5;
    c.init_output_bias = true;
    return c;
}

nlohmann::json artifact_hashes(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const auto name = entry.path().filename().string();
        if (name == "manifest.json" || name.ends_with(".partial")) continue;
        files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    nlohmann::json out = nlohmann::json::object();
    for (const auto& f : files) out[fs::relative(f, dir).generic_string()] = io::sha256_file(f);
    return out;
}

nlohmann::json write_manifest(const fs::path& dir, const std::string& command, const nlohmann::json& config,
                              const nlohmann::json& seeds, const nlohmann::json& inputs, Clock::time_point started) {
    nlohmann::json m = {
        {"format", "ENSDOWN-MANIFEST-v1"},
        {"command", command},
        {"config", config},
        {"seeds", seeds},
        {"inputs", inputs},
        {"output_dir", dir.string()},
        {"artifacts", artifact_hashes(dir)},
        {"duration_seconds", std::chrono::duration<double>(Clock::now() - started).count()},
    };
    write_json(dir / "manifest.json", m);
    return m;
}

// --- synth -----------------------------------------------------------------

namespace {

nlohmann::json write_synth_outputs(const fs::path& dir, const PseudoReality& data, const SynthConfig& config,
                                   std::uint64_t seed, Clock::time_point started) {
    fs::create_directories(dir);
    save_grid(data.predictors, dir / "predictors.grid");
    save_grid(data.predictand, dir / "predictand.grid");
    nlohmann::json cfg = {{"synth", config.to_json()}, {"truth", data.truth.to_json()}};
    return write_manifest(dir, "synth", cfg, {{"seed", seed}, {"pattern_seed", config.pattern_seed}},
                          nlohmann::json::object(), started);
}

} // namespace

nlohmann::json run_synth(const SynthOptions& options) {
    const auto started = Clock::now();
    options.config.validate();
    const PseudoReality data = generate_pseudo_reality(options.config, options.seed);
    return write_synth_outputs(options.out_dir, data, options.config, options.seed, started);
}

// --- train -----------------------------------------------------------------

DeepESDConfig model_config_for(const GridField& predictors, const GridField& predictand,
                               const DeepESDConfig& architecture) {
    if (predictand.channels() != 1) throw ShapeError("predictand must have exactly one channel");
    DeepESDConfig c = architecture;
    c.input_channels = predictors.channels();
    c.coarse_height = predictors.height();
    c.coarse_width = predictors.width();
    c.n_output_gridpoints = predictand.height() * predictand.width();
    c.validate();
    return c;
}

namespace {

struct TrainInputs {
    GridField x;
    GridField y;
};

TrainInputs training_window(const GridField& predictors, const GridField& predictand, const PeriodSpec& period) {
    auto [x, y] = align_time(predictors, predictand);
    return {select_period(x, period), select_period(y, period)};
}

nlohmann::json train_run_config(const DeepESDConfig& model, const TrainConfig& train, const PeriodSpec& period,
                                std::size_t members, std::size_t workers) {
    return {{"model", model.to_json()},
            {"train", train.to_json()},
            {"train_period", period.label()},
            {"members", members},
            {"workers", workers}};
}

} // namespace

nlohmann::json run_train(const TrainOptions& options) {
    const auto started = Clock::now();
    if (options.members == 0) throw ValueError("--members must be at least 1");
    options.train.validate();
    const GridField predictors = load_grid(options.predictors);
    const GridField predictand = load_grid(options.predictand);
    const DeepESDConfig model = model_config_for(predictors, predictand, options.model);
    const TrainInputs data = training_window(predictors, predictand, options.train_period);
    const std::size_t workers = options.workers ? options.workers : default_workers(options.members);

    const Ensemble ens = train_ensemble(data.x, data.y, model, options.train, options.members, options.seed, workers);
    save_ensemble(ens, options.out_dir);
    return write_manifest(options.out_dir, "train",
                          train_run_config(model, options.train, options.train_period, options.members, workers),
                          {{"root_seed", options.seed}, {"member_seeds", ens.member_seeds}},
                          {{options.predictors.string(), io::sha256_file(options.predictors)},
                           {options.predictand.string(), io::sha256_file(options.predictand)}},
                          started);
}

// --- predict ---------------------------------------------------------------

GridField prediction_grid(const EnsemblePrediction& prediction, const TargetGrid& target,
                          const std::vector<DayIndex>& time, double level, const std::string& period) {
    const std::size_t T = prediction.mu_star.dim(0);
    const std::size_t G = prediction.mu_star.dim(1);
    const std::size_t H = target.lat.size();
    const std::size_t W = target.lon.size();
    if (H * W != G) throw ConfigMismatchError("prediction has " + std::to_string(G) + " gridpoints, target grid " +
                                              std::to_string(H) + "x" + std::to_string(W));
    if (time.size() != T) throw ShapeError("prediction time axis does not match its calendar");
    const auto [lower, upper] = predictive_interval(prediction.mu_star, prediction.sigma2_star, level);

    GridField out;
    out.values = Tensor(Shape{T, 4, H, W});
    auto dst = out.values.data();
    const Tensor* channels[4] = {&prediction.mu_star, &prediction.sigma2_star, &lower, &upper};
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t c = 0; c < 4; ++c) {
            auto src = channels[c]->data().subspan(t * G, G);
            std::copy(src.begin(), src.end(), dst.begin() + (t * 4 + c) * G);
        }
    }
    out.variables = {"mu", "sigma2", "lower", "upper"};
    const std::string u = target.units;
    out.units = {u, "(" + u + ")^2", u, u};
    out.lat = target.lat;
    out.lon = target.lon;
    out.time = time;
    out.attributes = {{"members", std::to_string(prediction.members)},
                      {"level", format_double(level)},
                      {"period", period},
                      {"predictand", target.variable}};
    out.validate();
    return out;
}

std::string prediction_file_name(const PeriodSpec& period, std::size_t members) {
    std::string label = period.label();
    std::replace(label.begin(), label.end(), ':', '_');
    std::replace(label.begin(), label.end(), ',', '-');
    char buf[32];
    std::snprintf(buf, sizeof buf, "_M%02zu.grid", members);
    return "prediction_" + label + buf;
}

nlohmann::json run_predict(const PredictOptions& options) {
    const auto started = Clock::now();
    normal_interval_z(options.level);
    const Ensemble ens = load_ensemble(options.ensemble_dir);
    const GridField predictors = load_grid(options.predictors);
    const std::size_t used = options.members_used ? options.members_used : ens.size();
    if (used > ens.size()) {
        throw ValueError("--members-used " + std::to_string(used) + " exceeds ensemble size " + std::to_string(ens.size()));
    }
    const auto periods = periods_or_default(options.periods);

    fs::create_directories(options.out_dir);
    for (const auto& period : periods) {
        const GridField x = select_period(predictors, period);
        const EnsemblePrediction pred = predict_ensemble(ens, x, used);
        save_grid(prediction_grid(pred, ens.target, x.time, options.level, period.label()),
                  options.out_dir / prediction_file_name(period, used));
    }
    nlohmann::json inputs = {{options.predictors.string(), io::sha256_file(options.predictors)},
                             {(options.ensemble_dir / "ensemble.json").string(),
                              io::sha256_file(options.ensemble_dir / "ensemble.json")}};
    return write_manifest(options.out_dir, "predict",
                          {{"periods", period_labels(periods)}, {"members_used", used}, {"level", options.level}},
                          {{"root_seed", ens.root_seed}}, inputs, started);
}

// --- evaluate --------------------------------------------------------------

namespace {

std::vector<CoverageMapReport> maps_single_vs_largest(const std::vector<EvalReport>& reports) {
    std::map<std::string, std::pair<const EvalReport*, const EvalReport*>> by_period;
    std::vector<std::string> order;
    for (const auto& r : reports) {
        auto [it, inserted] = by_period.try_emplace(r.period, nullptr, nullptr);
        if (inserted) order.push_back(r.period);
        auto& [single, largest] = it->second;
        if (r.members == 1 && !single) single = &r;
        if (!largest || r.members > largest->members) largest = &r;
    }
    std::vector<CoverageMapReport> maps;
    for (const auto& label : order) {
        auto [single, largest] = by_period.at(label);
        if (single && largest && largest->members > 1) maps.push_back(coverage_map_report(*single, *largest));
    }
    return maps;
}

nlohmann::json maps_summary(const std::vector<CoverageMapReport>& maps) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& m : maps) {
        out.push_back({{"period", m.period},
                       {"season", m.season},
                       {"M", m.members},
                       {"single_mean", m.single_mean},
                       {"ensemble_mean", m.ensemble_mean},
                       {"difference_mean", m.difference_mean}});
    }
    return out;
}

struct EvaluationOutput {
    std::vector<EvalReport> reports;
    std::vector<CoverageMapReport> maps;
    nlohmann::json summary;
};

void write_evaluation(const fs::path& dir, const EvaluationOutput& out, const GridField& grid) {
    fs::create_directories(dir);
    io::atomic_write(dir / "report.csv", reports_csv(out.reports, grid));
    io::atomic_write(dir / "coverage_maps.csv", coverage_maps_csv(out.maps, grid));
    write_json(dir / "summary.json", out.summary);
}

EvaluationOutput evaluate_files(const EvaluateOptions& options, const GridField& predictand) {
    const auto periods = periods_or_default(options.periods);
    const auto weights = spatial_weights(predictand, options.weighting);
    const std::string season = season_label(options.season);
    EvaluationOutput out;
    for (const auto& path : options.predictions) {
        const GridField pred = load_grid(path);
        if (pred.variables != std::vector<std::string>{"mu", "sigma2", "lower", "upper"}) {
            throw FormatError(path.string() + ": expected channels mu, sigma2, lower, upper");
        }
        if (pred.height() != predictand.height() || pred.width() != predictand.width()) {
            throw ShapeError(path.string() + ": prediction grid does not match the predictand grid");
        }
        std::size_t members = 1;
        if (auto it = pred.attributes.find("members"); it != pred.attributes.end()) members = std::stoul(it->second);
        const int first = year_of(pred.time.front());
        const int last = year_of(pred.time.back());
        bool matched = false;
        for (const auto& period : periods) {
            if (period.start_year < first || period.end_year > last) continue;
            matched = true;
            GridField p = select_period(pred, period);
            if (!options.season.empty()) p = filter_season(p, options.season);
            auto [pa, ya] = align_time(p, predictand);
            const std::size_t T = pa.steps();
            const std::size_t G = pa.height() * pa.width();
            Tensor mu(Shape{T, G});
            Tensor sigma2(Shape{T, G});
            const auto src = pa.values.data();
            for (std::size_t t = 0; t < T; ++t) {
                std::copy_n(src.begin() + t * 4 * G, G, mu.data().begin() + t * G);
                std::copy_n(src.begin() + (t * 4 + 1) * G, G, sigma2.data().begin() + t * G);
            }
            const Tensor y = ya.values.reshaped(Shape{T, G});
            out.reports.push_back(
                evaluate_prediction(mu, sigma2, y, period.label(), season, members, options.level, weights));
        }
        if (!matched) throw ValueError(path.string() + ": no requested period lies inside the prediction calendar");
    }
    out.maps = maps_single_vs_largest(out.reports);
    out.summary = {{"mode", "files"}, {"reports", reports_summary(out.reports)}, {"coverage_maps", maps_summary(out.maps)}};
    return out;
}

EvaluationOutput evaluate_sweep(const Ensemble& ens, const GridField& predictors, const GridField& predictand,
                                const std::vector<PeriodSpec>& periods, const SweepOptions& sweep) {
    EvaluationOutput out;
    const SweepResult result = sweep_ensemble_size(ens, predictors, predictand, periods, sweep);
    out.reports = result.reports;
    out.maps = maps_single_vs_largest(out.reports);
    out.summary = {{"mode", "sweep"},
                   {"reports", reports_summary(out.reports)},
                   {"coverage_maps", maps_summary(out.maps)},
                   {"convexity_gap", result.convexity_gap},
                   {"convexity_holds", result.convexity_holds()}};
    return out;
}

} // namespace

nlohmann::json run_evaluate(const EvaluateOptions& options) {
    const auto started = Clock::now();
    normal_interval_z(options.level);
    const GridField predictand = load_grid(options.predictand);
    nlohmann::json inputs = {{options.predictand.string(), io::sha256_file(options.predictand)}};
    EvaluationOutput out;
    if (options.sweep) {
        if (options.ensemble_dir.empty() || options.predictors.empty()) {
            throw ValueError("--sweep needs --ensemble and --predictors");
        }
        const Ensemble ens = load_ensemble(options.ensemble_dir);
        const GridField predictors = load_grid(options.predictors);
        out = evaluate_sweep(ens, predictors, predictand, periods_or_default(options.periods),
                             {options.season, options.level, options.weighting});
        inputs[options.predictors.string()] = io::sha256_file(options.predictors);
        inputs[(options.ensemble_dir / "ensemble.json").string()] = io::sha256_file(options.ensemble_dir / "ensemble.json");
    } else {
        if (options.predictions.empty()) throw ValueError("evaluate needs prediction files or --sweep");
        out = evaluate_files(options, predictand);
        for (const auto& p : options.predictions) inputs[p.string()] = io::sha256_file(p);
    }
    write_evaluation(options.out_dir, out, predictand);
    nlohmann::json cfg = {{"periods", period_labels(periods_or_default(options.periods))},
                          {"season", season_label(options.season)},
                          {"level", options.level},
                          {"weighting", options.weighting == SpatialWeighting::cos_lat ? "cos_lat" : "uniform"},
                          {"sweep", options.sweep}};
    return write_manifest(options.out_dir, "evaluate", cfg, nlohmann::json::object(), inputs, started);
}

// --- experiment ------------------------------------------------------------

std::uint64_t repeat_seed(std::uint64_t seed, std::size_t r) { return derive_seed(seed, 100 + r); }

namespace {

nlohmann::json repeat_verdict(const SweepResult& sweep, const std::vector<CoverageMapReport>& maps,
                              const std::vector<PeriodSpec>& periods, std::size_t members, const Tensor& land_mask) {
    nlohmann::json out = nlohmann::json::object();
    const std::size_t per_period = members;
    for (std::size_t i = 0; i < periods.size(); ++i) {
        const std::string label = periods[i].label();
        const EvalReport& single = sweep.at(label, 1);
        const EvalReport& full = sweep.at(label, members);
        nlohmann::json p = {
            {"rmse_single", single.rmse.spatial_mean},
            {"rmse_ensemble", full.rmse.spatial_mean},
            {"rmse_gain", single.rmse.spatial_mean - full.rmse.spatial_mean},
            {"coverage_single", single.coverage.spatial_mean},
            {"coverage_ensemble", full.coverage.spatial_mean},
            {"coverage_gain", full.coverage.spatial_mean - single.coverage.spatial_mean},
        };
        if (members >= 2) {
            const EvalReport& two = sweep.at(label, 2);
            p["coverage_m2"] = two.coverage.spatial_mean;
            p["coverage_gain_vs_m2"] = full.coverage.spatial_mean - two.coverage.spatial_mean;
        }
        double gap = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < per_period; ++k) gap = std::max(gap, sweep.convexity_gap[i * per_period + k]);
        p["convexity_gap_max"] = gap;
        p["convexity_holds"] = gap <= 1e-12;
        for (const auto& m : maps) {
            if (m.period != label) continue;
            p["map_difference_mean"] = m.difference_mean;
            std::vector<double> ocean(land_mask.size());
            for (std::size_t g = 0; g < ocean.size(); ++g) ocean[g] = 1.0 - land_mask.data()[g];
            p["land_difference_mean"] = masked_mean(m.difference, land_mask.data());
            p["ocean_difference_mean"] = masked_mean(m.difference, ocean);
        }
        out[label] = p;
    }
    return out;
}

nlohmann::json experiment_checks(const nlohmann::json& median_periods, const std::vector<PeriodSpec>& periods,
                                 bool convexity_all, std::size_t members) {
    bool coverage_ok = true;
    bool rmse_ok = true;
    for (const auto& p : periods) {
        const auto& m = median_periods.at(p.label());
        coverage_ok = coverage_ok && m.at("coverage_gain").get<double>() >= 0.0;
        rmse_ok = rmse_ok && m.at("rmse_gain").get<double>() >= 0.0;
    }
    const auto& first = median_periods.at(periods.front().label());
    const auto& last = median_periods.at(periods.back().label());
    nlohmann::json checks = {
        {"coverage_not_worse_every_period", coverage_ok},
        {"coverage_gain_grows_with_lead", last.at("coverage_gain").get<double>() > first.at("coverage_gain").get<double>()},
        {"rmse_not_worse_every_period", rmse_ok},
        {"last_period_map_difference_positive",
         last.contains("map_difference_mean") && last.at("map_difference_mean").get<double>() > 0.0},
        {"last_period_full_vs_two_members",
         members >= 2 && last.contains("coverage_gain_vs_m2") && last.at("coverage_gain_vs_m2").get<double>() >= 0.0},
        {"convexity_every_run", convexity_all},
    };
    return checks;
}

} // namespace

nlohmann::json run_experiment(const ExperimentOptions& options) {
    const auto started = Clock::now();
    if (options.repeats == 0) throw ValueError("--repeats must be at least 1");
    if (options.members == 0) throw ValueError("--members must be at least 1");
    options.synth.validate();
    options.train.validate();
    options.split.validate();
    normal_interval_z(options.level);
    const std::size_t workers = options.workers ? options.workers : default_workers(options.members);
    fs::create_directories(options.out_dir);

    nlohmann::json repeats = nlohmann::json::array();
    nlohmann::json seeds = {{"seed", options.seed}, {"repeats", nlohmann::json::array()}};
    bool convexity_all = true;
    std::map<std::string, std::map<std::string, std::vector<double>>> collected;

    for (std::size_t r = 0; r < options.repeats; ++r) {
        const auto repeat_started = Clock::now();
        char name[32];
        std::snprintf(name, sizeof name, "repeat_%02zu", r);
        const fs::path dir = options.out_dir / name;
        fs::create_directories(dir);
        const std::uint64_t data_seed = repeat_seed(options.seed, r);
        const std::uint64_t ensemble_seed = derive_seed(data_seed, 7);
        progress("repeat " + std::to_string(r + 1) + "/" + std::to_string(options.repeats) + ", data seed " +
                 std::to_string(data_seed));

        const PseudoReality data = stage("synth", [&] {
            auto pr = generate_pseudo_reality(options.synth, data_seed);
            if (options.write_data) write_synth_outputs(dir / "data", pr, options.synth, data_seed, repeat_started);
            return pr;
        });

        const DeepESDConfig model = model_config_for(data.predictors, data.predictand, options.model);
        const Ensemble ens = stage("train", [&] {
            const TrainInputs window = training_window(data.predictors, data.predictand, options.split.train);
            auto e = train_ensemble(window.x, window.y, model, options.train, options.members, ensemble_seed, workers);
            const fs::path ens_dir = dir / "ensemble";
            save_ensemble(e, ens_dir);
            write_manifest(ens_dir, "train",
                           train_run_config(model, options.train, options.split.train, options.members, workers),
                           {{"root_seed", ensemble_seed}, {"member_seeds", e.member_seeds}}, nlohmann::json::object(),
                           repeat_started);
            return e;
        });

        if (options.write_predictions) {
            stage("predict", [&] {
                const fs::path pred_dir = dir / "predictions";
                fs::create_directories(pred_dir);
                for (const auto& period : options.split.eval) {
                    const GridField x = select_period(data.predictors, period);
                    for (std::size_t used : {std::size_t{1}, options.members}) {
                        const auto pred = predict_ensemble(ens, x, used);
                        save_grid(prediction_grid(pred, ens.target, x.time, options.level, period.label()),
                                  pred_dir / prediction_file_name(period, used));
                    }
                }
                write_manifest(pred_dir, "predict",
                               {{"periods", period_labels(options.split.eval)}, {"level", options.level}},
                               {{"root_seed", ensemble_seed}}, nlohmann::json::object(), repeat_started);
            });
        }

        const nlohmann::json verdict = stage("evaluate", [&] {
            const SweepResult sweep = sweep_ensemble_size(ens, data.predictors, data.predictand, options.split.eval,
                                                          {options.season, options.level, SpatialWeighting::uniform});
            EvaluationOutput out;
            out.reports = sweep.reports;
            out.maps = maps_single_vs_largest(out.reports);
            out.summary = {{"mode", "sweep"},
                           {"reports", reports_summary(out.reports)},
                           {"coverage_maps", maps_summary(out.maps)},
                           {"convexity_gap", sweep.convexity_gap},
                           {"convexity_holds", sweep.convexity_holds()}};
            write_evaluation(dir, out, data.predictand);
            convexity_all = convexity_all && sweep.convexity_holds();
            nlohmann::json v = {{"repeat", r},
                                {"data_seed", data_seed},
                                {"ensemble_seed", ensemble_seed},
                                {"periods", repeat_verdict(sweep, out.maps, options.split.eval, options.members,
                                                           data.truth.land_mask)},
                                {"best_epochs", nlohmann::json::array()}};
            for (const auto& m : ens.members) v["best_epochs"].push_back(m.best_epoch);
            write_json(dir / "verdict.json", v);
            return v;
        });

        for (const auto& [label, values] : verdict.at("periods").items()) {
            for (const auto& [key, value] : values.items()) {
                if (value.is_number()) collected[label][key].push_back(value.get<double>());
            }
        }
        repeats.push_back(verdict);
        seeds["repeats"].push_back({{"data_seed", data_seed}, {"ensemble_seed", ensemble_seed}});
        write_manifest(dir, "experiment-repeat", {{"repeat", r}}, {{"data_seed", data_seed}, {"ensemble_seed", ensemble_seed}},
                       nlohmann::json::object(), repeat_started);
    }

    nlohmann::json median_periods = nlohmann::json::object();
    for (const auto& [label, keys] : collected) {
        for (const auto& [key, values] : keys) median_periods[label][key] = median(values);
    }
    const nlohmann::json checks = experiment_checks(median_periods, options.split.eval, convexity_all, options.members);
    bool pass = true;
    for (const auto& [k, v] : checks.items()) pass = pass && v.get<bool>();

    const nlohmann::json verdict = {{"format", "ENSDOWN-VERDICT-v1"},
                                    {"members", options.members},
                                    {"season", season_label(options.season)},
                                    {"level", options.level},
                                    {"repeats", repeats},
                                    {"median", median_periods},
                                    {"checks", checks},
                                    {"pass", pass}};
    write_json(options.out_dir / "verdict.json", verdict);

    const nlohmann::json cfg = {{"synth", options.synth.to_json()},
                                {"model", options.model.to_json()},
                                {"train", options.train.to_json()},
                                {"train_period", options.split.train.label()},
                                {"periods", period_labels(options.split.eval)},
                                {"season", season_label(options.season)},
                                {"level", options.level},
                                {"members", options.members},
                                {"repeats", options.repeats},
                                {"workers", workers},
                                {"write_data", options.write_data},
                                {"write_predictions", options.write_predictions}};
    write_manifest(options.out_dir, "experiment", cfg, seeds, nlohmann::json::object(), started);
    return verdict;
}

} // namespace ensdown::cli
