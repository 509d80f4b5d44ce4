#include "ensdown/training.hpp"

#include "ensdown/error.hpp"
#include "ensdown/seeds.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iostream>
#include <numbers>
#include <numeric>
#include <random>

namespace ensdown {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178; // 0.5 * ln(2*pi)

nlohmann::json period_json(const PeriodSpec& p) {
    return {{"start_year", p.start_year}, {"end_year", p.end_year}, {"months", p.months}};
}

PeriodSpec period_from_json(const nlohmann::json& j) {
    return PeriodSpec(j.at("start_year").get<int>(), j.at("end_year").get<int>(), j.at("months").get<std::set<int>>());
}

/// Samples `idx` of a [N, ...] tensor gathered into a new [|idx|, ...] tensor.
Tensor gather_rows(const Tensor& t, std::span<const std::size_t> idx) {
    const std::size_t row = t.size() / t.dim(0);
    Shape shape = t.shape();
    shape[0] = idx.size();
    Tensor out(shape);
    for (std::size_t k = 0; k < idx.size(); ++k) {
        std::copy_n(t.data().data() + idx[k] * row, row, out.data().data() + k * row);
    }
    return out;
}

struct Adam {
    explicit Adam(const ModelParams& params, const TrainConfig& cfg) : cfg(cfg) {
        for (const auto& t : params.tensors) {
            m.emplace_back(t.value.size(), 0.0);
            v.emplace_back(t.value.size(), 0.0);
        }
    }

    void step(ModelParams& params, const std::vector<Tensor>& grads) {
        ++t;
        const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(t));
        const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2, lr = cfg.learning_rate, eps = cfg.adam_epsilon;
        for (std::size_t p = 0; p < grads.size(); ++p) {
            // restrict-qualified pointers let the update vectorize
            double* __restrict w = params.tensors[p].value.data().data();
            double* __restrict mp = m[p].data();
            double* __restrict vp = v[p].data();
            const double* __restrict g = grads[p].data().data();
            const std::size_t n = m[p].size();
            for (std::size_t i = 0; i < n; ++i) {
                mp[i] = b1 * mp[i] + (1.0 - b1) * g[i];
                vp[i] = b2 * vp[i] + (1.0 - b2) * g[i] * g[i];
                const double mhat = mp[i] / bc1;
                const double vhat = vp[i] / bc2;
                w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

    const TrainConfig& cfg;
    std::vector<std::vector<double>> m, v;
    std::uint64_t t = 0;
};

void set_output_bias(ModelParams& params, const Tensor& targets, const std::vector<std::size_t>& rows) {
    const std::size_t G = params.config.n_output_gridpoints;
    const double floor = params.config.sigma_floor;
    Tensor& bias = params.tensors.back().value;
    for (std::size_t g = 0; g < G; ++g) {
        double mean = 0.0;
        for (std::size_t r : rows) mean += targets[r * G + g];
        mean /= static_cast<double>(rows.size());
        double ss = 0.0;
        for (std::size_t r : rows) ss += (targets[r * G + g] - mean) * (targets[r * G + g] - mean);
        const double s = std::max(std::sqrt(ss / static_cast<double>(rows.size())) - floor, 1e-3);
        bias[g] = mean;
        bias[G + g] = s > 30.0 ? s : std::log(std::expm1(s)); // softplus inverse
    }
}

} // namespace

// ---------------------------------------------------------------------------

nlohmann::json StandardizationStats::to_json() const {
    return {{"shape", mean.shape()},
            {"mean", mean.storage()},
            {"std", std.storage()},
            {"computed_over", period_json(computed_over)},
            {"constant_cells", constant_cells}};
}

StandardizationStats StandardizationStats::from_json(const nlohmann::json& j) {
    StandardizationStats s;
    const auto shape = j.at("shape").get<Shape>();
    s.mean = Tensor(shape, j.at("mean").get<std::vector<double>>());
    s.std = Tensor(shape, j.at("std").get<std::vector<double>>());
    s.computed_over = period_from_json(j.at("computed_over"));
    s.constant_cells = j.at("constant_cells").get<std::size_t>();
    return s;
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw ValueError("train config: learning_rate must be > 0");
    if (batch_size == 0) throw ValueError("train config: batch_size must be > 0");
    if (max_epochs == 0) throw ValueError("train config: max_epochs must be > 0");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ValueError("train config: val_fraction must be in (0,1)");
    if (patience >= max_epochs) throw ValueError("train config: patience must be smaller than max_epochs");
}

nlohmann::json TrainConfig::to_json() const {
    return {{"learning_rate", learning_rate}, {"batch_size", batch_size}, {"max_epochs", max_epochs},
            {"patience", patience},           {"val_fraction", val_fraction}, {"seed", seed},
            {"adam_beta1", adam_beta1},       {"adam_beta2", adam_beta2},     {"adam_epsilon", adam_epsilon},
            {"init_output_bias", init_output_bias}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.seed = j.value("seed", c.seed);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
    c.init_output_bias = j.value("init_output_bias", c.init_output_bias);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------

double gaussian_nll(std::span<const double> mu, std::span<const double> sigma2, std::span<const double> y) {
    if (mu.size() != sigma2.size() || mu.size() != y.size()) {
        throw ShapeError("gaussian_nll: mu, sigma2 and y sizes differ");
    }
    if (mu.empty()) throw ShapeError("gaussian_nll: empty input");
    double total = 0.0;
    for (std::size_t i = 0; i < mu.size(); ++i) {
        if (!(sigma2[i] > 0.0)) throw ValueError("gaussian_nll: sigma2 must be positive");
        const double r = y[i] - mu[i];
        total += kHalfLog2Pi + 0.5 * std::log(sigma2[i]) + r * r / (2.0 * sigma2[i]);
    }
    return total / static_cast<double>(mu.size());
}

ad::Var gaussian_nll(const ad::Var& mu, const ad::Var& sigma2, const Tensor& y) {
    if (mu.shape() != sigma2.shape() || mu.shape() != y.shape()) {
        throw ShapeError("gaussian_nll: shapes " + shape_string(mu.shape()) + ", " + shape_string(sigma2.shape()) +
                         ", " + shape_string(y.shape()) + " differ");
    }
    const double loss = gaussian_nll(mu.value().data(), sigma2.value().data(), y.data());
    ad::Var m = mu, s = sigma2;
    return mu.tape().record("gaussian_nll", Tensor::scalar(loss), {mu, sigma2}, [m, s, y](ad::Tape& tape, const Tensor& g) {
        const auto mv = m.value().data();
        const auto sv = s.value().data();
        const double scale = g.item() / static_cast<double>(mv.size());
        std::vector<double> dmu(mv.size()), ds(mv.size());
        for (std::size_t i = 0; i < mv.size(); ++i) {
            const double r = y[i] - mv[i];
            dmu[i] = -scale * r / sv[i];
            ds[i] = scale * (0.5 / sv[i] - r * r / (2.0 * sv[i] * sv[i]));
        }
        tape.accumulate(m, dmu);
        tape.accumulate(s, ds);
    });
}

// ---------------------------------------------------------------------------

StandardizationStats fit_standardizer(const GridField& x, const PeriodSpec& period) {
    const GridField sel = select_period(x, period);
    const std::size_t t_count = sel.steps();
    const std::size_t cells = sel.step_size();
    const Shape cell_shape{sel.channels(), sel.height(), sel.width()};

    StandardizationStats stats;
    stats.mean = Tensor(cell_shape, 0.0);
    stats.std = Tensor(cell_shape, 0.0);
    stats.computed_over = period;
    const double* v = sel.values.data().data();
    for (std::size_t t = 0; t < t_count; ++t) {
        for (std::size_t c = 0; c < cells; ++c) stats.mean[c] += v[t * cells + c];
    }
    for (std::size_t c = 0; c < cells; ++c) stats.mean[c] /= static_cast<double>(t_count);
    for (std::size_t t = 0; t < t_count; ++t) {
        for (std::size_t c = 0; c < cells; ++c) {
            const double d = v[t * cells + c] - stats.mean[c];
            stats.std[c] += d * d;
        }
    }
    for (std::size_t c = 0; c < cells; ++c) {
        double sd = std::sqrt(stats.std[c] / static_cast<double>(t_count));
        if (!(sd > 1e-12 * std::max(1.0, std::abs(stats.mean[c])))) {
            sd = 1.0;
            ++stats.constant_cells;
        }
        stats.std[c] = sd;
    }
    if (stats.constant_cells > 0) {
        std::cerr << "warning: " << stats.constant_cells
                  << " predictor cell(s) constant over the training period; their std was set to 1\n";
    }
    return stats;
}

namespace {

GridField transform(const GridField& x, const StandardizationStats& stats, bool forward) {
    const Shape cell_shape{x.channels(), x.height(), x.width()};
    if (stats.mean.shape() != cell_shape || stats.std.shape() != cell_shape) {
        throw ShapeError("standardizer shape " + shape_string(stats.mean.shape()) + " does not match field cells " +
                         shape_string(cell_shape));
    }
    GridField out = x;
    const std::size_t cells = x.step_size();
    auto v = out.values.data();
    for (std::size_t t = 0; t < x.steps(); ++t) {
        for (std::size_t c = 0; c < cells; ++c) {
            double& e = v[t * cells + c];
            e = forward ? (e - stats.mean[c]) / stats.std[c] : e * stats.std[c] + stats.mean[c];
        }
    }
    return out;
}

} // namespace

GridField apply_standardizer(const GridField& x, const StandardizationStats& stats) {
    return transform(x, stats, true);
}

GridField invert_standardizer(const GridField& z, const StandardizationStats& stats) {
    return transform(z, stats, false);
}

TrainValSplit split_train_val(std::size_t n_samples, double val_fraction, std::uint64_t seed) {
    if (n_samples < 10) throw ValueError("split_train_val: need at least 10 samples, got " + std::to_string(n_samples));
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ValueError("split_train_val: val_fraction must be in (0,1)");
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n_samples)));
    std::vector<std::size_t> perm(n_samples);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    TrainValSplit split;
    split.val.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
    split.train.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_val), perm.end());
    std::sort(split.val.begin(), split.val.end());
    std::sort(split.train.begin(), split.train.end());
    return split;
}

double evaluate_nll(const ModelParams& params, const Tensor& x, const Tensor& y) {
    const Prediction pred = forward(params, x);
    return gaussian_nll(pred.mu.data(), pred.sigma2.data(), y.data());
}

TrainedModel train(const GridField& x, const GridField& y, const DeepESDConfig& model_config,
                   const TrainConfig& train_config, const TrainObserver* observer) {
    model_config.validate();
    train_config.validate();
    x.validate();
    y.validate();
    if (x.time != y.time) throw ValueError("train: predictors and predictand are not time-aligned");
    if (y.channels() != 1) throw ShapeError("train: predictand must have exactly one channel");
    if (y.height() * y.width() != model_config.n_output_gridpoints) {
        throw ShapeError("train: predictand has " + std::to_string(y.height() * y.width()) +
                         " gridpoints, model expects " + std::to_string(model_config.n_output_gridpoints));
    }
    if (x.channels() != model_config.input_channels || x.height() != model_config.coarse_height ||
        x.width() != model_config.coarse_width) {
        throw ShapeError("train: predictor grid does not match the model config");
    }

    TrainedModel result;
    const PeriodSpec span(year_of(x.time.front()), year_of(x.time.back()));
    result.stats = fit_standardizer(x, span);
    const Tensor inputs = apply_standardizer(x, result.stats).values;
    const Tensor targets = y.values.reshaped(Shape{y.steps(), model_config.n_output_gridpoints});

    const std::uint64_t seed = train_config.seed;
    const TrainValSplit split = split_train_val(x.steps(), train_config.val_fraction, derive_seed(seed, 2));
    const Tensor x_val = gather_rows(inputs, split.val);
    const Tensor y_val = gather_rows(targets, split.val);

    ModelParams params = init_params(model_config, derive_seed(seed, 1));
    params.metadata["train_seed"] = seed;
    if (train_config.init_output_bias) set_output_bias(params, targets, split.train);
    Adam adam(params, train_config);

    EpochRecord initial;
    initial.epoch = 0;
    {
        const Tensor x_tr = gather_rows(inputs, split.train);
        const Tensor y_tr = gather_rows(targets, split.train);
        try {
            initial.train_nll = evaluate_nll(params, x_tr, y_tr);
            initial.val_nll = evaluate_nll(params, x_val, y_val);
        } catch (const NonFiniteError& e) {
            throw DivergenceError(std::string("epoch 0: ") + e.what());
        }
    }
    initial.is_best = true;
    result.history.push_back(initial);
    if (observer && observer->on_epoch) observer->on_epoch(initial);

    ModelParams best = params;
    double best_val = initial.val_nll;
    std::size_t best_epoch = 0;
    std::size_t since_best = 0;
    std::size_t epoch = 0;

    std::vector<std::size_t> order = split.train;
    while (epoch < train_config.max_epochs) {
        ++epoch;
        std::mt19937_64 shuffle_rng(derive_seed(seed, 1000 + epoch));
        order = split.train;
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double loss_sum = 0.0;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += train_config.batch_size, ++batch_index) {
            const std::size_t count = std::min(train_config.batch_size, order.size() - start);
            const std::span<const std::size_t> batch(order.data() + start, count);
            if (observer && observer->on_batch) observer->on_batch(epoch, batch);

            ad::Tape tape;
            std::vector<ad::Var> vars;
            vars.reserve(params.tensors.size());
            for (auto& t : params.tensors) vars.push_back(tape.parameter(std::move(t.value)));
            double loss_value = 0.0;
            try {
                const ad::Var xb = tape.constant(gather_rows(inputs, batch));
                const HeadOutputs head = forward_graph(model_config, vars, xb);
                const ad::Var loss = gaussian_nll(head.mu, head.sigma2, gather_rows(targets, batch));
                loss_value = loss.value().item();
                if (!std::isfinite(loss_value)) throw NonFiniteError("loss is not finite");
                tape.backward(loss);
            } catch (const NonFiniteError& e) {
                throw DivergenceError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index) +
                                      ": " + e.what());
            } catch (const ValueError& e) {
                throw DivergenceError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index) +
                                      ": " + e.what());
            }
            std::vector<Tensor> grads;
            grads.reserve(vars.size());
            for (std::size_t i = 0; i < vars.size(); ++i) {
                grads.push_back(tape.take_grad(vars[i]));
                params.tensors[i].value = tape.take_value(vars[i]);
            }
            adam.step(params, grads);
            loss_sum += loss_value * static_cast<double>(count);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_nll = loss_sum / static_cast<double>(order.size());
        try {
            rec.val_nll = evaluate_nll(params, x_val, y_val);
        } catch (const NonFiniteError& e) {
            throw DivergenceError("epoch " + std::to_string(epoch) + ", validation: " + e.what());
        }
        if (!std::isfinite(rec.val_nll)) {
            throw DivergenceError("epoch " + std::to_string(epoch) + ": non-finite validation NLL");
        }
        if (rec.val_nll < best_val) {
            best_val = rec.val_nll;
            best = params;
            best_epoch = epoch;
            since_best = 0;
            rec.is_best = true;
            for (auto& h : result.history) h.is_best = false;
        } else {
            ++since_best;
        }
        result.history.push_back(rec);
        if (observer && observer->on_epoch) observer->on_epoch(rec);
        if (since_best >= train_config.patience) break;
    }

    best.metadata["best_epoch"] = best_epoch;
    result.params = std::move(best);
    result.stopped_epoch = epoch;
    result.best_epoch = best_epoch;
    result.best_val_nll = best_val;
    return result;
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string history_csv(const std::vector<EpochRecord>& history) {
    std::string out = "epoch,train_nll,val_nll,is_best\n";
    for (const auto& h : history) {
        out += std::to_string(h.epoch) + "," + format_double(h.train_nll) + "," + format_double(h.val_nll) + "," +
               (h.is_best ? "1" : "0") + "\n";
    }
    return out;
}

} // namespace ensdown
