#include "ensdown/synth.hpp"

#include "ensdown/error.hpp"
#include "ensdown/seeds.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace ensdown {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Sum of a few low-wavenumber plane waves, scaled to zero mean and unit RMS.
Tensor smooth_field(std::size_t h, std::size_t w, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> wave(0.3, 1.6);
    std::uniform_real_distribution<double> phase(0.0, kTwoPi);
    std::uniform_real_distribution<double> amp(0.5, 1.0);
    std::bernoulli_distribution flip(0.5);
    struct Wave {
        double kx, ky, phi, a;
    };
    std::vector<Wave> waves;
    for (int q = 0; q < 4; ++q) {
        Wave wv{wave(rng), wave(rng), phase(rng), amp(rng)};
        if (flip(rng)) wv.kx = -wv.kx;
        waves.push_back(wv);
    }
    Tensor f(Shape{h, w});
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            const double v = (static_cast<double>(i) + 0.5) / static_cast<double>(h);
            const double u = (static_cast<double>(j) + 0.5) / static_cast<double>(w);
            double s = 0.0;
            for (const auto& wv : waves) s += wv.a * std::cos(kTwoPi * (wv.kx * u + wv.ky * v) + wv.phi);
            f[i * w + j] = s;
        }
    }
    double mean = 0.0;
    for (double x : f.data()) mean += x;
    mean /= static_cast<double>(f.size());
    double ss = 0.0;
    for (double& x : f.data()) {
        x -= mean;
        ss += x * x;
    }
    const double rms = std::sqrt(ss / static_cast<double>(f.size()));
    if (rms > 0.0) {
        for (double& x : f.data()) x /= rms;
    }
    return f;
}

const char* const kVariableGroups[] = {"z", "ta", "hus"};
const char* const kLevels[] = {"500", "750", "800", "1000"};

} // namespace

void SynthConfig::validate() const {
    if (coarse_height == 0 || coarse_width == 0 || fine_height == 0 || fine_width == 0 || channels == 0) {
        throw ValueError("synth config: grid sizes and channel count must be positive");
    }
    if (fine_height % coarse_height != 0 || fine_width % coarse_width != 0) {
        throw ValueError("synth config: fine grid " + std::to_string(fine_height) + "x" + std::to_string(fine_width) +
                         " must be an integer multiple of the coarse grid " + std::to_string(coarse_height) + "x" +
                         std::to_string(coarse_width));
    }
    if (start_year > end_year) throw ValueError("synth config: start_year after end_year");
    if (latent_noise < 0.0 || coarse_noise < 0.0 || fine_noise < 0.0) {
        throw ValueError("synth config: noise levels must be >= 0");
    }
    if (summer_noise_multiplier < 0.0) throw ValueError("synth config: summer_noise_multiplier must be >= 0");
    if (!(latent_persistence >= 0.0 && latent_persistence < 1.0)) {
        throw ValueError("synth config: latent_persistence must be in [0,1)");
    }
    if (!(saturation_scale > 0.0)) throw ValueError("synth config: saturation_scale must be > 0");
    if (nonlinearity <= -1.0) throw ValueError("synth config: nonlinearity must exceed -1 to keep the map monotone");
    if (!(lat_min < lat_max) || !(lon_min < lon_max)) throw ValueError("synth config: empty lat/lon box");
}

nlohmann::json SynthConfig::to_json() const {
    return {{"coarse_height", coarse_height},
            {"coarse_width", coarse_width},
            {"fine_height", fine_height},
            {"fine_width", fine_width},
            {"channels", channels},
            {"start_year", start_year},
            {"end_year", end_year},
            {"lat_min", lat_min},
            {"lat_max", lat_max},
            {"lon_min", lon_min},
            {"lon_max", lon_max},
            {"base_level", base_level},
            {"pattern_amplitude", pattern_amplitude},
            {"seasonal_amplitude", seasonal_amplitude},
            {"warming_rate", warming_rate},
            {"trend_start_year", trend_start_year},
            {"latent_noise", latent_noise},
            {"latent_persistence", latent_persistence},
            {"latent_modes", latent_modes},
            {"coarse_noise", coarse_noise},
            {"fine_noise", fine_noise},
            {"summer_noise_multiplier", summer_noise_multiplier},
            {"nonlinearity", nonlinearity},
            {"saturation_scale", saturation_scale},
            {"ocean_signal", ocean_signal},
            {"pattern_seed", pattern_seed}};
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
    SynthConfig c;
#define ENSDOWN_FIELD(name) c.name = j.value(#name, c.name)
    ENSDOWN_FIELD(coarse_height);
    ENSDOWN_FIELD(coarse_width);
    ENSDOWN_FIELD(fine_height);
    ENSDOWN_FIELD(fine_width);
    ENSDOWN_FIELD(channels);
    ENSDOWN_FIELD(start_year);
    ENSDOWN_FIELD(end_year);
    ENSDOWN_FIELD(lat_min);
    ENSDOWN_FIELD(lat_max);
    ENSDOWN_FIELD(lon_min);
    ENSDOWN_FIELD(lon_max);
    ENSDOWN_FIELD(base_level);
    ENSDOWN_FIELD(pattern_amplitude);
    ENSDOWN_FIELD(seasonal_amplitude);
    ENSDOWN_FIELD(warming_rate);
    ENSDOWN_FIELD(trend_start_year);
    ENSDOWN_FIELD(latent_noise);
    ENSDOWN_FIELD(latent_persistence);
    ENSDOWN_FIELD(latent_modes);
    ENSDOWN_FIELD(coarse_noise);
    ENSDOWN_FIELD(fine_noise);
    ENSDOWN_FIELD(summer_noise_multiplier);
    ENSDOWN_FIELD(nonlinearity);
    ENSDOWN_FIELD(saturation_scale);
    ENSDOWN_FIELD(ocean_signal);
    ENSDOWN_FIELD(pattern_seed);
#undef ENSDOWN_FIELD
    c.validate();
    return c;
}

double SynthTruth::predictand_signal(double latent_value, std::size_t gridpoint) const {
    const double anomaly = latent_value - climatology[gridpoint];
    return latent_value + nonlinearity[gridpoint] * saturation_scale * std::tanh(anomaly / saturation_scale);
}

nlohmann::json SynthTruth::to_json() const {
    return {{"climatology", climatology.storage()},
            {"seasonal_pattern", seasonal_pattern.storage()},
            {"warming_pattern", warming_pattern.storage()},
            {"modes_shape", modes.shape()},
            {"modes", modes.storage()},
            {"nonlinearity", nonlinearity.storage()},
            {"land_mask", land_mask.storage()},
            {"channel_gain", channel_gain},
            {"channel_offset", channel_offset},
            {"persistence", persistence},
            {"saturation_scale", saturation_scale}};
}

double season_phase(DayIndex day) {
    return -std::cos(kTwoPi * (static_cast<double>(day_of_year(day)) + 0.5) / kDaysPerYear);
}

double years_since(DayIndex day, int trend_start_year) {
    const double t = static_cast<double>(year_of(day)) + (static_cast<double>(day_of_year(day)) + 0.5) / kDaysPerYear;
    return std::max(0.0, t - static_cast<double>(trend_start_year));
}

PseudoReality generate_pseudo_reality(const SynthConfig& config, std::uint64_t seed, bool keep_latent) {
    config.validate();
    const std::size_t fh = config.fine_height, fw = config.fine_width;
    const std::size_t ch = config.coarse_height, cw = config.coarse_width;
    const std::size_t g_count = fh * fw;
    const std::size_t k_modes = config.latent_modes;

    // ---- fixed spatial structure, from the pattern seed ----
    std::mt19937_64 prng(config.pattern_seed);
    SynthTruth truth;
    truth.persistence = config.latent_persistence;
    truth.saturation_scale = config.saturation_scale;
    std::uniform_real_distribution<double> coast_phase(0.0, kTwoPi);
    const double phi = coast_phase(prng);
    truth.land_mask = Tensor(Shape{fh, fw});
    for (std::size_t i = 0; i < fh; ++i) {
        const double v = (static_cast<double>(i) + 0.5) / static_cast<double>(fh);
        const double coast = 0.35 + 0.1 * std::sin(kTwoPi * 1.3 * v + phi);
        for (std::size_t j = 0; j < fw; ++j) {
            const double u = (static_cast<double>(j) + 0.5) / static_cast<double>(fw);
            truth.land_mask[i * fw + j] = u > coast ? 1.0 : 0.0;
        }
    }
    const Tensor clim_noise = smooth_field(fh, fw, prng);
    const Tensor seas_noise = smooth_field(fh, fw, prng);
    const Tensor warm_noise = smooth_field(fh, fw, prng);
    truth.climatology = Tensor(Shape{fh, fw});
    truth.seasonal_pattern = Tensor(Shape{fh, fw});
    truth.warming_pattern = Tensor(Shape{fh, fw});
    truth.nonlinearity = Tensor(Shape{fh, fw});
    double warm_mean = 0.0;
    for (std::size_t i = 0; i < fh; ++i) {
        const double v = (static_cast<double>(i) + 0.5) / static_cast<double>(fh);
        for (std::size_t j = 0; j < fw; ++j) {
            const std::size_t g = i * fw + j;
            const double land = truth.land_mask[g];
            const double signal = config.ocean_signal + (1.0 - config.ocean_signal) * land;
            truth.climatology[g] =
                config.base_level + config.pattern_amplitude * (-1.2 * (v - 0.5) + 0.3 * land + 0.3 * clim_noise[g]);
            truth.seasonal_pattern[g] = std::max(0.05, signal + 0.1 * seas_noise[g]);
            truth.warming_pattern[g] = std::max(0.1, 0.6 + 0.6 * land + 0.4 * v + 0.1 * warm_noise[g]);
            truth.nonlinearity[g] = config.nonlinearity * signal;
            warm_mean += truth.warming_pattern[g];
        }
    }
    warm_mean /= static_cast<double>(g_count);
    for (double& w : truth.warming_pattern.data()) w /= warm_mean;

    truth.modes = Tensor(Shape{k_modes, fh, fw});
    for (std::size_t k = 0; k < k_modes; ++k) {
        const Tensor m = smooth_field(fh, fw, prng);
        const double scale = 1.0 / std::sqrt(static_cast<double>(k_modes));
        for (std::size_t g = 0; g < g_count; ++g) truth.modes[k * g_count + g] = m[g] * scale;
    }

    std::uniform_real_distribution<double> jitter(0.9, 1.1);
    for (std::size_t c = 0; c < config.channels; ++c) {
        const std::size_t group = c % 3;
        const double level = static_cast<double>((c / 3) % 4);
        double gain = 1.0, offset = 0.0;
        switch (group) {
            case 0: // geopotential-like: large offset, strong gain
                gain = 8.0 + 2.0 * level;
                offset = 5500.0 - 1500.0 * level;
                break;
            case 1: // temperature-like, kelvin offset
                gain = 1.0 - 0.1 * level;
                offset = 250.0 + 10.0 * level;
                break;
            default: // humidity-like, tiny magnitudes
                gain = 4e-4;
                offset = 2e-3 + 2e-3 * level;
                break;
        }
        truth.channel_gain.push_back(gain * jitter(prng));
        truth.channel_offset.push_back(offset);
    }

    // ---- daily fields, from the run seed ----
    const std::vector<DayIndex> time = daily_calendar(config.start_year, config.end_year);
    const std::size_t t_count = time.size();
    std::mt19937_64 weather_rng(derive_seed(seed, 1));
    std::mt19937_64 coarse_rng(derive_seed(seed, 2));
    std::mt19937_64 fine_rng(derive_seed(seed, 3));
    std::normal_distribution<double> normal(0.0, 1.0);

    const std::vector<double> lat_f = cell_centers(config.lat_min, config.lat_max, fh);
    const std::vector<double> lon_f = cell_centers(config.lon_min, config.lon_max, fw);
    const std::vector<double> lat_c = cell_centers(config.lat_min, config.lat_max, ch);
    const std::vector<double> lon_c = cell_centers(config.lon_min, config.lon_max, cw);

    PseudoReality out;
    out.predictand.values = Tensor(Shape{t_count, 1, fh, fw});
    out.predictand.variables = {"tas"};
    out.predictand.units = {"degC"};
    out.predictand.lat = lat_f;
    out.predictand.lon = lon_f;
    out.predictand.time = time;
    out.predictand.attributes = {{"source", "ensdown synthetic pseudo-reality"}, {"seed", std::to_string(seed)}};

    out.predictors.values = Tensor(Shape{t_count, config.channels, ch, cw});
    for (std::size_t c = 0; c < config.channels; ++c) {
        out.predictors.variables.push_back(std::string(kVariableGroups[c % 3]) + kLevels[(c / 3) % 4]);
        out.predictors.units.push_back(c % 3 == 0 ? "m" : (c % 3 == 1 ? "K" : "kg kg-1"));
    }
    out.predictors.lat = lat_c;
    out.predictors.lon = lon_c;
    out.predictors.time = time;
    out.predictors.attributes = out.predictand.attributes;

    if (keep_latent) {
        GridField latent;
        latent.values = Tensor(Shape{t_count, 1, fh, fw});
        latent.variables = {"latent"};
        latent.units = {"degC"};
        latent.lat = lat_f;
        latent.lon = lon_f;
        latent.time = time;
        truth.latent = std::move(latent);
    }

    const double innovation = std::sqrt(1.0 - config.latent_persistence * config.latent_persistence);
    std::vector<double> amp(k_modes);
    for (double& a : amp) a = config.latent_noise * normal(weather_rng);

    const std::size_t bh = fh / ch, bw = fw / cw;
    const double block = static_cast<double>(bh * bw);
    std::vector<double> latent_now(g_count);
    std::vector<double> coarse_latent(ch * cw);
    for (std::size_t t = 0; t < t_count; ++t) {
        if (t > 0) {
            for (double& a : amp) a = config.latent_persistence * a + innovation * config.latent_noise * normal(weather_rng);
        }
        const double season = config.seasonal_amplitude * season_phase(time[t]);
        const double trend = config.warming_rate / 10.0 * years_since(time[t], config.trend_start_year);
        const int month = month_of(time[t]);
        const double noise_sd =
            config.fine_noise * (kSummerMonths.count(month) ? config.summer_noise_multiplier : 1.0);

        double* y_row = out.predictand.values.data().data() + t * g_count;
        for (std::size_t g = 0; g < g_count; ++g) {
            double l = truth.climatology[g] + season * truth.seasonal_pattern[g] + trend * truth.warming_pattern[g];
            for (std::size_t k = 0; k < k_modes; ++k) l += amp[k] * truth.modes[k * g_count + g];
            latent_now[g] = l;
            y_row[g] = truth.predictand_signal(l, g) + noise_sd * normal(fine_rng);
        }
        if (truth.latent) {
            std::copy(latent_now.begin(), latent_now.end(), truth.latent->values.data().data() + t * g_count);
        }

        std::fill(coarse_latent.begin(), coarse_latent.end(), 0.0);
        for (std::size_t i = 0; i < fh; ++i) {
            for (std::size_t j = 0; j < fw; ++j) coarse_latent[(i / bh) * cw + j / bw] += latent_now[i * fw + j];
        }
        double* x_row = out.predictors.values.data().data() + t * config.channels * ch * cw;
        for (std::size_t c = 0; c < config.channels; ++c) {
            for (std::size_t cell = 0; cell < ch * cw; ++cell) {
                const double value = coarse_latent[cell] / block + config.coarse_noise * normal(coarse_rng);
                x_row[c * ch * cw + cell] = truth.channel_gain[c] * value + truth.channel_offset[c];
            }
        }
    }
    out.truth = std::move(truth);
    return out;
}

} // namespace ensdown
