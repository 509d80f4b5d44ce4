#pragma once

#include "ensdown/grid.hpp"
#include "ensdown/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <vector>

namespace ensdown {

/// Parameters of the synthetic pseudo-reality.
///
/// A latent daily temperature-like state lives on the fine grid:
///
///   L(t,g) = clim(g) + seasonal_amplitude * S(g) * season(t)
///          + warming_rate/10 * W(g) * max(0, t_years - trend_start_year)
///          + sum_k a_k(t) * E_k(g)
///
/// with AR(1) weather amplitudes a_k. Predictors are linear projections of
/// the coarse block means of L plus noise; the predictand is a smooth
/// saturating map of L plus noise amplified in summer.
struct SynthConfig {
    std::size_t coarse_height = 8;
    std::size_t coarse_width = 8;
    std::size_t fine_height = 32;
    std::size_t fine_width = 32;
    std::size_t channels = 12;
    int start_year = 1970;
    int end_year = 2100;
    double lat_min = 25.0;
    double lat_max = 55.0;
    double lon_min = -135.0;
    double lon_max = -100.0;

    double base_level = 15.0;          // domain-mean climatology
    double pattern_amplitude = 5.0;    // spatial spread of the climatology
    double seasonal_amplitude = 8.0;   // half the summer-winter contrast
    double warming_rate = 0.4;         // units per decade
    int trend_start_year = 2006;
    double latent_noise = 2.0;         // std of day-to-day weather anomalies
    double latent_persistence = 0.7;   // lag-1 autocorrelation of the weather
    std::size_t latent_modes = 4;
    double coarse_noise = 0.3;         // predictor noise, latent units
    double fine_noise = 0.5;           // predictand noise outside summer
    double summer_noise_multiplier = 2.0;
    double nonlinearity = 0.6;         // strength of the saturating term
    double saturation_scale = 3.0;
    double ocean_signal = 0.35;        // seasonal/nonlinear weight of low-signal cells
    std::uint64_t pattern_seed = 20230501;

    void validate() const;
    nlohmann::json to_json() const;
    static SynthConfig from_json(const nlohmann::json& j);

    friend bool operator==(const SynthConfig&, const SynthConfig&) = default;
};

/// Ground truth behind a generated dataset. Maps are [fine_height, fine_width].
struct SynthTruth {
    Tensor climatology;
    Tensor seasonal_pattern;
    Tensor warming_pattern; // positive, spatial mean 1
    Tensor modes;           // [K, H, W]
    Tensor nonlinearity;    // per-gridpoint strength of the saturating term
    Tensor land_mask;       // 1 = high-signal ("land") cell, 0 = low-signal
    std::vector<double> channel_gain;
    std::vector<double> channel_offset;
    double persistence = 0.0;
    double saturation_scale = 1.0;
    /// Latent state [T,1,H,W], only filled on request.
    std::optional<GridField> latent;

    /// Noise-free predictand at `gridpoint` for latent value `latent_value`.
    double predictand_signal(double latent_value, std::size_t gridpoint) const;

    nlohmann::json to_json() const;
};

struct PseudoReality {
    GridField predictors; // [T, channels, coarse_h, coarse_w]
    GridField predictand; // [T, 1, fine_h, fine_w]
    SynthTruth truth;
};

/// Deterministic in (config, seed). Throws ValueError for an invalid grid ratio.
PseudoReality generate_pseudo_reality(const SynthConfig& config, std::uint64_t seed, bool keep_latent = false);

/// Seasonal shape in [-1, 1]; -1 on 1 January, +1 in early July.
double season_phase(DayIndex day);

/// Years elapsed since `trend_start_year` at the middle of `day`, clipped at 0.
double years_since(DayIndex day, int trend_start_year);

} // namespace ensdown
