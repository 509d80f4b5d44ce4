#pragma once

#include "ensdown/autodiff.hpp"
#include "ensdown/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ensdown {

/// Shape of a DeepESD network: a stack of same-padded conv+ReLU layers over
/// the coarse predictor grid, flattened into one dense layer that emits a
/// mean and a raw scale value for every predictand gridpoint.
struct DeepESDConfig {
    std::size_t input_channels = 12;
    std::size_t coarse_height = 8;
    std::size_t coarse_width = 8;
    std::vector<std::size_t> conv_channels{50, 25, 10};
    std::size_t kernel_size = 3;
    std::size_t n_output_gridpoints = 1024;
    double sigma_floor = 1e-3;

    void validate() const;
    std::size_t flat_features() const;
    std::size_t parameter_count() const;

    nlohmann::json to_json() const;
    static DeepESDConfig from_json(const nlohmann::json& j);

    friend bool operator==(const DeepESDConfig&, const DeepESDConfig&) = default;
};

struct NamedTensor {
    std::string name;
    Tensor value;

    friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Trainable weights in declared layer order:
/// conv{i}.kernel, conv{i}.bias for each conv layer, then dense.weight, dense.bias.
struct ModelParams {
    DeepESDConfig config;
    std::uint64_t seed = 0;
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    std::size_t parameter_count() const;
    const Tensor& at(std::string_view name) const;

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

/// Per-step, per-gridpoint Gaussian parameters. `mu` and `sigma2` are [T, G].
struct Prediction {
    Tensor mu;
    Tensor sigma2;
    int member = -1;

    std::size_t steps() const { return mu.dim(0); }
    std::size_t gridpoints() const { return mu.dim(1); }
};

/// He-normal weights (variance 2/fan_in), zero biases. Deterministic in `seed`.
ModelParams init_params(const DeepESDConfig& config, std::uint64_t seed);

struct HeadOutputs {
    ad::Var mu;
    ad::Var sigma2;
};

/// Records the network on `x`'s tape. `params` holds one Var per tensor of
/// ModelParams, in the same order.
HeadOutputs forward_graph(const DeepESDConfig& config, std::span<const ad::Var> params, const ad::Var& x);

/// Inference on standardized inputs x [N, C, H, W], processed in chunks of
/// `chunk` samples. Safe to call concurrently on shared params.
Prediction forward(const ModelParams& params, const Tensor& x, std::size_t chunk = 256);

inline constexpr const char* kParamsMagic = "ENSDOWN-PARAMS-v1";

std::string save_params(const ModelParams& params);
/// Throws FormatError on a malformed stream and ConfigMismatchError when
/// `expected` is given and differs from the stored config.
ModelParams load_params(std::string_view bytes, const std::optional<DeepESDConfig>& expected = std::nullopt);

void save_params_file(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_params_file(const std::filesystem::path& path,
                             const std::optional<DeepESDConfig>& expected = std::nullopt);

} // namespace ensdown
