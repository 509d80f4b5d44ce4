#include "ensdown/model.hpp"

#include "ensdown/error.hpp"
#include "ensdown/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

namespace ensdown {

void DeepESDConfig::validate() const {
    if (input_channels == 0 || coarse_height == 0 || coarse_width == 0 || n_output_gridpoints == 0) {
        throw ValueError("model config: channel, grid and output counts must be positive");
    }
    if (conv_channels.empty()) throw ValueError("model config: at least one conv layer required");
    for (std::size_t c : conv_channels) {
        if (c == 0) throw ValueError("model config: conv layer with zero kernels");
    }
    if (kernel_size % 2 == 0) throw ValueError("model config: kernel_size must be odd");
    if (!(sigma_floor > 0.0) || !std::isfinite(sigma_floor)) throw ValueError("model config: sigma_floor must be > 0");
}

std::size_t DeepESDConfig::flat_features() const { return conv_channels.back() * coarse_height * coarse_width; }

std::size_t DeepESDConfig::parameter_count() const {
    std::size_t total = 0;
    std::size_t in = input_channels;
    for (std::size_t out : conv_channels) {
        total += out * in * kernel_size * kernel_size + out;
        in = out;
    }
    const std::size_t outputs = 2 * n_output_gridpoints;
    return total + flat_features() * outputs + outputs;
}

nlohmann::json DeepESDConfig::to_json() const {
    return {{"input_channels", input_channels},
            {"coarse_height", coarse_height},
            {"coarse_width", coarse_width},
            {"conv_channels", conv_channels},
            {"kernel_size", kernel_size},
            {"n_output_gridpoints", n_output_gridpoints},
            {"sigma_floor", sigma_floor}};
}

DeepESDConfig DeepESDConfig::from_json(const nlohmann::json& j) {
    DeepESDConfig c;
    c.input_channels = j.at("input_channels").get<std::size_t>();
    c.coarse_height = j.at("coarse_height").get<std::size_t>();
    c.coarse_width = j.at("coarse_width").get<std::size_t>();
    c.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
    c.kernel_size = j.at("kernel_size").get<std::size_t>();
    c.n_output_gridpoints = j.at("n_output_gridpoints").get<std::size_t>();
    c.sigma_floor = j.at("sigma_floor").get<double>();
    c.validate();
    return c;
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.value.size();
    return n;
}

const Tensor& ModelParams::at(std::string_view name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return t.value;
    }
    throw ValueError("no parameter tensor named " + std::string(name));
}

namespace {

std::vector<std::pair<std::string, Shape>> layer_layout(const DeepESDConfig& config) {
    std::vector<std::pair<std::string, Shape>> layout;
    std::size_t in = config.input_channels;
    const std::size_t k = config.kernel_size;
    for (std::size_t i = 0; i < config.conv_channels.size(); ++i) {
        const std::size_t out = config.conv_channels[i];
        const std::string prefix = "conv" + std::to_string(i + 1);
        layout.emplace_back(prefix + ".kernel", Shape{out, in, k, k});
        layout.emplace_back(prefix + ".bias", Shape{out});
        in = out;
    }
    layout.emplace_back("dense.weight", Shape{config.flat_features(), 2 * config.n_output_gridpoints});
    layout.emplace_back("dense.bias", Shape{2 * config.n_output_gridpoints});
    return layout;
}

} // namespace

ModelParams init_params(const DeepESDConfig& config, std::uint64_t seed) {
    config.validate();
    ModelParams params;
    params.config = config;
    params.seed = seed;
    params.metadata = {{"initializer", "he_normal"}};

    std::mt19937_64 rng(seed);
    for (auto& [name, shape] : layer_layout(config)) {
        Tensor t(shape, 0.0);
        if (shape.size() > 1) {
            // fan_in: everything except the output axis (axis 0 for conv, axis 1 for dense)
            const std::size_t fan_in = shape.size() == 4 ? shape[1] * shape[2] * shape[3] : shape[0];
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
            for (double& v : t.data()) v = dist(rng);
        }
        params.tensors.push_back({name, std::move(t)});
    }
    return params;
}

HeadOutputs forward_graph(const DeepESDConfig& config, std::span<const ad::Var> params, const ad::Var& x) {
    const std::size_t layers = config.conv_channels.size();
    if (params.size() != 2 * layers + 2) {
        throw ShapeError("forward: expected " + std::to_string(2 * layers + 2) + " parameter tensors, got " +
                         std::to_string(params.size()));
    }
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != config.input_channels || s[2] != config.coarse_height ||
        s[3] != config.coarse_width) {
        throw ShapeError("forward: input " + shape_string(s) + " does not match [N," +
                         std::to_string(config.input_channels) + "," + std::to_string(config.coarse_height) + "," +
                         std::to_string(config.coarse_width) + "]");
    }
    ad::Var h = x;
    for (std::size_t i = 0; i < layers; ++i) {
        h = ad::relu(ad::conv2d(h, params[2 * i], params[2 * i + 1]));
    }
    ad::Var out = ad::dense(ad::flatten(h), params[2 * layers], params[2 * layers + 1]);
    const std::size_t g = config.n_output_gridpoints;
    ad::Var mu = ad::slice_columns(out, 0, g);
    ad::Var sigma = ad::add_scalar(ad::softplus(ad::slice_columns(out, g, g)), config.sigma_floor);
    return {mu, ad::square(sigma)};
}

Prediction forward(const ModelParams& params, const Tensor& x, std::size_t chunk) {
    const DeepESDConfig& config = params.config;
    if (x.rank() != 4) throw ShapeError("forward: input must be [N,C,H,W], got " + shape_string(x.shape()));
    if (chunk == 0) chunk = 1;
    const std::size_t n = x.dim(0);
    const std::size_t step = x.size() / std::max<std::size_t>(n, 1);
    const std::size_t g = config.n_output_gridpoints;

    Prediction pred{Tensor(Shape{n, g}), Tensor(Shape{n, g})};
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t count = std::min(chunk, n - start);
        ad::Tape tape;
        std::vector<ad::Var> vars;
        vars.reserve(params.tensors.size());
        for (const auto& t : params.tensors) vars.push_back(tape.constant(t.value));
        std::vector<double> slice(x.data().begin() + static_cast<std::ptrdiff_t>(start * step),
                                  x.data().begin() + static_cast<std::ptrdiff_t>((start + count) * step));
        Shape shape = x.shape();
        shape[0] = count;
        const ad::Var xin = tape.constant(Tensor(shape, std::move(slice)));
        const HeadOutputs head = forward_graph(config, vars, xin);
        std::copy_n(head.mu.value().data().data(), count * g, pred.mu.data().data() + start * g);
        std::copy_n(head.sigma2.value().data().data(), count * g, pred.sigma2.data().data() + start * g);
    }
    return pred;
}

// ---------------------------------------------------------------------------

std::string save_params(const ModelParams& params) {
    nlohmann::json tensors = nlohmann::json::array();
    std::string payload;
    payload.reserve(params.parameter_count() * sizeof(double));
    for (const auto& t : params.tensors) {
        tensors.push_back({{"name", t.name}, {"shape", t.value.shape()}});
        io::put_f64(payload, t.value.data());
    }
    const nlohmann::json header = {
        {"format", kParamsMagic},
        {"config", params.config.to_json()},
        {"seed", params.seed},
        {"metadata", params.metadata},
        {"tensors", tensors},
        {"byte_order", "little"},
        {"payload_sha256", io::sha256_hex(payload)},
    };
    const std::string text = header.dump();
    std::string out(kParamsMagic);
    io::put_u64(out, text.size());
    out += text;
    out += payload;
    return out;
}

ModelParams load_params(std::string_view bytes, const std::optional<DeepESDConfig>& expected) {
    io::ByteReader reader(bytes, "params stream");
    if (reader.take(std::strlen(kParamsMagic)) != kParamsMagic) {
        throw FormatError("not an ENSDOWN params stream (bad magic)");
    }
    const std::uint64_t header_len = reader.u64();
    if (header_len > reader.remaining()) throw FormatError("params header length exceeds stream size");

    ModelParams params;
    std::vector<std::pair<std::string, Shape>> declared;
    std::string checksum;
    try {
        const auto header = nlohmann::json::parse(reader.take(header_len));
        params.config = DeepESDConfig::from_json(header.at("config"));
        params.seed = header.at("seed").get<std::uint64_t>();
        params.metadata = header.at("metadata");
        for (const auto& t : header.at("tensors")) {
            declared.emplace_back(t.at("name").get<std::string>(), t.at("shape").get<Shape>());
        }
        checksum = header.at("payload_sha256").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("corrupt params header: ") + e.what());
    } catch (const ValueError& e) {
        throw FormatError(std::string("invalid config in params header: ") + e.what());
    }

    if (expected && !(*expected == params.config)) {
        throw ConfigMismatchError("params were saved for config " + params.config.to_json().dump() +
                                  " but " + expected->to_json().dump() + " was expected");
    }
    if (declared != layer_layout(params.config)) {
        throw FormatError("params tensor layout does not match the stored config");
    }
    const std::size_t count = params.config.parameter_count();
    if (reader.remaining() != count * sizeof(double)) {
        throw FormatError("params payload holds " + std::to_string(reader.remaining()) + " bytes, expected " +
                          std::to_string(count * sizeof(double)));
    }
    if (io::sha256_hex(bytes.substr(bytes.size() - reader.remaining())) != checksum) {
        throw FormatError("params payload checksum mismatch");
    }
    for (auto& [name, shape] : declared) {
        Tensor t(shape);
        reader.f64(t.data());
        params.tensors.push_back({name, std::move(t)});
    }
    return params;
}

void save_params_file(const ModelParams& params, const std::filesystem::path& path) {
    io::atomic_write(path, save_params(params));
}

ModelParams load_params_file(const std::filesystem::path& path, const std::optional<DeepESDConfig>& expected) {
    return load_params(io::read_file(path), expected);
}

} // namespace ensdown
