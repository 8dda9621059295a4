#pragma once

// 2.5D U-Net with switchable cross-slice attention and attention gating.
//
//   input (B, slices, H, W)
//     -> [input CSA]
//     -> depth x { convs_per_stage x conv-bn-relu ; keep skip ; maxpool }
//     -> bottleneck (base * 2^depth channels)
//     -> depth x { upsample U ; concat(U, [CSA(skip)], [AG(skip, U)]) ; conv-bn-relu blocks }
//     -> 1x1 conv -> sigmoid
//
// With both skip switches off the raw skip is concatenated instead (plain 2.5D U-Net).

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "xseg/attention.hpp"
#include "xseg/ops.hpp"
#include "xseg/params.hpp"

namespace xseg {

struct NetworkConfig {
    std::size_t height = 256;
    std::size_t width = 256;
    std::size_t in_slices = 3;
    std::size_t base_filters = 64;
    std::size_t depth = 4;
    std::size_t convs_per_stage = 2;
    std::size_t kernel_size = 3;
    bool use_input_csa = true;
    bool use_skip_csa = true;
    bool use_skip_ag = true;
    bool bn_before_relu = true;
    std::uint64_t seed = 0;

    /// Throws ConfigError naming the offending field.
    void validate() const;

    std::size_t stage_channels(std::size_t stage) const { return base_filters << stage; }
    std::size_t bottleneck_channels() const { return base_filters << depth; }

    /// Channels entering decoder stage `stage`'s first convolution.
    std::size_t fusion_channels(std::size_t stage) const;

    bool operator==(const NetworkConfig&) const = default;
};

/// Parameters that the three attention switches add on top of the all-off network,
/// computed from the configuration alone: the 1x1 projections of every enabled CSA
/// and AG site, plus the extra decoder-convolution weights when both skip branches
/// are concatenated (fusion width C_U + 2 C_skip instead of C_U + C_skip).
std::size_t attention_parameter_delta(const NetworkConfig& config);

/// Same, excluding the fusion-width term.
std::size_t attention_projection_total(const NetworkConfig& config);

template <typename T>
class Network {
public:
    explicit Network(const NetworkConfig& config);

    const NetworkConfig& config() const { return config_; }

    /// Input must be (B, in_slices, height, width); output is (B, 1, height, width) in (0, 1).
    Tensor4<T> forward(const Tensor4<T>& input, Mode mode);

    /// Overwrites every parameter gradient. Requires a preceding train-mode forward.
    void backward(const Tensor4<T>& grad_output);

    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    /// Batchnorm running statistics, keyed by layer name ("enc0.bn1", ...).
    struct NamedStats {
        std::string name;
        BatchNormStats<T> stats;
    };
    std::vector<NamedStats> batchnorm_stats() const;
    void set_batchnorm_stats(const std::string& layer, const BatchNormStats<T>& stats);

    /// Encoder output channels per stage, then the bottleneck.
    std::vector<std::size_t> encoder_channels() const;

    std::size_t count_params() const { return params_.total_size(); }

    /// Forward FLOPs for one sample of the given spatial size. Convolutions count
    /// 2*kh*kw*Cin*Cout per output pixel; elementwise costs per element are: bias 1,
    /// batchnorm 2, relu 1, maxpool 3 per output, softmax 3, sigmoid 4, multiply 1,
    /// add 1 (see count_flops in network.cpp for the full tally).
    std::uint64_t count_flops(std::size_t height, std::size_t width) const;

private:
    struct ConvBlock {
        std::string name;
        std::size_t weight, bias, gamma, beta;
        BatchNormStats<T> stats;
        // train-mode cache
        Tensor4<T> input;
        Tensor4<T> relu_input;
        BatchNormCache<T> bn_cache;
    };
    struct Stage {
        std::vector<ConvBlock> blocks;
    };
    struct CsaSite {
        std::size_t weight, bias;
        CsaCache<T> cache;
    };
    struct AgSite {
        std::size_t theta, phi, bias;
        AgCache<T> cache;
    };
    struct Decoder {
        Stage convs;
        std::optional<CsaSite> csa;
        std::optional<AgSite> ag;
        std::size_t up_channels = 0;
        std::size_t skip_channels = 0;
    };

    std::size_t add_conv(const std::string& name, std::size_t c_out, std::size_t c_in, std::size_t k, bool bias);
    Stage make_stage(const std::string& prefix, std::size_t c_in, std::size_t c_out);
    CsaSite make_csa(const std::string& prefix, std::size_t channels);
    AgSite make_ag(const std::string& prefix, std::size_t x_channels, std::size_t g_channels);

    Tensor4<T> run_block(ConvBlock& block, const Tensor4<T>& x, Mode mode);
    Tensor4<T> back_block(ConvBlock& block, const Tensor4<T>& grad);
    Tensor4<T> run_stage(Stage& stage, Tensor4<T> x, Mode mode);
    Tensor4<T> back_stage(Stage& stage, Tensor4<T> grad);
    void accumulate(std::size_t param, const Tensor4<T>& grad);
    void accumulate(std::size_t param, std::span<const T> grad);

    NetworkConfig config_;
    ParamStore<T> params_;
    std::optional<CsaSite> input_csa_;
    std::vector<Stage> encoder_;
    Stage bottleneck_;
    std::vector<Decoder> decoder_;  // indexed by stage, run from depth-1 down to 0
    std::size_t head_weight_ = 0, head_bias_ = 0;

    bool has_train_cache_ = false;
    struct PoolRecord {
        Shape4 input_shape;
        std::vector<std::uint32_t> argmax;
    };
    std::vector<PoolRecord> pools_;
    std::vector<Tensor4<T>> skips_;
    Tensor4<T> head_input_;
    Tensor4<T> output_;
};

template <typename T>
Network<T> build_network(const NetworkConfig& config) {
    return Network<T>(config);
}

}  // namespace xseg
