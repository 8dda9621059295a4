#include "xseg/network.hpp"

#include <cmath>

#include "xseg/rng.hpp"

namespace xseg {

void NetworkConfig::validate() const {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) throw ConfigError(msg);
    };
    require(in_slices >= 1, "in_slices must be >= 1");
    require(base_filters >= 1, "base_filters must be >= 1");
    require(depth >= 1 && depth <= 8, "depth must be in 1..8");
    require(convs_per_stage >= 1, "convs_per_stage must be >= 1");
    require(kernel_size % 2 == 1, "kernel_size must be odd");
    const std::size_t factor = std::size_t{1} << depth;
    require(height >= factor && height % factor == 0,
            "input height " + std::to_string(height) + " is not divisible by 2^depth = " + std::to_string(factor));
    require(width >= factor && width % factor == 0,
            "input width " + std::to_string(width) + " is not divisible by 2^depth = " + std::to_string(factor));
}

std::size_t NetworkConfig::fusion_channels(std::size_t stage) const {
    const std::size_t up = stage_channels(stage + 1);
    const std::size_t skip = stage_channels(stage);
    std::size_t branches = 0;
    if (use_skip_csa) ++branches;
    if (use_skip_ag) ++branches;
    if (branches == 0) branches = 1;  // raw skip
    return up + branches * skip;
}

std::size_t attention_projection_total(const NetworkConfig& c) {
    std::size_t total = 0;
    if (c.use_input_csa) total += c.in_slices * c.in_slices + c.in_slices;
    for (std::size_t i = 0; i < c.depth; ++i) {
        const std::size_t skip = c.stage_channels(i);
        const std::size_t gate = c.stage_channels(i + 1);
        if (c.use_skip_csa) total += skip * skip + skip;
        if (c.use_skip_ag) total += skip * skip + gate * skip + skip;
    }
    return total;
}

std::size_t attention_parameter_delta(const NetworkConfig& c) {
    std::size_t total = attention_projection_total(c);
    if (c.use_skip_csa && c.use_skip_ag) {
        for (std::size_t i = 0; i < c.depth; ++i) {
            const std::size_t skip = c.stage_channels(i);
            total += c.kernel_size * c.kernel_size * skip * c.stage_channels(i);
        }
    }
    return total;
}

template <typename T>
Network<T>::Network(const NetworkConfig& config) : config_(config) {
    config_.validate();
    if (config_.use_input_csa) input_csa_ = make_csa("input_csa", config_.in_slices);

    std::size_t channels = config_.in_slices;
    for (std::size_t i = 0; i < config_.depth; ++i) {
        encoder_.push_back(make_stage("enc" + std::to_string(i), channels, config_.stage_channels(i)));
        channels = config_.stage_channels(i);
    }
    bottleneck_ = make_stage("bottleneck", channels, config_.bottleneck_channels());

    decoder_.resize(config_.depth);
    for (std::size_t k = config_.depth; k-- > 0;) {
        Decoder& d = decoder_[k];
        d.up_channels = config_.stage_channels(k + 1);
        d.skip_channels = config_.stage_channels(k);
        const std::string prefix = "skip" + std::to_string(k);
        if (config_.use_skip_csa) d.csa = make_csa(prefix + ".csa", d.skip_channels);
        if (config_.use_skip_ag) d.ag = make_ag(prefix + ".ag", d.skip_channels, d.up_channels);
        d.convs = make_stage("dec" + std::to_string(k), config_.fusion_channels(k), config_.stage_channels(k));
    }

    head_weight_ = add_conv("head", 1, config_.stage_channels(0), 1, true);
    head_bias_ = head_weight_ + 1;
}

template <typename T>
std::size_t Network<T>::add_conv(const std::string& name, std::size_t c_out, std::size_t c_in, std::size_t k,
                                 bool bias) {
    const std::size_t w = params_.add(name + ".weight", {c_out, c_in, k, k});
    // He-uniform over fan-in, one stream per parameter name.
    Rng rng(derive_seed(config_.seed, params_[w].name));
    const double limit = std::sqrt(6.0 / static_cast<double>(c_in * k * k));
    for (auto& v : params_[w].value.values()) v = static_cast<T>(rng.uniform(-limit, limit));
    if (bias) params_.add(name + ".bias", {c_out});
    return w;
}

template <typename T>
typename Network<T>::Stage Network<T>::make_stage(const std::string& prefix, std::size_t c_in, std::size_t c_out) {
    Stage stage;
    for (std::size_t j = 0; j < config_.convs_per_stage; ++j) {
        ConvBlock b;
        b.weight = add_conv(prefix + ".conv" + std::to_string(j), c_out, j == 0 ? c_in : c_out,
                            config_.kernel_size, true);
        b.bias = b.weight + 1;
        b.gamma = params_.add(prefix + ".bn" + std::to_string(j) + ".gamma", {c_out});
        params_[b.gamma].value.fill(T(1));
        b.beta = params_.add(prefix + ".bn" + std::to_string(j) + ".beta", {c_out});
        b.name = prefix + ".bn" + std::to_string(j);
        b.stats = BatchNormStats<T>(c_out);
        stage.blocks.push_back(std::move(b));
    }
    return stage;
}

template <typename T>
typename Network<T>::CsaSite Network<T>::make_csa(const std::string& prefix, std::size_t channels) {
    CsaSite site;
    // Zero projection: uniform attention, the site starts as x -> (1 + 1/C) x.
    site.weight = params_.add(prefix + ".weight", {channels, channels, 1, 1});
    site.bias = params_.add(prefix + ".bias", {channels});
    return site;
}

template <typename T>
typename Network<T>::AgSite Network<T>::make_ag(const std::string& prefix, std::size_t x_channels,
                                                std::size_t g_channels) {
    AgSite site;
    // Zero gate parameters: alpha = 0.5 everywhere at the start.
    site.theta = params_.add(prefix + ".theta", {x_channels, x_channels, 1, 1});
    site.phi = params_.add(prefix + ".phi", {x_channels, g_channels, 1, 1});
    site.bias = params_.add(prefix + ".bias", {x_channels});
    return site;
}

template <typename T>
Tensor4<T> Network<T>::run_block(ConvBlock& block, const Tensor4<T>& x, Mode mode) {
    const bool train = mode == Mode::Train;
    const auto& w = params_[block.weight].value;
    const auto bias = params_[block.bias].values();
    const auto gamma = params_[block.gamma].values();
    const auto beta = params_[block.beta].values();
    Tensor4<T> y = conv2d(x, w, bias, ConvOptions{Padding::Same, 1});
    if (train) block.input = x;
    if (config_.bn_before_relu) {
        y = batchnorm(y, gamma, beta, mode, block.stats, train ? &block.bn_cache : nullptr);
        Tensor4<T> out = relu(y);
        if (train) block.relu_input = std::move(y);
        return out;
    }
    Tensor4<T> r = relu(y);
    if (train) block.relu_input = std::move(y);
    return batchnorm(r, gamma, beta, mode, block.stats, train ? &block.bn_cache : nullptr);
}

template <typename T>
Tensor4<T> Network<T>::back_block(ConvBlock& block, const Tensor4<T>& grad) {
    const auto gamma = params_[block.gamma].values();
    Tensor4<T> g;
    if (config_.bn_before_relu) {
        g = relu_backward(block.relu_input, grad);
        auto bn = batchnorm_backward(block.bn_cache, gamma, g);
        accumulate(block.gamma, bn.gamma);
        accumulate(block.beta, bn.beta);
        g = std::move(bn.input);
    } else {
        auto bn = batchnorm_backward(block.bn_cache, gamma, grad);
        accumulate(block.gamma, bn.gamma);
        accumulate(block.beta, bn.beta);
        g = relu_backward(block.relu_input, bn.input);
    }
    auto conv = conv2d_backward(block.input, params_[block.weight].value, true, g, ConvOptions{Padding::Same, 1});
    accumulate(block.weight, conv.weights);
    accumulate(block.bias, conv.bias);
    return std::move(conv.input);
}

template <typename T>
Tensor4<T> Network<T>::run_stage(Stage& stage, Tensor4<T> x, Mode mode) {
    for (auto& b : stage.blocks) x = run_block(b, x, mode);
    return x;
}

template <typename T>
Tensor4<T> Network<T>::back_stage(Stage& stage, Tensor4<T> grad) {
    for (auto it = stage.blocks.rbegin(); it != stage.blocks.rend(); ++it) grad = back_block(*it, grad);
    return grad;
}

template <typename T>
void Network<T>::accumulate(std::size_t param, const Tensor4<T>& grad) {
    accumulate(param, grad.span());
}

template <typename T>
void Network<T>::accumulate(std::size_t param, std::span<const T> grad) {
    auto& g = params_[param].grad;
    if (grad.size() != g.size())
        throw DimensionError("gradient size " + std::to_string(grad.size()) + " for parameter " +
                             params_[param].name + " of size " + std::to_string(g.size()));
    for (std::size_t i = 0; i < grad.size(); ++i) g[i] += grad[i];
}

template <typename T>
Tensor4<T> Network<T>::forward(const Tensor4<T>& input, Mode mode) {
    const Shape4 expected{input.n(), config_.in_slices, config_.height, config_.width};
    if (!(input.shape() == expected))
        throw DimensionError("network input " + input.shape().str() + " does not match configured " +
                             expected.str());
    const bool train = mode == Mode::Train;
    has_train_cache_ = false;

    Tensor4<T> x = input;
    if (input_csa_) {
        x = csa_forward(x, params_[input_csa_->weight].value, params_[input_csa_->bias].values(),
                        train ? &input_csa_->cache : nullptr);
    }

    std::vector<Tensor4<T>> skips(config_.depth);
    if (train) pools_.assign(config_.depth, PoolRecord{});
    for (std::size_t i = 0; i < config_.depth; ++i) {
        skips[i] = run_stage(encoder_[i], std::move(x), mode);
        PoolResult<T> pooled = maxpool2x2(skips[i]);
        if (train) pools_[i] = PoolRecord{skips[i].shape(), std::move(pooled.argmax)};
        x = std::move(pooled.output);
    }
    x = run_stage(bottleneck_, std::move(x), mode);

    for (std::size_t k = config_.depth; k-- > 0;) {
        Decoder& d = decoder_[k];
        const Tensor4<T> up = upsample2x2(x);
        std::vector<Tensor4<T>> branches;
        if (d.csa) {
            branches.push_back(csa_forward(skips[k], params_[d.csa->weight].value, params_[d.csa->bias].values(),
                                           train ? &d.csa->cache : nullptr));
        }
        if (d.ag) {
            branches.push_back(ag_forward(skips[k], up, params_[d.ag->theta].value, params_[d.ag->phi].value,
                                          params_[d.ag->bias].values(), train ? &d.ag->cache : nullptr));
        }
        std::vector<const Tensor4<T>*> parts{&up};
        if (branches.empty()) {
            parts.push_back(&skips[k]);
        } else {
            for (const auto& b : branches) parts.push_back(&b);
        }
        x = run_stage(d.convs, concat_channels<T>(parts), mode);
    }

    Tensor4<T> logits = conv2d(x, params_[head_weight_].value, params_[head_bias_].values(),
                               ConvOptions{Padding::Valid, 1});
    Tensor4<T> out = sigmoid(logits);
    if (train) {
        head_input_ = std::move(x);
        output_ = out;
        has_train_cache_ = true;
    }
    return out;
}

template <typename T>
void Network<T>::backward(const Tensor4<T>& grad_output) {
    if (!has_train_cache_) throw StateError("Network::backward called without a preceding train-mode forward");
    require_same_shape(grad_output.shape(), output_.shape(), "Network::backward grad_output");
    params_.zero_grad();

    Tensor4<T> g = sigmoid_backward(output_, grad_output);
    {
        auto head = conv2d_backward(head_input_, params_[head_weight_].value, true, g, ConvOptions{Padding::Valid, 1});
        accumulate(head_weight_, head.weights);
        accumulate(head_bias_, head.bias);
        g = std::move(head.input);
    }

    std::vector<Tensor4<T>> skip_grads(config_.depth);
    for (std::size_t k = 0; k < config_.depth; ++k) {
        Decoder& d = decoder_[k];
        g = back_stage(d.convs, std::move(g));
        std::vector<std::size_t> widths{d.up_channels};
        const std::size_t n_branches = (d.csa ? 1 : 0) + (d.ag ? 1 : 0);
        for (std::size_t b = 0; b < std::max<std::size_t>(n_branches, 1); ++b) widths.push_back(d.skip_channels);
        std::vector<Tensor4<T>> parts = split_channels(g, std::span<const std::size_t>(widths));

        Tensor4<T> grad_up = std::move(parts[0]);
        std::size_t next = 1;
        if (n_branches == 0) {
            skip_grads[k] = std::move(parts[1]);
        } else {
            skip_grads[k] = Tensor4<T>(parts[1].shape());
            if (d.csa) {
                auto cg = csa_backward(d.csa->cache, params_[d.csa->weight].value, params_[d.csa->bias].values(),
                                       parts[next++]);
                accumulate(d.csa->weight, cg.weights);
                accumulate(d.csa->bias, cg.bias);
                add_inplace(skip_grads[k], cg.input);
            }
            if (d.ag) {
                auto ag = ag_backward(d.ag->cache, params_[d.ag->theta].value, params_[d.ag->phi].value,
                                      parts[next++]);
                accumulate(d.ag->theta, ag.theta);
                accumulate(d.ag->phi, ag.phi);
                accumulate(d.ag->bias, ag.bias);
                add_inplace(skip_grads[k], ag.x);
                add_inplace(grad_up, ag.g);
            }
        }
        g = upsample2x2_backward(grad_up);
    }

    g = back_stage(bottleneck_, std::move(g));
    for (std::size_t k = config_.depth; k-- > 0;) {
        Tensor4<T> grad_skip = maxpool2x2_backward(pools_[k].input_shape, pools_[k].argmax, g);
        add_inplace(grad_skip, skip_grads[k]);
        g = back_stage(encoder_[k], std::move(grad_skip));
    }
    if (input_csa_) {
        auto cg = csa_backward(input_csa_->cache, params_[input_csa_->weight].value,
                               params_[input_csa_->bias].values(), g);
        accumulate(input_csa_->weight, cg.weights);
        accumulate(input_csa_->bias, cg.bias);
    }
}

template <typename T>
std::vector<typename Network<T>::NamedStats> Network<T>::batchnorm_stats() const {
    std::vector<NamedStats> out;
    auto collect = [&](const Stage& s) {
        for (const auto& b : s.blocks) out.push_back(NamedStats{b.name, b.stats});
    };
    for (const auto& s : encoder_) collect(s);
    collect(bottleneck_);
    for (std::size_t k = config_.depth; k-- > 0;) collect(decoder_[k].convs);
    return out;
}

template <typename T>
void Network<T>::set_batchnorm_stats(const std::string& layer, const BatchNormStats<T>& stats) {
    auto visit = [&](Stage& s) {
        for (auto& b : s.blocks) {
            if (b.name != layer) continue;
            if (stats.running_mean.size() != b.stats.running_mean.size() ||
                stats.running_var.size() != b.stats.running_var.size())
                throw DimensionError("batchnorm stats for " + layer + " have the wrong channel count");
            b.stats = stats;
            return true;
        }
        return false;
    };
    for (auto& s : encoder_)
        if (visit(s)) return;
    if (visit(bottleneck_)) return;
    for (auto& d : decoder_)
        if (visit(d.convs)) return;
    throw ConfigError("unknown batchnorm layer '" + layer + "'");
}

template <typename T>
std::vector<std::size_t> Network<T>::encoder_channels() const {
    std::vector<std::size_t> out;
    for (const auto& s : encoder_) out.push_back(params_[s.blocks.back().weight].dims[0]);
    out.push_back(params_[bottleneck_.blocks.back().weight].dims[0]);
    return out;
}

template <typename T>
std::uint64_t Network<T>::count_flops(std::size_t height, std::size_t width) const {
    using u64 = std::uint64_t;
    constexpr u64 kBias = 1, kBatchNorm = 2, kRelu = 1, kPool = 3, kSoftmax = 3, kSigmoid = 4, kMul = 1, kAdd = 1;
    u64 total = 0;
    auto conv = [&](u64 k, u64 c_in, u64 c_out, u64 pixels, bool bias) {
        total += 2 * k * k * c_in * c_out * pixels;
        if (bias) total += kBias * c_out * pixels;
    };
    auto stage = [&](const Stage& s, u64 pixels) {
        for (const auto& b : s.blocks) {
            const auto& d = params_[b.weight].dims;
            conv(d[2], d[1], d[0], pixels, true);
            total += (kBatchNorm + kRelu) * d[0] * pixels;
        }
    };
    auto csa = [&](u64 c, u64 pixels) {
        conv(1, c, c, pixels, true);
        total += (kSoftmax + kMul + kAdd) * c * pixels;
    };
    auto ag = [&](u64 c, u64 c_g, u64 pixels) {
        conv(1, c, c, pixels, false);
        conv(1, c_g, c, pixels, false);
        total += (2 * kAdd + kSigmoid + kMul) * c * pixels;
    };

    u64 h = height, w = width;
    if (input_csa_) csa(config_.in_slices, h * w);
    for (std::size_t i = 0; i < config_.depth; ++i) {
        stage(encoder_[i], h * w);
        h /= 2;
        w /= 2;
        total += kPool * config_.stage_channels(i) * h * w;
    }
    stage(bottleneck_, h * w);
    for (std::size_t k = config_.depth; k-- > 0;) {
        h *= 2;
        w *= 2;
        const Decoder& d = decoder_[k];
        if (d.csa) csa(d.skip_channels, h * w);
        if (d.ag) ag(d.skip_channels, d.up_channels, h * w);
        stage(d.convs, h * w);
    }
    conv(1, config_.stage_channels(0), 1, h * w, true);
    total += kSigmoid * h * w;
    return total;
}

template class Network<float>;
template class Network<double>;

}  // namespace xseg
