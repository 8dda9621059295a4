#include "xseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "xseg/attention.hpp"
#include "xseg/losses.hpp"
#include "xseg/ops.hpp"
#include "xseg/rng.hpp"

namespace xseg {

namespace {

using T4 = Tensor4<double>;
using LossFn = std::function<double()>;

T4 random_tensor(Shape4 s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    T4 t(s);
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

std::vector<double> random_vector(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

double weighted_sum(const T4& out, const T4& r) {
    double s = 0;
    for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * r[i];
    return s;
}

class Checker {
public:
    Checker(const GradcheckOptions& opt, CheckGroup group) : opt_(opt), group_(group) {}

    /// Compares analytic[i] with the central difference of f in x[i] for each i in idx.
    void probe(std::span<double> x, std::span<const double> analytic, const LossFn& f,
               const std::vector<std::size_t>& idx) {
        const double threshold = this->threshold();
        for (std::size_t i : idx) {
            const double a = analytic[i] * fault_;
            double err = error_at(x, i, a, f, opt_.step);
            // A max-pool switch or ReLU zero within one step of x[i] spoils the central
            // difference; smaller steps move the stencil off the kink.
            for (double step = opt_.step / 10; err > threshold && step >= opt_.step / 100; step /= 10)
                err = std::min(err, error_at(x, i, a, f, step));
            worst_ = std::max(worst_, err);
            ++checked_;
        }
    }

    void probe_all(std::span<double> x, std::span<const double> analytic, const LossFn& f) {
        std::vector<std::size_t> idx(x.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        probe(x, analytic, f, idx);
    }

    void start(const std::string& name) {
        name_ = name;
        worst_ = 0;
        checked_ = 0;
        fault_ = !opt_.inject_fault.empty() && name.starts_with(opt_.inject_fault) ? 1.01 : 1.0;
    }

    GradcheckResult finish() const { return {name_, group_, worst_, threshold(), checked_}; }

private:
    double threshold() const {
        return group_ == CheckGroup::Network ? opt_.network_threshold : opt_.primitive_threshold;
    }

    double error_at(std::span<double> x, std::size_t i, double analytic, const LossFn& f, double step) const {
        const double saved = x[i];
        x[i] = saved + step;
        const double up = f();
        x[i] = saved - step;
        const double down = f();
        x[i] = saved;
        const double numeric = (up - down) / (2.0 * step);
        const double denom = std::max({std::abs(analytic), std::abs(numeric), opt_.denominator_floor});
        return std::abs(analytic - numeric) / denom;
    }

    const GradcheckOptions& opt_;
    CheckGroup group_;
    std::string name_;
    double worst_ = 0;
    std::size_t checked_ = 0;
    double fault_ = 1.0;
};

// Pushes values away from a kink at zero so a step of `margin` never crosses it.
void avoid_zero(T4& t, double margin) {
    for (auto& v : t.values())
        if (std::abs(v) < margin) v = v < 0 ? -margin : margin;
}

}  // namespace

GradcheckOptions::GradcheckOptions() {
    network.height = 32;
    network.width = 32;
    network.base_filters = 4;
    network.depth = 2;
}

std::vector<GradcheckResult> run_primitive_checks(const GradcheckOptions& opt) {
    Rng rng(derive_seed(opt.seed, "gradcheck-primitives"));
    Checker ck(opt, CheckGroup::Primitive);
    std::vector<GradcheckResult> out;

    struct ConvCase {
        const char* name;
        ConvOptions options;
        bool bias;
    };
    for (const ConvCase& cc : {ConvCase{"conv2d[same]", {Padding::Same, 1}, true},
                               ConvCase{"conv2d[valid,stride2]", {Padding::Valid, 2}, true},
                               ConvCase{"conv2d[same,nobias]", {Padding::Same, 1}, false}}) {
        T4 x = random_tensor({2, 3, 7, 6}, rng);
        T4 w = random_tensor({4, 3, 3, 3}, rng);
        std::vector<double> b = cc.bias ? random_vector(4, rng) : std::vector<double>{};
        const Shape4 os = conv2d_output_shape(x.shape(), w.shape(), cc.options);
        const T4 r = random_tensor(os, rng);
        auto f = [&] { return weighted_sum(conv2d<double>(x, w, b, cc.options), r); };
        const ConvGrads<double> g = conv2d_backward<double>(x, w, cc.bias, r, cc.options);
        ck.start(cc.name);
        ck.probe_all(x.span(), g.input.span(), f);
        ck.probe_all(w.span(), g.weights.span(), f);
        if (cc.bias) ck.probe_all(b, g.bias, f);
        out.push_back(ck.finish());
    }
    {
        T4 x = random_tensor({2, 2, 6, 8}, rng);
        const T4 r = random_tensor({2, 2, 3, 4}, rng);
        const PoolResult<double> p = maxpool2x2(x);
        const T4 gx = maxpool2x2_backward<double>(x.shape(), p.argmax, r);
        ck.start("maxpool2x2");
        ck.probe_all(x.span(), gx.span(), [&] { return weighted_sum(maxpool2x2(x).output, r); });
        out.push_back(ck.finish());
    }
    {
        T4 x = random_tensor({2, 2, 3, 4}, rng);
        const T4 r = random_tensor({2, 2, 6, 8}, rng);
        const T4 gx = upsample2x2_backward(r);
        ck.start("upsample2x2");
        ck.probe_all(x.span(), gx.span(), [&] { return weighted_sum(upsample2x2(x), r); });
        out.push_back(ck.finish());
    }
    {
        T4 x = random_tensor({3, 2, 4, 5}, rng, -2.0, 2.0);
        std::vector<double> gamma = random_vector(2, rng, 0.5, 1.5), beta = random_vector(2, rng);
        const T4 r = random_tensor(x.shape(), rng);
        auto f = [&] {
            BatchNormStats<double> stats(2);
            return weighted_sum(batchnorm<double>(x, gamma, beta, Mode::Train, stats), r);
        };
        BatchNormStats<double> stats(2);
        BatchNormCache<double> cache;
        batchnorm<double>(x, gamma, beta, Mode::Train, stats, &cache);
        const BatchNormGrads<double> g = batchnorm_backward<double>(cache, gamma, r);
        ck.start("batchnorm[train]");
        ck.probe_all(x.span(), g.input.span(), f);
        ck.probe_all(gamma, g.gamma, f);
        ck.probe_all(beta, g.beta, f);
        out.push_back(ck.finish());
    }
    {
        T4 x = random_tensor({2, 3, 4, 4}, rng);
        avoid_zero(x, 1e-3);
        const T4 r = random_tensor(x.shape(), rng);
        const T4 gx = relu_backward(x, r);
        ck.start("relu");
        ck.probe_all(x.span(), gx.span(), [&] { return weighted_sum(relu(x), r); });
        out.push_back(ck.finish());
    }
    {
        T4 x = random_tensor({2, 3, 4, 4}, rng, -4.0, 4.0);
        const T4 r = random_tensor(x.shape(), rng);
        const T4 gx = sigmoid_backward(sigmoid(x), r);
        ck.start("sigmoid");
        ck.probe_all(x.span(), gx.span(), [&] { return weighted_sum(sigmoid(x), r); });
        out.push_back(ck.finish());
    }
    {
        T4 x = random_tensor({2, 4, 3, 3}, rng, -3.0, 3.0);
        const T4 r = random_tensor(x.shape(), rng);
        const T4 gx = softmax_channels_backward(softmax_channels(x), r);
        ck.start("softmax_channels");
        ck.probe_all(x.span(), gx.span(), [&] { return weighted_sum(softmax_channels(x), r); });
        out.push_back(ck.finish());
    }
    {
        T4 x = random_tensor({2, 1, 6, 7}, rng, 0.0, 1.0);
        const T4 r = random_tensor(x.shape(), rng);
        const T4 gx = sobel_gradient_magnitude_backward(x, r);
        ck.start("sobel_magnitude");
        ck.probe_all(x.span(), gx.span(), [&] { return weighted_sum(sobel_gradient_magnitude(x), r); });
        out.push_back(ck.finish());
    }
    {
        T4 t(Shape4{2, 1, 6, 6});
        for (auto& v : t.values()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
        T4 p = random_tensor(t.shape(), rng, 0.05, 0.95);
        struct LossCase {
            const char* name;
            std::function<double(const T4&, const T4&)> value;
            std::function<LossWithGrad<double>(const T4&, const T4&)> grad;
        };
        const LossCase cases[] = {
            {"dice_loss", dice_loss<double>, dice_loss_with_grad<double>},
            {"boundary_loss", boundary_loss<double>, boundary_loss_with_grad<double>},
            {"combined_loss", [](const T4& a, const T4& b) { return combined_loss<double>(a, b); },
             [](const T4& a, const T4& b) { return combined_loss_with_grad<double>(a, b); }},
        };
        for (const LossCase& lc : cases) {
            const LossWithGrad<double> g = lc.grad(t, p);
            ck.start(lc.name);
            ck.probe_all(p.span(), g.grad.span(), [&] { return lc.value(t, p); });
            out.push_back(ck.finish());
        }
    }
    return out;
}

std::vector<GradcheckResult> run_attention_checks(const GradcheckOptions& opt) {
    Rng rng(derive_seed(opt.seed, "gradcheck-attention"));
    Checker ck(opt, CheckGroup::Attention);
    std::vector<GradcheckResult> out;
    {
        T4 x = random_tensor({2, 3, 4, 5}, rng);
        T4 w = random_tensor({3, 3, 1, 1}, rng);
        std::vector<double> b = random_vector(3, rng);
        const T4 r = random_tensor(x.shape(), rng);
        CsaCache<double> cache;
        csa_forward<double>(x, w, b, &cache);
        const CsaGrads<double> g = csa_backward<double>(cache, w, b, r);
        auto f = [&] { return weighted_sum(csa_forward<double>(x, w, b), r); };
        ck.start("csa");
        ck.probe_all(x.span(), g.input.span(), f);
        ck.probe_all(w.span(), g.weights.span(), f);
        ck.probe_all(b, g.bias, f);
        out.push_back(ck.finish());
    }
    {
        T4 x = random_tensor({2, 3, 4, 4}, rng);
        T4 gs = random_tensor({2, 5, 4, 4}, rng);
        T4 theta = random_tensor({3, 3, 1, 1}, rng);
        T4 phi = random_tensor({3, 5, 1, 1}, rng);
        std::vector<double> b = random_vector(3, rng);
        const T4 r = random_tensor(x.shape(), rng);
        AgCache<double> cache;
        ag_forward<double>(x, gs, theta, phi, b, &cache);
        const AgGrads<double> g = ag_backward<double>(cache, theta, phi, r);
        auto f = [&] { return weighted_sum(ag_forward<double>(x, gs, theta, phi, b), r); };
        ck.start("attention_gate");
        ck.probe_all(x.span(), g.x.span(), f);
        ck.probe_all(gs.span(), g.g.span(), f);
        ck.probe_all(theta.span(), g.theta.span(), f);
        ck.probe_all(phi.span(), g.phi.span(), f);
        ck.probe_all(b, g.bias, f);
        out.push_back(ck.finish());
    }
    return out;
}

std::vector<GradcheckResult> run_network_checks(const GradcheckOptions& opt) {
    Rng rng(derive_seed(opt.seed, "gradcheck-network"));
    Network<double> net(opt.network);
    // Zero-initialised attention projections would leave the softmax and gate at their
    // symmetric points; random values exercise the general case.
    for (auto& p : net.params().entries()) {
        const bool attention = p.name.find("csa.") != std::string::npos || p.name.find("ag.") != std::string::npos;
        if (attention)
            for (auto& v : p.value.values()) v = 0.5 * rng.normal();
    }
    const NetworkConfig& cfg = opt.network;
    const T4 x = random_tensor({opt.network_batch, cfg.in_slices, cfg.height, cfg.width}, rng, 0.0, 1.0);
    const T4 r = random_tensor({opt.network_batch, 1, cfg.height, cfg.width}, rng);

    net.forward(x, Mode::Train);
    net.backward(r);
    std::vector<std::vector<double>> analytic;
    for (const auto& p : net.params().entries()) analytic.emplace_back(p.grad.values());

    auto f = [&] { return weighted_sum(net.forward(x, Mode::Train), r); };
    Checker ck(opt, CheckGroup::Network);
    std::vector<GradcheckResult> out;
    for (std::size_t k = 0; k < net.params().count(); ++k) {
        auto& p = net.params()[k];
        std::vector<std::size_t> idx(p.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        if (idx.size() > opt.samples_per_tensor) {
            rng.shuffle(idx);
            idx.resize(opt.samples_per_tensor);
            std::sort(idx.begin(), idx.end());
        }
        ck.start(p.name);
        ck.probe(p.value.span(), analytic[k], f, idx);
        out.push_back(ck.finish());
    }
    return out;
}

std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& options) {
    std::vector<GradcheckResult> all = run_primitive_checks(options);
    for (auto& r : run_attention_checks(options)) all.push_back(std::move(r));
    for (auto& r : run_network_checks(options)) all.push_back(std::move(r));
    return all;
}

bool all_passed(const std::vector<GradcheckResult>& results) {
    return std::all_of(results.begin(), results.end(), [](const GradcheckResult& r) { return r.passed(); });
}

}  // namespace xseg
