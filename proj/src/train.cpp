#include "xseg/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>

#include "xseg/checkpoint.hpp"
#include "xseg/errors.hpp"
#include "xseg/rng.hpp"

namespace xseg {

namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FileError("cannot write " + path.string());
    return out;
}

void close_csv(std::ofstream& out, const std::filesystem::path& path) {
    out.flush();
    if (!out) throw FileError("failed writing " + path.string());
}

}  // namespace

template <typename T>
void adam_step(ParamStore<T>& params, double lr, const AdamOptions& adam, std::uint64_t t) {
    if (t == 0) throw StateError("adam_step: step count must start at 1");
    const double b1 = adam.beta1, b2 = adam.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (auto& p : params.entries()) {
        T* value = p.value.data();
        T* grad = p.grad.data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double g = static_cast<double>(grad[i]);
            const double m = b1 * static_cast<double>(p.m[i]) + (1.0 - b1) * g;
            const double v = b2 * static_cast<double>(p.v[i]) + (1.0 - b2) * g * g;
            p.m[i] = static_cast<T>(m);
            p.v[i] = static_cast<T>(v);
            const double m_hat = m / c1, v_hat = v / c2;
            value[i] = static_cast<T>(static_cast<double>(value[i]) - lr * m_hat / (std::sqrt(v_hat) + adam.eps));
            grad[i] = T(0);
        }
    }
}

template void adam_step<float>(ParamStore<float>&, double, const AdamOptions&, std::uint64_t);
template void adam_step<double>(ParamStore<double>&, double, const AdamOptions&, std::uint64_t);

void TrainConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
    if (epochs == 0) fail("epochs must be >= 1");
    if (!(learning_rate > 0)) fail("learning_rate must be > 0");
    if (batch_size == 0) fail("batch_size must be >= 1");
    if (!(adam.beta1 >= 0 && adam.beta1 < 1)) fail("beta1 must be in [0, 1)");
    if (!(adam.beta2 >= 0 && adam.beta2 < 1)) fail("beta2 must be in [0, 1)");
    if (!(adam.eps > 0)) fail("adam eps must be > 0");
    if (!(loss.dice >= 0 && loss.boundary >= 0)) fail("loss weights must be >= 0");
}

ValidationResult validate(Network<float>& net, const std::vector<SliceTriplet>& val_set, const LossWeights& weights) {
    if (val_set.empty()) throw ConfigError("validation set is empty");
    double loss = 0, dice = 0;
    for (const auto& s : val_set) {
        const Tensor4<float> pred = net.forward(s.input, Mode::Eval);
        loss += combined_loss(s.target, pred, weights);
        dice += dice_score(binarize(s.target), binarize(pred));
    }
    const auto n = static_cast<double>(val_set.size());
    return {loss / n, dice / n};
}

RunLog train(Network<float>& net, const std::vector<SliceTriplet>& train_set, const std::vector<SliceTriplet>& val_set,
             const TrainConfig& config, const std::filesystem::path& checkpoint, const EpochCallback& on_epoch) {
    config.validate();
    if (train_set.empty()) throw ConfigError("training set is empty");
    if (val_set.empty()) throw ConfigError("validation set is empty");

    RunLog log;
    log.best_val_loss = std::numeric_limits<double>::infinity();
    std::vector<CheckpointEntry> best;

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, "batch-order"));
    std::uint64_t step = 0;
    net.params().zero_grad();

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_index) {
            const std::size_t end = std::min(start + config.batch_size, order.size());
            std::vector<const Tensor4<float>*> xs, ys;
            for (std::size_t k = start; k < end; ++k) {
                xs.push_back(&train_set[order[k]].input);
                ys.push_back(&train_set[order[k]].target);
            }
            const Tensor4<float> x = stack_batch<float>(xs);
            const Tensor4<float> y = stack_batch<float>(ys);
            const Tensor4<float> pred = net.forward(x, Mode::Train);
            const LossWithGrad<float> lg = combined_loss_with_grad(y, pred, config.loss);
            if (!std::isfinite(lg.value) || !lg.grad.all_finite())
                throw NonFiniteLossError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                         std::to_string(batch_index + 1) + " (value " + format_double(lg.value) +
                                         ")");
            net.backward(lg.grad);
            adam_step(net.params(), config.learning_rate, config.adam, ++step);
            loss_sum += lg.value * static_cast<double>(end - start);
        }
        const ValidationResult v = validate(net, val_set, config.loss);
        if (!std::isfinite(v.loss))
            throw NonFiniteLossError("non-finite validation loss at epoch " + std::to_string(epoch));
        EpochRecord rec{epoch, loss_sum / static_cast<double>(order.size()), v.loss, v.dice};
        log.epochs.push_back(rec);
        if (v.loss < log.best_val_loss) {
            log.best_val_loss = v.loss;
            log.best_epoch = epoch;
            best = network_to_entries(net);
            if (!checkpoint.empty()) {
                write_checkpoint(checkpoint, best);
                log.checkpoint = checkpoint;
            }
        }
        if (on_epoch) on_epoch(rec);
    }
    if (!best.empty()) net = network_from_entries<float>(best);
    return log;
}

std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_runlog_csv(const RunLog& log, const std::filesystem::path& path) {
    std::ofstream out = open_csv(path);
    out << "epoch,train_loss,val_loss,val_dice\n";
    for (const auto& e : log.epochs)
        out << e.epoch << ',' << format_double(e.train_loss) << ',' << format_double(e.val_loss) << ','
            << format_double(e.val_dice) << '\n';
    close_csv(out, path);
}

EvalReport evaluate(const Predictor& predict, const std::vector<SliceTriplet>& test_set, double threshold) {
    if (test_set.empty()) throw EmptySetError("evaluate: test set is empty");
    EvalReport report;
    report.slices.reserve(test_set.size());
    for (const auto& s : test_set) {
        const Tensor4<float> pred = predict(s);
        report.slices.push_back(
            score_slice(s.slice_id, s.region, binarize(s.target, threshold), binarize(pred, threshold)));
    }
    report.summary.push_back({"full-scan", aggregate(report.slices)});
    for (Region r : {Region::Proximal, Region::Shaft, Region::Distal}) {
        SummaryRow row{std::string(region_name(r)), {}};
        try {
            row.summary = aggregate(report.slices, r);
        } catch (const EmptySetError&) {
            const double nan = std::numeric_limits<double>::quiet_NaN();
            row.summary = MetricSummary{0, nan, nan, nan, 0};
        }
        report.summary.push_back(std::move(row));
    }
    return report;
}

EvalReport evaluate(Network<float>& net, const std::vector<SliceTriplet>& test_set, double threshold) {
    const NetworkConfig& cfg = net.config();
    for (const auto& s : test_set) {
        if (s.input.c() != cfg.in_slices || s.input.h() != cfg.height || s.input.w() != cfg.width)
            throw ConfigError("evaluate: slice " + s.slice_id + " has shape " + s.input.shape().str() +
                              " but the network expects " + std::to_string(cfg.in_slices) + "x" +
                              std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
    }
    return evaluate([&net](const SliceTriplet& s) { return net.forward(s.input, Mode::Eval); }, test_set, threshold);
}

void write_eval_slices_csv(const EvalReport& report, const std::filesystem::path& path) {
    std::ofstream out = open_csv(path);
    out << "slice_id,region,dice,iou,hd95\n";
    for (const auto& r : report.slices)
        out << r.slice_id << ',' << region_name(r.region) << ',' << format_double(r.dice) << ','
            << format_double(r.iou) << ',' << format_double(r.hd95) << '\n';
    close_csv(out, path);
}

void write_eval_summary_csv(const EvalReport& report, const std::filesystem::path& path) {
    std::ofstream out = open_csv(path);
    out << "subset,count,dice,iou,hd95,hd95_dropped\n";
    for (const auto& row : report.summary)
        out << row.name << ',' << row.summary.count << ',' << format_double(row.summary.dice) << ','
            << format_double(row.summary.iou) << ',' << format_double(row.summary.hd95) << ','
            << row.summary.hd95_dropped << '\n';
    close_csv(out, path);
}

void print_summary(const EvalReport& report, std::ostream& out) {
    char line[160];
    std::snprintf(line, sizeof line, "%-10s %6s %8s %8s %9s %8s\n", "subset", "slices", "dice", "iou", "hd95",
                  "nan_hd95");
    out << line;
    for (const auto& row : report.summary) {
        const auto& s = row.summary;
        std::snprintf(line, sizeof line, "%-10s %6zu %8.4f %8.4f %9.4f %8zu\n", row.name.c_str(), s.count, s.dice,
                      s.iou, s.hd95, s.hd95_dropped);
        out << line;
    }
}

std::array<AblationFlags, 8> ablation_order() {
    return {{{false, false, false},
             {true, false, false},
             {false, true, false},
             {false, false, true},
             {true, true, false},
             {true, false, true},
             {false, true, true},
             {true, true, true}}};
}

std::vector<AblationRow> run_ablation_grid(const NetworkConfig& base, const TrainConfig& train_config,
                                           const DatasetSplits& splits, const std::vector<std::uint64_t>& seeds,
                                           const AblationProgress& progress) {
    if (seeds.empty()) throw ConfigError("ablation: at least one seed is required");
    std::vector<AblationRow> rows;
    for (const AblationFlags& flags : ablation_order()) {
        AblationRow row{flags, 0, 0, {}};
        for (std::uint64_t seed : seeds) {
            NetworkConfig nc = base;
            nc.use_input_csa = flags.input_csa;
            nc.use_skip_csa = flags.skip_csa;
            nc.use_skip_ag = flags.skip_ag;
            nc.seed = seed;
            TrainConfig tc = train_config;
            tc.seed = seed;
            Network<float> net(nc);
            train(net, splits.train, splits.val, tc);
            const EvalReport report = evaluate(net, splits.test_full);
            row.seed_dsc.push_back(report.summary[0].summary.dice);
            row.dsc += report.summary[0].summary.dice;
            row.iou += report.summary[0].summary.iou;
            if (progress) progress(flags, seed, report);
        }
        row.dsc /= static_cast<double>(seeds.size());
        row.iou /= static_cast<double>(seeds.size());
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path) {
    std::ofstream out = open_csv(path);
    out << "input_csa,skip_csa,skip_ag,dsc,iou\n";
    for (const auto& r : rows)
        out << int(r.flags.input_csa) << ',' << int(r.flags.skip_csa) << ',' << int(r.flags.skip_ag) << ','
            << format_double(r.dsc) << ',' << format_double(r.iou) << '\n';
    close_csv(out, path);
}

}  // namespace xseg
