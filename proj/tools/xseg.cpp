// xseg command-line driver: gen, train, eval, ablate, gradcheck, cost.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "xseg/checkpoint.hpp"
#include "xseg/dataset.hpp"
#include "xseg/errors.hpp"
#include "xseg/gradcheck.hpp"
#include "xseg/image_io.hpp"
#include "xseg/network.hpp"
#include "xseg/parallel.hpp"
#include "xseg/rng.hpp"
#include "xseg/train.hpp"

namespace fs = std::filesystem;
using namespace xseg;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

/// key=value lines; '#' starts a comment. Keys are option names without dashes.
/// Values only fill options not given on the command line.
void apply_config_file(CLI::App& sub, const std::string& path) {
    if (path.empty()) return;
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read config file " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(path + ":" + std::to_string(lineno) + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        CLI::Option* opt = sub.get_option_no_throw("--" + key);
        if (opt == nullptr || key == "config")
            throw UsageError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "' for " + sub.get_name());
        if (opt->count() > 0) continue;
        opt->add_result(value);
        opt->run_callback();
    }
}

bool given(const CLI::App& sub, const std::string& name) {
    const CLI::Option* opt = sub.get_option_no_throw("--" + name);
    return opt != nullptr && opt->count() > 0;
}

std::string bool_str(bool b) { return b ? "true" : "false"; }

struct Header {
    std::ostringstream lines;
    template <typename V>
    Header& kv(const std::string& key, const V& value) {
        lines << "# " << key << '=' << value << '\n';
        return *this;
    }
    Header& kv(const std::string& key, bool value) { return kv(key, bool_str(value)); }
    Header& kv(const std::string& key, double value) { return kv(key, format_double(value)); }
    void print(const std::string& command) const {
        std::cout << "# xseg " << command << " (XSEG_THREADS=" << worker_threads() << ")\n" << lines.str() << std::flush;
    }
};

// Options shared by the subcommands that build networks.
struct NetArgs {
    NetworkConfig net;
    bool desk = false;

    void add(CLI::App& sub) {
        sub.add_option("--height", net.height, "Network input height")->capture_default_str();
        sub.add_option("--width", net.width, "Network input width")->capture_default_str();
        sub.add_option("--base-filters", net.base_filters, "Filters in the first encoder stage")->capture_default_str();
        sub.add_option("--depth", net.depth, "Number of encoder/decoder stages")->capture_default_str();
        sub.add_option("--convs-per-stage", net.convs_per_stage, "Conv blocks per stage")->capture_default_str();
        sub.add_option("--input-csa", net.use_input_csa, "Cross-slice attention on the input (true/false)")
            ->capture_default_str();
        sub.add_option("--skip-csa", net.use_skip_csa, "Cross-slice attention on skips (true/false)")
            ->capture_default_str();
        sub.add_option("--skip-ag", net.use_skip_ag, "Attention gates on skips (true/false)")->capture_default_str();
        sub.add_option("--bn-before-relu", net.bn_before_relu, "Batchnorm before ReLU (true/false)")
            ->capture_default_str();
        sub.add_option("--seed", net.seed, "Seed for weights, batch order and shaft dropping")->capture_default_str();
        sub.add_flag("--desk-scale", desk, "Desk defaults: 64x64, base 4, depth 2, 15 epochs, lr 1e-3");
    }

    void resolve(const CLI::App& sub) {
        if (desk) {
            if (!given(sub, "height")) net.height = kDeskHeight;
            if (!given(sub, "width")) net.width = kDeskWidth;
            if (!given(sub, "base-filters")) net.base_filters = kDeskBaseFilters;
            if (!given(sub, "depth")) net.depth = kDeskDepth;
        }
        net.validate();
    }

    void header(Header& h) const {
        h.kv("height", net.height).kv("width", net.width).kv("base-filters", net.base_filters);
        h.kv("depth", net.depth).kv("convs-per-stage", net.convs_per_stage);
        h.kv("input-csa", net.use_input_csa).kv("skip-csa", net.use_skip_csa).kv("skip-ag", net.use_skip_ag);
        h.kv("bn-before-relu", net.bn_before_relu).kv("seed", net.seed).kv("desk-scale", desk);
    }
};

struct TrainArgs {
    TrainConfig train;

    void add(CLI::App& sub) {
        sub.add_option("--epochs", train.epochs, "Training epochs")->capture_default_str();
        sub.add_option("--lr", train.learning_rate, "Adam learning rate")->capture_default_str();
        sub.add_option("--batch-size", train.batch_size, "Mini-batch size")->capture_default_str();
        sub.add_option("--beta1", train.adam.beta1, "Adam beta1")->capture_default_str();
        sub.add_option("--beta2", train.adam.beta2, "Adam beta2")->capture_default_str();
        sub.add_option("--adam-eps", train.adam.eps, "Adam epsilon")->capture_default_str();
        sub.add_option("--dice-weight", train.loss.dice, "Weight of the Dice loss")->capture_default_str();
        sub.add_option("--boundary-weight", train.loss.boundary, "Weight of the boundary loss")
            ->capture_default_str();
    }

    void resolve(const CLI::App& sub, const NetArgs& net) {
        train.desk_scale = net.desk;
        train.seed = net.net.seed;
        if (net.desk && !given(sub, "epochs")) train.epochs = kDeskEpochs;
        if (net.desk && !given(sub, "lr")) train.learning_rate = kDeskLearningRate;
        train.validate();
    }

    void header(Header& h) const {
        h.kv("epochs", train.epochs).kv("lr", train.learning_rate).kv("batch-size", train.batch_size);
        h.kv("beta1", train.adam.beta1).kv("beta2", train.adam.beta2).kv("adam-eps", train.adam.eps);
        h.kv("dice-weight", train.loss.dice).kv("boundary-weight", train.loss.boundary);
    }
};

struct SplitArgs {
    std::string data;
    std::size_t n_train = 0, n_val = 1, n_test = 1;
    double shaft_cap = 0.4;

    void add(CLI::App& sub) {
        sub.add_option("--data", data, "Dataset root (see 'gen')");
        sub.add_option("--n-train", n_train, "Training volumes (0: all but val and test)")->capture_default_str();
        sub.add_option("--n-val", n_val, "Validation volumes")->capture_default_str();
        sub.add_option("--n-test", n_test, "Test volumes")->capture_default_str();
        sub.add_option("--shaft-cap", shaft_cap, "Max shaft share of anatomical training slices (0 disables)")
            ->capture_default_str();
    }

    void require_data() const {
        if (data.empty()) throw UsageError("--data is required");
    }

    DatasetSplits load(ImageSize size, std::uint64_t seed) const {
        const std::vector<PhantomVolume> volumes = load_dataset(data);
        SplitSpec spec;
        spec.n_val = n_val;
        spec.n_test = n_test;
        spec.n_train = n_train != 0 ? n_train : (volumes.size() >= n_val + n_test ? volumes.size() - n_val - n_test : 0);
        spec.shaft_cap = shaft_cap;
        spec.seed = seed;
        DatasetSplits s = build_splits(volumes, spec, size);
        std::cout << "data: " << volumes.size() << " volumes; train " << s.train_volumes.size() << " ("
                  << s.train.size() << " slices, " << s.shaft_dropped << " shaft dropped), val "
                  << s.val_volumes.size() << " (" << s.val.size() << "), test " << s.test_volumes.size() << " ("
                  << s.test_full.size() << ")\n";
        return s;
    }

    void header(Header& h) const {
        h.kv("data", data).kv("n-train", n_train).kv("n-val", n_val).kv("n-test", n_test).kv("shaft-cap", shaft_cap);
    }
};

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw FileError("cannot create " + dir.string() + ": " + ec.message());
}

ImageSize parse_size(const std::string& text) {
    const auto x = text.find('x');
    try {
        if (x != std::string::npos) {
            const std::size_t w = std::stoul(text.substr(0, x));
            const std::size_t h = std::stoul(text.substr(x + 1));
            return {h, w};
        }
    } catch (const std::exception&) {
    }
    throw UsageError("--raw-size must look like WIDTHxHEIGHT, got '" + text + "'");
}

std::string volume_id(std::size_t k) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "vol%02zu", k);
    return buf;
}

// Ground truth green, prediction red, overlap yellow, over the centre slice in gray.
void dump_composite(const SliceTriplet& s, const Tensor4<float>& pred, const fs::path& path) {
    const std::size_t h = s.input.h(), w = s.input.w();
    Image8 img{h, w, 3, std::vector<std::uint8_t>(h * w * 3)};
    const float* gray = s.input.plane(0, 1);
    for (std::size_t i = 0; i < h * w; ++i) {
        const bool t = s.target[i] > 0.5f, p = pred[i] > 0.5f;
        auto g = static_cast<std::uint8_t>(std::lround(std::clamp(gray[i], 0.0f, 1.0f) * 160.0f));
        std::uint8_t rgb[3] = {g, g, g};
        if (t && p) {
            rgb[0] = 255, rgb[1] = 255, rgb[2] = 0;
        } else if (t) {
            rgb[0] = 0, rgb[1] = 200, rgb[2] = 0;
        } else if (p) {
            rgb[0] = 220, rgb[1] = 0, rgb[2] = 0;
        }
        std::copy_n(rgb, 3, img.pixels.data() + i * 3);
    }
    write_png(path, img);
}

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"xseg: 2.5D bone segmentation with cross-slice attention and attention gating"};
    app.require_subcommand(1);
    std::string config_path;

    // gen
    CLI::App* gen = app.add_subcommand("gen", "Write synthetic phantom volumes");
    std::string gen_out, gen_raw = "90x40";
    std::size_t gen_volumes = 10, gen_slices = 40;
    std::uint64_t gen_seed = 0;
    double gen_noise = 0.05;
    gen->add_option("--config", config_path, "key=value file; command-line flags win");
    gen->add_option("--out", gen_out, "Output dataset root");
    gen->add_option("--volumes", gen_volumes, "Number of volumes")->capture_default_str();
    gen->add_option("--slices", gen_slices, "Slices per volume")->capture_default_str();
    gen->add_option("--seed", gen_seed, "Generator seed")->capture_default_str();
    gen->add_option("--raw-size", gen_raw, "Slice size WIDTHxHEIGHT")->capture_default_str();
    gen->add_option("--noise", gen_noise, "Gaussian noise sigma")->capture_default_str();

    // train
    CLI::App* trn = app.add_subcommand("train", "Train a network and keep the best checkpoint");
    NetArgs trn_net;
    TrainArgs trn_args;
    SplitArgs trn_split;
    std::string trn_out;
    trn->add_option("--config", config_path, "key=value file; command-line flags win");
    trn->add_option("--out", trn_out, "Output directory for runlog.csv and best.ckpt");
    trn_net.add(*trn);
    trn_args.add(*trn);
    trn_split.add(*trn);

    // eval
    CLI::App* evl = app.add_subcommand("eval", "Evaluate a checkpoint on the test volumes");
    SplitArgs evl_split;
    std::string evl_ckpt, evl_out;
    double evl_threshold = 0.5;
    bool evl_dump = false, evl_oracle = false;
    evl->add_option("--config", config_path, "key=value file; command-line flags win");
    evl->add_option("--ckpt", evl_ckpt, "Checkpoint written by 'train'");
    evl->add_option("--out", evl_out, "Output directory for the CSV reports");
    evl->add_option("--threshold", evl_threshold, "Binarisation threshold")->capture_default_str();
    evl->add_flag("--dump-masks", evl_dump, "Write ground-truth/prediction composites to <out>/masks");
    evl->add_flag("--oracle", evl_oracle, "Predict the ground truth instead of running a network (audit fixture)");
    evl_split.add(*evl);

    // ablate
    CLI::App* abl = app.add_subcommand("ablate", "Train all eight attention switch combinations");
    NetArgs abl_net;
    TrainArgs abl_args;
    SplitArgs abl_split;
    std::string abl_out;
    std::vector<std::uint64_t> abl_seeds{0, 1, 2};
    abl->add_option("--config", config_path, "key=value file; command-line flags win");
    abl->add_option("--out", abl_out, "Output directory for ablation.csv");
    abl->add_option("--seeds", abl_seeds, "Seeds, each trains all eight rows")->delimiter(',')->capture_default_str();
    abl_net.add(*abl);
    abl_args.add(*abl);
    abl_split.add(*abl);

    // gradcheck
    CLI::App* gck = app.add_subcommand("gradcheck", "Finite-difference check of every backward pass");
    GradcheckOptions gck_opt;
    gck->add_option("--config", config_path, "key=value file; command-line flags win");
    gck->add_option("--seed", gck_opt.seed, "Seed for the random instances")->capture_default_str();
    gck->add_option("--step", gck_opt.step, "Central-difference step")->capture_default_str();
    gck->add_option("--samples", gck_opt.samples_per_tensor, "Coordinates checked per network tensor")
        ->capture_default_str();
    gck->add_option("--inject-fault", gck_opt.inject_fault,
                    "Negative control: corrupt the analytic gradient of components with this name prefix");

    // cost
    CLI::App* cst = app.add_subcommand("cost", "Parameter and FLOP counts");
    NetArgs cst_net;
    cst->add_option("--config", config_path, "key=value file; command-line flags win");
    cst_net.add(*cst);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    const auto start = std::chrono::steady_clock::now();
    try {
        if (gen->parsed()) {
            apply_config_file(*gen, config_path);
            if (gen_out.empty()) throw UsageError("--out is required");
            const ImageSize raw = parse_size(gen_raw);
            Header h;
            h.kv("out", gen_out).kv("volumes", gen_volumes).kv("slices", gen_slices).kv("seed", gen_seed);
            h.kv("raw-size", gen_raw).kv("noise", gen_noise);
            h.print("gen");
            PhantomOptions po;
            po.noise_sigma = gen_noise;
            std::map<Region, std::size_t> counts;
            make_dir(gen_out);
            for (std::size_t k = 0; k < gen_volumes; ++k) {
                PhantomVolume v = generate_phantom(derive_seed(gen_seed, volume_id(k)), gen_slices, raw, po);
                v.id = volume_id(k);
                save_volume(v, fs::path(gen_out) / v.id);
                for (Region r : v.regions) ++counts[r];
            }
            std::size_t total = 0;
            for (Region r : {Region::AboveStructure, Region::Proximal, Region::Shaft, Region::Distal}) {
                std::cout << region_name(r) << ": " << counts[r] << '\n';
                total += counts[r];
            }
            std::cout << "total: " << total << " slices in " << gen_volumes << " volumes\n";
        } else if (trn->parsed()) {
            apply_config_file(*trn, config_path);
            trn_split.require_data();
            if (trn_out.empty()) throw UsageError("--out is required");
            trn_net.resolve(*trn);
            trn_args.resolve(*trn, trn_net);
            Header h;
            h.kv("out", trn_out);
            trn_net.header(h);
            trn_args.header(h);
            trn_split.header(h);
            h.print("train");
            const DatasetSplits splits = trn_split.load({trn_net.net.height, trn_net.net.width}, trn_net.net.seed);
            make_dir(trn_out);
            Network<float> net(trn_net.net);
            std::cout << "parameters: " << net.count_params() << '\n';
            const RunLog log = train(net, splits.train, splits.val, trn_args.train, fs::path(trn_out) / "best.ckpt",
                                     [&](const EpochRecord& e) {
                                         std::printf("epoch %3zu  train %.6f  val %.6f  val_dice %.4f  (%.0fs)\n",
                                                     e.epoch, e.train_loss, e.val_loss, e.val_dice,
                                                     seconds_since(start));
                                         std::fflush(stdout);
                                     });
            write_runlog_csv(log, fs::path(trn_out) / "runlog.csv");
            std::printf("best epoch %zu, val loss %.9g, checkpoint %s\n", log.best_epoch, log.best_val_loss,
                        log.checkpoint.string().c_str());
        } else if (evl->parsed()) {
            apply_config_file(*evl, config_path);
            evl_split.require_data();
            if (evl_out.empty()) throw UsageError("--out is required");
            if (evl_ckpt.empty() && !evl_oracle) throw UsageError("--ckpt is required (or --oracle)");
            Header h;
            h.kv("ckpt", evl_ckpt).kv("out", evl_out).kv("threshold", evl_threshold);
            h.kv("dump-masks", evl_dump).kv("oracle", evl_oracle);
            evl_split.header(h);
            h.print("eval");

            std::optional<Network<float>> net;
            ImageSize size{64, 64};
            if (!evl_oracle) {
                net.emplace(load_network<float>(evl_ckpt));
                const NetworkConfig& c = net->config();
                if (c.in_slices != 3)
                    throw ConfigError("checkpoint expects " + std::to_string(c.in_slices) +
                                      " input slices but the data provides 3-slice stacks");
                size = {c.height, c.width};
                std::cout << "checkpoint: " << c.height << "x" << c.width << ", base " << c.base_filters << ", depth "
                          << c.depth << ", input-csa " << bool_str(c.use_input_csa) << ", skip-csa "
                          << bool_str(c.use_skip_csa) << ", skip-ag " << bool_str(c.use_skip_ag) << '\n';
            }
            const DatasetSplits splits = evl_split.load(size, 0);
            make_dir(evl_out);
            if (evl_dump) make_dir(fs::path(evl_out) / "masks");
            Predictor predict = [&](const SliceTriplet& s) {
                Tensor4<float> p = evl_oracle ? s.target : net->forward(s.input, Mode::Eval);
                if (evl_dump) {
                    std::string name = s.slice_id;
                    std::replace(name.begin(), name.end(), '/', '_');
                    dump_composite(s, p, fs::path(evl_out) / "masks" / (name + ".png"));
                }
                return p;
            };
            const EvalReport report = evaluate(predict, splits.test_full, evl_threshold);
            write_eval_slices_csv(report, fs::path(evl_out) / "eval_slices.csv");
            write_eval_summary_csv(report, fs::path(evl_out) / "eval_summary.csv");
            print_summary(report, std::cout);
        } else if (abl->parsed()) {
            apply_config_file(*abl, config_path);
            abl_split.require_data();
            if (abl_out.empty()) throw UsageError("--out is required");
            abl_net.resolve(*abl);
            abl_args.resolve(*abl, abl_net);
            Header h;
            h.kv("out", abl_out);
            std::string seeds;
            for (std::size_t i = 0; i < abl_seeds.size(); ++i) seeds += (i ? "," : "") + std::to_string(abl_seeds[i]);
            h.kv("seeds", seeds);
            abl_net.header(h);
            abl_args.header(h);
            abl_split.header(h);
            h.print("ablate");
            const DatasetSplits splits = abl_split.load({abl_net.net.height, abl_net.net.width}, abl_net.net.seed);
            make_dir(abl_out);
            std::ofstream runs(fs::path(abl_out) / "ablation_runs.csv", std::ios::binary);
            if (!runs) throw FileError("cannot write " + (fs::path(abl_out) / "ablation_runs.csv").string());
            runs << "input_csa,skip_csa,skip_ag,seed,dsc,iou,hd95\n";
            const auto rows = run_ablation_grid(
                abl_net.net, abl_args.train, splits, abl_seeds,
                [&](const AblationFlags& f, std::uint64_t seed, const EvalReport& r) {
                    const MetricSummary& s = r.summary[0].summary;
                    runs << int(f.input_csa) << ',' << int(f.skip_csa) << ',' << int(f.skip_ag) << ',' << seed << ','
                         << format_double(s.dice) << ',' << format_double(s.iou) << ',' << format_double(s.hd95)
                         << '\n';
                    runs.flush();
                    std::printf("input_csa=%d skip_csa=%d skip_ag=%d seed=%llu  dsc %.4f  iou %.4f  (%.0fs)\n",
                                int(f.input_csa), int(f.skip_csa), int(f.skip_ag),
                                static_cast<unsigned long long>(seed), s.dice, s.iou, seconds_since(start));
                    std::fflush(stdout);
                });
            write_ablation_csv(rows, fs::path(abl_out) / "ablation.csv");
            std::printf("%-9s %-8s %-7s %8s %8s\n", "input_csa", "skip_csa", "skip_ag", "dsc", "iou");
            for (const auto& r : rows)
                std::printf("%-9d %-8d %-7d %8.4f %8.4f\n", int(r.flags.input_csa), int(r.flags.skip_csa),
                            int(r.flags.skip_ag), r.dsc, r.iou);
        } else if (gck->parsed()) {
            apply_config_file(*gck, config_path);
            Header h;
            h.kv("seed", gck_opt.seed).kv("step", gck_opt.step).kv("samples", gck_opt.samples_per_tensor);
            h.kv("inject-fault", gck_opt.inject_fault);
            h.print("gradcheck");
            const char* groups[] = {"primitive", "attention", "network"};
            const auto results = run_gradcheck(gck_opt);
            for (const auto& r : results)
                std::printf("%-4s %-10s %-28s max_rel_err %.3e  threshold %.0e  coords %zu\n",
                            r.passed() ? "PASS" : "FAIL", groups[static_cast<int>(r.group)], r.component.c_str(),
                            r.max_rel_error, r.threshold, r.checked);
            const bool ok = all_passed(results);
            std::printf("%s in %.1fs\n", ok ? "all gradients match" : "GRADIENT CHECK FAILED", seconds_since(start));
            return ok ? kExitOk : kExitFailure;
        } else if (cst->parsed()) {
            apply_config_file(*cst, config_path);
            cst_net.resolve(*cst);
            Header h;
            cst_net.header(h);
            h.print("cost");
            const Network<double> net(cst_net.net);
            NetworkConfig off = cst_net.net;
            off.use_input_csa = off.use_skip_csa = off.use_skip_ag = false;
            const Network<double> plain(off);
            std::printf("parameters:                 %llu\n", static_cast<unsigned long long>(net.count_params()));
            std::printf("forward FLOPs per sample:   %llu\n",
                        static_cast<unsigned long long>(net.count_flops(cst_net.net.height, cst_net.net.width)));
            std::printf("all-off parameters:         %llu\n", static_cast<unsigned long long>(plain.count_params()));
            std::printf("delta vs all-off:           %llu\n",
                        static_cast<unsigned long long>(net.count_params() - plain.count_params()));
            std::printf("analytic attention delta:   %llu (projections %llu + fusion widening %llu)\n",
                        static_cast<unsigned long long>(attention_parameter_delta(cst_net.net)),
                        static_cast<unsigned long long>(attention_projection_total(cst_net.net)),
                        static_cast<unsigned long long>(attention_parameter_delta(cst_net.net) -
                                                        attention_projection_total(cst_net.net)));
            std::printf("published reference (not a match target): parameters 23,138,641; FLOPs 89,465,067,776\n");
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\nRun with --help for usage.\n";
        return kExitUsage;
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return kExitOk;
}
