// Acceptance runner: one PASS/FAIL line per criterion, exit 1 if any fails.
//
//   xseg_acceptance [--workdir DIR] [--skip-ablation]
//
// The ablation criterion trains 24 desk-scale networks and dominates the runtime.

#include <chrono>
#include <cstring>
#include <functional>
#include <iostream>
#include <map>

#include "test_support.hpp"
#include "xseg/attention.hpp"
#include "xseg/checkpoint.hpp"
#include "xseg/losses.hpp"
#include "xseg/network.hpp"
#include "xseg/train.hpp"

using namespace xseg;
using namespace xseg::testing;
namespace fs = std::filesystem;

namespace {

const std::string kCli = XSEG_CLI_PATH;

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

RunResult cli(std::vector<std::string> args) {
    args.insert(args.begin(), kCli);
    return run_command(args);
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

Outcome gradient_integrity() {
    const auto t0 = std::chrono::steady_clock::now();
    const RunResult r = cli({"gradcheck"});
    const double secs = seconds_since(t0);
    std::size_t lines = 0, fails = 0;
    std::istringstream in(r.output);
    for (std::string line; std::getline(in, line);) {
        if (line.rfind("PASS", 0) == 0) ++lines;
        if (line.rfind("FAIL", 0) == 0) ++lines, ++fails;
    }
    const bool ok = r.exit_code == 0 && fails == 0 && lines > 0 && secs < 120.0;
    return {ok, std::to_string(lines) + " components, " + std::to_string(fails) + " failed, " + fmt("%.1fs", secs) +
                    " (limit 120s)"};
}

Outcome csa_normalization() {
    Rng rng(derive_seed(2024, "csa-acceptance"));
    double worst_sum = 0;
    std::size_t exact_fail = 0;
    for (int i = 0; i < 1000; ++i) {
        const std::size_t c = 1 + rng.below(8), h = 1 + rng.below(6), w = 1 + rng.below(6), n = 1 + rng.below(2);
        auto x = random_tensor<double>({n, c, h, w}, rng, -4, 4);
        auto wts = random_tensor<double>({c, c, 1, 1}, rng, -3, 3);
        auto b = random_tensor<double>({c, 1, 1, 1}, rng, -1, 1).values();
        auto a = csa_attention(x, wts, std::span<const double>(b));
        for (std::size_t s = 0; s < n; ++s)
            for (std::size_t p = 0; p < h * w; ++p) {
                double sum = 0;
                for (std::size_t k = 0; k < c; ++k) sum += a.plane(s, k)[p];
                worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
            }
        auto zero = CsaModule<double>::zeros(c);
        auto y = csa_forward(x, zero);
        const double factor = 1.0 + 1.0 / static_cast<double>(c);
        for (std::size_t k = 0; k < x.size(); ++k)
            if (y[k] != factor * x[k]) ++exact_fail;
    }
    return {worst_sum <= 1e-12 && exact_fail == 0,
            "1000 inputs, max |sum-1| " + fmt("%.2e", worst_sum) + ", zero-projection mismatches " +
                std::to_string(exact_fail)};
}

Outcome metric_oracles() {
    Rng rng(derive_seed(2024, "metric-acceptance"));
    std::size_t hd_cases = 0, hd_mismatch = 0;
    for (int i = 0; hd_cases < 600; ++i) {
        const std::size_t h = 1 + rng.below(16), w = 1 + rng.below(16);
        BinaryMask a = i % 2 ? random_blob(h, w, rng) : random_mask(h, w, rng, rng.uniform(0.05, 0.95));
        BinaryMask b = i % 3 ? random_blob(h, w, rng) : random_mask(h, w, rng, rng.uniform(0.05, 0.95));
        const double want = reference_hd95(a, b), got = hd95(a, b);
        if (std::isnan(want)) {
            if (!std::isnan(got)) ++hd_mismatch;
            continue;
        }
        ++hd_cases;
        if (got != want || hd95(b, a) != got) ++hd_mismatch;
    }
    std::size_t pairs = 0, identity_fail = 0;
    while (pairs < 500) {
        const std::size_t h = 1 + rng.below(16), w = 1 + rng.below(16);
        BinaryMask a = random_mask(h, w, rng, rng.uniform()), b = random_mask(h, w, rng, rng.uniform());
        if (a.empty() && b.empty()) continue;
        ++pairs;
        const double d = dice_score(a, b), iou = iou_score(a, b);
        if (std::abs(d - 2 * iou / (1 + iou)) > 2.0 / double(a.count() + b.count())) ++identity_fail;
    }
    const double shifted = hd95(rect_mask(16, 16, 3, 3, 10, 10), rect_mask(16, 16, 3, 4, 10, 10));
    return {hd_mismatch == 0 && identity_fail == 0 && shifted == 1.0,
            std::to_string(hd_cases) + " hd95 cases (" + std::to_string(hd_mismatch) + " mismatches), " +
                std::to_string(pairs) + " dice/iou pairs (" + std::to_string(identity_fail) +
                " violations), shifted square hd95 " + fmt("%.17g", shifted)};
}

Outcome loss_contract() {
    Rng rng(derive_seed(2024, "loss-acceptance"));
    std::size_t self_fail = 0;
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
        const std::size_t h = 2 + rng.below(15), w = 2 + rng.below(15);
        Tensor4<double> t(Shape4{1, 1, h, w});
        for (auto& v : t.values()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
        auto p = random_tensor<double>(t.shape(), rng, 0, 1);
        if (combined_loss(t, t) != 0.0) ++self_fail;
        const double expect = 0.9 * dice_loss(t, p) + 0.1 * boundary_loss(t, p);
        worst = std::max(worst, std::abs(combined_loss(t, p) - expect));
    }
    Tensor4<double> empty(Shape4{1, 1, 8, 8});
    const double both_empty = dice_score(empty, empty);
    return {self_fail == 0 && worst <= 1e-12 && both_empty == 1.0,
            "L(y,y)!=0 on " + std::to_string(self_fail) + "/100, max |L - (0.9 Ld + 0.1 Lb)| " + fmt("%.2e", worst) +
                ", both-empty dice " + fmt("%.17g", both_empty)};
}

Outcome structural_fidelity(const fs::path&) {
    std::vector<std::string> problems;
    NetworkConfig def;
    def.height = def.width = 16;  // channel plan is independent of spatial size
    Network<float> full(def);
    if (full.encoder_channels() != std::vector<std::size_t>{64, 128, 256, 512, 1024})
        problems.push_back("default channel plan");

    NetworkConfig desk;
    desk.height = desk.width = 64;
    desk.base_filters = 4;
    desk.depth = 2;
    Network<float> net(desk);
    Rng rng(derive_seed(2024, "structure"));
    auto x = random_tensor<float>({2, 3, 64, 64}, rng, 0, 1);
    auto y = net.forward(x, Mode::Eval);
    bool in_range = true;
    for (float v : y.values()) in_range &= v > 0.0f && v < 1.0f;
    if (!(y.shape() == Shape4{2, 1, 64, 64}) || !in_range) problems.push_back("output shape/range");

    std::string cost_detail;
    for (const std::vector<std::string>& args :
         {std::vector<std::string>{"cost", "--desk-scale"}, std::vector<std::string>{"cost"}}) {
        const RunResult r = cli(args);
        auto grab = [&](const std::string& label) -> long long {
            const auto pos = r.output.find(label);
            return pos == std::string::npos ? -1 : std::stoll(r.output.substr(pos + label.size()));
        };
        const long long delta = grab("delta vs all-off:"), analytic = grab("analytic attention delta:");
        if (r.exit_code != 0 || delta < 0 || delta != analytic) problems.push_back("cost delta " + args.back());
        cost_detail += (cost_detail.empty() ? "" : ", ") + std::string(args.size() > 1 ? "desk" : "default") +
                       " delta " + std::to_string(delta) + " == " + std::to_string(analytic) + " params " +
                       std::to_string(grab("parameters:"));
    }
    std::string detail = "channels 64/128/256/512 + 1024, output (B,1,H,W) in (0,1), " + cost_detail;
    for (const auto& p : problems) detail += "; FAILED " + p;
    return {problems.empty(), detail};
}

Outcome false_positive_protocol(const fs::path& data) {
    const auto volumes = load_dataset(data);
    SplitSpec spec;
    spec.n_train = volumes.size() - 2;
    const DatasetSplits s = build_splits(volumes, spec, {64, 64});
    std::vector<SliceTriplet> above;
    for (const auto& t : s.test_full)
        if (t.region == Region::AboveStructure) above.push_back(t);
    if (above.empty()) return {false, "no above-structure slices in the test volume"};
    const EvalReport report =
        evaluate([](const SliceTriplet& t) { return Tensor4<float>(t.target.shape()); }, above);
    bool ok = true;
    for (const auto& r : report.slices) ok &= r.dice == 1.0 && r.iou == 1.0 && std::isnan(r.hd95);
    const MetricSummary& sum = report.summary[0].summary;
    ok &= sum.dice == 1.0 && sum.hd95_dropped == above.size() && std::isnan(sum.hd95);

    // The same slices inside the full-scan aggregate: NaNs are dropped, not averaged.
    const EvalReport full = evaluate([](const SliceTriplet& t) { return t.target; }, s.test_full);
    ok &= full.summary[0].summary.hd95_dropped == above.size() && full.summary[0].summary.hd95 == 0.0;
    return {ok, std::to_string(above.size()) + " above-structure slices: dice " + fmt("%.17g", sum.dice) +
                    ", hd95 nan on all, dropped count " + std::to_string(sum.hd95_dropped) +
                    "; oracle full-scan hd95 " + fmt("%.17g", full.summary[0].summary.hd95) + " with " +
                    std::to_string(full.summary[0].summary.hd95_dropped) + " dropped"};
}

double min_val_loss(const fs::path& runlog) {
    const auto lines = read_lines(runlog);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < lines.size(); ++i) best = std::min(best, std::stod(split_csv(lines[i])[2]));
    return best;
}

Outcome determinism(const fs::path& work, const fs::path& data) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::string> base{"train", "--desk-scale", "--data", data.string(), "--seed", "0"};
    auto a_args = base, b_args = base;
    a_args.insert(a_args.end(), {"--out", (work / "train_a").string()});
    b_args.insert(b_args.end(), {"--out", (work / "train_b").string()});
    const RunResult a = cli(a_args);
    const RunResult b = cli(b_args);
    if (a.exit_code != 0 || b.exit_code != 0) return {false, "train exited " + std::to_string(a.exit_code) + "/" +
                                                                 std::to_string(b.exit_code) + ": " + a.output};
    const bool same_log = read_file(work / "train_a" / "runlog.csv") == read_file(work / "train_b" / "runlog.csv");

    const double logged = min_val_loss(work / "train_a" / "runlog.csv");
    Network<float> net = load_network<float>(work / "train_a" / "best.ckpt");
    const auto volumes = load_dataset(data);
    SplitSpec spec;
    spec.n_train = volumes.size() - 2;
    const DatasetSplits s = build_splits(volumes, spec, {net.config().height, net.config().width});
    const double reloaded = validate(net, s.val, LossWeights{}).loss;
    const double diff = std::abs(reloaded - logged);
    return {same_log && diff <= 1e-6,
            std::string(same_log ? "runlog.csv byte-identical" : "runlog.csv DIFFERS") + ", best val loss " +
                fmt("%.9g", logged) + " reloaded " + fmt("%.9g", reloaded) + " (|diff| " + fmt("%.2e", diff) +
                ", limit 1e-6), " + fmt("%.0fs", seconds_since(t0))};
}

struct AblationResult {
    bool ran = false;
    std::string error;
    double seconds = 0;
    std::map<std::string, double> dsc;  // "ics,scsa,sag" -> mean dsc
};

AblationResult run_ablation(const fs::path& work, const fs::path& data) {
    AblationResult res;
    const auto t0 = std::chrono::steady_clock::now();
    const RunResult r = cli({"ablate", "--desk-scale", "--data", data.string(), "--out", (work / "ablation").string(),
                              "--seeds", "0,1,2"});
    res.seconds = seconds_since(t0);
    std::cout << r.output << std::flush;
    if (r.exit_code != 0) {
        res.error = "ablate exited " + std::to_string(r.exit_code);
        return res;
    }
    const auto lines = read_lines(work / "ablation" / "ablation.csv");
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto c = split_csv(lines[i]);
        res.dsc[c[0] + "," + c[1] + "," + c[2]] = std::stod(c[3]);
    }
    res.ran = res.dsc.size() == 8;
    if (!res.ran) res.error = "ablation.csv has " + std::to_string(res.dsc.size()) + " rows";
    return res;
}

}  // namespace

int main(int argc, char** argv) {
    fs::path work = fs::temp_directory_path() / "xseg_acceptance";
    bool skip_ablation = false;
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--workdir") == 0 && i + 1 < argc) {
            work = argv[++i];
        } else if (std::strcmp(argv[i], "--skip-ablation") == 0) {
            skip_ablation = true;
        } else {
            std::cerr << "usage: xseg_acceptance [--workdir DIR] [--skip-ablation]\n";
            return 2;
        }
    }
    fs::remove_all(work);
    fs::create_directories(work);
    const fs::path data = work / "data";

    std::vector<std::pair<std::string, Outcome>> results;
    auto record = [&](const std::string& name, const std::function<Outcome()>& fn) {
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
        results.emplace_back(name, o);
    };

    const RunResult gen = cli({"gen", "--out", data.string(), "--volumes", "10", "--slices", "40", "--seed", "0"});
    if (gen.exit_code != 0) {
        std::cout << "FAIL setup: gen exited " << gen.exit_code << "\n" << gen.output;
        return 1;
    }

    record("gradient-integrity", gradient_integrity);
    record("csa-normalization", csa_normalization);
    record("metric-oracles", metric_oracles);
    record("loss-contract", loss_contract);
    record("structural-fidelity", [&] { return structural_fidelity(work); });
    record("false-positive-protocol", [&] { return false_positive_protocol(data); });
    record("determinism", [&] { return determinism(work, data); });

    if (skip_ablation) {
        std::cout << "SKIP ablation-ordering, synthetic-competence (--skip-ablation)\n";
    } else {
        const AblationResult abl = run_ablation(work, data);
        record("ablation-ordering", [&]() -> Outcome {
            if (!abl.ran) return {false, abl.error};
            const double on = abl.dsc.at("1,1,1"), off = abl.dsc.at("0,0,0");
            const bool ok = on >= off - 0.005 && abl.seconds < 90 * 60;
            return {ok, "all-on " + fmt("%.4f", on) + " vs all-off " + fmt("%.4f", off) + " (needs >= off - 0.005), " +
                            fmt("%.1f", abl.seconds / 60) + " min for 24 runs (limit 90)"};
        });
        record("synthetic-competence", [&]() -> Outcome {
            if (!abl.ran) return {false, abl.error};
            const double on = abl.dsc.at("1,1,1");
            return {on >= 0.90, "all-on mean full-scan test DSC " + fmt("%.4f", on) + " over 3 seeds (needs >= 0.90)"};
        });
        if (abl.ran) {
            std::cout << "ablation grid (mean full-scan DSC; informational):\n";
            for (const auto& [k, v] : abl.dsc) std::cout << "  input_csa,skip_csa,skip_ag=" << k << "  " << v << "\n";
        }
    }

    std::size_t failed = 0;
    for (const auto& [name, o] : results) failed += o.pass ? 0 : 1;
    std::cout << (failed == 0 ? "ALL CRITERIA PASSED" : std::to_string(failed) + " CRITERIA FAILED") << " ("
              << results.size() << " evaluated)" << std::endl;
    return failed == 0 ? 0 : 1;
}
