#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "xseg/dataset.hpp"
#include "xseg/losses.hpp"
#include "xseg/metrics.hpp"
#include "xseg/network.hpp"

namespace xseg {

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Bias-corrected Adam on every parameter, then zeroes the gradients.
/// `t` is the 1-based step count; t == 0 throws StateError.
template <typename T>
void adam_step(ParamStore<T>& params, double lr, const AdamOptions& adam, std::uint64_t t);

/// Desk-scale defaults used by --desk-scale. The learning rate is raised from 1e-4
/// because the small network barely moves in 15 epochs at the full-scale rate.
inline constexpr std::size_t kDeskHeight = 64;
inline constexpr std::size_t kDeskWidth = 64;
inline constexpr std::size_t kDeskBaseFilters = 4;
inline constexpr std::size_t kDeskDepth = 2;
inline constexpr std::size_t kDeskEpochs = 15;
inline constexpr double kDeskLearningRate = 1e-3;

struct TrainConfig {
    std::size_t epochs = 100;
    double learning_rate = 1e-4;
    std::size_t batch_size = 4;
    AdamOptions adam;
    LossWeights loss;
    std::uint64_t seed = 0;
    bool desk_scale = false;

    /// Throws ConfigError naming the offending field.
    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0;
    double val_loss = 0;
    double val_dice = 0;
};

struct RunLog {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;  // 1-based, first minimum of val_loss
    double best_val_loss = 0;
    std::filesystem::path checkpoint;  // empty when no checkpoint was written
};

/// Called after every epoch; may print progress.
using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains with the combined loss. Writes `checkpoint` (if non-empty) whenever the
/// validation loss strictly improves. On return the network holds the best weights.
RunLog train(Network<float>& net, const std::vector<SliceTriplet>& train_set, const std::vector<SliceTriplet>& val_set,
             const TrainConfig& config, const std::filesystem::path& checkpoint = {},
             const EpochCallback& on_epoch = {});

struct ValidationResult {
    double loss = 0;  // mean per-slice combined loss
    double dice = 0;  // mean per-slice Dice of binarised prediction
};

ValidationResult validate(Network<float>& net, const std::vector<SliceTriplet>& val_set, const LossWeights& weights);

/// Columns: epoch, train_loss, val_loss, val_dice.
void write_runlog_csv(const RunLog& log, const std::filesystem::path& path);

struct SummaryRow {
    std::string name;  // "full-scan", "proximal", "shaft", "distal"
    MetricSummary summary;
};

struct EvalReport {
    std::vector<MetricRecord> slices;
    std::vector<SummaryRow> summary;  // always four rows in the order above
};

/// Maps a test triplet to a (1, 1, H, W) probability map.
using Predictor = std::function<Tensor4<float>(const SliceTriplet&)>;

/// Throws EmptySetError on an empty test set. A region with no slices gets a
/// zero-count row with NaN means.
EvalReport evaluate(const Predictor& predict, const std::vector<SliceTriplet>& test_set, double threshold = 0.5);
EvalReport evaluate(Network<float>& net, const std::vector<SliceTriplet>& test_set, double threshold = 0.5);

/// Columns: slice_id, region, dice, iou, hd95 (NaN written as "nan").
void write_eval_slices_csv(const EvalReport& report, const std::filesystem::path& path);
/// Columns: subset, count, dice, iou, hd95, hd95_dropped.
void write_eval_summary_csv(const EvalReport& report, const std::filesystem::path& path);
void print_summary(const EvalReport& report, std::ostream& out);

/// `%.17g`, with "nan" for NaN.
std::string format_double(double v);

struct AblationFlags {
    bool input_csa = false;
    bool skip_csa = false;
    bool skip_ag = false;
};

/// None, then single components, then pairs, then all three.
std::array<AblationFlags, 8> ablation_order();

struct AblationRow {
    AblationFlags flags;
    double dsc = 0;  // mean full-scan test Dice over seeds
    double iou = 0;
    std::vector<double> seed_dsc;
};

using AblationProgress = std::function<void(const AblationFlags&, std::uint64_t seed, const EvalReport&)>;

/// Trains every flag combination once per seed; the seed sets both weight init and
/// batch order. Rows come back in ablation_order().
std::vector<AblationRow> run_ablation_grid(const NetworkConfig& base, const TrainConfig& train_config,
                                           const DatasetSplits& splits, const std::vector<std::uint64_t>& seeds,
                                           const AblationProgress& progress = {});

/// Header: input_csa, skip_csa, skip_ag, dsc, iou. Flags are written as 0/1.
void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path);

}  // namespace xseg
