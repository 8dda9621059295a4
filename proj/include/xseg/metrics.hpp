#pragma once

// Per-slice evaluation metrics on binarised masks, and their aggregation.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "xseg/tensor.hpp"

namespace xseg {

struct BinaryMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> bits;  // row-major, 0 or 1

    BinaryMask() = default;
    BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}

    std::uint8_t at(std::size_t y, std::size_t x) const { return bits[y * width + x]; }
    void set(std::size_t y, std::size_t x, bool on = true) { bits[y * width + x] = on ? 1 : 0; }
    std::size_t count() const;
    bool empty() const { return count() == 0; }
    bool operator==(const BinaryMask&) const = default;
};

/// 1 where value > threshold (strictly), else 0. The tensor must hold one plane.
template <typename T>
BinaryMask binarize(const Tensor4<T>& y_pred, double threshold = 0.5);

/// Plane (b, c) of a tensor.
template <typename T>
BinaryMask binarize_plane(const Tensor4<T>& t, std::size_t b, std::size_t c, double threshold = 0.5);

template <typename T>
Tensor4<T> mask_to_tensor(const BinaryMask& mask);

/// Dice on binary masks with smoothing 1 (both empty -> 1).
double dice_score(const BinaryMask& a, const BinaryMask& b);

/// |a & b| / |a | b|; both empty -> 1.
double iou_score(const BinaryMask& a, const BinaryMask& b);

/// Mask pixels with a 4-neighbour outside the mask, or on the image border.
BinaryMask boundary_pixels(const BinaryMask& mask);

/// Squared Euclidean distance from every pixel to the nearest set pixel of `features`
/// (exact, separable lower-envelope transform). +inf everywhere if `features` is empty.
std::vector<double> squared_distance_transform(const BinaryMask& features);

/// Linear interpolation between order statistics of an ascending-sorted sample.
double percentile_sorted(const std::vector<double>& sorted, double q);

/// Symmetric 95th-percentile boundary distance in pixels; NaN if either mask is empty.
double hd95(const BinaryMask& a, const BinaryMask& b);

enum class Region { AboveStructure, Proximal, Shaft, Distal, Unspecified };

std::string_view region_name(Region r);
/// Throws FormatError on an unknown tag.
Region parse_region(std::string_view tag);

struct MetricRecord {
    std::string slice_id;
    Region region = Region::Unspecified;
    double dice = 0;
    double iou = 0;
    double hd95 = 0;
};

MetricRecord score_slice(std::string slice_id, Region region, const BinaryMask& truth, const BinaryMask& pred);

struct MetricSummary {
    std::size_t count = 0;
    double dice = 0;
    double iou = 0;
    double hd95 = 0;              // nanmean; NaN if every slice was NaN
    std::size_t hd95_dropped = 0; // NaN entries excluded from the hd95 mean
};

/// Means over records matching `region` (all records when nullopt).
/// Throws EmptySetError if nothing matches.
MetricSummary aggregate(const std::vector<MetricRecord>& records, std::optional<Region> region = std::nullopt);

}  // namespace xseg
