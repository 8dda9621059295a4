#include "xseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace xseg {

namespace {

void require_same_dims(const BinaryMask& a, const BinaryMask& b, const char* what) {
    if (a.height != b.height || a.width != b.width)
        throw DimensionError(std::string(what) + ": mask dims " + std::to_string(a.height) + "x" +
                             std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                             std::to_string(b.width));
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1-D squared distance transform of f (Felzenszwalb & Huttenlocher).
void dt_1d(const double* f, std::size_t n, double* d, std::vector<std::size_t>& v, std::vector<double>& z) {
    v.assign(n, 0);
    z.assign(n + 1, 0);
    std::size_t k = 0;
    // Skip leading infinite samples; they never contribute.
    std::size_t first = 0;
    while (first < n && !std::isfinite(f[first])) ++first;
    if (first == n) {
        std::fill(d, d + n, kInf);
        return;
    }
    v[0] = first;
    z[0] = -kInf;
    z[1] = kInf;
    for (std::size_t q = first + 1; q < n; ++q) {
        if (!std::isfinite(f[q])) continue;
        const double qd = static_cast<double>(q);
        double s;
        while (true) {
            const double vd = static_cast<double>(v[k]);
            s = ((f[q] + qd * qd) - (f[v[k]] + vd * vd)) / (2.0 * qd - 2.0 * vd);
            // z[0] = -inf, so this stops at k = 0.
            if (s <= z[k]) {
                --k;
                continue;
            }
            break;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        const double qd = static_cast<double>(q);
        while (z[k + 1] < qd) ++k;
        const double diff = qd - static_cast<double>(v[k]);
        d[q] = diff * diff + f[v[k]];
    }
}

}  // namespace

std::size_t BinaryMask::count() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

template <typename T>
BinaryMask binarize_plane(const Tensor4<T>& t, std::size_t b, std::size_t c, double threshold) {
    BinaryMask m(t.h(), t.w());
    const T* p = t.plane(b, c);
    for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = static_cast<double>(p[i]) > threshold ? 1 : 0;
    return m;
}

template <typename T>
BinaryMask binarize(const Tensor4<T>& y_pred, double threshold) {
    if (y_pred.n() != 1 || y_pred.c() != 1)
        throw DimensionError("binarize: expects a single plane, got " + y_pred.shape().str());
    return binarize_plane(y_pred, 0, 0, threshold);
}

template <typename T>
Tensor4<T> mask_to_tensor(const BinaryMask& mask) {
    Tensor4<T> t(Shape4{1, 1, mask.height, mask.width});
    for (std::size_t i = 0; i < mask.bits.size(); ++i) t[i] = mask.bits[i] ? T(1) : T(0);
    return t;
}

double dice_score(const BinaryMask& a, const BinaryMask& b) {
    require_same_dims(a, b, "dice_score");
    std::size_t inter = 0, total = 0;
    for (std::size_t i = 0; i < a.bits.size(); ++i) {
        inter += a.bits[i] & b.bits[i];
        total += a.bits[i] + b.bits[i];
    }
    return (2.0 * static_cast<double>(inter) + 1.0) / (static_cast<double>(total) + 1.0);
}

double iou_score(const BinaryMask& a, const BinaryMask& b) {
    require_same_dims(a, b, "iou_score");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.bits.size(); ++i) {
        inter += a.bits[i] & b.bits[i];
        uni += a.bits[i] | b.bits[i];
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

BinaryMask boundary_pixels(const BinaryMask& mask) {
    BinaryMask out(mask.height, mask.width);
    const std::size_t h = mask.height, w = mask.width;
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            if (!mask.at(y, x)) continue;
            const bool border = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            if (border || !mask.at(y - 1, x) || !mask.at(y + 1, x) || !mask.at(y, x - 1) || !mask.at(y, x + 1))
                out.set(y, x);
        }
    }
    return out;
}

std::vector<double> squared_distance_transform(const BinaryMask& features) {
    const std::size_t h = features.height, w = features.width;
    std::vector<double> grid(h * w);
    for (std::size_t i = 0; i < grid.size(); ++i) grid[i] = features.bits[i] ? 0.0 : kInf;

    std::vector<std::size_t> v;
    std::vector<double> z;
    std::vector<double> in(std::max(h, w)), out(std::max(h, w));
    for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t y = 0; y < h; ++y) in[y] = grid[y * w + x];
        dt_1d(in.data(), h, out.data(), v, z);
        for (std::size_t y = 0; y < h; ++y) grid[y * w + x] = out[y];
    }
    for (std::size_t y = 0; y < h; ++y) {
        std::copy_n(grid.begin() + static_cast<std::ptrdiff_t>(y * w), w, in.begin());
        dt_1d(in.data(), w, out.data(), v, z);
        std::copy_n(out.begin(), w, grid.begin() + static_cast<std::ptrdiff_t>(y * w));
    }
    return grid;
}

double percentile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

double hd95(const BinaryMask& a, const BinaryMask& b) {
    require_same_dims(a, b, "hd95");
    const BinaryMask ba = boundary_pixels(a);
    const BinaryMask bb = boundary_pixels(b);
    if (ba.empty() || bb.empty()) return std::numeric_limits<double>::quiet_NaN();

    const std::vector<double> to_b = squared_distance_transform(bb);
    const std::vector<double> to_a = squared_distance_transform(ba);
    std::vector<double> distances;
    for (std::size_t i = 0; i < ba.bits.size(); ++i)
        if (ba.bits[i]) distances.push_back(std::sqrt(to_b[i]));
    for (std::size_t i = 0; i < bb.bits.size(); ++i)
        if (bb.bits[i]) distances.push_back(std::sqrt(to_a[i]));
    std::sort(distances.begin(), distances.end());
    return percentile_sorted(distances, 0.95);
}

std::string_view region_name(Region r) {
    switch (r) {
        case Region::AboveStructure: return "above-structure";
        case Region::Proximal: return "proximal";
        case Region::Shaft: return "shaft";
        case Region::Distal: return "distal";
        case Region::Unspecified: return "unspecified";
    }
    return "unspecified";
}

Region parse_region(std::string_view tag) {
    for (Region r : {Region::AboveStructure, Region::Proximal, Region::Shaft, Region::Distal, Region::Unspecified})
        if (region_name(r) == tag) return r;
    throw FormatError("unknown region tag '" + std::string(tag) + "'");
}

MetricRecord score_slice(std::string slice_id, Region region, const BinaryMask& truth, const BinaryMask& pred) {
    return MetricRecord{std::move(slice_id), region, dice_score(truth, pred), iou_score(truth, pred),
                        hd95(truth, pred)};
}

MetricSummary aggregate(const std::vector<MetricRecord>& records, std::optional<Region> region) {
    MetricSummary s;
    double dice = 0, iou = 0, hd = 0;
    std::size_t hd_count = 0;
    for (const auto& r : records) {
        if (region && r.region != *region) continue;
        ++s.count;
        dice += r.dice;
        iou += r.iou;
        if (std::isnan(r.hd95)) {
            ++s.hd95_dropped;
        } else {
            hd += r.hd95;
            ++hd_count;
        }
    }
    if (s.count == 0)
        throw EmptySetError("aggregate: no records" +
                            (region ? " for region " + std::string(region_name(*region)) : std::string()));
    s.dice = dice / static_cast<double>(s.count);
    s.iou = iou / static_cast<double>(s.count);
    s.hd95 = hd_count == 0 ? std::numeric_limits<double>::quiet_NaN() : hd / static_cast<double>(hd_count);
    return s;
}

template BinaryMask binarize<float>(const Tensor4<float>&, double);
template BinaryMask binarize<double>(const Tensor4<double>&, double);
template BinaryMask binarize_plane<float>(const Tensor4<float>&, std::size_t, std::size_t, double);
template BinaryMask binarize_plane<double>(const Tensor4<double>&, std::size_t, std::size_t, double);
template Tensor4<float> mask_to_tensor<float>(const BinaryMask&);
template Tensor4<double> mask_to_tensor<double>(const BinaryMask&);

}  // namespace xseg
