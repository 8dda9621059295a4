#pragma once

// Synthetic long-bone phantoms, on-disk slice directories, resizing, 2.5D triplets
// and volume-level train/val/test splits.
//
// On-disk layout for one volume:
//   <root>/<volume_id>/images/NNNN.png   8-bit gray, intensity * 255
//   <root>/<volume_id>/masks/NNNN.png    8-bit gray, 255 inside / 0 outside
//   <root>/<volume_id>/regions.txt       one region tag per line, index-aligned

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "xseg/metrics.hpp"
#include "xseg/tensor.hpp"

namespace xseg {

struct ImageSize {
    std::size_t height = 0;
    std::size_t width = 0;
    bool operator==(const ImageSize&) const = default;
};

/// Gray image with values in [0, 1].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> pixels;

    float at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
    bool operator==(const Image&) const = default;
};

struct PhantomVolume {
    std::string id;
    std::vector<Image> images;
    std::vector<BinaryMask> masks;
    std::vector<Region> regions;

    std::size_t n_slices() const { return images.size(); }
    bool operator==(const PhantomVolume&) const = default;
};

struct PhantomOptions {
    double noise_sigma = 0.05;
    // Top-to-bottom region fractions; shaft takes the remainder.
    double above_fraction = 0.10;
    double proximal_fraction = 0.25;
    double distal_fraction = 0.25;
};

inline constexpr std::size_t kMinPhantomSlices = 8;

/// Deterministic in (seed, n_slices, raw, options). Throws ConfigError if n_slices < 8
/// or the raw size is too small to hold the bone.
PhantomVolume generate_phantom(std::uint64_t seed, std::size_t n_slices, ImageSize raw,
                               const PhantomOptions& options = {});

/// Writes images/, masks/ and regions.txt under `dir` (created if missing).
void save_volume(const PhantomVolume& volume, const std::filesystem::path& dir);

/// Reads one volume directory; the volume id is the directory name.
PhantomVolume load_slice_dir(const std::filesystem::path& dir);

/// Every volume directory under `root`, sorted by name.
std::vector<PhantomVolume> load_dataset(const std::filesystem::path& root);

/// Bilinear (half-pixel centres, edge clamped). Throws ConfigError on a zero target.
Image resize_image(const Image& image, ImageSize target);

/// Nearest neighbour; preserves binarity.
BinaryMask resize_mask(const BinaryMask& mask, ImageSize target);

struct SliceTriplet {
    Tensor4<float> input;   // (1, 3, H, W): slices i-1, i, i+1
    Tensor4<float> target;  // (1, 1, H, W): mask of slice i
    std::string slice_id;   // "<volume_id>/<NNNN>"
    Region region = Region::Unspecified;
};

/// One triplet per slice; the volume ends are edge-replicated.
std::vector<SliceTriplet> make_triplets(const PhantomVolume& volume, ImageSize network_size);

struct SplitSpec {
    std::size_t n_train = 8;
    std::size_t n_val = 1;
    std::size_t n_test = 1;
    /// Max shaft share among proximal + shaft + distal training slices; <= 0 disables.
    double shaft_cap = 0.4;
    std::uint64_t seed = 0;
};

struct DatasetSplits {
    std::vector<std::string> train_volumes, val_volumes, test_volumes;
    std::vector<SliceTriplet> train;
    std::vector<SliceTriplet> val;
    std::vector<SliceTriplet> test_full;                    // every slice of the test volumes
    std::map<Region, std::vector<SliceTriplet>> test_regions; // proximal, shaft, distal
    std::size_t shaft_dropped = 0;
};

/// Volumes are assigned in order: first n_train to training, then validation, then test.
DatasetSplits build_splits(const std::vector<PhantomVolume>& volumes, const SplitSpec& spec, ImageSize network_size);

/// Drops randomly chosen shaft slices until the shaft share is at most `cap`.
/// Returns the number removed.
std::size_t cap_shaft_share(std::vector<SliceTriplet>& slices, double cap, std::uint64_t seed);

}  // namespace xseg
