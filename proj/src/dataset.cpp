#include "xseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "xseg/errors.hpp"
#include "xseg/image_io.hpp"
#include "xseg/parallel.hpp"
#include "xseg/rng.hpp"

namespace xseg {

namespace {

constexpr double kPi = std::numbers::pi;

struct Lobe {
    double cx, cy, rx, ry;
};

// Normalised elliptical radius of (x, y) in the lobe shrunk by `inset` pixels.
bool inside(const Lobe& l, double x, double y, double inset) {
    const double rx = l.rx - inset, ry = l.ry - inset;
    if (rx <= 0 || ry <= 0) return false;
    const double dx = (x - l.cx) / rx, dy = (y - l.cy) / ry;
    return dx * dx + dy * dy <= 1.0;
}

struct VolumeStyle {
    double drift_x_amp, drift_y_amp, drift_phase, drift_freq;
    double shaft_radius;
    double thickness;
    double head_side;  // -1 or +1: which side the proximal head sits on
    double tex_fx[2], tex_fy[2], tex_phase[2];
    double marrow_tilt;
};

std::vector<Lobe> slice_lobes(Region region, double t, double cx, double cy, double u, const VolumeStyle& st) {
    const double r = st.shaft_radius;
    switch (region) {
        case Region::Proximal: {
            // t = 0 at the top of the bone, 1 where it meets the shaft.
            const double grow = 1.0 - t;
            std::vector<Lobe> lobes{{cx, cy, r * (1.0 + 0.45 * grow) * 1.1, r * (1.0 + 0.3 * grow)}};
            const double head_r = (2.0 + 4.5 * grow) * u;
            if (grow > 0.15)
                lobes.push_back({cx + st.head_side * 8.5 * grow * u, cy - 1.5 * grow * u, head_r, head_r * 0.95});
            return lobes;
        }
        case Region::Shaft: return {{cx, cy, r, r * 0.95}};
        case Region::Distal: {
            // t = 0 where the shaft ends, 1 at the bottom.
            const double spread = 6.0 * t * u;
            const double rr = r * (0.85 + 0.35 * t);
            return {{cx - spread, cy + 0.5 * t * u, rr, rr * 0.9}, {cx + spread, cy + 0.5 * t * u, rr, rr * 0.9}};
        }
        default: return {};
    }
}

std::string slice_name(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04zu", i);
    return buf;
}

}  // namespace

PhantomVolume generate_phantom(std::uint64_t seed, std::size_t n_slices, ImageSize raw, const PhantomOptions& options) {
    if (n_slices < kMinPhantomSlices)
        throw ConfigError("generate_phantom: n_slices must be >= " + std::to_string(kMinPhantomSlices) + ", got " +
                          std::to_string(n_slices));
    const double u = std::min(static_cast<double>(raw.height) / 40.0, static_cast<double>(raw.width) / 90.0);
    if (u < 0.5)
        throw ConfigError("generate_phantom: raw size " + std::to_string(raw.height) + "x" + std::to_string(raw.width) +
                          " is too small (need at least 20x45)");

    const auto count = [&](double f) { return static_cast<std::size_t>(std::lround(f * static_cast<double>(n_slices))); };
    const std::size_t n_above = std::max<std::size_t>(1, count(options.above_fraction));
    const std::size_t n_prox = std::max<std::size_t>(1, count(options.proximal_fraction));
    const std::size_t n_dist = std::max<std::size_t>(1, count(options.distal_fraction));
    if (n_above + n_prox + n_dist >= n_slices) throw ConfigError("generate_phantom: region fractions leave no shaft");
    const std::size_t n_shaft = n_slices - n_above - n_prox - n_dist;

    Rng rng(derive_seed(seed, "phantom"));
    VolumeStyle st{};
    st.drift_x_amp = rng.uniform(2.0, 5.0) * u;
    st.drift_y_amp = rng.uniform(0.5, 2.0) * u;
    st.drift_phase = rng.uniform(0.0, 2.0 * kPi);
    st.drift_freq = rng.uniform(0.5, 1.2);
    st.shaft_radius = rng.uniform(6.0, 7.0) * u;
    st.thickness = rng.uniform(2.0, 4.0) * u;
    st.head_side = rng.uniform() < 0.5 ? -1.0 : 1.0;
    for (int k = 0; k < 2; ++k) {
        st.tex_fx[k] = rng.uniform(0.05, 0.25) / u;
        st.tex_fy[k] = rng.uniform(0.05, 0.25) / u;
        st.tex_phase[k] = rng.uniform(0.0, 2.0 * kPi);
    }
    st.marrow_tilt = rng.uniform(-0.08, 0.08);

    PhantomVolume vol;
    vol.id = "phantom";
    vol.images.reserve(n_slices);
    vol.masks.reserve(n_slices);
    vol.regions.reserve(n_slices);

    const double h = static_cast<double>(raw.height), w = static_cast<double>(raw.width);
    for (std::size_t s = 0; s < n_slices; ++s) {
        Region region;
        double t = 0;
        if (s < n_above) {
            region = Region::AboveStructure;
        } else if (s < n_above + n_prox) {
            region = Region::Proximal;
            t = n_prox == 1 ? 1.0 : static_cast<double>(s - n_above) / static_cast<double>(n_prox - 1);
        } else if (s < n_above + n_prox + n_shaft) {
            region = Region::Shaft;
        } else {
            region = Region::Distal;
            const std::size_t k = s - n_above - n_prox - n_shaft;
            t = n_dist == 1 ? 1.0 : static_cast<double>(k) / static_cast<double>(n_dist - 1);
        }
        const double z = static_cast<double>(s) / static_cast<double>(n_slices);
        const double cx = w / 2.0 + st.drift_x_amp * std::sin(st.drift_phase + 2.0 * kPi * st.drift_freq * z);
        const double cy = h / 2.0 + st.drift_y_amp * std::cos(st.drift_phase + 2.0 * kPi * st.drift_freq * z);
        const std::vector<Lobe> lobes = slice_lobes(region, t, cx, cy, u, st);

        const double shift = rng.uniform(-0.03, 0.03);
        const double tex_drift = 0.3 * z;
        Image img{raw.height, raw.width, std::vector<float>(raw.height * raw.width)};
        BinaryMask mask(raw.height, raw.width);
        for (std::size_t y = 0; y < raw.height; ++y) {
            for (std::size_t x = 0; x < raw.width; ++x) {
                const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
                bool in_bone = false, in_marrow = false;
                for (const Lobe& l : lobes) {
                    in_bone = in_bone || inside(l, px, py, 0.0);
                    in_marrow = in_marrow || inside(l, px, py, st.thickness);
                }
                double v;
                if (in_marrow) {
                    v = 0.75 + st.marrow_tilt * (px - cx) / (8.0 * u);
                } else if (in_bone) {
                    v = 0.08;
                } else {
                    v = 0.35 + 0.06 * std::sin(st.tex_fx[0] * px + st.tex_phase[0] + tex_drift) *
                                   std::cos(st.tex_fy[0] * py + st.tex_phase[1]) +
                        0.04 * std::sin(st.tex_fx[1] * px + st.tex_fy[1] * py + st.tex_phase[1] - tex_drift);
                }
                v += shift + options.noise_sigma * rng.normal();
                img.pixels[y * raw.width + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
                if (in_bone) mask.set(y, x);
            }
        }
        if (region != Region::AboveStructure && mask.count() < 20)
            throw ConfigError("generate_phantom: slice " + std::to_string(s) + " has too few mask pixels");
        vol.images.push_back(std::move(img));
        vol.masks.push_back(std::move(mask));
        vol.regions.push_back(region);
    }
    return vol;
}

void save_volume(const PhantomVolume& volume, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir / "images", ec);
    if (!ec) fs::create_directories(dir / "masks", ec);
    if (ec) throw FileError("cannot create " + dir.string() + ": " + ec.message());

    for (std::size_t i = 0; i < volume.n_slices(); ++i) {
        const Image& img = volume.images[i];
        Image8 out{img.height, img.width, 1, std::vector<std::uint8_t>(img.pixels.size())};
        for (std::size_t k = 0; k < img.pixels.size(); ++k)
            out.pixels[k] = static_cast<std::uint8_t>(std::lround(std::clamp(img.pixels[k], 0.0f, 1.0f) * 255.0f));
        write_png(dir / "images" / (slice_name(i) + ".png"), out);

        const BinaryMask& m = volume.masks[i];
        Image8 mout{m.height, m.width, 1, std::vector<std::uint8_t>(m.bits.size())};
        for (std::size_t k = 0; k < m.bits.size(); ++k) mout.pixels[k] = m.bits[k] ? 255 : 0;
        write_png(dir / "masks" / (slice_name(i) + ".png"), mout);
    }
    std::ofstream regions(dir / "regions.txt");
    if (!regions) throw FileError("cannot write " + (dir / "regions.txt").string());
    for (Region r : volume.regions) regions << region_name(r) << '\n';
    if (!regions) throw FileError("failed writing " + (dir / "regions.txt").string());
}

PhantomVolume load_slice_dir(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    const fs::path manifest = dir / "regions.txt";
    std::ifstream in(manifest);
    if (!in) throw FileError("missing region manifest " + manifest.string());

    PhantomVolume vol;
    vol.id = dir.filename().string();
    if (vol.id.empty()) vol.id = dir.parent_path().filename().string();
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        vol.regions.push_back(parse_region(line));
    }
    if (vol.regions.empty()) throw FormatError(manifest.string() + " lists no slices");

    for (std::size_t i = 0; i < vol.regions.size(); ++i) {
        const fs::path ipath = dir / "images" / (slice_name(i) + ".png");
        const fs::path mpath = dir / "masks" / (slice_name(i) + ".png");
        if (!fs::exists(ipath)) throw FileError("slice " + std::to_string(i) + ": missing image " + ipath.string());
        if (!fs::exists(mpath)) throw FileError("slice " + std::to_string(i) + ": missing mask " + mpath.string());
        const Image8 raw = read_png_gray(ipath);
        const Image8 mraw = read_png_gray(mpath);
        if (mraw.height != raw.height || mraw.width != raw.width)
            throw FormatError("slice " + std::to_string(i) + ": image and mask sizes differ");
        if (!vol.images.empty() && (raw.height != vol.images[0].height || raw.width != vol.images[0].width))
            throw FormatError("slice " + std::to_string(i) + ": size differs from slice 0 in " + dir.string());

        Image img{raw.height, raw.width, std::vector<float>(raw.pixels.size())};
        for (std::size_t k = 0; k < raw.pixels.size(); ++k) img.pixels[k] = static_cast<float>(raw.pixels[k]) / 255.0f;
        BinaryMask m(mraw.height, mraw.width);
        for (std::size_t k = 0; k < mraw.pixels.size(); ++k) m.bits[k] = mraw.pixels[k] > 127 ? 1 : 0;
        vol.images.push_back(std::move(img));
        vol.masks.push_back(std::move(m));
    }
    return vol;
}

std::vector<PhantomVolume> load_dataset(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw FileError("dataset directory " + root.string() + " does not exist");
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory() && fs::exists(entry.path() / "regions.txt")) dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());
    std::vector<PhantomVolume> volumes;
    volumes.reserve(dirs.size());
    for (const auto& d : dirs) volumes.push_back(load_slice_dir(d));
    return volumes;
}

Image resize_image(const Image& image, ImageSize target) {
    if (target.height == 0 || target.width == 0) throw ConfigError("resize: target size must be nonzero");
    if (image.height == target.height && image.width == target.width) return image;
    Image out{target.height, target.width, std::vector<float>(target.height * target.width)};
    const double sy = static_cast<double>(image.height) / static_cast<double>(target.height);
    const double sx = static_cast<double>(image.width) / static_cast<double>(target.width);
    const double max_y = static_cast<double>(image.height - 1), max_x = static_cast<double>(image.width - 1);
    for (std::size_t y = 0; y < target.height; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, max_y);
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, image.height - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < target.width; ++x) {
            const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, max_x);
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, image.width - 1);
            const double wx = fx - static_cast<double>(x0);
            const double top = (1 - wx) * image.at(y0, x0) + wx * image.at(y0, x1);
            const double bot = (1 - wx) * image.at(y1, x0) + wx * image.at(y1, x1);
            out.pixels[y * target.width + x] = static_cast<float>((1 - wy) * top + wy * bot);
        }
    }
    return out;
}

BinaryMask resize_mask(const BinaryMask& mask, ImageSize target) {
    if (target.height == 0 || target.width == 0) throw ConfigError("resize: target size must be nonzero");
    BinaryMask out(target.height, target.width);
    // floor((dst + 0.5) * in / out) in exact integer arithmetic.
    for (std::size_t y = 0; y < target.height; ++y) {
        const std::size_t sy = std::min((2 * y + 1) * mask.height / (2 * target.height), mask.height - 1);
        for (std::size_t x = 0; x < target.width; ++x) {
            const std::size_t sx = std::min((2 * x + 1) * mask.width / (2 * target.width), mask.width - 1);
            out.bits[y * target.width + x] = mask.at(sy, sx);
        }
    }
    return out;
}

std::vector<SliceTriplet> make_triplets(const PhantomVolume& volume, ImageSize network_size) {
    const std::size_t n = volume.n_slices();
    if (n == 0) throw ConfigError("make_triplets: volume '" + volume.id + "' has no slices");
    std::vector<Image> resized(n);
    parallel_for(n, [&](std::size_t i) { resized[i] = resize_image(volume.images[i], network_size); });

    std::vector<SliceTriplet> out(n);
    const std::size_t plane = network_size.height * network_size.width;
    parallel_for(n, [&](std::size_t i) {
        const std::size_t idx[3] = {i == 0 ? 0 : i - 1, i, std::min(i + 1, n - 1)};
        SliceTriplet& tr = out[i];
        tr.input = Tensor4<float>(Shape4{1, 3, network_size.height, network_size.width});
        for (std::size_t c = 0; c < 3; ++c) std::copy_n(resized[idx[c]].pixels.data(), plane, tr.input.plane(0, c));
        tr.target = mask_to_tensor<float>(resize_mask(volume.masks[i], network_size));
        tr.slice_id = volume.id + "/" + slice_name(i);
        tr.region = volume.regions[i];
    });
    return out;
}

std::size_t cap_shaft_share(std::vector<SliceTriplet>& slices, double cap, std::uint64_t seed) {
    if (cap <= 0.0 || cap >= 1.0) return 0;
    std::vector<std::size_t> shaft;
    std::size_t anatomical = 0;
    for (std::size_t i = 0; i < slices.size(); ++i) {
        const Region r = slices[i].region;
        if (r == Region::Proximal || r == Region::Shaft || r == Region::Distal) ++anatomical;
        if (r == Region::Shaft) shaft.push_back(i);
    }
    const double others = static_cast<double>(anatomical - shaft.size());
    const auto keep = static_cast<std::size_t>(std::floor(cap * others / (1.0 - cap) + 1e-9));
    if (shaft.size() <= keep) return 0;

    Rng rng(derive_seed(seed, "shaft-cap"));
    rng.shuffle(shaft);
    const std::size_t n_drop = shaft.size() - keep;
    std::vector<std::uint8_t> drop(slices.size(), 0);
    for (std::size_t k = 0; k < n_drop; ++k) drop[shaft[k]] = 1;
    std::vector<SliceTriplet> kept;
    kept.reserve(slices.size() - n_drop);
    for (std::size_t i = 0; i < slices.size(); ++i)
        if (!drop[i]) kept.push_back(std::move(slices[i]));
    slices = std::move(kept);
    return n_drop;
}

DatasetSplits build_splits(const std::vector<PhantomVolume>& volumes, const SplitSpec& spec, ImageSize network_size) {
    if (volumes.size() < 3)
        throw ConfigError("build_splits: need at least 3 volumes, got " + std::to_string(volumes.size()));
    if (spec.n_train == 0 || spec.n_val == 0 || spec.n_test == 0)
        throw ConfigError("build_splits: train, val and test must each get at least one volume");
    if (spec.n_train + spec.n_val + spec.n_test > volumes.size())
        throw ConfigError("build_splits: split " + std::to_string(spec.n_train) + "/" + std::to_string(spec.n_val) +
                          "/" + std::to_string(spec.n_test) + " needs more than the " +
                          std::to_string(volumes.size()) + " volumes available");

    DatasetSplits out;
    auto append = [&](const PhantomVolume& v, std::vector<SliceTriplet>& dst) {
        auto t = make_triplets(v, network_size);
        std::move(t.begin(), t.end(), std::back_inserter(dst));
    };
    std::size_t i = 0;
    for (; i < spec.n_train; ++i) {
        out.train_volumes.push_back(volumes[i].id);
        append(volumes[i], out.train);
    }
    for (; i < spec.n_train + spec.n_val; ++i) {
        out.val_volumes.push_back(volumes[i].id);
        append(volumes[i], out.val);
    }
    for (; i < spec.n_train + spec.n_val + spec.n_test; ++i) {
        out.test_volumes.push_back(volumes[i].id);
        append(volumes[i], out.test_full);
    }
    out.shaft_dropped = cap_shaft_share(out.train, spec.shaft_cap, spec.seed);
    for (Region r : {Region::Proximal, Region::Shaft, Region::Distal}) out.test_regions[r];
    for (const auto& t : out.test_full) {
        auto it = out.test_regions.find(t.region);
        if (it != out.test_regions.end()) it->second.push_back(t);
    }
    return out;
}

}  // namespace xseg
