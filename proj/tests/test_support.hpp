#pragma once

// Helpers shared by the unit tests and the acceptance runner. The reference
// implementations here are deliberately naive and share no code with the library.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include "xseg/metrics.hpp"
#include "xseg/rng.hpp"
#include "xseg/tensor.hpp"

namespace xseg::testing {

class TempDir {
public:
    explicit TempDir(const std::string& tag = "xseg") {
        std::string templ = (std::filesystem::temp_directory_path() / (tag + "-XXXXXX")).string();
        if (::mkdtemp(templ.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
        path_ = templ;
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

template <typename T>
Tensor4<T> random_tensor(Shape4 shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor4<T> t(shape);
    for (auto& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

inline BinaryMask random_mask(std::size_t h, std::size_t w, Rng& rng, double p) {
    BinaryMask m(h, w);
    for (auto& b : m.bits) b = rng.uniform() < p ? 1 : 0;
    return m;
}

/// Axis-aligned filled rectangle in an h x w mask.
inline BinaryMask rect_mask(std::size_t h, std::size_t w, std::size_t y0, std::size_t x0, std::size_t rh,
                            std::size_t rw) {
    BinaryMask m(h, w);
    for (std::size_t y = y0; y < y0 + rh; ++y)
        for (std::size_t x = x0; x < x0 + rw; ++x) m.set(y, x);
    return m;
}

/// Random blob: union of a few rectangles, so boundaries have some structure.
inline BinaryMask random_blob(std::size_t h, std::size_t w, Rng& rng) {
    BinaryMask m(h, w);
    const std::size_t pieces = 1 + rng.below(3);
    for (std::size_t k = 0; k < pieces; ++k) {
        const std::size_t y0 = rng.below(h), x0 = rng.below(w);
        const std::size_t rh = 1 + rng.below(h - y0), rw = 1 + rng.below(w - x0);
        for (std::size_t y = y0; y < y0 + rh; ++y)
            for (std::size_t x = x0; x < x0 + rw; ++x) m.set(y, x);
    }
    return m;
}

// ---- brute-force HD95 ------------------------------------------------------

inline std::vector<std::array<long, 2>> reference_boundary(const BinaryMask& m) {
    std::vector<std::array<long, 2>> pts;
    const long h = static_cast<long>(m.height), w = static_cast<long>(m.width);
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            if (!m.at(y, x)) continue;
            bool edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            if (!edge) edge = !m.at(y - 1, x) || !m.at(y + 1, x) || !m.at(y, x - 1) || !m.at(y, x + 1);
            if (edge) pts.push_back({y, x});
        }
    return pts;
}

inline double reference_hd95(const BinaryMask& a, const BinaryMask& b) {
    const auto pa = reference_boundary(a), pb = reference_boundary(b);
    if (pa.empty() || pb.empty()) return std::numeric_limits<double>::quiet_NaN();
    std::vector<double> d;
    auto directed = [&d](const auto& from, const auto& to) {
        for (const auto& p : from) {
            long best = std::numeric_limits<long>::max();
            for (const auto& q : to) {
                const long dy = p[0] - q[0], dx = p[1] - q[1];
                best = std::min(best, dy * dy + dx * dx);
            }
            d.push_back(std::sqrt(static_cast<double>(best)));
        }
    };
    directed(pa, pb);
    directed(pb, pa);
    std::sort(d.begin(), d.end());
    const double pos = 0.95 * static_cast<double>(d.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, d.size() - 1);
    return d[lo] + (pos - static_cast<double>(lo)) * (d[hi] - d[lo]);
}

// ---- subprocess --------------------------------------------------------------

struct RunResult {
    int exit_code = -1;
    std::string output;  // stdout and stderr interleaved
};

inline std::string shell_quote(const std::string& s) {
    std::string q = "'";
    for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
    return q + "'";
}

inline RunResult run_command(const std::vector<std::string>& argv) {
    std::string cmd;
    for (const auto& a : argv) cmd += shell_quote(a) + ' ';
    cmd += "2>&1";
    RunResult r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    if (pipe == nullptr) return r;
    std::array<char, 4096> buf{};
    std::size_t n;
    while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.output.append(buf.data(), n);
    const int status = ::pclose(pipe);
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    return lines;
}

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
    return out;
}

inline bool contains(const std::string& haystack, const std::string& needle) {
    return haystack.find(needle) != std::string::npos;
}

}  // namespace xseg::testing

namespace xseg::testing {

/// Central differences of a scalar function with respect to every entry of `x`.
template <typename F>
std::vector<double> numeric_gradient(std::vector<double>& x, F&& f, double step = 1e-5) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + step;
        const double up = f();
        x[i] = keep - step;
        const double down = f();
        x[i] = keep;
        g[i] = (up - down) / (2 * step);
    }
    return g;
}

/// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)
inline double max_relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                                 double floor = 1e-6) {
    double worst = 0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
    }
    return worst;
}

/// Sum of r * t, the usual probe loss for a tensor-valued op.
inline double dot(const Tensor4<double>& r, const Tensor4<double>& t) {
    double s = 0;
    for (std::size_t i = 0; i < t.size(); ++i) s += r[i] * t[i];
    return s;
}

}  // namespace xseg::testing
