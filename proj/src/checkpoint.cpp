#include "xseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_map>

namespace xseg {

namespace {

constexpr char kMagic[4] = {'X', 'A', 'G', 'N'};

void put_u32(std::ostream& out, std::uint32_t v) {
    const unsigned char bytes[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                    static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(bytes), 4);
}

void put_f64(std::ostream& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(bytes), 8);
}

class Reader {
public:
    Reader(std::istream& in, const std::filesystem::path& path) : in_(in), path_(path) {}

    void bytes(void* dst, std::size_t n) {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw FormatError("checkpoint " + path_.string() + " is truncated");
    }
    std::uint32_t u32() {
        unsigned char b[4];
        bytes(b, 4);
        return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
               (std::uint32_t{b[3]} << 24);
    }
    double f64() {
        unsigned char b[8];
        bytes(b, 8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= std::uint64_t{b[i]} << (8 * i);
        return std::bit_cast<double>(bits);
    }

private:
    std::istream& in_;
    const std::filesystem::path& path_;
};

CheckpointEntry scalar_entry(const std::string& name, double v) { return CheckpointEntry{name, {1}, {v}}; }

template <typename T>
CheckpointEntry vector_entry(const std::string& name, const std::vector<T>& values) {
    return CheckpointEntry{name, {static_cast<std::uint32_t>(values.size())},
                           std::vector<double>(values.begin(), values.end())};
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FileError("cannot open checkpoint for writing: " + path.string());
    out.write(kMagic, 4);
    put_u32(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        std::size_t count = 1;
        for (auto d : e.dims) count *= d;
        if (count != e.values.size())
            throw DimensionError("checkpoint entry " + e.name + ": dims do not match " +
                                 std::to_string(e.values.size()) + " values");
        put_u32(out, static_cast<std::uint32_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        put_u32(out, static_cast<std::uint32_t>(e.dims.size()));
        for (auto d : e.dims) put_u32(out, d);
        for (double v : e.values) put_f64(out, v);
    }
    if (!out) throw FileError("failed writing checkpoint " + path.string());
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileError("cannot open checkpoint: " + path.string());
    Reader r(in, path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path.string() + " is not an XAGN checkpoint");
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
    const std::uint32_t count = r.u32();
    std::vector<CheckpointEntry> entries;
    entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        e.name.resize(r.u32());
        r.bytes(e.name.data(), e.name.size());
        const std::uint32_t rank = r.u32();
        if (rank > 8) throw FormatError("checkpoint entry " + e.name + " has implausible rank " + std::to_string(rank));
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            e.dims.push_back(r.u32());
            n *= e.dims.back();
        }
        e.values.resize(n);
        for (auto& v : e.values) v = r.f64();
        entries.push_back(std::move(e));
    }
    return entries;
}

template <typename T>
std::vector<CheckpointEntry> network_to_entries(const Network<T>& net) {
    const NetworkConfig& c = net.config();
    std::vector<CheckpointEntry> out{
        scalar_entry("config.height", static_cast<double>(c.height)),
        scalar_entry("config.width", static_cast<double>(c.width)),
        scalar_entry("config.in_slices", static_cast<double>(c.in_slices)),
        scalar_entry("config.base_filters", static_cast<double>(c.base_filters)),
        scalar_entry("config.depth", static_cast<double>(c.depth)),
        scalar_entry("config.convs_per_stage", static_cast<double>(c.convs_per_stage)),
        scalar_entry("config.kernel_size", static_cast<double>(c.kernel_size)),
        scalar_entry("config.use_input_csa", c.use_input_csa ? 1.0 : 0.0),
        scalar_entry("config.use_skip_csa", c.use_skip_csa ? 1.0 : 0.0),
        scalar_entry("config.use_skip_ag", c.use_skip_ag ? 1.0 : 0.0),
        scalar_entry("config.bn_before_relu", c.bn_before_relu ? 1.0 : 0.0),
        scalar_entry("config.seed_lo", static_cast<double>(c.seed & 0xFFFFFFFFULL)),
        scalar_entry("config.seed_hi", static_cast<double>(c.seed >> 32)),
    };
    for (const auto& p : net.params().entries()) {
        CheckpointEntry e{p.name, {}, std::vector<double>(p.value.values().begin(), p.value.values().end())};
        for (auto d : p.dims) e.dims.push_back(static_cast<std::uint32_t>(d));
        out.push_back(std::move(e));
    }
    for (const auto& s : net.batchnorm_stats()) {
        out.push_back(vector_entry(s.name + ".running_mean", s.stats.running_mean));
        out.push_back(vector_entry(s.name + ".running_var", s.stats.running_var));
    }
    return out;
}

NetworkConfig config_from_entries(const std::vector<CheckpointEntry>& entries) {
    std::unordered_map<std::string, double> cfg;
    for (const auto& e : entries)
        if (e.name.rfind("config.", 0) == 0 && e.values.size() == 1) cfg[e.name.substr(7)] = e.values[0];
    auto get = [&](const char* key) {
        auto it = cfg.find(key);
        if (it == cfg.end()) throw FormatError(std::string("checkpoint lacks config.") + key);
        return it->second;
    };
    NetworkConfig c;
    c.height = static_cast<std::size_t>(get("height"));
    c.width = static_cast<std::size_t>(get("width"));
    c.in_slices = static_cast<std::size_t>(get("in_slices"));
    c.base_filters = static_cast<std::size_t>(get("base_filters"));
    c.depth = static_cast<std::size_t>(get("depth"));
    c.convs_per_stage = static_cast<std::size_t>(get("convs_per_stage"));
    c.kernel_size = static_cast<std::size_t>(get("kernel_size"));
    c.use_input_csa = get("use_input_csa") != 0.0;
    c.use_skip_csa = get("use_skip_csa") != 0.0;
    c.use_skip_ag = get("use_skip_ag") != 0.0;
    c.bn_before_relu = get("bn_before_relu") != 0.0;
    c.seed = static_cast<std::uint64_t>(get("seed_lo")) | (static_cast<std::uint64_t>(get("seed_hi")) << 32);
    return c;
}

template <typename T>
Network<T> network_from_entries(const std::vector<CheckpointEntry>& entries) {
    Network<T> net(config_from_entries(entries));
    std::unordered_map<std::string, const CheckpointEntry*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e;

    for (auto& p : net.params().entries()) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) throw FormatError("checkpoint lacks parameter " + p.name);
        const CheckpointEntry& e = *it->second;
        if (e.dims.size() != p.dims.size() || !std::equal(e.dims.begin(), e.dims.end(), p.dims.begin()))
            throw DimensionError("checkpoint parameter " + p.name + " has a different shape than the network");
        for (std::size_t i = 0; i < e.values.size(); ++i) p.value[i] = static_cast<T>(e.values[i]);
    }
    for (const auto& s : net.batchnorm_stats()) {
        auto mean = by_name.find(s.name + ".running_mean");
        auto var = by_name.find(s.name + ".running_var");
        if (mean == by_name.end() || var == by_name.end())
            throw FormatError("checkpoint lacks running statistics for " + s.name);
        BatchNormStats<T> stats;
        for (double v : mean->second->values) stats.running_mean.push_back(static_cast<T>(v));
        for (double v : var->second->values) stats.running_var.push_back(static_cast<T>(v));
        net.set_batchnorm_stats(s.name, stats);
    }
    return net;
}

template std::vector<CheckpointEntry> network_to_entries<float>(const Network<float>&);
template std::vector<CheckpointEntry> network_to_entries<double>(const Network<double>&);
template Network<float> network_from_entries<float>(const std::vector<CheckpointEntry>&);
template Network<double> network_from_entries<double>(const std::vector<CheckpointEntry>&);

}  // namespace xseg
