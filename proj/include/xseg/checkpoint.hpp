#pragma once

// Checkpoint file layout (all integers little-endian):
//
//   "XAGN"                 4 bytes magic
//   version                u32 (= 1)
//   entry count            u32
//   per entry:
//     name length          u32, then that many UTF-8 bytes
//     rank                 u32, then rank x u32 dims
//     values               prod(dims) x IEEE-754 binary64
//
// Networks store their configuration as "config.*" rank-1 entries, then every
// trainable parameter in store order, then "<layer>.running_mean/var" pairs.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xseg/network.hpp"

namespace xseg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<double> values;

    bool operator==(const CheckpointEntry&) const = default;
};

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries);

/// Throws FileError if unreadable, FormatError on a bad magic/version or truncation.
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

template <typename T>
std::vector<CheckpointEntry> network_to_entries(const Network<T>& net);

/// Rebuilds the network from its config entries, then loads parameters and statistics.
template <typename T>
Network<T> network_from_entries(const std::vector<CheckpointEntry>& entries);

NetworkConfig config_from_entries(const std::vector<CheckpointEntry>& entries);

template <typename T>
void save_network(const Network<T>& net, const std::filesystem::path& path) {
    write_checkpoint(path, network_to_entries(net));
}

template <typename T>
Network<T> load_network(const std::filesystem::path& path) {
    return network_from_entries<T>(read_checkpoint(path));
}

}  // namespace xseg
