#pragma once

// Central finite-difference checks of every backward pass, in double precision.
//
// Each component is scored by its worst relative error
//     |analytic - numeric| / max(|analytic|, |numeric|, denominator_floor)
// over the checked coordinates. The floor keeps near-zero gradients (a conv bias
// feeding batchnorm has gradient exactly 0) from turning round-off into large
// relative errors. A coordinate that fails at `step` is retried at step/10 and
// step/100 in case the stencil straddled a kink.

#include <cstdint>
#include <string>
#include <vector>

#include "xseg/network.hpp"

namespace xseg {

enum class CheckGroup { Primitive, Attention, Network };

struct GradcheckOptions {
    double step = 1e-5;
    double denominator_floor = 1e-4;
    double primitive_threshold = 1e-5;
    double network_threshold = 1e-4;
    std::size_t samples_per_tensor = 50;
    std::uint64_t seed = 0;
    NetworkConfig network;  // spatial size and architecture for the whole-network check
    std::size_t network_batch = 2;
    /// Negative control: analytic gradients of every component whose name starts with
    /// this prefix are scaled by 1.01 before comparison. Empty disables.
    std::string inject_fault;

    GradcheckOptions();
};

struct GradcheckResult {
    std::string component;
    CheckGroup group = CheckGroup::Primitive;
    double max_rel_error = 0;
    double threshold = 0;
    std::size_t checked = 0;

    bool passed() const { return max_rel_error <= threshold; }
};

std::vector<GradcheckResult> run_primitive_checks(const GradcheckOptions& options);
std::vector<GradcheckResult> run_attention_checks(const GradcheckOptions& options);
/// One result per trainable parameter tensor, named after it.
std::vector<GradcheckResult> run_network_checks(const GradcheckOptions& options);

std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& options);

bool all_passed(const std::vector<GradcheckResult>& results);

}  // namespace xseg
