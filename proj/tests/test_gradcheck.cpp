#include <doctest.h>

#include <set>

#include "xseg/gradcheck.hpp"

using namespace xseg;

TEST_CASE("primitive and attention backwards pass at 1e-5") {
    GradcheckOptions opt;
    auto results = run_primitive_checks(opt);
    auto att = run_attention_checks(opt);
    results.insert(results.end(), att.begin(), att.end());
    std::set<std::string> names;
    for (const auto& r : results) {
        INFO(r.component << " max_rel_error " << r.max_rel_error);
        CHECK(r.passed());
        CHECK(r.threshold == 1e-5);
        CHECK(r.checked > 0);
        names.insert(r.component);
    }
    for (const char* expected : {"conv2d[same]", "maxpool2x2", "upsample2x2", "batchnorm[train]", "relu", "sigmoid",
                                 "softmax_channels", "sobel_magnitude", "dice_loss", "boundary_loss",
                                 "combined_loss", "csa", "attention_gate"})
        CHECK(names.count(expected) == 1);
}

TEST_CASE("whole-network check passes at 1e-4 and lists every parameter") {
    GradcheckOptions opt;
    auto results = run_network_checks(opt);
    Network<double> net(opt.network);
    REQUIRE(results.size() == net.params().count());
    for (std::size_t i = 0; i < results.size(); ++i) {
        INFO(results[i].component << " max_rel_error " << results[i].max_rel_error);
        CHECK(results[i].component == net.params()[i].name);
        CHECK(results[i].group == CheckGroup::Network);
        CHECK(results[i].passed());
        CHECK(results[i].threshold == 1e-4);
    }
}

TEST_CASE("a corrupted backward is caught") {
    GradcheckOptions opt;
    opt.inject_fault = "conv2d";
    auto results = run_primitive_checks(opt);
    CHECK(!all_passed(results));
    for (const auto& r : results)
        if (r.component.rfind("conv2d", 0) == 0) CHECK(!r.passed());
        else CHECK(r.passed());
}
