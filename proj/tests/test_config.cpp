#include <gtest/gtest.h>

#include "bnn/config.hpp"
#include "bnn/rng.hpp"

using namespace bnn;

namespace {

std::string error_of(const std::string& text) {
    try {
        parse_config(text, "t.cfg");
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(Config, DefaultsMatchTheMnistRecipe) {
    const auto c = parse_config("", "empty");
    EXPECT_EQ(c.model.arch, Arch::Mlp2);
    EXPECT_EQ(c.optimizer, OptimizerKind::Adam);
    EXPECT_EQ(c.lr, 0.01);
    EXPECT_EQ(c.epochs, 30u);
    EXPECT_EQ(c.batch_size, 256u);
    EXPECT_EQ(c.warmup, 0u);
    EXPECT_EQ(c.effective_shifts(), std::vector<double>{0.0});
    EXPECT_FALSE(c.augment_enabled());
}

TEST(Config, ParsesKeysCommentsAndLists) {
    const auto c = parse_config(
        "# comment\n"
        "arch = vggsmall   # trailing\n"
        "dataset = cifar10\n"
        "\n"
        "shifts = -1.5, 0, 1.5\n"
        "seeds = 3:7\n"
        "optimizer = sgd\n"
        "lr = 0.1\n"
        "warmup = 5\n"
        "epochs = 40\n",
        "t.cfg");
    EXPECT_EQ(c.model.arch, Arch::VggSmall);
    EXPECT_EQ(c.shifts, (std::vector<double>{-1.5, 0.0, 1.5}));
    EXPECT_EQ(c.seeds, (std::vector<std::uint64_t>{3, 4, 5, 6, 7}));
    EXPECT_TRUE(c.augment_enabled());
    EXPECT_EQ(c.run_spec(0.0).in_channels, 3u);
}

TEST(Config, RangeGridHitsExactPoints) {
    const auto c = parse_config("shifts = -2:0.5:2\n", "t");
    const std::vector<double> expected{-2, -1.5, -1, -0.5, 0, 0.5, 1, 1.5, 2};
    EXPECT_EQ(c.shifts, expected);
    const auto d = parse_config("shifts = -0.3:0.1:0.3\n", "t");
    ASSERT_EQ(d.shifts.size(), 7u);
    EXPECT_EQ(d.shifts[1], -0.2);
    EXPECT_EQ(d.shifts[3], 0.0);
}

TEST(Config, UnknownKeyNamesKeyAndLine) {
    const auto msg = error_of("arch = mlp2\nshfit = 1\n");
    EXPECT_NE(msg.find("t.cfg:2:"), std::string::npos) << msg;
    EXPECT_NE(msg.find("shfit"), std::string::npos) << msg;
}

TEST(Config, BadValuesAreRejected) {
    EXPECT_NE(error_of("epochs = -1\n").find("t.cfg:1:"), std::string::npos);
    EXPECT_NE(error_of("lr = fast\n").find("lr"), std::string::npos);
    EXPECT_NE(error_of("arch = alexnet\n").find("alexnet"), std::string::npos);
    EXPECT_NE(error_of("just text\n").find("key = value"), std::string::npos);
    EXPECT_FALSE(error_of("epochs = 0\n").empty());
    EXPECT_FALSE(error_of("seeds = 5:2\n").empty());
    EXPECT_FALSE(error_of("shifts = 1:0:2\n").empty());
    EXPECT_FALSE(error_of("precision = fp\n").empty());  // sign activation needs binary precision
}

TEST(Config, VggSmallOnMnistIsPaddedTo32) {
    const auto c = parse_config("arch = vggsmall\n", "t");
    const auto s = c.run_spec(0.0);
    EXPECT_EQ(s.in_height, 32u);
    EXPECT_EQ(s.in_channels, 1u);
    EXPECT_EQ(parse_config("arch = lenet5\n", "t").run_spec(0.0).in_height, 28u);
}

TEST(Config, ShiftLandsOnTheActiveNonlinearity) {
    const auto sign = parse_config("shifts = 0.5\n", "t").run_spec(0.5);
    EXPECT_EQ(sign.sign.threshold_shift, 0.5);
    const auto ht = parse_config("precision = binary-weight\nactivation = gen_hardtanh\nx_offset = 0.25\n", "t");
    EXPECT_EQ(ht.effective_shifts(), std::vector<double>{0.25});
    EXPECT_EQ(ht.run_spec(1.0).hardtanh.x_offset, 1.0);
}

// Resolved text re-parses to the same configuration for random configs.
TEST(Config, ResolvedTextRoundTrips) {
    Rng rng(11);
    const char* archs[] = {"mlp2", "lenet5", "vggsmall", "resnet20ds"};
    for (int trial = 0; trial < 50; ++trial) {
        ExperimentConfig c;
        std::string arch = archs[rng.below(4)];
        apply_setting(c, "arch", arch);
        apply_setting(c, "dataset", rng.coin() ? "mnist" : "cifar10");
        apply_setting(c, "lr", std::to_string(0.001 * (1 + rng.below(100))));
        apply_setting(c, "epochs", std::to_string(1 + rng.below(50)));
        apply_setting(c, "shifts", "-1:0.25:" + std::to_string(rng.below(3)));
        apply_setting(c, "seeds", "1:" + std::to_string(1 + rng.below(10)));
        apply_setting(c, "trainable_threshold", rng.coin() ? "true" : "false");
        apply_setting(c, "pooling", rng.coin() ? "max" : "avg");
        if (arch == "resnet20ds" && rng.coin()) {
            apply_setting(c, "extra_act", "leaky");
            apply_setting(c, "leaky_slope", "0.25");
        }
        const auto text = resolved_text(c);
        const auto back = parse_config(text, "resolved");
        EXPECT_EQ(resolved_text(back), text);
        EXPECT_EQ(config_hash(back), config_hash(c));
    }
}

TEST(Config, HashSeparatesRuns) {
    const auto c = parse_config("shifts = -1, 0, 1\nseeds = 1, 2\n", "t");
    EXPECT_NE(config_hash(c.single_run(0.0, 1)), config_hash(c.single_run(0.0, 2)));
    EXPECT_NE(config_hash(c.single_run(0.0, 1)), config_hash(c.single_run(1.0, 1)));
    EXPECT_EQ(config_hash(c.single_run(1.0, 2)), config_hash(c.single_run(1.0, 2)));
    EXPECT_EQ(config_hash(c).size(), 16u);
}

TEST(Config, SingleRunIsReRunnableFromItsText) {
    const auto c = parse_config("arch = lenet5\nshifts = -1, 0.75\nseeds = 4, 9\n", "t");
    const auto run = c.single_run(0.75, 9);
    const auto again = parse_config(resolved_text(run), "echo");
    EXPECT_EQ(again.effective_shifts(), std::vector<double>{0.75});
    EXPECT_EQ(again.seeds, std::vector<std::uint64_t>{9});
    EXPECT_EQ(again.run_spec(0.75).sign.threshold_shift, 0.75);
    EXPECT_EQ(config_hash(again), config_hash(run));
}
