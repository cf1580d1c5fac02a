#include <gtest/gtest.h>

#include <algorithm>

#include "bdlora/cost_model.hpp"
#include "bdlora/errors.hpp"
#include "bdlora/verify.hpp"

using namespace bdlora;

TEST(Reconcile, ExecutedMatchesAnalytic) {
    auto spec = ModuleSpec::basic_mlp(8, 16);
    auto w = random_base_weights(spec, 1);
    auto a = random_adapters(spec, 4, 1);
    Matrix x = random_matrix(3, 8, 2);
    DeviceMesh mesh(2);
    auto got = s_lora_forward(mesh, spec, shard_weights(spec, w, 2), shard_adapters(spec, a, StrategyKind::SLora, 2), x);
    auto fields = reconcile(got, analytic_costs(spec, {StrategyKind::SLora}, 2, Rational(4), 3));
    EXPECT_EQ(fields.size(), 8u);
    EXPECT_TRUE(std::all_of(fields.begin(), fields.end(), [](const auto& f) { return f.matches(); }));
}

TEST(Reconcile, NamesDivergentField) {
    auto spec = ModuleSpec::basic_mlp(8, 16);
    auto w = random_base_weights(spec, 1);
    auto a = random_adapters(spec, 4, 1);
    Matrix x = random_matrix(3, 8, 2);
    DeviceMesh mesh(2);
    auto got = nfs_lora_forward(mesh, spec, shard_weights(spec, w, 2), shard_adapters(spec, a, StrategyKind::NfsLora, 2), x);
    try {
        reconcile(got, analytic_costs(spec, {StrategyKind::SLora}, 2, Rational(4), 3));
        FAIL() << "expected a reconciliation failure";
    } catch (const ReconcileError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("flops_per_device"), std::string::npos);
        EXPECT_NE(msg.find("lora_collective_calls"), std::string::npos);
    }
}

TEST(Reconcile, BdHasNoLoraVolume) {
    auto spec = ModuleSpec::glu_mlp(16, 32);
    auto bd = random_bd_adapters(spec, 8, 4, 3);
    DeviceMesh mesh(4);
    auto got = bd_lora_forward(mesh, spec, shard_weights(spec, random_base_weights(spec, 3), 4),
                               shard_bd_adapters(spec, bd, 4), random_matrix(5, 16, 1));
    auto exec = executed_costs(got);
    EXPECT_EQ(exec.lora_comm_volume_elements, Rational(0));
    EXPECT_NO_THROW(reconcile(got, analytic_costs(spec, {StrategyKind::BdLora}, 4, Rational(8), 5)));
}

TEST(Verify, SmallSuitePasses) {
    VerifyOptions opt;
    opt.ns = {1, 4};
    opt.seq_lens = {1, 5};
    opt.seeds = {0};
    auto cells = run_verify(opt);
    EXPECT_EQ(cells.size(), 2u * 3u * 2u * 1u * 5u);
    for (const auto& c : cells) {
        EXPECT_TRUE(c.pass()) << c.n << " " << to_string(c.shape) << " " << to_string(c.schedule) << " "
                              << c.max_rel_error << " " << c.detail;
    }
}

TEST(Verify, ZeroToleranceFails) {
    VerifyOptions opt;
    opt.ns = {4};
    opt.seq_lens = {5};
    opt.seeds = {0};
    opt.tolerance = 0.0;
    auto cells = run_verify(opt);
    EXPECT_TRUE(std::any_of(cells.begin(), cells.end(), [](const auto& c) { return !c.pass(); }));
}

TEST(Verify, RejectsEmptyLists) {
    VerifyOptions opt;
    opt.ns.clear();
    EXPECT_THROW(run_verify(opt), ConfigError);
}
