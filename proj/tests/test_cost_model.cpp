#include <gtest/gtest.h>

#include "bdlora/adapter_store.hpp"
#include "bdlora/cost_model.hpp"
#include "bdlora/errors.hpp"

using namespace bdlora;

namespace {

Rational q(std::int64_t v) { return Rational(v); }

Rational exact_match(std::int64_t dh, std::int64_t di, std::int64_t n, std::int64_t r) {
    return Rational(r * (dh + di)) / (Rational(dh) + Rational(di, n));
}

HardwareProfile hw(double start) { return {"test", 1e12, 1e11, 1e10, start}; }

}  // namespace

TEST(AnalyticCosts, BasicMlpPlugIn) {
    auto c = analytic_costs(ModuleSpec::basic_mlp(4, 8), {StrategyKind::SLora}, 2, q(2), 3);
    EXPECT_EQ(c.params_per_device, q(24));   // 2 (4 + 8) 2 / 2
    EXPECT_EQ(c.flops_per_device, q(144));   // 4 * 3 * 12 * 2 / 2
    // 2 S (r/N + d_I/N + d_H/N + r) plus params
    EXPECT_EQ(c.mem_moved_elements_per_device, q(24) + q(2 * 3 * (1 + 4 + 2 + 2)));
    EXPECT_EQ(c.lora_collective_calls, q(2));
    EXPECT_EQ(c.base_collective_calls, q(1));
    EXPECT_FALSE(c.latency_proxy_seconds.has_value());
}

TEST(AnalyticCosts, BdMatchesSLoraFlopsAtExactRank) {
    for (std::int64_t dh : {8, 64, 4096}) {
        for (std::int64_t di : {16, 224, 14336}) {
            for (std::int64_t n : {1, 2, 4, 8}) {
                for (std::int64_t r : {1, 8, 16}) {
                    auto spec = ModuleSpec::basic_mlp(dh, di);
                    auto sl = analytic_costs(spec, {StrategyKind::SLora}, n, q(r), 7);
                    auto bd = analytic_costs(spec, {StrategyKind::BdLora}, n, exact_match(dh, di, n, r), 7);
                    EXPECT_EQ(sl.flops_per_device, bd.flops_per_device);
                    EXPECT_EQ(sl.params_per_device, bd.params_per_device);
                    EXPECT_EQ(bd.lora_collective_calls, q(0));
                    EXPECT_EQ(bd.lora_comm_volume_elements, q(0));
                }
            }
        }
    }
}

TEST(AnalyticCosts, SingleDeviceDegenerates) {
    auto spec = ModuleSpec::basic_mlp(16, 32);
    auto sl = analytic_costs(spec, {StrategyKind::SLora}, 1, q(4), 5);
    auto bd = analytic_costs(spec, {StrategyKind::BdLora}, 1, q(4), 5);
    auto nfs = analytic_costs(spec, {StrategyKind::NfsLora}, 1, q(4), 5);
    EXPECT_EQ(sl, bd);
    EXPECT_EQ(sl, nfs);
}

TEST(AnalyticCosts, NfsReplicatesA1AndB2) {
    const std::int64_t n = 4, r = 8, s = 3, dh = 16, di = 32;
    auto spec = ModuleSpec::basic_mlp(dh, di);
    auto sl = analytic_costs(spec, {StrategyKind::SLora}, n, q(r), s);
    auto nfs = analytic_costs(spec, {StrategyKind::NfsLora}, n, q(r), s);
    const Rational a1 = Rational(2 * s * dh * r, n);
    const Rational b2 = Rational(2 * s * r * dh, n);
    EXPECT_EQ(nfs.flops_per_device - sl.flops_per_device, q(n - 1) * (a1 + b2));
    EXPECT_EQ(nfs.lora_collective_calls, q(0));
    EXPECT_EQ(nfs.lora_comm_volume_elements, q(0));
}

TEST(AnalyticCosts, MergedCollectivesKeepVolume) {
    auto spec = ModuleSpec::attn_proj(64, 64, 16);
    auto split = analytic_costs(spec, {StrategyKind::SLora, false, false}, 8, q(16), 32);
    auto merged = analytic_costs(spec, {StrategyKind::SLora, true, true}, 8, q(16), 32);
    EXPECT_EQ(split.lora_collective_calls, q(4));
    EXPECT_EQ(merged.lora_collective_calls, q(2));
    EXPECT_EQ(split.lora_comm_volume_elements, merged.lora_comm_volume_elements);
    EXPECT_EQ(split.lora_comm_volume_elements, comm_volume_attention(8, q(16), 32));
}

TEST(AnalyticCosts, Errors) {
    EXPECT_THROW(analytic_costs(ModuleSpec::basic_mlp(6, 10), {StrategyKind::SLora}, 4, q(4), 1), DivisibilityError);
    EXPECT_THROW(analytic_costs(ModuleSpec::basic_mlp(8, 16), {StrategyKind::SLora}, 4, q(0), 1), DomainError);
}

TEST(CommVolume, Formulas) {
    EXPECT_EQ(comm_volume_attention(8, q(16), 1024), q(71680));
    EXPECT_EQ(comm_volume_attention(1, q(16), 1024), q(0));
    EXPECT_EQ(comm_volume_base(1, 4096, 1024), q(0));
    EXPECT_EQ(comm_volume_base(8, 4096, 1024), q(2 * 7 * 4096 * 1024 / 8));
    EXPECT_EQ(comm_overhead_ratio(q(256), 4096, 8, 1024), Rational(5, 32));
    EXPECT_DOUBLE_EQ(to_double(comm_overhead_ratio(q(256), 4096, 8, 1024)), 0.15625);
    EXPECT_THROW(comm_overhead_ratio(q(256), 4096, 1, 1024), DomainError);
}

TEST(CommVolume, RatioIndependentOfNAndS) {
    const Rational ref = comm_overhead_ratio(q(64), 4096, 2, 1);
    for (std::size_t n : {2u, 3u, 4u, 8u, 16u}) {
        for (std::size_t s : {1u, 17u, 1024u}) EXPECT_EQ(comm_overhead_ratio(q(64), 4096, n, s), ref);
    }
    EXPECT_EQ(ref, Rational(5 * 64, 2 * 4096));
}

TEST(CommVolume, RingConvention) {
    EXPECT_EQ(all_gather_volume(4, q(100)), q(75));
    EXPECT_EQ(all_reduce_volume(4, q(100)), q(150));
    EXPECT_EQ(all_reduce_volume(1, q(100)), q(0));
}

TEST(MemDifference, WithinBoundInRegime) {
    for (std::size_t n : {1u, 2u, 4u, 8u}) {
        for (std::int64_t r : {1, 16, 256, 1365}) {
            auto m = mem_cost_difference_bound(4096, 14336, n, q(r), 1024);
            EXPECT_TRUE(m.in_regime);
            EXPECT_TRUE(m.within_bound) << "n=" << n << " r=" << r;
            EXPECT_EQ(m.bound, q(2 * 1024 * 4096));
            EXPECT_EQ(m.difference, m.bd_cost - m.s_lora_cost);
        }
    }
}

TEST(MemDifference, SingleDevice) {
    // Both schedules coincide apart from the S-LoRA collectives' intermediates: BD - S-LoRA = -4 S r.
    auto m = mem_cost_difference_bound(64, 128, 1, q(4), 10);
    EXPECT_EQ(m.difference, q(-4 * 10 * 4));
    EXPECT_TRUE(m.within_bound);
}

TEST(MemDifference, OutOfRegimeIsFlagged) {
    auto m = mem_cost_difference_bound(64, 128, 1, q(64), 10);
    EXPECT_FALSE(m.in_regime);
    EXPECT_FALSE(m.within_bound);  // 4 S r > 2 S d_H once r > d_H / 2
}

TEST(MemDifference, MatchesClosedForm) {
    const std::int64_t dh = 4096, di = 14336, n = 8, r = 16, s = 1024;
    auto m = mem_cost_difference_bound(dh, di, n, q(r), s);
    const Rational rp = exact_match(dh, di, n, r);
    const Rational expect = q(4 * s) * rp / q(n) + q(2 * s * dh) - Rational(2 * s * r, n) - Rational(2 * s * dh, n) -
                            q(6 * s * r);
    EXPECT_EQ(m.difference, expect);
}

TEST(Latency, ZeroReportIsZero) { EXPECT_EQ(latency_proxy(CostReport{}, hw(1e-5)), 0.0); }

TEST(Latency, Additivity) {
    CostReport a;
    a.flops_per_device = q(1000);
    a.mem_moved_elements_per_device = q(500);
    CostReport b = a;
    b.lora_collective_calls = q(1);
    b.lora_comm_volume_elements = q(1000);
    EXPECT_NEAR(latency_proxy(b, hw(1e-5)) - latency_proxy(a, hw(1e-5)), 1e-5 + 1000 / 1e10, 1e-18);
    CostReport ab = a;
    ab += b;
    EXPECT_NEAR(latency_proxy(ab, hw(1e-5)), latency_proxy(a, hw(1e-5)) + latency_proxy(b, hw(1e-5)), 1e-18);
}

TEST(Latency, MonotoneInEveryCounter) {
    CostReport base;
    base.flops_per_device = q(10);
    const double t0 = latency_proxy(base, hw(1e-6));
    Rational CostReport::*fields[] = {&CostReport::flops_per_device, &CostReport::add_flops_per_device,
                                      &CostReport::mem_moved_elements_per_device, &CostReport::lora_collective_calls,
                                      &CostReport::lora_comm_volume_elements, &CostReport::base_collective_calls,
                                      &CostReport::base_comm_volume_elements};
    for (auto f : fields) {
        CostReport more = base;
        more.*f += q(1);
        EXPECT_GT(latency_proxy(more, hw(1e-6)), t0);
    }
}

TEST(Latency, BdBelowSLoraAtSmallS) {
    // Decode-sized steps: BD's extra memory traffic is far below two collective start times.
    for (std::size_t s : {1u, 8u, 64u}) {
        auto spec = ModuleSpec::basic_mlp(4096, 14336);
        auto sl = analytic_costs(spec, {StrategyKind::SLora}, 8, q(16), s);
        auto bd = analytic_costs(spec, {StrategyKind::BdLora}, 8, exact_match(4096, 14336, 8, 16), s);
        EXPECT_LT(latency_proxy(bd, load_hardware("a100-like")), latency_proxy(sl, load_hardware("a100-like")));
    }
}

TEST(Latency, BdCanLoseOnLongPrefill) {
    // BD writes the full S x d_H output of the row projection; with a fast link and
    // long sequences that traffic outweighs S-LoRA's collectives.
    HardwareProfile fast_link{"fast-link", 3e14, 1e12, 1e12, 1e-6};
    auto spec = ModuleSpec::basic_mlp(4096, 14336);
    auto sl = analytic_costs(spec, {StrategyKind::SLora}, 8, q(16), 65536);
    auto bd = analytic_costs(spec, {StrategyKind::BdLora}, 8, exact_match(4096, 14336, 8, 16), 65536);
    EXPECT_GT(latency_proxy(bd, fast_link), latency_proxy(sl, fast_link));
}

TEST(Hardware, Validation) {
    EXPECT_THROW(hw(-1.0).validate(), ConfigError);
    HardwareProfile bad{"bad", 0.0, 1.0, 1.0, 0.0};
    EXPECT_THROW(bad.validate(), ConfigError);
    EXPECT_NO_THROW(hw(0.0).validate());
    auto a100 = load_hardware("a100-like");
    EXPECT_GT(a100.collective_start_time, 0.0);
    EXPECT_THROW(load_hardware("tpu"), ConfigError);
    EXPECT_THROW(hardware_from_json(nlohmann::json{{"compute_rate", 1.0}}), ConfigError);
}

TEST(Output, JsonAndCsv) {
    auto c = with_latency(analytic_costs(ModuleSpec::basic_mlp(4, 8), {StrategyKind::BdLora}, 2, Rational(5, 2), 3),
                          hw(1e-6));
    auto j = to_json(c);
    EXPECT_EQ(j.begin().key(), "params_per_device");
    EXPECT_TRUE(j["latency_proxy_seconds"].is_number());
    EXPECT_EQ(cost_csv_columns().size(), cost_csv_values(c).size());
    EXPECT_EQ(format_count(q(12)), "12");
    EXPECT_EQ(format_count(Rational(5, 2)), "2.500000");
}
