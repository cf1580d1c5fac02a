#include <gtest/gtest.h>

#include <cmath>

#include "bdlora/errors.hpp"
#include "bdlora/lora_model.hpp"

using namespace bdlora;

TEST(ModuleSpec, ProjectionsByShape) {
    auto basic = projections(ModuleSpec::basic_mlp(4, 8));
    ASSERT_EQ(basic.size(), 2u);
    EXPECT_EQ(basic[0].parallel, Parallelism::Column);
    EXPECT_EQ(basic[1].parallel, Parallelism::Row);
    EXPECT_EQ(basic[1].d_in, 8u);

    auto attn = projections(ModuleSpec::attn_proj(8, 8, 4));
    ASSERT_EQ(attn.size(), 4u);
    EXPECT_EQ(attn[1].d_out, 4u);
    EXPECT_EQ(attn[3].proj, Projection::O);
    EXPECT_EQ(projections(ModuleSpec::glu_mlp(4, 8)).size(), 3u);
    EXPECT_EQ(parse_module_shape("glu"), ModuleShape::GluMLP);
    EXPECT_THROW(parse_module_shape("moe"), ConfigError);
}

TEST(ModuleSpec, Divisibility) {
    EXPECT_NO_THROW(ModuleSpec::attn_proj(16, 16, 8).require_divisible(8));
    EXPECT_THROW(ModuleSpec::attn_proj(16, 16, 4).require_divisible(8), DivisibilityError);
    EXPECT_THROW(ModuleSpec::basic_mlp(6, 10).require_divisible(4), DivisibilityError);
}

TEST(Scaling, Modes) {
    EXPECT_DOUBLE_EQ(scaling_factor(ScalingMode::Standard, 16.0, 8), 2.0);
    EXPECT_DOUBLE_EQ(scaling_factor(ScalingMode::RsLoRA, 16.0, 16), 4.0);
    // Each of the N blocks is an independent rank r/N adapter.
    EXPECT_DOUBLE_EQ(scaling_factor(ScalingMode::RsLoRABlockDiag, 16.0, 64, 4), 4.0);
    EXPECT_THROW(scaling_factor(ScalingMode::RsLoRA, 16.0, 0), DomainError);
    EXPECT_THROW(scaling_factor(ScalingMode::RsLoRABlockDiag, 16.0, 6, 4), DomainError);
    EXPECT_EQ(parse_scaling_mode(to_string(ScalingMode::RsLoRABlockDiag)), ScalingMode::RsLoRABlockDiag);
}

TEST(LoraLinear, MatchesClosedForm) {
    Matrix x{{1, 2}};
    Matrix w{{1, 0}, {0, 1}};
    LoraPair p{Matrix{{1}, {1}}, Matrix{{1, -1}}, 2.0, ScalingMode::Standard};
    // scale = 2/1; XA = 3; 3 * [1 -1] * 2 = [6 -6]
    EXPECT_EQ(lora_linear(x, w, &p), (Matrix{{7, -4}}));
    EXPECT_EQ(lora_linear(x, w, nullptr), x);
    LoraPair bad{Matrix{{1}}, Matrix{{1, 1}}};
    EXPECT_THROW(lora_linear(x, w, &bad), ShapeError);
}

TEST(ReferenceForward, BasicMlpByHand) {
    auto spec = ModuleSpec::basic_mlp(2, 2);
    BaseWeights w{{Projection::W1, Matrix{{1, -1}, {1, 1}}}, {Projection::W2, Matrix{{1, 0}, {0, 2}}}};
    Matrix x{{1, 2}};
    // XW1 = [3 1], relu = [3 1], times W2 = [3 2]
    EXPECT_EQ(reference_forward(spec, w, {}, x), (Matrix{{3, 2}}));
}

TEST(ReferenceForward, GluUsesGateTimesUp) {
    auto spec = ModuleSpec::glu_mlp(1, 1, ActivationKind::Identity);
    BaseWeights w{{Projection::W1, Matrix{{2}}}, {Projection::W1Hat, Matrix{{3}}}, {Projection::W2, Matrix{{5}}}};
    EXPECT_EQ(reference_forward(spec, w, {}, Matrix{{1}}), (Matrix{{30}}));
}

TEST(ReferenceForward, ValidatesInputs) {
    auto spec = ModuleSpec::basic_mlp(4, 8);
    auto w = random_base_weights(spec, 1);
    EXPECT_THROW(reference_forward(spec, w, {}, Matrix(2, 3)), ShapeError);
    w.erase(Projection::W2);
    EXPECT_THROW(reference_forward(spec, w, {}, Matrix(2, 4)), ConfigError);
    auto w2 = random_base_weights(spec, 1);
    AdapterMap wrong{{Projection::Q, LoraPair{Matrix(4, 2), Matrix(2, 8)}}};
    EXPECT_THROW(reference_forward(spec, w2, wrong, Matrix(2, 4)), ConfigError);
}

TEST(BdFactors, DenseEquivalentAndRank) {
    auto spec = ModuleSpec::basic_mlp(8, 16);
    auto bd = random_bd_adapters(spec, 8, 4, 3);
    const auto& col = bd.at(Projection::W1);
    EXPECT_EQ(col.rank(), 8u);
    EXPECT_EQ(col.n_blocks(), 4u);
    LoraPair dense = col.to_dense();
    EXPECT_EQ(dense.a.cols(), 8u);
    EXPECT_EQ(dense.b.rows(), 8u);
    EXPECT_EQ(dense.b.cols(), 16u);
    EXPECT_DOUBLE_EQ(dense.scale(), col.scale());
    EXPECT_DOUBLE_EQ(col.scale(), 16.0 / std::sqrt(2.0));
    EXPECT_EQ(bd.at(Projection::W2).to_dense().a.rows(), 16u);
    EXPECT_THROW(random_bd_adapters(spec, 6, 4, 3), DivisibilityError);
}

TEST(Fixtures, Deterministic) {
    auto spec = ModuleSpec::glu_mlp(8, 16);
    EXPECT_EQ(random_base_weights(spec, 7).at(Projection::W1Hat), random_base_weights(spec, 7).at(Projection::W1Hat));
    EXPECT_EQ(random_adapters(spec, 4, 7).at(Projection::W2).b, random_adapters(spec, 4, 7).at(Projection::W2).b);
}
