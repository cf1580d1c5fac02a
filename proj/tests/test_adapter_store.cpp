#include <gtest/gtest.h>

#include <filesystem>

#include "bdlora/adapter_store.hpp"
#include "bdlora/errors.hpp"
#include "bdlora/sharding.hpp"

using namespace bdlora;

namespace {

ArchSpec tiny_arch() {
    ArchSpec a;
    a.name = "tiny";
    a.d_hidden = 8;
    a.d_inter = 16;
    a.d_q = 8;
    a.d_kv = 4;
    a.n_layers = 2;
    return a;
}

AdapterManifest tiny(AdapterMethod method, std::size_t n, std::size_t rank) {
    return {tiny_arch(), method, n, rank, 16.0,
            method == AdapterMethod::Dense ? ScalingMode::RsLoRA : ScalingMode::RsLoRABlockDiag, 7};
}

// Per-layer count written out projection by projection.
std::int64_t hand_count(const ArchSpec& a, bool bd, std::int64_t n, std::int64_t r) {
    const std::int64_t h = a.d_hidden, i = a.d_inter, q = a.d_q, kv = a.d_kv;
    std::int64_t per_layer = 0;
    if (!bd) {
        per_layer = (h + q) * r + 2 * (h + kv) * r + (q + h) * r + 2 * (h + i) * r + (i + h) * r;
    } else {
        // column: A d_in x r, B (r/N) x d_out; row: A d_in x r/N, B r x d_out
        per_layer = (h * r + q * r / n) + 2 * (h * r + kv * r / n) + (q * r / n + h * r) +
                    2 * (h * r + i * r / n) + (i * r / n + h * r);
    }
    return per_layer * static_cast<std::int64_t>(a.n_layers);
}

}  // namespace

TEST(Presets, LoadAndValidate) {
    auto a = load_arch("llama3.1-8b");
    EXPECT_EQ(a.d_hidden, 4096u);
    EXPECT_EQ(a.d_inter, 14336u);
    EXPECT_EQ(a.d_kv, 1024u);
    EXPECT_EQ(a.n_layers, 32u);
    EXPECT_EQ(load_arch("llama3.2-1b").n_layers, 16u);
    EXPECT_THROW(load_arch("gpt-7"), ConfigError);
    EXPECT_EQ(arch_from_json(nlohmann::json::parse(to_json(a).dump())), a);
    EXPECT_THROW(arch_from_json(nlohmann::json{{"d_hidden", 4}}), ConfigError);
}

TEST(CountParams, MatchesHandCount) {
    for (const char* name : {"llama3.2-1b", "llama3.1-8b", "llama3.1-70b"}) {
        auto a = load_arch(name);
        for (std::size_t r : {16u, 64u}) {
            EXPECT_EQ(count_params({a, AdapterMethod::Dense, 1, r}), hand_count(a, false, 1, r)) << name;
            EXPECT_EQ(count_params({a, AdapterMethod::BlockDiagonal, 8, 2 * r}), hand_count(a, true, 8, 2 * r))
                << name;
        }
    }
}

TEST(CountParams, KnownValues) {
    auto a8 = load_arch("llama3.1-8b");
    EXPECT_EQ(count_params({a8, AdapterMethod::Dense, 1, 16}), 41943040);
    EXPECT_EQ(count_params({a8, AdapterMethod::BlockDiagonal, 8, 32}), 36175872);
    EXPECT_EQ(format_millions(41943040), "41.9M");
    EXPECT_THROW(count_params({a8, AdapterMethod::BlockDiagonal, 8, 12}), DivisibilityError);
    EXPECT_THROW(count_params({a8, AdapterMethod::Dense, 1, 0}), DomainError);
}

TEST(MatchRank, ExactFraction) {
    auto m = match_rank(4096, 14336, 8, 16);
    EXPECT_EQ(m.numerator, Rational(294912));
    EXPECT_EQ(m.denominator, Rational(5888));
    EXPECT_EQ(m.exact, Rational(1152, 23));
    EXPECT_EQ(m.nearest_multiple, 48u);
    // 2 (d_H + d_I/N) 48 - 2 (d_H + d_I) 16
    EXPECT_EQ(m.param_residual, Rational(2 * 5888 * 48 - 2 * 18432 * 16));
    EXPECT_NE(m.describe(8).find("294912/5888 ≈ 50.087; nearest multiple of 8: 48"), std::string::npos);
    auto one = match_rank(4096, 14336, 1, 16);
    EXPECT_EQ(one.exact, Rational(16));
}

TEST(MatchRank, WholeModel) {
    auto a8 = load_arch("llama3.1-8b");
    const std::size_t r = matched_bd_rank(a8, 8, 16);
    EXPECT_EQ(r % 8, 0u);
    const auto dense = count_params({a8, AdapterMethod::Dense, 1, 16});
    for (std::size_t other : {r - 8, r + 8}) {
        EXPECT_LE(std::abs(count_params({a8, AdapterMethod::BlockDiagonal, 8, r}) - dense),
                  std::abs(count_params({a8, AdapterMethod::BlockDiagonal, 8, other}) - dense));
    }
}

TEST(Layout, ExpectedTensors) {
    auto specs = expected_tensors(tiny(AdapterMethod::BlockDiagonal, 4, 8));
    ASSERT_EQ(specs.size(), 2u * 7u * 2u);
    EXPECT_EQ(specs[0].name, "layers.0.q_proj.lora_A");
    EXPECT_EQ(specs[1].layout, TensorLayout::BlockSideBySide);
    EXPECT_EQ(specs[1].rows, 2u);  // r/N
    EXPECT_EQ(specs[1].cols, 8u);
    EXPECT_EQ(specs[6].name, "layers.0.o_proj.lora_A");
    EXPECT_EQ(specs[6].layout, TensorLayout::BlockStacked);
    EXPECT_EQ(specs[6].cols, 2u);
}

TEST(Build, FreshAdapterIsZeroDelta) {
    auto m = tiny(AdapterMethod::Dense, 1, 4);
    auto f = build_adapters(m);
    for (const auto& t : f.tensors) {
        if (t.name.back() == 'B') EXPECT_EQ(count_nonzeros(t.value), 0u) << t.name;
        if (t.name.back() == 'A') {
            EXPECT_GT(count_nonzeros(t.value), 0u);
            EXPECT_LE(max_abs(t.value), 1.0 / std::sqrt(static_cast<double>(t.value.rows())));
        }
    }
    EXPECT_EQ(serialize(m, f), serialize(m, build_adapters(m)));
    auto other = m;
    other.seed = 8;
    EXPECT_NE(serialize(m, f), serialize(other, build_adapters(other)));
}

TEST(Serialization, RoundTripIsByteIdentical) {
    for (auto m : {tiny(AdapterMethod::Dense, 1, 4), tiny(AdapterMethod::BlockDiagonal, 4, 8)}) {
        auto f = build_adapters(m);
        for (auto& t : f.tensors) t.value = random_matrix(t.value.rows(), t.value.cols(), t.value.size());
        auto bytes = serialize(m, f);
        EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 5), "BDLA1");
        auto file = deserialize(bytes);
        EXPECT_EQ(file.manifest, m);
        EXPECT_EQ(serialize(file.manifest, file.factors), bytes);
    }
}

TEST(Serialization, FileIo) {
    auto m = tiny(AdapterMethod::BlockDiagonal, 2, 4);
    auto path = std::filesystem::temp_directory_path() / "bdlora_test_adapter.bdla";
    write_adapter_file(path, m, build_adapters(m));
    auto file = read_adapter_file(path);
    EXPECT_EQ(file.manifest, m);
    std::filesystem::remove(path);
    EXPECT_THROW(read_adapter_file(path), ConfigError);
}

TEST(Serialization, RejectsCorruption) {
    auto m = tiny(AdapterMethod::Dense, 1, 4);
    auto bytes = serialize(m, build_adapters(m));
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(deserialize(bad_magic), FormatError);
    auto truncated = bytes;
    truncated.pop_back();
    EXPECT_THROW(deserialize(truncated), FormatError);
    auto extra = bytes;
    extra.push_back(0);
    EXPECT_THROW(deserialize(extra), FormatError);
    EXPECT_THROW(deserialize(std::vector<std::uint8_t>{'B', 'D'}), FormatError);
    auto f = build_adapters(m);
    f.tensors.pop_back();
    EXPECT_THROW(serialize(m, f), FormatError);
}

TEST(Serialization, CompactPayloadIsOneNth) {
    const std::size_t n = 4;
    auto m = tiny(AdapterMethod::BlockDiagonal, n, 8);
    auto f = build_adapters(m);
    auto dense = to_dense(m, f);
    for (std::size_t i = 0; i < f.tensors.size(); ++i) {
        const auto& t = f.tensors[i];
        if (t.layout == TensorLayout::Dense) continue;
        EXPECT_EQ(t.value.size() * n, dense.factors.tensors[i].value.size()) << t.name;
    }
}

TEST(Slicing, DisjointAndExhaustive) {
    for (auto m : {tiny(AdapterMethod::Dense, 1, 4), tiny(AdapterMethod::BlockDiagonal, 4, 8)}) {
        auto f = build_adapters(m);
        for (auto& t : f.tensors) t.value = random_matrix(t.value.rows(), t.value.cols(), 3);
        std::vector<DeviceSlice> slices;
        std::size_t total = 0;
        for (std::size_t d = 0; d < 4; ++d) {
            slices.push_back(slice_for_device(m, f, d, 4));
            total += slices.back().payload_elements();
        }
        std::size_t stored = 0;
        for (const auto& t : f.tensors) stored += t.value.size();
        EXPECT_EQ(total, stored);
        auto back = assemble_slices(m, slices);
        for (std::size_t i = 0; i < f.tensors.size(); ++i) EXPECT_EQ(back.tensors[i].value, f.tensors[i].value);

        auto missing = slices;
        missing.pop_back();
        EXPECT_THROW(assemble_slices(m, missing), FormatError);
        auto dup = slices;
        dup.push_back(slices[0]);
        EXPECT_THROW(assemble_slices(m, dup), FormatError);
    }
    auto bd = tiny(AdapterMethod::BlockDiagonal, 4, 8);
    EXPECT_THROW(slice_for_device(bd, build_adapters(bd), 0, 2), ConfigError);
}

TEST(Slicing, BdSliceHoldsOwnBlock) {
    auto m = tiny(AdapterMethod::BlockDiagonal, 2, 4);
    auto f = build_adapters(m);
    for (auto& t : f.tensors) t.value = random_matrix(t.value.rows(), t.value.cols(), 5);
    auto s1 = slice_for_device(m, f, 1, 2);
    auto factors = bd_factors(m, f, 0, "q_proj");
    const auto& b_slice = s1.tensors[1];
    EXPECT_EQ(b_slice.name, "layers.0.q_proj.lora_B");
    EXPECT_EQ(b_slice.value, factors.compact.block(1));
}

TEST(Conversion, DenseToBlockDiagonalAndBack) {
    auto bd = tiny(AdapterMethod::BlockDiagonal, 2, 4);
    auto f = build_adapters(bd);
    for (auto& t : f.tensors) t.value = random_matrix(t.value.rows(), t.value.cols(), 9);
    auto dense = to_dense(bd, f);
    EXPECT_EQ(dense.manifest.method, AdapterMethod::Dense);
    EXPECT_EQ(dense.manifest.scaling_mode, ScalingMode::RsLoRABlockDiag);
    auto back = to_block_diagonal(dense.manifest, dense.factors, 2);
    EXPECT_EQ(back.manifest, bd);
    EXPECT_EQ(serialize(back.manifest, back.factors), serialize(bd, f));
}

TEST(Conversion, RefusesLossyConversion) {
    auto m = tiny(AdapterMethod::Dense, 1, 4);
    auto f = build_adapters(m);
    for (auto& t : f.tensors) t.value = random_matrix(t.value.rows(), t.value.cols(), 9);
    EXPECT_THROW(to_block_diagonal(m, f, 2), ExactnessError);
    EXPECT_THROW(to_dense(m, f), ConfigError);
}

TEST(Pairs, DenseAndBdViews) {
    auto m = tiny(AdapterMethod::Dense, 1, 4);
    auto f = build_adapters(m);
    auto p = dense_pair(m, f, 1, "down_proj");
    EXPECT_EQ(p.a.rows(), 16u);
    EXPECT_EQ(p.b.cols(), 8u);
    EXPECT_THROW(bd_factors(m, f, 0, "q_proj"), ConfigError);
    EXPECT_THROW(dense_pair(m, f, 5, "q_proj"), FormatError);
}
