#include "bdlora/adapter_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iterator>

#include <fmt/format.h>

#include "bdlora/errors.hpp"
#include "bdlora/sharding.hpp"

#ifndef BDLORA_DEFAULT_CONFIG_DIR
#define BDLORA_DEFAULT_CONFIG_DIR "configs"
#endif

namespace bdlora {

using nlohmann::json;
using nlohmann::ordered_json;

void ArchSpec::validate() const {
    if (d_hidden == 0 || d_inter == 0 || d_q == 0 || d_kv == 0 || n_layers == 0) {
        throw ConfigError(fmt::format("architecture '{}' has a zero dimension", name));
    }
    if (!target_attn && !target_mlp) {
        throw ConfigError(fmt::format("architecture '{}' targets neither attn nor mlp", name));
    }
}

ordered_json to_json(const ArchSpec& arch) {
    ordered_json targets = ordered_json::array();
    if (arch.target_attn) targets.push_back("attn");
    if (arch.target_mlp) targets.push_back("mlp");
    return ordered_json{{"name", arch.name},         {"d_hidden", arch.d_hidden}, {"d_inter", arch.d_inter},
                        {"d_q", arch.d_q},           {"d_kv", arch.d_kv},         {"n_layers", arch.n_layers},
                        {"targets", targets}};
}

ArchSpec arch_from_json(const json& j) {
    try {
        ArchSpec a;
        a.name = j.value("name", std::string("custom"));
        a.d_hidden = j.at("d_hidden").get<std::size_t>();
        a.d_inter = j.at("d_inter").get<std::size_t>();
        a.d_q = j.value("d_q", a.d_hidden);
        a.d_kv = j.value("d_kv", a.d_q);
        a.n_layers = j.at("n_layers").get<std::size_t>();
        if (j.contains("targets")) {
            a.target_attn = false;
            a.target_mlp = false;
            for (const auto& t : j.at("targets")) {
                const auto s = t.get<std::string>();
                if (s == "attn") {
                    a.target_attn = true;
                } else if (s == "mlp") {
                    a.target_mlp = true;
                } else {
                    throw ConfigError(fmt::format("unknown adapter target '{}' (expected attn or mlp)", s));
                }
            }
        }
        a.validate();
        return a;
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("bad architecture description: {}", e.what()));
    }
}

std::filesystem::path config_dir() {
    if (const char* env = std::getenv("BDLORA_CONFIG_DIR"); env != nullptr && *env != '\0') return env;
    return BDLORA_DEFAULT_CONFIG_DIR;
}

ArchSpec load_arch(const std::string& name_or_path) {
    std::filesystem::path path = name_or_path;
    if (!std::filesystem::is_regular_file(path)) path = config_dir() / "arch" / (name_or_path + ".json");
    std::ifstream in(path);
    if (!in) throw ConfigError(fmt::format("unknown architecture '{}' (no preset at {})", name_or_path, path.string()));
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
    }
    return arch_from_json(j);
}

std::vector<ArchProjection> arch_projections(const ArchSpec& arch) {
    std::vector<ArchProjection> out;
    if (arch.target_attn) {
        out.push_back({"q_proj", arch.d_hidden, arch.d_q, Parallelism::Column});
        out.push_back({"k_proj", arch.d_hidden, arch.d_kv, Parallelism::Column});
        out.push_back({"v_proj", arch.d_hidden, arch.d_kv, Parallelism::Column});
        out.push_back({"o_proj", arch.d_q, arch.d_hidden, Parallelism::Row});
    }
    if (arch.target_mlp) {
        out.push_back({"gate_proj", arch.d_hidden, arch.d_inter, Parallelism::Column});
        out.push_back({"up_proj", arch.d_hidden, arch.d_inter, Parallelism::Column});
        out.push_back({"down_proj", arch.d_inter, arch.d_hidden, Parallelism::Row});
    }
    return out;
}

ModuleSpec attn_module(const ArchSpec& arch) { return ModuleSpec::attn_proj(arch.d_hidden, arch.d_q, arch.d_kv); }

ModuleSpec mlp_module(const ArchSpec& arch) { return ModuleSpec::glu_mlp(arch.d_hidden, arch.d_inter); }

std::string to_string(AdapterMethod m) { return m == AdapterMethod::Dense ? "dense" : "block_diagonal"; }

AdapterMethod parse_adapter_method(const std::string& name) {
    if (name == "dense") return AdapterMethod::Dense;
    if (name == "bd" || name == "block_diagonal") return AdapterMethod::BlockDiagonal;
    throw ConfigError(fmt::format("unknown adapter method '{}' (expected dense or bd)", name));
}

void AdapterManifest::validate() const {
    arch.validate();
    if (rank == 0) throw DomainError("adapter rank must be >= 1");
    if (n == 0) throw DomainError("device count must be >= 1");
    if (method == AdapterMethod::BlockDiagonal) {
        if (rank % n != 0) {
            throw DivisibilityError(fmt::format("block-diagonal rank {} is not divisible by N={}", rank, n));
        }
        for (const auto& p : arch_projections(arch)) {
            const std::size_t blocked = p.parallel == Parallelism::Column ? p.d_out : p.d_in;
            if (blocked % n != 0) {
                throw DivisibilityError(fmt::format("{}: dimension {} is not divisible by N={}", p.name, blocked, n));
            }
        }
    }
}

std::int64_t projection_params(const ArchProjection& p, AdapterMethod method, std::size_t n, std::size_t rank) {
    const auto r = static_cast<std::int64_t>(rank);
    const auto d_in = static_cast<std::int64_t>(p.d_in);
    const auto d_out = static_cast<std::int64_t>(p.d_out);
    if (method == AdapterMethod::Dense) return (d_in + d_out) * r;
    const auto nb = static_cast<std::int64_t>(n);
    if (p.parallel == Parallelism::Column) return d_in * r + d_out * (r / nb);
    return d_in * (r / nb) + d_out * r;
}

std::int64_t count_params(const AdapterManifest& manifest) {
    manifest.validate();
    std::int64_t per_layer = 0;
    for (const auto& p : arch_projections(manifest.arch)) {
        per_layer += projection_params(p, manifest.method, manifest.n, manifest.rank);
    }
    return per_layer * static_cast<std::int64_t>(manifest.arch.n_layers);
}

std::string format_millions(std::int64_t count) {
    return fmt::format("{:.1f}M", static_cast<double>(count) / 1e6);
}

std::string MatchedRank::describe(std::size_t n) const {
    return fmt::format("{}/{} ≈ {:.3f}; nearest multiple of {}: {} (param residual {}; exact {})",
                       to_string(numerator), to_string(denominator), to_double(exact), n, nearest_multiple,
                       to_string(param_residual), to_string(exact));
}

MatchedRank match_rank(std::size_t d_hidden, std::size_t d_inter, std::size_t n, std::size_t dense_rank) {
    if (d_hidden == 0 || n == 0) throw DomainError("match_rank needs d_H >= 1 and N >= 1");
    const Rational dh(static_cast<std::int64_t>(d_hidden));
    const Rational di(static_cast<std::int64_t>(d_inter));
    const Rational nn(static_cast<std::int64_t>(n));
    const Rational r(static_cast<std::int64_t>(dense_rank));
    MatchedRank m;
    m.numerator = r * (dh + di);
    m.denominator = dh + di / nn;
    m.exact = m.numerator / m.denominator;
    const double blocks = std::round(to_double(m.exact / nn));
    m.nearest_multiple = std::max<std::size_t>(1, static_cast<std::size_t>(blocks)) * n;
    const Rational rr(static_cast<std::int64_t>(m.nearest_multiple));
    m.param_residual = Rational(2) * (dh + di / nn) * rr - Rational(2) * (dh + di) * r;
    return m;
}

std::size_t matched_bd_rank(const ArchSpec& arch, std::size_t n, std::size_t dense_rank) {
    AdapterManifest dense{arch, AdapterMethod::Dense, 1, dense_rank, 16.0, ScalingMode::RsLoRA, 0};
    AdapterManifest unit{arch, AdapterMethod::BlockDiagonal, n, n, 16.0, ScalingMode::RsLoRABlockDiag, 0};
    const std::int64_t target = count_params(dense);
    const std::int64_t step = count_params(unit);  // params per N rank units
    std::int64_t best_k = 1;
    std::int64_t best_gap = std::abs(step - target);
    const std::int64_t guess = std::max<std::int64_t>(1, target / step);
    for (std::int64_t k = std::max<std::int64_t>(1, guess - 1); k <= guess + 2; ++k) {
        const std::int64_t gap = std::abs(k * step - target);
        if (gap < best_gap) {
            best_gap = gap;
            best_k = k;
        }
    }
    return static_cast<std::size_t>(best_k) * n;
}

std::string to_string(TensorLayout layout) {
    switch (layout) {
        case TensorLayout::Dense: return "dense";
        case TensorLayout::BlockSideBySide: return "block_side_by_side";
        case TensorLayout::BlockStacked: return "block_stacked";
    }
    return "unknown";
}

namespace {

TensorLayout parse_layout(const std::string& s) {
    if (s == "dense") return TensorLayout::Dense;
    if (s == "block_side_by_side") return TensorLayout::BlockSideBySide;
    if (s == "block_stacked") return TensorLayout::BlockStacked;
    throw FormatError(fmt::format("unknown tensor layout '{}'", s));
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

}  // namespace

const AdapterTensor& AdapterFactors::find(const std::string& name) const {
    auto it = std::find_if(tensors.begin(), tensors.end(), [&](const auto& t) { return t.name == name; });
    if (it == tensors.end()) throw FormatError(fmt::format("adapter has no tensor '{}'", name));
    return *it;
}

AdapterTensor& AdapterFactors::find(const std::string& name) {
    return const_cast<AdapterTensor&>(std::as_const(*this).find(name));
}

std::string tensor_name(std::size_t layer, const std::string& projection, char factor) {
    return fmt::format("layers.{}.{}.lora_{}", layer, projection, factor);
}

std::vector<TensorSpec> expected_tensors(const AdapterManifest& manifest) {
    manifest.validate();
    const bool bd = manifest.method == AdapterMethod::BlockDiagonal;
    const std::size_t r = manifest.rank;
    const std::size_t n = manifest.n;
    std::vector<TensorSpec> out;
    for (std::size_t l = 0; l < manifest.arch.n_layers; ++l) {
        for (const auto& p : arch_projections(manifest.arch)) {
            const std::string a = tensor_name(l, p.name, 'A');
            const std::string b = tensor_name(l, p.name, 'B');
            if (!bd) {
                out.push_back({a, TensorLayout::Dense, p.d_in, r});
                out.push_back({b, TensorLayout::Dense, r, p.d_out});
            } else if (p.parallel == Parallelism::Column) {
                out.push_back({a, TensorLayout::Dense, p.d_in, r});
                out.push_back({b, TensorLayout::BlockSideBySide, r / n, p.d_out});
            } else {
                out.push_back({a, TensorLayout::BlockStacked, p.d_in, r / n});
                out.push_back({b, TensorLayout::Dense, r, p.d_out});
            }
        }
    }
    return out;
}

AdapterFactors build_adapters(const AdapterManifest& manifest) {
    AdapterFactors out;
    std::uint64_t index = 0;
    for (const auto& spec : expected_tensors(manifest)) {
        ++index;
        const bool is_a = spec.name.back() == 'A';
        Matrix value(spec.rows, spec.cols);
        if (is_a) {
            // The logical A has d_in rows in every layout.
            const double bound = 1.0 / std::sqrt(static_cast<double>(spec.rows));
            value = random_matrix(spec.rows, spec.cols, splitmix64(manifest.seed ^ splitmix64(index)), bound);
        }
        out.tensors.push_back({spec.name, spec.layout, std::move(value)});
    }
    return out;
}

LoraPair dense_pair(const AdapterManifest& manifest, const AdapterFactors& factors, std::size_t layer,
                    const std::string& projection) {
    if (manifest.method != AdapterMethod::Dense) throw ConfigError("dense_pair needs a dense adapter");
    return LoraPair{factors.find(tensor_name(layer, projection, 'A')).value,
                    factors.find(tensor_name(layer, projection, 'B')).value, manifest.alpha, manifest.scaling_mode,
                    manifest.n};
}

BdLoraFactors bd_factors(const AdapterManifest& manifest, const AdapterFactors& factors, std::size_t layer,
                         const std::string& projection) {
    if (manifest.method != AdapterMethod::BlockDiagonal) throw ConfigError("bd_factors needs a block-diagonal adapter");
    const auto projs = arch_projections(manifest.arch);
    auto p = std::find_if(projs.begin(), projs.end(), [&](const auto& q) { return q.name == projection; });
    if (p == projs.end()) throw ConfigError(fmt::format("no projection '{}'", projection));
    const Matrix& a = factors.find(tensor_name(layer, projection, 'A')).value;
    const Matrix& b = factors.find(tensor_name(layer, projection, 'B')).value;
    if (p->parallel == Parallelism::Column) {
        return BdLoraFactors{Parallelism::Column, a, BlockDiagonalCompact::from_side_by_side(b, manifest.n),
                             manifest.alpha, manifest.scaling_mode};
    }
    return BdLoraFactors{Parallelism::Row, b, BlockDiagonalCompact::from_stacked(a, manifest.n), manifest.alpha,
                         manifest.scaling_mode};
}

// ---- BDLA1 serialization -------------------------------------------------------------

namespace {

constexpr std::size_t kMagicSize = 5;

ordered_json manifest_json(const AdapterManifest& m) {
    return ordered_json{{"arch", to_json(m.arch)},
                        {"method", to_string(m.method)},
                        {"n", m.n},
                        {"rank", m.rank},
                        {"alpha", m.alpha},
                        {"scaling_mode", to_string(m.scaling_mode)},
                        {"seed", m.seed}};
}

AdapterManifest manifest_from_json(const json& j) {
    AdapterManifest m;
    m.arch = arch_from_json(j.at("arch"));
    m.method = parse_adapter_method(j.at("method").get<std::string>());
    m.n = j.at("n").get<std::size_t>();
    m.rank = j.at("rank").get<std::size_t>();
    m.alpha = j.at("alpha").get<double>();
    m.scaling_mode = parse_scaling_mode(j.at("scaling_mode").get<std::string>());
    m.seed = j.at("seed").get<std::uint64_t>();
    return m;
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64(std::span<const std::uint8_t> in) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[static_cast<std::size_t>(i)]) << (8 * i);
    return v;
}

void put_f32(std::vector<std::uint8_t>& out, double value) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(value));
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

double get_f32(const std::uint8_t* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return static_cast<double>(std::bit_cast<float>(bits));
}

}  // namespace

std::vector<std::uint8_t> serialize(const AdapterManifest& manifest, const AdapterFactors& factors) {
    const auto specs = expected_tensors(manifest);
    if (specs.size() != factors.tensors.size()) {
        throw FormatError(fmt::format("manifest implies {} tensors, got {}", specs.size(), factors.tensors.size()));
    }
    ordered_json table = ordered_json::array();
    std::uint64_t offset = 0;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const auto& t = factors.tensors[i];
        const auto& s = specs[i];
        if (t.name != s.name || t.layout != s.layout || t.value.rows() != s.rows || t.value.cols() != s.cols) {
            throw FormatError(fmt::format("tensor {} ({} {}) does not match manifest entry {} ({} {}x{})", i,
                                          t.name, t.value.shape_string(), s.name, to_string(s.layout), s.rows,
                                          s.cols));
        }
        const std::uint64_t nbytes = 4ULL * t.value.size();
        table.push_back(ordered_json{{"name", t.name},
                                     {"shape", {t.value.rows(), t.value.cols()}},
                                     {"layout", to_string(t.layout)},
                                     {"offset", offset},
                                     {"nbytes", nbytes}});
        offset += nbytes;
    }
    const ordered_json header{{"format", kAdapterMagic}, {"manifest", manifest_json(manifest)}, {"tensors", table}};
    const std::string text = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(kMagicSize + 8 + text.size() + offset);
    out.insert(out.end(), kAdapterMagic, kAdapterMagic + kMagicSize);
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& t : factors.tensors) {
        for (double v : t.value.data()) put_f32(out, v);
    }
    return out;
}

AdapterFile deserialize(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kMagicSize + 8 || std::memcmp(bytes.data(), kAdapterMagic, kMagicSize) != 0) {
        throw FormatError("not a BDLA1 adapter file (bad magic)");
    }
    const std::uint64_t header_len = get_u64(bytes.subspan(kMagicSize, 8));
    const std::size_t header_start = kMagicSize + 8;
    if (header_len > bytes.size() - header_start) throw FormatError("truncated header");
    const auto* header_begin = reinterpret_cast<const char*>(bytes.data() + header_start);

    json header;
    AdapterFile file;
    std::vector<TensorSpec> specs;
    try {
        header = json::parse(header_begin, header_begin + header_len);
        if (header.at("format").get<std::string>() != kAdapterMagic) throw FormatError("header format is not BDLA1");
        file.manifest = manifest_from_json(header.at("manifest"));
        specs = expected_tensors(file.manifest);
    } catch (const json::exception& e) {
        throw FormatError(fmt::format("malformed header: {}", e.what()));
    } catch (const ConfigError& e) {
        throw FormatError(fmt::format("malformed manifest: {}", e.what()));
    } catch (const DomainError& e) {
        throw FormatError(fmt::format("invalid manifest: {}", e.what()));
    } catch (const DivisibilityError& e) {
        throw FormatError(fmt::format("invalid manifest: {}", e.what()));
    }

    const auto payload = bytes.subspan(header_start + header_len);
    const auto& table = header.at("tensors");
    if (!table.is_array() || table.size() != specs.size()) {
        throw FormatError(fmt::format("manifest implies {} tensors, table lists {}", specs.size(), table.size()));
    }
    std::uint64_t expected_offset = 0;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const auto& e = table[i];
        const auto& s = specs[i];
        std::string name;
        std::uint64_t rows = 0, cols = 0, offset = 0, nbytes = 0;
        TensorLayout layout{};
        try {
            name = e.at("name").get<std::string>();
            rows = e.at("shape").at(0).get<std::uint64_t>();
            cols = e.at("shape").at(1).get<std::uint64_t>();
            layout = parse_layout(e.at("layout").get<std::string>());
            offset = e.at("offset").get<std::uint64_t>();
            nbytes = e.at("nbytes").get<std::uint64_t>();
        } catch (const json::exception& ex) {
            throw FormatError(fmt::format("tensor table entry {}: {}", i, ex.what()));
        }
        if (name != s.name || layout != s.layout || rows != s.rows || cols != s.cols) {
            throw FormatError(fmt::format("tensor {} is {} {} {}x{}, manifest implies {} {} {}x{}", i, name,
                                          to_string(layout), rows, cols, s.name, to_string(s.layout), s.rows, s.cols));
        }
        if (offset != expected_offset || nbytes != 4 * rows * cols) {
            throw FormatError(fmt::format("tensor {} has offset {} / {} bytes, expected {} / {}", name, offset, nbytes,
                                          expected_offset, 4 * rows * cols));
        }
        if (offset + nbytes > payload.size()) throw FormatError(fmt::format("truncated payload in tensor {}", name));
        std::vector<double> data(rows * cols);
        const std::uint8_t* p = payload.data() + offset;
        for (auto& v : data) {
            v = get_f32(p);
            p += 4;
        }
        file.factors.tensors.push_back({name, layout, Matrix(rows, cols, std::move(data))});
        expected_offset += nbytes;
    }
    if (expected_offset != payload.size()) {
        throw FormatError(fmt::format("payload has {} bytes, tensor table accounts for {}", payload.size(),
                                      expected_offset));
    }
    return file;
}

void write_adapter_file(const std::filesystem::path& path, const AdapterManifest& manifest,
                        const AdapterFactors& factors) {
    const auto bytes = serialize(manifest, factors);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError(fmt::format("cannot write {}", path.string()));
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

AdapterFile read_adapter_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(fmt::format("cannot read {}", path.string()));
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

// ---- per-device slicing ------------------------------------------------------------

namespace {

enum class SliceAxis { Rows, Cols };

/// Which axis of the stored tensor is split across devices.
SliceAxis slice_axis(const AdapterManifest& m, Parallelism parallel, bool is_a) {
    const bool col = parallel == Parallelism::Column;
    if (m.method == AdapterMethod::Dense) {
        // S-LoRA placement: both factors of a column-parallel projection and B of a
        // row-parallel one are column-sharded; A of a row-parallel one is row-sharded.
        return (col || !is_a) ? SliceAxis::Cols : SliceAxis::Rows;
    }
    if (col) return SliceAxis::Cols;  // A column-sharded; side-by-side B: block i is column range i
    return SliceAxis::Rows;           // stacked A: block i is row range i; B row-sharded
}

std::vector<std::pair<std::string, Parallelism>> tensor_parallelism(const AdapterManifest& m) {
    std::vector<std::pair<std::string, Parallelism>> out;
    for (std::size_t l = 0; l < m.arch.n_layers; ++l) {
        for (const auto& p : arch_projections(m.arch)) {
            out.emplace_back(tensor_name(l, p.name, 'A'), p.parallel);
            out.emplace_back(tensor_name(l, p.name, 'B'), p.parallel);
        }
    }
    return out;
}

}  // namespace

std::size_t DeviceSlice::payload_elements() const {
    std::size_t total = 0;
    for (const auto& t : tensors) total += t.value.size();
    return total;
}

DeviceSlice slice_for_device(const AdapterManifest& manifest, const AdapterFactors& factors, std::size_t device,
                             std::size_t n) {
    manifest.validate();
    if (n == 0 || device >= n) throw ConfigError(fmt::format("device {} out of range for N={}", device, n));
    if (manifest.method == AdapterMethod::BlockDiagonal && n != manifest.n) {
        throw ConfigError(fmt::format("adapter was built for N={}, cannot slice for N={}", manifest.n, n));
    }
    DeviceSlice out{device, n, {}};
    const auto specs = expected_tensors(manifest);
    const auto parallel = tensor_parallelism(manifest);
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const Matrix& full = factors.find(specs[i].name).value;
        const bool is_a = specs[i].name.back() == 'A';
        if (slice_axis(manifest, parallel[i].second, is_a) == SliceAxis::Cols) {
            if (full.cols() % n != 0) {
                throw DivisibilityError(fmt::format("{}: {} columns not divisible by N={}", specs[i].name,
                                                    full.cols(), n));
            }
            const std::size_t w = full.cols() / n;
            out.tensors.push_back({specs[i].name, 0, device * w, full.block(0, device * w, full.rows(), w)});
        } else {
            if (full.rows() % n != 0) {
                throw DivisibilityError(fmt::format("{}: {} rows not divisible by N={}", specs[i].name,
                                                    full.rows(), n));
            }
            const std::size_t h = full.rows() / n;
            out.tensors.push_back({specs[i].name, device * h, 0, full.block(device * h, 0, h, full.cols())});
        }
    }
    return out;
}

AdapterFactors assemble_slices(const AdapterManifest& manifest, std::span<const DeviceSlice> slices) {
    AdapterFactors out;
    std::vector<std::vector<std::uint8_t>> covered;
    for (const auto& s : expected_tensors(manifest)) {
        out.tensors.push_back({s.name, s.layout, Matrix(s.rows, s.cols)});
        covered.emplace_back(s.rows * s.cols, 0);
    }
    for (const auto& slice : slices) {
        for (const auto& t : slice.tensors) {
            auto it = std::find_if(out.tensors.begin(), out.tensors.end(),
                                   [&](const auto& x) { return x.name == t.name; });
            if (it == out.tensors.end()) throw FormatError(fmt::format("slice names unknown tensor '{}'", t.name));
            auto& mask = covered[static_cast<std::size_t>(it - out.tensors.begin())];
            it->value.set_block(t.row_offset, t.col_offset, t.value);
            for (std::size_t i = 0; i < t.value.rows(); ++i) {
                for (std::size_t j = 0; j < t.value.cols(); ++j) {
                    auto& c = mask[(t.row_offset + i) * it->value.cols() + t.col_offset + j];
                    if (c != 0) throw FormatError(fmt::format("slices overlap in tensor '{}'", t.name));
                    c = 1;
                }
            }
        }
    }
    for (std::size_t k = 0; k < covered.size(); ++k) {
        if (std::find(covered[k].begin(), covered[k].end(), 0) != covered[k].end()) {
            throw FormatError(fmt::format("slices do not cover tensor '{}'", out.tensors[k].name));
        }
    }
    return out;
}

// ---- dense <-> block-diagonal conversion ---------------------------------------------

AdapterFile to_block_diagonal(const AdapterManifest& manifest, const AdapterFactors& factors, std::size_t n) {
    if (manifest.method != AdapterMethod::Dense) throw ConfigError("adapter is already block-diagonal");
    AdapterManifest target = manifest;
    target.method = AdapterMethod::BlockDiagonal;
    target.n = n;
    target.validate();
    AdapterFile out{target, {}};
    for (std::size_t l = 0; l < manifest.arch.n_layers; ++l) {
        for (const auto& p : arch_projections(manifest.arch)) {
            const auto a_name = tensor_name(l, p.name, 'A');
            const auto b_name = tensor_name(l, p.name, 'B');
            const Matrix& a = factors.find(a_name).value;
            const Matrix& b = factors.find(b_name).value;
            try {
                if (p.parallel == Parallelism::Column) {
                    out.factors.tensors.push_back({a_name, TensorLayout::Dense, a});
                    out.factors.tensors.push_back(
                        {b_name, TensorLayout::BlockSideBySide, BlockDiagonalCompact::from_dense(b, n).side_by_side()});
                } else {
                    out.factors.tensors.push_back(
                        {a_name, TensorLayout::BlockStacked, BlockDiagonalCompact::from_dense(a, n).stacked()});
                    out.factors.tensors.push_back({b_name, TensorLayout::Dense, b});
                }
            } catch (const ExactnessError& e) {
                throw ExactnessError(fmt::format("cannot convert {} exactly: {}",
                                                 p.parallel == Parallelism::Column ? b_name : a_name, e.what()));
            }
        }
    }
    return out;
}

AdapterFile to_dense(const AdapterManifest& manifest, const AdapterFactors& factors) {
    if (manifest.method != AdapterMethod::BlockDiagonal) throw ConfigError("adapter is already dense");
    AdapterManifest target = manifest;
    target.method = AdapterMethod::Dense;
    AdapterFile out{target, {}};
    for (std::size_t l = 0; l < manifest.arch.n_layers; ++l) {
        for (const auto& p : arch_projections(manifest.arch)) {
            const LoraPair pair = bd_factors(manifest, factors, l, p.name).to_dense();
            out.factors.tensors.push_back({tensor_name(l, p.name, 'A'), TensorLayout::Dense, pair.a});
            out.factors.tensors.push_back({tensor_name(l, p.name, 'B'), TensorLayout::Dense, pair.b});
        }
    }
    return out;
}

}  // namespace bdlora
