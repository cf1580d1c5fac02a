// bdlora command-line entry point. Data goes to stdout (or --out), diagnostics
// to stderr as one JSON object per line.
//
// Exit codes: 0 success, 1 verification failed, 2 usage error, 3 runtime error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "bdlora/adapter_store.hpp"
#include "bdlora/cost_model.hpp"
#include "bdlora/errors.hpp"
#include "bdlora/serve_sim.hpp"
#include "bdlora/verify.hpp"

using namespace bdlora;

namespace {

constexpr int kExitVerifyFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

void report_error(const std::string& kind, const std::string& message) {
    std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << '\n';
}

void emit(const std::string& text, const std::string& out_path) {
    if (out_path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream out(out_path, std::ios::binary);
    if (!out) throw ConfigError(fmt::format("cannot write {}", out_path));
    out << text;
}

std::string csv_line(const std::vector<std::string>& cells) {
    std::string line;
    for (std::size_t i = 0; i < cells.size(); ++i) line += (i ? "," : "") + cells[i];
    return line + "\n";
}

std::vector<StrategyKind> parse_strategies(const std::vector<std::string>& names) {
    std::vector<StrategyKind> out;
    for (const auto& n : names) out.push_back(parse_strategy(n));
    return out;
}

// ---- verify ----

struct VerifyArgs {
    std::vector<std::size_t> ns{1, 2, 4, 8};
    std::vector<std::string> shapes{"basic", "glu", "attn"};
    std::vector<std::size_t> seq_lens{1, 5, 64};
    std::uint64_t seed = 0;
    std::size_t seeds = 3;
    double tolerance = 1e-10;
};

int run_verify_cmd(const VerifyArgs& a) {
    VerifyOptions opt;
    opt.ns = a.ns;
    opt.shapes.clear();
    for (const auto& s : a.shapes) opt.shapes.push_back(parse_module_shape(s));
    opt.seq_lens = a.seq_lens;
    opt.seeds.clear();
    for (std::size_t i = 0; i < a.seeds; ++i) opt.seeds.push_back(a.seed + i);
    opt.tolerance = a.tolerance;
    for (std::size_t n : opt.ns) {
        if (n == 0 || opt.rank % n != 0 || opt.d_kv % n != 0) {
            throw ConfigError(fmt::format("N={} does not divide the verification dims (rank {}, d_kv {})", n,
                                          opt.rank, opt.d_kv));
        }
    }

    const auto cells = run_verify(opt);
    std::size_t failed = 0;
    for (const auto& c : cells) {
        if (!c.pass()) ++failed;
        std::cout << fmt::format("{} n={} shape={} s={} seed={} schedule={} max_rel_error={:.3e}{}\n",
                                 c.pass() ? "PASS" : "FAIL", c.n, to_string(c.shape), c.s, c.seed,
                                 to_string(c.schedule), c.max_rel_error,
                                 c.accounting_ok ? "" : " accounting=" + c.detail);
    }
    std::cout << fmt::format("summary cells={} failed={}\n", cells.size(), failed);
    return failed == 0 ? 0 : kExitVerifyFailed;
}

// ---- count-params / match-rank ----

struct CountArgs {
    std::string arch;
    std::string method = "dense";
    std::size_t n = 1;
    std::size_t rank = 16;
};

int run_count(const CountArgs& a) {
    AdapterManifest m;
    m.arch = load_arch(a.arch);
    m.method = parse_adapter_method(a.method);
    m.n = m.method == AdapterMethod::Dense ? 1 : a.n;
    m.rank = a.rank;
    const auto count = count_params(m);
    std::cout << count << ' ' << format_millions(count) << '\n';
    return 0;
}

struct MatchArgs {
    std::size_t dh = 0;
    std::size_t di = 0;
    std::size_t n = 8;
    std::size_t rank = 16;
    std::string arch;
};

int run_match(const MatchArgs& a) {
    if (!a.arch.empty()) {
        const ArchSpec arch = load_arch(a.arch);
        const std::size_t r = matched_bd_rank(arch, a.n, a.rank);
        const auto dense = count_params({arch, AdapterMethod::Dense, 1, a.rank});
        const auto bd = count_params({arch, AdapterMethod::BlockDiagonal, a.n, r});
        std::cout << fmt::format("{} dense r={} params={} ({}); bd n={} r={} params={} ({})\n", arch.name, a.rank,
                                 dense, format_millions(dense), a.n, r, bd, format_millions(bd));
        return 0;
    }
    if (a.dh == 0 || a.di == 0) throw ConfigError("match-rank needs --dh and --di, or --arch");
    std::cout << match_rank(a.dh, a.di, a.n, a.rank).describe(a.n) << '\n';
    return 0;
}

// ---- cost-table ----

struct CostArgs {
    std::string shape = "basic";
    std::string arch;
    std::size_t dh = 4096;
    std::size_t di = 14336;
    std::size_t dq = 0;
    std::size_t dkv = 0;
    std::vector<std::size_t> ns{8};
    std::vector<std::size_t> ranks{16};
    std::vector<std::size_t> seq_lens{1, 1024};
    std::vector<std::string> strategies{"nfs_lora", "s_lora", "bd_lora"};
    std::string bd_rank = "exact";
    bool unmerged = false;
    std::string hardware = "a100-like";
    std::string format = "csv";
    std::string out;
};

int run_cost(const CostArgs& a) {
    ModuleShape shape = parse_module_shape(a.shape);
    std::size_t dh = a.dh, di = a.di, dq = a.dq ? a.dq : a.dh, dkv = a.dkv ? a.dkv : dq;
    if (!a.arch.empty()) {
        const ArchSpec arch = load_arch(a.arch);
        dh = arch.d_hidden;
        di = arch.d_inter;
        dq = arch.d_q;
        dkv = arch.d_kv;
    }
    ModuleSpec spec = shape == ModuleShape::BasicMLP ? ModuleSpec::basic_mlp(dh, di)
                      : shape == ModuleShape::GluMLP ? ModuleSpec::glu_mlp(dh, di)
                                                     : ModuleSpec::attn_proj(dh, dq, dkv);
    if (a.bd_rank != "exact" && a.bd_rank != "nearest" && a.bd_rank != "same") {
        throw ConfigError(fmt::format("--bd-rank must be exact, nearest or same, got '{}'", a.bd_rank));
    }
    const HardwareProfile hw = load_hardware(a.hardware);
    const auto kinds = parse_strategies(a.strategies);

    std::vector<std::string> head{"strategy", "n", "rank", "s"};
    for (const auto& c : cost_csv_columns()) head.push_back(c);
    std::string csv = csv_line(head);
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (StrategyKind kind : kinds) {
        for (std::size_t n : a.ns) {
            for (std::size_t r : a.ranks) {
                Rational rank(static_cast<std::int64_t>(r));
                if (kind == StrategyKind::BdLora && a.bd_rank != "same") {
                    // Parameter match on the basic-MLP pair (d_H, d_I).
                    const auto m = match_rank(dh, di, n, r);
                    rank = a.bd_rank == "exact" ? m.exact : Rational(static_cast<std::int64_t>(m.nearest_multiple));
                }
                for (std::size_t s : a.seq_lens) {
                    const StrategyConfig cfg{kind, !a.unmerged, !a.unmerged};
                    const auto report = with_latency(analytic_costs(spec, cfg, n, rank, s), hw);
                    std::vector<std::string> cells{to_string(kind), std::to_string(n), to_string(rank),
                                                   std::to_string(s)};
                    for (auto& v : cost_csv_values(report)) cells.push_back(v);
                    csv += csv_line(cells);
                    nlohmann::ordered_json j{{"strategy", to_string(kind)},
                                             {"n", n},
                                             {"rank", to_string(rank)},
                                             {"s", s}};
                    const auto fields = to_json(report);
                    for (const auto& [k, v] : fields.items()) j[k] = v;
                    rows.push_back(j);
                }
            }
        }
    }
    emit(a.format == "json" ? rows.dump(2) + "\n" : csv, a.out);
    return 0;
}

// ---- simulate ----

struct SimArgs {
    std::string config;
    std::string arch = "llama3.1-8b";
    std::size_t n = 8;
    std::vector<std::size_t> ranks{16, 32, 64, 128, 256};
    std::vector<std::string> strategies{"nfs_lora", "s_lora", "bd_lora"};
    std::vector<std::size_t> batch_sizes{1};
    std::size_t it = 1024;
    std::size_t ot = 128;
    std::size_t requests = 0;  // 0: one batch per cell
    std::string policy = "single_shared";
    std::string hardware = "a100-like";
    std::size_t cache_capacity = 1;
    double load_cost = 0.0;
    double transfer_cost = 0.0;
    bool warm = false;
    bool no_match = false;
    std::string format = "csv";
    std::string out;
};

int run_simulate(const SimArgs& a, const CLI::App& cmd) {
    Workload w;
    HardwareProfile hw;
    CacheConfig cache;
    if (!a.config.empty()) {
        const SimConfig c = load_sim_config(a.config);
        w = c.workload;
        hw = c.hardware;
        cache = c.cache;
    } else {
        hw = load_hardware(a.hardware);
    }
    // Explicit flags override the config file.
    auto given = [&](const char* name) { return cmd.count(name) > 0; };
    if (a.config.empty() || given("--arch")) w.arch = load_arch(a.arch);
    if (a.config.empty() || given("--n")) w.n = a.n;
    if (a.config.empty() || given("--it")) w.input_tokens = a.it;
    if (a.config.empty() || given("--ot")) w.output_tokens = a.ot;
    if (a.config.empty() || given("--policy")) w.adapter_policy = parse_adapter_policy(a.policy);
    if (given("--hardware")) hw = load_hardware(a.hardware);
    if (a.config.empty() || given("--cache-capacity")) cache.capacity = a.cache_capacity;
    if (a.config.empty() || given("--load-cost")) cache.load_cost_per_param = a.load_cost;
    if (a.config.empty() || given("--transfer-cost")) cache.transfer_cost_per_param = a.transfer_cost;
    if (given("--warm")) cache.warm = true;

    SweepGrid grid;
    grid.ranks = given("--ranks") || a.config.empty() ? a.ranks : std::vector<std::size_t>{w.rank};
    grid.strategies = given("--strategies") || a.config.empty() ? parse_strategies(a.strategies)
                                                                : std::vector<StrategyKind>{w.strategy.kind};
    grid.batch_sizes = given("--batch-sizes") || a.config.empty() ? a.batch_sizes
                                                                  : std::vector<std::size_t>{w.batch_size};
    // Grid ranks are dense ranks; a config file names the served rank directly.
    grid.match_bd_params = !a.no_match && (a.config.empty() || given("--ranks"));

    if (given("--requests")) w.total_requests = a.requests;
    // Without a config file or --requests, each cell serves one full batch.
    grid.one_batch_per_cell = (a.config.empty() && !given("--requests")) || w.total_requests == 0;
    if (grid.one_batch_per_cell) w.total_requests = 1;
    const auto rows = sweep(grid, w, hw, cache);
    if (a.format == "json") {
        emit(sweep_json(rows, w).dump(2) + "\n", a.out);
    } else {
        emit(sweep_csv(rows, w), a.out);
    }
    return 0;
}

// ---- adapters ----

struct InitArgs {
    std::string arch;
    std::string method = "dense";
    std::size_t n = 1;
    std::size_t rank = 16;
    double alpha = 16.0;
    std::string scaling;
    std::uint64_t seed = 0;
    std::string out;
};

int run_init(const InitArgs& a) {
    AdapterManifest m;
    m.arch = load_arch(a.arch);
    m.method = parse_adapter_method(a.method);
    m.n = m.method == AdapterMethod::Dense ? 1 : a.n;
    m.rank = a.rank;
    m.alpha = a.alpha;
    m.scaling_mode = !a.scaling.empty()                       ? parse_scaling_mode(a.scaling)
                     : m.method == AdapterMethod::Dense       ? ScalingMode::RsLoRA
                                                              : ScalingMode::RsLoRABlockDiag;
    m.seed = a.seed;
    write_adapter_file(a.out, m, build_adapters(m));
    const auto count = count_params(m);
    std::cout << fmt::format("{} {} {} {}\n", a.out, to_string(m.method), count, format_millions(count));
    return 0;
}

struct ConvertArgs {
    std::string in;
    std::string out;
    std::string to = "bd";
    std::size_t n = 0;
};

int run_convert(const ConvertArgs& a) {
    const AdapterFile file = read_adapter_file(a.in);
    const AdapterMethod target = parse_adapter_method(a.to);
    AdapterFile converted;
    if (target == AdapterMethod::BlockDiagonal) {
        if (a.n == 0) throw ConfigError("converting to block-diagonal needs --n");
        converted = to_block_diagonal(file.manifest, file.factors, a.n);
    } else {
        converted = to_dense(file.manifest, file.factors);
    }
    write_adapter_file(a.out, converted.manifest, converted.factors);
    std::cout << fmt::format("{} {} n={} params={}\n", a.out, to_string(converted.manifest.method),
                             converted.manifest.n, count_params(converted.manifest));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Block-diagonal LoRA tensor-parallel toolkit"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all");

    VerifyArgs va;
    auto* verify = app.add_subcommand("verify", "Cross-strategy numerical equivalence and counter checks");
    verify->add_option("--n", va.ns, "Device counts")->delimiter(',');
    verify->add_option("--shapes", va.shapes, "Module shapes: basic, glu, attn")->delimiter(',');
    verify->add_option("--seq-lens", va.seq_lens, "Token counts S")->delimiter(',');
    verify->add_option("--seed", va.seed, "First seed");
    verify->add_option("--seeds", va.seeds, "Number of consecutive seeds")->check(CLI::PositiveNumber);
    verify->add_option("--tolerance", va.tolerance, "Max relative error")->check(CLI::NonNegativeNumber);

    CountArgs ca;
    auto* count = app.add_subcommand("count-params", "Exact trainable-parameter count");
    count->add_option("--arch", ca.arch, "Preset name or JSON file")->required();
    count->add_option("--method", ca.method, "dense or bd");
    count->add_option("--n", ca.n, "Block count for bd");
    count->add_option("--rank", ca.rank, "Adapter rank");

    MatchArgs ma;
    auto* match = app.add_subcommand("match-rank", "BD rank with the same parameter count as a dense rank");
    match->add_option("--dh", ma.dh, "Hidden size");
    match->add_option("--di", ma.di, "Intermediate size");
    match->add_option("--n", ma.n, "Device count");
    match->add_option("--rank", ma.rank, "Dense rank");
    match->add_option("--arch", ma.arch, "Match over a whole preset instead of one MLP");

    CostArgs cs;
    auto* cost = app.add_subcommand("cost-table", "Analytic per-device costs of one module");
    cost->add_option("--shape", cs.shape, "basic, glu or attn");
    cost->add_option("--arch", cs.arch, "Take dims from a preset");
    cost->add_option("--dh", cs.dh, "Hidden size");
    cost->add_option("--di", cs.di, "Intermediate size");
    cost->add_option("--dq", cs.dq, "Query width (attn; default d_H)");
    cost->add_option("--dkv", cs.dkv, "Key/value width (attn; default d_q)");
    cost->add_option("--n", cs.ns, "Device counts")->delimiter(',');
    cost->add_option("--rank", cs.ranks, "Dense ranks")->delimiter(',');
    cost->add_option("--s", cs.seq_lens, "Token counts")->delimiter(',');
    cost->add_option("--strategies", cs.strategies, "base, nfs_lora, s_lora, bd_lora")->delimiter(',');
    cost->add_option("--bd-rank", cs.bd_rank, "BD rank: exact (rational match), nearest (multiple of N) or same");
    cost->add_flag("--unmerged", cs.unmerged, "One S-LoRA all-gather per projection");
    cost->add_option("--hardware", cs.hardware, "Hardware preset or JSON file");
    cost->add_option("--format", cs.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
    cost->add_option("--out", cs.out, "Write to file instead of stdout");

    SimArgs sa;
    auto* sim = app.add_subcommand("simulate", "Serving simulation sweep");
    sim->add_option("--config", sa.config, "Workload/hardware/cache JSON file");
    sim->add_option("--arch", sa.arch, "Preset name or JSON file");
    sim->add_option("--n", sa.n, "Device count");
    sim->add_option("--ranks", sa.ranks, "Dense ranks (BD is parameter-matched)")->delimiter(',');
    sim->add_option("--strategies", sa.strategies, "base, nfs_lora, s_lora, bd_lora")->delimiter(',');
    sim->add_option("--batch-sizes", sa.batch_sizes, "Batch sizes")->delimiter(',');
    sim->add_option("--it", sa.it, "Input tokens per request");
    sim->add_option("--ot", sa.ot, "Output tokens per request");
    sim->add_option("--requests", sa.requests, "Total requests (default: one batch)");
    sim->add_option("--policy", sa.policy, "single_shared or per_request_unique");
    sim->add_option("--hardware", sa.hardware, "Hardware preset or JSON file");
    sim->add_option("--cache-capacity", sa.cache_capacity, "Adapters held in host memory");
    sim->add_option("--load-cost", sa.load_cost, "Seconds per parameter, disk to host");
    sim->add_option("--transfer-cost", sa.transfer_cost, "Seconds per parameter, host to device");
    sim->add_flag("--warm", sa.warm, "Start with a populated adapter cache");
    sim->add_flag("--no-match", sa.no_match, "Serve BD at the grid rank instead of the parameter-matched one");
    sim->add_option("--format", sa.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
    sim->add_option("--out", sa.out, "Write to file instead of stdout");

    InitArgs ia;
    auto* init = app.add_subcommand("init-adapter", "Write a freshly initialized adapter file");
    init->add_option("--arch", ia.arch, "Preset name or JSON file")->required();
    init->add_option("--method", ia.method, "dense or bd");
    init->add_option("--n", ia.n, "Block count for bd");
    init->add_option("--rank", ia.rank, "Adapter rank");
    init->add_option("--alpha", ia.alpha, "Scaling numerator");
    init->add_option("--scaling", ia.scaling, "standard, rslora or rslora_bd");
    init->add_option("--seed", ia.seed, "Initialization seed");
    init->add_option("--out", ia.out, "Output path")->required();

    ConvertArgs cv;
    auto* convert = app.add_subcommand("convert-adapter", "Convert between dense and block-diagonal storage");
    convert->add_option("--in", cv.in, "Input adapter file")->required();
    convert->add_option("--out", cv.out, "Output adapter file")->required();
    convert->add_option("--to", cv.to, "bd or dense");
    convert->add_option("--n", cv.n, "Block count when converting to bd");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        report_error("usage_error", e.what());
        return kExitUsage;
    }

    try {
        if (*verify) return run_verify_cmd(va);
        if (*count) return run_count(ca);
        if (*match) return run_match(ma);
        if (*cost) return run_cost(cs);
        if (*sim) return run_simulate(sa, *sim);
        if (*init) return run_init(ia);
        if (*convert) return run_convert(cv);
    } catch (const Error& e) {
        report_error(e.kind(), e.what());
        return kExitRuntime;
    } catch (const std::exception& e) {
        report_error("error", e.what());
        return kExitRuntime;
    }
    return kExitUsage;
}
