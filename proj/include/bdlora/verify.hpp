#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "bdlora/lora_model.hpp"
#include "bdlora/tp_strategies.hpp"

namespace bdlora {

struct VerifyOptions {
    std::vector<std::size_t> ns{1, 2, 4, 8};
    std::vector<ModuleShape> shapes{ModuleShape::BasicMLP, ModuleShape::GluMLP, ModuleShape::AttnProj};
    std::vector<std::size_t> seq_lens{1, 5, 64};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    double tolerance = 1e-10;
    std::size_t rank = 8;
    std::size_t d_hidden = 16;
    std::size_t d_inter = 32;
    std::size_t d_q = 16;
    std::size_t d_kv = 8;
};

/// Schedules checked per (N, shape, S, seed).
enum class VerifySchedule { Megatron, NfsLora, SLora, SLoraMerged, BdLora };

std::string to_string(VerifySchedule s);
StrategyConfig strategy_config(VerifySchedule s);

struct VerifyCell {
    std::size_t n;
    ModuleShape shape;
    std::size_t s;
    std::uint64_t seed;
    VerifySchedule schedule;
    double max_rel_error;
    bool numeric_ok;
    /// Executed counters reconcile with the analytic cost model.
    bool accounting_ok;
    std::string detail;

    bool pass() const { return numeric_ok && accounting_ok; }
};

ModuleSpec verify_module(const VerifyOptions& opt, ModuleShape shape);

/// Runs every schedule against the single-device reference; BD-LoRA is
/// compared with the reference on its expanded (dense) factors.
std::vector<VerifyCell> run_verify(const VerifyOptions& opt);

/// One cell, exposed for targeted tests.
VerifyCell verify_cell(const VerifyOptions& opt, std::size_t n, ModuleShape shape, std::size_t s,
                       std::uint64_t seed, VerifySchedule schedule);

}  // namespace bdlora
