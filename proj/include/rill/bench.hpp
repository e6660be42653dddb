#pragma once

#include "rill/engine.hpp"
#include "rill/metrics.hpp"

#include <memory>
#include <string>
#include <vector>

namespace rill
{
    struct Scenario
    {
        std::string name = "scenario";
        JobSpec job;
        ScaleOptions options;
        std::vector<ScaleRequest> requests;
        std::vector<std::pair<Tick, std::int64_t>> checkpoints; // (tick, id or -1)
    };

    struct RunOutput
    {
        std::unique_ptr<Engine> engine; // post-run, for snapshots and inspection
        RunResult result;
        MetricsReport metrics;
    };

    // Applies per-protocol defaults: DRRS keeps scheduling as configured, the
    // baselines run without record scheduling unless explicitly enabled.
    ScaleOptions options_for(Protocol protocol, const ScaleOptions &base,
                             bool force_scheduling = false);

    Scenario keyed_sum_scenario(std::uint64_t seed, std::uint32_t parallelism,
                                std::uint32_t num_keygroups);
    Scenario window_scenario(std::uint64_t seed, std::uint32_t parallelism,
                             std::uint32_t num_keygroups);

    RunOutput run_scenario(const Scenario &scenario);

    // Same scenario with no scale requests: the ground truth.
    RunOutput run_oracle(Scenario scenario);

    std::string metrics_csv_header();
    std::string metrics_csv_row(const std::string &scenario, Protocol protocol,
                                std::uint64_t seed, const MetricsReport &m);
}
