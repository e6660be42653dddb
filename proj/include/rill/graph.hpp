#pragma once

#include "rill/types.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace rill
{
    enum class OpKind
    {
        Generator,
        KeyedSum,
        SlidingWindow,
        Sink,
        Scripted, // test source fed an explicit message sequence
    };

    const char *op_kind_name(OpKind k) noexcept;
    std::optional<OpKind> parse_op_kind(const std::string &s) noexcept;

    enum class Partitioning
    {
        Keyed,
        Forward,
        Broadcast,
    };

    std::optional<Partitioning> parse_partitioning(const std::string &s) noexcept;

    struct WorkloadConfig
    {
        std::uint64_t rate = 1000;       // records per 1000 ticks
        Tick duration = 10000;           // emission horizon in ticks
        std::uint64_t total_records = 0; // 0: derived from rate * duration / 1000
        std::uint64_t key_space = 64;
        double zipf_s = 0.0;
        std::uint32_t payload_bytes = 16;
        std::int64_t value_range = 100;  // record values drawn from [1, value_range]
        Tick watermark_period = 20;
        Tick marker_period = 25;

        std::uint64_t record_budget() const
        {
            if (total_records != 0)
            {
                return total_records;
            }
            return rate * static_cast<std::uint64_t>(duration) / 1000;
        }
    };

    struct OperatorSpec
    {
        OperatorId id = 0;
        std::string name;
        OpKind kind = OpKind::Sink;
        std::uint32_t parallelism = 1;
        // operator-specific knobs
        std::uint32_t emit_every = 1;   // keyed sum: emit (key, sum, count) cadence
        Tick window_size = 10;          // sliding window
        Tick window_slide = 5;
    };

    struct EdgeSpec
    {
        OperatorId from = 0;
        OperatorId to = 0;
        Partitioning partitioning = Partitioning::Forward;
    };

    struct JobSpec
    {
        std::string name = "job";
        std::uint32_t num_keygroups = 32;
        std::uint32_t channel_capacity = 1000;
        Tick net_latency = 1;
        std::uint32_t latency_jitter = 0;
        Tick proc_interval = 1;
        Tick extract_interval = 2;
        std::uint64_t seed = 1;
        WorkloadConfig workload;
        std::vector<OperatorSpec> operators;
        std::vector<EdgeSpec> edges;

        OperatorId operator_id(const std::string &name) const;
    };

    // Parses the line-based key-value job document. Unknown keys are rejected.
    //
    //   name my_job
    //   num_keygroups 32
    //   seed 7
    //   operator gen generator parallelism=1
    //   operator agg keyed_sum parallelism=2 emit_every=1
    //   operator out sink parallelism=1
    //   edge gen agg keyed
    //   edge agg out forward
    JobSpec parse_job_spec(const std::string &text);

    struct DataflowGraph
    {
        JobSpec spec;
        std::vector<OperatorId> sources;
        std::vector<OperatorId> sinks;
        // adjacency by operator id
        std::map<OperatorId, std::vector<EdgeSpec>> out_edges;
        std::map<OperatorId, std::vector<EdgeSpec>> in_edges;

        bool stateful(OperatorId op) const
        {
            const OpKind k = spec.operators.at(op).kind;
            return k == OpKind::KeyedSum || k == OpKind::SlidingWindow;
        }
    };

    // Validates and assembles the dataflow description: rejects cycles and
    // keyed operators whose parallelism exceeds the key-group count.
    DataflowGraph build_graph(const JobSpec &spec);

    // Canonical 3-operator pipeline used by the benchmark scenarios.
    JobSpec default_pipeline(OpKind stateful_kind, std::uint32_t parallelism,
                             std::uint32_t num_keygroups, std::uint64_t seed);
}
