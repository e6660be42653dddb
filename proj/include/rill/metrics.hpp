#pragma once

#include "rill/engine.hpp"
#include "rill/trace.hpp"
#include "rill/types.hpp"

#include <map>
#include <set>
#include <string>
#include <vector>

namespace rill
{
    struct MetricsInput
    {
        std::set<InstanceId> scaling_instances;
        Tick run_end = 0;
        Tick stab_window = 2000;      // virtual-time stand-in for the wall-clock rule
        double stab_threshold = 1.10; // latency within 110% of the pre-scaling level
        Tick throughput_bucket = 200;
    };

    struct MetricsReport
    {
        Tick l_total = 0;
        Tick l_propagation = 0;  // signal injection -> first state migration, summed
        Tick l_suspension = 0;   // cumulative suspension at scaling instances
        double l_dependency = 0; // mean injection -> chunk emission across key-groups
        double l_other = 0;      // residual of the identity
        std::vector<std::pair<Tick, Tick>> latency_series;
        std::vector<std::pair<Tick, std::uint64_t>> throughput_series;
        Tick scaling_duration = 0;
        Tick scaling_start = -1;
        Tick peak_latency = 0;
        double avg_latency = 0;
        std::map<KeyGroup, std::uint32_t> migrations_per_kg;
        std::map<std::pair<KeyGroup, std::int32_t>, std::uint32_t> subkg_moves;
        std::uint64_t reroute_count = 0;
        std::vector<std::pair<Tick, Tick>> suspension_events; // (begin, end)
        std::uint64_t suspension_event_count = 0;
        Tick downtime = 0; // stop-restart halt window

        // identity: l_total = l_p + l_s + l_d + l_o, with l_o the residual
        double identity_gap() const
        {
            return static_cast<double>(l_total) -
                   (static_cast<double>(l_propagation) + static_cast<double>(l_suspension) +
                    l_dependency + l_other);
        }

        std::string to_string() const; // deterministic rendering
    };

    MetricsReport compute_metrics(const TraceLog &trace, const MetricsInput &input);

    struct EquivalenceVerdict
    {
        bool per_key_state_equal = false;
        bool per_channel_order_equal = false;
        bool exactly_once = false;
        bool authoritative = true;
        std::vector<std::string> diffs;

        bool all_pass() const
        {
            return per_key_state_equal && per_channel_order_equal && exactly_once;
        }
    };

    // Compares a run against the ground-truth run of the same workload: final
    // per-key state, per-(key, origin channel) applied order, and the
    // exactly-once census of the candidate itself.
    EquivalenceVerdict equivalence_check(const RunResult &candidate, const RunResult &oracle);

    // Trace audits -----------------------------------------------------------

    // No data record enqueued after a watermark is delivered before it, per
    // channel.
    bool watermark_safety_holds(const TraceLog &trace, std::vector<std::string> *violations = nullptr);

    // Barriers and chunks of one subscale never touch another subscale's
    // state: every protocol trace row carries its own subscale id.
    bool subscale_isolation_holds(const TraceLog &trace, std::vector<std::string> *violations = nullptr);

    // At most one instance applies data against a key-group at any tick.
    bool single_reader_holds(const TraceLog &trace, std::vector<std::string> *violations = nullptr);

    std::uint64_t count_events(const TraceLog &trace, Tk kind);
}
