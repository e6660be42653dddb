#include "rill/bench.hpp"

#include <sstream>

namespace rill
{
    ScaleOptions options_for(Protocol protocol, const ScaleOptions &base, bool force_scheduling)
    {
        ScaleOptions o = base;
        if (protocol != Protocol::Drrs && !force_scheduling)
        {
            o.inter_channel_scheduling = false;
            o.intra_channel_scheduling = false;
        }
        if (protocol != Protocol::Drrs)
        {
            o.max_subscale_size = 0;
        }
        return o;
    }

    Scenario keyed_sum_scenario(std::uint64_t seed, std::uint32_t parallelism,
                                std::uint32_t num_keygroups)
    {
        Scenario s;
        s.name = "keyed_sum";
        s.job = default_pipeline(OpKind::KeyedSum, parallelism, num_keygroups, seed);
        s.job.workload.rate = 2000;
        s.job.workload.duration = 12000;
        s.job.workload.key_space = 256;
        s.job.workload.zipf_s = 1.0;
        return s;
    }

    Scenario window_scenario(std::uint64_t seed, std::uint32_t parallelism,
                             std::uint32_t num_keygroups)
    {
        Scenario s;
        s.name = "window";
        s.job = default_pipeline(OpKind::SlidingWindow, parallelism, num_keygroups, seed);
        s.job.operators[1].window_size = 40;
        s.job.operators[1].window_slide = 20;
        s.job.workload.rate = 1500;
        s.job.workload.duration = 10000;
        s.job.workload.key_space = 128;
        s.job.workload.zipf_s = 0.5;
        return s;
    }

    RunOutput run_scenario(const Scenario &scenario)
    {
        RunOutput out;
        out.engine = std::make_unique<Engine>(build_graph(scenario.job), scenario.options);
        for (const auto &req : scenario.requests)
        {
            out.engine->add_scale_request(req);
        }
        for (const auto &[tick, id] : scenario.checkpoints)
        {
            out.engine->schedule_checkpoint(tick, id);
        }
        out.engine->run();

        MetricsInput mi;
        mi.run_end = out.engine->now();
        if (!scenario.requests.empty())
        {
            for (InstanceId id : out.engine->slots_of(scenario.requests.front().op))
            {
                if (id != kNoInstance)
                {
                    mi.scaling_instances.insert(id);
                }
            }
            // instances retired by a scale-in are still accountable
            for (const auto &s : out.engine->sessions())
            {
                for (InstanceId id : s.draining_instances)
                {
                    mi.scaling_instances.insert(id);
                }
            }
        }
        out.metrics = compute_metrics(out.engine->trace(), mi);
        out.result = out.engine->take_result();
        return out;
    }

    RunOutput run_oracle(Scenario scenario)
    {
        scenario.requests.clear();
        scenario.checkpoints.clear();
        return run_scenario(scenario);
    }

    std::string metrics_csv_header()
    {
        return "scenario,protocol,seed,peak_latency,avg_latency,scaling_duration,"
               "L_p,L_s,L_d,L_o,reroutes,migrations";
    }

    std::string metrics_csv_row(const std::string &scenario, Protocol protocol,
                                std::uint64_t seed, const MetricsReport &m)
    {
        std::uint64_t migrations = 0;
        for (const auto &[kg, n] : m.migrations_per_kg)
        {
            migrations += n;
        }
        for (const auto &[key, n] : m.subkg_moves)
        {
            migrations += n;
        }
        char buf[512];
        std::snprintf(buf, sizeof(buf), "%s,%s,%llu,%lld,%.6f,%lld,%lld,%lld,%.6f,%.6f,%llu,%llu",
                      scenario.c_str(), protocol_name(protocol),
                      static_cast<unsigned long long>(seed),
                      static_cast<long long>(m.peak_latency), m.avg_latency,
                      static_cast<long long>(m.scaling_duration),
                      static_cast<long long>(m.l_propagation),
                      static_cast<long long>(m.l_suspension), m.l_dependency, m.l_other,
                      static_cast<unsigned long long>(m.reroute_count),
                      static_cast<unsigned long long>(migrations));
        return std::string(buf);
    }
}
