#include "rill/metrics.hpp"

#include "rill/error.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <sstream>

namespace rill
{
    std::uint64_t count_events(const TraceLog &trace, Tk kind)
    {
        std::uint64_t n = 0;
        for (const auto &e : trace.events())
        {
            if (e.kind == kind)
            {
                ++n;
            }
        }
        return n;
    }

    MetricsReport compute_metrics(const TraceLog &trace, const MetricsInput &input)
    {
        MetricsReport r;

        std::map<std::int64_t, Tick> injected;          // subscale -> tick
        std::map<std::int64_t, Tick> first_chunk;       // subscale -> tick
        std::vector<std::pair<std::int64_t, Tick>> chunk_emits; // (subscale, tick)
        std::map<InstanceId, Tick> open_suspend;
        bool session_seen = false;
        bool session_needs_injects = false;
        Tick halt_at = -1;

        for (const auto &e : trace.events())
        {
            switch (e.kind)
            {
            case Tk::SessionStart:
                session_seen = true;
                session_needs_injects =
                    static_cast<Protocol>(e.b) != Protocol::StopRestart &&
                    static_cast<Protocol>(e.b) != Protocol::None;
                break;
            case Tk::Inject:
                injected.emplace(e.a, e.tick);
                if (r.scaling_start < 0)
                {
                    r.scaling_start = e.tick;
                }
                break;
            case Tk::Halt:
                halt_at = e.tick;
                if (r.scaling_start < 0)
                {
                    r.scaling_start = e.tick;
                }
                break;
            case Tk::Resume:
                r.downtime = e.a;
                break;
            case Tk::ChunkEmit:
                if (first_chunk.count(e.a) == 0)
                {
                    first_chunk[e.a] = e.tick;
                }
                chunk_emits.emplace_back(e.a, e.tick);
                break;
            case Tk::ChunkInstall:
                r.migrations_per_kg[static_cast<KeyGroup>(e.b)]++;
                break;
            case Tk::SubkgMove:
                r.subkg_moves[{static_cast<KeyGroup>(e.a), static_cast<std::int32_t>(e.b)}]++;
                break;
            case Tk::Reroute:
                r.reroute_count++;
                break;
            case Tk::SuspendBegin:
                if (input.scaling_instances.count(e.instance) != 0)
                {
                    open_suspend[e.instance] = e.tick;
                }
                break;
            case Tk::SuspendEnd:
                if (auto it = open_suspend.find(e.instance); it != open_suspend.end())
                {
                    r.suspension_events.emplace_back(it->second, e.tick);
                    open_suspend.erase(it);
                }
                break;
            case Tk::MarkerSample:
                r.latency_series.emplace_back(e.tick, e.a);
                break;
            case Tk::Emit:
            {
                const Tick bucket = (e.tick / input.throughput_bucket) * input.throughput_bucket;
                if (!r.throughput_series.empty() && r.throughput_series.back().first == bucket)
                {
                    r.throughput_series.back().second++;
                }
                else
                {
                    r.throughput_series.emplace_back(bucket, 1);
                }
                break;
            }
            default:
                break;
            }
        }
        for (const auto &[inst, began] : open_suspend)
        {
            r.suspension_events.emplace_back(began, input.run_end);
        }
        std::sort(r.suspension_events.begin(), r.suspension_events.end());
        r.suspension_event_count = r.suspension_events.size();
        (void)halt_at;

        if (session_seen && session_needs_injects && injected.empty())
        {
            raise(Errc::IncompleteTrace, "scaling session present but no injection events");
        }

        for (const auto &[sid, t0] : injected)
        {
            auto it = first_chunk.find(sid);
            if (it != first_chunk.end())
            {
                r.l_propagation += it->second - t0;
            }
        }
        if (!chunk_emits.empty())
        {
            double acc = 0;
            std::size_t n = 0;
            for (const auto &[sid, t] : chunk_emits)
            {
                auto it = injected.find(sid);
                if (it != injected.end())
                {
                    acc += static_cast<double>(t - it->second);
                    ++n;
                }
            }
            r.l_dependency = n == 0 ? 0.0 : acc / static_cast<double>(n);
        }
        for (const auto &[b, e] : r.suspension_events)
        {
            Tick lo = b;
            Tick hi = e;
            if (r.scaling_start >= 0)
            {
                lo = std::max(lo, r.scaling_start);
            }
            if (hi > lo)
            {
                r.l_suspension += hi - lo;
            }
        }

        // stabilization: from scaling start until latency stays within
        // threshold x pre-scaling average for a whole window
        if (r.scaling_start >= 0)
        {
            double pre_acc = 0;
            std::uint64_t pre_n = 0;
            for (const auto &[t, lat] : r.latency_series)
            {
                if (t < r.scaling_start && t >= r.scaling_start - input.stab_window)
                {
                    pre_acc += static_cast<double>(lat);
                    pre_n++;
                }
            }
            const double pre_avg = pre_n == 0 ? 0.0 : pre_acc / static_cast<double>(pre_n);
            const double limit = pre_avg * input.stab_threshold;

            Tick stable_at = input.run_end;
            if (pre_n > 0)
            {
                // earliest sample time from which every later sample within the
                // window stays under the limit
                Tick candidate = r.scaling_start;
                Tick last_bad = r.scaling_start - 1;
                for (const auto &[t, lat] : r.latency_series)
                {
                    if (t < r.scaling_start)
                    {
                        continue;
                    }
                    if (static_cast<double>(lat) > limit)
                    {
                        last_bad = t;
                    }
                }
                candidate = std::max(r.scaling_start, last_bad + 1);
                stable_at = candidate;
            }
            r.scaling_duration = std::max<Tick>(0, stable_at - r.scaling_start);

            double acc = 0;
            std::uint64_t n = 0;
            for (const auto &[t, lat] : r.latency_series)
            {
                if (t >= r.scaling_start && t <= r.scaling_start + std::max(r.scaling_duration, input.stab_window))
                {
                    acc += static_cast<double>(lat);
                    n++;
                    r.peak_latency = std::max(r.peak_latency, lat);
                }
            }
            r.avg_latency = n == 0 ? 0.0 : acc / static_cast<double>(n);
        }
        else
        {
            double acc = 0;
            for (const auto &[t, lat] : r.latency_series)
            {
                acc += static_cast<double>(lat);
                r.peak_latency = std::max(r.peak_latency, lat);
            }
            r.avg_latency = r.latency_series.empty()
                                ? 0.0
                                : acc / static_cast<double>(r.latency_series.size());
        }

        r.l_total = r.scaling_duration;
        r.l_other = static_cast<double>(r.l_total) -
                    static_cast<double>(r.l_propagation) -
                    static_cast<double>(r.l_suspension) - r.l_dependency;
        return r;
    }

    std::string MetricsReport::to_string() const
    {
        char buf[256];
        std::ostringstream os;
        std::snprintf(buf, sizeof(buf),
                      "l_total=%" PRId64 " l_p=%" PRId64 " l_s=%" PRId64
                      " l_d=%.6f l_o=%.6f duration=%" PRId64 " peak=%" PRId64 " avg=%.6f",
                      l_total, l_propagation, l_suspension, l_dependency, l_other,
                      scaling_duration, peak_latency, avg_latency);
        os << buf;
        os << " reroutes=" << reroute_count
           << " suspensions=" << suspension_event_count
           << " downtime=" << downtime << "\n";
        os << "migrations:";
        for (const auto &[kg, n] : migrations_per_kg)
        {
            os << " " << kg << ":" << n;
        }
        os << "\nsubkg_moves:";
        for (const auto &[key, n] : subkg_moves)
        {
            os << " " << key.first << "." << key.second << ":" << n;
        }
        os << "\nlatency:";
        for (const auto &[t, lat] : latency_series)
        {
            os << " " << t << ":" << lat;
        }
        os << "\nthroughput:";
        for (const auto &[t, n] : throughput_series)
        {
            os << " " << t << ":" << n;
        }
        os << "\n";
        return os.str();
    }

    EquivalenceVerdict equivalence_check(const RunResult &candidate, const RunResult &oracle)
    {
        EquivalenceVerdict v;
        v.authoritative = candidate.authoritative;

        v.per_key_state_equal = candidate.final_state == oracle.final_state;
        if (!v.per_key_state_equal)
        {
            std::size_t reported = 0;
            for (const auto &[key, val] : oracle.final_state)
            {
                auto it = candidate.final_state.find(key);
                if (it == candidate.final_state.end())
                {
                    if (reported++ < 5)
                        v.diffs.push_back("missing key " + key);
                }
                else if (it->second != val)
                {
                    if (reported++ < 5)
                        v.diffs.push_back("key " + key + " sum " +
                                          std::to_string(it->second.first) + " vs " +
                                          std::to_string(val.first));
                }
            }
            for (const auto &[key, val] : candidate.final_state)
            {
                if (oracle.final_state.count(key) == 0 && reported++ < 5)
                {
                    v.diffs.push_back("extra key " + key);
                }
            }
        }

        v.per_channel_order_equal = candidate.apply_log == oracle.apply_log;
        if (!v.per_channel_order_equal)
        {
            std::size_t reported = 0;
            for (const auto &[key, seqs] : oracle.apply_log)
            {
                auto it = candidate.apply_log.find(key);
                if (it == candidate.apply_log.end() || it->second != seqs)
                {
                    if (reported++ < 5)
                        v.diffs.push_back("apply order differs for origin " +
                                          std::to_string(key.first) + " key " + key.second);
                }
            }
        }

        auto census = [&](const RunResult &r, const char *tag)
        {
            std::vector<SeqId> emitted = r.emitted_seqs;
            std::vector<SeqId> applied = r.applied_seqs;
            std::sort(emitted.begin(), emitted.end());
            std::sort(applied.begin(), applied.end());
            if (emitted == applied)
            {
                return true;
            }
            v.diffs.push_back(std::string(tag) + ": emitted " +
                              std::to_string(emitted.size()) + " applied " +
                              std::to_string(applied.size()));
            return false;
        };
        v.exactly_once = census(candidate, "candidate") && census(oracle, "oracle");
        return v;
    }

    bool watermark_safety_holds(const TraceLog &trace, std::vector<std::string> *violations)
    {
        // per channel: no data delivery whose arrival index exceeds that of a
        // watermark delivered later
        std::map<std::int64_t, std::vector<std::pair<std::int64_t, MsgKind>>> per_channel;
        for (const auto &e : trace.events())
        {
            if (e.kind == Tk::Deliver)
            {
                per_channel[e.a].emplace_back(e.b, static_cast<MsgKind>(e.c));
            }
        }
        bool ok = true;
        for (const auto &[ch, seq] : per_channel)
        {
            std::int64_t max_data_idx = -1;
            for (const auto &[idx, kind] : seq)
            {
                if (kind == MsgKind::Data)
                {
                    max_data_idx = std::max(max_data_idx, idx);
                }
                else if (kind == MsgKind::Watermark)
                {
                    if (max_data_idx > idx)
                    {
                        ok = false;
                        if (violations != nullptr)
                        {
                            violations->push_back("channel " + std::to_string(ch) +
                                                  ": data with arrival index " +
                                                  std::to_string(max_data_idx) +
                                                  " delivered before watermark " +
                                                  std::to_string(idx));
                        }
                    }
                }
            }
        }
        return ok;
    }

    bool subscale_isolation_holds(const TraceLog &trace, std::vector<std::string> *violations)
    {
        // every protocol event names exactly one subscale; a key-group only
        // ever appears under a single subscale id within one session
        std::map<std::int64_t, std::set<std::int64_t>> kg_to_subscales;
        bool ok = true;
        for (const auto &e : trace.events())
        {
            if (e.kind == Tk::ChunkEmit || e.kind == Tk::ChunkInstall ||
                e.kind == Tk::Reroute || e.kind == Tk::Activate)
            {
                if (e.a < 0)
                {
                    continue; // baseline rows without a subscale
                }
                kg_to_subscales[e.b].insert(e.a);
            }
        }
        for (const auto &[kg, subs] : kg_to_subscales)
        {
            if (subs.size() > 1)
            {
                ok = false;
                if (violations != nullptr)
                {
                    violations->push_back("key-group " + std::to_string(kg) +
                                          " touched by " + std::to_string(subs.size()) +
                                          " subscales");
                }
            }
        }
        return ok;
    }

    bool single_reader_holds(const TraceLog &trace, std::vector<std::string> *violations)
    {
        // applications against one key-group must come from one instance at a
        // time: order apply events per group and require instance changes to
        // be separated by a chunk installation at the new instance
        std::map<std::int64_t, InstanceId> current;
        std::map<std::int64_t, std::set<InstanceId>> installed;
        bool ok = true;
        for (const auto &e : trace.events())
        {
            if (e.kind == Tk::ChunkInstall)
            {
                installed[e.b].insert(e.instance);
            }
            else if (e.kind == Tk::Apply)
            {
                auto it = current.find(e.b);
                if (it == current.end())
                {
                    current[e.b] = e.instance;
                }
                else if (it->second != e.instance)
                {
                    if (installed[e.b].count(e.instance) == 0)
                    {
                        ok = false;
                        if (violations != nullptr)
                        {
                            violations->push_back(
                                "key-group " + std::to_string(e.b) + " moved from instance " +
                                std::to_string(it->second) + " to " + std::to_string(e.instance) +
                                " without a state transfer");
                        }
                    }
                    it->second = e.instance;
                }
            }
        }
        return ok;
    }
}
