#pragma once

#include "rill/types.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace rill
{
    enum class Tk : std::uint8_t
    {
        Emit,            // source emitted a data record        a=channel? (unused) b=key hash
        Deliver,         // message left a queue for handling   a=channel b=arrival_index c=kind
        Apply,           // data record applied to keyed state  a=origin b=keygroup
        MarkerSample,    // sink latency sample                 a=latency b=emit tick
        Inject,          // subscale command issued             a=subscale
        Trigger,         // trigger barrier handled             a=subscale
        Confirm,         // confirm barrier handled at source   a=subscale b=channel
        ReroutedConfirmEv, // rerouted confirm at target        a=subscale b=channel
        ChunkEmit,       // state chunk left the source         a=subscale b=keygroup
        ChunkInstall,    // state chunk installed at target     a=subscale b=keygroup
        Reroute,         // record sent down the migration path a=subscale b=keygroup
        EpochFlip,       // channel epoch preceding->following  a=subscale b=channel
        SuspendBegin,    // processing suspended                a=reason
        SuspendEnd,      //                                     a=span
        Activate,        // key-group became active             a=subscale b=keygroup
        RouteUpdate,     // routing table updated               a=version
        SessionStart,    // scaling session started             a=session b=protocol
        SessionEnd,      //                                     a=session
        SubscaleDone,    //                                     a=subscale
        CkptInject,      //                                     a=checkpoint id
        CkptBarrier,     // barrier handled at an instance      a=checkpoint id b=channel
        CkptComplete,    //                                     a=checkpoint id
        FusedSignal,     // integrated checkpoint+trigger+confirm  a=checkpoint id b=subscale
        FetchRequest,    // fetch-on-demand request             a=keygroup b=subkg
        SubkgMove,       // sub-key-group transferred           a=keygroup b=subkg c=target
        Halt,            // stop-restart downtime begins
        Resume,          // downtime ends                       a=downtime ticks
        WatermarkFire,   // window fired                        a=window start b=count
        Park,            // record waiting on a remote sub-kg   a=keygroup b=subkg
        SessionTerminated, // superseded by a newer request     a=session
    };

    const char *tk_name(Tk k) noexcept;

    struct TraceEvent
    {
        Tick tick = 0;
        InstanceId instance = kNoInstance;
        Tk kind = Tk::Emit;
        SeqId seq = 0;
        std::int64_t a = 0;
        std::int64_t b = 0;
        std::int64_t c = 0;

        bool operator==(const TraceEvent &) const = default;
    };

    class TraceLog
    {
    public:
        void add(Tick tick, InstanceId inst, Tk kind, SeqId seq = 0,
                 std::int64_t a = 0, std::int64_t b = 0, std::int64_t c = 0)
        {
            m_events.push_back(TraceEvent{tick, inst, kind, seq, a, b, c});
        }

        const std::vector<TraceEvent> &events() const noexcept { return m_events; }
        std::size_t size() const noexcept { return m_events.size(); }
        void clear() { m_events.clear(); }

        // Append-only JSON-lines rendering; deterministic byte-for-byte given
        // an identical event sequence.
        void write_jsonl(std::ostream &os) const;
        std::string to_jsonl() const;

    private:
        std::vector<TraceEvent> m_events;
    };
}
