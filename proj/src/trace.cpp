#include "rill/trace.hpp"

#include <ostream>
#include <sstream>

namespace rill
{
    const char *tk_name(Tk k) noexcept
    {
        switch (k)
        {
        case Tk::Emit: return "emit";
        case Tk::Deliver: return "deliver";
        case Tk::Apply: return "apply";
        case Tk::MarkerSample: return "marker_sample";
        case Tk::Inject: return "inject";
        case Tk::Trigger: return "trigger";
        case Tk::Confirm: return "confirm";
        case Tk::ReroutedConfirmEv: return "rerouted_confirm";
        case Tk::ChunkEmit: return "chunk_emit";
        case Tk::ChunkInstall: return "chunk";
        case Tk::Reroute: return "reroute";
        case Tk::EpochFlip: return "epoch_flip";
        case Tk::SuspendBegin: return "suspend_begin";
        case Tk::SuspendEnd: return "suspend_end";
        case Tk::Activate: return "activate";
        case Tk::RouteUpdate: return "route_update";
        case Tk::SessionStart: return "session_start";
        case Tk::SessionEnd: return "session_end";
        case Tk::SubscaleDone: return "subscale_done";
        case Tk::CkptInject: return "ckpt_inject";
        case Tk::CkptBarrier: return "ckpt_barrier";
        case Tk::CkptComplete: return "ckpt_complete";
        case Tk::FusedSignal: return "fused_signal";
        case Tk::FetchRequest: return "fetch_request";
        case Tk::SubkgMove: return "subkg_move";
        case Tk::Halt: return "halt";
        case Tk::Resume: return "resume";
        case Tk::WatermarkFire: return "watermark_fire";
        case Tk::Park: return "park";
        case Tk::SessionTerminated: return "session_terminated";
        }
        return "unknown";
    }

    void TraceLog::write_jsonl(std::ostream &os) const
    {
        for (const auto &e : m_events)
        {
            os << "{\"tick\":" << e.tick
               << ",\"instance\":" << e.instance
               << ",\"kind\":\"" << tk_name(e.kind)
               << "\",\"seq_id\":" << e.seq
               << ",\"detail\":{\"a\":" << e.a
               << ",\"b\":" << e.b
               << ",\"c\":" << e.c
               << "}}\n";
        }
    }

    std::string TraceLog::to_jsonl() const
    {
        std::ostringstream os;
        write_jsonl(os);
        return os.str();
    }
}
