#include "rill/engine.hpp"

#include "rill/error.hpp"

#include <algorithm>

namespace rill
{
    // ---- stop / checkpoint / restart -----------------------------------------

    void Engine::dispatch_stop_restart(SessionState &s)
    {
        s.halt_tick = m_now;
        m_trace.add(m_now, kCoordinator, Tk::Halt, 0, s.id);
        for (auto &instp : m_instances)
        {
            if (!instp->removed &&
                (m_graph.spec.operators[instp->op].kind == OpKind::Generator ||
                 m_graph.spec.operators[instp->op].kind == OpKind::Scripted))
            {
                instp->gen.paused = true;
            }
        }
        push_event(m_now + 1, kCoordinator, EvKind::Quiesce, s.id);
    }

    void Engine::on_quiesce(std::uint32_t session_id)
    {
        SessionState *s = session_by_id(session_id);
        if (s == nullptr || !s->active)
        {
            return;
        }
        bool quiet = true;
        for (const auto &ch : m_channels)
        {
            if (!ch->closed &&
                (ch->queued() != 0 || ch->in_transit != 0 || !ch->output_cache.empty()))
            {
                quiet = false;
                break;
            }
        }
        if (!quiet)
        {
            push_event(m_now + 1, kCoordinator, EvKind::Quiesce, session_id);
            return;
        }

        // global state is fully settled: move key-groups wholesale, update all
        // routing, then resume the sources
        for (const auto &mig : s->plan.migrations)
        {
            Instance &src = *m_instances[mig.source];
            Instance &dst = *m_instances[mig.target];
            auto &sg = src.store.groups_mut();
            auto git = sg.find(mig.kg);
            KeyedStateStore::GroupState moved;
            if (git != sg.end())
            {
                moved = std::move(git->second);
                sg.erase(git);
            }
            moved.status = KgStatus::Local;
            moved.installed = true;
            dst.store.groups_mut()[mig.kg] = std::move(moved);
            m_trace.add(m_now, dst.id, Tk::ChunkInstall, 0, -1, mig.kg);
        }
        update_predecessor_routing(s->op, s->plan.owner_after);

        for (auto &instp : m_instances)
        {
            if (!instp->removed && instp->gen.paused)
            {
                instp->gen.paused = false;
                schedule_emit(*instp, m_now);
            }
        }
        const Tick downtime = m_now - s->halt_tick;
        m_trace.add(m_now, kCoordinator, Tk::Resume, 0, downtime);
        finalize_scaling(*s);
    }

    // ---- unbound oracle --------------------------------------------------------

    void Engine::dispatch_unbound(SessionState &s)
    {
        m_result.authoritative = false;
        update_predecessor_routing(s.op, s.plan.owner_after);
        for (InstanceId id : m_slots[s.op])
        {
            if (id != kNoInstance && !m_instances[id]->removed)
            {
                m_instances[id]->universal = true;
            }
        }
        s.chunks_expected = static_cast<std::uint32_t>(s.plan.migrations.size());
        for (auto &sub : s.subscales)
        {
            sub.phase = SubscalePhase::Triggered;
            s.dispatched++;
            s.injected_at[sub.id] = m_now;
            m_trace.add(m_now, kCoordinator, Tk::Inject, 0, sub.id, sub.source, sub.target);
            register_subscale_at_instances(s, sub);
            Instance &src = *m_instances[sub.source];
            SubscaleView &sv = src.subscales.at(sub.id);
            sv.extraction_started = true;
            sv.sub.phase = SubscalePhase::Migrating;
            // no signals travel at all: extraction starts at the request tick
            ensure_path(src, sv);
            push_event(m_now, src.id, EvKind::ExtractStep, 0, sub.id);
        }
    }

    // ---- generalized on-the-fly scaling (sync barrier + fluid / batch) ---------

    void Engine::dispatch_otfs(SessionState &s)
    {
        s.sync_cutoff = m_channel_order;
        s.chunks_expected = static_cast<std::uint32_t>(s.plan.migrations.size());
        for (auto &sub : s.subscales)
        {
            sub.phase = SubscalePhase::Triggered;
            s.dispatched++;
            s.injected_at[sub.id] = m_now;
            m_trace.add(m_now, kCoordinator, Tk::Inject, 0, sub.id, sub.source, sub.target);
            register_subscale_at_instances(s, sub);
            // sender-side alignment: targets have no epochs to wait on
            Instance &tgt = *m_instances[sub.target];
            SubscaleView &tv = tgt.subscales.at(sub.id);
            tv.epoch.clear();
            tv.pending_epochs = 0;
        }

        // the scaling signal is injected at the graph sources and propagates
        // through the topology; predecessors update routing before forwarding
        for (OperatorId src_op : m_graph.sources)
        {
            for (InstanceId id : m_slots[src_op])
            {
                if (id == kNoInstance || m_instances[id]->removed)
                {
                    continue;
                }
                Instance &inst = *m_instances[id];
                if (inst.routing.count(s.op) != 0)
                {
                    const std::uint64_t v = inst.routing.at(s.op).apply_update(s.plan.owner_after);
                    m_trace.add(m_now, id, Tk::RouteUpdate, 0, static_cast<std::int64_t>(v));
                }
                StreamMessage sb;
                sb.kind = MsgKind::ConfirmBarrier;
                sb.carries_trigger = true; // coupled scaling signal
                sb.checkpoint_id = s.id;
                sb.seq_id = next_seq(inst);
                sb.origin = id;
                broadcast_downstream(inst, std::move(sb));
            }
        }
    }

    void Engine::handle_sync_barrier(Instance &inst, ChannelId ch, StreamMessage &&msg)
    {
        SessionState *s = session_by_id(static_cast<std::uint32_t>(msg.checkpoint_id));
        if (s == nullptr)
        {
            raise(Errc::ProtocolError, "sync barrier for unknown session");
        }
        if (!inst.alignment)
        {
            begin_alignment(inst, Alignment::Kind::SyncBarrier, msg.checkpoint_id);
        }
        inst.alignment->arrived.insert(ch);
        m_trace.add(m_now, inst.id, Tk::CkptBarrier, msg.seq_id, -msg.checkpoint_id - 1, ch);
        if (inst.alignment->complete())
        {
            otfs_alignment_complete(inst, msg.checkpoint_id);
        }
    }

    void Engine::otfs_alignment_complete(Instance &inst, std::int64_t session_id)
    {
        SessionState *s = session_by_id(static_cast<std::uint32_t>(session_id));
        inst.alignment.reset();

        // predecessors of the scaling operator update routing before forwarding
        if (s != nullptr && inst.routing.count(s->op) != 0)
        {
            const std::uint64_t v = inst.routing.at(s->op).apply_update(s->plan.owner_after);
            m_trace.add(m_now, inst.id, Tk::RouteUpdate, 0, static_cast<std::int64_t>(v));
        }

        if (!inst.outputs.empty() && m_graph.spec.operators[inst.op].kind != OpKind::Sink)
        {
            StreamMessage sb;
            sb.kind = MsgKind::ConfirmBarrier;
            sb.carries_trigger = true;
            sb.checkpoint_id = session_id;
            sb.seq_id = next_seq(inst);
            sb.origin = inst.id;
            broadcast_downstream(inst, std::move(sb));
        }

        // migration begins only after this instance's own alignment
        Tick offset = 0;
        for (auto &[sid, sv] : inst.subscales)
        {
            if (sv.sub.source != inst.id || sv.extraction_started)
            {
                continue;
            }
            sv.extraction_started = true;
            sv.sub.phase = SubscalePhase::Migrating;
            ensure_path(inst, sv);
            push_event(m_now + offset, inst.id, EvKind::ExtractStep, 0, sid);
            offset += static_cast<Tick>(sv.sub.keygroups.size()) * m_graph.spec.extract_interval;
        }
        process_deferred_signals(inst);
        wake(inst.id);
    }

    // ---- fetch-on-demand ---------------------------------------------------------

    void Engine::dispatch_fod(SessionState &s)
    {
        const auto preds = predecessor_instances(s.op);
        s.fod_pending_updates = static_cast<std::uint32_t>(preds.size());
        Tick stagger = 0;
        for (InstanceId p : preds)
        {
            push_event(m_now + stagger, kCoordinator, EvKind::FodRouteUpdate, s.id, p);
            stagger += m_options.fod_update_stagger;
        }

        for (auto &sub : s.subscales)
        {
            sub.phase = SubscalePhase::Triggered;
            s.dispatched++;
            s.injected_at[sub.id] = m_now;
            m_trace.add(m_now, kCoordinator, Tk::Inject, 0, sub.id, sub.source, sub.target);
        }

        // hierarchical state: every migrating key-group splits into sub-groups;
        // sources hold all fragments at the start
        for (const auto &mig : s.plan.migrations)
        {
            Instance &src = *m_instances[mig.source];
            Instance &dst = *m_instances[mig.target];
            for (std::uint32_t f = 0; f < m_options.fetch_fanout; ++f)
            {
                src.subkg_local[{mig.kg, static_cast<std::int32_t>(f)}] = true;
                dst.subkg_local[{mig.kg, static_cast<std::int32_t>(f)}] = false;
                s.subkg_holder[{mig.kg, static_cast<std::int32_t>(f)}] = mig.source;
            }
        }

        // early background migration: one walker per source instance
        std::set<InstanceId> sources;
        for (const auto &mig : s.plan.migrations)
        {
            sources.insert(mig.source);
        }
        for (InstanceId src : sources)
        {
            push_event(m_now + m_graph.spec.net_latency + 2, src, EvKind::FodPush, s.id);
        }
    }

    void Engine::on_fod_route_update(std::uint32_t session_id, InstanceId pred)
    {
        SessionState *s = session_by_id(session_id);
        if (s == nullptr || !s->active)
        {
            return;
        }
        Instance &p = *m_instances[pred];
        const std::uint64_t v = p.routing.at(s->op).apply_update(s->plan.owner_after);
        m_trace.add(m_now, pred, Tk::RouteUpdate, 0, static_cast<std::int64_t>(v));
        if (s->fod_pending_updates > 0)
        {
            s->fod_pending_updates--;
        }
        fod_maybe_complete(*s);
    }

    bool Engine::fod_record_local(const Instance &inst, const StreamMessage &msg) const
    {
        auto it = inst.subkg_local.find({msg.keygroup, subkg_of(msg.key, m_options.fetch_fanout)});
        if (it != inst.subkg_local.end())
        {
            return it->second;
        }
        // untracked group: plain ownership
        return inst.store.owns(msg.keygroup) &&
               (inst.store.readable(msg.keygroup) ||
                inst.store.status(msg.keygroup) == KgStatus::Incoming);
    }

    bool Engine::fod_visible_pending(const Instance &inst, KeyGroup kg, std::int32_t subkg) const
    {
        for (ChannelId chid : inst.inputs)
        {
            const Channel &c = *m_channels[chid];
            for (const auto &m : c.in_normal)
            {
                if (m.kind == MsgKind::Data && m.keygroup == kg &&
                    subkg_of(m.key, m_options.fetch_fanout) == subkg)
                {
                    return true;
                }
            }
        }
        return false;
    }

    ChannelId Engine::ensure_service_channel(InstanceId from, InstanceId to)
    {
        auto it = m_channel_index.find({from, to});
        if (it != m_channel_index.end())
        {
            return it->second;
        }
        return create_channel(from, to, false, kNoSubscale);
    }

    void Engine::fod_issue_fetch(Instance &inst, KeyGroup kg, std::int32_t subkg)
    {
        const std::pair<KeyGroup, std::int32_t> key{kg, subkg};
        if (inst.fetch_outstanding.count(key) != 0)
        {
            return;
        }
        inst.fetch_outstanding.insert(key);
        m_trace.add(m_now, inst.id, Tk::FetchRequest, 0, kg, subkg);
        SessionState *s = active_session(inst.op);
        if (s == nullptr)
        {
            return;
        }
        push_event(m_now + 1, kCoordinator, EvKind::FodFetch, s->id, inst.id,
                   (static_cast<std::int64_t>(kg) << 32) | static_cast<std::uint32_t>(subkg));
    }

    void Engine::on_fod_fetch(InstanceId requester, std::uint32_t session_id, KeyGroup kg,
                              std::int32_t subkg)
    {
        SessionState *s = session_by_id(session_id);
        if (s == nullptr || !s->active)
        {
            return;
        }
        auto hit = s->subkg_holder.find({kg, subkg});
        if (hit == s->subkg_holder.end() || hit->second == requester)
        {
            return;
        }
        StreamMessage timers;
        timers.event_time = -1; // first tick the holder saw no pending records
        timers.emitted_at = m_now; // request age origin, for the liveness backstop
        push_event(m_now + 1, hit->second, EvKind::FodGrant, session_id, requester,
                   (static_cast<std::int64_t>(kg) << 32) | static_cast<std::uint32_t>(subkg),
                   std::move(timers));
    }

    void Engine::on_fod_grant(InstanceId holder_id, std::uint32_t session_id, KeyGroup kg,
                              std::int32_t subkg, InstanceId requester, Tick first_clear,
                              Tick age0)
    {
        SessionState *s = session_by_id(session_id);
        const std::pair<KeyGroup, std::int32_t> key{kg, subkg};
        Instance &holder = *m_instances[holder_id];
        // age0 == -2 marks the background push walker's chain; when that chain
        // ends at this instance the walker resumes
        const bool walker = age0 == -2;
        auto resume_walker = [&]
        {
            if (walker && s != nullptr && s->active)
            {
                push_event(m_now + m_graph.spec.extract_interval, holder_id, EvKind::FodPush,
                           session_id);
            }
        };
        if (s == nullptr || !s->active)
        {
            return;
        }

        auto requeue = [&](Tick delay, Tick clear_mark)
        {
            StreamMessage timers;
            timers.event_time = clear_mark;
            timers.emitted_at = age0;
            push_event(m_now + delay, holder_id, EvKind::FodGrant, session_id, requester,
                       (static_cast<std::int64_t>(kg) << 32) | static_cast<std::uint32_t>(subkg),
                       std::move(timers));
        };

        auto lit = holder.subkg_local.find(key);
        if (lit == holder.subkg_local.end() || !lit->second)
        {
            // moved on: forward the request to the current holder
            auto hit = s->subkg_holder.find(key);
            if (hit != s->subkg_holder.end() && hit->second != holder_id &&
                hit->second != requester)
            {
                StreamMessage timers;
                timers.event_time = -1;
                timers.emitted_at = age0 == -2 ? -1 : age0;
                push_event(m_now + 1, hit->second, EvKind::FodGrant, session_id, requester,
                           (static_cast<std::int64_t>(kg) << 32) | static_cast<std::uint32_t>(subkg),
                           std::move(timers));
            }
            resume_walker();
            return;
        }

        const bool forced = age0 >= 0 && (m_now - age0) > m_options.fod_backstop;
        if (!forced)
        {
            // the holder surrenders a fragment only once it sees no pending
            // records for it, re-checked across the transit window
            if (fod_visible_pending(holder, kg, subkg))
            {
                requeue(1, -1);
                return;
            }
            const Tick settle = m_graph.spec.net_latency + 1;
            if (first_clear < 0)
            {
                requeue(settle, m_now);
                return;
            }
            if (m_now - first_clear < settle)
            {
                requeue(1, first_clear);
                return;
            }
        }

        StateChunk chunk = holder.store.extract_subkg(kg, subkg, m_options.fetch_fanout,
                                                      holder_id, requester);
        holder.subkg_local[key] = false;
        s->subkg_holder[key] = requester;
        s->subkg_moves[key]++;
        m_trace.add(m_now, holder_id, Tk::SubkgMove, 0, kg, subkg, requester);

        StreamMessage cm;
        cm.kind = MsgKind::StateChunk;
        cm.keygroup = kg;
        cm.chunk = chunk.body;
        cm.seq_id = next_seq(holder);
        cm.origin = holder_id;
        emit_on(*m_channels[ensure_service_channel(holder_id, requester)], std::move(cm),
                Lane::Priority);
        resume_walker();
    }

    void Engine::on_fod_push(InstanceId inst_id, std::uint32_t session_id)
    {
        SessionState *s = session_by_id(session_id);
        if (s == nullptr || !s->active)
        {
            return;
        }
        Instance &inst = *m_instances[inst_id];
        // background early migration: one serialized grant chain per source,
        // walking fragments in ascending order toward their planned owners
        for (const auto &mig : s->plan.migrations)
        {
            if (mig.source != inst_id)
            {
                continue;
            }
            for (std::uint32_t f = 0; f < m_options.fetch_fanout; ++f)
            {
                const std::pair<KeyGroup, std::int32_t> key{mig.kg, static_cast<std::int32_t>(f)};
                auto lit = inst.subkg_local.find(key);
                if (lit == inst.subkg_local.end() || !lit->second)
                {
                    continue;
                }
                StreamMessage timers;
                timers.event_time = -1;
                timers.emitted_at = -2; // push-walker chain
                push_event(m_now, inst_id, EvKind::FodGrant, session_id, mig.target,
                           (static_cast<std::int64_t>(key.first) << 32) |
                               static_cast<std::uint32_t>(key.second),
                           std::move(timers));
                return;
            }
        }
        fod_maybe_complete(*s);
    }

    void Engine::fod_maybe_complete(SessionState &s)
    {
        if (!s.active || s.fod_pending_updates > 0)
        {
            return;
        }
        for (const auto &[key, holder] : s.subkg_holder)
        {
            const InstanceId planned = s.plan.owner_after.at(key.first);
            if (holder != planned)
            {
                return;
            }
            if (!m_instances[planned]->subkg_local.count(key) ||
                !m_instances[planned]->subkg_local.at(key))
            {
                return; // still in flight
            }
        }
        // everything settled at the planned owners: formalize ownership
        for (const auto &mig : s.plan.migrations)
        {
            Instance &src = *m_instances[mig.source];
            Instance &dst = *m_instances[mig.target];
            if (src.store.owns(mig.kg))
            {
                src.store.groups_mut().erase(mig.kg);
            }
            auto &g = dst.store.groups_mut()[mig.kg];
            g.status = KgStatus::Active;
            g.installed = true;
        }
        for (auto &sub : s.subscales)
        {
            if (sub.phase != SubscalePhase::Cancelled)
            {
                sub.phase = SubscalePhase::Completed;
            }
        }
        s.completed = s.dispatched;
        finalize_scaling(s);
    }
}
