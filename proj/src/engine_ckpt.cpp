#include "rill/engine.hpp"

#include "rill/error.hpp"

#include <algorithm>

namespace rill
{
    CkptMergePlan merge_with_checkpoint(const Channel &toward_source)
    {
        CkptMergePlan plan;
        for (std::size_t i = 0; i < toward_source.output_cache.size(); ++i)
        {
            if (toward_source.output_cache[i].msg.kind == MsgKind::CheckpointBarrier)
            {
                plan.kind = CkptMergePlan::Kind::FuseIntoCached;
                plan.cache_pos = i;
            }
        }
        return plan;
    }

    void Engine::schedule_checkpoint(Tick at, std::int64_t id)
    {
        push_event(at, kCoordinator, EvKind::CkptInject, 0, id);
    }

    void Engine::on_ckpt_inject(std::int64_t requested_id)
    {
        // fault tolerance and baseline scaling never run concurrently; a
        // checkpoint requested mid-session waits for the session to finish
        for (const auto &s : m_sessions)
        {
            if (s.active && s.protocol != Protocol::Drrs && s.protocol != Protocol::None)
            {
                push_event(m_now + 5, kCoordinator, EvKind::CkptInject, 0, requested_id);
                return;
            }
        }

        const std::int64_t id = requested_id >= 0 ? requested_id
                                                  : static_cast<std::int64_t>(++m_ckpt_counter);
        if (m_snapshots.count(id) != 0)
        {
            raise(Errc::DuplicateCheckpoint, "checkpoint " + std::to_string(id) + " already exists");
        }
        m_ckpt_counter = std::max<std::uint64_t>(m_ckpt_counter, static_cast<std::uint64_t>(id));

        Snapshot &snap = m_snapshots[id];
        snap.checkpoint_id = id;
        snap.injected_at = m_now;
        snap.slots = m_slots;
        snap.sessions = m_sessions;
        snap.next_session_id = m_next_session;
        snap.next_subscale_id = m_next_subscale;
        snap.next_instance_id = m_next_instance;
        snap.next_channel_id = m_next_channel;
        snap.next_channel_order = m_channel_order; // alignment cutoff
        snap.ckpt_counter = m_ckpt_counter;
        for (const auto &ch : m_channels)
        {
            ChannelSnapshot cs;
            cs.id = ch->id;
            cs.sender = ch->sender;
            cs.receiver = ch->receiver;
            cs.sender_op = ch->sender_op;
            cs.receiver_op = ch->receiver_op;
            cs.latency = ch->latency;
            cs.capacity = ch->capacity;
            cs.is_migration_path = ch->is_migration_path;
            cs.path_subscale = ch->path_subscale;
            cs.created_order = ch->created_order;
            cs.closed = ch->closed;
            snap.channels.push_back(cs);
        }
        for (const auto &instp : m_instances)
        {
            if (!instp->removed)
            {
                snap.awaited.insert(instp->id);
            }
        }
        m_trace.add(m_now, kCoordinator, Tk::CkptInject, 0, id);

        // barriers start at the sources, whose own snapshot point is the
        // emission itself
        for (OperatorId src_op : m_graph.sources)
        {
            for (InstanceId sid : m_slots[src_op])
            {
                if (sid == kNoInstance || m_instances[sid]->removed)
                {
                    continue;
                }
                Instance &src = *m_instances[sid];
                snapshot_instance(src, id);
                StreamMessage cb;
                cb.kind = MsgKind::CheckpointBarrier;
                cb.checkpoint_id = id;
                cb.seq_id = next_seq(src);
                cb.origin = src.id;
                src.last_forwarded_ckpt = id;
                broadcast_downstream(src, std::move(cb));
            }
        }
        finish_checkpoint_if_done(id);
    }

    void Engine::handle_checkpoint_barrier(Instance &inst, ChannelId ch, StreamMessage &&msg)
    {
        const std::int64_t id = msg.checkpoint_id;
        auto sit = m_snapshots.find(id);
        if (sit == m_snapshots.end())
        {
            raise(Errc::ProtocolError, "barrier for unknown checkpoint " + std::to_string(id));
        }
        Snapshot &snap = sit->second;
        const bool already_done = std::any_of(snap.instances.begin(), snap.instances.end(),
                                              [&](const InstanceSnapshot &s)
                                              { return s.id == inst.id; });
        if (already_done)
        {
            m_trace.add(m_now, inst.id, Tk::CkptBarrier, msg.seq_id, id, -1); // late barrier
            return;
        }

        if (!inst.alignment)
        {
            begin_alignment(inst, Alignment::Kind::Checkpoint, id);
        }
        inst.alignment->expected.insert(ch); // a path created mid-flight still counts
        inst.alignment->arrived.insert(ch);
        m_trace.add(m_now, inst.id, Tk::CkptBarrier, msg.seq_id, id, ch);

        // an integrated signal releases its trigger and confirm right after the
        // checkpoint completes at this instance
        if (msg.carries_trigger)
        {
            StreamMessage tb;
            tb.kind = MsgKind::TriggerBarrier;
            tb.subscale_id = msg.subscale_id;
            tb.seq_id = msg.seq_id;
            tb.origin = msg.origin;
            inst.deferred_signals.push_back(std::move(tb));
        }
        if (msg.carries_confirm)
        {
            StreamMessage cb;
            cb.kind = MsgKind::ConfirmBarrier;
            cb.subscale_id = msg.subscale_id;
            cb.seq_id = msg.seq_id;
            cb.origin = msg.origin;
            inst.deferred_signals.push_back(std::move(cb));
        }

        if (inst.alignment->complete())
        {
            complete_alignment(inst);
        }
    }

    void Engine::begin_alignment(Instance &inst, Alignment::Kind kind, std::int64_t id)
    {
        Alignment a;
        a.kind = kind;
        a.id = id;
        std::uint64_t cutoff = m_channel_order;
        if (kind == Alignment::Kind::Checkpoint)
        {
            cutoff = m_snapshots.at(id).next_channel_order;
        }
        else if (SessionState *s = session_by_id(static_cast<std::uint32_t>(id)))
        {
            cutoff = s->sync_cutoff;
        }
        for (ChannelId chid : inst.inputs)
        {
            const Channel &c = *m_channels[chid];
            if (!c.closed && c.created_order < cutoff)
            {
                a.expected.insert(chid);
            }
        }
        inst.alignment = std::move(a);
    }

    void Engine::complete_alignment(Instance &inst)
    {
        const std::int64_t id = inst.alignment->id;
        if (inst.alignment->kind == Alignment::Kind::SyncBarrier)
        {
            otfs_alignment_complete(inst, id);
            return;
        }
        // scaling state rides inside snapshots: reroute buffers flush ahead of
        // the cut so in-transit data is fully represented on the path
        for (auto &[sid, sv] : inst.subscales)
        {
            if (sv.sub.source == inst.id)
            {
                flush_reroute(inst, sv);
            }
        }
        snapshot_instance(inst, id);
        forward_ckpt_barrier(inst, id);
        inst.alignment.reset();
        process_deferred_signals(inst);
        finish_checkpoint_if_done(id);
        wake(inst.id);
    }

    void Engine::forward_ckpt_barrier(Instance &inst, std::int64_t ckpt_id)
    {
        inst.last_forwarded_ckpt = ckpt_id;
        for (ChannelId chid : inst.outputs)
        {
            Channel &c = *m_channels[chid];
            if (c.closed)
            {
                continue;
            }
            StreamMessage cb;
            cb.kind = MsgKind::CheckpointBarrier;
            cb.checkpoint_id = ckpt_id;
            cb.seq_id = next_seq(inst);
            cb.origin = inst.id;
            emit_on(c, std::move(cb), c.is_migration_path ? Lane::Priority : Lane::Normal);
        }
    }

    void Engine::process_deferred_signals(Instance &inst)
    {
        if (inst.deferred_signals.empty())
        {
            return;
        }
        std::vector<StreamMessage> pending = std::move(inst.deferred_signals);
        inst.deferred_signals.clear();
        const ChannelId ch = inst.inputs.empty() ? kNoChannel : inst.inputs.front();
        for (auto &msg : pending)
        {
            handle_message(inst, ch, std::move(msg));
        }
    }

    void Engine::snapshot_instance(Instance &inst, std::int64_t ckpt_id)
    {
        Snapshot &snap = m_snapshots.at(ckpt_id);

        // scaling activity that postdates the checkpoint's coordinator cut is
        // excluded: the restored run either never sees that session or
        // re-dispatches still-pending subscales itself
        auto cut_phase = [&](std::int32_t sid) -> std::optional<SubscalePhase>
        {
            for (const auto &sess : snap.sessions)
            {
                auto it = sess.sub_index.find(sid);
                if (it != sess.sub_index.end())
                {
                    return sess.subscales[it->second].phase;
                }
            }
            return std::nullopt;
        };
        auto in_cut = [&](std::int32_t sid)
        {
            const auto phase = cut_phase(sid);
            return phase.has_value() && *phase != SubscalePhase::Pending;
        };

        InstanceSnapshot s;
        s.id = inst.id;
        s.op = inst.op;
        s.slot = inst.slot;
        s.draining = inst.draining;
        s.groups = inst.store.groups();
        // an Incoming group appears only because some session expects to move
        // state here; if no session inside the cut does, the mark is post-cut
        for (auto git = s.groups.begin(); git != s.groups.end();)
        {
            if (git->second.status == KgStatus::Incoming)
            {
                bool expected = false;
                for (const auto &sess : snap.sessions)
                {
                    auto oit = sess.plan.owner_after.find(git->first);
                    if (sess.active && oit != sess.plan.owner_after.end() &&
                        oit->second == inst.id)
                    {
                        expected = true;
                        break;
                    }
                }
                if (!expected)
                {
                    git = s.groups.erase(git);
                    continue;
                }
            }
            ++git;
        }
        s.channel_watermark = inst.channel_watermark;
        s.op_watermark = inst.op_watermark;
        const OpKind kind = m_graph.spec.operators[inst.op].kind;
        if (kind == OpKind::Generator || kind == OpKind::Scripted)
        {
            s.gen_rng = inst.gen.rng.save_state();
            s.gen_emitted = inst.gen.emitted;
            s.gen_next_watermark = inst.gen.next_watermark;
            s.gen_next_marker = inst.gen.next_marker;
            s.gen_script_pos = inst.gen.script_pos;
        }
        if (kind == OpKind::Sink)
        {
            s.sink_outputs = m_result.sink_outputs;
        }
        s.seq_counter = inst.seq_counter;
        s.rr_forward = inst.rr_forward;
        s.rr_marker = inst.rr_marker;
        s.rr_channel = inst.rr_channel;
        for (const auto &[kg, sid] : inst.kg_subscale)
        {
            if (in_cut(sid))
            {
                s.kg_subscale[kg] = sid;
            }
        }
        s.scale_aware = inst.scale_aware;
        s.universal = inst.universal;
        for (const auto &[op, table] : inst.routing)
        {
            s.routing_owners[op] = table.owners();
            s.routing_versions[op] = table.version();
        }
        for (const auto &sig : inst.deferred_signals)
        {
            if (sig.subscale_id == kNoSubscale || in_cut(sig.subscale_id))
            {
                s.deferred_signals.push_back(sig);
            }
        }
        for (const auto &[sid, sv] : inst.subscales)
        {
            if (!in_cut(sid))
            {
                continue;
            }
            SubscaleViewSnapshot vs;
            vs.sub = sv.sub;
            vs.extract_cursor = sv.extract_cursor;
            vs.extraction_started = sv.extraction_started;
            vs.extraction_done = sv.extraction_done;
            vs.source_drained_reported = sv.source_drained_reported;
            vs.confirms_seen = sv.confirms_seen;
            vs.confirms_expected = sv.confirms_expected;
            vs.moved_keys = sv.moved_keys;
            vs.epoch = sv.epoch;
            vs.pending_epochs = sv.pending_epochs;
            vs.pending_reroutes = sv.pending_reroutes;
            vs.installed_kgs = sv.installed_kgs;
            vs.active_kgs = sv.active_kgs;
            vs.target_done_reported = sv.target_done_reported;
            vs.path = sv.path;
            s.subscales[sid] = std::move(vs);
        }
        snap.instances.push_back(std::move(s));
    }

    void Engine::finish_checkpoint_if_done(std::int64_t id)
    {
        Snapshot &snap = m_snapshots.at(id);
        if (snap.complete)
        {
            return;
        }
        if (snap.instances.size() < snap.awaited.size())
        {
            return;
        }
        snap.complete = true;
        m_trace.add(m_now, kCoordinator, Tk::CkptComplete, 0, id);
    }

    const Snapshot &Engine::snapshot(std::int64_t checkpoint_id) const
    {
        auto it = m_snapshots.find(checkpoint_id);
        if (it == m_snapshots.end())
        {
            raise(Errc::IncompleteTrace, "no snapshot with id " + std::to_string(checkpoint_id));
        }
        return it->second;
    }

    bool Engine::has_snapshot(std::int64_t checkpoint_id) const
    {
        auto it = m_snapshots.find(checkpoint_id);
        return it != m_snapshots.end() && it->second.complete;
    }

    // ---- restore -------------------------------------------------------------

    Engine::Engine(DataflowGraph graph, ScaleOptions options, const Snapshot &snap)
        : m_graph(std::move(graph)), m_options(options),
          m_jitter_rng(derive_seed(m_graph.spec.seed, 0xc11a))
    {
        restore_from(snap);
    }

    void Engine::restore_from(const Snapshot &snap)
    {
        if (!snap.complete)
        {
            raise(Errc::IncompleteTrace, "snapshot is not complete");
        }
        m_now = snap.injected_at;
        m_slots = snap.slots;
        m_next_instance = snap.next_instance_id;
        m_next_channel = snap.next_channel_id;
        m_channel_order = snap.next_channel_order;
        m_sessions = snap.sessions;
        m_next_session = snap.next_session_id;
        m_next_subscale = snap.next_subscale_id;
        m_ckpt_counter = snap.ckpt_counter;

        // instance shells first (holes for ids not present in the snapshot)
        for (InstanceId id = 0; id < snap.next_instance_id; ++id)
        {
            auto inst = std::make_unique<Instance>();
            inst->id = id;
            inst->removed = true;
            m_instances.push_back(std::move(inst));
        }
        for (const auto &s : snap.instances)
        {
            Instance &inst = *m_instances[s.id];
            inst.removed = false;
            inst.op = s.op;
            inst.slot = s.slot;
            inst.draining = s.draining;
            inst.stateful = m_graph.stateful(s.op);
            inst.store = KeyedStateStore(m_graph.spec.num_keygroups);
            inst.store.restore_groups(s.groups);
            inst.channel_watermark = s.channel_watermark;
            inst.op_watermark = s.op_watermark;
            inst.seq_counter = s.seq_counter;
            inst.rr_forward = s.rr_forward;
            inst.rr_marker = s.rr_marker;
            inst.rr_channel = s.rr_channel;
            inst.kg_subscale = s.kg_subscale;
            inst.scale_aware = s.scale_aware;
            inst.universal = s.universal;
            inst.deferred_signals = s.deferred_signals;
            for (const auto &[op, owners] : s.routing_owners)
            {
                inst.routing[op] = RoutingTable::restored(m_graph.spec.num_keygroups, owners,
                                                          s.routing_versions.at(op));
            }
            const OpKind kind = m_graph.spec.operators[s.op].kind;
            if (kind == OpKind::Generator || kind == OpKind::Scripted)
            {
                init_generator(inst);
                inst.gen.rng.load_state(s.gen_rng);
                inst.gen.emitted = s.gen_emitted;
                inst.gen.next_watermark = s.gen_next_watermark;
                inst.gen.next_marker = s.gen_next_marker;
                inst.gen.script_pos = s.gen_script_pos;
            }
            if (kind == OpKind::Sink)
            {
                m_result.sink_outputs = s.sink_outputs;
            }
            for (const auto &[sid, vs] : s.subscales)
            {
                SubscaleView sv;
                sv.sub = vs.sub;
                sv.extract_cursor = vs.extract_cursor;
                sv.extraction_started = vs.extraction_started;
                sv.extraction_done = vs.extraction_done;
                sv.source_drained_reported = vs.source_drained_reported;
                sv.confirms_seen = vs.confirms_seen;
                sv.confirms_expected = vs.confirms_expected;
                sv.moved_keys = vs.moved_keys;
                sv.epoch = vs.epoch;
                sv.pending_epochs = vs.pending_epochs;
                sv.pending_reroutes = vs.pending_reroutes;
                sv.installed_kgs = vs.installed_kgs;
                sv.active_kgs = vs.active_kgs;
                sv.target_done_reported = vs.target_done_reported;
                sv.path = vs.path;
                inst.subscales[sid] = std::move(sv);
            }
        }

        // channels come back empty: the aligned cut leaves nothing in flight
        for (const auto &cs : snap.channels)
        {
            auto ch = std::make_unique<Channel>();
            ch->id = cs.id;
            ch->sender = cs.sender;
            ch->receiver = cs.receiver;
            ch->sender_op = cs.sender_op;
            ch->receiver_op = cs.receiver_op;
            ch->latency = cs.latency;
            ch->capacity = cs.capacity;
            ch->is_migration_path = cs.is_migration_path;
            ch->path_subscale = cs.path_subscale;
            ch->created_order = cs.created_order;
            ch->closed = cs.closed;
            if (!cs.closed)
            {
                m_instances[cs.sender]->outputs.push_back(cs.id);
                m_instances[cs.receiver]->inputs.push_back(cs.id);
                if (!cs.is_migration_path && m_channel_index.count({cs.sender, cs.receiver}) == 0)
                {
                    m_channel_index[{cs.sender, cs.receiver}] = cs.id;
                }
            }
            m_channels.push_back(std::move(ch));
        }

        for (const auto &op : m_graph.spec.operators)
        {
            if (m_graph.stateful(op.id))
            {
                m_stateful_op = op.id;
                m_have_stateful = true;
            }
        }

        // rebuild scheduler load from in-flight subscales
        for (const auto &s : m_sessions)
        {
            if (!s.active)
            {
                continue;
            }
            for (const auto &sub : s.subscales)
            {
                if (sub.phase == SubscalePhase::Triggered || sub.phase == SubscalePhase::Migrating)
                {
                    m_node_inflight[sub.source]++;
                    m_node_inflight[sub.target]++;
                }
            }
        }
        for (const auto &instp : m_instances)
        {
            if (!instp->removed && instp->stateful)
            {
                m_node_held[instp->id] = instp->store.key_count();
            }
        }

        // derive the event queue from state
        for (auto &instp : m_instances)
        {
            if (instp->removed)
            {
                continue;
            }
            const OpKind kind = m_graph.spec.operators[instp->op].kind;
            if ((kind == OpKind::Generator || kind == OpKind::Scripted) && !instp->gen.done &&
                instp->gen.emitted < instp->gen.budget)
            {
                schedule_emit(*instp, m_now);
            }
            for (auto &[sid, sv] : instp->subscales)
            {
                if (sv.sub.source == instp->id && sv.extraction_started && !sv.extraction_done)
                {
                    push_event(m_now, instp->id, EvKind::ExtractStep, 0, sid);
                }
            }
            if (!instp->deferred_signals.empty())
            {
                process_deferred_signals(*instp);
            }
        }
        for (const auto &s : m_sessions)
        {
            if (s.active && s.protocol == Protocol::Drrs)
            {
                push_event(m_now, kCoordinator, EvKind::ScaleDispatch, s.id);
            }
        }
    }
}
