#include "rill/engine.hpp"

#include "rill/error.hpp"

#include <algorithm>
#include <sstream>

namespace rill
{
    // ---- request intake ---------------------------------------------------

    void Engine::add_scale_request(const ScaleRequest &req)
    {
        if (req.op >= m_graph.spec.operators.size())
        {
            raise(Errc::UnknownOperator, "scale request for unknown operator id");
        }
        m_pending_requests.push_back(req);
        push_event(req.at_tick, kCoordinator, EvKind::ScaleRequestDue, 0,
                   static_cast<std::int64_t>(m_pending_requests.size() - 1));
    }

    std::map<KeyGroup, InstanceId> Engine::current_owner_map(OperatorId op) const
    {
        // predecessors' routing tables are the live source of ownership truth
        for (const auto &instp : m_instances)
        {
            auto it = instp->routing.find(op);
            if (it != instp->routing.end())
            {
                return it->second.owners();
            }
        }
        raise(Errc::IncompleteTable, "no routing table found for operator " + std::to_string(op));
    }

    SessionState *Engine::active_session(OperatorId op)
    {
        for (auto &s : m_sessions)
        {
            if (s.op == op && s.active)
            {
                return &s;
            }
        }
        return nullptr;
    }

    SessionState *Engine::session_by_id(std::uint32_t id)
    {
        for (auto &s : m_sessions)
        {
            if (s.id == id)
            {
                return &s;
            }
        }
        return nullptr;
    }

    SessionState *Engine::session_of_subscale(std::int32_t sid)
    {
        for (auto &s : m_sessions)
        {
            if (s.sub_index.count(sid) != 0)
            {
                return &s;
            }
        }
        return nullptr;
    }

    std::vector<InstanceId> Engine::predecessor_instances(OperatorId scaling_op) const
    {
        std::vector<InstanceId> out;
        auto eit = m_graph.in_edges.find(scaling_op);
        if (eit == m_graph.in_edges.end())
        {
            return out;
        }
        for (const auto &e : eit->second)
        {
            if (e.partitioning != Partitioning::Keyed)
            {
                continue;
            }
            for (InstanceId id : m_slots.at(e.from))
            {
                if (id != kNoInstance && !m_instances[id]->removed)
                {
                    out.push_back(id);
                }
            }
        }
        std::sort(out.begin(), out.end());
        return out;
    }

    void Engine::update_predecessor_routing(OperatorId scaling_op,
                                            const std::map<KeyGroup, InstanceId> &reassign)
    {
        for (InstanceId p : predecessor_instances(scaling_op))
        {
            Instance &pred = *m_instances[p];
            const std::uint64_t v = pred.routing.at(scaling_op).apply_update(reassign);
            m_trace.add(m_now, p, Tk::RouteUpdate, 0, static_cast<std::int64_t>(v));
        }
    }

    void Engine::on_scale_request(const ScaleRequest &req)
    {
        // fault tolerance and scaling only overlap in the supported window:
        // checkpoint barriers already forwarded by every predecessor. Earlier
        // than that, the request waits a beat.
        for (const auto &[cid, snap] : m_snapshots)
        {
            if (snap.complete)
            {
                continue;
            }
            for (InstanceId p : predecessor_instances(req.op))
            {
                if (m_instances[p]->last_forwarded_ckpt < cid)
                {
                    m_pending_requests.push_back(req);
                    push_event(m_now + 1, kCoordinator, EvKind::ScaleRequestDue, 0,
                               static_cast<std::int64_t>(m_pending_requests.size() - 1));
                    return;
                }
            }
        }

        if (SessionState *prior = active_session(req.op))
        {
            // a newer request supersedes the running one: pending subscales are
            // cancelled, in-flight ones drain, and the new plan is rebased on
            // whatever ownership the routing tables show now
            prior->terminated = true;
            for (auto &sub : prior->subscales)
            {
                if (sub.phase == SubscalePhase::Pending)
                {
                    sub.phase = SubscalePhase::Cancelled;
                }
            }
            m_trace.add(m_now, kCoordinator, Tk::SessionTerminated, 0, prior->id);
            if (prior->completed == prior->dispatched)
            {
                finalize_scaling(*prior);
            }
        }

        SessionState &s = make_session(req, current_owner_map(req.op));
        m_trace.add(m_now, kCoordinator, Tk::SessionStart, 0, s.id,
                    static_cast<std::int64_t>(s.protocol));

        switch (s.protocol)
        {
        case Protocol::Drrs:
            push_event(m_now, kCoordinator, EvKind::ScaleDispatch, s.id);
            break;
        case Protocol::StopRestart:
            dispatch_stop_restart(s);
            break;
        case Protocol::Unbound:
            dispatch_unbound(s);
            break;
        case Protocol::FluidOtfs:
        case Protocol::AllAtOnce:
            dispatch_otfs(s);
            break;
        case Protocol::FetchOnDemand:
            dispatch_fod(s);
            break;
        case Protocol::None:
            finalize_scaling(s);
            break;
        }
    }

    SessionState &Engine::make_session(const ScaleRequest &req,
                                       const std::map<KeyGroup, InstanceId> &owner_now)
    {
        SessionState s;
        s.id = m_next_session++;
        s.op = req.op;
        s.protocol = req.protocol;
        s.started_at = m_now;

        // plan in slot space, then deploy and remap to instance ids
        std::map<KeyGroup, InstanceId> owner_slots;
        for (const auto &[kg, inst] : owner_now)
        {
            owner_slots[kg] = m_instances[inst]->slot;
        }
        s.plan = plan_repartition_from(owner_slots, m_graph.spec.num_keygroups, req.new_parallelism);

        m_sessions.push_back(std::move(s));
        SessionState &stored = m_sessions.back();
        deploy_update(stored, req.new_parallelism);
        remap_plan_to_instances(stored, req.new_parallelism);

        stored.subscales = divide_subscales(stored.plan.migrations,
                                            stored.protocol == Protocol::Drrs
                                                ? m_options.max_subscale_size
                                                : 0);
        for (auto &sub : stored.subscales)
        {
            sub.id = m_next_subscale++;
            stored.sub_index[sub.id] = &sub - stored.subscales.data();
        }
        stored.dispatched = 0;

        // greedy scheduler state: targets ranked by how many keys they hold
        for (const auto &sub : stored.subscales)
        {
            if (m_node_held.count(sub.target) == 0)
            {
                m_node_held[sub.target] = m_instances[sub.target]->store.key_count();
            }
        }
        return stored;
    }

    void Engine::deploy_update(SessionState &s, std::uint32_t n_new)
    {
        auto &slots = m_slots[s.op];
        const std::uint32_t n_old = static_cast<std::uint32_t>(slots.size());

        for (std::uint32_t slot = n_old; slot < n_new; ++slot)
        {
            const InstanceId id = create_instance(s.op, slot);
            s.added_instances.push_back(id);
            Instance &inst = *m_instances[id];
            inst.scale_aware = true;
            // wire inputs from every predecessor instance
            for (const auto &e : m_graph.in_edges.at(s.op))
            {
                for (InstanceId up : m_slots.at(e.from))
                {
                    if (up != kNoInstance && !m_instances[up]->removed)
                    {
                        create_channel(up, id, false, kNoSubscale);
                    }
                }
            }
            // wire outputs; new instances adopt the same output configuration
            // (and routing) as the existing ones
            auto oit = m_graph.out_edges.find(s.op);
            if (oit != m_graph.out_edges.end())
            {
                for (const auto &e : oit->second)
                {
                    const auto &down = m_slots.at(e.to);
                    if (e.partitioning == Partitioning::Forward && down.size() > 1)
                    {
                        create_channel(id, down[slot % down.size()], false, kNoSubscale);
                    }
                    else
                    {
                        for (InstanceId d : down)
                        {
                            if (d != kNoInstance && !m_instances[d]->removed)
                            {
                                create_channel(id, d, false, kNoSubscale);
                            }
                        }
                    }
                    if (e.partitioning == Partitioning::Keyed)
                    {
                        const InstanceId donor = slots[0];
                        inst.routing[e.to] = m_instances[donor]->routing.at(e.to);
                    }
                }
            }
        }

        // scale-in: surplus instances drain and leave once their state is out
        for (std::uint32_t slot = n_new; slot < n_old; ++slot)
        {
            if (slots[slot] != kNoInstance)
            {
                m_instances[slots[slot]]->draining = true;
                s.draining_instances.push_back(slots[slot]);
            }
        }

        for (InstanceId id : m_slots[s.op])
        {
            if (id != kNoInstance && !m_instances[id]->removed)
            {
                m_instances[id]->scale_aware = true;
            }
        }
    }

    void Engine::remap_plan_to_instances(SessionState &s, std::uint32_t n_new)
    {
        const auto &slots = m_slots[s.op];
        auto to_inst = [&](InstanceId slot) -> InstanceId
        {
            const InstanceId id = slots.at(slot);
            if (id == kNoInstance)
            {
                raise(Errc::DeployConflict, "no live instance in slot " + std::to_string(slot));
            }
            return id;
        };
        (void)n_new;
        std::map<KeyGroup, InstanceId> before;
        std::map<KeyGroup, InstanceId> after;
        for (const auto &[kg, slot] : s.plan.owner_before)
        {
            before[kg] = to_inst(slot);
        }
        for (const auto &[kg, slot] : s.plan.owner_after)
        {
            after[kg] = to_inst(slot);
        }
        s.plan.owner_before = std::move(before);
        s.plan.owner_after = std::move(after);
        for (auto &m : s.plan.migrations)
        {
            m.source = to_inst(m.source);
            m.target = to_inst(m.target);
        }

        // target stores expect the migrating groups
        for (const auto &m : s.plan.migrations)
        {
            m_instances[m.target]->store.assign(m.kg, KgStatus::Incoming);
        }
    }

    // ---- DRRS ----------------------------------------------------------------

    void Engine::scale_dispatch(std::uint32_t session_id)
    {
        SessionState *s = session_by_id(session_id);
        if (s == nullptr || !s->active)
        {
            return;
        }
        while (true)
        {
            if (m_options.serial_dispatch)
            {
                std::uint32_t busy = 0;
                for (const auto &[node, n] : m_node_inflight)
                {
                    busy += n;
                }
                if (busy > 0)
                {
                    return;
                }
            }
            auto pick = next_subscale(s->subscales, m_node_held, m_node_inflight,
                                      m_options.serial_dispatch ? 1 : m_options.concurrency_cap);
            if (!pick)
            {
                return;
            }
            inject_subscale(*s, s->subscales[*pick]);
            if (m_options.serial_dispatch)
            {
                return;
            }
        }
    }

    void Engine::register_subscale_at_instances(SessionState &s, const Subscale &sub)
    {
        // every instance of the scaling operator learns the subscale; source and
        // target get the live machinery
        for (InstanceId id : m_slots[s.op])
        {
            if (id == kNoInstance || m_instances[id]->removed)
            {
                continue;
            }
            Instance &inst = *m_instances[id];
            SubscaleView view;
            view.sub = sub;
            view.sub.phase = SubscalePhase::Triggered;
            if (id == sub.source)
            {
                view.confirms_expected =
                    static_cast<std::uint32_t>(predecessor_instances(s.op).size());
                for (KeyGroup kg : sub.keygroups)
                {
                    inst.kg_subscale[kg] = sub.id;
                }
            }
            if (id == sub.target)
            {
                for (InstanceId p : predecessor_instances(s.op))
                {
                    auto cit = m_channel_index.find({p, id});
                    if (cit != m_channel_index.end())
                    {
                        view.epoch[cit->second] = Epoch::Preceding;
                    }
                }
                view.pending_epochs = static_cast<std::uint32_t>(view.epoch.size());
                for (KeyGroup kg : sub.keygroups)
                {
                    inst.kg_subscale[kg] = sub.id;
                }
            }
            inst.subscales[sub.id] = std::move(view);
        }
    }

    void Engine::inject_subscale(SessionState &s, Subscale &sub)
    {
        for (const auto &[sid2, other] : m_instances[sub.source]->subscales)
        {
            if (other.sub.phase == SubscalePhase::Triggered ||
                other.sub.phase == SubscalePhase::Migrating)
            {
                for (KeyGroup kg : other.sub.keygroups)
                {
                    if (std::binary_search(sub.keygroups.begin(), sub.keygroups.end(), kg))
                    {
                        raise(Errc::SubscaleOverlap,
                              "key-group " + std::to_string(kg) + " already migrating");
                    }
                }
            }
        }

        sub.phase = SubscalePhase::Triggered;
        s.dispatched++;
        s.injected_at[sub.id] = m_now;
        m_node_inflight[sub.source]++;
        m_node_inflight[sub.target]++;
        m_trace.add(m_now, kCoordinator, Tk::Inject, 0, sub.id, sub.source, sub.target);

        register_subscale_at_instances(s, sub);

        std::map<KeyGroup, InstanceId> reassign;
        for (KeyGroup kg : sub.keygroups)
        {
            reassign[kg] = sub.target;
        }
        const std::set<KeyGroup> kgset(sub.keygroups.begin(), sub.keygroups.end());

        for (InstanceId p : predecessor_instances(s.op))
        {
            Instance &pred = *m_instances[p];
            const std::uint64_t v = pred.routing.at(s.op).apply_update(reassign);
            m_trace.add(m_now, p, Tk::RouteUpdate, 0, static_cast<std::int64_t>(v));

            Channel &to_source = channel_between(p, sub.source);
            Channel &to_target = channel_between(p, sub.target);
            const CkptMergePlan merge = merge_with_checkpoint(to_source);

            if (merge.kind == CkptMergePlan::Kind::FuseIntoCached)
            {
                // integrated signal: the cached checkpoint barrier carries the
                // trigger and confirm; redirection stops at the barrier
                CacheEntry &entry = to_source.output_cache[merge.cache_pos];
                entry.msg.carries_trigger = true;
                entry.msg.carries_confirm = true;
                entry.msg.subscale_id = sub.id;
                m_trace.add(m_now, p, Tk::FusedSignal, entry.msg.seq_id,
                            entry.msg.checkpoint_id, sub.id);
            }
            else
            {
                // trigger bypasses all in-flight data toward every instance
                for (InstanceId dest : m_slots[s.op])
                {
                    if (dest == kNoInstance || m_instances[dest]->removed)
                    {
                        continue;
                    }
                    StreamMessage tb;
                    tb.kind = MsgKind::TriggerBarrier;
                    tb.subscale_id = sub.id;
                    tb.seq_id = next_seq(pred);
                    tb.origin = p;
                    emit_on(channel_between(p, dest), std::move(tb), Lane::Priority);
                }
                for (InstanceId dest : m_slots[s.op])
                {
                    if (dest == kNoInstance || m_instances[dest]->removed)
                    {
                        continue;
                    }
                    StreamMessage cb;
                    cb.kind = MsgKind::ConfirmBarrier;
                    cb.subscale_id = sub.id;
                    cb.seq_id = next_seq(pred);
                    cb.origin = p;
                    // priority inside the sender's cache only: the entry jumps
                    // cached data but rides the normal lane on the wire
                    Channel &ch = channel_between(p, dest);
                    auto pos = ch.output_cache.begin();
                    while (pos != ch.output_cache.end() &&
                           (pos->lane == Lane::Priority ||
                            pos->msg.kind == MsgKind::CheckpointBarrier))
                    {
                        ++pos;
                    }
                    ch.output_cache.insert(pos, CacheEntry{std::move(cb), Lane::Normal});
                    try_drain(ch);
                }
            }

            redirect_output_cache(to_source, to_target, kgset);
        }
    }

    void Engine::handle_trigger(Instance &inst, ChannelId ch, StreamMessage &&msg)
    {
        if (inst.alignment)
        {
            inst.deferred_signals.push_back(std::move(msg));
            return;
        }
        // a trigger never overtakes an unprocessed checkpoint barrier from the
        // same sender: it integrates into it instead
        for (const auto &m : m_channels[ch]->in_normal)
        {
            if (m.kind == MsgKind::CheckpointBarrier && m.seq_id < msg.seq_id &&
                m.origin == msg.origin)
            {
                inst.deferred_signals.push_back(std::move(msg));
                return;
            }
        }

        auto it = inst.subscales.find(msg.subscale_id);
        if (it == inst.subscales.end())
        {
            raise(Errc::ProtocolError, "trigger for unknown subscale " +
                                           std::to_string(msg.subscale_id));
        }
        SubscaleView &sv = it->second;
        if (sv.sub.phase == SubscalePhase::Completed)
        {
            m_trace.add(m_now, inst.id, Tk::Trigger, msg.seq_id, sv.sub.id, 2); // stale
            return;
        }
        if (inst.id != sv.sub.source)
        {
            m_trace.add(m_now, inst.id, Tk::Trigger, msg.seq_id, sv.sub.id, 1);
            return;
        }
        if (sv.extraction_started)
        {
            m_trace.add(m_now, inst.id, Tk::Trigger, msg.seq_id, sv.sub.id, 1); // duplicate
            return;
        }
        m_trace.add(m_now, inst.id, Tk::Trigger, msg.seq_id, sv.sub.id, 0);
        sv.extraction_started = true;
        sv.sub.phase = SubscalePhase::Migrating;
        ensure_path(inst, sv);
        push_event(m_now, inst.id, EvKind::ExtractStep, 0, sv.sub.id);
    }

    ChannelId Engine::ensure_path(Instance &source, SubscaleView &sv)
    {
        if (sv.path != kNoChannel)
        {
            return sv.path;
        }
        sv.path = create_channel(source.id, sv.sub.target, true, sv.sub.id);
        // an in-flight checkpoint this source already forwarded must also cut
        // through the new path so the receiver's alignment covers it
        for (auto &[id, snap] : m_snapshots)
        {
            if (!snap.complete && source.last_forwarded_ckpt == id)
            {
                StreamMessage cb;
                cb.kind = MsgKind::CheckpointBarrier;
                cb.checkpoint_id = id;
                cb.seq_id = next_seq(source);
                cb.origin = source.id;
                emit_on(*m_channels[sv.path], std::move(cb), Lane::Priority);
            }
        }
        return sv.path;
    }

    void Engine::on_extract_step(Instance &inst, std::int32_t sid)
    {
        auto it = inst.subscales.find(sid);
        if (it == inst.subscales.end())
        {
            return;
        }
        SubscaleView &sv = it->second;
        if (sv.extraction_done || sv.extract_cursor >= sv.sub.keygroups.size())
        {
            return;
        }
        const KeyGroup kg = sv.sub.keygroups[sv.extract_cursor];

        // records for this group still waiting in input queues can no longer be
        // processed locally once the chunk leaves; they travel the migration
        // path ahead of it so the target applies them before any newer record
        sweep_kg_to_reroute(inst, sv, kg);
        flush_reroute(inst, sv);

        sv.moved_keys += inst.store.key_count(kg);
        StateChunk chunk = inst.store.extract_one(kg, sv.sub.id, inst.id, sv.sub.target);
        m_trace.add(m_now, inst.id, Tk::ChunkEmit, 0, sv.sub.id, kg);

        const SessionState *session = session_of_subscale(sid);
        const bool batch = session != nullptr && session->protocol == Protocol::AllAtOnce;
        sv.extract_cursor++;
        const bool last = sv.extract_cursor >= sv.sub.keygroups.size();

        if (batch)
        {
            sv.batch.push_back(std::move(chunk));
            if (last)
            {
                for (std::size_t i = 0; i < sv.batch.size(); ++i)
                {
                    StreamMessage cm;
                    cm.kind = MsgKind::StateChunk;
                    cm.subscale_id = sv.sub.id;
                    cm.keygroup = sv.batch[i].body->keygroup;
                    auto body = std::make_shared<ChunkBody>(*sv.batch[i].body);
                    body->batch_end = (i + 1 == sv.batch.size());
                    cm.chunk = std::move(body);
                    cm.seq_id = next_seq(inst);
                    cm.origin = inst.id;
                    emit_on(*m_channels[sv.path], std::move(cm), Lane::Priority);
                }
                sv.batch.clear();
            }
        }
        else
        {
            StreamMessage cm;
            cm.kind = MsgKind::StateChunk;
            cm.subscale_id = sv.sub.id;
            cm.keygroup = kg;
            auto body = std::make_shared<ChunkBody>(*chunk.body);
            body->batch_end = last;
            cm.chunk = std::move(body);
            cm.seq_id = next_seq(inst);
            cm.origin = inst.id;
            emit_on(*m_channels[sv.path], std::move(cm), Lane::Priority);
        }

        if (last)
        {
            sv.extraction_done = true;
            maybe_source_drained(inst, sv);
        }
        else
        {
            push_event(m_now + m_graph.spec.extract_interval, inst.id, EvKind::ExtractStep, 0, sid);
        }
    }

    void Engine::sweep_kg_to_reroute(Instance &inst, SubscaleView &sv, KeyGroup kg)
    {
        for (ChannelId chid : inst.inputs)
        {
            Channel &c = *m_channels[chid];
            if (c.is_migration_path)
            {
                continue;
            }
            std::deque<StreamMessage> keep;
            for (auto &m : c.in_normal)
            {
                if (m.kind == MsgKind::Data && m.keygroup == kg)
                {
                    StreamMessage rr = std::move(m);
                    rr.kind = MsgKind::ReroutedRecord;
                    rr.subscale_id = sv.sub.id;
                    m_trace.add(m_now, inst.id, Tk::Reroute, rr.seq_id, sv.sub.id, kg);
                    sv.reroute_buffer.push_back(std::move(rr));
                }
                else
                {
                    keep.push_back(std::move(m));
                }
            }
            c.in_normal = std::move(keep);
        }
    }

    void Engine::sweep_confirm_channel(Instance &inst, SubscaleView &sv, ChannelId chid)
    {
        Channel &c = *m_channels[chid];
        std::deque<StreamMessage> keep;
        for (auto &m : c.in_normal)
        {
            const bool gone = m.kind == MsgKind::Data &&
                              inst.kg_subscale.count(m.keygroup) != 0 &&
                              inst.kg_subscale.at(m.keygroup) == sv.sub.id &&
                              inst.store.status(m.keygroup) == KgStatus::MigratedOut;
            if (gone)
            {
                StreamMessage rr = std::move(m);
                rr.kind = MsgKind::ReroutedRecord;
                rr.subscale_id = sv.sub.id;
                m_trace.add(m_now, inst.id, Tk::Reroute, rr.seq_id, sv.sub.id, rr.keygroup);
                sv.reroute_buffer.push_back(std::move(rr));
            }
            else
            {
                keep.push_back(std::move(m));
            }
        }
        c.in_normal = std::move(keep);
    }

    void Engine::buffer_reroute(Instance &inst, SubscaleView &sv, StreamMessage msg)
    {
        sv.reroute_buffer.push_back(std::move(msg));
        if (sv.reroute_buffer.size() >= m_options.reroute_capacity)
        {
            flush_reroute(inst, sv);
        }
        else if (!sv.flush_armed)
        {
            sv.flush_armed = true;
            push_event(m_now + m_options.reroute_timeout, inst.id, EvKind::FlushReroute, 0, sv.sub.id);
        }
    }

    void Engine::flush_reroute(Instance &inst, SubscaleView &sv)
    {
        if (sv.reroute_buffer.empty())
        {
            return;
        }
        ensure_path(inst, sv);
        for (auto &msg : sv.reroute_buffer)
        {
            emit_on(*m_channels[sv.path], std::move(msg), Lane::Priority);
        }
        sv.reroute_buffer.clear();
        maybe_source_drained(inst, sv);
    }

    bool Engine::subscale_data_pending(const Instance &inst, const SubscaleView &sv) const
    {
        for (ChannelId chid : inst.inputs)
        {
            const Channel &c = *m_channels[chid];
            if (c.is_migration_path)
            {
                continue;
            }
            for (const auto &m : c.in_normal)
            {
                if (m.kind == MsgKind::Data &&
                    std::binary_search(sv.sub.keygroups.begin(), sv.sub.keygroups.end(),
                                       m.keygroup))
                {
                    return true;
                }
            }
        }
        return false;
    }

    void Engine::handle_confirm(Instance &inst, ChannelId ch, StreamMessage &&msg)
    {
        if (msg.carries_trigger)
        {
            handle_sync_barrier(inst, ch, std::move(msg));
            return;
        }
        if (inst.alignment)
        {
            inst.deferred_signals.push_back(std::move(msg));
            return;
        }
        auto it = inst.subscales.find(msg.subscale_id);
        if (it == inst.subscales.end())
        {
            raise(Errc::ProtocolError,
                  "confirm for unknown subscale " + std::to_string(msg.subscale_id));
        }
        SubscaleView &sv = it->second;
        if (inst.id != sv.sub.source)
        {
            m_trace.add(m_now, inst.id, Tk::Confirm, msg.seq_id, sv.sub.id, -1);
            return;
        }
        if (sv.confirms_seen.count(ch) != 0)
        {
            raise(Errc::DuplicateConfirm,
                  "confirm already seen on channel " + std::to_string(ch));
        }
        sv.confirms_seen.insert(ch);
        m_trace.add(m_now, inst.id, Tk::Confirm, msg.seq_id, sv.sub.id, ch);

        // records whose state already left are swept to the path now so the
        // rerouted confirm trails every one of them
        sweep_confirm_channel(inst, sv, ch);
        flush_reroute(inst, sv);

        ensure_path(inst, sv);
        StreamMessage rc;
        rc.kind = MsgKind::ReroutedConfirm;
        rc.subscale_id = sv.sub.id;
        rc.origin = msg.origin; // predecessor whose stream this confirm closes
        rc.seq_id = next_seq(inst);
        emit_on(*m_channels[sv.path], std::move(rc), Lane::Priority);

        maybe_source_drained(inst, sv);
    }

    void Engine::handle_rerouted_confirm(Instance &inst, StreamMessage &&msg)
    {
        auto it = inst.subscales.find(msg.subscale_id);
        if (it == inst.subscales.end())
        {
            raise(Errc::ProtocolError, "rerouted confirm for unknown subscale");
        }
        SubscaleView &sv = it->second;
        auto cit = m_channel_index.find({msg.origin, inst.id});
        if (cit == m_channel_index.end())
        {
            raise(Errc::ProtocolError, "rerouted confirm from unknown predecessor");
        }
        auto eit = sv.epoch.find(cit->second);
        if (eit == sv.epoch.end() || eit->second == Epoch::Following)
        {
            raise(Errc::DuplicateConfirm, "epoch already switched for this channel");
        }
        eit->second = Epoch::Following;
        sv.pending_epochs--;
        m_trace.add(m_now, inst.id, Tk::ReroutedConfirmEv, msg.seq_id, sv.sub.id, cit->second);
        m_trace.add(m_now, inst.id, Tk::EpochFlip, 0, sv.sub.id, cit->second);

        if (sv.aligned())
        {
            for (KeyGroup kg : sv.sub.keygroups)
            {
                if (inst.store.status(kg) == KgStatus::InactiveArrived)
                {
                    activate_kg(inst, sv, kg);
                }
            }
        }
        wake(inst.id);
    }

    void Engine::handle_rerouted_record(Instance &inst, StreamMessage &&msg)
    {
        auto it = inst.subscales.find(msg.subscale_id);
        if (it == inst.subscales.end())
        {
            raise(Errc::ProtocolError, "rerouted record for unknown subscale");
        }
        SubscaleView &sv = it->second;
        const KeyGroup kg = msg.keygroup;
        const KgStatus st = inst.store.status(kg);
        if (st == KgStatus::InactiveArrived || st == KgStatus::Active)
        {
            StreamMessage m = std::move(msg);
            m.kind = MsgKind::Data;
            apply_data(inst, m, true);
        }
        else
        {
            sv.pending_reroutes[kg].push_back(std::move(msg));
        }
    }

    void Engine::apply_pending_reroutes(Instance &inst, SubscaleView &sv, KeyGroup kg)
    {
        auto pit = sv.pending_reroutes.find(kg);
        if (pit == sv.pending_reroutes.end())
        {
            return;
        }
        for (auto &msg : pit->second)
        {
            StreamMessage m = std::move(msg);
            m.kind = MsgKind::Data;
            apply_data(inst, m, true);
        }
        sv.pending_reroutes.erase(pit);
    }

    void Engine::activate_kg(Instance &inst, SubscaleView &sv, KeyGroup kg)
    {
        apply_pending_reroutes(inst, sv, kg);
        inst.store.activate(kg);
        sv.active_kgs++;
        m_trace.add(m_now, inst.id, Tk::Activate, 0, sv.sub.id, kg);
        wake(inst.id);
        maybe_target_done(inst, sv);
    }

    void Engine::handle_chunk(Instance &inst, StreamMessage &&msg)
    {
        if (!msg.chunk)
        {
            raise(Errc::UnexpectedChunk, "chunk message without a body");
        }
        if (msg.chunk->subkg >= 0)
        {
            // fetch-on-demand fragment
            StateChunk chunk{msg.chunk};
            inst.store.install_subkg(chunk, true);
            inst.subkg_local[{msg.chunk->keygroup, msg.chunk->subkg}] = true;
            inst.fetch_outstanding.erase({msg.chunk->keygroup, msg.chunk->subkg});
            m_trace.add(m_now, inst.id, Tk::ChunkInstall, msg.seq_id, kNoSubscale,
                        msg.chunk->keygroup, msg.chunk->subkg);
            wake(inst.id);
            SessionState *s = active_session(inst.op);
            if (s != nullptr)
            {
                fod_maybe_complete(*s);
            }
            return;
        }

        auto it = inst.subscales.find(msg.subscale_id);
        if (it == inst.subscales.end())
        {
            raise(Errc::UnexpectedChunk, "chunk for unknown subscale");
        }
        SubscaleView &sv = it->second;
        SessionState *session = session_of_subscale(sv.sub.id);
        const Protocol proto = session != nullptr ? session->protocol : Protocol::Drrs;
        const KeyGroup kg = msg.chunk->keygroup;

        if (inst.universal)
        {
            auto &g = inst.store.groups_mut()[kg];
            g.entries = msg.chunk->entries; // universal keys: overwrite, accepting lost updates
            g.status = KgStatus::Active;
            g.installed = true;
            sv.installed_kgs++;
            sv.active_kgs++;
            m_trace.add(m_now, inst.id, Tk::ChunkInstall, msg.seq_id, sv.sub.id, kg);
            maybe_target_done(inst, sv);
            wake(inst.id);
            return;
        }

        StateChunk chunk{msg.chunk};
        inst.store.install_chunk(chunk);
        sv.installed_kgs++;
        m_trace.add(m_now, inst.id, Tk::ChunkInstall, msg.seq_id, sv.sub.id, kg);

        if (proto == Protocol::AllAtOnce)
        {
            if (msg.chunk->batch_end)
            {
                for (KeyGroup g : sv.sub.keygroups)
                {
                    if (inst.store.status(g) == KgStatus::InactiveArrived)
                    {
                        activate_kg(inst, sv, g);
                    }
                }
            }
            return;
        }

        // rerouted records for this group arrived ahead of the chunk on the
        // same path; they apply before anything newer touches the group
        apply_pending_reroutes(inst, sv, kg);

        if (proto != Protocol::Drrs || sv.aligned())
        {
            activate_kg(inst, sv, kg);
        }
        wake(inst.id);
    }

    void Engine::maybe_source_drained(Instance &inst, SubscaleView &sv)
    {
        if (sv.source_drained_reported || !sv.extraction_done || !sv.reroute_buffer.empty())
        {
            return;
        }
        const SessionState *session = session_of_subscale(sv.sub.id);
        const bool needs_confirms = session != nullptr && session->protocol == Protocol::Drrs;
        if (needs_confirms && sv.confirms_seen.size() < sv.confirms_expected)
        {
            return;
        }
        if (subscale_data_pending(inst, sv))
        {
            return;
        }
        sv.source_drained_reported = true;
        subscale_side_done(sv.sub.id, true, sv.moved_keys);
    }

    void Engine::maybe_target_done(Instance &inst, SubscaleView &sv)
    {
        if (sv.target_done_reported || sv.active_kgs < sv.sub.keygroups.size())
        {
            return;
        }
        sv.target_done_reported = true;
        subscale_side_done(sv.sub.id, false, 0);
        (void)inst;
    }

    void Engine::subscale_side_done(std::int32_t sid, bool source_side, std::uint64_t moved_keys)
    {
        SessionState *s = session_of_subscale(sid);
        if (s == nullptr)
        {
            return;
        }
        auto &mask = s->done_mask[sid];
        mask |= source_side ? 1 : 2;
        if (source_side)
        {
            const InstanceId target = s->subscales[s->sub_index.at(sid)].target;
            s->held_keys[target] += moved_keys;
            m_node_held[target] += moved_keys;
        }
        if (mask == 3)
        {
            complete_subscale(*s, sid);
        }
    }

    void Engine::complete_subscale(SessionState &s, std::int32_t sid)
    {
        Subscale &sub = s.subscales[s.sub_index[sid]];
        sub.phase = SubscalePhase::Completed;
        s.completed++;
        if (m_node_inflight[sub.source] > 0) m_node_inflight[sub.source]--;
        if (m_node_inflight[sub.target] > 0) m_node_inflight[sub.target]--;
        m_trace.add(m_now, kCoordinator, Tk::SubscaleDone, 0, sid);

        for (InstanceId id : {sub.source, sub.target})
        {
            auto &views = m_instances[id]->subscales;
            auto vit = views.find(sid);
            if (vit != views.end())
            {
                vit->second.sub.phase = SubscalePhase::Completed;
            }
        }

        std::uint32_t expected = 0;
        for (const auto &x : s.subscales)
        {
            if (x.phase != SubscalePhase::Cancelled)
            {
                ++expected;
            }
        }
        if (s.completed >= expected)
        {
            finalize_scaling(s);
        }
        else
        {
            push_event(m_now, kCoordinator, EvKind::ScaleDispatch, s.id);
        }
    }

    void Engine::finalize_session(std::uint32_t session_id)
    {
        SessionState *s = session_by_id(session_id);
        if (s == nullptr)
        {
            raise(Errc::UnknownOperator, "no such session");
        }
        for (const auto &sub : s->subscales)
        {
            if (sub.phase != SubscalePhase::Completed && sub.phase != SubscalePhase::Cancelled)
            {
                raise(Errc::SessionIncomplete,
                      "subscale " + std::to_string(sub.id) + " still in flight");
            }
        }
        finalize_scaling(*s);
    }

    void Engine::finalize_scaling(SessionState &s)
    {
        if (!s.active)
        {
            return;
        }
        s.active = false;
        s.ended_at = m_now;

        const bool another_active = [&]
        {
            for (const auto &o : m_sessions)
            {
                if (o.op == s.op && o.active && o.id != s.id)
                {
                    return true;
                }
            }
            return false;
        }();

        for (InstanceId id : m_slots[s.op])
        {
            if (id == kNoInstance || m_instances[id]->removed)
            {
                continue;
            }
            Instance &inst = *m_instances[id];
            for (const auto &sub : s.subscales)
            {
                auto vit = inst.subscales.find(sub.id);
                if (vit != inst.subscales.end())
                {
                    if (vit->second.path != kNoChannel)
                    {
                        m_channels[vit->second.path]->closed = true;
                    }
                    inst.subscales.erase(vit);
                }
                for (KeyGroup kg : sub.keygroups)
                {
                    auto kit = inst.kg_subscale.find(kg);
                    if (kit != inst.kg_subscale.end() && kit->second == sub.id)
                    {
                        inst.kg_subscale.erase(kit);
                    }
                    // migrated-out tombstones leave with the session
                    if (inst.store.owns(kg) && inst.store.status(kg) == KgStatus::MigratedOut)
                    {
                        inst.store.groups_mut().erase(kg);
                    }
                }
            }
            if (!another_active)
            {
                inst.scale_aware = false;
                inst.universal = false;
                inst.subkg_local.clear();
                inst.fetch_outstanding.clear();
            }
        }

        // scale-in: surplus instances have handed off their state and retire
        for (InstanceId id : s.draining_instances)
        {
            Instance &inst = *m_instances[id];
            inst.removed = true;
            for (ChannelId ch : inst.inputs)
            {
                m_channels[ch]->closed = true;
            }
            for (ChannelId ch : inst.outputs)
            {
                m_channels[ch]->closed = true;
            }
            m_slots[s.op][inst.slot] = kNoInstance;
        }
        if (!s.draining_instances.empty())
        {
            m_slots[s.op].resize(
                std::max<std::size_t>(1, m_slots[s.op].size() - s.draining_instances.size()));
        }

        m_trace.add(m_now, kCoordinator, Tk::SessionEnd, 0, s.id);
    }
}
