#include "rill/engine.hpp"

#include "rill/error.hpp"

#include <algorithm>
#include <cassert>
#include <sstream>

namespace rill
{
    // ---- construction ------------------------------------------------------

    Engine::Engine(DataflowGraph graph, ScaleOptions options)
        : m_graph(std::move(graph)), m_options(options),
          m_jitter_rng(derive_seed(m_graph.spec.seed, 0xc11a))
    {
        instantiate_base();
    }

    void Engine::instantiate_base()
    {
        for (const auto &op : m_graph.spec.operators)
        {
            if (m_graph.stateful(op.id))
            {
                m_stateful_op = op.id;
                m_have_stateful = true;
            }
            for (std::uint32_t slot = 0; slot < op.parallelism; ++slot)
            {
                create_instance(op.id, slot);
            }
        }
        wire_operator_edges();
        init_routing();

        for (auto &inst : m_instances)
        {
            if (m_graph.spec.operators[inst->op].kind == OpKind::Generator)
            {
                init_generator(*inst);
                schedule_emit(*inst, 0);
            }
            // scripted sources are scheduled when the script is attached
        }
    }

    void Engine::set_script(OperatorId op, std::uint32_t slot, std::vector<ScriptEntry> script)
    {
        const InstanceId id = m_slots.at(op).at(slot);
        auto &stored = m_scripts[id];
        stored = std::move(script);
        Instance &inst = *m_instances[id];
        inst.gen.budget = stored.size();
        if (!stored.empty())
        {
            schedule_emit(inst, stored.front().tick);
        }
    }

    InstanceId Engine::create_instance(OperatorId op, std::uint32_t slot)
    {
        auto &slots = m_slots[op];
        if (slots.size() > slot && slots[slot] != kNoInstance && !m_instances[slots[slot]]->removed)
        {
            raise(Errc::DeployConflict, "slot " + std::to_string(slot) + " of operator " +
                                            std::to_string(op) + " already deployed");
        }
        const InstanceId id = m_next_instance++;
        auto inst = std::make_unique<Instance>();
        inst->id = id;
        inst->op = op;
        inst->slot = slot;
        inst->stateful = m_graph.stateful(op);
        if (inst->stateful)
        {
            inst->store = KeyedStateStore(m_graph.spec.num_keygroups);
        }
        if (slots.size() <= slot)
        {
            slots.resize(slot + 1, kNoInstance);
        }
        slots[slot] = id;
        m_instances.push_back(std::move(inst));
        return id;
    }

    ChannelId Engine::create_channel(InstanceId sender, InstanceId receiver, bool path, std::int32_t sub)
    {
        const ChannelId id = m_next_channel++;
        auto ch = std::make_unique<Channel>();
        ch->id = id;
        ch->sender = sender;
        ch->receiver = receiver;
        ch->sender_op = m_instances[sender]->op;
        ch->receiver_op = m_instances[receiver]->op;
        ch->latency = m_graph.spec.net_latency;
        ch->capacity = m_graph.spec.channel_capacity;
        ch->is_migration_path = path;
        ch->path_subscale = sub;
        ch->created_order = m_channel_order++;
        m_instances[sender]->outputs.push_back(id);
        m_instances[receiver]->inputs.push_back(id);
        if (!path)
        {
            m_channel_index[{sender, receiver}] = id;
        }
        m_channels.push_back(std::move(ch));
        return id;
    }

    void Engine::wire_operator_edges()
    {
        for (const auto &e : m_graph.spec.edges)
        {
            for (InstanceId up : m_slots[e.from])
            {
                for (InstanceId down : m_slots[e.to])
                {
                    if (e.partitioning == Partitioning::Forward &&
                        m_slots[e.to].size() > 1 &&
                        m_instances[down]->slot !=
                            m_instances[up]->slot % m_slots[e.to].size())
                    {
                        continue; // forward: one downstream peer per upstream instance
                    }
                    create_channel(up, down, false, kNoSubscale);
                }
            }
        }
    }

    void Engine::init_routing()
    {
        for (const auto &e : m_graph.spec.edges)
        {
            if (e.partitioning != Partitioning::Keyed)
            {
                continue;
            }
            const std::uint32_t k = m_graph.spec.num_keygroups;
            const std::uint32_t n = m_graph.spec.operators[e.to].parallelism;
            std::map<KeyGroup, InstanceId> owner;
            for (KeyGroup kg = 0; kg < k; ++kg)
            {
                owner[kg] = m_slots[e.to][uniform_owner(kg, n, k)];
            }
            for (InstanceId up : m_slots[e.from])
            {
                m_instances[up]->routing.emplace(e.to, RoutingTable(k, owner));
            }
            // downstream stores own their ranges
            for (KeyGroup kg = 0; kg < k; ++kg)
            {
                m_instances[owner[kg]]->store.assign(kg, KgStatus::Local);
            }
        }
    }

    void Engine::init_generator(Instance &inst)
    {
        inst.gen.rng = Rng(derive_seed(m_graph.spec.seed, 0x9e0 + inst.id));
        inst.gen.budget = m_graph.spec.workload.record_budget();
        inst.gen.next_watermark = m_graph.spec.workload.watermark_period;
        inst.gen.next_marker = m_graph.spec.workload.marker_period;
    }

    // ---- event plumbing ------------------------------------------------------

    void Engine::push_event(Tick tick, InstanceId inst, EvKind kind, std::uint32_t a,
                            std::int64_t b, std::int64_t c, StreamMessage msg)
    {
        Event ev;
        ev.tick = std::max(tick, m_now);
        ev.instance = inst;
        ev.order = m_event_order++;
        ev.kind = kind;
        ev.a = a;
        ev.b = b;
        ev.c = c;
        ev.msg = std::move(msg);
        m_events.insert(std::move(ev));
    }

    ExecutedEvent Engine::step()
    {
        if (m_events.empty())
        {
            raise(Errc::SimulationDrained, "no pending events");
        }
        auto node = m_events.extract(m_events.begin());
        Event &ev = node.value();
        assert(ev.tick >= m_now);
        m_now = ev.tick;
        dispatch_event(ev);

        ExecutedEvent out;
        out.tick = ev.tick;
        out.instance = ev.instance;
        switch (ev.kind)
        {
        case EvKind::Arrive: out.kind = "arrive"; break;
        case EvKind::Process: out.kind = "process"; break;
        case EvKind::EmitSource: out.kind = "emit_source"; break;
        case EvKind::ExtractStep: out.kind = "extract"; break;
        case EvKind::FlushReroute: out.kind = "flush"; break;
        case EvKind::ScaleRequestDue: out.kind = "scale_request"; break;
        case EvKind::ScaleDispatch: out.kind = "dispatch"; break;
        case EvKind::CkptInject: out.kind = "ckpt_inject"; break;
        case EvKind::Quiesce: out.kind = "quiesce"; break;
        case EvKind::FodRouteUpdate: out.kind = "fod_route"; break;
        case EvKind::FodPush: out.kind = "fod_push"; break;
        case EvKind::FodFetch: out.kind = "fod_fetch"; break;
        case EvKind::FodGrant: out.kind = "fod_grant"; break;
        }
        return out;
    }

    void Engine::run()
    {
        while (!m_events.empty())
        {
            step();
        }
        // close any open suspension spans so metrics see the full extent
        for (auto &inst : m_instances)
        {
            if (inst->suspended)
            {
                note_resume(*inst);
            }
        }
        m_result.end_tick = m_now;
    }

    void Engine::dispatch_event(Event &ev)
    {
        switch (ev.kind)
        {
        case EvKind::Arrive:
        {
            Channel &ch = *m_channels[ev.a];
            ch.in_transit--;
            arrive(ch, std::move(ev.msg), static_cast<Lane>(ev.b));
            try_drain(ch); // room freed in transit accounting
            break;
        }
        case EvKind::Process:
        {
            Instance &inst = *m_instances[ev.instance];
            inst.process_scheduled = false;
            if (!inst.removed)
            {
                process_one(inst);
            }
            break;
        }
        case EvKind::EmitSource:
        {
            Instance &inst = *m_instances[ev.instance];
            inst.gen.emit_scheduled = false;
            if (!inst.removed)
            {
                emit_source_due(inst);
            }
            break;
        }
        case EvKind::ExtractStep:
            on_extract_step(*m_instances[ev.instance], static_cast<std::int32_t>(ev.b));
            break;
        case EvKind::FlushReroute:
        {
            Instance &inst = *m_instances[ev.instance];
            auto it = inst.subscales.find(static_cast<std::int32_t>(ev.b));
            if (it != inst.subscales.end())
            {
                it->second.flush_armed = false;
                flush_reroute(inst, it->second);
            }
            break;
        }
        case EvKind::ScaleRequestDue:
            on_scale_request(m_pending_requests.at(static_cast<std::size_t>(ev.b)));
            break;
        case EvKind::ScaleDispatch:
            scale_dispatch(ev.a);
            break;
        case EvKind::CkptInject:
            on_ckpt_inject(ev.b);
            break;
        case EvKind::Quiesce:
            on_quiesce(ev.a);
            break;
        case EvKind::FodRouteUpdate:
            on_fod_route_update(ev.a, static_cast<InstanceId>(ev.b));
            break;
        case EvKind::FodPush:
            on_fod_push(ev.instance, ev.a);
            break;
        case EvKind::FodFetch:
            on_fod_fetch(static_cast<InstanceId>(ev.b), ev.a,
                         static_cast<KeyGroup>(ev.c >> 32),
                         static_cast<std::int32_t>(ev.c & 0xffffffff));
            break;
        case EvKind::FodGrant:
            on_fod_grant(ev.instance, ev.a, static_cast<KeyGroup>(ev.c >> 32),
                         static_cast<std::int32_t>(ev.c & 0xffffffff),
                         static_cast<InstanceId>(ev.b), ev.msg.event_time, ev.msg.emitted_at);
            break;
        }
    }

    void Engine::wake(InstanceId id)
    {
        Instance &inst = *m_instances[id];
        if (inst.removed || inst.process_scheduled)
        {
            return;
        }
        schedule_process(inst, std::max(m_now, inst.next_free));
    }

    void Engine::schedule_process(Instance &inst, Tick at)
    {
        inst.process_scheduled = true;
        push_event(at, inst.id, EvKind::Process);
    }

    void Engine::schedule_emit(Instance &inst, Tick at)
    {
        if (inst.gen.emit_scheduled || inst.gen.done || inst.removed)
        {
            return;
        }
        inst.gen.emit_scheduled = true;
        push_event(at, inst.id, EvKind::EmitSource);
    }

    // ---- instance / channel lookup ------------------------------------------

    Instance &Engine::instance(InstanceId id)
    {
        return *m_instances.at(id);
    }

    const Instance &Engine::instance(InstanceId id) const
    {
        return *m_instances.at(id);
    }

    const std::vector<InstanceId> &Engine::slots_of(OperatorId op) const
    {
        return m_slots.at(op);
    }

    Channel &Engine::channel(ChannelId id)
    {
        return *m_channels.at(id);
    }

    Channel &Engine::channel_between(InstanceId sender, InstanceId receiver)
    {
        auto it = m_channel_index.find({sender, receiver});
        if (it == m_channel_index.end())
        {
            raise(Errc::ProtocolError, "no channel " + std::to_string(sender) + " -> " + std::to_string(receiver));
        }
        return *m_channels[it->second];
    }

    void Engine::hold_drain(InstanceId sender, InstanceId receiver, bool held)
    {
        Channel &ch = channel_between(sender, receiver);
        ch.hold_drain = held;
        if (!held)
        {
            try_drain(ch);
        }
    }

    // ---- channel mechanics ----------------------------------------------------

    void Engine::enqueue(Channel &ch, StreamMessage msg, Lane lane)
    {
        if (ch.closed)
        {
            raise(Errc::ChannelClosed, "channel " + std::to_string(ch.id) + " is closed");
        }
        emit_on(ch, std::move(msg), lane);
    }

    void Engine::emit_on(Channel &ch, StreamMessage msg, Lane lane)
    {
        if (ch.closed)
        {
            raise(Errc::ChannelClosed, "channel " + std::to_string(ch.id) + " is closed");
        }
        if (lane == Lane::Priority)
        {
            // priority entries form a prefix of the cache, FIFO among themselves
            auto pos = ch.output_cache.begin();
            while (pos != ch.output_cache.end() && pos->lane == Lane::Priority)
            {
                ++pos;
            }
            ch.output_cache.insert(pos, CacheEntry{std::move(msg), lane});
        }
        else
        {
            ch.output_cache.push_back(CacheEntry{std::move(msg), lane});
        }
        try_drain(ch);
    }

    void Engine::try_drain(Channel &ch)
    {
        if (ch.hold_drain || ch.closed)
        {
            return;
        }
        const std::size_t was = ch.output_cache.size();
        while (!ch.output_cache.empty())
        {
            const bool priority = ch.output_cache.front().lane == Lane::Priority;
            if (!priority && ch.queued() + ch.in_transit >= ch.capacity)
            {
                break; // backpressure: normal traffic waits for room
            }
            CacheEntry entry = std::move(ch.output_cache.front());
            ch.output_cache.pop_front();
            ch.in_transit++;
            Tick jitter = 0;
            if (m_graph.spec.latency_jitter > 0)
            {
                jitter = static_cast<Tick>(m_jitter_rng.next_below(m_graph.spec.latency_jitter + 1));
            }
            Tick at = std::max(m_now + ch.latency + jitter, ch.last_arrival); // per-channel FIFO
            ch.last_arrival = at;
            push_event(at, ch.receiver, EvKind::Arrive, ch.id,
                       static_cast<std::int64_t>(entry.lane), 0, std::move(entry.msg));
        }
        if (was >= 1 && ch.output_cache.size() < was)
        {
            wake_bp_senders(ch.id);
        }
    }

    void Engine::wake_bp_senders(ChannelId chid)
    {
        Instance &sender = *m_instances[m_channels[chid]->sender];
        if (sender.bp_waiting && !backpressured(sender))
        {
            sender.bp_waiting = false;
            wake(sender.id);
            const OpKind kind = m_graph.spec.operators[sender.op].kind;
            if ((kind == OpKind::Generator || kind == OpKind::Scripted) && !sender.gen.done)
            {
                schedule_emit(sender, m_now);
            }
        }
    }

    bool Engine::backpressured(const Instance &inst) const
    {
        for (ChannelId ch : inst.outputs)
        {
            const Channel &c = *m_channels[ch];
            if (!c.closed && c.output_cache.size() >= c.capacity)
            {
                return true;
            }
        }
        return false;
    }

    void Engine::arrive(Channel &ch, StreamMessage &&msg, Lane lane)
    {
        msg.arrival_index = ch.arrivals++;
        Instance &inst = *m_instances[ch.receiver];

        if (msg.kind == MsgKind::ConfirmBarrier && !ch.is_migration_path)
        {
            // At the original owner the confirm is handled ahead of pending
            // input so rerouting and the rerouted confirm leave immediately;
            // it never jumps an unprocessed checkpoint barrier.
            auto view = inst.subscales.find(msg.subscale_id);
            const bool at_source = view != inst.subscales.end() &&
                                   view->second.sub.source == inst.id &&
                                   !msg.carries_trigger;
            if (at_source && !confirm_must_wait(inst, ch.id, msg.seq_id))
            {
                lane = Lane::Priority;
            }
        }

        if (lane == Lane::Priority)
        {
            ch.in_priority.push_back(std::move(msg));
        }
        else
        {
            ch.in_normal.push_back(std::move(msg));
        }
        wake(ch.receiver);
    }

    bool Engine::confirm_must_wait(const Instance &inst, ChannelId ch, SeqId seq) const
    {
        if (inst.alignment)
        {
            return true;
        }
        for (const auto &m : m_channels[ch]->in_normal)
        {
            if (m.kind == MsgKind::CheckpointBarrier && m.seq_id < seq)
            {
                return true;
            }
        }
        return false;
    }

    std::size_t Engine::redirect_output_cache(Channel &from, Channel &to,
                                              const std::set<KeyGroup> &migrating)
    {
        if (from.sender != to.sender)
        {
            raise(Errc::SenderMismatch, "redirect requires both channels to share a sender");
        }
        // Redirection never crosses an in-flight checkpoint barrier: entries at
        // or before the barrier stay put.
        std::size_t start = 0;
        for (std::size_t i = 0; i < from.output_cache.size(); ++i)
        {
            if (from.output_cache[i].msg.kind == MsgKind::CheckpointBarrier)
            {
                start = i + 1;
            }
        }
        std::size_t moved = 0;
        std::deque<CacheEntry> keep;
        for (std::size_t i = 0; i < from.output_cache.size(); ++i)
        {
            CacheEntry &e = from.output_cache[i];
            const bool match = i >= start && e.msg.kind == MsgKind::Data &&
                               migrating.count(e.msg.keygroup) != 0;
            if (match)
            {
                to.output_cache.push_back(std::move(e));
                ++moved;
            }
            else
            {
                keep.push_back(std::move(e));
            }
        }
        from.output_cache = std::move(keep);
        try_drain(to);
        return moved;
    }

    // ---- selection -------------------------------------------------------------

    bool Engine::channel_blocked(const Instance &inst, ChannelId ch) const
    {
        return inst.alignment && inst.alignment->arrived.count(ch) != 0;
    }

    bool Engine::scheduling_enabled(const Instance &inst, bool intra) const
    {
        if (!inst.scale_aware)
        {
            return false;
        }
        return intra ? m_options.intra_channel_scheduling : m_options.inter_channel_scheduling;
    }

    bool Engine::data_eligible(const Instance &inst, ChannelId ch, const StreamMessage &msg) const
    {
        if (!inst.stateful)
        {
            return true;
        }
        if (inst.universal)
        {
            return true;
        }
        if (!inst.subkg_local.empty() || !inst.fetch_outstanding.empty())
        {
            return fod_record_local(inst, msg);
        }
        const KeyGroup kg = msg.keygroup;
        if (!inst.store.owns(kg))
        {
            return false;
        }
        switch (inst.store.status(kg))
        {
        case KgStatus::Local:
        case KgStatus::MigratingOut:
        case KgStatus::Active:
            return true;
        case KgStatus::MigratedOut:
            return true; // consumed for rerouting, not local processing
        case KgStatus::Incoming:
            return false;
        case KgStatus::InactiveArrived:
        {
            // fluid confirmation: an installed group serves a channel as soon
            // as that channel's rerouted confirm arrived
            if (!m_options.inter_channel_scheduling)
            {
                return false;
            }
            auto sit = inst.kg_subscale.find(kg);
            if (sit == inst.kg_subscale.end())
            {
                return false;
            }
            const SubscaleView &sv = inst.subscales.at(sit->second);
            auto eit = sv.epoch.find(ch);
            return eit != sv.epoch.end() && eit->second == Epoch::Following;
        }
        }
        return false;
    }

    bool Engine::head_eligible(Instance &inst, ChannelId ch)
    {
        const Channel &c = *m_channels[ch];
        if (c.in_normal.empty())
        {
            return false;
        }
        const StreamMessage &head = c.in_normal.front();
        if (head.kind != MsgKind::Data)
        {
            return true;
        }
        return data_eligible(inst, ch, head);
    }

    Engine::Selected Engine::select_next(Instance &inst)
    {
        Selected out;
        const std::size_t n = inst.inputs.size();
        if (n == 0)
        {
            return out;
        }

        // 1) priority lanes: migration-path traffic and barriers bypass all
        // in-flight data and are served even while suspended
        for (std::size_t i = 0; i < n; ++i)
        {
            const std::size_t idx = (inst.rr_channel + i) % n;
            Channel &c = *m_channels[inst.inputs[idx]];
            if (channel_blocked(inst, c.id) || c.in_priority.empty())
            {
                continue;
            }
            out.kind = Selected::Kind::Msg;
            out.ch = c.id;
            out.msg = std::move(c.in_priority.front());
            c.in_priority.pop_front();
            c.delivered++;
            return out;
        }

        bool any_pending = false;
        bool any_blocked = false;
        for (std::size_t i = 0; i < n; ++i)
        {
            Channel &c = *m_channels[inst.inputs[i]];
            if (c.in_normal.empty())
            {
                continue;
            }
            if (channel_blocked(inst, c.id))
            {
                any_blocked = true;
                continue;
            }
            any_pending = true;
        }

        auto take_head = [&](Channel &c)
        {
            out.kind = Selected::Kind::Msg;
            out.ch = c.id;
            out.msg = std::move(c.in_normal.front());
            c.in_normal.pop_front();
            c.delivered++;
            inst.rr_channel = 0;
            for (std::size_t i = 0; i < n; ++i)
            {
                if (inst.inputs[i] == c.id)
                {
                    inst.rr_channel = (i + 1) % n;
                    break;
                }
            }
        };

        if (any_pending)
        {
            if (!scheduling_enabled(inst, false))
            {
                // plain rotation: advance to the next nonempty channel and
                // either serve its head or suspend on it
                for (std::size_t i = 0; i < n; ++i)
                {
                    const std::size_t idx = (inst.rr_channel + i) % n;
                    Channel &c = *m_channels[inst.inputs[idx]];
                    if (c.in_normal.empty() || channel_blocked(inst, c.id))
                    {
                        continue;
                    }
                    if (head_eligible(inst, c.id))
                    {
                        take_head(c);
                        return out;
                    }
                    break; // stick with this channel and wait
                }
            }
            else
            {
                // inter-channel scheduling: switch to any processable channel
                for (std::size_t i = 0; i < n; ++i)
                {
                    const std::size_t idx = (inst.rr_channel + i) % n;
                    Channel &c = *m_channels[inst.inputs[idx]];
                    if (c.in_normal.empty() || channel_blocked(inst, c.id))
                    {
                        continue;
                    }
                    if (head_eligible(inst, c.id))
                    {
                        take_head(c);
                        return out;
                    }
                }
            }

            // intra-channel scheduling: bypass unprocessable records without
            // crossing watermarks or barriers
            if (scheduling_enabled(inst, true))
            {
                for (std::size_t i = 0; i < n; ++i)
                {
                    const std::size_t idx = (inst.rr_channel + i) % n;
                    Channel &c = *m_channels[inst.inputs[idx]];
                    if (c.in_normal.empty() || channel_blocked(inst, c.id))
                    {
                        continue;
                    }
                    const std::size_t window = std::min<std::size_t>(c.in_normal.size(),
                                                                     m_options.schedule_buffer);
                    for (std::size_t p = 0; p < window; ++p)
                    {
                        const StreamMessage &m = c.in_normal[p];
                        if (m.kind == MsgKind::TriggerBarrier ||
                            m.kind == MsgKind::ConfirmBarrier ||
                            m.kind == MsgKind::CheckpointBarrier)
                        {
                            break;
                        }
                        if (m.kind == MsgKind::Watermark && !m_options.relaxed_ordering)
                        {
                            break;
                        }
                        if (m.kind != MsgKind::Data)
                        {
                            continue;
                        }
                        if (data_eligible(inst, c.id, m))
                        {
                            out.kind = Selected::Kind::Msg;
                            out.ch = c.id;
                            out.msg = std::move(c.in_normal[p]);
                            c.in_normal.erase(c.in_normal.begin() + static_cast<std::ptrdiff_t>(p));
                            c.delivered++;
                            return out;
                        }
                    }
                }
            }
        }

        if (any_pending || any_blocked)
        {
            out.kind = Selected::Kind::Suspended;
            out.reason = any_pending ? SuspendReason::StateWait : SuspendReason::Alignment;
            if (any_pending && (!inst.subkg_local.empty() || !inst.fetch_outstanding.empty()))
            {
                out.reason = SuspendReason::FetchWait;
            }
            return out;
        }
        return out; // Idle
    }

    bool Engine::has_pending_input(const Instance &inst) const
    {
        for (ChannelId ch : inst.inputs)
        {
            const Channel &c = *m_channels[ch];
            if (!c.in_normal.empty() || !c.in_priority.empty())
            {
                return true;
            }
        }
        return false;
    }

    // ---- processing loop ----------------------------------------------------

    void Engine::note_suspend(Instance &inst, SuspendReason reason)
    {
        if (inst.suspended)
        {
            return;
        }
        inst.suspended = true;
        inst.suspend_since = m_now;
        inst.suspend_reason = reason;
        m_trace.add(m_now, inst.id, Tk::SuspendBegin, 0, static_cast<std::int64_t>(reason));
    }

    void Engine::note_resume(Instance &inst)
    {
        if (!inst.suspended)
        {
            return;
        }
        inst.suspended = false;
        m_trace.add(m_now, inst.id, Tk::SuspendEnd, 0, m_now - inst.suspend_since,
                    static_cast<std::int64_t>(inst.suspend_reason));
    }

    void Engine::process_one(Instance &inst)
    {
        if (backpressured(inst))
        {
            inst.bp_waiting = true;
            return;
        }
        if (m_now < inst.next_free)
        {
            schedule_process(inst, inst.next_free);
            return;
        }

        Selected sel = select_next(inst);
        if (sel.kind == Selected::Kind::Idle)
        {
            return;
        }
        if (sel.kind == Selected::Kind::Suspended)
        {
            note_suspend(inst, sel.reason);
            // fetch-on-demand: a suspended head triggers the fetch of its
            // sub-key-group from the current holder
            if (!inst.subkg_local.empty() || !inst.fetch_outstanding.empty())
            {
                for (ChannelId chid : inst.inputs)
                {
                    Channel &c = *m_channels[chid];
                    if (!c.in_normal.empty() && c.in_normal.front().kind == MsgKind::Data &&
                        !fod_record_local(inst, c.in_normal.front()))
                    {
                        const StreamMessage &h = c.in_normal.front();
                        fod_issue_fetch(inst, h.keygroup, subkg_of(h.key, m_options.fetch_fanout));
                    }
                }
            }
            return;
        }

        note_resume(inst);
        m_trace.add(m_now, inst.id, Tk::Deliver, sel.msg.seq_id, sel.ch,
                    static_cast<std::int64_t>(sel.msg.arrival_index),
                    static_cast<std::int64_t>(sel.msg.kind));
        handle_message(inst, sel.ch, std::move(sel.msg));
        try_drain(*m_channels[sel.ch]); // queue room frees upstream senders

        inst.next_free = m_now + m_graph.spec.proc_interval;
        if (has_pending_input(inst) && !inst.process_scheduled && !inst.removed)
        {
            schedule_process(inst, inst.next_free);
        }
    }

    void Engine::handle_message(Instance &inst, ChannelId ch, StreamMessage &&msg)
    {
        switch (msg.kind)
        {
        case MsgKind::Data:
        {
            if (inst.stateful && !inst.universal && inst.subkg_local.empty() &&
                inst.store.owns(msg.keygroup) &&
                inst.store.status(msg.keygroup) == KgStatus::MigratedOut)
            {
                // the state moved out from under this record: forward it along
                // the migration path instead of applying it
                auto sit = inst.kg_subscale.find(msg.keygroup);
                if (sit == inst.kg_subscale.end())
                {
                    raise(Errc::NotMigrated, "record for migrated-out group without a subscale");
                }
                SubscaleView &sv = inst.subscales.at(sit->second);
                StreamMessage rr = std::move(msg);
                rr.kind = MsgKind::ReroutedRecord;
                rr.subscale_id = sv.sub.id;
                m_trace.add(m_now, inst.id, Tk::Reroute, rr.seq_id, sv.sub.id, rr.keygroup);
                buffer_reroute(inst, sv, std::move(rr));
                break;
            }
            if (m_graph.spec.operators[inst.op].kind == OpKind::Sink)
            {
                if (msg.payload.size() >= 16)
                {
                    std::int64_t sum = 0;
                    std::int64_t count = 0;
                    for (int i = 0; i < 8; ++i)
                    {
                        sum |= static_cast<std::int64_t>(static_cast<unsigned char>(msg.payload[i])) << (8 * i);
                        count |= static_cast<std::int64_t>(static_cast<unsigned char>(msg.payload[8 + i])) << (8 * i);
                    }
                    m_result.sink_outputs[msg.key].emplace_back(sum, count);
                }
                else
                {
                    m_result.sink_outputs[msg.key].emplace_back(msg.value, 0);
                }
                break;
            }
            apply_data(inst, msg, false);
            break;
        }
        case MsgKind::Watermark:
            handle_watermark(inst, ch, msg);
            break;
        case MsgKind::LatencyMarker:
            handle_marker(inst, msg);
            break;
        case MsgKind::TriggerBarrier:
            handle_trigger(inst, ch, std::move(msg));
            break;
        case MsgKind::ConfirmBarrier:
            handle_confirm(inst, ch, std::move(msg));
            break;
        case MsgKind::CheckpointBarrier:
            handle_checkpoint_barrier(inst, ch, std::move(msg));
            break;
        case MsgKind::StateChunk:
            handle_chunk(inst, std::move(msg));
            break;
        case MsgKind::ReroutedRecord:
            handle_rerouted_record(inst, std::move(msg));
            break;
        case MsgKind::ReroutedConfirm:
            handle_rerouted_confirm(inst, std::move(msg));
            break;
        }
    }

    // ---- operator logic --------------------------------------------------------

    void Engine::census_apply(Instance &inst, const StreamMessage &msg)
    {
        if (inst.op == m_stateful_op && m_have_stateful)
        {
            m_result.applied_seqs.push_back(msg.seq_id);
            m_result.apply_log[{msg.origin, msg.key}].push_back(msg.seq_id);
        }
    }

    void Engine::apply_data(Instance &inst, const StreamMessage &msg, bool via_reroute)
    {
        const OpKind kind = m_graph.spec.operators[inst.op].kind;
        if (msg.payload.size() < 8)
        {
            raise(Errc::MalformedRecord, "data payload shorter than its integer field");
        }
        std::int64_t value = 0;
        for (int i = 0; i < 8; ++i)
        {
            value |= static_cast<std::int64_t>(static_cast<unsigned char>(msg.payload[i])) << (8 * i);
        }

        StateValue *slot = nullptr;
        if (inst.universal || (inst.store.owns(msg.keygroup) && !inst.store.readable(msg.keygroup)))
        {
            // universal keys, or fluid-confirmation serving of an installed
            // group that has not formally activated yet
            slot = &inst.store.value_unchecked(msg.key, msg.keygroup);
        }
        else
        {
            slot = &inst.store.value_for(msg.key);
        }

        if (kind == OpKind::KeyedSum)
        {
            slot->sum += value;
            slot->count += 1;
            if (slot->blob.size() < m_graph.spec.workload.payload_bytes)
            {
                slot->blob.assign(m_graph.spec.workload.payload_bytes, '\0');
            }
            census_apply(inst, msg);
            m_trace.add(m_now, inst.id, Tk::Apply, msg.seq_id, msg.origin, msg.keygroup,
                        via_reroute ? 1 : 0);
            const std::uint32_t every = m_graph.spec.operators[inst.op].emit_every;
            if (every != 0 && slot->count % every == 0)
            {
                StreamMessage out;
                out.kind = MsgKind::Data;
                out.key = msg.key;
                out.value = slot->sum;
                out.payload.resize(16);
                for (int i = 0; i < 8; ++i)
                {
                    out.payload[i] = static_cast<char>((static_cast<std::uint64_t>(slot->sum) >> (8 * i)) & 0xff);
                    out.payload[8 + i] = static_cast<char>((static_cast<std::uint64_t>(slot->count) >> (8 * i)) & 0xff);
                }
                out.event_time = msg.event_time;
                out.emitted_at = msg.emitted_at;
                out.seq_id = next_seq(inst);
                out.origin = inst.id;
                forward_downstream(inst, std::move(out));
            }
        }
        else if (kind == OpKind::SlidingWindow)
        {
            const Tick size = m_graph.spec.operators[inst.op].window_size;
            const Tick slide = m_graph.spec.operators[inst.op].window_slide;
            const Tick et = msg.event_time;
            Tick start = (et / slide) * slide;
            while (start + size > et)
            {
                if (start >= 0)
                {
                    bool found = false;
                    for (auto &w : slot->windows)
                    {
                        if (w.first == start)
                        {
                            w.second += 1;
                            found = true;
                            break;
                        }
                    }
                    if (!found)
                    {
                        slot->windows.emplace_back(start, 1);
                    }
                }
                if (start < slide)
                {
                    break;
                }
                start -= slide;
            }
            slot->count += 1;
            slot->sum += value;
            census_apply(inst, msg);
            m_trace.add(m_now, inst.id, Tk::Apply, msg.seq_id, msg.origin, msg.keygroup,
                        via_reroute ? 1 : 0);
        }
    }

    void Engine::handle_watermark(Instance &inst, ChannelId ch, const StreamMessage &msg)
    {
        auto &w = inst.channel_watermark[ch];
        if (msg.event_time < w)
        {
            raise(Errc::WatermarkRegression,
                  "watermark went backwards on channel " + std::to_string(ch));
        }
        w = msg.event_time;

        Tick min_w = std::numeric_limits<Tick>::max();
        for (ChannelId in : inst.inputs)
        {
            const Channel &c = *m_channels[in];
            if (c.closed || c.is_migration_path)
            {
                continue;
            }
            auto it = inst.channel_watermark.find(in);
            min_w = std::min(min_w, it == inst.channel_watermark.end()
                                        ? std::numeric_limits<Tick>::min()
                                        : it->second);
        }
        if (min_w == std::numeric_limits<Tick>::max())
        {
            min_w = msg.event_time;
        }
        if (min_w > inst.op_watermark)
        {
            inst.op_watermark = min_w;
            if (m_graph.spec.operators[inst.op].kind == OpKind::SlidingWindow)
            {
                fire_windows(inst);
            }
            if (!inst.outputs.empty() && m_graph.spec.operators[inst.op].kind != OpKind::Sink)
            {
                StreamMessage wm;
                wm.kind = MsgKind::Watermark;
                wm.event_time = inst.op_watermark;
                wm.seq_id = next_seq(inst);
                wm.origin = inst.id;
                broadcast_downstream(inst, std::move(wm));
            }
        }
    }

    void Engine::fire_windows(Instance &inst)
    {
        const Tick size = m_graph.spec.operators[inst.op].window_size;
        const Tick wm = inst.op_watermark;
        for (auto &[kg, g] : inst.store.groups_mut())
        {
            if (g.status != KgStatus::Local && g.status != KgStatus::MigratingOut &&
                g.status != KgStatus::Active)
            {
                continue;
            }
            for (auto &[key, v] : g.entries)
            {
                std::vector<std::pair<std::int64_t, std::int64_t>> keep;
                for (auto &wv : v.windows)
                {
                    const Tick end = wv.first + size;
                    if (end <= wm && end > v.fired_through)
                    {
                        m_trace.add(m_now, inst.id, Tk::WatermarkFire, 0, wv.first, wv.second);
                        m_result.window_outputs_hash.emplace_back(
                            m_now, static_cast<std::int64_t>(fnv1a64(key) ^
                                                             static_cast<std::uint64_t>(wv.first * 1000003 + wv.second)));
                        StreamMessage out;
                        out.kind = MsgKind::Data;
                        out.key = key;
                        out.value = wv.second;
                        out.payload.resize(16);
                        for (int i = 0; i < 8; ++i)
                        {
                            out.payload[i] = static_cast<char>((static_cast<std::uint64_t>(wv.first) >> (8 * i)) & 0xff);
                            out.payload[8 + i] = static_cast<char>((static_cast<std::uint64_t>(wv.second) >> (8 * i)) & 0xff);
                        }
                        out.event_time = wv.first + size;
                        out.emitted_at = m_now;
                        out.seq_id = next_seq(inst);
                        out.origin = inst.id;
                        forward_downstream(inst, std::move(out));
                    }
                    else if (end > wm)
                    {
                        keep.push_back(wv);
                    }
                }
                v.windows = std::move(keep);
                if (wm > v.fired_through)
                {
                    v.fired_through = wm;
                }
            }
        }
    }

    void Engine::handle_marker(Instance &inst, const StreamMessage &msg)
    {
        if (m_graph.spec.operators[inst.op].kind == OpKind::Sink)
        {
            m_result.marker_sampled++;
            m_result.latency_samples.emplace_back(m_now, m_now - msg.emitted_at);
            m_trace.add(m_now, inst.id, Tk::MarkerSample, msg.seq_id, m_now - msg.emitted_at,
                        msg.emitted_at);
            return;
        }
        // markers ride through every queue but bypass window buffering
        StreamMessage fwd = msg;
        forward_downstream(inst, std::move(fwd));
    }

    SeqId Engine::next_seq(Instance &inst)
    {
        return (static_cast<SeqId>(inst.id) << 40) | ++inst.seq_counter;
    }

    // ---- emission --------------------------------------------------------------

    void Engine::forward_downstream(Instance &inst, StreamMessage msg)
    {
        auto eit = m_graph.out_edges.find(inst.op);
        if (eit == m_graph.out_edges.end() || eit->second.empty())
        {
            return;
        }
        const EdgeSpec &e = eit->second.front();
        if (e.partitioning == Partitioning::Keyed && msg.kind == MsgKind::Data)
        {
            emit_keyed(inst, e.to, std::move(msg));
            return;
        }
        // forward partitioning / non-keyed payloads: spread markers round-robin,
        // keep records on the instance-aligned peer
        std::vector<ChannelId> candidates;
        for (ChannelId ch : inst.outputs)
        {
            const Channel &c = *m_channels[ch];
            if (!c.closed && !c.is_migration_path && c.receiver_op == e.to)
            {
                candidates.push_back(ch);
            }
        }
        if (candidates.empty())
        {
            return;
        }
        ChannelId pick = candidates[0];
        if (msg.kind == MsgKind::LatencyMarker)
        {
            pick = candidates[inst.rr_marker++ % candidates.size()];
        }
        else if (candidates.size() > 1)
        {
            pick = candidates[inst.rr_forward++ % candidates.size()];
        }
        emit_on(*m_channels[pick], std::move(msg), Lane::Normal);
    }

    void Engine::emit_keyed(Instance &inst, OperatorId down, StreamMessage msg)
    {
        auto rit = inst.routing.find(down);
        if (rit == inst.routing.end())
        {
            raise(Errc::IncompleteTable, "no routing table toward operator " + std::to_string(down));
        }
        msg.keygroup = key_to_keygroup(msg.key, m_graph.spec.num_keygroups);
        const InstanceId target = rit->second.owner_of(msg.keygroup);
        census_emit(msg, down);
        emit_on(channel_between(inst.id, target), std::move(msg), Lane::Normal);
    }

    void Engine::broadcast_downstream(Instance &inst, StreamMessage msg)
    {
        std::vector<ChannelId> outs;
        for (ChannelId ch : inst.outputs)
        {
            const Channel &c = *m_channels[ch];
            if (!c.closed && !c.is_migration_path)
            {
                outs.push_back(ch);
            }
        }
        for (std::size_t i = 0; i < outs.size(); ++i)
        {
            StreamMessage copy = msg;
            if (i + 1 < outs.size())
            {
                emit_on(*m_channels[outs[i]], std::move(copy), Lane::Normal);
            }
            else
            {
                emit_on(*m_channels[outs[i]], std::move(msg), Lane::Normal);
                break;
            }
        }
    }

    void Engine::census_emit(const StreamMessage &msg, OperatorId dest_op)
    {
        if (m_have_stateful && dest_op == m_stateful_op && msg.kind == MsgKind::Data)
        {
            m_result.emitted_to_stateful++;
            m_result.emitted_seqs.push_back(msg.seq_id);
        }
    }

    void Engine::emit_source_due(Instance &inst)
    {
        auto &gen = inst.gen;
        if (gen.done || gen.paused || inst.removed)
        {
            return;
        }
        if (backpressured(inst))
        {
            inst.bp_waiting = true;
            return;
        }

        const auto &wl = m_graph.spec.workload;
        const OpKind kind = m_graph.spec.operators[inst.op].kind;

        if (kind == OpKind::Generator)
        {
            ZipfSampler zipf(wl.key_space, wl.zipf_s);
            // emit everything due by now; pacing comes from the schedule below
            while (gen.emitted < gen.budget)
            {
                const Tick due = static_cast<Tick>(gen.emitted * 1000 / wl.rate);
                if (due > m_now)
                {
                    break;
                }
                const std::uint64_t rank = zipf.sample(gen.rng);
                std::string key = "k" + std::to_string(rank - 1);
                const std::int64_t value =
                    1 + static_cast<std::int64_t>(gen.rng.next_below(
                            static_cast<std::uint64_t>(wl.value_range)));
                StreamMessage msg = make_data(std::move(key), value, m_now, next_seq(inst),
                                              inst.id, 0);
                msg.payload.assign(std::max<std::size_t>(8, wl.payload_bytes), '\0');
                for (int i = 0; i < 8; ++i)
                {
                    msg.payload[i] = static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff);
                }
                gen.emitted++;
                m_trace.add(m_now, inst.id, Tk::Emit, msg.seq_id, 0,
                            static_cast<std::int64_t>(fnv1a64(msg.key)));
                forward_downstream(inst, std::move(msg));
                if (backpressured(inst))
                {
                    inst.bp_waiting = true;
                    return;
                }
            }

            if (gen.next_watermark <= m_now)
            {
                StreamMessage wm;
                wm.kind = MsgKind::Watermark;
                wm.event_time = m_now;
                wm.seq_id = next_seq(inst);
                wm.origin = inst.id;
                broadcast_downstream(inst, std::move(wm));
                gen.next_watermark = m_now + wl.watermark_period;
            }
            if (gen.next_marker <= m_now)
            {
                StreamMessage mk;
                mk.kind = MsgKind::LatencyMarker;
                mk.event_time = m_now;
                mk.emitted_at = m_now;
                mk.seq_id = next_seq(inst);
                mk.origin = inst.id;
                m_result.marker_emitted++;
                forward_downstream(inst, std::move(mk));
                gen.next_marker = m_now + wl.marker_period;
            }

            if (gen.emitted >= gen.budget)
            {
                // trailing watermark so downstream windows drain
                StreamMessage wm;
                wm.kind = MsgKind::Watermark;
                wm.event_time = m_now + 1;
                wm.seq_id = next_seq(inst);
                wm.origin = inst.id;
                broadcast_downstream(inst, std::move(wm));
                gen.done = true;
                return;
            }
            const Tick next_rec = static_cast<Tick>(gen.emitted * 1000 / wl.rate);
            Tick next = std::min(next_rec, std::min(gen.next_watermark, gen.next_marker));
            schedule_emit(inst, std::max(next, m_now + 1));
        }
        else if (kind == OpKind::Scripted)
        {
            auto it = m_scripts.find(inst.id);
            if (it == m_scripts.end())
            {
                return;
            }
            const auto &script = it->second;
            while (gen.script_pos < script.size() && script[gen.script_pos].tick <= m_now)
            {
                StreamMessage msg = script[gen.script_pos].msg;
                msg.seq_id = next_seq(inst);
                msg.origin = inst.id;
                if (msg.kind == MsgKind::Data)
                {
                    if (msg.payload.size() < 8)
                    {
                        msg.payload.assign(8, '\0');
                        for (int i = 0; i < 8; ++i)
                        {
                            msg.payload[i] = static_cast<char>(
                                (static_cast<std::uint64_t>(msg.value) >> (8 * i)) & 0xff);
                        }
                    }
                    msg.emitted_at = m_now;
                    if (msg.event_time == 0)
                    {
                        msg.event_time = m_now;
                    }
                    m_trace.add(m_now, inst.id, Tk::Emit, msg.seq_id, 0,
                                static_cast<std::int64_t>(fnv1a64(msg.key)));
                }
                else if (msg.kind == MsgKind::LatencyMarker)
                {
                    msg.emitted_at = m_now;
                    m_result.marker_emitted++;
                }
                gen.script_pos++;
                gen.emitted++;
                if (msg.kind == MsgKind::Watermark)
                {
                    broadcast_downstream(inst, std::move(msg));
                }
                else
                {
                    forward_downstream(inst, std::move(msg));
                }
                if (backpressured(inst))
                {
                    inst.bp_waiting = true;
                    return;
                }
            }
            if (gen.script_pos >= script.size())
            {
                gen.done = true;
                return;
            }
            schedule_emit(inst, script[gen.script_pos].tick);
        }
    }

    RunResult Engine::take_result()
    {
        for (const auto &instp : m_instances)
        {
            const Instance &inst = *instp;
            if (!inst.stateful)
            {
                continue;
            }
            for (const auto &[kg, g] : inst.store.groups())
            {
                for (const auto &[key, v] : g.entries)
                {
                    auto &agg = m_result.final_state[key];
                    agg.first += v.sum;
                    agg.second += v.count;
                }
            }
        }
        m_result.end_tick = m_now;
        return std::move(m_result);
    }

    std::map<std::string, std::int64_t> Snapshot::keyed_sums() const
    {
        std::map<std::string, std::int64_t> out;
        for (const auto &inst : instances)
        {
            for (const auto &[kg, g] : inst.groups)
            {
                for (const auto &[key, v] : g.entries)
                {
                    out[key] += v.sum;
                }
            }
        }
        return out;
    }
}
