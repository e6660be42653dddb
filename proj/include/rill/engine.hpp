#pragma once

#include "rill/graph.hpp"
#include "rill/plan.hpp"
#include "rill/rng.hpp"
#include "rill/state.hpp"
#include "rill/trace.hpp"
#include "rill/types.hpp"

#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace rill
{
    inline constexpr InstanceId kCoordinator = kNoInstance - 1;

    struct ScaleOptions
    {
        bool inter_channel_scheduling = true;  // also enables fluid confirmation
        bool intra_channel_scheduling = true;
        bool relaxed_ordering = false;         // intra-channel may cross watermarks
        std::uint32_t schedule_buffer = 200;
        std::uint32_t reroute_capacity = 64;
        Tick reroute_timeout = 8;
        std::uint32_t max_subscale_size = 4;   // 0 = unbounded
        std::uint32_t concurrency_cap = 2;     // subscales per node
        bool serial_dispatch = false;          // one subscale system-wide at a time
        std::uint32_t fetch_fanout = 4;        // sub-key-groups per key-group
        Tick fod_update_stagger = 0;           // per-predecessor routing update delay
        Tick fod_backstop = 64;                // max fetch-grant deferral age
    };

    struct ScaleRequest
    {
        OperatorId op = 0;
        std::uint32_t new_parallelism = 1;
        Protocol protocol = Protocol::Drrs;
        Tick at_tick = 0;
    };

    struct ScriptEntry
    {
        Tick tick = 0;
        StreamMessage msg;
    };

    enum class SuspendReason : std::uint8_t
    {
        StateWait = 0,  // frontmost records need unavailable state
        Alignment = 1,  // channels blocked by a barrier alignment
        FetchWait = 2,  // waiting on a sub-key-group fetch
    };

    // ---- channels ------------------------------------------------------

    struct CacheEntry
    {
        StreamMessage msg;
        Lane lane = Lane::Normal;
    };

    struct Channel
    {
        ChannelId id = kNoChannel;
        InstanceId sender = kNoInstance;
        InstanceId receiver = kNoInstance;
        OperatorId sender_op = 0;
        OperatorId receiver_op = 0;
        Tick latency = 1;
        std::uint32_t capacity = 1000;
        bool is_migration_path = false;
        std::int32_t path_subscale = kNoSubscale;
        std::uint64_t created_order = 0;
        bool closed = false;
        bool hold_drain = false; // scenario hook: pin the output cache

        std::deque<CacheEntry> output_cache;
        std::uint32_t in_transit = 0;
        Tick last_arrival = 0; // FIFO clamp under latency jitter
        std::deque<StreamMessage> in_normal;
        std::deque<StreamMessage> in_priority;
        std::uint64_t arrivals = 0;   // arrival index counter
        std::uint64_t delivered = 0;

        std::size_t queued() const { return in_normal.size() + in_priority.size(); }
    };

    // ---- per-instance protocol state ------------------------------------

    enum class Epoch : std::uint8_t
    {
        Preceding,
        Following,
    };

    struct SubscaleView
    {
        Subscale sub;
        // source side
        std::size_t extract_cursor = 0;
        bool extraction_started = false;
        bool extraction_done = false;
        bool source_drained_reported = false;
        std::vector<StreamMessage> reroute_buffer;
        bool flush_armed = false;
        ChannelId path = kNoChannel;
        std::set<ChannelId> confirms_seen;
        std::uint32_t confirms_expected = 0;
        std::uint64_t moved_keys = 0;
        std::vector<StateChunk> batch; // all-at-once accumulation
        // target side
        std::map<ChannelId, Epoch> epoch;
        std::uint32_t pending_epochs = 0;
        std::map<KeyGroup, std::deque<StreamMessage>> pending_reroutes;
        std::uint32_t installed_kgs = 0;
        std::uint32_t active_kgs = 0;
        bool target_done_reported = false;

        bool aligned() const { return pending_epochs == 0; }
    };

    struct Alignment
    {
        enum class Kind : std::uint8_t { Checkpoint, SyncBarrier };
        Kind kind = Kind::Checkpoint;
        std::int64_t id = -1;        // checkpoint id or session id
        std::set<ChannelId> expected;
        std::set<ChannelId> arrived;
        bool complete() const { return arrived.size() >= expected.size(); }
    };

    struct GeneratorState
    {
        Rng rng{1};
        std::uint64_t emitted = 0;
        std::uint64_t budget = 0;
        Tick next_watermark = 0;
        Tick next_marker = 0;
        bool paused = false;
        bool done = false;
        bool emit_scheduled = false;
        std::size_t script_pos = 0;
    };

    struct Instance
    {
        InstanceId id = kNoInstance;
        OperatorId op = 0;
        std::uint32_t slot = 0;
        bool removed = false;
        bool draining = false;

        std::vector<ChannelId> inputs;
        std::vector<ChannelId> outputs;
        std::map<OperatorId, RoutingTable> routing; // per keyed downstream edge

        KeyedStateStore store;
        std::map<ChannelId, Tick> channel_watermark;
        Tick op_watermark = std::numeric_limits<Tick>::min();

        GeneratorState gen;
        std::uint64_t seq_counter = 0;
        std::uint32_t rr_forward = 0;   // round-robin cursor for forward edges
        std::uint32_t rr_marker = 0;

        // processing loop
        Tick next_free = 0;
        bool process_scheduled = false;
        bool suspended = false;
        Tick suspend_since = 0;
        SuspendReason suspend_reason = SuspendReason::StateWait;
        bool bp_waiting = false;
        std::size_t rr_channel = 0;     // rotation cursor over inputs

        // scaling
        std::map<std::int32_t, SubscaleView> subscales;
        std::map<KeyGroup, std::int32_t> kg_subscale;
        bool scale_aware = false;
        bool universal = false;        // Unbound: any record against local state
        std::optional<Alignment> alignment;
        std::vector<StreamMessage> deferred_signals;
        std::int64_t last_forwarded_ckpt = -1;

        // fetch-on-demand
        std::map<std::pair<KeyGroup, std::int32_t>, bool> subkg_local;
        std::set<std::pair<KeyGroup, std::int32_t>> fetch_outstanding;

        bool stateful = false;
    };

    // ---- scaling sessions ------------------------------------------------

    struct SessionState
    {
        std::uint32_t id = 0;
        OperatorId op = 0;
        Protocol protocol = Protocol::Drrs;
        MigrationPlan plan;                       // owners in instance ids
        std::vector<Subscale> subscales;          // coordinator view of phases
        std::map<std::int32_t, Tick> injected_at;
        std::map<std::int32_t, std::size_t> sub_index;
        std::map<InstanceId, std::uint32_t> in_flight;
        std::map<InstanceId, std::size_t> held_keys;
        Tick started_at = 0;
        Tick ended_at = -1;
        bool active = true;
        bool terminated = false;
        std::uint32_t completed = 0;
        std::uint32_t dispatched = 0;
        std::uint64_t sync_cutoff = 0;  // channel creation order at barrier injection
        std::set<std::pair<KeyGroup, std::int32_t>> grant_inflight;
        std::map<std::int32_t, std::uint8_t> done_mask; // bit0 source, bit1 target
        std::vector<InstanceId> added_instances;
        std::vector<InstanceId> draining_instances;
        // stop-restart
        Tick halt_tick = -1;
        // fetch-on-demand
        std::map<std::pair<KeyGroup, std::int32_t>, InstanceId> subkg_holder;
        std::map<std::pair<KeyGroup, std::int32_t>, std::uint32_t> subkg_moves;
        std::uint32_t fod_pending_updates = 0;
        // unbound / otfs chunk accounting
        std::uint32_t chunks_expected = 0;
        std::uint32_t chunks_installed = 0;
    };

    // ---- snapshots -------------------------------------------------------

    struct SubscaleViewSnapshot
    {
        Subscale sub;
        std::size_t extract_cursor = 0;
        bool extraction_started = false;
        bool extraction_done = false;
        bool source_drained_reported = false;
        std::set<ChannelId> confirms_seen;
        std::uint32_t confirms_expected = 0;
        std::uint64_t moved_keys = 0;
        std::map<ChannelId, Epoch> epoch;
        std::uint32_t pending_epochs = 0;
        std::map<KeyGroup, std::deque<StreamMessage>> pending_reroutes;
        std::uint32_t installed_kgs = 0;
        std::uint32_t active_kgs = 0;
        bool target_done_reported = false;
        ChannelId path = kNoChannel;
    };

    struct InstanceSnapshot
    {
        InstanceId id = kNoInstance;
        OperatorId op = 0;
        std::uint32_t slot = 0;
        bool draining = false;
        std::map<KeyGroup, KeyedStateStore::GroupState> groups;
        std::map<ChannelId, Tick> channel_watermark;
        Tick op_watermark = std::numeric_limits<Tick>::min();
        std::string gen_rng;
        std::uint64_t gen_emitted = 0;
        Tick gen_next_watermark = 0;
        Tick gen_next_marker = 0;
        std::size_t gen_script_pos = 0;
        std::uint64_t seq_counter = 0;
        std::uint32_t rr_forward = 0;
        std::uint32_t rr_marker = 0;
        std::size_t rr_channel = 0;
        std::map<std::int32_t, SubscaleViewSnapshot> subscales;
        std::map<KeyGroup, std::int32_t> kg_subscale;
        bool scale_aware = false;
        bool universal = false;
        std::map<OperatorId, std::map<KeyGroup, InstanceId>> routing_owners;
        std::map<OperatorId, std::uint64_t> routing_versions;
        std::vector<StreamMessage> deferred_signals;
        // sink bookkeeping travels with the snapshot so a restored run keeps
        // appending to the same output log
        std::map<std::string, std::vector<std::pair<std::int64_t, std::int64_t>>> sink_outputs;
    };

    struct ChannelSnapshot
    {
        ChannelId id = kNoChannel;
        InstanceId sender = kNoInstance;
        InstanceId receiver = kNoInstance;
        OperatorId sender_op = 0;
        OperatorId receiver_op = 0;
        Tick latency = 1;
        std::uint32_t capacity = 1000;
        bool is_migration_path = false;
        std::int32_t path_subscale = kNoSubscale;
        std::uint64_t created_order = 0;
        bool closed = false;
    };

    struct Snapshot
    {
        std::int64_t checkpoint_id = -1;
        Tick injected_at = 0;
        bool complete = false;
        std::set<InstanceId> awaited;
        std::vector<InstanceSnapshot> instances;
        std::vector<ChannelSnapshot> channels;
        std::map<OperatorId, std::vector<InstanceId>> slots;
        std::vector<SessionState> sessions; // coordinator state at injection
        std::uint32_t next_session_id = 0;
        std::int32_t next_subscale_id = 0;
        InstanceId next_instance_id = 0;
        ChannelId next_channel_id = 0;
        std::uint64_t next_channel_order = 0;
        std::uint64_t ckpt_counter = 0;

        // keyed-state-only view, for quick assertions
        std::map<std::string, std::int64_t> keyed_sums() const;
    };

    // ---- run artifacts ----------------------------------------------------

    struct RunResult
    {
        std::map<std::string, std::pair<std::int64_t, std::int64_t>> final_state; // key -> (sum, count)
        std::map<std::pair<InstanceId, std::string>, std::vector<SeqId>> apply_log;
        std::uint64_t emitted_to_stateful = 0;
        std::vector<SeqId> emitted_seqs;
        std::vector<SeqId> applied_seqs;
        std::map<std::string, std::vector<std::pair<std::int64_t, std::int64_t>>> sink_outputs;
        std::vector<std::pair<Tick, Tick>> latency_samples; // (arrival tick, latency)
        std::vector<std::pair<Tick, std::int64_t>> window_outputs_hash; // (fire tick, hash) per firing
        std::uint64_t marker_emitted = 0;
        std::uint64_t marker_sampled = 0;
        Tick end_tick = 0;
        bool authoritative = true; // false for the unbound oracle
    };

    struct ExecutedEvent
    {
        Tick tick = 0;
        InstanceId instance = kNoInstance;
        std::string kind;
    };

    // ---- engine -----------------------------------------------------------

    class Engine
    {
    public:
        Engine(DataflowGraph graph, ScaleOptions options);

        // Build an engine resuming from a snapshot. Channels come back empty;
        // sources replay from their captured positions.
        Engine(DataflowGraph graph, ScaleOptions options, const Snapshot &snap);

        Tick now() const noexcept { return m_now; }

        void add_scale_request(const ScaleRequest &req);
        void schedule_checkpoint(Tick at, std::int64_t id = -1);
        void set_script(OperatorId op, std::uint32_t slot, std::vector<ScriptEntry> script);
        void hold_drain(InstanceId sender, InstanceId receiver, bool held);

        ExecutedEvent step();             // executes exactly one event
        void run();                       // drains the event queue
        bool drained() const { return m_events.empty(); }

        // direct access used by unit tests and the harness
        Instance &instance(InstanceId id);
        const Instance &instance(InstanceId id) const;
        const std::vector<InstanceId> &slots_of(OperatorId op) const;
        Channel &channel_between(InstanceId sender, InstanceId receiver);
        Channel &channel(ChannelId id);
        std::size_t instance_count() const { return m_instances.size(); }

        // spec-level channel operations
        void enqueue(Channel &ch, StreamMessage msg, Lane lane);
        std::size_t redirect_output_cache(Channel &from, Channel &to,
                                          const std::set<KeyGroup> &migrating);

        const TraceLog &trace() const noexcept { return m_trace; }
        TraceLog &trace_mut() noexcept { return m_trace; }

        const Snapshot &snapshot(std::int64_t checkpoint_id) const;
        bool has_snapshot(std::int64_t checkpoint_id) const;

        RunResult take_result();

        const std::vector<SessionState> &sessions() const noexcept { return m_sessions; }
        const ScaleOptions &options() const noexcept { return m_options; }
        const DataflowGraph &graph() const noexcept { return m_graph; }

        // releases a session's scaling machinery; SessionIncomplete unless all
        // its subscales have finished (or were cancelled)
        void finalize_session(std::uint32_t session_id);

        // session summary for the control-plane external interface
        std::string session_summary_json() const;

    private:
        enum class EvKind : std::uint8_t
        {
            Arrive,
            Process,
            EmitSource,
            ExtractStep,
            FlushReroute,
            ScaleRequestDue,
            ScaleDispatch,
            CkptInject,
            Quiesce,
            FodRouteUpdate,
            FodPush,
            FodFetch,
            FodGrant,
        };

        struct Event
        {
            Tick tick = 0;
            InstanceId instance = kNoInstance;
            std::uint64_t order = 0;
            EvKind kind = EvKind::Process;
            std::uint32_t a = 0;
            std::int64_t b = 0;
            std::int64_t c = 0;
            StreamMessage msg;

            bool operator<(const Event &o) const
            {
                if (tick != o.tick) return tick < o.tick;
                if (instance != o.instance) return instance < o.instance;
                return order < o.order;
            }
        };

        // construction
        void instantiate_base();
        InstanceId create_instance(OperatorId op, std::uint32_t slot);
        ChannelId create_channel(InstanceId sender, InstanceId receiver, bool path, std::int32_t sub);
        void wire_operator_edges();
        void init_routing();
        void init_generator(Instance &inst);
        void restore_from(const Snapshot &snap);

        // event plumbing
        void push_event(Tick tick, InstanceId inst, EvKind kind, std::uint32_t a = 0,
                        std::int64_t b = 0, std::int64_t c = 0, StreamMessage msg = {});
        void dispatch_event(Event &ev);
        void wake(InstanceId inst);
        void schedule_process(Instance &inst, Tick at);
        void schedule_emit(Instance &inst, Tick at);

        // channels
        void emit_on(Channel &ch, StreamMessage msg, Lane lane);
        void try_drain(Channel &ch);
        void arrive(Channel &ch, StreamMessage &&msg, Lane lane);
        bool backpressured(const Instance &inst) const;
        void wake_bp_senders(ChannelId ch);

        // selection
        struct Selected
        {
            enum class Kind : std::uint8_t { Msg, Suspended, Idle } kind = Kind::Idle;
            ChannelId ch = kNoChannel;
            StreamMessage msg;
            SuspendReason reason = SuspendReason::StateWait;
        };
        Selected select_next(Instance &inst);
        bool channel_blocked(const Instance &inst, ChannelId ch) const;
        bool data_eligible(const Instance &inst, ChannelId ch, const StreamMessage &msg) const;
        bool head_eligible(Instance &inst, ChannelId ch);
        bool scheduling_enabled(const Instance &inst, bool intra) const;
        bool has_pending_input(const Instance &inst) const;

        // processing
        void process_one(Instance &inst);
        void handle_message(Instance &inst, ChannelId ch, StreamMessage &&msg);
        void apply_data(Instance &inst, const StreamMessage &msg, bool via_reroute);
        void handle_watermark(Instance &inst, ChannelId ch, const StreamMessage &msg);
        void handle_marker(Instance &inst, const StreamMessage &msg);
        void fire_windows(Instance &inst);
        void forward_downstream(Instance &inst, StreamMessage msg);
        void emit_keyed(Instance &inst, OperatorId down, StreamMessage msg);
        void broadcast_downstream(Instance &inst, StreamMessage msg);
        void emit_source_due(Instance &inst);
        SeqId next_seq(Instance &inst);

        // protocol handlers (drrs)
        void handle_trigger(Instance &inst, ChannelId ch, StreamMessage &&msg);
        void handle_confirm(Instance &inst, ChannelId ch, StreamMessage &&msg);
        void handle_rerouted_confirm(Instance &inst, StreamMessage &&msg);
        void handle_rerouted_record(Instance &inst, StreamMessage &&msg);
        void handle_chunk(Instance &inst, StreamMessage &&msg);
        void on_extract_step(Instance &inst, std::int32_t sid);
        void sweep_kg_to_reroute(Instance &inst, SubscaleView &sv, KeyGroup kg);
        void sweep_confirm_channel(Instance &inst, SubscaleView &sv, ChannelId ch);
        void buffer_reroute(Instance &inst, SubscaleView &sv, StreamMessage msg);
        void flush_reroute(Instance &inst, SubscaleView &sv);
        void activate_kg(Instance &inst, SubscaleView &sv, KeyGroup kg);
        void apply_pending_reroutes(Instance &inst, SubscaleView &sv, KeyGroup kg);
        void maybe_source_drained(Instance &inst, SubscaleView &sv);
        void maybe_target_done(Instance &inst, SubscaleView &sv);
        ChannelId ensure_path(Instance &source, SubscaleView &sv);
        bool subscale_data_pending(const Instance &inst, const SubscaleView &sv) const;
        bool confirm_must_wait(const Instance &inst, ChannelId ch, SeqId seq) const;

        // alignment / checkpoints
        void handle_checkpoint_barrier(Instance &inst, ChannelId ch, StreamMessage &&msg);
        void begin_alignment(Instance &inst, Alignment::Kind kind, std::int64_t id);
        void complete_alignment(Instance &inst);
        void snapshot_instance(Instance &inst, std::int64_t ckpt_id);
        void forward_ckpt_barrier(Instance &inst, std::int64_t ckpt_id);
        void on_ckpt_inject(std::int64_t id);
        void finish_checkpoint_if_done(std::int64_t id);
        void process_deferred_signals(Instance &inst);

        // coordinator
        void on_scale_request(const ScaleRequest &req);
        SessionState &make_session(const ScaleRequest &req,
                                   const std::map<KeyGroup, InstanceId> &owner_now);
        void deploy_update(SessionState &s, std::uint32_t n_new);
        void remap_plan_to_instances(SessionState &s, std::uint32_t n_new);
        void scale_dispatch(std::uint32_t session_id);
        void inject_subscale(SessionState &s, Subscale &sub);
        void register_subscale_at_instances(SessionState &s, const Subscale &sub);
        void subscale_side_done(std::int32_t sid, bool source_side, std::uint64_t moved_keys);
        void complete_subscale(SessionState &s, std::int32_t sid);
        void finalize_scaling(SessionState &s);
        void cleanup_instance_scaling(Instance &inst);
        std::map<KeyGroup, InstanceId> current_owner_map(OperatorId op) const;
        SessionState *active_session(OperatorId op);
        SessionState *session_by_id(std::uint32_t id);
        SessionState *session_of_subscale(std::int32_t sid);
        std::vector<InstanceId> predecessor_instances(OperatorId scaling_op) const;
        void update_predecessor_routing(OperatorId scaling_op,
                                        const std::map<KeyGroup, InstanceId> &reassign);

        // baselines
        void dispatch_stop_restart(SessionState &s);
        void on_quiesce(std::uint32_t session_id);
        void dispatch_unbound(SessionState &s);
        void dispatch_otfs(SessionState &s);
        void handle_sync_barrier(Instance &inst, ChannelId ch, StreamMessage &&msg);
        void otfs_alignment_complete(Instance &inst, std::int64_t session_id);
        void dispatch_fod(SessionState &s);
        void on_fod_route_update(std::uint32_t session_id, InstanceId pred);
        void on_fod_push(InstanceId inst_id, std::uint32_t session_id);
        void on_fod_fetch(InstanceId requester, std::uint32_t session_id, KeyGroup kg, std::int32_t subkg);
        void on_fod_grant(InstanceId holder, std::uint32_t session_id, KeyGroup kg,
                          std::int32_t subkg, InstanceId requester, Tick first_clear, Tick age0);
        bool fod_visible_pending(const Instance &inst, KeyGroup kg, std::int32_t subkg) const;
        ChannelId ensure_service_channel(InstanceId from, InstanceId to);
        void fod_issue_fetch(Instance &inst, KeyGroup kg, std::int32_t subkg);
        bool fod_record_local(const Instance &inst, const StreamMessage &msg) const;
        void fod_maybe_complete(SessionState &s);

        // suspension bookkeeping
        void note_suspend(Instance &inst, SuspendReason reason);
        void note_resume(Instance &inst);

        // census
        void census_emit(const StreamMessage &msg, OperatorId dest_op);
        void census_apply(Instance &inst, const StreamMessage &msg);

        DataflowGraph m_graph;
        ScaleOptions m_options;
        Tick m_now = 0;
        std::uint64_t m_event_order = 0;
        std::set<Event> m_events;

        std::vector<std::unique_ptr<Instance>> m_instances;
        std::vector<std::unique_ptr<Channel>> m_channels;
        std::map<OperatorId, std::vector<InstanceId>> m_slots;
        InstanceId m_next_instance = 0;
        ChannelId m_next_channel = 0;
        std::uint64_t m_channel_order = 0;
        std::map<std::pair<InstanceId, InstanceId>, ChannelId> m_channel_index;

        std::vector<SessionState> m_sessions;
        std::uint32_t m_next_session = 0;
        std::int32_t m_next_subscale = 0;
        std::vector<ScaleRequest> m_pending_requests;
        std::map<InstanceId, std::vector<ScriptEntry>> m_scripts;
        std::map<InstanceId, std::uint32_t> m_node_inflight; // subscales per node
        std::map<InstanceId, std::size_t> m_node_held;       // keys held per node

        std::map<std::int64_t, Snapshot> m_snapshots;
        std::uint64_t m_ckpt_counter = 0;

        Rng m_jitter_rng{1};
        TraceLog m_trace;
        RunResult m_result;
        OperatorId m_stateful_op = 0;
        bool m_have_stateful = false;

        friend struct EngineInspector;
    };

    // control-plane helper shared with tests: predecessor-side plan for
    // injecting scaling signals when a checkpoint barrier may be in flight.
    struct CkptMergePlan
    {
        enum class Kind : std::uint8_t { Plain, FuseIntoCached } kind = Kind::Plain;
        std::size_t cache_pos = 0; // position of the checkpoint barrier entry
    };

    CkptMergePlan merge_with_checkpoint(const Channel &toward_source);
}
