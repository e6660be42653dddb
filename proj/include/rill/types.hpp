#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace rill
{
    using Tick = std::int64_t;
    using InstanceId = std::uint32_t;
    using OperatorId = std::uint32_t;
    using ChannelId = std::uint32_t;
    using KeyGroup = std::uint32_t;
    using SeqId = std::uint64_t;

    inline constexpr InstanceId kNoInstance = std::numeric_limits<InstanceId>::max();
    inline constexpr ChannelId kNoChannel = std::numeric_limits<ChannelId>::max();
    inline constexpr std::int32_t kNoSubscale = -1;

    enum class MsgKind : std::uint8_t
    {
        Data,
        Watermark,
        LatencyMarker,
        TriggerBarrier,
        ConfirmBarrier,
        CheckpointBarrier,
        StateChunk,
        ReroutedRecord,
        ReroutedConfirm,
    };

    const char *msg_kind_name(MsgKind k) noexcept;

    enum class Lane : std::uint8_t
    {
        Normal,
        Priority,
    };

    // Per-key state value. The integer pair is the fast path for the keyed-sum
    // workload; `windows` holds (window_start, count) pairs for the sliding-window
    // operator; `blob` carries opaque padding so state size is configurable.
    struct StateValue
    {
        std::int64_t sum = 0;
        std::int64_t count = 0;
        std::vector<std::pair<std::int64_t, std::int64_t>> windows;
        std::int64_t fired_through = std::numeric_limits<std::int64_t>::min();
        std::string blob;

        bool operator==(const StateValue &) const = default;
    };

    std::string encode_state_value(const StateValue &v);
    StateValue decode_state_value(const std::string &bytes);

    // Immutable body of a state transfer. `subkg >= 0` marks a sub-key-group
    // fragment (fetch-on-demand granularity); otherwise the chunk covers the
    // whole key-group.
    struct ChunkBody
    {
        std::int32_t subscale_id = kNoSubscale;
        KeyGroup keygroup = 0;
        std::map<std::string, StateValue> entries;
        InstanceId source = kNoInstance;
        InstanceId target = kNoInstance;
        bool batch_end = false;
        std::int32_t subkg = -1;
    };

    struct StreamMessage
    {
        MsgKind kind = MsgKind::Data;
        std::string key;
        std::int64_t value = 0;
        std::string payload;
        Tick event_time = 0;
        SeqId seq_id = 0;
        std::int32_t subscale_id = kNoSubscale;
        std::int64_t checkpoint_id = -1;
        InstanceId origin = kNoInstance;
        KeyGroup keygroup = 0;
        Tick emitted_at = 0;
        std::uint64_t arrival_index = 0; // per-channel enqueue order at the receiver
        bool carries_trigger = false;
        bool carries_confirm = false;
        std::shared_ptr<const ChunkBody> chunk;
    };

    inline StreamMessage make_data(std::string key, std::int64_t value, Tick event_time,
                                   SeqId seq, InstanceId origin, KeyGroup kg)
    {
        StreamMessage m;
        m.kind = MsgKind::Data;
        m.key = std::move(key);
        m.value = value;
        m.event_time = event_time;
        m.emitted_at = event_time;
        m.seq_id = seq;
        m.origin = origin;
        m.keygroup = kg;
        return m;
    }
}
