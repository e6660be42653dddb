#pragma once

#include "rill/error.hpp"
#include "rill/types.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace rill
{
    // FNV-1a 64-bit; fixed so key-group assignment is stable across runs and
    // platforms.
    inline std::uint64_t fnv1a64(std::string_view bytes) noexcept
    {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char c : bytes)
        {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        return h;
    }

    inline KeyGroup key_to_keygroup(std::string_view key, std::uint32_t num_keygroups)
    {
        if (num_keygroups == 0)
        {
            raise(Errc::InvalidPartitioning, "num_keygroups must be >= 1");
        }
        return static_cast<KeyGroup>(fnv1a64(key) % num_keygroups);
    }

    enum class KgStatus : std::uint8_t
    {
        Local,
        MigratingOut,
        MigratedOut,
        Incoming,
        InactiveArrived,
        Active,
    };

    const char *kg_status_name(KgStatus s) noexcept;

    class RoutingTable
    {
    public:
        RoutingTable() = default;
        RoutingTable(std::uint32_t num_keygroups, const std::map<KeyGroup, InstanceId> &owner)
            : m_num_keygroups(num_keygroups), m_owner(owner)
        {
        }

        std::uint64_t version() const noexcept { return m_version; }
        std::uint32_t num_keygroups() const noexcept { return m_num_keygroups; }

        InstanceId owner_of(KeyGroup kg) const;
        InstanceId lookup(std::string_view key) const;

        // Atomically reassigns the given key-groups; every update bumps the
        // version exactly once.
        std::uint64_t apply_update(const std::map<KeyGroup, InstanceId> &reassignments);

        const std::map<KeyGroup, InstanceId> &owners() const noexcept { return m_owner; }

        static RoutingTable restored(std::uint32_t num_keygroups,
                                     std::map<KeyGroup, InstanceId> owner,
                                     std::uint64_t version)
        {
            RoutingTable t;
            t.m_num_keygroups = num_keygroups;
            t.m_owner = std::move(owner);
            t.m_version = version;
            return t;
        }

    private:
        std::uint32_t m_num_keygroups = 0;
        std::uint64_t m_version = 0;
        std::map<KeyGroup, InstanceId> m_owner;
    };

    struct StateChunk
    {
        std::shared_ptr<const ChunkBody> body;
    };

    // Keyed state partitioned into key-groups; one store per operator instance.
    // Key-groups move through the lifecycle
    //   Local -> MigratingOut -> MigratedOut          (source side)
    //   Incoming -> InactiveArrived -> Active         (target side)
    // and entries are only readable in Local, MigratingOut or Active.
    class KeyedStateStore
    {
    public:
        KeyedStateStore() = default;
        explicit KeyedStateStore(std::uint32_t num_keygroups) : m_num_keygroups(num_keygroups) {}

        std::uint32_t num_keygroups() const noexcept { return m_num_keygroups; }

        void assign(KeyGroup kg, KgStatus status);
        KgStatus status(KeyGroup kg) const;
        bool owns(KeyGroup kg) const { return m_groups.count(kg) != 0; }

        bool readable(KeyGroup kg) const;

        // Normal operator access; throws unless the key-group is readable.
        StateValue &value_for(std::string_view key);
        const StateValue *peek(std::string_view key) const;

        // Protocol-side access that bypasses the lifecycle guard. Used for
        // fluid confirmation (serving an installed-but-not-yet-active group)
        // and for the universal-keys oracle.
        StateValue &value_unchecked(std::string_view key, KeyGroup kg);

        std::size_t key_count() const;
        std::size_t key_count(KeyGroup kg) const;

        // Extracts each key-group in ascending order, transitioning
        // Local -> MigratingOut -> MigratedOut and clearing local entries.
        std::vector<StateChunk> extract_chunks(const std::vector<KeyGroup> &kgs,
                                               std::int32_t subscale_id,
                                               InstanceId source, InstanceId target);

        // Single-group extraction used by streaming migration.
        StateChunk extract_one(KeyGroup kg, std::int32_t subscale_id,
                               InstanceId source, InstanceId target);

        // Removes a sub-key-group fragment (keys whose secondary hash maps to
        // `subkg` of `fanout`); the group status is unchanged. Fetch-on-demand
        // granularity only.
        StateChunk extract_subkg(KeyGroup kg, std::int32_t subkg, std::uint32_t fanout,
                                 InstanceId source, InstanceId target);

        // Installs entries for an Incoming key-group; activation is a separate
        // protocol decision.
        KgStatus install_chunk(const StateChunk &chunk);

        // Merges a fragment into the local group regardless of status.
        void install_subkg(const StateChunk &chunk, bool overwrite);

        void activate(KeyGroup kg);

        const std::map<std::string, StateValue> &entries_of(KeyGroup kg) const;
        std::map<std::string, StateValue> all_entries() const;

        // Snapshot support: full structural copy.
        struct GroupState
        {
            KgStatus status = KgStatus::Local;
            bool installed = false;
            std::map<std::string, StateValue> entries;

            bool operator==(const GroupState &) const = default;
        };

        const std::map<KeyGroup, GroupState> &groups() const noexcept { return m_groups; }
        std::map<KeyGroup, GroupState> &groups_mut() noexcept { return m_groups; }
        void restore_groups(std::map<KeyGroup, GroupState> groups) { m_groups = std::move(groups); }

    private:
        GroupState &group(KeyGroup kg);
        const GroupState &group(KeyGroup kg) const;

        std::uint32_t m_num_keygroups = 0;
        std::map<KeyGroup, GroupState> m_groups;
    };

    inline std::int32_t subkg_of(std::string_view key, std::uint32_t fanout)
    {
        if (fanout <= 1)
        {
            return 0;
        }
        // Secondary hash decorrelated from the key-group hash.
        return static_cast<std::int32_t>((fnv1a64(key) >> 32) % fanout);
    }

    std::string base64_encode(std::string_view bytes);
    std::string base64_decode(std::string_view text);

    // Snapshot dump format: one JSON object per line, {kg, key, value}, with
    // key and value base64-encoded.
    std::string dump_store_jsonl(const KeyedStateStore &store);
}
