#include "rill/state.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

namespace rill
{
    const char *errc_name(Errc c) noexcept
    {
        switch (c)
        {
        case Errc::GraphCycle: return "GraphCycle";
        case Errc::InvalidPartitioning: return "InvalidPartitioning";
        case Errc::ChannelClosed: return "ChannelClosed";
        case Errc::SenderMismatch: return "SenderMismatch";
        case Errc::SimulationDrained: return "SimulationDrained";
        case Errc::DuplicateCheckpoint: return "DuplicateCheckpoint";
        case Errc::IncompleteTable: return "IncompleteTable";
        case Errc::IllegalStateTransition: return "IllegalStateTransition";
        case Errc::DuplicateChunk: return "DuplicateChunk";
        case Errc::UnexpectedChunk: return "UnexpectedChunk";
        case Errc::SubscaleOverlap: return "SubscaleOverlap";
        case Errc::StaleTrigger: return "StaleTrigger";
        case Errc::ProtocolError: return "ProtocolError";
        case Errc::DuplicateConfirm: return "DuplicateConfirm";
        case Errc::NotMigrated: return "NotMigrated";
        case Errc::UnknownOperator: return "UnknownOperator";
        case Errc::DeployConflict: return "DeployConflict";
        case Errc::SessionIncomplete: return "SessionIncomplete";
        case Errc::IncompleteTrace: return "IncompleteTrace";
        case Errc::MalformedRecord: return "MalformedRecord";
        case Errc::WatermarkRegression: return "WatermarkRegression";
        case Errc::BadConfig: return "BadConfig";
        }
        return "UnknownError";
    }

    const char *msg_kind_name(MsgKind k) noexcept
    {
        switch (k)
        {
        case MsgKind::Data: return "data";
        case MsgKind::Watermark: return "watermark";
        case MsgKind::LatencyMarker: return "marker";
        case MsgKind::TriggerBarrier: return "trigger";
        case MsgKind::ConfirmBarrier: return "confirm";
        case MsgKind::CheckpointBarrier: return "checkpoint";
        case MsgKind::StateChunk: return "chunk";
        case MsgKind::ReroutedRecord: return "rerouted_record";
        case MsgKind::ReroutedConfirm: return "rerouted_confirm";
        }
        return "unknown";
    }

    const char *kg_status_name(KgStatus s) noexcept
    {
        switch (s)
        {
        case KgStatus::Local: return "Local";
        case KgStatus::MigratingOut: return "MigratingOut";
        case KgStatus::MigratedOut: return "MigratedOut";
        case KgStatus::Incoming: return "Incoming";
        case KgStatus::InactiveArrived: return "InactiveArrived";
        case KgStatus::Active: return "Active";
        }
        return "Unknown";
    }

    namespace
    {
        void put_i64(std::string &out, std::int64_t v)
        {
            for (int i = 0; i < 8; ++i)
            {
                out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
            }
        }

        std::int64_t get_i64(const std::string &in, std::size_t &pos)
        {
            if (pos + 8 > in.size())
            {
                raise(Errc::MalformedRecord, "state value truncated");
            }
            std::uint64_t v = 0;
            for (int i = 0; i < 8; ++i)
            {
                v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
            }
            pos += 8;
            return static_cast<std::int64_t>(v);
        }
    }

    std::string encode_state_value(const StateValue &v)
    {
        std::string out;
        put_i64(out, v.sum);
        put_i64(out, v.count);
        put_i64(out, v.fired_through);
        put_i64(out, static_cast<std::int64_t>(v.windows.size()));
        for (const auto &[start, count] : v.windows)
        {
            put_i64(out, start);
            put_i64(out, count);
        }
        put_i64(out, static_cast<std::int64_t>(v.blob.size()));
        out += v.blob;
        return out;
    }

    StateValue decode_state_value(const std::string &bytes)
    {
        StateValue v;
        std::size_t pos = 0;
        v.sum = get_i64(bytes, pos);
        v.count = get_i64(bytes, pos);
        v.fired_through = get_i64(bytes, pos);
        const auto nw = static_cast<std::size_t>(get_i64(bytes, pos));
        v.windows.reserve(nw);
        for (std::size_t i = 0; i < nw; ++i)
        {
            const std::int64_t a = get_i64(bytes, pos);
            const std::int64_t b = get_i64(bytes, pos);
            v.windows.emplace_back(a, b);
        }
        const auto nb = static_cast<std::size_t>(get_i64(bytes, pos));
        if (pos + nb > bytes.size())
        {
            raise(Errc::MalformedRecord, "state value blob truncated");
        }
        v.blob = bytes.substr(pos, nb);
        return v;
    }

    InstanceId RoutingTable::owner_of(KeyGroup kg) const
    {
        auto it = m_owner.find(kg);
        if (it == m_owner.end())
        {
            raise(Errc::IncompleteTable, "no owner for key-group " + std::to_string(kg));
        }
        return it->second;
    }

    InstanceId RoutingTable::lookup(std::string_view key) const
    {
        return owner_of(key_to_keygroup(key, m_num_keygroups));
    }

    std::uint64_t RoutingTable::apply_update(const std::map<KeyGroup, InstanceId> &reassignments)
    {
        for (const auto &[kg, inst] : reassignments)
        {
            if (kg >= m_num_keygroups)
            {
                raise(Errc::InvalidPartitioning, "reassigned key-group out of range");
            }
            m_owner[kg] = inst;
        }
        return ++m_version;
    }

    void KeyedStateStore::assign(KeyGroup kg, KgStatus status)
    {
        auto &g = m_groups[kg];
        g.status = status;
        if (status == KgStatus::Local || status == KgStatus::Active)
        {
            g.installed = true;
        }
    }

    KeyedStateStore::GroupState &KeyedStateStore::group(KeyGroup kg)
    {
        auto it = m_groups.find(kg);
        if (it == m_groups.end())
        {
            raise(Errc::IllegalStateTransition, "key-group " + std::to_string(kg) + " not assigned to this store");
        }
        return it->second;
    }

    const KeyedStateStore::GroupState &KeyedStateStore::group(KeyGroup kg) const
    {
        auto it = m_groups.find(kg);
        if (it == m_groups.end())
        {
            raise(Errc::IllegalStateTransition, "key-group " + std::to_string(kg) + " not assigned to this store");
        }
        return it->second;
    }

    KgStatus KeyedStateStore::status(KeyGroup kg) const
    {
        return group(kg).status;
    }

    bool KeyedStateStore::readable(KeyGroup kg) const
    {
        auto it = m_groups.find(kg);
        if (it == m_groups.end())
        {
            return false;
        }
        const KgStatus s = it->second.status;
        return s == KgStatus::Local || s == KgStatus::MigratingOut || s == KgStatus::Active;
    }

    StateValue &KeyedStateStore::value_for(std::string_view key)
    {
        const KeyGroup kg = key_to_keygroup(key, m_num_keygroups);
        if (!readable(kg))
        {
            raise(Errc::IllegalStateTransition,
                  "key-group " + std::to_string(kg) + " not readable (" +
                      kg_status_name(m_groups.count(kg) ? m_groups.at(kg).status : KgStatus::Incoming) + ")");
        }
        return m_groups[kg].entries[std::string(key)];
    }

    const StateValue *KeyedStateStore::peek(std::string_view key) const
    {
        const KeyGroup kg = key_to_keygroup(key, m_num_keygroups);
        auto git = m_groups.find(kg);
        if (git == m_groups.end())
        {
            return nullptr;
        }
        auto it = git->second.entries.find(std::string(key));
        return it == git->second.entries.end() ? nullptr : &it->second;
    }

    StateValue &KeyedStateStore::value_unchecked(std::string_view key, KeyGroup kg)
    {
        return m_groups[kg].entries[std::string(key)];
    }

    std::size_t KeyedStateStore::key_count() const
    {
        std::size_t n = 0;
        for (const auto &[kg, g] : m_groups)
        {
            n += g.entries.size();
        }
        return n;
    }

    std::size_t KeyedStateStore::key_count(KeyGroup kg) const
    {
        auto it = m_groups.find(kg);
        return it == m_groups.end() ? 0 : it->second.entries.size();
    }

    StateChunk KeyedStateStore::extract_one(KeyGroup kg, std::int32_t subscale_id,
                                            InstanceId source, InstanceId target)
    {
        auto &g = group(kg);
        if (g.status != KgStatus::Local)
        {
            raise(Errc::IllegalStateTransition,
                  "extract of key-group " + std::to_string(kg) + " in status " + kg_status_name(g.status));
        }
        g.status = KgStatus::MigratingOut;

        auto body = std::make_shared<ChunkBody>();
        body->subscale_id = subscale_id;
        body->keygroup = kg;
        body->entries = std::move(g.entries);
        body->source = source;
        body->target = target;

        g.entries.clear();
        g.status = KgStatus::MigratedOut;
        return StateChunk{std::move(body)};
    }

    std::vector<StateChunk> KeyedStateStore::extract_chunks(const std::vector<KeyGroup> &kgs,
                                                            std::int32_t subscale_id,
                                                            InstanceId source, InstanceId target)
    {
        std::vector<KeyGroup> sorted = kgs;
        std::sort(sorted.begin(), sorted.end());
        for (KeyGroup kg : sorted)
        {
            if (status(kg) != KgStatus::Local)
            {
                raise(Errc::IllegalStateTransition,
                      "extract of key-group " + std::to_string(kg) + " in status " + kg_status_name(status(kg)));
            }
        }
        std::vector<StateChunk> out;
        out.reserve(sorted.size());
        for (KeyGroup kg : sorted)
        {
            out.push_back(extract_one(kg, subscale_id, source, target));
        }
        return out;
    }

    StateChunk KeyedStateStore::extract_subkg(KeyGroup kg, std::int32_t subkg, std::uint32_t fanout,
                                              InstanceId source, InstanceId target)
    {
        auto &g = group(kg);
        auto body = std::make_shared<ChunkBody>();
        body->keygroup = kg;
        body->source = source;
        body->target = target;
        body->subkg = subkg;
        for (auto it = g.entries.begin(); it != g.entries.end();)
        {
            if (subkg_of(it->first, fanout) == subkg)
            {
                body->entries.emplace(it->first, std::move(it->second));
                it = g.entries.erase(it);
            }
            else
            {
                ++it;
            }
        }
        return StateChunk{std::move(body)};
    }

    KgStatus KeyedStateStore::install_chunk(const StateChunk &chunk)
    {
        if (!chunk.body)
        {
            raise(Errc::UnexpectedChunk, "empty chunk");
        }
        const KeyGroup kg = chunk.body->keygroup;
        auto it = m_groups.find(kg);
        if (it == m_groups.end())
        {
            raise(Errc::UnexpectedChunk, "chunk for key-group " + std::to_string(kg) + " not expected here");
        }
        auto &g = it->second;
        if (g.installed || g.status == KgStatus::InactiveArrived || g.status == KgStatus::Active)
        {
            raise(Errc::DuplicateChunk, "key-group " + std::to_string(kg) + " already installed");
        }
        if (g.status != KgStatus::Incoming)
        {
            raise(Errc::UnexpectedChunk,
                  "chunk for key-group " + std::to_string(kg) + " in status " + kg_status_name(g.status));
        }
        g.entries = chunk.body->entries;
        g.installed = true;
        g.status = KgStatus::InactiveArrived;
        return g.status;
    }

    void KeyedStateStore::install_subkg(const StateChunk &chunk, bool overwrite)
    {
        if (!chunk.body)
        {
            raise(Errc::UnexpectedChunk, "empty chunk");
        }
        auto &g = m_groups[chunk.body->keygroup];
        for (const auto &[key, value] : chunk.body->entries)
        {
            if (overwrite)
            {
                g.entries[key] = value;
            }
            else
            {
                g.entries.emplace(key, value);
            }
        }
    }

    void KeyedStateStore::activate(KeyGroup kg)
    {
        auto &g = group(kg);
        if (g.status != KgStatus::InactiveArrived)
        {
            raise(Errc::IllegalStateTransition,
                  "activate of key-group " + std::to_string(kg) + " in status " + kg_status_name(g.status));
        }
        g.status = KgStatus::Active;
    }

    const std::map<std::string, StateValue> &KeyedStateStore::entries_of(KeyGroup kg) const
    {
        return group(kg).entries;
    }

    std::map<std::string, StateValue> KeyedStateStore::all_entries() const
    {
        std::map<std::string, StateValue> out;
        for (const auto &[kg, g] : m_groups)
        {
            for (const auto &[k, v] : g.entries)
            {
                out.emplace(k, v);
            }
        }
        return out;
    }

    namespace
    {
        constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

        int b64_index(char c)
        {
            if (c >= 'A' && c <= 'Z') return c - 'A';
            if (c >= 'a' && c <= 'z') return c - 'a' + 26;
            if (c >= '0' && c <= '9') return c - '0' + 52;
            if (c == '+') return 62;
            if (c == '/') return 63;
            return -1;
        }
    }

    std::string base64_encode(std::string_view bytes)
    {
        std::string out;
        out.reserve((bytes.size() + 2) / 3 * 4);
        std::size_t i = 0;
        while (i + 2 < bytes.size())
        {
            const std::uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                                    (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                                    static_cast<unsigned char>(bytes[i + 2]);
            out.push_back(kB64[(v >> 18) & 63]);
            out.push_back(kB64[(v >> 12) & 63]);
            out.push_back(kB64[(v >> 6) & 63]);
            out.push_back(kB64[v & 63]);
            i += 3;
        }
        const std::size_t rest = bytes.size() - i;
        if (rest == 1)
        {
            const std::uint32_t v = static_cast<unsigned char>(bytes[i]) << 16;
            out.push_back(kB64[(v >> 18) & 63]);
            out.push_back(kB64[(v >> 12) & 63]);
            out += "==";
        }
        else if (rest == 2)
        {
            const std::uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                                    (static_cast<unsigned char>(bytes[i + 1]) << 8);
            out.push_back(kB64[(v >> 18) & 63]);
            out.push_back(kB64[(v >> 12) & 63]);
            out.push_back(kB64[(v >> 6) & 63]);
            out.push_back('=');
        }
        return out;
    }

    std::string base64_decode(std::string_view text)
    {
        std::string out;
        std::uint32_t acc = 0;
        int bits = 0;
        for (char c : text)
        {
            if (c == '=')
            {
                break;
            }
            const int v = b64_index(c);
            if (v < 0)
            {
                raise(Errc::MalformedRecord, "invalid base64 input");
            }
            acc = (acc << 6) | static_cast<std::uint32_t>(v);
            bits += 6;
            if (bits >= 8)
            {
                bits -= 8;
                out.push_back(static_cast<char>((acc >> bits) & 0xff));
            }
        }
        return out;
    }

    std::string dump_store_jsonl(const KeyedStateStore &store)
    {
        std::ostringstream os;
        for (const auto &[kg, g] : store.groups())
        {
            for (const auto &[key, value] : g.entries)
            {
                os << "{\"kg\":" << kg
                   << ",\"key\":\"" << base64_encode(key)
                   << "\",\"value\":\"" << base64_encode(encode_state_value(value))
                   << "\"}\n";
            }
        }
        return os.str();
    }
}
