#include "rill/plan.hpp"

#include "rill/error.hpp"

#include <algorithm>

namespace rill
{
    const char *protocol_name(Protocol p) noexcept
    {
        switch (p)
        {
        case Protocol::None: return "none";
        case Protocol::StopRestart: return "stop_restart";
        case Protocol::AllAtOnce: return "all_at_once";
        case Protocol::FluidOtfs: return "fluid";
        case Protocol::FetchOnDemand: return "fetch_on_demand";
        case Protocol::Unbound: return "unbound";
        case Protocol::Drrs: return "drrs";
        }
        return "unknown";
    }

    std::optional<Protocol> parse_protocol(const std::string &name) noexcept
    {
        if (name == "none") return Protocol::None;
        if (name == "stop_restart") return Protocol::StopRestart;
        if (name == "all_at_once") return Protocol::AllAtOnce;
        if (name == "fluid") return Protocol::FluidOtfs;
        if (name == "fetch_on_demand") return Protocol::FetchOnDemand;
        if (name == "unbound") return Protocol::Unbound;
        if (name == "drrs") return Protocol::Drrs;
        return std::nullopt;
    }

    MigrationPlan plan_repartition(std::uint32_t num_keygroups, std::uint32_t n_old, std::uint32_t n_new)
    {
        if (n_old == 0 || n_old > num_keygroups)
        {
            raise(Errc::InvalidPartitioning, "n_old must be in [1, num_keygroups]");
        }
        std::map<KeyGroup, InstanceId> before;
        for (KeyGroup kg = 0; kg < num_keygroups; ++kg)
        {
            before[kg] = uniform_owner(kg, n_old, num_keygroups);
        }
        return plan_repartition_from(before, num_keygroups, n_new);
    }

    MigrationPlan plan_repartition_from(const std::map<KeyGroup, InstanceId> &owner_before,
                                        std::uint32_t num_keygroups, std::uint32_t n_new)
    {
        if (n_new == 0 || n_new > num_keygroups)
        {
            raise(Errc::InvalidPartitioning, "n_new must be in [1, num_keygroups]");
        }
        MigrationPlan plan;
        plan.owner_before = owner_before;
        for (KeyGroup kg = 0; kg < num_keygroups; ++kg)
        {
            const InstanceId after = uniform_owner(kg, n_new, num_keygroups);
            plan.owner_after[kg] = after;
            auto it = owner_before.find(kg);
            if (it == owner_before.end())
            {
                raise(Errc::IncompleteTable, "owner_before missing key-group " + std::to_string(kg));
            }
            if (it->second != after)
            {
                plan.migrations.push_back(Migration{kg, it->second, after});
            }
        }
        return plan;
    }

    std::vector<Subscale> divide_subscales(const std::vector<Migration> &migrations,
                                           std::uint32_t max_size)
    {
        std::map<std::pair<InstanceId, InstanceId>, std::vector<KeyGroup>> groups;
        for (const auto &m : migrations)
        {
            groups[{m.source, m.target}].push_back(m.kg);
        }

        std::vector<Subscale> out;
        std::int32_t next_id = 0;
        for (auto &[pair, kgs] : groups)
        {
            std::sort(kgs.begin(), kgs.end());
            const std::size_t m = kgs.size();
            const std::size_t parts = (max_size == 0) ? 1 : (m + max_size - 1) / max_size;
            const std::size_t base = m / parts;
            const std::size_t extra = m % parts; // first `extra` parts get one more
            std::size_t offset = 0;
            for (std::size_t p = 0; p < parts; ++p)
            {
                const std::size_t len = base + (p < extra ? 1 : 0);
                Subscale s;
                s.id = next_id++;
                s.source = pair.first;
                s.target = pair.second;
                s.keygroups.assign(kgs.begin() + static_cast<std::ptrdiff_t>(offset),
                                   kgs.begin() + static_cast<std::ptrdiff_t>(offset + len));
                offset += len;
                out.push_back(std::move(s));
            }
        }
        return out;
    }

    std::optional<std::size_t> next_subscale(const std::vector<Subscale> &pending,
                                             const std::map<InstanceId, std::size_t> &held_keys,
                                             const std::map<InstanceId, std::uint32_t> &in_flight,
                                             std::uint32_t cap)
    {
        auto load = [&](InstanceId node) -> std::uint32_t
        {
            auto it = in_flight.find(node);
            return it == in_flight.end() ? 0 : it->second;
        };
        auto held = [&](InstanceId node) -> std::size_t
        {
            auto it = held_keys.find(node);
            return it == held_keys.end() ? 0 : it->second;
        };

        std::optional<std::size_t> best;
        for (std::size_t i = 0; i < pending.size(); ++i)
        {
            const Subscale &s = pending[i];
            if (s.phase != SubscalePhase::Pending)
            {
                continue;
            }
            if (load(s.source) >= cap || load(s.target) >= cap)
            {
                continue;
            }
            if (!best)
            {
                best = i;
                continue;
            }
            const Subscale &b = pending[*best];
            const auto key_i = std::make_pair(held(s.target), s.id);
            const auto key_b = std::make_pair(held(b.target), b.id);
            if (key_i < key_b)
            {
                best = i;
            }
        }
        return best;
    }
}
