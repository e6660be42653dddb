#pragma once

#include "rill/types.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace rill
{
    enum class Protocol
    {
        None,
        StopRestart,
        AllAtOnce,
        FluidOtfs,
        FetchOnDemand,
        Unbound,
        Drrs,
    };

    const char *protocol_name(Protocol p) noexcept;
    std::optional<Protocol> parse_protocol(const std::string &name) noexcept;

    enum class SubscalePhase : std::uint8_t
    {
        Pending,
        Triggered,
        Migrating,
        Completed,
        Cancelled,
    };

    // An independently migrating subset of key-groups, with a single source and
    // a single target instance.
    struct Subscale
    {
        std::int32_t id = kNoSubscale;
        std::vector<KeyGroup> keygroups; // ascending
        InstanceId source = kNoInstance;
        InstanceId target = kNoInstance;
        SubscalePhase phase = SubscalePhase::Pending;
    };

    struct Migration
    {
        KeyGroup kg;
        InstanceId source;
        InstanceId target;
    };

    struct MigrationPlan
    {
        std::map<KeyGroup, InstanceId> owner_before;
        std::map<KeyGroup, InstanceId> owner_after;
        std::vector<Migration> migrations;
        std::vector<Subscale> subscales;
    };

    // Uniform repartitioning: owner(kg, n) = floor(kg * n / K), contiguous
    // ranges, old instance identities preserved.
    inline InstanceId uniform_owner(KeyGroup kg, std::uint32_t parallelism, std::uint32_t num_keygroups)
    {
        return static_cast<InstanceId>(static_cast<std::uint64_t>(kg) * parallelism / num_keygroups);
    }

    // Plans the migration set for scaling from n_old to n_new slots over K
    // key-groups. Owners are slot indices (0-based within the operator).
    MigrationPlan plan_repartition(std::uint32_t num_keygroups, std::uint32_t n_old, std::uint32_t n_new);

    // Plans against an explicit current ownership (used when rebasing a
    // superseded scaling session onto whatever routing is live now).
    MigrationPlan plan_repartition_from(const std::map<KeyGroup, InstanceId> &owner_before,
                                        std::uint32_t num_keygroups, std::uint32_t n_new);

    // Groups migrations by (source, target), sorts each group ascending and
    // splits it into ceil(m / max_size) subsets whose sizes differ by at most
    // one. max_size == 0 means unbounded (one subscale per pair).
    std::vector<Subscale> divide_subscales(const std::vector<Migration> &migrations,
                                           std::uint32_t max_size);

    // Greedy pick: among pending subscales whose source and target nodes are
    // both below the concurrency cap, the one whose target holds the fewest
    // keys; ties break toward the lowest subscale id.
    std::optional<std::size_t> next_subscale(const std::vector<Subscale> &pending,
                                             const std::map<InstanceId, std::size_t> &held_keys,
                                             const std::map<InstanceId, std::uint32_t> &in_flight,
                                             std::uint32_t cap);
}
