#include <doctest.h>

#include "rill/bench.hpp"
#include "rill/rng.hpp"

#include <map>

using namespace rill;

TEST_CASE("uniform workload spreads keys within five percent")
{
    Scenario s = keyed_sum_scenario(1234, 2, 8);
    s.job.workload.zipf_s = 0.0;
    s.job.workload.key_space = 4;
    s.job.workload.total_records = 4000;
    s.job.workload.rate = 4000;
    s.job.workload.duration = 1000;
    auto out = run_scenario(s);
    REQUIRE(out.result.final_state.size() == 4);
    for (const auto &[key, sc] : out.result.final_state)
    {
        CHECK(sc.second >= 950);  // count within +-5% of 1000
        CHECK(sc.second <= 1050);
    }
}

TEST_CASE("zipf skew ranks keys by frequency")
{
    Scenario s = keyed_sum_scenario(77, 2, 8);
    s.job.workload.zipf_s = 1.5;
    s.job.workload.key_space = 16;
    s.job.workload.total_records = 5000;
    s.job.workload.rate = 5000;
    auto out = run_scenario(s);
    REQUIRE(out.result.final_state.count("k0") == 1);
    REQUIRE(out.result.final_state.count("k1") == 1);
    CHECK(out.result.final_state.at("k0").second > out.result.final_state.at("k1").second);
}

TEST_CASE("same seed gives byte-identical record streams")
{
    Scenario s = keyed_sum_scenario(99, 2, 8);
    s.job.workload.total_records = 500;
    auto a = run_scenario(s);
    auto b = run_scenario(s);
    CHECK(a.result.emitted_seqs == b.result.emitted_seqs);
    CHECK(a.result.final_state == b.result.final_state);
}

TEST_CASE("zipf sampler stays within range and is monotone in rank probability")
{
    Rng rng(5);
    for (double sk : {0.0, 0.5, 1.0, 1.5})
    {
        ZipfSampler z(64, sk);
        std::map<std::uint64_t, std::uint64_t> counts;
        for (int i = 0; i < 20000; ++i)
        {
            const std::uint64_t r = z.sample(rng);
            REQUIRE(r >= 1);
            REQUIRE(r <= 64);
            counts[r]++;
        }
        if (sk >= 1.0)
        {
            CHECK(counts[1] > counts[8]);
            CHECK(counts[1] > counts[64]);
        }
    }
}

TEST_CASE("keyed aggregation is value-insensitive to cross-key order")
{
    // permuting records of different keys leaves per-key sums unchanged
    std::map<std::string, std::int64_t> sums_a;
    std::map<std::string, std::int64_t> sums_b;
    std::vector<std::pair<std::string, std::int64_t>> records = {
        {"a", 2}, {"b", 10}, {"a", 3}, {"c", 1}, {"b", 4}, {"a", 5}};
    for (const auto &[k, v] : records)
    {
        sums_a[k] += v;
    }
    std::vector<std::pair<std::string, std::int64_t>> shuffled = {
        {"c", 1}, {"a", 2}, {"b", 10}, {"a", 3}, {"a", 5}, {"b", 4}};
    for (const auto &[k, v] : shuffled)
    {
        sums_b[k] += v;
    }
    CHECK(sums_a == sums_b);
}
