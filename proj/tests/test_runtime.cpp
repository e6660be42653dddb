#include <doctest.h>

#include "rill/bench.hpp"
#include "rill/engine.hpp"
#include "rill/error.hpp"
#include "rill/metrics.hpp"

#include <map>

using namespace rill;

namespace
{
    Scenario small_keyed_sum(std::uint64_t seed)
    {
        Scenario s = keyed_sum_scenario(seed, 2, 8);
        s.job.workload.rate = 1000;
        s.job.workload.duration = 2000;
        s.job.workload.key_space = 16;
        return s;
    }

    std::map<std::string, std::int64_t> brute_force_sums(const Scenario &s)
    {
        // independent replay of the generator's record stream
        std::map<std::string, std::int64_t> sums;
        Rng rng(derive_seed(s.job.seed, 0x9e0 + 0)); // generator is instance 0
        ZipfSampler zipf(s.job.workload.key_space, s.job.workload.zipf_s);
        const std::uint64_t budget = s.job.workload.record_budget();
        for (std::uint64_t i = 0; i < budget; ++i)
        {
            const std::uint64_t rank = zipf.sample(rng);
            const std::int64_t value =
                1 + static_cast<std::int64_t>(rng.next_below(
                        static_cast<std::uint64_t>(s.job.workload.value_range)));
            sums["k" + std::to_string(rank - 1)] += value;
        }
        return sums;
    }
}

TEST_CASE("plain run reaches the brute-force keyed sums")
{
    Scenario s = small_keyed_sum(21);
    auto out = run_scenario(s);
    const auto oracle = brute_force_sums(s);

    CHECK(out.result.final_state.size() == oracle.size());
    for (const auto &[key, sum] : oracle)
    {
        REQUIRE(out.result.final_state.count(key) == 1);
        CHECK(out.result.final_state.at(key).first == sum);
    }
    CHECK(out.result.emitted_to_stateful == s.job.workload.record_budget());
    CHECK(out.result.applied_seqs.size() == out.result.emitted_to_stateful);

    SUBCASE("run equals itself under the equivalence checker")
    {
        auto again = run_scenario(s);
        const auto v = equivalence_check(again.result, out.result);
        CHECK(v.per_key_state_equal);
        CHECK(v.per_channel_order_equal);
        CHECK(v.exactly_once);
    }
}

TEST_CASE("virtual-time determinism: identical traces and metrics")
{
    Scenario s = small_keyed_sum(5);
    auto a = run_scenario(s);
    auto b = run_scenario(s);
    CHECK(a.engine->trace().to_jsonl() == b.engine->trace().to_jsonl());
    CHECK(a.metrics.to_string() == b.metrics.to_string());

    Scenario other = small_keyed_sum(6);
    auto c = run_scenario(other);
    CHECK(a.engine->trace().to_jsonl() != c.engine->trace().to_jsonl());
}

TEST_CASE("channel lanes: priority bypasses queued data")
{
    Scenario s = small_keyed_sum(3);
    Engine engine(build_graph(s.job), s.options);
    Channel &ch = engine.channel_between(0, 1);
    ch.hold_drain = true;

    auto data = [&](SeqId seq)
    {
        StreamMessage m = make_data("k1", 1, 0, seq, 0, key_to_keygroup("k1", 8));
        m.payload.assign(8, '\0');
        return m;
    };

    SUBCASE("trigger on the priority lane leaves before earlier data")
    {
        engine.enqueue(ch, data(1), Lane::Normal);
        engine.enqueue(ch, data(2), Lane::Normal);
        engine.enqueue(ch, data(3), Lane::Normal);
        StreamMessage t;
        t.kind = MsgKind::TriggerBarrier;
        t.seq_id = 99;
        engine.enqueue(ch, t, Lane::Priority);
        REQUIRE(ch.output_cache.size() == 4);
        CHECK(ch.output_cache.front().msg.seq_id == 99);
        CHECK(ch.output_cache[1].msg.seq_id == 1);
        CHECK(ch.output_cache[3].msg.seq_id == 3);
    }

    SUBCASE("two priority messages stay in order")
    {
        StreamMessage a;
        a.kind = MsgKind::TriggerBarrier;
        a.seq_id = 7;
        StreamMessage b;
        b.kind = MsgKind::TriggerBarrier;
        b.seq_id = 8;
        engine.enqueue(ch, a, Lane::Priority);
        engine.enqueue(ch, b, Lane::Priority);
        CHECK(ch.output_cache[0].msg.seq_id == 7);
        CHECK(ch.output_cache[1].msg.seq_id == 8);
    }

    SUBCASE("closed channels refuse messages")
    {
        ch.closed = true;
        CHECK_THROWS_AS(engine.enqueue(ch, data(1), Lane::Normal), Error);
    }
}

TEST_CASE("redirect_output_cache moves matching records in order")
{
    Scenario s = small_keyed_sum(3);
    Engine engine(build_graph(s.job), s.options);
    Channel &old_ch = engine.channel_between(0, 1);
    Channel &new_ch = engine.channel_between(0, 2);
    old_ch.hold_drain = true;
    new_ch.hold_drain = true;

    auto rec = [&](KeyGroup kg, SeqId seq)
    {
        StreamMessage m;
        m.kind = MsgKind::Data;
        m.key = "p" + std::to_string(seq);
        m.keygroup = kg;
        m.seq_id = seq;
        m.payload.assign(8, '\0');
        return m;
    };

    SUBCASE("matching records move, both sides keep relative order")
    {
        engine.enqueue(old_ch, rec(1, 1), Lane::Normal); // R1
        engine.enqueue(old_ch, rec(3, 2), Lane::Normal); // R3
        engine.enqueue(old_ch, rec(2, 3), Lane::Normal); // R2
        engine.enqueue(old_ch, rec(4, 4), Lane::Normal); // R4
        const std::size_t moved = engine.redirect_output_cache(old_ch, new_ch, {3, 4});
        CHECK(moved == 2);
        REQUIRE(old_ch.output_cache.size() == 2);
        CHECK(old_ch.output_cache[0].msg.keygroup == 1);
        CHECK(old_ch.output_cache[1].msg.keygroup == 2);
        REQUIRE(new_ch.output_cache.size() == 2);
        CHECK(new_ch.output_cache[0].msg.keygroup == 3);
        CHECK(new_ch.output_cache[1].msg.keygroup == 4);
    }

    SUBCASE("empty cache moves nothing")
    {
        CHECK(engine.redirect_output_cache(old_ch, new_ch, {3, 4}) == 0);
    }

    SUBCASE("per-key subsequences survive redirection")
    {
        engine.enqueue(old_ch, rec(3, 1), Lane::Normal);
        engine.enqueue(old_ch, rec(4, 2), Lane::Normal);
        engine.enqueue(old_ch, rec(3, 3), Lane::Normal);
        engine.redirect_output_cache(old_ch, new_ch, {3, 4});
        REQUIRE(new_ch.output_cache.size() == 3);
        CHECK(new_ch.output_cache[0].msg.seq_id == 1);
        CHECK(new_ch.output_cache[1].msg.seq_id == 2);
        CHECK(new_ch.output_cache[2].msg.seq_id == 3);
    }

    SUBCASE("different senders are rejected")
    {
        Channel &sink_ch = engine.channel_between(1, 3);
        CHECK_THROWS_AS((void)engine.redirect_output_cache(old_ch, sink_ch, {3}), Error);
    }

    SUBCASE("redirection stops at a cached checkpoint barrier")
    {
        engine.enqueue(old_ch, rec(3, 1), Lane::Normal);
        StreamMessage cb;
        cb.kind = MsgKind::CheckpointBarrier;
        cb.checkpoint_id = 1;
        cb.seq_id = 2;
        engine.enqueue(old_ch, cb, Lane::Normal);
        engine.enqueue(old_ch, rec(3, 3), Lane::Normal);
        const std::size_t moved = engine.redirect_output_cache(old_ch, new_ch, {3});
        CHECK(moved == 1);
        CHECK(new_ch.output_cache[0].msg.seq_id == 3);
        CHECK(old_ch.output_cache[0].msg.seq_id == 1);
        CHECK(old_ch.output_cache[1].msg.kind == MsgKind::CheckpointBarrier);
    }
}

TEST_CASE("step executes exactly one event and drains to an error")
{
    Scenario s = small_keyed_sum(4);
    s.job.workload.total_records = 3;
    Engine engine(build_graph(s.job), s.options);
    std::size_t steps = 0;
    while (!engine.drained())
    {
        const auto ev = engine.step();
        CHECK(ev.tick >= 0);
        ++steps;
        REQUIRE(steps < 100000);
    }
    CHECK(steps > 3);
    CHECK_THROWS_AS((void)engine.step(), Error);
}

TEST_CASE("marker fidelity: every marker emitted reaches the sink")
{
    Scenario s = small_keyed_sum(8);
    auto out = run_scenario(s);
    CHECK(out.result.marker_emitted > 0);
    CHECK(out.result.marker_sampled == out.result.marker_emitted);

    SUBCASE("idle pipeline marker latency equals the hop count")
    {
        // 2 hops (gen->agg->sink) at 1 tick each, plus one processing interval
        // at the aggregator before the marker is forwarded
        REQUIRE(!out.result.latency_samples.empty());
        const Tick lat = out.result.latency_samples.front().second;
        CHECK(lat >= 2);
        CHECK(lat <= 5);
    }
}

TEST_CASE("backpressure stalls the sender instead of dropping")
{
    Scenario s = small_keyed_sum(12);
    s.job.channel_capacity = 16;
    s.job.workload.rate = 4000;
    s.job.workload.total_records = 800;
    s.job.proc_interval = 2; // aggregator slower than the source
    auto out = run_scenario(s);
    CHECK(out.result.emitted_to_stateful == 800);
    CHECK(out.result.applied_seqs.size() == 800);
}

TEST_CASE("watermark safety holds on plain runs")
{
    Scenario s = small_keyed_sum(15);
    auto out = run_scenario(s);
    CHECK(watermark_safety_holds(out.engine->trace()));
}

TEST_CASE("sliding window matches a brute-force window oracle")
{
    Scenario s = window_scenario(31, 2, 8);
    s.job.workload.rate = 800;
    s.job.workload.duration = 1500;
    s.job.workload.key_space = 12;
    s.job.operators[1].window_size = 10;
    s.job.operators[1].window_slide = 5;
    auto out = run_scenario(s);

    // oracle: replay the generator and count window memberships, firing only
    // windows whose end the final operator watermark passed
    Rng rng(derive_seed(s.job.seed, 0x9e0 + 0));
    ZipfSampler zipf(s.job.workload.key_space, s.job.workload.zipf_s);
    const std::uint64_t budget = s.job.workload.record_budget();
    std::map<std::pair<std::string, Tick>, std::int64_t> oracle;
    Tick last_emit = 0;
    for (std::uint64_t i = 0; i < budget; ++i)
    {
        const Tick tick = static_cast<Tick>(i * 1000 / s.job.workload.rate);
        last_emit = tick;
        const std::uint64_t rank = zipf.sample(rng);
        (void)rng.next_below(static_cast<std::uint64_t>(s.job.workload.value_range));
        const std::string key = "k" + std::to_string(rank - 1);
        Tick start = (tick / 5) * 5;
        while (start + 10 > tick)
        {
            if (start >= 0)
            {
                oracle[{key, start}]++;
            }
            if (start < 5)
            {
                break;
            }
            start -= 5;
        }
    }
    const Tick final_wm = last_emit + 1; // trailing watermark
    std::map<std::string, std::map<Tick, std::int64_t>> fired;
    for (const auto &[kw, count] : oracle)
    {
        if (kw.second + 10 <= final_wm)
        {
            fired[kw.first][kw.second] = count;
        }
    }

    // sink outputs carry (window_start, count) per key
    std::map<std::string, std::map<Tick, std::int64_t>> got;
    for (const auto &[key, outs] : out.result.sink_outputs)
    {
        for (const auto &[start, count] : outs)
        {
            CHECK(got[key].count(start) == 0); // exactly one firing per window
            got[key][start] = count;
        }
    }
    CHECK(got == fired);
}

TEST_CASE("watermark regression is rejected")
{
    Scenario s = small_keyed_sum(3);
    s.job.workload.total_records = 50;
    Engine engine(build_graph(s.job), s.options);
    engine.run();
    Channel &ch = engine.channel_between(0, 1);
    CHECK(engine.instance(1).channel_watermark[ch.id] > 10);
    StreamMessage w2;
    w2.kind = MsgKind::Watermark;
    w2.event_time = 10;
    engine.enqueue(ch, w2, Lane::Normal);
    CHECK_THROWS_AS(engine.run(), Error);
}
