#include <doctest.h>

#include "rill/rng.hpp"
#include "rill/state.hpp"

#include <map>
#include <string>

using namespace rill;

namespace
{
    // independent FNV-1a reference, written from the published constants
    std::uint64_t fnv_reference(const std::string &s)
    {
        std::uint64_t h = 14695981039346656037ULL;
        for (char c : s)
        {
            h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
        }
        return h;
    }
}

TEST_CASE("key_to_keygroup matches the independent reference")
{
    CHECK(key_to_keygroup("", 128) == 37); // offset basis mod 128
    CHECK(key_to_keygroup("anything", 1) == 0);

    Rng rng(42);
    for (int i = 0; i < 200; ++i)
    {
        std::string key = "k" + std::to_string(rng.next_below(100000));
        CHECK(key_to_keygroup(key, 128) == fnv_reference(key) % 128);
        CHECK(key_to_keygroup(key, 37) == fnv_reference(key) % 37);
    }
}

TEST_CASE("routing table lookup and updates")
{
    std::map<KeyGroup, InstanceId> owner;
    for (KeyGroup kg = 0; kg < 4; ++kg)
    {
        owner[kg] = kg < 2 ? 0u : 1u;
    }
    RoutingTable t(4, owner);
    CHECK(t.version() == 0);
    CHECK(t.owner_of(0) == 0);
    CHECK(t.owner_of(3) == 1);

    SUBCASE("reassignment moves only the named groups")
    {
        t.apply_update({{3, 2}});
        CHECK(t.owner_of(3) == 2);
        CHECK(t.owner_of(2) == 1);
        CHECK(t.version() == 1);
    }

    SUBCASE("empty update still bumps the version")
    {
        t.apply_update({});
        CHECK(t.version() == 1);
        CHECK(t.owner_of(0) == 0);
    }

    SUBCASE("two sequential updates bump twice")
    {
        t.apply_update({{0, 5}});
        t.apply_update({{1, 5}});
        CHECK(t.version() == 2);
    }

    SUBCASE("lookup routes through the key hash")
    {
        const KeyGroup kg = key_to_keygroup("user-1", 4);
        CHECK(t.lookup("user-1") == t.owner_of(kg));
    }

    SUBCASE("all keys route to the unique owner of their group")
    {
        Rng rng(7);
        for (int i = 0; i < 2000; ++i)
        {
            std::string key = "x" + std::to_string(rng.next_below(1u << 20));
            CHECK(t.lookup(key) == t.owner_of(key_to_keygroup(key, 4)));
        }
    }
}

TEST_CASE("store lifecycle: extract and install")
{
    KeyedStateStore src(8);
    src.assign(3, KgStatus::Local);
    src.assign(4, KgStatus::Local);
    src.value_unchecked("kg3-key", 3).sum = 7;
    src.value_unchecked("kg4-key", 4).sum = 9;

    SUBCASE("chunks come out in ascending group order and empty the source")
    {
        auto chunks = src.extract_chunks({4, 3}, 1, 0, 1);
        REQUIRE(chunks.size() == 2);
        CHECK(chunks[0].body->keygroup == 3);
        CHECK(chunks[1].body->keygroup == 4);
        CHECK(chunks[1].body->entries.at("kg4-key").sum == 9);
        CHECK(src.status(3) == KgStatus::MigratedOut);
        CHECK(src.status(4) == KgStatus::MigratedOut);
        CHECK(src.key_count(3) == 0);

        SUBCASE("double extraction is an illegal transition")
        {
            CHECK_THROWS_AS((void)src.extract_chunks({3}, 1, 0, 1), Error);
        }

        SUBCASE("install transitions Incoming to InactiveArrived")
        {
            KeyedStateStore dst(8);
            dst.assign(3, KgStatus::Incoming);
            CHECK(dst.install_chunk(chunks[0]) == KgStatus::InactiveArrived);
            CHECK_FALSE(dst.readable(3));
            dst.activate(3);
            CHECK(dst.status(3) == KgStatus::Active);
            CHECK(dst.readable(3));
        }

        SUBCASE("duplicate install is rejected")
        {
            KeyedStateStore dst(8);
            dst.assign(3, KgStatus::Incoming);
            dst.install_chunk(chunks[0]);
            CHECK_THROWS_AS(dst.install_chunk(chunks[0]), Error);
        }

        SUBCASE("unexpected chunk is rejected")
        {
            KeyedStateStore dst(8);
            CHECK_THROWS_AS(dst.install_chunk(chunks[0]), Error);
        }
    }

    SUBCASE("empty group still yields a chunk")
    {
        src.assign(5, KgStatus::Local);
        auto chunks = src.extract_chunks({5}, 2, 0, 1);
        REQUIRE(chunks.size() == 1);
        CHECK(chunks[0].body->entries.empty());
    }

    SUBCASE("reads are refused outside readable statuses")
    {
        KeyedStateStore dst(8);
        dst.assign(6, KgStatus::Incoming);
        CHECK_FALSE(dst.readable(6));
    }

    SUBCASE("status queries")
    {
        CHECK(src.status(3) == KgStatus::Local);
        (void)src.extract_chunks({3}, 1, 0, 1);
        CHECK(src.status(3) == KgStatus::MigratedOut);
    }
}

TEST_CASE("state value codec round-trips")
{
    Rng rng(11);
    for (int i = 0; i < 100; ++i)
    {
        StateValue v;
        v.sum = static_cast<std::int64_t>(rng.next_u64());
        v.count = static_cast<std::int64_t>(rng.next_below(1000));
        v.fired_through = static_cast<std::int64_t>(rng.next_u64());
        const std::size_t nw = rng.next_below(5);
        for (std::size_t w = 0; w < nw; ++w)
        {
            v.windows.emplace_back(static_cast<std::int64_t>(rng.next_below(500)),
                                   static_cast<std::int64_t>(rng.next_below(50)));
        }
        v.blob.assign(rng.next_below(32), static_cast<char>('a' + (i % 26)));
        CHECK(decode_state_value(encode_state_value(v)) == v);
    }
}

TEST_CASE("base64 round-trips including binary bytes")
{
    CHECK(base64_encode("") == "");
    CHECK(base64_encode("f") == "Zg==");
    CHECK(base64_encode("fo") == "Zm8=");
    CHECK(base64_encode("foo") == "Zm9v");
    Rng rng(3);
    for (int i = 0; i < 50; ++i)
    {
        std::string s;
        const std::size_t n = rng.next_below(64);
        for (std::size_t j = 0; j < n; ++j)
        {
            s.push_back(static_cast<char>(rng.next_below(256)));
        }
        CHECK(base64_decode(base64_encode(s)) == s);
    }
}

TEST_CASE("store dump renders one line per entry")
{
    KeyedStateStore s(4);
    s.assign(0, KgStatus::Local);
    s.value_unchecked("a", 0).sum = 3;
    s.value_unchecked("b", 0).sum = 5;
    const std::string dump = dump_store_jsonl(s);
    CHECK(dump.find("\"kg\":0") != std::string::npos);
    std::size_t lines = 0;
    for (char c : dump)
    {
        lines += c == '\n' ? 1 : 0;
    }
    CHECK(lines == 2);
}

TEST_CASE("sub-key-group extraction keeps fragments disjoint")
{
    KeyedStateStore s(4);
    s.assign(1, KgStatus::Local);
    for (int i = 0; i < 40; ++i)
    {
        s.value_unchecked("key" + std::to_string(i), 1).sum = i;
    }
    const std::size_t total = s.key_count(1);
    std::size_t moved = 0;
    for (std::int32_t f = 0; f < 4; ++f)
    {
        auto chunk = s.extract_subkg(1, f, 4, 0, 1);
        for (const auto &[k, v] : chunk.body->entries)
        {
            CHECK(subkg_of(k, 4) == f);
        }
        moved += chunk.body->entries.size();
    }
    CHECK(moved == total);
    CHECK(s.key_count(1) == 0);
}
