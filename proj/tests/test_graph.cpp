#include <doctest.h>

#include "rill/graph.hpp"
#include "rill/error.hpp"
#include "rill/plan.hpp"

using namespace rill;

namespace
{
    const char *kPipeline = R"(
# three-operator pipeline
name demo
num_keygroups 4
seed 9
rate 500
operator gen generator parallelism=1
operator agg keyed_sum parallelism=2
operator out sink parallelism=1
edge gen agg keyed
edge agg out forward
)";
}

TEST_CASE("job spec parse and graph build")
{
    JobSpec spec = parse_job_spec(kPipeline);
    CHECK(spec.name == "demo");
    CHECK(spec.num_keygroups == 4);
    CHECK(spec.operators.size() == 3);
    CHECK(spec.workload.rate == 500);

    DataflowGraph g = build_graph(spec);
    CHECK(g.sources == std::vector<OperatorId>{0});
    CHECK(g.sinks == std::vector<OperatorId>{2});
    CHECK(g.stateful(1));

    SUBCASE("uniform owner split for two instances over four groups")
    {
        CHECK(uniform_owner(0, 2, 4) == 0);
        CHECK(uniform_owner(1, 2, 4) == 0);
        CHECK(uniform_owner(2, 2, 4) == 1);
        CHECK(uniform_owner(3, 2, 4) == 1);
    }
}

TEST_CASE("self-loop edges are rejected")
{
    JobSpec spec = parse_job_spec(kPipeline);
    spec.edges.push_back(EdgeSpec{1, 1, Partitioning::Forward});
    CHECK_THROWS_AS((void)build_graph(spec), Error);
    try
    {
        (void)build_graph(spec);
    }
    catch (const Error &e)
    {
        CHECK(e.code() == Errc::GraphCycle);
    }
}

TEST_CASE("longer cycles are rejected")
{
    JobSpec spec = parse_job_spec(kPipeline);
    spec.edges.push_back(EdgeSpec{1, 0, Partitioning::Forward}); // agg -> gen
    CHECK_THROWS_AS((void)build_graph(spec), Error);
}

TEST_CASE("parallelism above the key-group count is rejected")
{
    JobSpec spec = parse_job_spec(kPipeline);
    spec.operators[1].parallelism = 5; // num_keygroups is 4
    try
    {
        (void)build_graph(spec);
        CHECK(false);
    }
    catch (const Error &e)
    {
        CHECK(e.code() == Errc::InvalidPartitioning);
    }
}

TEST_CASE("unknown keys and operators fail the parse")
{
    CHECK_THROWS_AS((void)parse_job_spec("bogus 1\n"), Error);
    CHECK_THROWS_AS((void)parse_job_spec("operator a nosuchkind\n"), Error);
    CHECK_THROWS_AS((void)parse_job_spec("edge a b keyed\n"), Error);
}

TEST_CASE("default pipeline builds")
{
    JobSpec spec = default_pipeline(OpKind::KeyedSum, 2, 32, 7);
    DataflowGraph g = build_graph(spec);
    CHECK(g.spec.operators[1].parallelism == 2);
    CHECK(g.in_edges.at(1).front().partitioning == Partitioning::Keyed);
}
