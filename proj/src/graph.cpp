#include "rill/graph.hpp"

#include "rill/error.hpp"

#include <algorithm>
#include <sstream>

namespace rill
{
    const char *op_kind_name(OpKind k) noexcept
    {
        switch (k)
        {
        case OpKind::Generator: return "generator";
        case OpKind::KeyedSum: return "keyed_sum";
        case OpKind::SlidingWindow: return "sliding_window";
        case OpKind::Sink: return "sink";
        case OpKind::Scripted: return "scripted";
        }
        return "unknown";
    }

    std::optional<OpKind> parse_op_kind(const std::string &s) noexcept
    {
        if (s == "generator") return OpKind::Generator;
        if (s == "keyed_sum") return OpKind::KeyedSum;
        if (s == "sliding_window") return OpKind::SlidingWindow;
        if (s == "sink") return OpKind::Sink;
        if (s == "scripted") return OpKind::Scripted;
        return std::nullopt;
    }

    std::optional<Partitioning> parse_partitioning(const std::string &s) noexcept
    {
        if (s == "keyed") return Partitioning::Keyed;
        if (s == "forward") return Partitioning::Forward;
        if (s == "broadcast") return Partitioning::Broadcast;
        return std::nullopt;
    }

    OperatorId JobSpec::operator_id(const std::string &opname) const
    {
        for (const auto &op : operators)
        {
            if (op.name == opname)
            {
                return op.id;
            }
        }
        raise(Errc::UnknownOperator, "no operator named '" + opname + "'");
    }

    namespace
    {
        std::vector<std::string> split_ws(const std::string &line)
        {
            std::vector<std::string> out;
            std::istringstream is(line);
            std::string tok;
            while (is >> tok)
            {
                out.push_back(tok);
            }
            return out;
        }

        // key=value attribute suffixes on operator lines
        bool take_attr(const std::string &tok, const std::string &key, std::string &value)
        {
            if (tok.rfind(key + "=", 0) != 0)
            {
                return false;
            }
            value = tok.substr(key.size() + 1);
            return true;
        }

        std::uint64_t to_u64(const std::string &s, const std::string &what)
        {
            try
            {
                return std::stoull(s);
            }
            catch (const std::exception &)
            {
                raise(Errc::BadConfig, "expected integer for " + what + ", got '" + s + "'");
            }
        }

        double to_f64(const std::string &s, const std::string &what)
        {
            try
            {
                return std::stod(s);
            }
            catch (const std::exception &)
            {
                raise(Errc::BadConfig, "expected number for " + what + ", got '" + s + "'");
            }
        }
    }

    JobSpec parse_job_spec(const std::string &text)
    {
        JobSpec spec;
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line))
        {
            if (auto hash = line.find('#'); hash != std::string::npos)
            {
                line.resize(hash);
            }
            const auto toks = split_ws(line);
            if (toks.empty())
            {
                continue;
            }
            const std::string &key = toks[0];
            auto need = [&](std::size_t n)
            {
                if (toks.size() < n + 1)
                {
                    raise(Errc::BadConfig, "'" + key + "' needs " + std::to_string(n) + " arguments");
                }
            };
            if (key == "name") { need(1); spec.name = toks[1]; }
            else if (key == "num_keygroups") { need(1); spec.num_keygroups = static_cast<std::uint32_t>(to_u64(toks[1], key)); }
            else if (key == "channel_capacity") { need(1); spec.channel_capacity = static_cast<std::uint32_t>(to_u64(toks[1], key)); }
            else if (key == "net_latency") { need(1); spec.net_latency = static_cast<Tick>(to_u64(toks[1], key)); }
            else if (key == "latency_jitter") { need(1); spec.latency_jitter = static_cast<std::uint32_t>(to_u64(toks[1], key)); }
            else if (key == "proc_interval") { need(1); spec.proc_interval = static_cast<Tick>(to_u64(toks[1], key)); }
            else if (key == "extract_interval") { need(1); spec.extract_interval = static_cast<Tick>(to_u64(toks[1], key)); }
            else if (key == "seed") { need(1); spec.seed = to_u64(toks[1], key); }
            else if (key == "rate") { need(1); spec.workload.rate = to_u64(toks[1], key); }
            else if (key == "duration") { need(1); spec.workload.duration = static_cast<Tick>(to_u64(toks[1], key)); }
            else if (key == "total_records") { need(1); spec.workload.total_records = to_u64(toks[1], key); }
            else if (key == "key_space") { need(1); spec.workload.key_space = to_u64(toks[1], key); }
            else if (key == "zipf_s") { need(1); spec.workload.zipf_s = to_f64(toks[1], key); }
            else if (key == "payload_bytes") { need(1); spec.workload.payload_bytes = static_cast<std::uint32_t>(to_u64(toks[1], key)); }
            else if (key == "watermark_period") { need(1); spec.workload.watermark_period = static_cast<Tick>(to_u64(toks[1], key)); }
            else if (key == "marker_period") { need(1); spec.workload.marker_period = static_cast<Tick>(to_u64(toks[1], key)); }
            else if (key == "operator")
            {
                need(2);
                OperatorSpec op;
                op.id = static_cast<OperatorId>(spec.operators.size());
                op.name = toks[1];
                auto kind = parse_op_kind(toks[2]);
                if (!kind)
                {
                    raise(Errc::BadConfig, "unknown operator kind '" + toks[2] + "'");
                }
                op.kind = *kind;
                for (std::size_t i = 3; i < toks.size(); ++i)
                {
                    std::string v;
                    if (take_attr(toks[i], "parallelism", v)) { op.parallelism = static_cast<std::uint32_t>(to_u64(v, "parallelism")); }
                    else if (take_attr(toks[i], "emit_every", v)) { op.emit_every = static_cast<std::uint32_t>(to_u64(v, "emit_every")); }
                    else if (take_attr(toks[i], "window_size", v)) { op.window_size = static_cast<Tick>(to_u64(v, "window_size")); }
                    else if (take_attr(toks[i], "window_slide", v)) { op.window_slide = static_cast<Tick>(to_u64(v, "window_slide")); }
                    else { raise(Errc::BadConfig, "unknown operator attribute '" + toks[i] + "'"); }
                }
                spec.operators.push_back(std::move(op));
            }
            else if (key == "edge")
            {
                need(3);
                EdgeSpec e;
                e.from = spec.operator_id(toks[1]);
                e.to = spec.operator_id(toks[2]);
                auto part = parse_partitioning(toks[3]);
                if (!part)
                {
                    raise(Errc::BadConfig, "unknown partitioning '" + toks[3] + "'");
                }
                e.partitioning = *part;
                spec.edges.push_back(e);
            }
            else
            {
                raise(Errc::BadConfig, "unknown job spec key '" + key + "'");
            }
        }
        return spec;
    }

    DataflowGraph build_graph(const JobSpec &spec)
    {
        if (spec.operators.empty())
        {
            raise(Errc::BadConfig, "job spec has no operators");
        }
        DataflowGraph g;
        g.spec = spec;

        for (const auto &e : spec.edges)
        {
            if (e.from >= spec.operators.size() || e.to >= spec.operators.size())
            {
                raise(Errc::UnknownOperator, "edge references unknown operator");
            }
            g.out_edges[e.from].push_back(e);
            g.in_edges[e.to].push_back(e);
        }

        // cycle detection over operators
        enum class Mark : std::uint8_t { White, Grey, Black };
        std::vector<Mark> mark(spec.operators.size(), Mark::White);
        std::vector<OperatorId> stack;
        for (OperatorId root = 0; root < spec.operators.size(); ++root)
        {
            if (mark[root] != Mark::White)
            {
                continue;
            }
            stack.push_back(root);
            std::vector<std::size_t> edge_pos{0};
            mark[root] = Mark::Grey;
            while (!stack.empty())
            {
                const OperatorId cur = stack.back();
                auto &pos = edge_pos.back();
                const auto &outs = g.out_edges[cur];
                if (pos < outs.size())
                {
                    const OperatorId next = outs[pos++].to;
                    if (mark[next] == Mark::Grey)
                    {
                        raise(Errc::GraphCycle, "cycle through operator '" + spec.operators[next].name + "'");
                    }
                    if (mark[next] == Mark::White)
                    {
                        mark[next] = Mark::Grey;
                        stack.push_back(next);
                        edge_pos.push_back(0);
                    }
                }
                else
                {
                    mark[cur] = Mark::Black;
                    stack.pop_back();
                    edge_pos.pop_back();
                }
            }
        }

        bool have_source = false;
        bool have_sink = false;
        for (const auto &op : spec.operators)
        {
            if (op.parallelism == 0)
            {
                raise(Errc::BadConfig, "operator '" + op.name + "' has parallelism 0");
            }
            const bool stateful = op.kind == OpKind::KeyedSum || op.kind == OpKind::SlidingWindow;
            if (stateful && op.parallelism > spec.num_keygroups)
            {
                raise(Errc::InvalidPartitioning,
                      "operator '" + op.name + "' parallelism " + std::to_string(op.parallelism) +
                          " exceeds num_keygroups " + std::to_string(spec.num_keygroups));
            }
            if (g.in_edges[op.id].empty())
            {
                if (op.kind != OpKind::Generator && op.kind != OpKind::Scripted)
                {
                    raise(Errc::BadConfig, "operator '" + op.name + "' has no inputs and is not a source");
                }
                g.sources.push_back(op.id);
                have_source = true;
            }
            if (g.out_edges[op.id].empty())
            {
                g.sinks.push_back(op.id);
                have_sink = true;
            }
            for (const auto &e : g.in_edges[op.id])
            {
                if (e.partitioning == Partitioning::Keyed && !stateful)
                {
                    raise(Errc::BadConfig, "keyed edge into stateless operator '" + op.name + "'");
                }
            }
        }
        if (!have_source || !have_sink)
        {
            raise(Errc::BadConfig, "graph must have at least one source and one sink");
        }
        return g;
    }

    JobSpec default_pipeline(OpKind stateful_kind, std::uint32_t parallelism,
                             std::uint32_t num_keygroups, std::uint64_t seed)
    {
        JobSpec spec;
        spec.name = stateful_kind == OpKind::KeyedSum ? "keyed_sum" : "window";
        spec.num_keygroups = num_keygroups;
        spec.seed = seed;

        OperatorSpec gen;
        gen.id = 0;
        gen.name = "gen";
        gen.kind = OpKind::Generator;
        gen.parallelism = 1;
        spec.operators.push_back(gen);

        OperatorSpec agg;
        agg.id = 1;
        agg.name = "agg";
        agg.kind = stateful_kind;
        agg.parallelism = parallelism;
        spec.operators.push_back(agg);

        OperatorSpec sink;
        sink.id = 2;
        sink.name = "out";
        sink.kind = OpKind::Sink;
        sink.parallelism = 1;
        spec.operators.push_back(sink);

        spec.edges.push_back(EdgeSpec{0, 1, Partitioning::Keyed});
        spec.edges.push_back(EdgeSpec{1, 2, Partitioning::Forward});
        return spec;
    }
}
