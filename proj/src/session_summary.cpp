#include "rill/engine.hpp"

#include <json.hpp>

namespace rill
{
    std::string Engine::session_summary_json() const
    {
        nlohmann::json root = nlohmann::json::array();
        for (const auto &s : m_sessions)
        {
            nlohmann::json js;
            js["session"] = s.id;
            js["operator"] = s.op;
            js["protocol"] = protocol_name(s.protocol);
            js["started_at"] = s.started_at;
            js["ended_at"] = s.ended_at;
            js["terminated"] = s.terminated;

            nlohmann::json plan;
            nlohmann::json migrations = nlohmann::json::array();
            for (const auto &m : s.plan.migrations)
            {
                migrations.push_back({{"kg", m.kg}, {"source", m.source}, {"target", m.target}});
            }
            plan["migrations"] = std::move(migrations);
            js["plan"] = std::move(plan);

            nlohmann::json subs = nlohmann::json::array();
            for (const auto &sub : s.subscales)
            {
                nlohmann::json jsub;
                jsub["id"] = sub.id;
                jsub["source"] = sub.source;
                jsub["target"] = sub.target;
                jsub["keygroups"] = sub.keygroups;
                switch (sub.phase)
                {
                case SubscalePhase::Pending: jsub["phase"] = "pending"; break;
                case SubscalePhase::Triggered: jsub["phase"] = "triggered"; break;
                case SubscalePhase::Migrating: jsub["phase"] = "migrating"; break;
                case SubscalePhase::Completed: jsub["phase"] = "completed"; break;
                case SubscalePhase::Cancelled: jsub["phase"] = "cancelled"; break;
                }
                auto it = s.injected_at.find(sub.id);
                if (it != s.injected_at.end())
                {
                    jsub["injected_at"] = it->second;
                }
                subs.push_back(std::move(jsub));
            }
            js["subscales"] = std::move(subs);
            root.push_back(std::move(js));
        }
        return root.dump(2);
    }
}
