#pragma once

#include <stdexcept>
#include <string>

namespace rill
{
    enum class Errc
    {
        GraphCycle,
        InvalidPartitioning,
        ChannelClosed,
        SenderMismatch,
        SimulationDrained,
        DuplicateCheckpoint,
        IncompleteTable,
        IllegalStateTransition,
        DuplicateChunk,
        UnexpectedChunk,
        SubscaleOverlap,
        StaleTrigger,
        ProtocolError,
        DuplicateConfirm,
        NotMigrated,
        UnknownOperator,
        DeployConflict,
        SessionIncomplete,
        IncompleteTrace,
        MalformedRecord,
        WatermarkRegression,
        BadConfig,
    };

    const char *errc_name(Errc c) noexcept;

    class Error : public std::runtime_error
    {
    public:
        Error(Errc code, const std::string &what)
            : std::runtime_error(std::string(errc_name(code)) + ": " + what), m_code(code)
        {
        }

        Errc code() const noexcept { return m_code; }

    private:
        Errc m_code;
    };

    [[noreturn]] inline void raise(Errc code, const std::string &what)
    {
        throw Error(code, what);
    }
}
